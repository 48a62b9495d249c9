fn main() {
    std::process::exit(sensiq::cli::main_with_args(std::env::args_os()));
}
