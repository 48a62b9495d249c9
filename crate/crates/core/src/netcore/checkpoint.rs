//! Line-oriented text checkpoint.
//!
//! ```text
//! NNMODEL 1
//! loss <mse|sce>
//! layer <name> <linear|relu|resblock>
//! dims <d_out> <d_in>        # linear: weight rows follow, then `bias` and one row
//! ```
//!
//! A `resblock` carries two such linear sections (fc1 then fc2). Numbers use
//! the shortest decimal that round-trips the `f64`.

use std::fmt::Write as _;
use std::path::Path;

use super::{Layer, Linear, LossKind, Network};
use crate::error::{Error, Result};
use crate::fmt::join_f64;
use crate::numerics::Matrix;

const MAGIC: &str = "NNMODEL 1";

pub fn to_checkpoint_string(net: &Network) -> String {
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    let _ = writeln!(out, "loss {}", net.loss_kind().tag());
    for layer in net.layers() {
        let _ = writeln!(out, "layer {} {}", layer.name(), layer.kind_tag());
        match layer {
            Layer::Linear(l) => write_linear(&mut out, l),
            Layer::Relu { .. } => {}
            Layer::ResBlock { fc1, fc2, .. } => {
                write_linear(&mut out, fc1);
                write_linear(&mut out, fc2);
            }
        }
    }
    out
}

fn write_linear(out: &mut String, l: &Linear) {
    let _ = writeln!(out, "dims {} {}", l.d_out(), l.d_in());
    for i in 0..l.weight.rows() {
        out.push_str(&join_f64(l.weight.row(i), " "));
        out.push('\n');
    }
    out.push_str("bias\n");
    out.push_str(&join_f64(&l.bias, " "));
    out.push('\n');
}

pub fn save_checkpoint(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_checkpoint_string(net)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&text)
}

struct Lines<'a> {
    inner: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self, what: &str) -> Result<(usize, &'a str)> {
        match self.inner.next() {
            Some((i, l)) => {
                self.last = i + 1;
                Ok((i + 1, l))
            }
            None => Err(Error::parse(
                self.last + 1,
                format!("unexpected end of file, expected {what}"),
            )),
        }
    }

    fn at_end(&mut self) -> bool {
        self.inner.peek().is_none()
    }
}

fn parse_numbers(line_no: usize, line: &str, expected: usize) -> Result<Vec<f64>> {
    let vals = line
        .split(' ')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::parse(line_no, format!("invalid number `{t}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    if vals.len() != expected {
        return Err(Error::parse(
            line_no,
            format!("expected {expected} numbers, found {}", vals.len()),
        ));
    }
    Ok(vals)
}

fn parse_linear(lines: &mut Lines<'_>, name: String) -> Result<Linear> {
    let (no, dims) = lines.next("`dims`")?;
    let parts: Vec<&str> = dims.split(' ').collect();
    let (d_out, d_in) = match parts.as_slice() {
        ["dims", a, b] => (
            a.parse::<usize>()
                .map_err(|_| Error::parse(no, format!("invalid d_out `{a}`")))?,
            b.parse::<usize>()
                .map_err(|_| Error::parse(no, format!("invalid d_in `{b}`")))?,
        ),
        _ => {
            return Err(Error::parse(
                no,
                format!("expected `dims <d_out> <d_in>`, found `{dims}`"),
            ))
        }
    };
    let mut data = Vec::with_capacity(d_out * d_in);
    for _ in 0..d_out {
        let (no, row) = lines.next("a weight row")?;
        data.extend(parse_numbers(no, row, d_in)?);
    }
    let (no, tag) = lines.next("`bias`")?;
    if tag != "bias" {
        return Err(Error::parse(no, format!("expected `bias`, found `{tag}`")));
    }
    let (no, row) = lines.next("the bias row")?;
    let bias = parse_numbers(no, row, d_out)?;
    let weight = Matrix::new(d_out, d_in, data)?;
    Linear::new(name, weight, bias)
}

pub fn parse_checkpoint(text: &str) -> Result<Network> {
    let mut lines = Lines {
        inner: text.lines().enumerate().peekable(),
        last: 0,
    };
    let (no, magic) = lines.next("header")?;
    if magic != MAGIC {
        return Err(Error::parse(no, format!("expected `{MAGIC}`, found `{magic}`")));
    }
    let (no, loss_line) = lines.next("`loss` line")?;
    let loss = loss_line
        .strip_prefix("loss ")
        .and_then(LossKind::from_tag)
        .ok_or_else(|| Error::parse(no, format!("expected `loss <mse|sce>`, found `{loss_line}`")))?;
    let mut layers = Vec::new();
    while !lines.at_end() {
        let (no, header) = lines.next("`layer` line")?;
        let parts: Vec<&str> = header.split(' ').collect();
        let ["layer", name, kind] = parts.as_slice() else {
            return Err(Error::parse(
                no,
                format!("expected `layer <name> <kind>`, found `{header}`"),
            ));
        };
        let name = name.to_string();
        let layer = match *kind {
            "linear" => Layer::Linear(parse_linear(&mut lines, name)?),
            "relu" => Layer::Relu { name },
            "resblock" => {
                let fc1 = parse_linear(&mut lines, format!("{name}.fc1"))?;
                let fc2 = parse_linear(&mut lines, format!("{name}.fc2"))?;
                Layer::resblock(name, fc1.weight, fc1.bias, fc2.weight, fc2.bias)
                    .map_err(|e| Error::parse(no, e.to_string()))?
            }
            other => return Err(Error::parse(no, format!("unknown layer kind `{other}`"))),
        };
        layers.push(layer);
    }
    Network::new(layers, loss).map_err(|e| Error::parse(lines.last, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn sample_net() -> Network {
        let mut rng = Rng::new(2);
        let w1 = Matrix::from_fn(3, 2, |_, _| rng.normal());
        let rw1 = Matrix::from_fn(4, 3, |_, _| rng.normal());
        let rw2 = Matrix::from_fn(3, 4, |_, _| rng.normal() * 1e-7);
        let w2 = Matrix::from_fn(2, 3, |_, _| rng.normal() * 1e5);
        Network::new(
            vec![
                Layer::linear("in", w1, vec![0.1, -0.2, 1.0 / 3.0]).unwrap(),
                Layer::relu("act"),
                Layer::resblock("blk", rw1, vec![0.0; 4], rw2, vec![1e-300, 2.5, -0.0]).unwrap(),
                Layer::linear("out", w2, vec![0.0, 7.0]).unwrap(),
            ],
            LossKind::SoftmaxCrossEntropy,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let net = sample_net();
        let text = to_checkpoint_string(&net);
        let back = parse_checkpoint(&text).unwrap();
        assert_eq!(back, net);
        assert_eq!(to_checkpoint_string(&back), text);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.nnm");
        save_checkpoint(&sample_net(), &p).unwrap();
        let first = std::fs::read(&p).unwrap();
        save_checkpoint(&load_checkpoint(&p).unwrap(), &p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), first);
    }

    #[test]
    fn hand_written_fixture() {
        let text = "NNMODEL 1\nloss mse\nlayer fc linear\ndims 2 3\n1 2 3\n-4 0.5 6e-3\nbias\n0 1\n";
        let net = parse_checkpoint(text).unwrap();
        let l = net.linear("fc").unwrap();
        assert_eq!(
            l.weight,
            Matrix::from_rows(&[[1.0, 2.0, 3.0], [-4.0, 0.5, 0.006]]).unwrap()
        );
        assert_eq!(l.bias, vec![0.0, 1.0]);
        assert_eq!(net.loss_kind(), LossKind::Mse);
    }

    #[test]
    fn truncated_file_reports_line() {
        let text = "NNMODEL 1\nloss mse\nlayer fc linear\ndims 2 3\n1 2 3\n";
        match parse_checkpoint(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 6),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_checkpoint(""), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn bad_number_reports_line() {
        let text = "NNMODEL 1\nloss mse\nlayer fc linear\ndims 1 2\n1 x\nbias\n0\n";
        match parse_checkpoint(text) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 5);
                assert!(message.contains('x'));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
