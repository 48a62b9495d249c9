use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use sha2::{Digest, Sha256};

/// Seeded generator backed by ChaCha8.
///
/// ChaCha8 output is specified independently of the host, so a given seed
/// yields the same stream on every platform. Normal draws go through
/// `rand_distr`'s ziggurat sampler on top of that stream.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream for `(seed, tag)`; see [`derive_seed`].
    pub fn derived(seed: u64, tag: &str) -> Self {
        Self::new(derive_seed(seed, tag))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random::<u64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Student-t with `dof` degrees of freedom drawn as `z / sqrt(chi2 / dof)`.
    pub fn student_t(&mut self, dof: f64) -> f64 {
        let z = self.normal();
        let chi = ChiSquared::new(dof)
            .expect("degrees of freedom validated by caller")
            .sample(&mut self.inner);
        z / (chi / dof).sqrt()
    }
}

/// Derives a child seed from `(seed, tag)` via SHA-256, taking the first
/// eight bytes little-endian. Distinct tags give unrelated streams.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}
