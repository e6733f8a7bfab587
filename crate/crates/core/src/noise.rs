//! Reproducible Brownian increments on a master grid, with exact coarsening.
//!
//! Each path owns an independent ChaCha stream keyed by a SHA-256 digest of
//! `(seed, path_id)`. Increments are rounded to integer multiples of
//! [`INCREMENT_QUANTUM`] so that every partial sum of a path's increments is
//! exactly representable. Coarse increments therefore equal the sum of the
//! master increments they cover independently of summation grouping, which
//! makes the coupling between step sizes bitwise exact.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Result, SddeError};

/// Increments are integer multiples of `2⁻³²`. Sums stay exact while the
/// running total is below `2²¹` in magnitude.
pub const INCREMENT_QUANTUM: f64 = 1.0 / 4_294_967_296.0;

#[inline]
fn quantize(v: f64) -> f64 {
    (v / INCREMENT_QUANTUM).round() * INCREMENT_QUANTUM
}

fn path_rng(seed: u64, path_id: u64) -> ChaCha12Rng {
    keyed_rng(b"sdde-brownian-v1", seed, path_id)
}

/// A ChaCha stream keyed by `SHA-256(domain, seed, index)`.
pub(crate) fn keyed_rng(domain: &[u8], seed: u64, index: u64) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(domain);
    hasher.update(seed.to_le_bytes());
    hasher.update(index.to_le_bytes());
    let key: [u8; 32] = hasher.finalize().into();
    ChaCha12Rng::from_seed(key)
}

/// Brownian increments of one path on a uniform master grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BrownianLattice {
    master_dt: f64,
    n_steps: usize,
    noise_dim: usize,
    seed: u64,
    path_id: u64,
}

impl BrownianLattice {
    pub fn new(master_dt: f64, n_steps: usize, noise_dim: usize, seed: u64, path_id: u64) -> Result<Self> {
        if !(master_dt > 0.0 && master_dt.is_finite()) {
            return Err(SddeError::arg(format!("master step must be positive, got {master_dt}")));
        }
        if n_steps == 0 || noise_dim == 0 {
            return Err(SddeError::arg("lattice needs at least one step and one noise component"));
        }
        Ok(Self {
            master_dt,
            n_steps,
            noise_dim,
            seed,
            path_id,
        })
    }

    pub fn master_dt(&self) -> f64 {
        self.master_dt
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path_id(&self) -> u64 {
        self.path_id
    }

    /// Streams the master increments without storing them.
    pub fn stream(&self) -> IncrementStream {
        IncrementStream {
            rng: path_rng(self.seed, self.path_id),
            scale: self.master_dt.sqrt(),
            remaining: self.n_steps,
        }
    }

    /// Streams coarse increments, each the left-to-right sum of `factor`
    /// consecutive master increments.
    pub fn coarse_stream(&self, factor: usize) -> Result<CoarseStream> {
        if factor == 0 || !self.n_steps.is_multiple_of(factor) {
            return Err(SddeError::arg(format!(
                "coarsening factor {factor} does not divide {} master steps",
                self.n_steps
            )));
        }
        Ok(CoarseStream {
            inner: self.stream(),
            factor,
            scratch: vec![0.0; self.noise_dim],
        })
    }

    pub fn master_increments(&self) -> Vec<Vec<f64>> {
        collect(self.stream(), self.noise_dim, self.n_steps)
    }

    pub fn coarsen(&self, factor: usize) -> Result<Vec<Vec<f64>>> {
        let stream = self.coarse_stream(factor)?;
        Ok(collect(stream, self.noise_dim, self.n_steps / factor))
    }
}

fn collect(mut stream: impl NextIncrement, noise_dim: usize, len: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(len);
    let mut buf = vec![0.0; noise_dim];
    while stream.next_into(&mut buf) {
        out.push(buf.clone());
    }
    out
}

/// Pull-style source of increments writing into a caller buffer.
pub trait NextIncrement {
    /// Writes the next increment into `out`; returns `false` when exhausted.
    fn next_into(&mut self, out: &mut [f64]) -> bool;
}

pub struct IncrementStream {
    rng: ChaCha12Rng,
    scale: f64,
    remaining: usize,
}

impl NextIncrement for IncrementStream {
    fn next_into(&mut self, out: &mut [f64]) -> bool {
        if self.remaining == 0 {
            return false;
        }
        self.remaining -= 1;
        for o in out.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            *o = quantize(self.scale * z);
        }
        true
    }
}

pub struct CoarseStream {
    inner: IncrementStream,
    factor: usize,
    scratch: Vec<f64>,
}

impl NextIncrement for CoarseStream {
    fn next_into(&mut self, out: &mut [f64]) -> bool {
        out.fill(0.0);
        for _ in 0..self.factor {
            if !self.inner.next_into(&mut self.scratch) {
                return false;
            }
            for (o, s) in out.iter_mut().zip(&self.scratch) {
                *o += s;
            }
        }
        true
    }
}

/// Seed and master resolution shared by every path of an ensemble.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LatticeFamily {
    pub seed: u64,
    pub master_dt: f64,
    pub noise_dim: usize,
}

impl LatticeFamily {
    pub fn new(seed: u64, master_dt: f64, noise_dim: usize) -> Result<Self> {
        BrownianLattice::new(master_dt, 1, noise_dim, seed, 0)?;
        Ok(Self {
            seed,
            master_dt,
            noise_dim,
        })
    }

    pub fn lattice(&self, path_id: u64, n_steps: usize) -> Result<BrownianLattice> {
        BrownianLattice::new(self.master_dt, n_steps, self.noise_dim, self.seed, path_id)
    }

    /// Number of master steps per step of size `delta`, if `delta` is an
    /// integer multiple of the master step.
    pub fn factor_for(&self, delta: f64) -> Result<usize> {
        integer_ratio(delta, self.master_dt).ok_or_else(|| {
            SddeError::arg(format!(
                "step {delta} is not an integer multiple of the master step {}",
                self.master_dt
            ))
        })
    }
}

/// `Some(n)` when `num / den` is within `1e-9` relative of a positive integer.
pub(crate) fn integer_ratio(num: f64, den: f64) -> Option<usize> {
    let r = num / den;
    let n = r.round();
    if n >= 1.0 && (r - n).abs() <= 1e-9 * n && n < usize::MAX as f64 {
        Some(n as usize)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bits(v: &[Vec<f64>]) -> Vec<u64> {
        v.iter().flatten().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn regeneration_is_bitwise_identical() {
        let l = BrownianLattice::new(0.01, 500, 2, 42, 7).unwrap();
        assert_eq!(bits(&l.master_increments()), bits(&l.master_increments()));
    }

    #[test]
    fn distinct_paths_differ() {
        let a = BrownianLattice::new(0.01, 100, 1, 42, 0).unwrap();
        let b = BrownianLattice::new(0.01, 100, 1, 42, 1).unwrap();
        assert_ne!(bits(&a.master_increments()), bits(&b.master_increments()));
        let c = BrownianLattice::new(0.01, 100, 1, 43, 0).unwrap();
        assert_ne!(bits(&a.master_increments()), bits(&c.master_increments()));
    }

    #[test]
    fn coarsen_identity_and_total() {
        let l = BrownianLattice::new(1e-3, 64, 2, 9, 3).unwrap();
        let master = l.master_increments();
        assert_eq!(bits(&l.coarsen(1).unwrap()), bits(&master));

        let total = l.coarsen(64).unwrap();
        assert_eq!(total.len(), 1);
        for j in 0..2 {
            let s: f64 = master.iter().map(|v| v[j]).sum();
            assert_eq!(total[0][j].to_bits(), s.to_bits());
        }
    }

    #[test]
    fn non_divisible_factor_is_rejected() {
        let l = BrownianLattice::new(1e-3, 10, 1, 0, 0).unwrap();
        assert!(l.coarsen(3).is_err());
        assert!(l.coarsen(0).is_err());
        assert!(l.coarse_stream(4).is_err());
    }

    #[test]
    fn increments_are_quantized() {
        let l = BrownianLattice::new(1e-4, 1000, 1, 1, 1).unwrap();
        for v in l.master_increments().iter().flatten() {
            let k = v / INCREMENT_QUANTUM;
            assert_eq!(k, k.round());
        }
    }

    #[test]
    fn sample_variance_matches_master_dt() {
        // 10⁶ scalar increments with dt = 10⁻³: the sample variance has
        // standard deviation dt·√(2/N) ≈ 1.41·10⁻⁶, so ±3·10⁻⁵ is ~21σ.
        let dt = 1e-3;
        let n_paths = 100u64;
        let per_path = 10_000usize;
        let (mut sum, mut sum_sq) = (0.0f64, 0.0f64);
        for path in 0..n_paths {
            let l = BrownianLattice::new(dt, per_path, 1, 2024, path).unwrap();
            let mut s = l.stream();
            let mut buf = [0.0];
            while s.next_into(&mut buf) {
                sum += buf[0];
                sum_sq += buf[0] * buf[0];
            }
        }
        let n = (n_paths as usize * per_path) as f64;
        let mean = sum / n;
        let var = sum_sq / n - mean * mean;
        assert!((var - dt).abs() < 3e-5, "variance {var}");
        // mean within 4σ/√N
        assert!(mean.abs() < 4.0 * dt.sqrt() / n.sqrt(), "mean {mean}");
    }

    #[test]
    fn independent_across_paths() {
        let n = 200_000usize;
        let a = BrownianLattice::new(1.0, n, 1, 5, 10).unwrap().master_increments();
        let b = BrownianLattice::new(1.0, n, 1, 5, 11).unwrap().master_increments();
        let (ma, mb) = (
            a.iter().map(|v| v[0]).sum::<f64>() / n as f64,
            b.iter().map(|v| v[0]).sum::<f64>() / n as f64,
        );
        let mut sab = 0.0;
        let mut saa = 0.0;
        let mut sbb = 0.0;
        for (x, y) in a.iter().zip(&b) {
            sab += (x[0] - ma) * (y[0] - mb);
            saa += (x[0] - ma).powi(2);
            sbb += (y[0] - mb).powi(2);
        }
        let r = sab / (saa * sbb).sqrt();
        assert!(r.abs() < 4.0 / (n as f64).sqrt(), "r = {r}");
    }

    #[test]
    fn components_are_uncorrelated_with_unit_scaled_variance() {
        let n = 100_000usize;
        let dt = 0.25;
        let inc = BrownianLattice::new(dt, n, 2, 77, 0).unwrap().master_increments();
        let nf = n as f64;
        let c00 = inc.iter().map(|v| v[0] * v[0]).sum::<f64>() / nf;
        let c11 = inc.iter().map(|v| v[1] * v[1]).sum::<f64>() / nf;
        let c01 = inc.iter().map(|v| v[0] * v[1]).sum::<f64>() / nf;
        let sd = dt * (2.0 / nf).sqrt();
        assert!((c00 - dt).abs() < 4.0 * sd);
        assert!((c11 - dt).abs() < 4.0 * sd);
        assert!(c01.abs() < 4.0 * dt / nf.sqrt());
    }

    #[test]
    fn factor_detection() {
        let fam = LatticeFamily::new(1, 1.0 / 1024.0, 1).unwrap();
        assert_eq!(fam.factor_for(1.0 / 128.0).unwrap(), 8);
        assert_eq!(fam.factor_for(1.0 / 1024.0).unwrap(), 1);
        assert!(fam.factor_for(1.5 / 1024.0).is_err());
        assert!(fam.factor_for(1.0 / 2048.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn nested_coarsening_is_exact(a in 1usize..6, b in 1usize..6, blocks in 1usize..8, seed in any::<u64>(), path in 0u64..1000) {
            let n = a * b * blocks;
            let l = BrownianLattice::new(1e-3, n, 2, seed, path).unwrap();
            let direct = l.coarsen(a * b).unwrap();
            let first = l.coarsen(a).unwrap();
            let nested: Vec<Vec<f64>> = first
                .chunks(b)
                .map(|c| {
                    let mut acc = vec![0.0; 2];
                    for v in c {
                        for (o, x) in acc.iter_mut().zip(v) {
                            *o += x;
                        }
                    }
                    acc
                })
                .collect();
            prop_assert_eq!(bits(&direct), bits(&nested));
            let total_master: f64 = l.master_increments().iter().map(|v| v[0]).sum();
            let total_coarse: f64 = direct.iter().map(|v| v[0]).sum();
            prop_assert_eq!(total_master.to_bits(), total_coarse.to_bits());
        }
    }
}
