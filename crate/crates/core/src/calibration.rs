//! Corpus centre and percentile-calibrated distance threshold.

use std::io::Read;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, check_dim};
use crate::kernel;
use crate::stream::StreamReader;

pub const DEFAULT_BUDGET: usize = 2000;

/// Above this many usable vectors the pair set is subsampled.
pub const ALL_PAIRS_LIMIT: usize = 4000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// Corpus centre, in activation units.
    pub mu: Vec<f32>,
    /// Percentile in (0, 100).
    pub p: f64,
    /// Cosine-distance threshold.
    pub theta: f64,
    /// Vectors drawn for calibration (including degenerate ones).
    pub sample_budget: u64,
    pub pair_count: u64,
    pub seed: u64,
    pub skipped_degenerate: u64,
}

impl Calibration {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Structural checks shared by loaders.
    pub fn validate(&self) -> Result<()> {
        if self.mu.is_empty() {
            return Err(Error::InvariantViolation("calibration centre is empty".into()));
        }
        if self.mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("calibration centre"));
        }
        if !(self.p > 0.0 && self.p < 100.0) {
            return Err(Error::InvalidPercentile(self.p));
        }
        if !(0.0..=2.0).contains(&self.theta) {
            return Err(Error::InvariantViolation(format!(
                "theta {} outside [0, 2]",
                self.theta
            )));
        }
        Ok(())
    }
}

fn check_percentile(p: f64) -> Result<()> {
    if !(p > 0.0 && p < 100.0) {
        return Err(Error::InvalidPercentile(p));
    }
    Ok(())
}

/// Linear-interpolation percentile over the ascending order statistics:
/// rank `r = (p/100)(n−1)`, value `v[⌊r⌋] + frac(r)(v[⌈r⌉] − v[⌊r⌋])`.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    check_percentile(p)?;
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("percentile input"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    Ok(percentile_sorted(&sorted, p))
}

fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Calibrates on a flat row-major sample of raw activations.
///
/// `mu` is the mean of every sampled vector; `theta` is the `p`-th percentile
/// of the pairwise cosine distances between the vectors centred on that same
/// `mu`. Degenerate vectors are skipped and counted.
pub fn calibrate(sample: &[f32], dim: usize, p: f64, seed: u64) -> Result<Calibration> {
    check_percentile(p)?;
    if dim == 0 {
        return Err(Error::InvalidArgument("dim must be positive".into()));
    }
    if sample.len() % dim != 0 {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: sample.len() % dim,
        });
    }
    let n = sample.len() / dim;
    if n < 2 {
        return Err(Error::InsufficientSample { usable: n });
    }
    if sample.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("calibration sample"));
    }

    let mut acc = vec![0f64; dim];
    for row in sample.chunks_exact(dim) {
        for (a, x) in acc.iter_mut().zip(row) {
            *a += *x as f64;
        }
    }
    let mu: Vec<f32> = acc.iter().map(|s| (s / n as f64) as f32).collect();

    let mut dirs = Vec::with_capacity(sample.len());
    let mut scratch = vec![0f32; dim];
    let mut skipped = 0u64;
    for row in sample.chunks_exact(dim) {
        match geometry::center_normalize_into(row, &mu, &mut scratch) {
            Ok(()) => dirs.extend_from_slice(&scratch),
            Err(Error::DegenerateActivation { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    let usable = dirs.len() / dim;
    if usable < 2 {
        return Err(Error::InsufficientSample { usable });
    }

    let mut dists = if usable <= ALL_PAIRS_LIMIT {
        all_pair_distances(&dirs, dim)
    } else {
        sampled_pair_distances(&dirs, dim, seed)
    };
    let pair_count = dists.len() as u64;
    dists.par_sort_unstable_by(f64::total_cmp);
    let theta = percentile_sorted(&dists, p).clamp(0.0, 2.0);

    Ok(Calibration {
        mu,
        p,
        theta,
        sample_budget: n as u64,
        pair_count,
        seed,
        skipped_degenerate: skipped,
    })
}

fn all_pair_distances(dirs: &[f32], dim: usize) -> Vec<f64> {
    const BLOCK: usize = 64;
    let n = dirs.len() / dim;
    let dirs = kernel::widen(dirs);
    let dirs = dirs.as_slice();
    let blocks: Vec<usize> = (0..n).step_by(BLOCK).collect();
    let parts: Vec<Vec<f64>> = blocks
        .par_iter()
        .map(|&start| {
            let end = (start + BLOCK).min(n);
            let rows = &dirs[(start + 1) * dim..];
            let mut out = Vec::new();
            if rows.is_empty() {
                return out;
            }
            let nk = n - start - 1;
            let mut block = vec![0f64; (end - start) * nk];
            kernel::gemm(&dirs[start * dim..end * dim], rows, dim, &mut block);
            for qi in 0..end - start {
                let i = start + qi;
                // columns are offset by start + 1; keep j > i
                let first = i - start;
                out.extend(block[qi * nk + first..(qi + 1) * nk].iter().map(|d| 1.0 - d));
            }
            out
        })
        .collect();
    parts.concat()
}

fn sampled_pair_distances(dirs: &[f32], dim: usize, seed: u64) -> Vec<f64> {
    let n = dirs.len() / dim;
    let m = ALL_PAIRS_LIMIT * (ALL_PAIRS_LIMIT - 1) / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs: Vec<(usize, usize)> = (0..m)
        .map(|_| {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            (i, j)
        })
        .collect();
    pairs
        .par_iter()
        .map(|&(i, j)| 1.0 - kernel::dot(&dirs[i * dim..(i + 1) * dim], &dirs[j * dim..(j + 1) * dim]))
        .collect()
}

/// Draws the first `budget` records of a stream and calibrates on them.
pub fn calibrate_stream<R: Read>(
    reader: &mut StreamReader<R>,
    p: f64,
    budget: usize,
    seed: u64,
) -> Result<Calibration> {
    if budget == 0 {
        return Err(Error::InvalidArgument("budget must be positive".into()));
    }
    let dim = reader.dim();
    let mut sample = Vec::with_capacity(budget.min(1 << 20) * dim);
    while sample.len() / dim < budget {
        let left = budget - sample.len() / dim;
        match reader.next_batch_limited(left)? {
            Some(b) => sample.extend_from_slice(b.as_flat()),
            None => break,
        }
    }
    calibrate(&sample, dim, p, seed)
}

/// Checks that a calibration and a stream agree on dimension.
pub fn check_stream_dim(cal: &Calibration, dim: usize) -> Result<()> {
    check_dim(cal.dim(), dim)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_examples() {
        assert_eq!(percentile(&[0.0, 1.0], 50.0).unwrap(), 0.5);
        for p in [0.1, 10.0, 50.0, 99.9] {
            assert_eq!(percentile(&[7.0], p).unwrap(), 7.0);
        }
        assert_eq!(percentile(&[4.0, 2.0, 3.0, 1.0], 25.0).unwrap(), 1.75);
        assert!(matches!(percentile(&[], 50.0), Err(Error::EmptyInput)));
        assert!(matches!(percentile(&[1.0], 0.0), Err(Error::InvalidPercentile(_))));
        assert!(matches!(percentile(&[1.0], 100.0), Err(Error::InvalidPercentile(_))));
    }

    #[test]
    fn antipodal_pair_has_theta_two() {
        let sample = [3.0f32, 1.0, -1.0, 1.0];
        for p in [1.0, 50.0, 99.0] {
            let c = calibrate(&sample, 2, p, 0).unwrap();
            assert_eq!(c.theta, 2.0);
            assert_eq!(c.mu, vec![1.0, 1.0]);
            assert_eq!(c.pair_count, 1);
        }
    }

    #[test]
    fn identical_vectors_are_insufficient() {
        let sample = [0.5f32, 2.0].repeat(10);
        assert!(matches!(
            calibrate(&sample, 2, 10.0, 0),
            Err(Error::InsufficientSample { usable: 0 })
        ));
    }

    #[test]
    fn default_budget_pair_count() {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dim = 8;
        let sample: Vec<f32> = (0..DEFAULT_BUDGET * dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let c = calibrate(&sample, dim, 10.0, 0).unwrap();
        assert_eq!(c.pair_count, 1_999_000);
        assert_eq!(c.sample_budget, 2000);
    }

    #[test]
    fn theta_matches_brute_force_and_is_monotone() {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dim = 5;
        let n = 150;
        let sample: Vec<f32> = (0..n * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let c = calibrate(&sample, dim, 10.0, 0).unwrap();

        let dirs: Vec<Vec<f64>> = sample
            .chunks(dim)
            .map(|r| {
                let v: Vec<f64> = r.iter().zip(&c.mu).map(|(a, m)| (*a - *m) as f64).collect();
                let nn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter().map(|x| x / nn).collect()
            })
            .collect();
        let mut brute = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                brute.push(1.0 - dirs[i].iter().zip(&dirs[j]).map(|(a, b)| a * b).sum::<f64>());
            }
        }
        let expected = percentile(&brute, 10.0).unwrap();
        assert!((c.theta - expected).abs() < 1e-6);

        let mut last = 0.0;
        for p in [1.0, 5.0, 10.0, 25.0, 50.0, 90.0] {
            let t = calibrate(&sample, dim, p, 0).unwrap().theta;
            assert!(t >= last);
            last = t;
        }
    }

    #[test]
    fn subsampled_pairs_are_capped_and_seeded() {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dim = 3;
        let n = ALL_PAIRS_LIMIT + 10;
        let sample: Vec<f32> = (0..n * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let a = calibrate(&sample, dim, 10.0, 1).unwrap();
        let b = calibrate(&sample, dim, 10.0, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pair_count as usize, ALL_PAIRS_LIMIT * (ALL_PAIRS_LIMIT - 1) / 2);
    }
}
