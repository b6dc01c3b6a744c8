//! Seeded synthetic activations: von Mises–Fisher mixtures on the sphere,
//! optionally scaled and shifted off the origin.

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::calibration::{calibrate, ALL_PAIRS_LIMIT};
use crate::error::{Error, Result};
use crate::geometry;

fn unit_gaussian<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Uniform direction on the unit sphere in `dim` dimensions.
pub fn uniform_direction<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    unit_gaussian(rng, dim)
}

/// One vMF draw with unit `mean` and concentration `kappa`, by Wood's
/// rejection sampler for the cosine to the mean.
pub fn sample_vmf<R: Rng + ?Sized>(rng: &mut R, mean: &[f64], kappa: f64) -> Vec<f64> {
    let d = mean.len();
    if d == 1 || kappa <= 0.0 {
        return if d == 1 { mean.to_vec() } else { unit_gaussian(rng, d) };
    }
    let m = (d - 1) as f64;
    let b = m / (2.0 * kappa + (4.0 * kappa * kappa + m * m).sqrt());
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + m * (1.0 - x0 * x0).ln();
    let beta = Beta::new(m / 2.0, m / 2.0).expect("positive shape");
    let w = loop {
        let z: f64 = beta.sample(rng);
        let w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
        let u: f64 = rng.random();
        if kappa * w + m * (1.0 - x0 * w).ln() - c >= u.ln() {
            break w;
        }
    };
    // tangent direction orthogonal to the mean
    let v = loop {
        let g = unit_gaussian(rng, d);
        let proj: f64 = g.iter().zip(mean).map(|(a, b)| a * b).sum();
        let t: Vec<f64> = g.iter().zip(mean).map(|(a, b)| a - proj * b).collect();
        let n = t.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            break t.into_iter().map(|x| x / n).collect::<Vec<_>>();
        }
    };
    let s = (1.0 - w * w).max(0.0).sqrt();
    mean.iter().zip(&v).map(|(a, t)| w * a + s * t).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct VmfComponent {
    pub mean: Vec<f64>,
    pub kappa: f64,
    pub weight: f64,
}

/// Mixture of vMF components; raw samples are `offset + scale · x`.
#[derive(Debug, Clone, PartialEq)]
pub struct VmfMixture {
    pub components: Vec<VmfComponent>,
    pub offset: Vec<f64>,
    pub scale: f64,
}

impl VmfMixture {
    /// `k` equally weighted components with Gaussian-random means.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, k: usize, dim: usize, kappa: f64) -> Result<Self> {
        Self::with_weights(rng, &vec![1.0; k], &vec![kappa; k], dim)
    }

    /// Components with given relative weights and concentrations.
    pub fn with_weights<R: Rng + ?Sized>(rng: &mut R, weights: &[f64], kappas: &[f64], dim: usize) -> Result<Self> {
        if weights.is_empty() || dim == 0 {
            return Err(Error::InvalidArgument("mixture needs components and a dimension".into()));
        }
        if weights.len() != kappas.len() {
            return Err(Error::LengthMismatch {
                left: weights.len(),
                right: kappas.len(),
            });
        }
        if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) || kappas.iter().any(|k| !(*k >= 0.0 && k.is_finite())) {
            return Err(Error::InvalidArgument("weights must be positive and kappas non-negative".into()));
        }
        let components = weights
            .iter()
            .zip(kappas)
            .map(|(&weight, &kappa)| VmfComponent {
                mean: unit_gaussian(rng, dim),
                kappa,
                weight,
            })
            .collect();
        Ok(Self {
            components,
            offset: vec![0.0; dim],
            scale: 1.0,
        })
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn with_offset(mut self, offset: Vec<f64>, scale: f64) -> Self {
        assert_eq!(offset.len(), self.dim());
        self.offset = offset;
        self.scale = scale;
        self
    }

    fn pick<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        let mut t = rng.random::<f64>() * total;
        for (i, c) in self.components.iter().enumerate() {
            if t < c.weight {
                return i;
            }
            t -= c.weight;
        }
        self.components.len() - 1
    }

    /// `n` raw samples, flat row-major, with their component labels.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> (Vec<f32>, Vec<u32>) {
        let mut rows = Vec::with_capacity(n * self.dim());
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let i = self.pick(rng);
            let c = &self.components[i];
            let x = sample_vmf(rng, &c.mean, c.kappa);
            rows.extend(x.iter().zip(&self.offset).map(|(x, o)| (o + self.scale * x) as f32));
            labels.push(i as u32);
        }
        (rows, labels)
    }

    /// `n` raw points whose direction from the offset is uniform.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<f32> {
        let mut rows = Vec::with_capacity(n * self.dim());
        for _ in 0..n {
            let x = uniform_direction(rng, self.dim());
            rows.extend(x.iter().zip(&self.offset).map(|(x, o)| (o + self.scale * x) as f32));
        }
        rows
    }
}

/// Distance bands of a labelled calibration sample, centred on its own mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceBands {
    /// Largest distance between two rows with the same label.
    pub within_max: f64,
    /// Smallest distance between rows with different labels.
    pub between_min: f64,
    pub within_pairs: u64,
    pub pairs: u64,
}

impl DistanceBands {
    pub fn separated(&self) -> bool {
        self.within_pairs > 0 && self.within_pairs < self.pairs && self.within_max < self.between_min
    }

    /// Percentile at which calibration on the same sample interpolates
    /// halfway between the two bands; `None` unless the bands separate.
    pub fn gap_percentile(&self) -> Option<f64> {
        self.separated()
            .then(|| 100.0 * (self.within_pairs as f64 - 0.5) / (self.pairs - 1) as f64)
    }
}

/// Pairwise distance bands of a labelled sample as calibration would see it.
/// Degenerate rows are ignored; the sample must be small enough that
/// calibration uses every pair.
pub fn distance_bands(sample: &[f32], dim: usize, labels: &[u32]) -> Result<DistanceBands> {
    if labels.len() * dim != sample.len() {
        return Err(Error::LengthMismatch {
            left: sample.len() / dim.max(1),
            right: labels.len(),
        });
    }
    let mu = calibrate(sample, dim, 50.0, 0)?.mu;
    let normed = geometry::center_normalize_rows(sample, &mu)?;
    if normed.len() > ALL_PAIRS_LIMIT {
        return Err(Error::InvalidArgument(format!(
            "at most {ALL_PAIRS_LIMIT} usable rows, got {}",
            normed.len()
        )));
    }
    let rows: Vec<&[f32]> = normed.dirs.chunks_exact(dim).collect();
    let mut bands = DistanceBands {
        within_max: f64::NEG_INFINITY,
        between_min: f64::INFINITY,
        within_pairs: 0,
        pairs: 0,
    };
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let d = 1.0 - geometry::dot(rows[i], rows[j]);
            bands.pairs += 1;
            if labels[normed.rows[i]] == labels[normed.rows[j]] {
                bands.within_pairs += 1;
                bands.within_max = bands.within_max.max(d);
            } else {
                bands.between_min = bands.between_min.min(d);
            }
        }
    }
    Ok(bands)
}
