//! Per-region reproducibility: density as a predictor, measured against
//! cross-seed matched cosine.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::dictionary::{Basis, Dictionary};
use crate::error::{Error, Result};
use crate::matching::{cosine_matrix, hungarian, ScoreMatrix};

/// Names of the single-dictionary predictors, in report order.
pub const PREDICTORS: [&str; 5] = ["s", "c", "log10_n", "log10_nc", "density"];

pub const QUINTILES: usize = 5;

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateVariance);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(Error::TooFewValues {
            needed: 3,
            got: x.len(),
        });
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("spearman input"));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Residual of coherence after a least-squares fit on `log10 N`. When every
/// region has the same size the fit has no slope and the residual is
/// `c − mean(c)`.
pub fn size_controlled_coherence(dict: &Dictionary) -> Result<Vec<f64>> {
    let k = dict.len();
    if k < 3 {
        return Err(Error::TooFewValues { needed: 3, got: k });
    }
    let x: Vec<f64> = dict.regions.iter().map(|r| (r.count as f64).log10()).collect();
    let y: Vec<f64> = dict.regions.iter().map(|r| r.coherence()).collect();
    Ok(linear_residuals(&x, &y))
}

fn linear_residuals(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    x.iter().zip(y).map(|(a, b)| b - (my + slope * (a - mx))).collect()
}

/// Quintile (0 = lowest) of each value by ascending rank, ties by position.
pub fn quintiles(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut q = vec![0; values.len()];
    for (rank, &i) in order.iter().enumerate() {
        q[i] = rank * QUINTILES / values.len();
    }
    q
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionStability {
    /// Position of the dictionary in the input list.
    pub dictionary: usize,
    pub seed: u64,
    pub region: u32,
    pub count: u64,
    pub coherence: f64,
    pub density: f64,
    /// Exemplar–mean cosine.
    pub centrality: f64,
    /// Mean matched cosine over the other dictionaries; 0 where unmatched.
    pub stab: f64,
    pub quintile: usize,
}

impl RegionStability {
    fn predictor(&self, name: &str) -> f64 {
        match name {
            "s" => self.centrality,
            "c" => self.coherence,
            "log10_n" => (self.count as f64).log10(),
            "log10_nc" => (self.count as f64 * self.coherence).log10(),
            "density" => self.density,
            _ => unreachable!("unknown predictor {name}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    pub basis: Basis,
    pub seeds: Vec<u64>,
    pub rows: Vec<RegionStability>,
    /// Spearman ρ of each predictor against stab, pooled over dictionaries;
    /// `None` when either side has no variance.
    pub rho: Vec<(String, Option<f64>)>,
    /// Mean stab per density quintile, lowest first; `None` for empty groups.
    pub quintile_means: Vec<Option<f64>>,
}

impl StabilityReport {
    pub fn rho_of(&self, predictor: &str) -> Option<f64> {
        self.rho.iter().find(|(p, _)| p == predictor).and_then(|(_, r)| *r)
    }
}

fn check_compatible(dicts: &[Dictionary]) -> Result<()> {
    if dicts.len() < 2 {
        return Err(Error::TooFewDictionaries {
            needed: 2,
            got: dicts.len(),
        });
    }
    let first = &dicts[0];
    for d in &dicts[1..] {
        if d.dim() != first.dim() {
            return Err(Error::IncompatibleDictionaries(format!(
                "dimension {} vs {}",
                first.dim(),
                d.dim()
            )));
        }
        if d.calibration.p != first.calibration.p {
            return Err(Error::IncompatibleDictionaries(format!(
                "percentile {} vs {}",
                first.calibration.p, d.calibration.p
            )));
        }
    }
    if let Some(i) = dicts.iter().position(Dictionary::is_empty) {
        return Err(Error::IncompatibleDictionaries(format!("dictionary {i} is empty")));
    }
    Ok(())
}

/// Cross-seed stability of every region, matched on mean directions.
pub fn cross_seed_stability(dicts: &[Dictionary]) -> Result<StabilityReport> {
    check_compatible(dicts)?;
    let basis = Basis::Mean;
    let m = dicts.len();
    let jobs: Vec<(usize, usize)> = (0..m)
        .flat_map(|a| (0..m).filter(move |&b| b != a).map(move |b| (a, b)))
        .collect();
    let matched: Vec<Vec<f64>> = jobs
        .par_iter()
        .map(|&(a, b)| {
            let (da, db) = (&dicts[a], &dicts[b]);
            let cos = cosine_matrix(da, db, basis)?;
            let assignment = hungarian(&ScoreMatrix::new(da.len(), db.len(), cos.clone())?);
            let mut per_region = vec![0.0; da.len()];
            for (i, j) in assignment.pairs {
                per_region[i] = cos[i * db.len() + j];
            }
            Ok(per_region)
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for (a, dict) in dicts.iter().enumerate() {
        let densities: Vec<f64> = dict.regions.iter().map(|r| r.density()).collect();
        let q = quintiles(&densities);
        for (i, r) in dict.regions.iter().enumerate() {
            let total: f64 = jobs
                .iter()
                .zip(&matched)
                .filter(|((ja, _), _)| *ja == a)
                .map(|(_, cos)| cos[i])
                .sum();
            rows.push(RegionStability {
                dictionary: a,
                seed: dict.build.seed,
                region: r.id,
                count: r.count,
                coherence: r.coherence(),
                density: densities[i],
                centrality: r.centrality(),
                stab: total / (m - 1) as f64,
                quintile: q[i],
            });
        }
    }

    let stab: Vec<f64> = rows.iter().map(|r| r.stab).collect();
    let rho = PREDICTORS
        .iter()
        .map(|&p| {
            let x: Vec<f64> = rows.iter().map(|r| r.predictor(p)).collect();
            match spearman(&x, &stab) {
                Ok(r) => Ok((p.to_string(), Some(r))),
                Err(Error::DegenerateVariance | Error::TooFewValues { .. }) => Ok((p.to_string(), None)),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let quintile_means = (0..QUINTILES)
        .map(|q| {
            let v: Vec<f64> = rows.iter().filter(|r| r.quintile == q).map(|r| r.stab).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect();
    Ok(StabilityReport {
        basis,
        seeds: dicts.iter().map(|d| d.build.seed).collect(),
        rows,
        rho,
        quintile_means,
    })
}

/// Per-region rows as CSV.
pub fn write_stability_csv<W: Write>(sink: W, report: &StabilityReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    if report.rows.is_empty() {
        w.write_record([
            "dictionary",
            "seed",
            "region",
            "count",
            "coherence",
            "density",
            "centrality",
            "stab",
            "quintile",
        ])?;
    }
    for r in &report.rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Summary block: `kind,key,value` rows for each ρ and quintile mean. Missing
/// values are left empty.
pub fn write_stability_summary_csv<W: Write>(sink: W, report: &StabilityReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["kind", "key", "value"])?;
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (p, r) in &report.rho {
        w.write_record(["spearman", p.as_str(), &fmt(*r)])?;
    }
    for (q, v) in report.quintile_means.iter().enumerate() {
        w.write_record(["quintile_mean_stab", &format!("q{}", q + 1), &fmt(*v)])?;
    }
    w.flush()?;
    Ok(())
}
