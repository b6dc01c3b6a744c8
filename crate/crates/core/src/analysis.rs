//! Studies layered on dictionaries: neighbourhoods, token profiles and their
//! overlap, behavioural labels, concept detection and saturation curves.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::builder::BuildTrace;
use crate::dictionary::{Basis, Dictionary};
use crate::error::{Error, Result};
use crate::geometry::{self, check_dim};
use crate::kernel;
use crate::stability::quintiles;

/// Regions closer (by basis cosine) to both anchors than the anchors are to
/// each other.
pub fn partition_neighbourhood(dict: &Dictionary, a: u32, b: u32, basis: Basis) -> Result<Vec<u32>> {
    let ra = dict.basis_row(basis, a as usize)?;
    let rb = dict.basis_row(basis, b as usize)?;
    if a == b {
        return Err(Error::InvalidArgument("anchors must differ".into()));
    }
    let ab = kernel::dot(ra, rb);
    Ok((0..dict.len() as u32)
        .filter(|&c| c != a && c != b)
        .filter(|&c| {
            let rc = &dict.basis_matrix(basis)[c as usize * dict.dim()..(c as usize + 1) * dict.dim()];
            kernel::dot(ra, rc) > ab && kernel::dot(rb, rc) > ab
        })
        .collect())
}

/// Basis-row dot products for every usable row, row-major `usable × K`.
fn basis_scores(dict: &Dictionary, dirs: &[f32], basis: Basis) -> Vec<f64> {
    let mut out = vec![0.0; dirs.len() / dict.dim() * dict.len()];
    if !out.is_empty() {
        kernel::gemm(&kernel::widen(dirs), &kernel::widen(dict.basis_matrix(basis)), dict.dim(), &mut out);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenProfile {
    pub unit: u32,
    /// Distinct token ids by descending score, at most `k`.
    pub tokens: Vec<u32>,
    /// Occurrences assigned to the unit.
    pub activation_count: u64,
    pub eligible: bool,
}

/// Accumulates per-region token scores over any number of batches.
///
/// Every occurrence is scored against every region by basis cosine; each
/// region keeps the best score per distinct token. Eligibility counts only
/// occurrences assigned to the region (nearest basis direction).
pub struct TokenProfiler<'a> {
    dict: &'a Dictionary,
    basis: Basis,
    best: Vec<HashMap<u32, f64>>,
    assigned: Vec<u64>,
    skipped: u64,
}

impl<'a> TokenProfiler<'a> {
    pub fn new(dict: &'a Dictionary, basis: Basis) -> Result<Self> {
        if dict.is_empty() {
            return Err(Error::EmptyDictionary);
        }
        Ok(Self {
            dict,
            basis,
            best: vec![HashMap::new(); dict.len()],
            assigned: vec![0; dict.len()],
            skipped: 0,
        })
    }

    pub fn skipped_degenerate(&self) -> u64 {
        self.skipped
    }

    pub fn add_batch(&mut self, rows: &[f32], tokens: &[u32]) -> Result<()> {
        let d = self.dict.dim();
        if rows.len() % d != 0 {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: rows.len() % d,
            });
        }
        if rows.len() / d != tokens.len() {
            return Err(Error::LengthMismatch {
                left: rows.len() / d,
                right: tokens.len(),
            });
        }
        let normed = geometry::center_normalize_rows(rows, self.dict.mu())?;
        self.skipped += (tokens.len() - normed.len()) as u64;
        let k = self.dict.len();
        let scores = basis_scores(self.dict, &normed.dirs, self.basis);
        for (u, &row) in normed.rows.iter().enumerate() {
            let token = tokens[row];
            let s = &scores[u * k..(u + 1) * k];
            let mut nearest = (0usize, f64::INFINITY);
            for (j, dot) in s.iter().enumerate() {
                let dist = 1.0 - dot;
                if dist < nearest.1 {
                    nearest = (j, dist);
                }
                let e = self.best[j].entry(token).or_insert(f64::NEG_INFINITY);
                if *dot > *e {
                    *e = *dot;
                }
            }
            self.assigned[nearest.0] += 1;
        }
        Ok(())
    }

    pub fn finish(self, k: usize, min_activations: u64) -> Vec<TokenProfile> {
        self.best
            .into_iter()
            .zip(self.assigned)
            .enumerate()
            .map(|(unit, (best, count))| {
                let mut ranked: Vec<(u32, f64)> = best.into_iter().collect();
                ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                ranked.truncate(k);
                TokenProfile {
                    unit: unit as u32,
                    tokens: ranked.into_iter().map(|(t, _)| t).collect(),
                    activation_count: count,
                    eligible: count >= min_activations,
                }
            })
            .collect()
    }
}

/// Top-`k` activating tokens per region over one batch of `(vector, token)`.
pub fn top_activating_tokens(
    dict: &Dictionary,
    rows: &[f32],
    tokens: &[u32],
    k: usize,
    min_activations: u64,
    basis: Basis,
) -> Result<Vec<TokenProfile>> {
    let mut p = TokenProfiler::new(dict, basis)?;
    p.add_batch(rows, tokens)?;
    Ok(p.finish(k, min_activations))
}

#[derive(Serialize, Deserialize)]
struct ProfileRow {
    unit: u32,
    activation_count: u64,
    eligible: bool,
    /// Space-separated token ids.
    tokens: String,
}

/// Writes `unit,activation_count,eligible,tokens`.
pub fn write_profiles_csv<W: Write>(sink: W, profiles: &[TokenProfile]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    if profiles.is_empty() {
        w.write_record(["unit", "activation_count", "eligible", "tokens"])?;
    }
    for p in profiles {
        w.serialize(ProfileRow {
            unit: p.unit,
            activation_count: p.activation_count,
            eligible: p.eligible,
            tokens: p.tokens.iter().map(u32::to_string).collect::<Vec<_>>().join(" "),
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_profiles_csv<R: Read>(source: R) -> Result<Vec<TokenProfile>> {
    let mut rd = csv::Reader::from_reader(source);
    let mut out = Vec::new();
    for row in rd.deserialize() {
        let row: ProfileRow = row?;
        let tokens = row
            .tokens
            .split_whitespace()
            .map(|t| {
                t.parse::<u32>()
                    .map_err(|_| Error::InvalidArgument(format!("bad token id {t:?} for unit {}", row.unit)))
            })
            .collect::<Result<_>>()?;
        out.push(TokenProfile {
            unit: row.unit,
            tokens,
            activation_count: row.activation_count,
            eligible: row.eligible,
        });
    }
    Ok(out)
}

/// `2|A∩B| / (|A| + |B|)` over distinct ids; 0 when both sets are empty.
pub fn f1(a: &[u32], b: &[u32]) -> f64 {
    let sa: std::collections::HashSet<u32> = a.iter().copied().collect();
    let sb: std::collections::HashSet<u32> = b.iter().copied().collect();
    if sa.is_empty() && sb.is_empty() {
        return 0.0;
    }
    let inter = sa.intersection(&sb).count() as f64;
    2.0 * inter / (sa.len() + sb.len()) as f64
}

/// F1 above which a match counts as strong.
pub const STRONG_F1: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrespondenceRow {
    pub unit: u32,
    pub best: u32,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrespondenceReport {
    /// Best eligible-B match of every eligible A unit.
    pub rows: Vec<CorrespondenceRow>,
    pub mean_f1: f64,
    pub strong_fraction: f64,
    /// Strong fraction within the top coherence quintile of A, when
    /// size-controlled coherence was supplied.
    pub q5_strong_fraction: Option<f64>,
    /// Eligible B units whose best eligible-A match is strong, as a fraction.
    pub b_caught_fraction: f64,
}

fn best_match(p: &TokenProfile, others: &[&TokenProfile]) -> (u32, f64) {
    others
        .iter()
        .map(|o| (o.unit, f1(&p.tokens, &o.tokens)))
        .fold((others[0].unit, f64::NEG_INFINITY), |b, x| if x.1 > b.1 { x } else { b })
}

/// Token-overlap correspondence from `a` to `b`. `a_coherence`, when given,
/// holds the size-controlled coherence of each `a` profile (same order) and
/// enables the top-quintile statistic.
pub fn correspondence_f1(
    a: &[TokenProfile],
    b: &[TokenProfile],
    strong: f64,
    a_coherence: Option<&[f64]>,
) -> Result<CorrespondenceReport> {
    if let Some(c) = a_coherence {
        if c.len() != a.len() {
            return Err(Error::LengthMismatch {
                left: a.len(),
                right: c.len(),
            });
        }
    }
    let ea: Vec<usize> = (0..a.len()).filter(|&i| a[i].eligible).collect();
    let eb: Vec<&TokenProfile> = b.iter().filter(|p| p.eligible).collect();
    if ea.is_empty() {
        return Err(Error::EmptyProfiles("a"));
    }
    if eb.is_empty() {
        return Err(Error::EmptyProfiles("b"));
    }
    let rows: Vec<CorrespondenceRow> = ea
        .iter()
        .map(|&i| {
            let (best, f1) = best_match(&a[i], &eb);
            CorrespondenceRow {
                unit: a[i].unit,
                best,
                f1,
            }
        })
        .collect();
    let n = rows.len() as f64;
    let is_strong = |f: f64| f > strong;
    let mean_f1 = rows.iter().map(|r| r.f1).sum::<f64>() / n;
    let strong_fraction = rows.iter().filter(|r| is_strong(r.f1)).count() as f64 / n;
    let q5_strong_fraction = a_coherence.map(|c| {
        let q = quintiles(&ea.iter().map(|&i| c[i]).collect::<Vec<_>>());
        let top: Vec<&CorrespondenceRow> = rows.iter().zip(&q).filter(|(_, q)| **q == 4).map(|(r, _)| r).collect();
        if top.is_empty() {
            0.0
        } else {
            top.iter().filter(|r| is_strong(r.f1)).count() as f64 / top.len() as f64
        }
    });
    let a_eligible: Vec<&TokenProfile> = ea.iter().map(|&i| &a[i]).collect();
    let caught = eb.iter().filter(|p| is_strong(best_match(p, &a_eligible).1)).count();
    Ok(CorrespondenceReport {
        rows,
        mean_f1,
        strong_fraction,
        q5_strong_fraction,
        b_caught_fraction: caught as f64 / eb.len() as f64,
    })
}

/// Writes `unit,best,f1`.
pub fn write_correspondence_csv<W: Write>(sink: W, report: &CorrespondenceReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    if report.rows.is_empty() {
        w.write_record(["unit", "best", "f1"])?;
    }
    for r in &report.rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Default mean-score threshold for behavioural selection.
pub const DEFAULT_LABEL_THRESHOLD: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionLabel {
    pub region: u32,
    pub count: u64,
    pub mean_score: f64,
}

/// Member count and mean behaviour score per region that received items,
/// ordered by region id.
pub fn behavioural_label(assignments: &[u32], scores: &[f64]) -> Result<Vec<RegionLabel>> {
    if assignments.len() != scores.len() {
        return Err(Error::LengthMismatch {
            left: assignments.len(),
            right: scores.len(),
        });
    }
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::InvalidArgument(format!("score {s} outside [0, 1]")));
    }
    let mut groups: std::collections::BTreeMap<u32, (u64, f64)> = Default::default();
    for (r, s) in assignments.iter().zip(scores) {
        let g = groups.entry(*r).or_default();
        g.0 += 1;
        g.1 += s;
    }
    Ok(groups
        .into_iter()
        .map(|(region, (count, sum))| RegionLabel {
            region,
            count,
            mean_score: sum / count as f64,
        })
        .collect())
}

/// Regions whose mean score is strictly above `threshold`.
pub fn select_labels(labels: &[RegionLabel], threshold: f64) -> Vec<u32> {
    labels.iter().filter(|l| l.mean_score > threshold).map(|l| l.region).collect()
}

pub fn write_labels_csv<W: Write>(sink: W, labels: &[RegionLabel], threshold: f64) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["region", "count", "mean_score", "selected"])?;
    for l in labels {
        w.write_record([
            l.region.to_string(),
            l.count.to_string(),
            l.mean_score.to_string(),
            (l.mean_score > threshold).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Mann–Whitney probability that a positive outranks a negative, ties
/// counting one half.
pub fn auroc(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    if positives.is_empty() {
        return Err(Error::EmptySet("positives"));
    }
    if negatives.is_empty() {
        return Err(Error::EmptySet("negatives"));
    }
    if positives.iter().chain(negatives).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("auroc input"));
    }
    let all: Vec<f64> = positives.iter().chain(negatives).copied().collect();
    let ranks = crate::stability::average_ranks(&all);
    let np = positives.len() as f64;
    let nn = negatives.len() as f64;
    let rank_sum: f64 = ranks[..positives.len()].iter().sum();
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Mean basis cosine of every region to the usable rows of `set`.
fn mean_cosines(dict: &Dictionary, set: &[f32], centre: &[f32], basis: Basis, name: &'static str) -> Result<Vec<f64>> {
    let normed = geometry::center_normalize_rows(set, centre)?;
    if normed.is_empty() {
        return Err(Error::EmptySet(name));
    }
    let k = dict.len();
    let scores = basis_scores(dict, &normed.dirs, basis);
    let mut sums = vec![0.0; k];
    for row in scores.chunks_exact(k) {
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    let n = normed.len() as f64;
    Ok(sums.into_iter().map(|s| s / n).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConceptEval {
    pub concept: String,
    pub region: u32,
    pub basis: Basis,
    /// Positive-minus-contrastive mean cosine of the selected region.
    pub score: f64,
    pub auroc: Option<f64>,
}

/// Selects the region with the largest positive-minus-contrastive mean
/// cosine (ties to the lowest id). Examples are centred on `centre`, or on
/// the dictionary centre when `None`. Returns the selection and all scores.
pub fn concept_select(
    dict: &Dictionary,
    positives: &[f32],
    contrastives: &[f32],
    basis: Basis,
    centre: Option<&[f32]>,
) -> Result<(u32, f64, Vec<f64>)> {
    if dict.is_empty() {
        return Err(Error::EmptyDictionary);
    }
    let centre = centre.unwrap_or(dict.mu());
    check_dim(dict.dim(), centre.len())?;
    if positives.is_empty() {
        return Err(Error::EmptySet("positives"));
    }
    if contrastives.is_empty() {
        return Err(Error::EmptySet("contrastives"));
    }
    let p = mean_cosines(dict, positives, centre, basis, "positives")?;
    let c = mean_cosines(dict, contrastives, centre, basis, "contrastives")?;
    let scores: Vec<f64> = p.iter().zip(&c).map(|(a, b)| a - b).collect();
    let (best, score) = scores
        .iter()
        .enumerate()
        .fold((0usize, f64::NEG_INFINITY), |b, (j, s)| if *s > b.1 { (j, *s) } else { b });
    Ok((best as u32, score, scores))
}

/// Cosine of each usable row of `set` to one region's basis direction.
pub fn region_scores(dict: &Dictionary, region: u32, set: &[f32], basis: Basis, centre: Option<&[f32]>) -> Result<Vec<f64>> {
    let row = dict.basis_row(basis, region as usize)?;
    let centre = centre.unwrap_or(dict.mu());
    let normed = geometry::center_normalize_rows(set, centre)?;
    Ok(normed
        .dirs
        .chunks_exact(dict.dim())
        .map(|u| kernel::dot(u, row))
        .collect())
}

/// Selection on one pair of sets and AUROC of the chosen region on held-out
/// positives and negatives.
pub fn concept_eval(
    dict: &Dictionary,
    concept: &str,
    positives: &[f32],
    contrastives: &[f32],
    held_out: Option<(&[f32], &[f32])>,
    basis: Basis,
    centre: Option<&[f32]>,
) -> Result<ConceptEval> {
    let (region, score, _) = concept_select(dict, positives, contrastives, basis, centre)?;
    let auroc = match held_out {
        Some((pos, neg)) => Some(auroc(
            &region_scores(dict, region, pos, basis, centre)?,
            &region_scores(dict, region, neg, basis, centre)?,
        )?),
        None => None,
    };
    Ok(ConceptEval {
        concept: concept.to_string(),
        region,
        basis,
        score,
        auroc,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SaturationRow {
    pub name: String,
    pub activations: u64,
    pub final_k: u64,
    pub saturated: bool,
    pub batches: usize,
}

/// Final state of each named trace.
pub fn saturation_compare(traces: &[(String, BuildTrace)]) -> Vec<SaturationRow> {
    traces
        .iter()
        .map(|(name, t)| SaturationRow {
            name: name.clone(),
            activations: t.activations(),
            final_k: t.final_k(),
            saturated: t.saturated,
            batches: t.records.len(),
        })
        .collect()
}

/// Writes `name,activations,final_k,saturated,batches`.
pub fn write_saturation_csv<W: Write>(sink: W, rows: &[SaturationRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    if rows.is_empty() {
        w.write_record(["name", "activations", "final_k", "saturated", "batches"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Merged per-batch curves: `name,batch_index,spawned,K,activations`.
pub fn write_saturation_curves_csv<W: Write>(sink: W, traces: &[(String, BuildTrace)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["name", "batch_index", "spawned", "K", "activations"])?;
    for (name, t) in traces {
        for r in &t.records {
            w.write_record([
                name.clone(),
                r.batch_index.to_string(),
                r.spawned.to_string(),
                r.k.to_string(),
                r.activations.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
