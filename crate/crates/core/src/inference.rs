//! Voronoi readouts over a built dictionary: nearest region, top-n, margins
//! and distance-to-cover statistics.

use std::io::{Read, Write};

use serde::Serialize;

use crate::dictionary::{Basis, Dictionary};
use crate::error::{Error, Result};
use crate::geometry::{self, check_dim};
use crate::search;
use crate::stream::StreamReader;

/// Histogram bins over the cosine-distance range [0, 2].
pub const HISTOGRAM_BINS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Assignment {
    pub region: u32,
    /// Cosine distance to the nearest basis direction.
    pub distance: f64,
    /// Second-nearest minus nearest distance; 0 when K = 1.
    pub margin: f64,
    pub within_theta: bool,
}

fn check_usable(dict: &Dictionary, dim: usize) -> Result<()> {
    if dict.is_empty() {
        return Err(Error::EmptyDictionary);
    }
    check_dim(dict.dim(), dim)
}

fn to_assignment(best: &[(u32, f64)], theta: f64) -> Assignment {
    let (region, distance) = best[0];
    let margin = best.get(1).map_or(0.0, |(_, d2)| (d2 - distance).max(0.0));
    Assignment {
        region,
        distance: distance.max(0.0),
        margin,
        within_theta: distance <= theta,
    }
}

/// Nearest region of one raw activation; ties go to the lowest id.
pub fn assign(dict: &Dictionary, a: &[f32], basis: Basis) -> Result<Assignment> {
    check_usable(dict, a.len())?;
    let u = geometry::center_normalize(a, dict.mu())?;
    let best = search::nearest(u.as_slice(), dict.basis_matrix(basis), dict.dim(), 2);
    Ok(to_assignment(&best, dict.theta()))
}

/// The `n` nearest regions in ascending distance, ties by id.
pub fn assign_topn(dict: &Dictionary, a: &[f32], n: usize, basis: Basis) -> Result<Vec<(u32, f64)>> {
    check_usable(dict, a.len())?;
    if n == 0 || n > dict.len() {
        return Err(Error::InvalidArgument(format!(
            "n must be in 1..={}, got {n}",
            dict.len()
        )));
    }
    let u = geometry::center_normalize(a, dict.mu())?;
    Ok(search::nearest(u.as_slice(), dict.basis_matrix(basis), dict.dim(), n))
}

/// Assigns every row of a flat batch; degenerate rows map to `None`.
pub fn assign_batch(dict: &Dictionary, rows: &[f32], basis: Basis) -> Result<Vec<Option<Assignment>>> {
    if dict.is_empty() {
        return Err(Error::EmptyDictionary);
    }
    let d = dict.dim();
    let normed = geometry::center_normalize_rows(rows, dict.mu())?;
    let m = dict.len().min(2);
    let best = search::nearest(&normed.dirs, dict.basis_matrix(basis), d, m);
    let mut out = vec![None; rows.len() / d];
    for (u, &row) in normed.rows.iter().enumerate() {
        out[row] = Some(to_assignment(&best[u * m..(u + 1) * m], dict.theta()));
    }
    Ok(out)
}

#[derive(Serialize)]
struct AssignmentRow {
    index: u64,
    region: Option<u32>,
    distance: Option<f64>,
    margin: Option<f64>,
    within_theta: Option<bool>,
}

/// Writes `index,region,distance,margin,within_theta`; degenerate rows keep
/// their index and leave the other fields empty.
pub fn write_assignments_csv<W: Write>(sink: W, first_index: u64, rows: &[Option<Assignment>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    if rows.is_empty() {
        w.write_record(["index", "region", "distance", "margin", "within_theta"])?;
    }
    for (i, a) in rows.iter().enumerate() {
        w.serialize(AssignmentRow {
            index: first_index + i as u64,
            region: a.map(|a| a.region),
            distance: a.map(|a| a.distance),
            margin: a.map(|a| a.margin),
            within_theta: a.map(|a| a.within_theta),
        })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageStats {
    /// Vectors assigned.
    pub count: u64,
    pub skipped_degenerate: u64,
    pub mean: f64,
    pub std_dev: f64,
    /// Standard error of the mean.
    pub std_error: f64,
    pub within_theta: f64,
    /// Counts over [0, 2] in [`HISTOGRAM_BINS`] equal bins; 2 falls in the last.
    pub histogram: Vec<u64>,
}

/// Histogram bin of a cosine distance.
pub fn histogram_bin(distance: f64) -> usize {
    ((distance / 2.0 * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1)
}

/// Summarises nearest-region distances. Sums run over the sorted distances,
/// so the result does not depend on the order of the input.
pub fn coverage_from_distances(mut distances: Vec<f64>, theta: f64, skipped: u64) -> Result<CoverageStats> {
    if distances.is_empty() {
        return Err(Error::EmptyInput);
    }
    distances.sort_unstable_by(f64::total_cmp);
    let n = distances.len() as f64;
    let mean = distances.iter().sum::<f64>() / n;
    let var = if distances.len() > 1 {
        distances.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let mut histogram = vec![0u64; HISTOGRAM_BINS];
    for d in &distances {
        histogram[histogram_bin(*d)] += 1;
    }
    let within = distances.partition_point(|d| *d <= theta);
    Ok(CoverageStats {
        count: distances.len() as u64,
        skipped_degenerate: skipped,
        mean,
        std_dev: var.sqrt(),
        std_error: (var / n).sqrt(),
        within_theta: within as f64 / n,
        histogram,
    })
}

/// Distance-to-cover statistics over every vector of a stream.
pub fn coverage_stats<R: Read>(dict: &Dictionary, reader: &mut StreamReader<R>, basis: Basis) -> Result<CoverageStats> {
    check_usable(dict, reader.dim())?;
    let mut distances = Vec::new();
    let mut skipped = 0u64;
    while let Some(batch) = reader.next_batch_limited(usize::MAX)? {
        for a in assign_batch(dict, batch.as_flat(), basis)? {
            match a {
                Some(a) => distances.push(a.distance),
                None => skipped += 1,
            }
        }
    }
    coverage_from_distances(distances, dict.theta(), skipped)
}
