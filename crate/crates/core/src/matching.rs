//! One-to-one and nearest-neighbour correspondence between dictionaries.

use std::io::Write;

use serde::Serialize;

use crate::calibration::percentile;
use crate::dictionary::{Basis, Dictionary};
use crate::error::{Error, Result};
use crate::geometry::check_dim;
use crate::kernel;

/// Default cosine above which a matched pair counts as persisted.
pub const DEFAULT_CUTOFF: f64 = 0.7;

/// Dense row-major score matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyMatrix);
        }
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch {
                left: rows * cols,
                right: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("score matrix"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::LengthMismatch {
                left: cols,
                right: bad.len(),
            });
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// A maximum-score one-to-one assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(row, col)` pairs in ascending row order; `min(rows, cols)` of them.
    pub pairs: Vec<(usize, usize)>,
    pub total: f64,
}

/// Maximum-score assignment between rows and columns.
///
/// The matrix is padded with zeros to square and solved as a minimum-cost
/// problem on negated scores with the O(n³) shortest augmenting path method.
/// Among optimal assignments of the padded problem the one whose column
/// sequence is lexicographically smallest is returned.
pub fn hungarian(scores: &ScoreMatrix) -> Assignment {
    let n = scores.rows.max(scores.cols);
    let cost = |i: usize, j: usize| {
        if i < scores.rows && j < scores.cols {
            -scores.get(i, j)
        } else {
            0.0
        }
    };
    let (mut col_of, u, v) = solve(n, &cost);

    let scale = scores.data.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    let tol = 1e-9 * scale;
    let tight = |i: usize, j: usize| (cost(i, j) - u[i] - v[j]).abs() <= tol;
    canonicalize(n, &mut col_of, &tight);

    let mut pairs = Vec::with_capacity(scores.rows.min(scores.cols));
    let mut total = 0.0;
    for (i, &j) in col_of.iter().enumerate() {
        if i < scores.rows && j < scores.cols {
            pairs.push((i, j));
            total += scores.get(i, j);
        }
    }
    Assignment { pairs, total }
}

/// Shortest augmenting paths with potentials. Returns the column of each row
/// and feasible duals with `cost(i, j) − u[i] − v[j] ≥ 0`, tight on the
/// assignment.
fn solve(n: usize, cost: &dyn Fn(usize, usize) -> f64) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    // 1-based with column 0 as the virtual root
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0usize; n];
    for j in 1..=n {
        col_of[row_of[j] - 1] = j - 1;
    }
    (col_of, u[1..].to_vec(), v[1..].to_vec())
}

/// Rewrites a perfect matching on the tight graph into the lexicographically
/// smallest one: each row in turn takes the lowest column that still leaves
/// the remaining rows perfectly matchable.
fn canonicalize(n: usize, col_of: &mut [usize], tight: &dyn Fn(usize, usize) -> bool) {
    let mut row_of = vec![0usize; n];
    for (i, &j) in col_of.iter().enumerate() {
        row_of[j] = i;
    }
    let mut visited = vec![false; n];
    for i in 0..n {
        for j in 0..col_of[i] {
            let holder = row_of[j];
            if holder < i || !tight(i, j) {
                continue;
            }
            // free column col_of[i] must be reached from the holder of j
            visited.iter_mut().for_each(|v| *v = false);
            let mut path = Vec::new();
            if augment(holder, i, col_of[i], j, col_of, &row_of, tight, &mut visited, &mut path) {
                let freed = col_of[i];
                // path holds (row, new column) moves along the alternating path
                for &(r, c) in &path {
                    col_of[r] = c;
                    row_of[c] = r;
                }
                col_of[i] = j;
                row_of[j] = i;
                debug_assert!(path.last().is_some_and(|&(_, c)| c == freed));
                break;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn augment(
    row: usize,
    fixed: usize,
    target: usize,
    taken: usize,
    col_of: &[usize],
    row_of: &[usize],
    tight: &dyn Fn(usize, usize) -> bool,
    visited: &mut [bool],
    path: &mut Vec<(usize, usize)>,
) -> bool {
    let n = col_of.len();
    for c in 0..n {
        if visited[c] || c == taken || c == col_of[row] || !tight(row, c) {
            continue;
        }
        let holder = row_of[c];
        if c != target && holder <= fixed {
            continue;
        }
        visited[c] = true;
        path.push((row, c));
        if c == target || augment(holder, fixed, target, taken, col_of, row_of, tight, visited, path) {
            return true;
        }
        path.pop();
    }
    false
}

/// Cosine between every basis row of `a` and every basis row of `b`,
/// row-major `K_A × K_B`.
pub fn cosine_matrix(a: &Dictionary, b: &Dictionary, basis: Basis) -> Result<Vec<f64>> {
    check_dim(a.dim(), b.dim())?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyDictionary);
    }
    let mut out = vec![0.0; a.len() * b.len()];
    kernel::gemm(
        &kernel::widen(a.basis_matrix(basis)),
        &kernel::widen(b.basis_matrix(basis)),
        a.dim(),
        &mut out,
    );
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MatchedPair {
    pub a: u32,
    pub b: u32,
    pub cosine: f64,
    pub persisted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchReport {
    pub basis: Basis,
    pub cutoff: f64,
    pub k_a: usize,
    pub k_b: usize,
    pub pairs: Vec<MatchedPair>,
    /// Regions of `a` unmatched or matched below the cutoff.
    pub dropped: Vec<u32>,
    /// Regions of `b` unmatched or matched below the cutoff.
    pub introduced: Vec<u32>,
    pub median_cosine: f64,
    pub max_cosine: f64,
    /// Median of `(1 − cosine) / θ_A` over matched pairs.
    pub median_normalized_distance: f64,
}

impl MatchReport {
    pub fn persisted(&self) -> impl Iterator<Item = &MatchedPair> {
        self.pairs.iter().filter(|p| p.persisted)
    }

    pub fn persisted_count(&self) -> usize {
        self.persisted().count()
    }
}

fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_unstable_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Hungarian matching of `a` against `b` on basis cosine, classified by
/// `cutoff`.
pub fn match_dictionaries(a: &Dictionary, b: &Dictionary, basis: Basis, cutoff: f64) -> Result<MatchReport> {
    if !cutoff.is_finite() {
        return Err(Error::NonFinite("cutoff"));
    }
    let cos = cosine_matrix(a, b, basis)?;
    let assignment = hungarian(&ScoreMatrix::new(a.len(), b.len(), cos.clone())?);
    let pairs: Vec<MatchedPair> = assignment
        .pairs
        .iter()
        .map(|&(i, j)| {
            let cosine = cos[i * b.len() + j];
            MatchedPair {
                a: i as u32,
                b: j as u32,
                cosine,
                persisted: cosine >= cutoff,
            }
        })
        .collect();
    let mut kept_a = vec![false; a.len()];
    let mut kept_b = vec![false; b.len()];
    for p in pairs.iter().filter(|p| p.persisted) {
        kept_a[p.a as usize] = true;
        kept_b[p.b as usize] = true;
    }
    let unkept = |kept: &[bool]| (0..kept.len() as u32).filter(|&i| !kept[i as usize]).collect();
    let cosines: Vec<f64> = pairs.iter().map(|p| p.cosine).collect();
    let theta_a = a.theta();
    let normalized: Vec<f64> = cosines.iter().map(|c| (1.0 - c) / theta_a).collect();
    Ok(MatchReport {
        basis,
        cutoff,
        k_a: a.len(),
        k_b: b.len(),
        dropped: unkept(&kept_a),
        introduced: unkept(&kept_b),
        median_cosine: median(&cosines),
        max_cosine: cosines.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        median_normalized_distance: median(&normalized),
        pairs,
    })
}

/// Writes `a,b,cosine,persisted`.
pub fn write_match_csv<W: Write>(sink: W, report: &MatchReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["a", "b", "cosine", "persisted"])?;
    for p in &report.pairs {
        w.write_record([
            p.a.to_string(),
            p.b.to_string(),
            p.cosine.to_string(),
            p.persisted.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NearestRow {
    pub region: u32,
    pub nearest: u32,
    pub cosine: f64,
    /// Percent of all pairwise cosines at or below `cosine`.
    pub percentile_rank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossTab {
    pub basis: Basis,
    pub a_to_b: Vec<NearestRow>,
    pub b_to_a: Vec<NearestRow>,
    pub median: f64,
    pub p99: f64,
    pub max: f64,
}

/// Nearest region across dictionaries in both directions, with each cosine
/// ranked within the full `K_A × K_B` cosine distribution.
pub fn cross_tab(a: &Dictionary, b: &Dictionary, basis: Basis) -> Result<CrossTab> {
    let cos = cosine_matrix(a, b, basis)?;
    let (ka, kb) = (a.len(), b.len());
    let mut sorted = cos.clone();
    sorted.sort_unstable_by(f64::total_cmp);
    let rank = |c: f64| 100.0 * sorted.partition_point(|x| *x <= c) as f64 / sorted.len() as f64;
    let argmax = |it: &mut dyn Iterator<Item = (usize, f64)>| {
        it.fold((0usize, f64::NEG_INFINITY), |best, (j, c)| if c > best.1 { (j, c) } else { best })
    };
    let a_to_b = (0..ka)
        .map(|i| {
            let (j, c) = argmax(&mut (0..kb).map(|j| (j, cos[i * kb + j])));
            NearestRow {
                region: i as u32,
                nearest: j as u32,
                cosine: c,
                percentile_rank: rank(c),
            }
        })
        .collect();
    let b_to_a = (0..kb)
        .map(|j| {
            let (i, c) = argmax(&mut (0..ka).map(|i| (i, cos[i * kb + j])));
            NearestRow {
                region: j as u32,
                nearest: i as u32,
                cosine: c,
                percentile_rank: rank(c),
            }
        })
        .collect();
    Ok(CrossTab {
        basis,
        a_to_b,
        b_to_a,
        median: median(&sorted),
        p99: percentile(&sorted, 99.0)?,
        max: *sorted.last().expect("nonempty"),
    })
}

/// Writes `direction,region,nearest,cosine,percentile_rank` with direction
/// `a_to_b` or `b_to_a`.
pub fn write_cross_tab_csv<W: Write>(sink: W, tab: &CrossTab) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["direction", "region", "nearest", "cosine", "percentile_rank"])?;
    for (dir, rows) in [("a_to_b", &tab.a_to_b), ("b_to_a", &tab.b_to_a)] {
        for r in rows {
            w.write_record([
                dir.to_string(),
                r.region.to_string(),
                r.nearest.to_string(),
                r.cosine.to_string(),
                r.percentile_rank.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Lexicographically smallest maximum over all injective maps, summing in
    /// row order. Ties compare exactly.
    pub(super) fn brute(m: &ScoreMatrix) -> Assignment {
        let n = m.rows().max(m.cols());
        let pad = |i: usize, j: usize| if i < m.rows() && j < m.cols() { m.get(i, j) } else { 0.0 };
        let mut perm: Vec<usize> = (0..n).collect();
        let mut best: Option<(f64, Vec<usize>)> = None;
        loop {
            let total: f64 = (0..n).map(|i| pad(i, perm[i])).sum();
            if best.as_ref().is_none_or(|(b, _)| total > *b) {
                best = Some((total, perm.clone()));
            }
            if !next_permutation(&mut perm) {
                break;
            }
        }
        let (_, perm) = best.unwrap();
        let pairs: Vec<(usize, usize)> = perm
            .iter()
            .enumerate()
            .filter(|&(i, &j)| i < m.rows() && j < m.cols())
            .map(|(i, &j)| (i, j))
            .collect();
        let total = pairs.iter().map(|&(i, j)| m.get(i, j)).sum();
        Assignment { pairs, total }
    }

    fn next_permutation(p: &mut [usize]) -> bool {
        let n = p.len();
        if n < 2 {
            return false;
        }
        let mut i = n - 1;
        while i > 0 && p[i - 1] >= p[i] {
            i -= 1;
        }
        if i == 0 {
            return false;
        }
        let mut j = n - 1;
        while p[j] <= p[i - 1] {
            j -= 1;
        }
        p.swap(i - 1, j);
        p[i..].reverse();
        true
    }

    #[test]
    fn small_examples() {
        let id = ScoreMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let a = hungarian(&id);
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total, 2.0);
        let anti = ScoreMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let a = hungarian(&anti);
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(a.total, 2.0);
        assert!(matches!(ScoreMatrix::new(0, 3, vec![]), Err(Error::EmptyMatrix)));
    }

    #[test]
    fn ties_resolve_lexicographically() {
        let flat = ScoreMatrix::new(3, 3, vec![1.0; 9]).unwrap();
        assert_eq!(hungarian(&flat).pairs, vec![(0, 0), (1, 1), (2, 2)]);
        let m = ScoreMatrix::from_rows(&[vec![1.0, 1.0, 0.0], vec![1.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(hungarian(&m).pairs, vec![(0, 0), (1, 1), (2, 2)]);
        let wide = ScoreMatrix::new(2, 4, vec![0.0; 8]).unwrap();
        assert_eq!(hungarian(&wide).pairs, vec![(0, 0), (1, 1)]);
    }

    fn matrix() -> impl Strategy<Value = ScoreMatrix> {
        (1usize..=6, 1usize..=6, prop::bool::ANY).prop_flat_map(|(r, c, ints)| {
            let cell = if ints {
                (0i32..4).prop_map(f64::from).boxed()
            } else {
                (-1.0f64..1.0).boxed()
            };
            prop::collection::vec(cell, r * c).prop_map(move |d| ScoreMatrix::new(r, c, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn matches_permutation_oracle(m in matrix()) {
            let got = hungarian(&m);
            let want = brute(&m);
            prop_assert_eq!(&got.pairs, &want.pairs);
            prop_assert!((got.total - want.total).abs() <= 1e-12);
        }
    }
}
