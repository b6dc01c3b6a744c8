//! Exact nearest-row search over unit directions.
//!
//! A cheap `f32` screen ranks every row; only rows that the screen's error
//! bound cannot rule out are re-scored with the deterministic `f64` kernel.
//! Results are therefore identical to scoring every row exactly.

use rayon::prelude::*;

use crate::kernel;

const QUERY_BLOCK: usize = 64;

/// The `n` rows of `rows` closest in cosine distance to each query, as
/// `(row, 1 − dot)` in ascending distance with ties to the lower row.
/// Output is flat: query `q` owns `out[q * m..(q + 1) * m]`, `m = min(n, rows)`.
pub(crate) fn nearest(queries: &[f32], rows: &[f32], dim: usize, n: usize) -> Vec<(u32, f64)> {
    ranked(queries, rows, dim, n, |dot| 1.0 - dot)
}

/// The `n` rows with the largest dot product against each query, as
/// `(row, dot)` in descending dot with ties to the lower row. Layout as in
/// [`nearest`].
pub(crate) fn most_similar(queries: &[f32], rows: &[f32], dim: usize, n: usize) -> Vec<(u32, f64)> {
    let mut out = ranked(queries, rows, dim, n, |dot| -dot);
    for (_, v) in &mut out {
        *v = -*v;
    }
    out
}

/// Rows ranked by ascending `key(dot)`, ties to the lower row. `key` must be
/// non-increasing in `dot`.
fn ranked(queries: &[f32], rows: &[f32], dim: usize, n: usize, key: fn(f64) -> f64) -> Vec<(u32, f64)> {
    let k = rows.len() / dim;
    let m = n.min(k);
    if m == 0 || queries.is_empty() {
        return Vec::new();
    }
    let slack = 2.0 * kernel::screen_margin(dim);
    queries
        .par_chunks(QUERY_BLOCK * dim)
        .flat_map_iter(|block| {
            let nq = block.len() / dim;
            let mut approx = vec![0f32; nq * k];
            kernel::screen(block, rows, dim, &mut approx);
            let mut found = Vec::with_capacity(nq * m);
            let mut order = Vec::with_capacity(k);
            let mut cands: Vec<(u32, f64)> = Vec::new();
            for (q, scores) in block.chunks_exact(dim).zip(approx.chunks_exact(k)) {
                let cut = if m == 1 {
                    scores.iter().copied().fold(f32::NEG_INFINITY, f32::max)
                } else {
                    order.clear();
                    order.extend_from_slice(scores);
                    let (_, nth, _) = order.select_nth_unstable_by(m - 1, |a, b| b.total_cmp(a));
                    *nth
                } as f64
                    - slack;
                cands.clear();
                for (j, s) in scores.iter().enumerate() {
                    if *s as f64 >= cut {
                        let dot = kernel::dot(q, &rows[j * dim..(j + 1) * dim]);
                        cands.push((j as u32, key(dot)));
                    }
                }
                cands.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                found.extend_from_slice(&cands[..m]);
            }
            found
        })
        .collect()
}
