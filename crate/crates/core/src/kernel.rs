//! Dot-product kernels with a fixed reduction order.
//!
//! Every dot product accumulates `f32` inputs into sixteen `f64` lanes
//! (element `i` goes to lane `i % 16`), folds the lanes with a fixed pairwise
//! tree, then adds the tail serially. The product of two `f32` values is
//! exact in `f64`, so fused and unfused multiply-add give identical bits and
//! the result does not depend on which instruction set executes it. The
//! wider-ISA entry points exist only so the compiler may vectorise the lanes.

use std::sync::OnceLock;

pub(crate) const LANES: usize = 16;

#[inline(always)]
fn fold(mut acc: [f64; LANES]) -> f64 {
    let mut width = LANES / 2;
    while width > 0 {
        for l in 0..width {
            acc[l] += acc[l + width];
        }
        width /= 2;
    }
    acc[0]
}

#[inline(always)]
fn dot_generic(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f64; LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for l in 0..LANES {
            acc[l] += xa[l] as f64 * xb[l] as f64;
        }
    }
    let mut s = fold(acc);
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        s += *x as f64 * *y as f64;
    }
    s
}

/// Dots of four queries against two rows, all pre-widened to `f64`. Each
/// (query, row) pair follows exactly the lane schedule of [`dot_generic`].
#[inline(always)]
fn dot4x2(q: [&[f64]; 4], r: [&[f64]; 2]) -> [[f64; 2]; 4] {
    let d = r[0].len();
    let full = d / LANES * LANES;
    let mut acc = [[[0f64; LANES]; 2]; 4];
    let mut i = 0;
    while i < full {
        let r0 = &r[0][i..i + LANES];
        let r1 = &r[1][i..i + LANES];
        for k in 0..4 {
            let x = &q[k][i..i + LANES];
            for l in 0..LANES {
                acc[k][0][l] += x[l] * r0[l];
                acc[k][1][l] += x[l] * r1[l];
            }
        }
        i += LANES;
    }
    let mut out = [[0f64; 2]; 4];
    for k in 0..4 {
        for c in 0..2 {
            let mut s = fold(acc[k][c]);
            for j in full..d {
                s += q[k][j] * r[c][j];
            }
            out[k][c] = s;
        }
    }
    out
}

#[inline(always)]
fn dot_wide(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0f64; LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for l in 0..LANES {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut s = fold(acc);
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        s += x * y;
    }
    s
}

/// `out[q * k + j] = dot(query_q, row_j)` over `f64`-widened inputs.
#[inline(always)]
fn gemm_generic(queries: &[f64], rows: &[f64], dim: usize, out: &mut [f64]) {
    let nq = queries.len() / dim;
    let nk = rows.len() / dim;
    let q_at = |i: usize| &queries[i * dim..(i + 1) * dim];
    let r_at = |j: usize| &rows[j * dim..(j + 1) * dim];
    let mut q0 = 0;
    while q0 + 4 <= nq {
        let qs = [q_at(q0), q_at(q0 + 1), q_at(q0 + 2), q_at(q0 + 3)];
        let mut j = 0;
        while j + 2 <= nk {
            let v = dot4x2(qs, [r_at(j), r_at(j + 1)]);
            for k in 0..4 {
                out[(q0 + k) * nk + j] = v[k][0];
                out[(q0 + k) * nk + j + 1] = v[k][1];
            }
            j += 2;
        }
        if j < nk {
            for k in 0..4 {
                out[(q0 + k) * nk + j] = dot_wide(qs[k], r_at(j));
            }
        }
        q0 += 4;
    }
    for q in q0..nq {
        for j in 0..nk {
            out[q * nk + j] = dot_wide(q_at(q), r_at(j));
        }
    }
}

#[inline(always)]
fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0f32; LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for l in 0..LANES {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut width = LANES / 2;
    while width > 0 {
        for l in 0..width {
            acc[l] += acc[l + width];
        }
        width /= 2;
    }
    let mut s = acc[0];
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        s += x * y;
    }
    s
}

#[inline(always)]
fn screen_generic(queries: &[f32], rows: &[f32], dim: usize, out: &mut [f32]) {
    let nk = rows.len() / dim;
    for (q, o) in queries.chunks_exact(dim).zip(out.chunks_exact_mut(nk.max(1))) {
        for (r, v) in rows.chunks_exact(dim).zip(o) {
            *v = dot_f32(q, r);
        }
    }
}

#[derive(Clone, Copy)]
struct Kernels {
    dot: fn(&[f32], &[f32]) -> f64,
    gemm: fn(&[f64], &[f64], usize, &mut [f64]),
    screen: fn(&[f32], &[f32], usize, &mut [f32]),
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use std::arch::x86_64::*;

    use super::{dot_wide, fold, LANES};

    #[target_feature(enable = "avx512f")]
    unsafe fn dot_avx512(a: &[f32], b: &[f32]) -> f64 {
        super::dot_generic(a, b)
    }

    /// Accumulator tile for four queries against two rows. Register
    /// `4 * k + 2 * c` holds lanes 0..8 of pair (k, c) and the next one
    /// lanes 8..16.
    type Tile = [__m512d; 16];

    #[target_feature(enable = "avx512f")]
    unsafe fn tile4x2(acc: &mut Tile, q: [*const f64; 4], r: [*const f64; 2], from: usize, to: usize) {
        let mut a = *acc;
        let mut i = from;
        while i < to {
            let r0l = _mm512_loadu_pd(r[0].add(i));
            let r0h = _mm512_loadu_pd(r[0].add(i + 8));
            let r1l = _mm512_loadu_pd(r[1].add(i));
            let r1h = _mm512_loadu_pd(r[1].add(i + 8));
            for k in 0..4 {
                let xl = _mm512_loadu_pd(q[k].add(i));
                let xh = _mm512_loadu_pd(q[k].add(i + 8));
                a[4 * k] = _mm512_fmadd_pd(xl, r0l, a[4 * k]);
                a[4 * k + 1] = _mm512_fmadd_pd(xh, r0h, a[4 * k + 1]);
                a[4 * k + 2] = _mm512_fmadd_pd(xl, r1l, a[4 * k + 2]);
                a[4 * k + 3] = _mm512_fmadd_pd(xh, r1h, a[4 * k + 3]);
            }
            i += LANES;
        }
        *acc = a;
    }

    #[target_feature(enable = "avx512f")]
    unsafe fn gemm_avx512(queries: &[f64], rows: &[f64], dim: usize, out: &mut [f64]) {
        let nq = queries.len() / dim;
        let nk = rows.len() / dim;
        let full = dim / LANES * LANES;
        let q_at = |i: usize| &queries[i * dim..(i + 1) * dim];
        let r_at = |j: usize| &rows[j * dim..(j + 1) * dim];
        let q4 = nq / 4 * 4;
        let k2 = nk / 2 * 2;
        // a row pair stays in L1 while the query block streams past it
        for j in (0..k2).step_by(2) {
            let rs = [r_at(j), r_at(j + 1)];
            let rp = rs.map(|s| s.as_ptr());
            for q0 in (0..q4).step_by(4) {
                let qs = [q_at(q0), q_at(q0 + 1), q_at(q0 + 2), q_at(q0 + 3)];
                let mut t: Tile = [_mm512_setzero_pd(); 16];
                tile4x2(&mut t, qs.map(|s| s.as_ptr()), rp, 0, full);
                for k in 0..4 {
                    for c in 0..2 {
                        let mut lanes = [0f64; LANES];
                        _mm512_storeu_pd(lanes.as_mut_ptr(), t[4 * k + 2 * c]);
                        _mm512_storeu_pd(lanes.as_mut_ptr().add(8), t[4 * k + 2 * c + 1]);
                        let mut s = fold(lanes);
                        for e in full..dim {
                            s += qs[k][e] * rs[c][e];
                        }
                        out[(q0 + k) * nk + j + c] = s;
                    }
                }
            }
        }
        for q in 0..nq {
            let first = if q < q4 { k2 } else { 0 };
            for j in first..nk {
                out[q * nk + j] = dot_wide(q_at(q), r_at(j));
            }
        }
    }

    #[target_feature(enable = "avx512f")]
    unsafe fn screen_avx512(queries: &[f32], rows: &[f32], dim: usize, out: &mut [f32]) {
        let nq = queries.len() / dim;
        let nk = rows.len() / dim;
        let full = dim / LANES * LANES;
        let q_at = |i: usize| &queries[i * dim..(i + 1) * dim];
        let r_at = |j: usize| &rows[j * dim..(j + 1) * dim];
        let q4 = nq / 4 * 4;
        let k4 = nk / 4 * 4;
        for j in (0..k4).step_by(4) {
            let rs = [r_at(j), r_at(j + 1), r_at(j + 2), r_at(j + 3)];
            let rp = rs.map(|s| s.as_ptr());
            for q0 in (0..q4).step_by(4) {
                let qs = [q_at(q0), q_at(q0 + 1), q_at(q0 + 2), q_at(q0 + 3)];
                let qp = qs.map(|s| s.as_ptr());
                let mut a = [_mm512_setzero_ps(); 16];
                let mut i = 0;
                while i < full {
                    let r = rp.map(|p| _mm512_loadu_ps(p.add(i)));
                    for k in 0..4 {
                        let x = _mm512_loadu_ps(qp[k].add(i));
                        for c in 0..4 {
                            a[4 * k + c] = _mm512_fmadd_ps(x, r[c], a[4 * k + c]);
                        }
                    }
                    i += LANES;
                }
                for k in 0..4 {
                    for c in 0..4 {
                        let mut s = _mm512_reduce_add_ps(a[4 * k + c]);
                        for e in full..dim {
                            s += qs[k][e] * rs[c][e];
                        }
                        out[(q0 + k) * nk + j + c] = s;
                    }
                }
            }
        }
        for q in 0..nq {
            let first = if q < q4 { k4 } else { 0 };
            for j in first..nk {
                out[q * nk + j] = super::dot_f32(q_at(q), r_at(j));
            }
        }
    }

    #[target_feature(enable = "avx2")]
    unsafe fn screen_avx2(q: &[f32], r: &[f32], dim: usize, out: &mut [f32]) {
        super::screen_generic(q, r, dim, out)
    }

    #[target_feature(enable = "avx2")]
    unsafe fn dot_avx2(a: &[f32], b: &[f32]) -> f64 {
        super::dot_generic(a, b)
    }
    #[target_feature(enable = "avx2")]
    unsafe fn gemm_avx2(q: &[f64], r: &[f64], dim: usize, out: &mut [f64]) {
        super::gemm_generic(q, r, dim, out)
    }

    pub(super) fn detect() -> Option<super::Kernels> {
        // SAFETY: each wrapper is only selected after the matching runtime
        // feature check succeeds.
        if is_x86_feature_detected!("avx512f") {
            return Some(super::Kernels {
                dot: |a, b| unsafe { dot_avx512(a, b) },
                gemm: |q, r, d, o| unsafe { gemm_avx512(q, r, d, o) },
                screen: |q, r, d, o| unsafe { screen_avx512(q, r, d, o) },
            });
        }
        if is_x86_feature_detected!("avx2") {
            return Some(super::Kernels {
                dot: |a, b| unsafe { dot_avx2(a, b) },
                gemm: |q, r, d, o| unsafe { gemm_avx2(q, r, d, o) },
                screen: |q, r, d, o| unsafe { screen_avx2(q, r, d, o) },
            });
        }
        None
    }
}

fn kernels() -> Kernels {
    static KERNELS: OnceLock<Kernels> = OnceLock::new();
    *KERNELS.get_or_init(|| {
        #[cfg(target_arch = "x86_64")]
        if let Some(k) = x86::detect() {
            return k;
        }
        Kernels {
            dot: dot_generic,
            gemm: gemm_generic,
            screen: screen_generic,
        }
    })
}

/// Deterministic `f64`-accumulated dot product of two equal-length slices.
#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot: length mismatch");
    (kernels().dot)(a, b)
}

/// Widens `f32` data for [`gemm`]; the conversion is exact.
pub(crate) fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|x| *x as f64).collect()
}

/// Dense block of dot products between `queries` (`nq × dim`) and `rows`
/// (`nk × dim`), both widened with [`widen`], written row-major into `out`
/// (`nq × nk`). Bit-identical to calling [`dot`] on the `f32` originals.
pub(crate) fn gemm(queries: &[f64], rows: &[f64], dim: usize, out: &mut [f64]) {
    assert!(dim > 0);
    assert_eq!(queries.len() % dim, 0);
    assert_eq!(rows.len() % dim, 0);
    assert_eq!(out.len(), queries.len() / dim * (rows.len() / dim));
    (kernels().gemm)(queries, rows, dim, out)
}

/// Approximate `f32` dot products between near-unit rows, for pruning only.
/// Entries may differ from [`dot`] by up to [`screen_margin`]; the summation
/// order is left to the instruction set.
pub(crate) fn screen(queries: &[f32], rows: &[f32], dim: usize, out: &mut [f32]) {
    assert!(dim > 0);
    assert_eq!(queries.len() % dim, 0);
    assert_eq!(rows.len() % dim, 0);
    assert_eq!(out.len(), queries.len() / dim * (rows.len() / dim));
    (kernels().screen)(queries, rows, dim, out)
}

/// Bound on `|screen − dot|` for rows whose norms are within 1e-3 of one.
///
/// Any summation order of `dim` products has error at most
/// `γ_dim · Σ|a_i b_i|` with `γ_n = n u / (1 − n u)` and `u = 2⁻²⁴`; two
/// roundings per step (unfused) double `n`, and `Σ|a_i b_i| ≤ ‖a‖‖b‖`.
pub(crate) fn screen_margin(dim: usize) -> f64 {
    let n = 2.0 * (dim as f64 + 1.0);
    let nu = n * f32::EPSILON as f64 / 2.0;
    let gamma = nu / (1.0 - nu);
    // slack covers the f64 reference's own error
    gamma * 1.01 + 1e-12
}

/// Portable path, exposed so tests can pin dispatch-independence.
#[cfg(test)]
pub(crate) fn dot_portable(a: &[f32], b: &[f32]) -> f64 {
    dot_generic(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
    }

    #[test]
    fn dispatched_kernels_match_portable_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for dim in [1usize, 3, 15, 16, 17, 64, 100, 2304] {
            // odd counts exercise the 4×2 tile remainders
            let q = random(&mut rng, 7 * dim);
            let r = random(&mut rng, 5 * dim);
            let mut out = vec![0.0; 35];
            gemm(&widen(&q), &widen(&r), dim, &mut out);
            for i in 0..7 {
                for j in 0..5 {
                    let qa = &q[i * dim..(i + 1) * dim];
                    let rb = &r[j * dim..(j + 1) * dim];
                    let p = dot_portable(qa, rb);
                    assert_eq!(out[i * 5 + j].to_bits(), p.to_bits());
                    assert_eq!(dot(qa, rb).to_bits(), p.to_bits());
                }
            }
        }
    }

    #[test]
    fn screen_stays_within_margin() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for dim in [1usize, 5, 16, 33, 700, 2304] {
            let unit = |rng: &mut ChaCha8Rng| {
                let v = random(rng, dim);
                let n = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
                v.iter().map(|x| (*x as f64 / n) as f32).collect::<Vec<_>>()
            };
            let q: Vec<f32> = (0..9).flat_map(|_| unit(&mut rng)).collect();
            let r: Vec<f32> = (0..6).flat_map(|_| unit(&mut rng)).collect();
            let mut out = vec![0f32; 54];
            screen(&q, &r, dim, &mut out);
            let mut plain = vec![0f32; 54];
            screen_generic(&q, &r, dim, &mut plain);
            for i in 0..9 {
                for j in 0..6 {
                    let exact = dot(&q[i * dim..(i + 1) * dim], &r[j * dim..(j + 1) * dim]);
                    assert!((out[i * 6 + j] as f64 - exact).abs() <= screen_margin(dim));
                    assert!((plain[i * 6 + j] as f64 - exact).abs() <= screen_margin(dim));
                }
            }
        }
    }

    #[test]
    fn dot_close_to_serial_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 1000);
        let b = random(&mut rng, 1000);
        let serial: f64 = a.iter().zip(&b).map(|(x, y)| *x as f64 * *y as f64).sum();
        assert!((dot(&a, &b) - serial).abs() < 1e-12);
    }
}
