//! Vector operations on the centred unit sphere.
//!
//! Storage is `f32`; every reduction accumulates in `f64` with the fixed lane
//! schedule of the internal kernel, so identical inputs give identical bits.

use crate::error::{Error, Result};
use crate::kernel;

/// Below this centred norm an activation has no usable direction.
pub const DEGENERATE_EPS: f64 = 1e-8;

/// Tolerance on `| ‖v‖ − 1 |` for anything stored as a [`Direction`].
pub const UNIT_TOL: f64 = 1e-5;

/// A unit-norm vector on the centred sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct Direction(Vec<f32>);

impl Direction {
    /// Wraps `values`, checking the unit-norm invariant.
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("direction"));
        }
        let n = norm(&values);
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::InvariantViolation(format!(
                "direction norm {n} is not unit"
            )));
        }
        Ok(Self(values))
    }

    /// Normalises an arbitrary non-zero vector.
    pub fn normalize(values: &[f32]) -> Result<Self> {
        let n = norm(values);
        if !n.is_finite() {
            return Err(Error::NonFinite("direction"));
        }
        if n < DEGENERATE_EPS {
            return Err(Error::DegenerateActivation {
                eps: DEGENERATE_EPS,
            });
        }
        Ok(Self(values.iter().map(|v| (*v as f64 / n) as f32).collect()))
    }

    pub(crate) fn from_unit_unchecked(values: Vec<f32>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }
}

impl AsRef<[f32]> for Direction {
    fn as_ref(&self) -> &[f32] {
        &self.0
    }
}

/// `DimensionMismatch` unless the two dimensions agree.
pub fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

/// Deterministic dot product with `f64` accumulation.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    kernel::dot(a, b)
}

pub fn norm(a: &[f32]) -> f64 {
    kernel::dot(a, a).sqrt()
}

/// Writes `(a − mu)/‖a − mu‖` into `out`.
///
/// The difference is formed in `f64` and rounded to `f32` once; the norm is
/// taken over the rounded difference with the shared kernel.
pub fn center_normalize_into(a: &[f32], mu: &[f32], out: &mut [f32]) -> Result<()> {
    check_dim(mu.len(), a.len())?;
    check_dim(a.len(), out.len())?;
    for ((o, x), m) in out.iter_mut().zip(a).zip(mu) {
        *o = (*x as f64 - *m as f64) as f32;
    }
    let n = norm(out);
    if !n.is_finite() {
        return Err(Error::NonFinite("activation"));
    }
    if n < DEGENERATE_EPS {
        return Err(Error::DegenerateActivation {
            eps: DEGENERATE_EPS,
        });
    }
    let inv = 1.0 / n;
    for o in out.iter_mut() {
        *o = (*o as f64 * inv) as f32;
    }
    Ok(())
}

/// Directions of a flat row-major batch with degenerate rows dropped.
#[derive(Debug, Clone, Default)]
pub struct NormalizedRows {
    /// Flat unit directions of the usable rows.
    pub dirs: Vec<f32>,
    /// Input row of each usable direction.
    pub rows: Vec<usize>,
}

impl NormalizedRows {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Centres and normalises every row of `batch` in parallel, skipping
/// degenerate rows. Other errors abort the batch.
pub fn center_normalize_rows(batch: &[f32], mu: &[f32]) -> Result<NormalizedRows> {
    use rayon::prelude::*;
    let d = mu.len();
    if d == 0 {
        return Err(Error::InvalidArgument("empty centre".into()));
    }
    if batch.len() % d != 0 {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: batch.len() % d,
        });
    }
    let n = batch.len() / d;
    let mut dirs = vec![0f32; n * d];
    let ok: Vec<bool> = dirs
        .par_chunks_exact_mut(d)
        .zip(batch.par_chunks_exact(d))
        .map(|(out, row)| match center_normalize_into(row, mu, out) {
            Ok(()) => Ok(true),
            Err(Error::DegenerateActivation { .. }) => Ok(false),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    let rows: Vec<usize> = (0..n).filter(|&i| ok[i]).collect();
    if rows.len() < n {
        for (u, &i) in rows.iter().enumerate() {
            dirs.copy_within(i * d..(i + 1) * d, u * d);
        }
        dirs.truncate(rows.len() * d);
    }
    Ok(NormalizedRows { dirs, rows })
}

/// Centres `a` on `mu` and projects it onto the unit sphere.
pub fn center_normalize(a: &[f32], mu: &[f32]) -> Result<Direction> {
    let mut out = vec![0f32; a.len()];
    center_normalize_into(a, mu, &mut out)?;
    Ok(Direction(out))
}

/// Cosine distance `1 − u·v` between unit directions.
pub fn cos_dist(u: &Direction, v: &Direction) -> Result<f64> {
    check_dim(u.dim(), v.dim())?;
    Ok(1.0 - dot(&u.0, &v.0))
}

/// `x − (x·e)e`: removes the component of `x` along `e`.
pub fn project_off(x: &[f32], e: &Direction) -> Result<Vec<f32>> {
    check_dim(e.dim(), x.len())?;
    let coef = dot(x, &e.0);
    Ok(x
        .iter()
        .zip(&e.0)
        .map(|(xi, ei)| (*xi as f64 - coef * *ei as f64) as f32)
        .collect())
}

/// `x + alpha·e`: additive steering along a direction.
pub fn add_direction(x: &[f32], e: &Direction, alpha: f64) -> Result<Vec<f32>> {
    check_dim(e.dim(), x.len())?;
    Ok(x
        .iter()
        .zip(&e.0)
        .map(|(xi, ei)| (*xi as f64 + alpha * *ei as f64) as f32)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dir(v: &[f32]) -> Direction {
        Direction::new(v.to_vec()).unwrap()
    }

    #[test]
    fn center_normalize_examples() {
        let d = center_normalize(&[3.0, 4.0], &[0.0, 0.0]).unwrap();
        assert!((d.as_slice()[0] - 0.6).abs() < 1e-7);
        assert!((d.as_slice()[1] - 0.8).abs() < 1e-7);

        let d = center_normalize(&[1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(d.as_slice(), &[1.0, 0.0]);

        assert!(matches!(
            center_normalize(&[2.0, -1.0], &[2.0, -1.0]),
            Err(Error::DegenerateActivation { .. })
        ));
        assert!(matches!(
            center_normalize(&[1.0, 2.0, 3.0], &[0.0, 0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn cos_dist_examples() {
        let u = dir(&[1.0, 0.0]);
        let v = dir(&[0.6, 0.8]);
        assert_eq!(cos_dist(&u, &u).unwrap(), 0.0);
        assert_eq!(cos_dist(&u, &dir(&[0.0, 1.0])).unwrap(), 1.0);
        assert!((cos_dist(&u, &v).unwrap() - 0.4).abs() < 1e-6);
    }

    #[test]
    fn project_off_examples() {
        let e = dir(&[1.0, 0.0]);
        assert_eq!(project_off(&[2.0, 0.0], &e).unwrap(), vec![0.0, 0.0]);
        assert_eq!(project_off(&[0.0, 3.0], &e).unwrap(), vec![0.0, 3.0]);
        assert_eq!(project_off(&[1.0, 1.0], &e).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn add_direction_examples() {
        let e = dir(&[1.0, 0.0]);
        assert_eq!(add_direction(&[0.3, 0.7], &e, 0.0).unwrap(), vec![0.3, 0.7]);
        assert_eq!(add_direction(&[0.0, 0.0], &e, 200.0).unwrap(), vec![200.0, 0.0]);
        let e = dir(&[0.0, 1.0]);
        assert_eq!(add_direction(&[1.0, 0.0], &e, 1.0).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn direction_rejects_non_unit() {
        assert!(Direction::new(vec![1.0, 1.0]).is_err());
        assert!(Direction::new(vec![]).is_err());
        assert!(Direction::new(vec![f32::NAN, 0.0]).is_err());
    }

    fn vec_strategy() -> impl Strategy<Value = (Vec<f32>, Vec<f32>)> {
        (1usize..40).prop_flat_map(|d| {
            (
                prop::collection::vec(-100.0f32..100.0, d),
                prop::collection::vec(-100.0f32..100.0, d),
            )
        })
    }

    proptest! {
        #[test]
        fn normalized_is_unit((a, mu) in vec_strategy()) {
            if let Ok(d) = center_normalize(&a, &mu) {
                prop_assert!((norm(d.as_slice()) - 1.0).abs() <= UNIT_TOL);
            }
        }

        #[test]
        fn cos_dist_symmetric((a, b) in vec_strategy()) {
            if let (Ok(u), Ok(v)) = (Direction::normalize(&a), Direction::normalize(&b)) {
                prop_assert_eq!(cos_dist(&u, &v).unwrap(), cos_dist(&v, &u).unwrap());
                let d = cos_dist(&u, &v).unwrap();
                prop_assert!((-1e-6..=2.0 + 1e-6).contains(&d));
            }
        }

        #[test]
        fn project_off_orthogonal_and_idempotent((x, e) in vec_strategy()) {
            if let Ok(e) = Direction::normalize(&e) {
                let once = project_off(&x, &e).unwrap();
                let scale = norm(&x).max(1.0);
                prop_assert!(dot(&once, e.as_slice()).abs() <= 1e-6 * scale);
                let twice = project_off(&once, &e).unwrap();
                for (a, b) in once.iter().zip(&twice) {
                    prop_assert!(((a - b) as f64).abs() <= 1e-6 * scale);
                }
            }
        }
    }
}
