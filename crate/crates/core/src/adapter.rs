//! One-hot encode/decode with the shape of a sparse-autoencoder interface.
//!
//! A code carries a single coefficient `z ≥ 0` on basis row `index`; the
//! dense code vector is `z` at that position and zero elsewhere, so the
//! reconstruction `zB + μ` reduces to `z·b_index + μ`.

use std::io::Write;

use serde::Serialize;

use crate::dictionary::{Basis, Dictionary};
use crate::error::{Error, Result};
use crate::geometry::{self, check_dim};
use crate::search;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OneHotCode {
    pub index: u32,
    pub value: f64,
    pub basis: Basis,
}

impl OneHotCode {
    /// Number of nonzero coordinates in the dense code.
    pub fn l0(&self) -> usize {
        usize::from(self.value > 0.0)
    }

    /// Dense code of length `k`.
    pub fn to_dense(&self, k: usize) -> Result<Vec<f64>> {
        let j = self.index as usize;
        if j >= k {
            return Err(Error::IndexOutOfRange { index: j, len: k });
        }
        let mut z = vec![0.0; k];
        z[j] = self.value;
        Ok(z)
    }
}

fn code_from(best: (u32, f64), basis: Basis) -> OneHotCode {
    OneHotCode {
        index: best.0,
        value: best.1.max(0.0),
        basis,
    }
}

/// `j* = argmax_j u·b_j` (ties to the lower id) and `z = max(u·b_j*, 0)`.
pub fn encode(dict: &Dictionary, a: &[f32], basis: Basis) -> Result<OneHotCode> {
    if dict.is_empty() {
        return Err(Error::EmptyDictionary);
    }
    check_dim(dict.dim(), a.len())?;
    let u = geometry::center_normalize(a, dict.mu())?;
    let best = search::most_similar(u.as_slice(), dict.basis_matrix(basis), dict.dim(), 1);
    Ok(code_from(best[0], basis))
}

/// Encodes every row of a flat batch; degenerate rows map to `None`.
pub fn encode_batch(dict: &Dictionary, rows: &[f32], basis: Basis) -> Result<Vec<Option<OneHotCode>>> {
    if dict.is_empty() {
        return Err(Error::EmptyDictionary);
    }
    let normed = geometry::center_normalize_rows(rows, dict.mu())?;
    let best = search::most_similar(&normed.dirs, dict.basis_matrix(basis), dict.dim(), 1);
    let mut out = vec![None; rows.len() / dict.dim()];
    for (b, &row) in best.into_iter().zip(&normed.rows) {
        out[row] = Some(code_from(b, basis));
    }
    Ok(out)
}

/// Reconstruction `z·b_j + μ`.
pub fn decode(dict: &Dictionary, code: &OneHotCode) -> Result<Vec<f32>> {
    let row = dict.basis_row(code.basis, code.index as usize)?;
    if code.value == 0.0 {
        return Ok(dict.mu().to_vec());
    }
    Ok(row
        .iter()
        .zip(dict.mu())
        .map(|(b, m)| (code.value * *b as f64 + *m as f64) as f32)
        .collect())
}

#[derive(Serialize)]
struct CodeRow {
    index: u64,
    j: Option<u32>,
    z: Option<f64>,
}

/// Writes `index,j,z`; degenerate rows leave `j` and `z` empty.
pub fn write_codes_csv<W: Write>(sink: W, first_index: u64, codes: &[Option<OneHotCode>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    if codes.is_empty() {
        w.write_record(["index", "j", "z"])?;
    }
    for (i, c) in codes.iter().enumerate() {
        w.serialize(CodeRow {
            index: first_index + i as u64,
            j: c.map(|c| c.index),
            z: c.map(|c| c.value),
        })?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::Calibration;
    use crate::dictionary::{BuildInfo, Region};
    use crate::geometry::Direction;

    fn dict(rows: &[&[f32]], mu: &[f32]) -> Dictionary {
        let regions = rows
            .iter()
            .enumerate()
            .map(|(i, e)| Region {
                id: i as u32,
                exemplar: Direction::normalize(e).unwrap(),
                dir_sum: Direction::normalize(e).unwrap().into_vec(),
                count: 1,
                created_step: i as u64,
                samples: vec![],
            })
            .collect();
        let cal = Calibration {
            mu: mu.to_vec(),
            p: 10.0,
            theta: 0.3,
            sample_budget: 2,
            pair_count: 1,
            seed: 0,
            skipped_degenerate: 0,
        };
        Dictionary::new(cal, regions, BuildInfo::default(), true, rows.len() as u64, 0)
    }

    #[test]
    fn aligned_activation_encodes_to_one() {
        let mu = [0.5f32, -1.0, 2.0];
        let d = dict(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]], &mu);
        let a = [0.5f32, 2.0, 2.0];
        let c = encode(&d, &a, Basis::Exemplar).unwrap();
        assert_eq!((c.index, c.value), (1, 1.0));
        assert_eq!(c.l0(), 1);
        let round = decode(&d, &encode(&d, &[0.5, 0.0, 2.0], Basis::Exemplar).unwrap()).unwrap();
        assert_eq!(round, vec![0.5, 0.0, 2.0]);
    }

    #[test]
    fn anti_aligned_clamps_to_zero() {
        let mu = [1.0f32, 1.0];
        let d = dict(&[&[1.0, 0.0], &[0.6, 0.8]], &mu);
        let c = encode(&d, &[0.0, 0.5], Basis::Exemplar).unwrap();
        assert_eq!(c.value, 0.0);
        assert_eq!(c.index, 0);
        assert_eq!(c.l0(), 0);
        assert_eq!(decode(&d, &c).unwrap(), mu.to_vec());
    }

    #[test]
    fn halfway_picks_lower_id() {
        let d = dict(&[&[1.0, 0.0], &[0.0, 1.0]], &[0.0, 0.0]);
        let c = encode(&d, &[2.0, 2.0], Basis::Exemplar).unwrap();
        assert_eq!(c.index, 0);
        assert!((c.value - 0.5f64.sqrt()).abs() < 1e-7);
    }

    #[test]
    fn decode_by_hand() {
        let d = dict(&[&[1.0, 0.0]], &[1.0, 1.0]);
        let code = OneHotCode {
            index: 0,
            value: 0.5,
            basis: Basis::Exemplar,
        };
        assert_eq!(decode(&d, &code).unwrap(), vec![1.5, 1.0]);
        assert_eq!(code.to_dense(3).unwrap(), vec![0.5, 0.0, 0.0]);
        let bad = OneHotCode { index: 4, ..code };
        assert!(matches!(decode(&d, &bad), Err(Error::IndexOutOfRange { index: 4, len: 1 })));
    }

    #[test]
    fn csv_schema() {
        let codes = [
            Some(OneHotCode {
                index: 3,
                value: 0.75,
                basis: Basis::Mean,
            }),
            None,
        ];
        let mut out = Vec::new();
        write_codes_csv(&mut out, 0, &codes).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "index,j,z\n0,3,0.75\n1,,\n");
    }
}
