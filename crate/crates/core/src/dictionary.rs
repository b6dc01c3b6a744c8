//! Regions, dictionaries, derived statistics and the EPDC file format.
//!
//! File layout (little-endian):
//!
//! 1. magic `EPDC`, version `u32` (= 1)
//! 2. `u64` length, then that many bytes of UTF-8 JSON manifest
//! 3. `mu`: `dim` × `f32`
//! 4. exemplar matrix: `K × dim` `f32`, row-major
//! 5. direction-sum matrix: `K × dim` `f32`, row-major
//! 6. counts: `K` × `u64`
//! 7. creation steps: `K` × `u64`
//!
//! The manifest carries every scalar setting plus per-region scalars for
//! human inspection. Those per-region scalars are informational: on load,
//! mean, coherence and density are recomputed from the binary sections.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::calibration::Calibration;
use crate::error::{Error, Result};
use crate::geometry::{self, Direction, UNIT_TOL};

pub const DICT_MAGIC: [u8; 4] = *b"EPDC";
pub const DICT_VERSION: u32 = 1;

/// Member provenance kept per region.
pub const SAMPLE_CAP: usize = 16;

const ZERO_SUM_EPS: f64 = 1e-12;
const MAX_MANIFEST_BYTES: u64 = 1 << 31;

/// Which per-region direction a readout compares against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Basis {
    /// First-arrival exemplar `e_i`.
    #[default]
    Exemplar,
    /// Normalised member-direction sum `m_i`.
    Mean,
}

impl fmt::Display for Basis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Basis::Exemplar => "exemplar",
            Basis::Mean => "mean",
        })
    }
}

impl FromStr for Basis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exemplar" => Ok(Basis::Exemplar),
            "mean" => Ok(Basis::Mean),
            other => Err(Error::InvalidArgument(format!(
                "unknown basis {other:?} (expected exemplar or mean)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    /// Creation order, `0..K`.
    pub id: u32,
    pub exemplar: Direction,
    /// Sum of member directions (exemplar included).
    pub dir_sum: Vec<f32>,
    /// Member count; the exemplar is member #1.
    pub count: u64,
    /// Stream index of the activation that created the region.
    pub created_step: u64,
    /// Stream indices of the first few members.
    pub samples: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionStats {
    pub mean: Direction,
    pub coherence: f64,
    pub density: f64,
}

/// Mean direction, coherence `‖Σφ‖/N` and density `log10(N c²)`.
pub fn region_stats(r: &Region) -> Result<RegionStats> {
    let n = geometry::norm(&r.dir_sum);
    if n < ZERO_SUM_EPS {
        return Err(Error::ZeroSum { region: r.id });
    }
    let count = r.count as f64;
    let coherence = n / count;
    let mean = r.dir_sum.iter().map(|v| (*v as f64 / n) as f32).collect();
    Ok(RegionStats {
        mean: Direction::from_unit_unchecked(mean),
        coherence,
        density: density(r.count, coherence),
    })
}

/// `log10(N · c²)`.
pub fn density(count: u64, coherence: f64) -> f64 {
    (count as f64 * coherence * coherence).log10()
}

impl Region {
    /// Coherence, reported as 0 when the member directions cancel.
    pub fn coherence(&self) -> f64 {
        region_stats(self).map(|s| s.coherence).unwrap_or(0.0)
    }

    pub fn density(&self) -> f64 {
        density(self.count, self.coherence())
    }

    /// Exemplar–mean cosine `e_i · m_i`.
    pub fn centrality(&self) -> f64 {
        match region_stats(self) {
            Ok(s) => geometry::dot(self.exemplar.as_slice(), s.mean.as_slice()),
            Err(_) => 0.0,
        }
    }
}

/// Settings the dictionary was built with, echoed into the manifest.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BuildInfo {
    pub model: Option<String>,
    pub hook: Option<String>,
    pub layer: Option<u32>,
    /// Free-form description of the build stream.
    pub stream: Option<String>,
    pub batch_size: u64,
    pub sat_window: u64,
    pub max_activations: Option<u64>,
    pub seed: u64,
    /// True when the calibration sample is a prefix of the build stream.
    pub calibration_in_stream: bool,
}

pub struct Dictionary {
    pub calibration: Calibration,
    pub regions: Vec<Region>,
    pub build: BuildInfo,
    pub saturated: bool,
    /// Σ counts: vectors assigned to some region.
    pub total_consumed: u64,
    /// Records read from the stream, degenerate ones included.
    pub activations_seen: u64,
    pub skipped_degenerate: u64,
    exemplar_rows: OnceLock<Vec<f32>>,
    mean_rows: OnceLock<Vec<f32>>,
}

impl fmt::Debug for Dictionary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Dictionary")
            .field("dim", &self.dim())
            .field("k", &self.len())
            .field("theta", &self.calibration.theta)
            .field("saturated", &self.saturated)
            .field("total_consumed", &self.total_consumed)
            .finish()
    }
}

impl Clone for Dictionary {
    fn clone(&self) -> Self {
        Self::new(
            self.calibration.clone(),
            self.regions.clone(),
            self.build.clone(),
            self.saturated,
            self.activations_seen,
            self.skipped_degenerate,
        )
    }
}

impl PartialEq for Dictionary {
    fn eq(&self, o: &Self) -> bool {
        self.calibration == o.calibration
            && self.regions == o.regions
            && self.build == o.build
            && self.saturated == o.saturated
            && self.total_consumed == o.total_consumed
            && self.activations_seen == o.activations_seen
            && self.skipped_degenerate == o.skipped_degenerate
    }
}

impl Dictionary {
    pub fn new(
        calibration: Calibration,
        regions: Vec<Region>,
        build: BuildInfo,
        saturated: bool,
        activations_seen: u64,
        skipped_degenerate: u64,
    ) -> Self {
        let total_consumed = regions.iter().map(|r| r.count).sum();
        Self {
            calibration,
            regions,
            build,
            saturated,
            total_consumed,
            activations_seen,
            skipped_degenerate,
            exemplar_rows: OnceLock::new(),
            mean_rows: OnceLock::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.calibration.dim()
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn theta(&self) -> f64 {
        self.calibration.theta
    }

    pub fn mu(&self) -> &[f32] {
        &self.calibration.mu
    }

    /// Row-major `K × dim` matrix of unit basis directions. A mean row whose
    /// member directions cancel falls back to the exemplar.
    pub fn basis_matrix(&self, basis: Basis) -> &[f32] {
        match basis {
            Basis::Exemplar => self.exemplar_rows.get_or_init(|| {
                self.regions
                    .iter()
                    .flat_map(|r| r.exemplar.as_slice().iter().copied())
                    .collect()
            }),
            Basis::Mean => self.mean_rows.get_or_init(|| {
                let mut m = Vec::with_capacity(self.len() * self.dim());
                for r in &self.regions {
                    match region_stats(r) {
                        Ok(s) => m.extend_from_slice(s.mean.as_slice()),
                        Err(_) => m.extend_from_slice(r.exemplar.as_slice()),
                    }
                }
                m
            }),
        }
    }

    pub fn basis_row(&self, basis: Basis, id: usize) -> Result<&[f32]> {
        if id >= self.len() {
            return Err(Error::IndexOutOfRange {
                index: id,
                len: self.len(),
            });
        }
        let d = self.dim();
        Ok(&self.basis_matrix(basis)[id * d..(id + 1) * d])
    }

    /// Checks every structural invariant; `load` calls this.
    pub fn validate(&self) -> Result<()> {
        self.calibration.validate()?;
        let d = self.dim();
        let mut sum = 0u64;
        for (i, r) in self.regions.iter().enumerate() {
            let bad = |m: String| Error::InvariantViolation(format!("region {i}: {m}"));
            if r.id as usize != i {
                return Err(bad(format!("id {} is not its creation index", r.id)));
            }
            if r.exemplar.dim() != d || r.dir_sum.len() != d {
                return Err(bad("dimension differs from the dictionary".into()));
            }
            if r.count == 0 {
                return Err(bad("member count is zero".into()));
            }
            if r.exemplar.as_slice().iter().chain(&r.dir_sum).any(|v| !v.is_finite()) {
                return Err(bad("non-finite direction data".into()));
            }
            let en = geometry::norm(r.exemplar.as_slice());
            if (en - 1.0).abs() > UNIT_TOL {
                return Err(bad(format!("exemplar norm {en} is not unit")));
            }
            let sn = geometry::norm(&r.dir_sum);
            if sn > r.count as f64 * (1.0 + UNIT_TOL) {
                return Err(bad(format!(
                    "direction-sum norm {sn} exceeds member count {}",
                    r.count
                )));
            }
            if r.samples.len() > SAMPLE_CAP {
                return Err(bad("too many provenance samples".into()));
            }
            sum = sum
                .checked_add(r.count)
                .ok_or_else(|| bad("member counts overflow".into()))?;
        }
        if sum != self.total_consumed {
            return Err(Error::InvariantViolation(format!(
                "member counts sum to {sum}, manifest says {}",
                self.total_consumed
            )));
        }
        Ok(())
    }

    fn manifest(&self) -> Manifest {
        let c = &self.calibration;
        Manifest {
            format: "EPDC".into(),
            version: DICT_VERSION,
            model: self.build.model.clone(),
            hook: self.build.hook.clone(),
            layer: self.build.layer,
            stream: self.build.stream.clone(),
            dim: self.dim() as u64,
            percentile: c.p,
            theta: c.theta,
            budget: c.sample_budget,
            pair_count: c.pair_count,
            calibration_seed: c.seed,
            calibration_skipped: c.skipped_degenerate,
            calibration_in_stream: self.build.calibration_in_stream,
            seed: self.build.seed,
            batch_size: self.build.batch_size,
            sat_window: self.build.sat_window,
            max_activations: self.build.max_activations,
            k: self.len() as u64,
            tokens_consumed: self.total_consumed,
            activations_seen: self.activations_seen,
            skipped_degenerate: self.skipped_degenerate,
            saturated: self.saturated,
            regions: self
                .regions
                .iter()
                .map(|r| RegionManifest {
                    id: r.id,
                    count: r.count,
                    created_step: r.created_step,
                    coherence: r.coherence(),
                    density: r.density(),
                    samples: r.samples.clone(),
                })
                .collect(),
        }
    }

    /// Human-readable manifest JSON (the same bytes `save` embeds).
    pub fn manifest_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.manifest())?)
    }

    pub fn save<W: Write>(&self, mut sink: W) -> Result<u64> {
        self.validate()?;
        let manifest = self.manifest_json()?;
        let mut bytes = 0u64;
        let mut put = |b: &[u8], sink: &mut W| -> Result<()> {
            sink.write_all(b)?;
            bytes += b.len() as u64;
            Ok(())
        };
        put(&DICT_MAGIC, &mut sink)?;
        put(&DICT_VERSION.to_le_bytes(), &mut sink)?;
        put(&(manifest.len() as u64).to_le_bytes(), &mut sink)?;
        put(manifest.as_bytes(), &mut sink)?;
        put(&f32_bytes(&self.calibration.mu), &mut sink)?;
        for r in &self.regions {
            put(&f32_bytes(r.exemplar.as_slice()), &mut sink)?;
        }
        for r in &self.regions {
            put(&f32_bytes(&r.dir_sum), &mut sink)?;
        }
        let counts: Vec<u8> = self.regions.iter().flat_map(|r| r.count.to_le_bytes()).collect();
        put(&counts, &mut sink)?;
        let steps: Vec<u8> = self
            .regions
            .iter()
            .flat_map(|r| r.created_step.to_le_bytes())
            .collect();
        put(&steps, &mut sink)?;
        sink.flush()?;
        Ok(bytes)
    }

    pub fn load<R: Read>(mut source: R) -> Result<Self> {
        let mut head = [0u8; 16];
        let got = read_up_to(&mut source, &mut head)?;
        if got < 4 || head[..4] != DICT_MAGIC {
            return Err(Error::BadMagic {
                expected: DICT_MAGIC,
                found: head[..got.min(4)].to_vec(),
            });
        }
        if got < 16 {
            return Err(Error::TruncatedPayload("dictionary header".into()));
        }
        let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
        if version != DICT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let mlen = u64::from_le_bytes(head[8..16].try_into().unwrap());
        if mlen > MAX_MANIFEST_BYTES {
            return Err(Error::InvalidHeader(format!("manifest length {mlen} is implausible")));
        }
        let mbytes = read_exact_section(&mut source, mlen as usize, "manifest")?;
        let text = std::str::from_utf8(&mbytes)
            .map_err(|_| Error::InvalidHeader("manifest is not UTF-8".into()))?;
        let m: Manifest = serde_json::from_str(text)?;
        if m.format != "EPDC" || m.version != DICT_VERSION {
            return Err(Error::InvalidHeader("manifest format tag mismatch".into()));
        }
        let d = usize::try_from(m.dim).map_err(|_| Error::InvalidHeader("dim".into()))?;
        let k = usize::try_from(m.k).map_err(|_| Error::InvalidHeader("K".into()))?;
        if d == 0 {
            return Err(Error::InvalidHeader("dim must be positive".into()));
        }
        if m.regions.len() != k {
            return Err(Error::InvariantViolation(format!(
                "manifest lists {} regions, K = {k}",
                m.regions.len()
            )));
        }
        let kd = k
            .checked_mul(d)
            .filter(|v| *v <= (1usize << 40))
            .ok_or_else(|| Error::InvalidHeader("K × dim overflows".into()))?;
        let mu = read_f32s(&mut source, d, "centre")?;
        let ex = read_f32s(&mut source, kd, "exemplar matrix")?;
        let sums = read_f32s(&mut source, kd, "direction-sum matrix")?;
        let counts = read_u64s(&mut source, k, "counts")?;
        let steps = read_u64s(&mut source, k, "creation steps")?;
        let mut probe = [0u8; 1];
        if read_up_to(&mut source, &mut probe)? != 0 {
            return Err(Error::TrailingBytes);
        }

        let mut regions = Vec::with_capacity(k);
        for (i, rm) in m.regions.into_iter().enumerate() {
            if rm.id as usize != i {
                return Err(Error::InvariantViolation(format!(
                    "manifest region {i} has id {}",
                    rm.id
                )));
            }
            if rm.count != counts[i] || rm.created_step != steps[i] {
                return Err(Error::InvariantViolation(format!(
                    "region {i}: manifest scalars disagree with binary sections"
                )));
            }
            regions.push(Region {
                id: i as u32,
                exemplar: Direction::from_unit_unchecked(ex[i * d..(i + 1) * d].to_vec()),
                dir_sum: sums[i * d..(i + 1) * d].to_vec(),
                count: counts[i],
                created_step: steps[i],
                samples: rm.samples,
            });
        }
        let calibration = Calibration {
            mu,
            p: m.percentile,
            theta: m.theta,
            sample_budget: m.budget,
            pair_count: m.pair_count,
            seed: m.calibration_seed,
            skipped_degenerate: m.calibration_skipped,
        };
        let build = BuildInfo {
            model: m.model,
            hook: m.hook,
            layer: m.layer,
            stream: m.stream,
            batch_size: m.batch_size,
            sat_window: m.sat_window,
            max_activations: m.max_activations,
            seed: m.seed,
            calibration_in_stream: m.calibration_in_stream,
        };
        let dict = Dictionary::new(
            calibration,
            regions,
            build,
            m.saturated,
            m.activations_seen,
            m.skipped_degenerate,
        );
        if dict.total_consumed != m.tokens_consumed {
            return Err(Error::InvariantViolation(format!(
                "member counts sum to {}, manifest says {}",
                dict.total_consumed, m.tokens_consumed
            )));
        }
        dict.validate()?;
        Ok(dict)
    }

    pub fn save_to_path(&self, path: impl AsRef<std::path::Path>) -> Result<u64> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        let n = self.save(&mut w)?;
        w.flush()?;
        Ok(n)
    }

    pub fn load_from_path(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::load(std::io::BufReader::new(f))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    model: Option<String>,
    hook: Option<String>,
    layer: Option<u32>,
    stream: Option<String>,
    dim: u64,
    percentile: f64,
    theta: f64,
    budget: u64,
    pair_count: u64,
    calibration_seed: u64,
    calibration_skipped: u64,
    calibration_in_stream: bool,
    seed: u64,
    batch_size: u64,
    sat_window: u64,
    max_activations: Option<u64>,
    #[serde(rename = "K")]
    k: u64,
    tokens_consumed: u64,
    activations_seen: u64,
    skipped_degenerate: u64,
    saturated: bool,
    regions: Vec<RegionManifest>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegionManifest {
    id: u32,
    count: u64,
    created_step: u64,
    coherence: f64,
    density: f64,
    samples: Vec<u64>,
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn read_up_to<R: Read>(src: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match src.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(filled)
}

fn read_exact_section<R: Read>(src: &mut R, len: usize, what: &str) -> Result<Vec<u8>> {
    // Grow incrementally so a corrupt length cannot force a huge allocation
    // before the payload proves to be there.
    let mut out = Vec::new();
    let mut chunk = vec![0u8; len.min(1 << 20)];
    while out.len() < len {
        let want = (len - out.len()).min(chunk.len());
        let got = read_up_to(src, &mut chunk[..want])?;
        out.extend_from_slice(&chunk[..got]);
        if got < want {
            return Err(Error::TruncatedPayload(format!(
                "{what}: expected {len} bytes, found {}",
                out.len()
            )));
        }
    }
    Ok(out)
}

fn read_f32s<R: Read>(src: &mut R, n: usize, what: &str) -> Result<Vec<f32>> {
    let b = read_exact_section(src, n * 4, what)?;
    Ok(b.chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn read_u64s<R: Read>(src: &mut R, n: usize, what: &str) -> Result<Vec<u64>> {
    let b = read_exact_section(src, n * 8, what)?;
    Ok(b.chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn region(id: u32, members: &[[f32; 2]]) -> Region {
        let mut sum = [0f32; 2];
        for m in members {
            sum[0] += m[0];
            sum[1] += m[1];
        }
        Region {
            id,
            exemplar: Direction::new(members[0].to_vec()).unwrap(),
            dir_sum: sum.to_vec(),
            count: members.len() as u64,
            created_step: id as u64,
            samples: vec![id as u64],
        }
    }

    #[test]
    fn stats_examples() {
        let s = region_stats(&region(0, &[[1.0, 0.0], [1.0, 0.0]])).unwrap();
        assert_eq!(s.coherence, 1.0);
        assert_eq!(s.mean.as_slice(), &[1.0, 0.0]);
        assert!((s.density - 2f64.log10()).abs() < 1e-12);
        assert!((s.density - 0.30103).abs() < 1e-5);

        let s = region_stats(&region(0, &[[1.0, 0.0], [0.0, 1.0]])).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((s.coherence - h).abs() < 1e-7);
        assert!((s.mean.as_slice()[0] as f64 - h).abs() < 1e-7);
        assert!((s.mean.as_slice()[1] as f64 - h).abs() < 1e-7);
        assert!(s.density.abs() < 1e-6);

        let s = region_stats(&region(0, &[[0.6, 0.8]])).unwrap();
        assert!((s.coherence - 1.0).abs() < 1e-7);
        assert!(s.density.abs() < 1e-6);
    }

    #[test]
    fn cancelling_members_report_zero_sum() {
        let r = region(3, &[[1.0, 0.0], [-1.0, 0.0]]);
        assert!(matches!(region_stats(&r), Err(Error::ZeroSum { region: 3 })));
        assert_eq!(r.coherence(), 0.0);
    }

    #[test]
    fn density_is_monotone() {
        for n in [1u64, 2, 10, 1000] {
            let mut last = f64::NEG_INFINITY;
            for c in [0.1, 0.3, 0.5, 0.9, 1.0] {
                let d = density(n, c);
                assert!(d > last);
                last = d;
            }
        }
        for c in [0.2, 0.7, 1.0] {
            let mut last = f64::NEG_INFINITY;
            for n in [1u64, 2, 3, 100, 100_000] {
                let d = density(n, c);
                assert!(d > last);
                last = d;
            }
        }
    }

    #[test]
    fn basis_parses() {
        assert_eq!("mean".parse::<Basis>().unwrap(), Basis::Mean);
        assert_eq!("exemplar".parse::<Basis>().unwrap(), Basis::Exemplar);
        assert!("median".parse::<Basis>().is_err());
    }
}
