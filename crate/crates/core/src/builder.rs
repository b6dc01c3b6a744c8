//! Single-pass batched leader clustering.
//!
//! Each batch runs in three phases:
//!
//! * **A**: every vector is centred and normalised, then compared against
//!   the exemplar matrix as it stood at the start of the batch. A vector whose
//!   nearest exemplar lies within `theta` joins it (ties go to the lowest id).
//! * **B**: the remaining vectors, in stream order, are leader-clustered
//!   among themselves: each joins the nearest leader spawned earlier in this
//!   batch if that leader is within `theta`, otherwise it becomes a leader.
//! * **C**: direction sums, counts and provenance samples are updated in
//!   stream order, and every leader becomes a new region.
//!
//! With `batch_size = 1` this is exactly sequential leader clustering.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::calibration::Calibration;
use crate::dictionary::{BuildInfo, Dictionary, Region, SAMPLE_CAP};
use crate::error::{Error, Result};
use crate::geometry::{self, check_dim, Direction, NormalizedRows};
use crate::kernel;
use crate::search;
use crate::stream::StreamReader;

/// Vectors per extraction batch at 128 prompts × 128 positions.
pub const DEFAULT_BATCH_SIZE: usize = 16_384;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildConfig {
    pub batch_size: usize,
    /// Consecutive zero-spawn batches that end the build.
    pub sat_window: usize,
    pub max_activations: Option<u64>,
    /// Recorded only; ordering is whatever the stream holds.
    pub seed: u64,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            batch_size: DEFAULT_BATCH_SIZE,
            sat_window: 1,
            max_activations: None,
            seed: 0,
        }
    }
}

impl BuildConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if self.sat_window == 0 {
            return Err(Error::InvalidArgument("sat_window must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub batch_index: u64,
    pub spawned: u64,
    /// Cumulative region count after the batch.
    #[serde(rename = "K")]
    pub k: u64,
    /// Cumulative records read, degenerate ones included.
    pub activations: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BuildTrace {
    pub records: Vec<TraceRecord>,
    pub saturated: bool,
}

impl BuildTrace {
    pub fn final_k(&self) -> u64 {
        self.records.last().map_or(0, |r| r.k)
    }

    pub fn activations(&self) -> u64 {
        self.records.last().map_or(0, |r| r.activations)
    }

    /// CSV with header `batch_index,spawned,K,activations`.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        if self.records.is_empty() {
            w.write_record(["batch_index", "spawned", "K", "activations"])?;
        }
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Parses the CSV written by [`BuildTrace::write_csv`]. The saturation
    /// flag is not part of the CSV and must be supplied.
    pub fn read_csv<R: Read>(source: R, saturated: bool) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(source);
        let records = rd.deserialize().collect::<std::result::Result<Vec<TraceRecord>, _>>()?;
        Ok(Self { records, saturated })
    }
}

/// What one batch did.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchOutcome {
    /// Region per input vector; `None` for degenerate vectors.
    pub assignments: Vec<Option<u32>>,
    /// Cosine distance to the receiving exemplar at assignment time.
    pub distances: Vec<Option<f64>>,
    pub spawned: usize,
    pub skipped: usize,
}

/// Owns a dictionary under construction.
pub struct Builder {
    cal: Calibration,
    config: BuildConfig,
    dim: usize,
    exemplars: Vec<f32>,
    sums: Vec<f64>,
    counts: Vec<u64>,
    created: Vec<u64>,
    samples: Vec<Vec<u64>>,
    next_index: u64,
    skipped: u64,
}

impl Builder {
    pub fn new(calibration: Calibration, config: BuildConfig) -> Result<Self> {
        config.validate()?;
        calibration.validate()?;
        let dim = calibration.dim();
        Ok(Self {
            cal: calibration,
            config,
            dim,
            exemplars: Vec::new(),
            sums: Vec::new(),
            counts: Vec::new(),
            created: Vec::new(),
            samples: Vec::new(),
            next_index: 0,
            skipped: 0,
        })
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn theta(&self) -> f64 {
        self.cal.theta
    }

    /// Records seen so far, degenerate ones included.
    pub fn activations_seen(&self) -> u64 {
        self.next_index
    }

    pub fn exemplar(&self, id: usize) -> &[f32] {
        &self.exemplars[id * self.dim..(id + 1) * self.dim]
    }

    /// Runs phases A–C over a flat row-major batch.
    pub fn process_batch(&mut self, batch: &[f32]) -> Result<BatchOutcome> {
        let d = self.dim;
        if batch.len() % d != 0 {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: batch.len() % d,
            });
        }
        let n = batch.len() / d;
        if n == 0 {
            return Ok(BatchOutcome::default());
        }
        let theta = self.cal.theta;
        // Centre and normalise; degenerate rows are dropped from `dirs`.
        let NormalizedRows { dirs, rows: rows_of } = geometry::center_normalize_rows(batch, &self.cal.mu)?;
        let base_index = self.next_index;
        self.next_index += n as u64;
        let usable = rows_of.len();
        let skipped = n - usable;
        self.skipped += skipped as u64;

        // Phase A: nearest exemplar in the batch-start snapshot.
        let k0 = self.k();
        let mut target: Vec<Option<(u32, f64)>> = vec![None; usable];
        if k0 > 0 {
            let nearest = search::nearest(&dirs, &self.exemplars, d, 1);
            for (t, (id, dist)) in target.iter_mut().zip(nearest) {
                if dist <= theta {
                    *t = Some((id, dist));
                }
            }
        }

        // Phase B: leader clustering among the unmatched, in stream order.
        let mut leaders: Vec<usize> = Vec::new();
        for u in 0..usable {
            if target[u].is_some() {
                continue;
            }
            let v = &dirs[u * d..(u + 1) * d];
            let mut best: Option<(usize, f64)> = None;
            for (li, &l) in leaders.iter().enumerate() {
                let dist = 1.0 - kernel::dot(v, &dirs[l * d..(l + 1) * d]);
                if best.is_none_or(|(_, b)| dist < b) {
                    best = Some((li, dist));
                }
            }
            match best {
                Some((li, dist)) if dist <= theta => {
                    target[u] = Some(((k0 + li) as u32, dist));
                }
                _ => {
                    leaders.push(u);
                    target[u] = Some(((k0 + leaders.len() - 1) as u32, 1.0 - kernel::dot(v, v)));
                }
            }
        }

        // Phase C: statistics in stream order.
        let mut assignments = vec![None; n];
        let mut distances = vec![None; n];
        for (u, t) in target.iter().enumerate() {
            let (id, dist) = t.expect("every usable vector has a target");
            let id_us = id as usize;
            let stream_index = base_index + rows_of[u] as u64;
            let v = &dirs[u * d..(u + 1) * d];
            if id_us == self.k() {
                self.exemplars.extend_from_slice(v);
                self.sums.extend(v.iter().map(|x| *x as f64));
                self.counts.push(1);
                self.created.push(stream_index);
                self.samples.push(vec![stream_index]);
            } else {
                if !(dist <= theta) {
                    return Err(Error::InvariantViolation(format!(
                        "member at distance {dist} exceeds threshold {theta}"
                    )));
                }
                let sum = &mut self.sums[id_us * d..(id_us + 1) * d];
                for (s, x) in sum.iter_mut().zip(v) {
                    *s += *x as f64;
                }
                self.counts[id_us] += 1;
                let s = &mut self.samples[id_us];
                if s.len() < SAMPLE_CAP {
                    s.push(stream_index);
                }
            }
            assignments[rows_of[u]] = Some(id);
            distances[rows_of[u]] = Some(dist.max(0.0));
        }

        Ok(BatchOutcome {
            assignments,
            distances,
            spawned: leaders.len(),
            skipped,
        })
    }

    /// Freezes the builder into an immutable dictionary.
    pub fn finish(self, saturated: bool, mut info: BuildInfo) -> Dictionary {
        let d = self.dim;
        info.batch_size = self.config.batch_size as u64;
        info.sat_window = self.config.sat_window as u64;
        info.max_activations = self.config.max_activations;
        info.seed = self.config.seed;
        let regions = (0..self.k())
            .map(|i| Region {
                id: i as u32,
                exemplar: Direction::from_unit_unchecked(self.exemplars[i * d..(i + 1) * d].to_vec()),
                dir_sum: self.sums[i * d..(i + 1) * d].iter().map(|s| *s as f32).collect(),
                count: self.counts[i],
                created_step: self.created[i],
                samples: self.samples[i].clone(),
            })
            .collect();
        Dictionary::new(self.cal, regions, info, saturated, self.next_index, self.skipped)
    }
}

/// Streams batches through a [`Builder`] until saturation, the activation cap
/// or the end of the stream.
pub fn build<R: Read>(
    reader: &mut StreamReader<R>,
    calibration: Calibration,
    config: BuildConfig,
    info: BuildInfo,
) -> Result<(Dictionary, BuildTrace)> {
    check_dim(calibration.dim(), reader.dim())?;
    reader.set_batch_size(config.batch_size)?;
    let window = config.sat_window;
    let cap = config.max_activations;
    let mut builder = Builder::new(calibration, config)?;
    let mut trace = BuildTrace::default();
    let mut empty = 0usize;
    let mut batch_index = 0u64;
    loop {
        let limit = match cap {
            Some(c) => {
                let left = c.saturating_sub(builder.activations_seen());
                if left == 0 {
                    break;
                }
                usize::try_from(left).unwrap_or(usize::MAX)
            }
            None => usize::MAX,
        };
        let Some(batch) = reader.next_batch_limited(limit)? else {
            break;
        };
        let out = builder.process_batch(batch.as_flat())?;
        trace.records.push(TraceRecord {
            batch_index,
            spawned: out.spawned as u64,
            k: builder.k() as u64,
            activations: builder.activations_seen(),
        });
        batch_index += 1;
        if out.spawned == 0 {
            empty += 1;
        } else {
            empty = 0;
        }
        if empty >= window {
            trace.saturated = true;
            break;
        }
    }
    let dict = builder.finish(trace.saturated, info);
    Ok((dict, trace))
}
