//! Exemplar partitioning over activation streams.
//!
//! A dictionary is built in one streaming pass: activations are centred on a
//! calibrated corpus mean, projected onto the unit sphere, and leader-clustered
//! with a percentile-calibrated cosine threshold. Each region is anchored by
//! the first activation that arrived in it (its exemplar), so dictionaries
//! form a Voronoi partition of the centred sphere that can be compared across
//! builds, layers and checkpoints.

pub mod adapter;
pub mod analysis;
pub mod builder;
pub mod calibration;
pub mod dictionary;
pub mod error;
pub mod geometry;
pub mod inference;
mod kernel;
pub mod matching;
pub mod rng;
mod search;
pub mod stability;
pub mod stream;
pub mod synth;

pub use adapter::{decode, encode, OneHotCode};
pub use builder::{build, BatchOutcome, BuildConfig, BuildTrace, Builder, TraceRecord};
pub use calibration::{calibrate, calibrate_stream, percentile, Calibration};
pub use dictionary::{region_stats, Basis, BuildInfo, Dictionary, Region, RegionStats};
pub use error::{Error, Result};
pub use geometry::{add_direction, center_normalize, cos_dist, project_off, Direction};
pub use inference::{assign, assign_topn, coverage_stats, Assignment, CoverageStats};
pub use matching::{cross_tab, hungarian, match_dictionaries, CrossTab, MatchReport, ScoreMatrix};
pub use stability::{cross_seed_stability, size_controlled_coherence, spearman, StabilityReport};
pub use stream::{read_stream, write_stream, StreamHeader, StreamReader, StreamWriter};
