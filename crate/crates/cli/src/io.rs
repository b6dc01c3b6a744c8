//! Argument parsers, exit-code errors and file helpers.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ep_core::stream::{read_stream, StreamReader};
use ep_core::Dictionary;

#[derive(Debug)]
pub enum Failure {
    /// Bad invocation: exit 2.
    Usage(String),
    /// Domain or I/O error: exit 1.
    Domain(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Domain(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Domain(m) => f.write_str(m),
        }
    }
}

impl From<ep_core::Error> for Failure {
    fn from(e: ep_core::Error) -> Self {
        Failure::Domain(e.to_string())
    }
}

pub type CliResult<T> = Result<T, Failure>;

fn at(path: &Path, e: impl fmt::Display) -> Failure {
    Failure::Domain(format!("{}: {e}", path.display()))
}

pub fn parse_percentile(s: &str) -> Result<f64, String> {
    let p: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if p > 0.0 && p < 100.0 {
        Ok(p)
    } else {
        Err(format!("percentile must lie in (0, 100), got {p}"))
    }
}

pub fn parse_positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

pub fn parse_named_path(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), PathBuf::from(path))),
        _ => Err(format!("expected NAME=PATH, got {s:?}")),
    }
}

pub fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| at(path, e))
}

pub fn open_stream(path: &Path, batch_size: usize) -> CliResult<StreamReader<BufReader<File>>> {
    read_stream(open(path)?, batch_size).map_err(|e| at(path, e))
}

/// Every vector of a stream, flat row-major, with its dimension.
pub fn read_vectors(path: &Path) -> CliResult<(usize, Vec<f32>)> {
    let mut reader = open_stream(path, 1 << 14)?;
    let rows = reader.read_remaining().map_err(|e| at(path, e))?;
    Ok((reader.dim(), rows))
}

pub fn load_dict(path: &Path) -> CliResult<Dictionary> {
    Dictionary::load(open(path)?).map_err(|e| at(path, e))
}

/// Non-empty lines parsed one value each.
pub fn read_column<T: std::str::FromStr>(path: &Path) -> CliResult<Vec<T>>
where
    T::Err: fmt::Display,
{
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| at(path, e))?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        out.push(t.parse().map_err(|e| at(path, format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

pub fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| at(path, e))
}

/// Writes through `f` and flushes, attaching the path to any error.
pub fn write_with<F>(path: &Path, f: F) -> CliResult<()>
where
    F: FnOnce(&mut BufWriter<File>) -> ep_core::Result<()>,
{
    let mut w = create(path)?;
    f(&mut w).map_err(|e| at(path, e))?;
    w.flush().map_err(|e| at(path, e))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    write_with(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")?;
        Ok(())
    })
}
