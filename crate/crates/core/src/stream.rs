//! EPAS activation streams and their provenance sidecars.
//!
//! Layout (little-endian, 21-byte header then payload):
//!
//! | offset | size | field                                  |
//! |--------|------|----------------------------------------|
//! | 0      | 4    | magic `EPAS`                           |
//! | 4      | 4    | version `u32` (= 1)                    |
//! | 8      | 1    | dtype `u8` (0 = `f32` LE)              |
//! | 9      | 4    | dim `u32`                              |
//! | 13     | 8    | count `u64` (0 = unknown/open-ended)   |
//! | 21     | ...  | `count · dim` contiguous `f32` values  |
//!
//! The sidecar is UTF-8, one record per line, tab-separated
//! `index, doc_id, position, tag` with an empty tag meaning none.

use std::io::{self, BufRead, Read, Write};

use crate::error::{Error, Result};
use crate::rng;

pub const STREAM_MAGIC: [u8; 4] = *b"EPAS";
pub const STREAM_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;
pub const HEADER_LEN: usize = 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamHeader {
    pub dim: u32,
    /// Number of records, or 0 when the writer did not know it up front.
    pub count: u64,
}

impl StreamHeader {
    pub fn new(dim: u32, count: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidHeader("dim must be at least 1".into()));
        }
        Ok(Self { dim, count })
    }

    pub fn dim(&self) -> usize {
        self.dim as usize
    }

    pub fn record_bytes(&self) -> usize {
        self.dim as usize * 4
    }

    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(&STREAM_MAGIC);
        b[4..8].copy_from_slice(&STREAM_VERSION.to_le_bytes());
        b[8] = DTYPE_F32;
        b[9..13].copy_from_slice(&self.dim.to_le_bytes());
        b[13..21].copy_from_slice(&self.count.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8]) -> Result<Self> {
        if b.len() < 4 || b[0..4] != STREAM_MAGIC {
            return Err(Error::BadMagic {
                expected: STREAM_MAGIC,
                found: b[..b.len().min(4)].to_vec(),
            });
        }
        if b.len() < HEADER_LEN {
            return Err(Error::TruncatedPayload(format!(
                "header has {} of {HEADER_LEN} bytes",
                b.len()
            )));
        }
        let version = u32::from_le_bytes(b[4..8].try_into().unwrap());
        if version != STREAM_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        if b[8] != DTYPE_F32 {
            return Err(Error::UnsupportedDtype(b[8]));
        }
        let dim = u32::from_le_bytes(b[9..13].try_into().unwrap());
        let count = u64::from_le_bytes(b[13..21].try_into().unwrap());
        Self::new(dim, count)
    }

    pub fn read_from<R: Read>(src: &mut R) -> Result<Self> {
        let mut b = [0u8; HEADER_LEN];
        let n = read_full(src, &mut b)?;
        Self::decode(&b[..n])
    }
}

/// Reads until `buf` is full or the source is exhausted.
fn read_full<R: Read>(src: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match src.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// Incremental EPAS writer.
pub struct StreamWriter<W: Write> {
    header: StreamHeader,
    sink: W,
    records: u64,
    scratch: Vec<u8>,
}

impl<W: Write> StreamWriter<W> {
    pub fn new(header: StreamHeader, mut sink: W) -> Result<Self> {
        sink.write_all(&header.encode())?;
        Ok(Self {
            header,
            sink,
            records: 0,
            scratch: Vec::new(),
        })
    }

    pub fn push(&mut self, v: &[f32]) -> Result<()> {
        if v.len() != self.header.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.header.dim(),
                actual: v.len(),
            });
        }
        self.scratch.clear();
        for x in v {
            self.scratch.extend_from_slice(&x.to_le_bytes());
        }
        self.sink.write_all(&self.scratch)?;
        self.records += 1;
        Ok(())
    }

    /// Pushes every row of a flat row-major block.
    pub fn push_rows(&mut self, flat: &[f32]) -> Result<()> {
        let d = self.header.dim();
        if flat.len() % d != 0 {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: flat.len() % d,
            });
        }
        for row in flat.chunks_exact(d) {
            self.push(row)?;
        }
        Ok(())
    }

    pub fn records(&self) -> u64 {
        self.records
    }

    /// Flushes and returns the sink with the total byte count.
    pub fn finish(mut self) -> Result<(W, u64)> {
        if self.header.count != 0 && self.header.count != self.records {
            return Err(Error::CountMismatch {
                declared: self.header.count,
                written: self.records,
            });
        }
        self.sink.flush()?;
        let bytes = HEADER_LEN as u64 + self.records * self.header.record_bytes() as u64;
        Ok((self.sink, bytes))
    }
}

/// Writes a complete stream and returns the number of bytes emitted.
pub fn write_stream<'a, W, I>(header: StreamHeader, vectors: I, sink: W) -> Result<u64>
where
    W: Write,
    I: IntoIterator<Item = &'a [f32]>,
{
    let mut w = StreamWriter::new(header, sink)?;
    for v in vectors {
        w.push(v)?;
    }
    Ok(w.finish()?.1)
}

/// A contiguous run of records from a stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBatch {
    /// Stream index of the first record.
    pub start: u64,
    dim: usize,
    data: Vec<f32>,
}

impl ActivationBatch {
    pub fn new(start: u64, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: if dim == 0 { 0 } else { data.len() % dim },
            });
        }
        Ok(Self { start, dim, data })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f32] {
        &self.data
    }

    pub fn into_flat(self) -> Vec<f32> {
        self.data
    }
}

/// Iterator over batches of an EPAS stream.
pub struct StreamReader<R: Read> {
    header: StreamHeader,
    src: R,
    batch_size: usize,
    next_index: u64,
    buf: Vec<u8>,
    done: bool,
}

/// Opens a stream for batched reading.
pub fn read_stream<R: Read>(mut source: R, batch_size: usize) -> Result<StreamReader<R>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let header = StreamHeader::read_from(&mut source)?;
    Ok(StreamReader {
        header,
        src: source,
        batch_size,
        next_index: 0,
        buf: Vec::new(),
        done: false,
    })
}

impl<R: Read> StreamReader<R> {
    pub fn header(&self) -> StreamHeader {
        self.header
    }

    pub fn dim(&self) -> usize {
        self.header.dim()
    }

    /// Records yielded so far.
    pub fn position(&self) -> u64 {
        self.next_index
    }

    /// Changes the size of subsequent batches.
    pub fn set_batch_size(&mut self, batch_size: usize) -> Result<()> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        self.batch_size = batch_size;
        Ok(())
    }

    /// Reads the next batch of at most `limit` records (and at most the
    /// configured batch size).
    pub fn next_batch_limited(&mut self, limit: usize) -> Result<Option<ActivationBatch>> {
        if self.done {
            return Ok(None);
        }
        let rec = self.header.record_bytes();
        let mut want = self.batch_size.min(limit);
        if self.header.count != 0 {
            let left = self.header.count - self.next_index;
            want = want.min(usize::try_from(left).unwrap_or(usize::MAX));
        }
        if want == 0 {
            if self.header.count != 0 && self.next_index == self.header.count {
                self.check_trailing()?;
            }
            self.done = true;
            return Ok(None);
        }
        let got = self.fill(want.saturating_mul(rec))?;
        if got % rec != 0 {
            self.done = true;
            return Err(Error::TruncatedPayload(format!(
                "{} trailing bytes do not form a whole {}-dim record",
                got % rec,
                self.header.dim
            )));
        }
        let n = got / rec;
        if n < want {
            self.done = true;
            if self.header.count != 0 {
                return Err(Error::TruncatedPayload(format!(
                    "header declares {} records, payload holds {}",
                    self.header.count,
                    self.next_index + n as u64
                )));
            }
            if n == 0 {
                return Ok(None);
            }
        }
        let data: Vec<f32> = self.buf[..got]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let batch = ActivationBatch::new(self.next_index, self.header.dim(), data)?;
        self.next_index += n as u64;
        Ok(Some(batch))
    }

    /// Reads up to `target` bytes into `buf`, growing it only as data
    /// arrives so a corrupt header cannot force a huge allocation.
    fn fill(&mut self, target: usize) -> Result<usize> {
        const FIRST_CHUNK: usize = 1 << 20;
        self.buf.clear();
        while self.buf.len() < target {
            let start = self.buf.len();
            let step = (target - start).min(start.max(FIRST_CHUNK));
            self.buf.resize(start + step, 0);
            let got = read_full(&mut self.src, &mut self.buf[start..])?;
            if got < step {
                self.buf.truncate(start + got);
                break;
            }
        }
        Ok(self.buf.len())
    }

    fn check_trailing(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        if read_full(&mut self.src, &mut probe)? != 0 {
            return Err(Error::TrailingBytes);
        }
        Ok(())
    }

    /// Drains the remaining records into one flat row-major buffer.
    pub fn read_remaining(&mut self) -> Result<Vec<f32>> {
        let mut all = Vec::new();
        for b in self.by_ref() {
            all.extend_from_slice(b?.as_flat());
        }
        Ok(all)
    }
}

impl<R: Read> Iterator for StreamReader<R> {
    type Item = Result<ActivationBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        match self.next_batch_limited(usize::MAX) {
            Ok(Some(b)) => Some(Ok(b)),
            Ok(None) => None,
            Err(e) => Some(Err(e)),
        }
    }
}

/// Reads a whole stream into memory.
pub fn read_all<R: Read>(source: R) -> Result<(StreamHeader, Vec<f32>)> {
    let mut r = read_stream(source, 4096)?;
    let data = r.read_remaining()?;
    Ok((r.header(), data))
}

/// Rewrites a finite stream as the seeded Fisher–Yates permutation of its
/// records. Returns the byte count and the permutation (output position `k`
/// holds input record `perm[k]`), which [`permute_provenance`] applies to a
/// sidecar.
pub fn shuffle_stream<R: Read, W: Write>(source: R, seed: u64, sink: W) -> Result<(u64, Vec<usize>)> {
    let mut reader = read_stream(source, 4096)?;
    let header = reader.header();
    if header.count == 0 {
        return Err(Error::UnknownCount);
    }
    let data = reader.read_remaining()?;
    let d = header.dim();
    let n = data.len() / d;
    let perm = rng::permutation(n, seed);
    let mut w = StreamWriter::new(header, sink)?;
    for &src in &perm {
        w.push(&data[src * d..(src + 1) * d])?;
    }
    let (_, bytes) = w.finish()?;
    Ok((bytes, perm))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProvenanceRecord {
    pub index: u64,
    pub doc_id: String,
    pub position: u32,
    pub tag: Option<String>,
}

fn check_field(s: &str, what: &str) -> Result<()> {
    if s.contains(['\t', '\n', '\r']) {
        return Err(Error::InvalidProvenance(format!(
            "{what} {s:?} contains a tab or newline"
        )));
    }
    Ok(())
}

pub fn write_sidecar<W: Write>(mut sink: W, records: &[ProvenanceRecord]) -> Result<()> {
    let mut last: Option<u64> = None;
    for r in records {
        if last.is_some_and(|l| r.index <= l) {
            return Err(Error::InvalidProvenance(format!(
                "record index {} is not strictly increasing",
                r.index
            )));
        }
        last = Some(r.index);
        check_field(&r.doc_id, "doc id")?;
        let tag = r.tag.as_deref().unwrap_or("");
        check_field(tag, "tag")?;
        writeln!(sink, "{}\t{}\t{}\t{}", r.index, r.doc_id, r.position, tag)?;
    }
    sink.flush()?;
    Ok(())
}

pub fn read_sidecar<R: BufRead>(source: R) -> Result<Vec<ProvenanceRecord>> {
    let mut out: Vec<ProvenanceRecord> = Vec::new();
    for (lineno, line) in source.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::InvalidProvenance(format!("line {}: {msg}", lineno + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(bad("expected 4 tab-separated fields"));
        }
        let index: u64 = fields[0].parse().map_err(|_| bad("bad index"))?;
        let position: u32 = fields[2].parse().map_err(|_| bad("bad position"))?;
        if out.last().is_some_and(|l| index <= l.index) {
            return Err(bad("record index is not strictly increasing"));
        }
        out.push(ProvenanceRecord {
            index,
            doc_id: fields[1].to_string(),
            position,
            tag: (!fields[3].is_empty()).then(|| fields[3].to_string()),
        });
    }
    Ok(out)
}

/// Moves sidecar records along with a shuffle: the record for input `perm[k]`
/// is re-indexed to `k`.
pub fn permute_provenance(records: &[ProvenanceRecord], perm: &[usize]) -> Vec<ProvenanceRecord> {
    let mut inverse = vec![usize::MAX; perm.len()];
    for (k, &src) in perm.iter().enumerate() {
        inverse[src] = k;
    }
    let mut out: Vec<ProvenanceRecord> = records
        .iter()
        .filter(|r| (r.index as usize) < perm.len())
        .map(|r| ProvenanceRecord {
            index: inverse[r.index as usize] as u64,
            ..r.clone()
        })
        .collect();
    out.sort_by_key(|r| r.index);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn encode(dim: u32, count: u64, rows: &[Vec<f32>]) -> Vec<u8> {
        let mut buf = Vec::new();
        let h = StreamHeader::new(dim, count).unwrap();
        write_stream(h, rows.iter().map(|r| r.as_slice()), &mut buf).unwrap();
        buf
    }

    #[test]
    fn header_and_payload_sizes() {
        let rows = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]];
        let buf = encode(3, 2, &rows);
        assert_eq!(buf.len(), 21 + 24);
        assert_eq!(&buf[..4], b"EPAS");
        assert_eq!(encode(3, 0, &[]).len(), 21);
    }

    #[test]
    fn wrong_dim_is_rejected() {
        let h = StreamHeader::new(3, 0).unwrap();
        let rows = [vec![1.0f32, 2.0]];
        let err = write_stream(h, rows.iter().map(|r| r.as_slice()), Vec::new()).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { expected: 3, actual: 2 }));
    }

    #[test]
    fn declared_count_must_match() {
        let h = StreamHeader::new(1, 3).unwrap();
        let rows = [vec![1.0f32]];
        let err = write_stream(h, rows.iter().map(|r| r.as_slice()), Vec::new()).unwrap_err();
        assert!(matches!(err, Error::CountMismatch { declared: 3, written: 1 }));
    }

    #[test]
    fn batches_are_ceiling_split() {
        let rows: Vec<Vec<f32>> = (0..5).map(|i| vec![i as f32, 0.5]).collect();
        for count in [5, 0] {
            let buf = encode(2, count, &rows);
            let sizes: Vec<usize> = read_stream(buf.as_slice(), 2)
                .unwrap()
                .map(|b| b.unwrap().len())
                .collect();
            assert_eq!(sizes, vec![2, 2, 1]);
        }
    }

    #[test]
    fn payload_of_24_bytes_at_dim_3_is_two_vectors() {
        let rows = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]];
        let buf = encode(3, 0, &rows);
        let (h, data) = read_all(buf.as_slice()).unwrap();
        assert_eq!(h.dim, 3);
        assert_eq!(data.len() / 3, 2);
    }

    #[test]
    fn corrupt_inputs_give_named_errors() {
        let rows = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]];
        let mut buf = encode(3, 2, &rows);
        buf[0] = b'X';
        assert!(matches!(read_stream(buf.as_slice(), 1), Err(Error::BadMagic { .. })));

        let buf = encode(3, 2, &rows);
        let short = &buf[..buf.len() - 5];
        let err = read_all(short).unwrap_err();
        assert!(matches!(err, Error::TruncatedPayload(_)), "{err}");

        let short = &buf[..buf.len() - 12];
        assert!(matches!(read_all(short), Err(Error::TruncatedPayload(_))));

        let mut open = encode(3, 0, &rows);
        open.pop();
        assert!(matches!(read_all(open.as_slice()), Err(Error::TruncatedPayload(_))));

        let mut long = encode(3, 2, &rows);
        long.extend_from_slice(&[0u8; 12]);
        assert!(matches!(read_all(long.as_slice()), Err(Error::TrailingBytes)));

        assert!(matches!(read_all(&buf[..10]), Err(Error::TruncatedPayload(_))));
        assert!(matches!(read_all(&b""[..]), Err(Error::BadMagic { .. })));

        let mut v = encode(3, 2, &rows);
        v[4] = 2;
        assert!(matches!(read_all(v.as_slice()), Err(Error::UnsupportedVersion(2))));
        let mut v = encode(3, 2, &rows);
        v[8] = 1;
        assert!(matches!(read_all(v.as_slice()), Err(Error::UnsupportedDtype(1))));
        let mut v = encode(3, 2, &rows);
        v[9..13].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(read_all(v.as_slice()), Err(Error::InvalidHeader(_))));
    }

    #[test]
    fn shuffle_examples() {
        let rows: Vec<Vec<f32>> = (0..10).map(|i| vec![i as f32]).collect();
        let buf = encode(1, 10, &rows);
        let mut a = Vec::new();
        let mut b = Vec::new();
        let mut c = Vec::new();
        shuffle_stream(buf.as_slice(), 0, &mut a).unwrap();
        shuffle_stream(buf.as_slice(), 0, &mut b).unwrap();
        shuffle_stream(buf.as_slice(), 1, &mut c).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);

        let one = encode(1, 1, &rows[..1]);
        let mut out = Vec::new();
        shuffle_stream(one.as_slice(), 42, &mut out).unwrap();
        assert_eq!(out, one);

        let open = encode(1, 0, &rows);
        assert!(matches!(
            shuffle_stream(open.as_slice(), 0, Vec::new()),
            Err(Error::UnknownCount)
        ));
    }

    #[test]
    fn sidecar_round_trip_and_permutation() {
        let recs: Vec<ProvenanceRecord> = (0..4)
            .map(|i| ProvenanceRecord {
                index: i,
                doc_id: format!("doc{i}"),
                position: i as u32 * 3,
                tag: (i % 2 == 0).then(|| "t".to_string()),
            })
            .collect();
        let mut buf = Vec::new();
        write_sidecar(&mut buf, &recs).unwrap();
        assert_eq!(read_sidecar(buf.as_slice()).unwrap(), recs);

        let perm = vec![2, 0, 3, 1];
        let moved = permute_provenance(&recs, &perm);
        assert_eq!(moved[0].doc_id, "doc2");
        assert_eq!(moved[3].doc_id, "doc1");
        assert!(moved.windows(2).all(|w| w[0].index < w[1].index));

        let mut bad = recs.clone();
        bad[1].index = 0;
        assert!(write_sidecar(Vec::new(), &bad).is_err());
        assert!(read_sidecar(&b"1\tdoc\t0\t\n0\tdoc\t1\t\n"[..]).is_err());
        assert!(read_sidecar(&b"1\tdoc\t0\n"[..]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(dim in 1u32..9, rows in prop::collection::vec(prop::collection::vec(any::<u32>(), 8), 0..20), known in any::<bool>()) {
            let rows: Vec<Vec<f32>> = rows.iter().map(|r| r[..dim as usize].iter().map(|b| f32::from_bits(*b)).collect()).collect();
            let buf = encode(dim, if known { rows.len() as u64 } else { 0 }, &rows);
            let (_, data) = read_all(buf.as_slice()).unwrap();
            let flat: Vec<u32> = rows.iter().flatten().map(|v| v.to_bits()).collect();
            prop_assert_eq!(data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), flat);
        }

        #[test]
        fn shuffle_is_a_permutation(n in 1usize..60, seed in any::<u64>()) {
            let rows: Vec<Vec<f32>> = (0..n).map(|i| vec![i as f32, -(i as f32)]).collect();
            let buf = encode(2, n as u64, &rows);
            let mut out = Vec::new();
            shuffle_stream(buf.as_slice(), seed, &mut out).unwrap();
            let (_, data) = read_all(out.as_slice()).unwrap();
            let mut firsts: Vec<u32> = data.chunks(2).map(|c| c[0] as u32).collect();
            firsts.sort_unstable();
            prop_assert_eq!(firsts, (0..n as u32).collect::<Vec<_>>());
        }
    }
}
