//! Binary trace and label files.
//!
//! Trace file (little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 8     | magic `SSNTRACE` |
//! | 4     | version (`1`) |
//! | 4     | `n_traces` |
//! | 4     | `n_samples` |
//! | 4     | metadata byte length `m` |
//! | m     | UTF-8 `key=value` lines, each terminated by `\n` |
//! | 4·n_traces·n_samples | `f32` samples, row-major (one trace per row) |
//!
//! Label file: magic `SSNLABEL`, u32 version, u32 `n_records`, u32 `outer_count`,
//! u32 `inner_count`, then fixed-width records of u32 key index, u32 role
//! (0 = f, 1 = g), u32 coefficient index, i32 value and a site bitmap of
//! `ceil(outer_count · (inner_count + 1) / 8)` bytes. Site
//! `u · (inner_count + 1) + j` is inner mask `k = j + 1` of outer iteration `u`
//! for `j < inner_count`, and `-neg` of that iteration for `j = inner_count`;
//! bit `s` lives in byte `s / 8` at position `s % 8`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::sampler::Role;

pub const TRACE_MAGIC: &[u8; 8] = b"SSNTRACE";
pub const LABEL_MAGIC: &[u8; 8] = b"SSNLABEL";
pub const FORMAT_VERSION: u32 = 1;

const TRACE_HEADER_LEN: usize = 24;
const LABEL_HEADER_LEN: usize = 24;

#[derive(Debug, Error)]
pub enum TraceIoError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated file: need {needed} bytes, have {available}")]
    TruncatedFile { needed: usize, available: usize },
    #[error("{0} unexpected trailing bytes after payload")]
    TrailingData(usize),
    #[error("non-finite sample at trace {trace}, sample {sample}")]
    NonFiniteSample { trace: usize, sample: usize },
    #[error("invalid metadata: {0}")]
    InvalidMetadata(String),
    #[error("invalid label record {record}: {message}")]
    InvalidLabel { record: usize, message: String },
}

impl TraceIoError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.display().to_string(), source }
    }
}

/// Dense matrix of power samples, one trace per row.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    n_traces: usize,
    n_samples: usize,
    samples: Vec<f32>,
    pub metadata: BTreeMap<String, String>,
}

impl TraceSet {
    pub fn new(n_traces: usize, n_samples: usize, samples: Vec<f32>) -> Result<Self, TraceIoError> {
        if n_traces.checked_mul(n_samples) != Some(samples.len()) {
            return Err(TraceIoError::Dimension(format!(
                "{n_traces} x {n_samples} matrix cannot hold {} samples",
                samples.len()
            )));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            let (trace, sample) = (i / n_samples, i % n_samples);
            return Err(TraceIoError::NonFiniteSample { trace, sample });
        }
        Ok(Self { n_traces, n_samples, samples, metadata: BTreeMap::new() })
    }

    pub fn with_metadata(mut self, metadata: BTreeMap<String, String>) -> Self {
        self.metadata = metadata;
        self
    }

    pub fn n_traces(&self) -> usize {
        self.n_traces
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn trace(&self, i: usize) -> &[f32] {
        &self.samples[i * self.n_samples..(i + 1) * self.n_samples]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        // chunks_exact(0) panics; an n x 0 matrix still has n empty rows
        (0..self.n_traces).map(move |i| self.trace(i))
    }

    pub fn get(&self, trace: usize, sample: usize) -> f32 {
        self.samples[trace * self.n_samples + sample]
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    /// Parsed metadata value; `None` when absent or unparsable.
    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Option<T> {
        self.meta(key).and_then(|v| v.parse().ok())
    }

    /// Copy with columns reordered so that new column `j` is old column `order[j]`.
    pub fn permute_columns(&self, order: &[usize]) -> Result<Self, TraceIoError> {
        if order.len() != self.n_samples {
            return Err(TraceIoError::Dimension("permutation length".into()));
        }
        let mut samples = Vec::with_capacity(self.samples.len());
        for row in self.rows() {
            samples.extend(order.iter().map(|&j| row[j]));
        }
        Ok(Self { samples, ..self.clone() })
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let meta = encode_metadata(&self.metadata)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e.to_string()))?;
        let dims = [self.n_traces, self.n_samples, meta.len()]
            .map(|d| u32::try_from(d).map_err(|_| std::io::Error::other("dimension exceeds u32")));
        out.write_all(TRACE_MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        for d in dims {
            out.write_all(&d?.to_le_bytes())?;
        }
        out.write_all(&meta)?;
        let mut buf = Vec::with_capacity(self.samples.len().min(1 << 20) * 4);
        for chunk in self.samples.chunks(1 << 20) {
            buf.clear();
            for s in chunk {
                buf.extend_from_slice(&s.to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TraceIoError> {
        let header = take(bytes, 0, TRACE_HEADER_LEN)?;
        if &header[..8] != TRACE_MAGIC {
            return Err(TraceIoError::BadMagic { expected: "SSNTRACE" });
        }
        let version = le_u32(header, 8);
        if version != FORMAT_VERSION {
            return Err(TraceIoError::UnsupportedVersion(version));
        }
        let n_traces = le_u32(header, 12) as usize;
        let n_samples = le_u32(header, 16) as usize;
        let meta_len = le_u32(header, 20) as usize;
        let meta_bytes = take(bytes, TRACE_HEADER_LEN, meta_len)?;
        let metadata = decode_metadata(meta_bytes)?;
        let payload_start = TRACE_HEADER_LEN + meta_len;
        let count =
            n_traces.checked_mul(n_samples).ok_or_else(|| TraceIoError::Dimension("matrix size overflows".into()))?;
        let payload_len =
            count.checked_mul(4).ok_or_else(|| TraceIoError::Dimension("payload size overflows".into()))?;
        let payload = take(bytes, payload_start, payload_len)?;
        let extra = bytes.len() - payload_start - payload_len;
        if extra != 0 {
            return Err(TraceIoError::TrailingData(extra));
        }
        let samples: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(Self::new(n_traces, n_samples, samples)?.with_metadata(metadata))
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self, TraceIoError> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes).map_err(|source| TraceIoError::Io { path: "<reader>".into(), source })?;
        Self::from_bytes(&bytes)
    }
}

fn take(bytes: &[u8], start: usize, len: usize) -> Result<&[u8], TraceIoError> {
    let end =
        start.checked_add(len).ok_or(TraceIoError::TruncatedFile { needed: usize::MAX, available: bytes.len() })?;
    bytes.get(start..end).ok_or(TraceIoError::TruncatedFile { needed: end, available: bytes.len() })
}

fn le_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn encode_metadata(meta: &BTreeMap<String, String>) -> Result<Vec<u8>, TraceIoError> {
    let mut out = String::new();
    for (k, v) in meta {
        if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
            return Err(TraceIoError::InvalidMetadata(format!("{k:?}={v:?}")));
        }
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    Ok(out.into_bytes())
}

fn decode_metadata(bytes: &[u8]) -> Result<BTreeMap<String, String>, TraceIoError> {
    let text = std::str::from_utf8(bytes).map_err(|e| TraceIoError::InvalidMetadata(format!("not UTF-8: {e}")))?;
    let mut meta = BTreeMap::new();
    for line in text.split('\n').filter(|l| !l.is_empty()) {
        let (k, v) =
            line.split_once('=').ok_or_else(|| TraceIoError::InvalidMetadata(format!("missing '=' in {line:?}")))?;
        meta.insert(k.to_string(), v.to_string());
    }
    Ok(meta)
}

/// Writes to a temporary file next to `path`, then renames it into place.
pub(crate) fn write_atomically<F>(path: &Path, body: F) -> Result<(), TraceIoError>
where
    F: FnOnce(&mut std::io::BufWriter<&std::fs::File>) -> std::io::Result<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| TraceIoError::io(path, e))?;
    {
        let mut w = std::io::BufWriter::new(tmp.as_file());
        body(&mut w).map_err(|e| TraceIoError::io(path, e))?;
        w.flush().map_err(|e| TraceIoError::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| TraceIoError::io(path, e.error))?;
    Ok(())
}

pub fn write_trace_set(set: &TraceSet, path: &Path) -> Result<(), TraceIoError> {
    if set.n_traces * set.n_samples != set.samples.len() {
        return Err(TraceIoError::Dimension("inconsistent matrix".into()));
    }
    encode_metadata(&set.metadata)?;
    write_atomically(path, |w| set.write_to(w))
}

pub fn read_trace_set(path: &Path) -> Result<TraceSet, TraceIoError> {
    let bytes = std::fs::read(path).map_err(|e| TraceIoError::io(path, e))?;
    TraceSet::from_bytes(&bytes)
}

/// Ground truth for one trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRecord {
    pub key_index: u32,
    pub role: Role,
    pub coefficient_index: u32,
    pub value: i32,
    /// One flag per leak site, in site order (see module docs).
    pub sites: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    pub outer_count: usize,
    pub inner_count: usize,
    pub records: Vec<LabelRecord>,
}

impl LabelSet {
    pub fn new(outer_count: usize, inner_count: usize) -> Self {
        Self { outer_count, inner_count, records: Vec::new() }
    }

    pub fn sites_per_record(&self) -> usize {
        self.outer_count * (self.inner_count + 1)
    }

    fn bitmap_len(&self) -> usize {
        self.sites_per_record().div_ceil(8)
    }

    fn record_len(&self) -> usize {
        16 + self.bitmap_len()
    }

    /// Site index of inner mask `k` (1-based) in outer iteration `outer`.
    pub fn inner_site(&self, outer: usize, k: usize) -> usize {
        outer * (self.inner_count + 1) + (k - 1)
    }

    pub fn neg_site(&self, outer: usize) -> usize {
        outer * (self.inner_count + 1) + self.inner_count
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<(), TraceIoError> {
        let sites = self.sites_per_record();
        for (i, r) in self.records.iter().enumerate() {
            if r.sites.len() != sites {
                return Err(TraceIoError::InvalidLabel {
                    record: i,
                    message: format!("{} site bits, layout needs {sites}", r.sites.len()),
                });
            }
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        self.validate().map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e.to_string()))?;
        out.write_all(LABEL_MAGIC)?;
        for v in [FORMAT_VERSION as usize, self.records.len(), self.outer_count, self.inner_count] {
            let v = u32::try_from(v).map_err(|_| std::io::Error::other("count exceeds u32"))?;
            out.write_all(&v.to_le_bytes())?;
        }
        let mut bitmap = vec![0u8; self.bitmap_len()];
        for r in &self.records {
            out.write_all(&r.key_index.to_le_bytes())?;
            out.write_all(&r.role.index().to_le_bytes())?;
            out.write_all(&r.coefficient_index.to_le_bytes())?;
            out.write_all(&r.value.to_le_bytes())?;
            bitmap.fill(0);
            for (s, _) in r.sites.iter().enumerate().filter(|(_, &b)| b) {
                bitmap[s / 8] |= 1 << (s % 8);
            }
            out.write_all(&bitmap)?;
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TraceIoError> {
        let header = take(bytes, 0, LABEL_HEADER_LEN)?;
        if &header[..8] != LABEL_MAGIC {
            return Err(TraceIoError::BadMagic { expected: "SSNLABEL" });
        }
        let version = le_u32(header, 8);
        if version != FORMAT_VERSION {
            return Err(TraceIoError::UnsupportedVersion(version));
        }
        let n_records = le_u32(header, 12) as usize;
        let mut set = LabelSet::new(le_u32(header, 16) as usize, le_u32(header, 20) as usize);
        let record_len = set.record_len();
        let body_len = n_records
            .checked_mul(record_len)
            .ok_or_else(|| TraceIoError::Dimension("label payload overflows".into()))?;
        let body = take(bytes, LABEL_HEADER_LEN, body_len)?;
        let extra = bytes.len() - LABEL_HEADER_LEN - body_len;
        if extra != 0 {
            return Err(TraceIoError::TrailingData(extra));
        }
        let sites = set.sites_per_record();
        set.records.reserve(n_records);
        for (i, rec) in body.chunks_exact(record_len.max(1)).take(n_records).enumerate() {
            let role = Role::from_index(le_u32(rec, 4)).ok_or_else(|| TraceIoError::InvalidLabel {
                record: i,
                message: format!("unknown role {}", le_u32(rec, 4)),
            })?;
            let bitmap = &rec[16..];
            set.records.push(LabelRecord {
                key_index: le_u32(rec, 0),
                role,
                coefficient_index: le_u32(rec, 8),
                value: le_u32(rec, 12) as i32,
                sites: (0..sites).map(|s| bitmap[s / 8] >> (s % 8) & 1 == 1).collect(),
            });
        }
        Ok(set)
    }
}

pub fn write_label_set(set: &LabelSet, path: &Path) -> Result<(), TraceIoError> {
    set.validate()?;
    write_atomically(path, |w| set.write_to(w))
}

pub fn read_label_set(path: &Path) -> Result<LabelSet, TraceIoError> {
    let bytes = std::fs::read(path).map_err(|e| TraceIoError::io(path, e))?;
    LabelSet::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_set() -> TraceSet {
        let samples = (0..12).map(|i| i as f32 * 0.25 - 1.0).collect();
        let mut meta = BTreeMap::new();
        meta.insert("logn".to_string(), "9".to_string());
        meta.insert("note".to_string(), "a = b".to_string());
        TraceSet::new(3, 4, samples).unwrap().with_metadata(meta)
    }

    fn encode(set: &TraceSet) -> Vec<u8> {
        let mut buf = Vec::new();
        set.write_to(&mut buf).unwrap();
        buf
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.trc");
        let set = sample_set();
        write_trace_set(&set, &path).unwrap();
        assert_eq!(read_trace_set(&path).unwrap(), set);
        let first = std::fs::read(&path).unwrap();
        write_trace_set(&set, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&sample_set());
        assert_eq!(&bytes[..8], b"SSNTRACE");
        assert_eq!(le_u32(&bytes, 8), 1);
        assert_eq!(le_u32(&bytes, 12), 3);
        assert_eq!(le_u32(&bytes, 16), 4);
        let meta_len = le_u32(&bytes, 20) as usize;
        assert_eq!(&bytes[24..24 + meta_len], b"logn=9\nnote=a = b\n");
        assert_eq!(bytes.len(), 24 + meta_len + 12 * 4);
    }

    #[test]
    fn empty_set_is_valid() {
        let set = TraceSet::new(0, 64, vec![]).unwrap();
        let bytes = encode(&set);
        assert_eq!(bytes.len(), 24);
        let back = TraceSet::from_bytes(&bytes).unwrap();
        assert_eq!(back.n_traces(), 0);
        assert_eq!(back.n_samples(), 64);
    }

    #[test]
    fn payload_size_is_exact() {
        let set = TraceSet::new(1024, 64, vec![0.5; 1024 * 64]).unwrap();
        assert_eq!(encode(&set).len() - 24, 1024 * 64 * 4);
    }

    #[test]
    fn rejects_corruption() {
        let good = encode(&sample_set());
        for i in 0..8 {
            for delta in 1..=255u8 {
                let mut bad = good.clone();
                bad[i] = bad[i].wrapping_add(delta);
                assert!(matches!(TraceSet::from_bytes(&bad), Err(TraceIoError::BadMagic { .. })));
            }
        }
        let mut bad = good.clone();
        bad[8] = 2;
        assert!(matches!(TraceSet::from_bytes(&bad), Err(TraceIoError::UnsupportedVersion(2))));
        assert!(matches!(TraceSet::from_bytes(&good[..good.len() - 1]), Err(TraceIoError::TruncatedFile { .. })));
        assert!(matches!(TraceSet::from_bytes(&good[..10]), Err(TraceIoError::TruncatedFile { .. })));
        let mut bad = good.clone();
        let at = bad.len() - 8;
        bad[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(TraceSet::from_bytes(&bad), Err(TraceIoError::NonFiniteSample { trace: 2, sample: 2 })));
        let mut bad = good;
        bad.push(0);
        assert!(matches!(TraceSet::from_bytes(&bad), Err(TraceIoError::TrailingData(1))));
    }

    #[test]
    fn constructor_checks() {
        assert!(matches!(TraceSet::new(2, 3, vec![0.0; 5]), Err(TraceIoError::Dimension(_))));
        assert!(matches!(
            TraceSet::new(1, 2, vec![0.0, f32::INFINITY]),
            Err(TraceIoError::NonFiniteSample { trace: 0, sample: 1 })
        ));
        let mut set = sample_set();
        set.metadata.insert("bad=key".into(), "v".into());
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(write_trace_set(&set, &dir.path().join("x")), Err(TraceIoError::InvalidMetadata(_))));
    }

    #[test]
    fn label_round_trip_and_layout() {
        let mut labels = LabelSet::new(2, 3);
        labels.records.push(LabelRecord {
            key_index: 0,
            role: Role::G,
            coefficient_index: 7,
            value: -2,
            sites: vec![false, true, false, true, false, false, false, false],
        });
        let mut buf = Vec::new();
        labels.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"SSNLABEL");
        assert_eq!(buf.len(), 24 + 16 + 1);
        assert_eq!(buf[24 + 16], 0b0000_1010);
        assert_eq!(LabelSet::from_bytes(&buf).unwrap(), labels);
        assert_eq!(labels.inner_site(1, 1), 4);
        assert_eq!(labels.neg_site(0), 3);

        let mut bad = buf.clone();
        bad[0] ^= 1;
        assert!(matches!(LabelSet::from_bytes(&bad), Err(TraceIoError::BadMagic { .. })));
        assert!(matches!(LabelSet::from_bytes(&buf[..buf.len() - 1]), Err(TraceIoError::TruncatedFile { .. })));
        labels.records[0].sites.pop();
        assert!(labels.validate().is_err());
    }

    fn matrix() -> impl Strategy<Value = (usize, usize, Vec<f32>)> {
        (0usize..=256, 0usize..=4096).prop_flat_map(|(r, c)| {
            // keep the total bounded so each case stays fast
            let c = if r * c > 65_536 { 65_536 / r.max(1) } else { c };
            (Just(r), Just(c), proptest::collection::vec(-1e3f32..1e3, r * c))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn round_trip_is_identity((r, c, data) in matrix()) {
            let set = TraceSet::new(r, c, data).unwrap();
            let back = TraceSet::from_bytes(&encode(&set)).unwrap();
            prop_assert_eq!(back, set);
        }
    }
}
