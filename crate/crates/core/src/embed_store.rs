//! Embedding stores: ingestion, validation, normalization and the `FDCA` binary format.
//!
//! A store is immutable once built. Records are kept sorted by id and every embedding is
//! L2-normalized on the way in, so cosine similarity downstream is a plain dot product.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! magic "FDCA" | version u32 = 1 | dim u32 | count u64
//! count x ( id u64 | domain_len u16 | domain bytes | dim x f32 )
//! ```
//!
//! The binary format does not carry the optional `text` payload.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"FDCA";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;

/// Tolerance under which an incoming vector is considered already unit-norm and kept
/// bit-for-bit. Keeps binary round trips exact.
const UNIT_NORM_SLACK: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("line {line}: embedding has dimension {found}, expected {expected}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("duplicate record id {0}")]
    DuplicateId(u64),
    #[error("{location}: embedding has zero norm")]
    ZeroNorm { location: String },
    #[error("bad magic {0:?}, expected \"FDCA\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload: {0}")]
    Truncated(String),
    #[error("invalid store: {0}")]
    Invalid(String),
    #[error("unknown record id {0}")]
    UnknownId(u64),
}

/// One embedded instruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub id: u64,
    pub domain: String,
    pub embedding: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

/// Immutable, id-sorted collection of records sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    records: Vec<InstructionRecord>,
    domain_index: BTreeMap<String, Vec<u64>>,
}

fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

/// Normalize in place. Returns `false` for zero or non-finite vectors.
pub fn normalize(v: &mut [f32]) -> bool {
    let norm = l2_norm(v);
    if !norm.is_finite() || norm == 0.0 {
        return false;
    }
    if (norm - 1.0).abs() > UNIT_NORM_SLACK {
        for x in v.iter_mut() {
            *x = (f64::from(*x) / norm) as f32;
        }
    }
    true
}

impl EmbeddingStore {
    /// Build a store from records, normalizing embeddings and sorting by id.
    pub fn from_records(
        dim: usize,
        records: impl IntoIterator<Item = InstructionRecord>,
    ) -> Result<Self, StoreError> {
        if dim == 0 {
            return Err(StoreError::Invalid("dimension must be at least 1".into()));
        }
        let mut out = Vec::new();
        for (pos, mut rec) in records.into_iter().enumerate() {
            if rec.embedding.len() != dim {
                return Err(StoreError::DimensionMismatch {
                    line: pos + 1,
                    expected: dim,
                    found: rec.embedding.len(),
                });
            }
            if !normalize(&mut rec.embedding) {
                return Err(StoreError::ZeroNorm {
                    location: format!("record {} (id {})", pos + 1, rec.id),
                });
            }
            out.push(rec);
        }
        Self::from_normalized(dim, out)
    }

    fn from_normalized(dim: usize, mut records: Vec<InstructionRecord>) -> Result<Self, StoreError> {
        records.sort_by_key(|r| r.id);
        if let Some(w) = records.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(StoreError::DuplicateId(w[0].id));
        }
        let mut domain_index: BTreeMap<String, Vec<u64>> = BTreeMap::new();
        for r in &records {
            domain_index.entry(r.domain.clone()).or_default().push(r.id);
        }
        Ok(Self {
            dim,
            records,
            domain_index,
        })
    }

    /// An empty store of the given dimension.
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            records: Vec::new(),
            domain_index: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[InstructionRecord] {
        &self.records
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.records.iter().map(|r| r.id)
    }

    /// Embeddings in record (id) order.
    pub fn vectors(&self) -> Vec<&[f32]> {
        self.records.iter().map(|r| r.embedding.as_slice()).collect()
    }

    pub fn get(&self, id: u64) -> Option<&InstructionRecord> {
        self.records
            .binary_search_by_key(&id, |r| r.id)
            .ok()
            .map(|i| &self.records[i])
    }

    /// Domain labels present, sorted.
    pub fn domains(&self) -> impl Iterator<Item = &str> {
        self.domain_index.keys().map(String::as_str)
    }

    pub fn domain_ids(&self, domain: &str) -> &[u64] {
        self.domain_index
            .get(domain)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Records whose domain equals `domain`; empty if none.
    pub fn subset_by_domain(&self, domain: &str) -> EmbeddingStore {
        let records: Vec<_> = self
            .records
            .iter()
            .filter(|r| r.domain == domain)
            .cloned()
            .collect();
        let mut domain_index = BTreeMap::new();
        if !records.is_empty() {
            domain_index.insert(domain.to_string(), records.iter().map(|r| r.id).collect());
        }
        EmbeddingStore {
            dim: self.dim,
            records,
            domain_index,
        }
    }

    /// Records with the given ids, in id order. Unknown ids are an error.
    pub fn subset_by_ids(&self, ids: &[u64]) -> Result<EmbeddingStore, StoreError> {
        let mut records = Vec::with_capacity(ids.len());
        for &id in ids {
            records.push(self.get(id).ok_or(StoreError::UnknownId(id))?.clone());
        }
        Self::from_normalized(self.dim, records)
    }

    /// Union of two stores; records of `self` win on shared ids.
    pub fn merge(&self, other: &EmbeddingStore) -> Result<EmbeddingStore, StoreError> {
        if self.dim != other.dim {
            return Err(StoreError::Invalid(format!(
                "cannot merge stores of dimension {} and {}",
                self.dim, other.dim
            )));
        }
        let mut records = self.records.clone();
        records.extend(
            other
                .records
                .iter()
                .filter(|r| self.get(r.id).is_none())
                .cloned(),
        );
        Self::from_normalized(self.dim, records)
    }

    /// Serialize to the `FDCA` binary layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>, StoreError> {
        let per_vec = self.dim * 4;
        let mut buf = Vec::with_capacity(HEADER_LEN + self.records.len() * (10 + per_vec + 8));
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let dim = u32::try_from(self.dim)
            .map_err(|_| StoreError::Invalid(format!("dimension {} exceeds u32", self.dim)))?;
        buf.extend_from_slice(&dim.to_le_bytes());
        buf.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            buf.extend_from_slice(&r.id.to_le_bytes());
            let domain = r.domain.as_bytes();
            let len = u16::try_from(domain.len()).map_err(|_| {
                StoreError::Invalid(format!("domain label of record {} exceeds 65535 bytes", r.id))
            })?;
            buf.extend_from_slice(&len.to_le_bytes());
            buf.extend_from_slice(domain);
            for x in &r.embedding {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(buf)
    }

    /// Parse the `FDCA` binary layout. Same validation as JSONL ingestion.
    pub fn from_bytes(bytes: &[u8]) -> Result<EmbeddingStore, StoreError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic: [u8; 4] = cur.take(4, "magic")?.try_into().unwrap();
        if &magic != MAGIC {
            return Err(StoreError::BadMagic(magic));
        }
        let version = cur.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(StoreError::UnsupportedVersion(version));
        }
        let dim = cur.u32("dim")? as usize;
        let count = cur.u64("count")?;
        if dim == 0 {
            return Err(StoreError::Invalid("dimension must be at least 1".into()));
        }
        let min_record = 8 + 2 + dim * 4;
        if (count as u128) * (min_record as u128) > (bytes.len() - cur.pos) as u128 {
            return Err(StoreError::Truncated(format!(
                "header declares {count} records but only {} payload bytes follow",
                bytes.len() - cur.pos
            )));
        }
        let mut records = Vec::with_capacity(count as usize);
        for i in 0..count {
            let what = format!("record {i}");
            let id = cur.u64(&what)?;
            let len = cur.u16(&what)? as usize;
            let domain = std::str::from_utf8(cur.take(len, &what)?)
                .map_err(|e| StoreError::Invalid(format!("record {i}: domain is not utf-8: {e}")))?
                .to_string();
            let raw = cur.take(dim * 4, &what)?;
            let mut embedding: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if !normalize(&mut embedding) {
                return Err(StoreError::ZeroNorm {
                    location: format!("record {i} (id {id})"),
                });
            }
            records.push(InstructionRecord {
                id,
                domain,
                embedding,
                text: None,
            });
        }
        if cur.pos != bytes.len() {
            return Err(StoreError::Invalid(format!(
                "{} trailing bytes after last record",
                bytes.len() - cur.pos
            )));
        }
        Self::from_normalized(dim, records)
    }

    /// Write JSONL, one record per line.
    pub fn write_jsonl(&self, path: &Path) -> Result<(), StoreError> {
        let io = io_err(path);
        let mut w = BufWriter::new(File::create(path).map_err(&io)?);
        for r in &self.records {
            serde_json::to_writer(&mut w, r).map_err(|e| io(e.into()))?;
            w.write_all(b"\n").map_err(&io)?;
        }
        w.flush().map_err(&io)
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], StoreError> {
        if self.bytes.len() - self.pos < n {
            return Err(StoreError::Truncated(format!(
                "{what}: need {n} bytes at offset {}, {} available",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self, what: &str) -> Result<u16, StoreError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<u32, StoreError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64, StoreError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Read a JSONL file of records with embeddings of length `dim`.
///
/// Blank lines are skipped. Errors name the 1-based line.
pub fn ingest_jsonl(path: &Path, dim: usize) -> Result<EmbeddingStore, StoreError> {
    let io = io_err(path);
    let file = File::open(path).map_err(&io)?;
    read_jsonl(BufReader::new(file), dim).map_err(|e| match e {
        StoreError::Io { source, .. } => io(source),
        other => other,
    })
}

/// JSONL ingestion from any reader.
pub fn read_jsonl(reader: impl BufRead, dim: usize) -> Result<EmbeddingStore, StoreError> {
    if dim == 0 {
        return Err(StoreError::Invalid("dimension must be at least 1".into()));
    }
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| StoreError::Io {
            path: "<reader>".into(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: InstructionRecord =
            serde_json::from_str(&line).map_err(|e| StoreError::MalformedLine {
                line: line_no,
                message: e.to_string(),
            })?;
        if rec.embedding.len() != dim {
            return Err(StoreError::DimensionMismatch {
                line: line_no,
                expected: dim,
                found: rec.embedding.len(),
            });
        }
        if !normalize(&mut rec.embedding) {
            return Err(StoreError::ZeroNorm {
                location: format!("line {line_no}"),
            });
        }
        records.push(rec);
    }
    EmbeddingStore::from_normalized(dim, records)
}

/// Read an `FDCA` binary file.
pub fn ingest_binary(path: &Path) -> Result<EmbeddingStore, StoreError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    EmbeddingStore::from_bytes(&bytes)
}

/// Write an `FDCA` binary file.
pub fn write_binary(store: &EmbeddingStore, path: &Path) -> Result<(), StoreError> {
    std::fs::write(path, store.to_bytes()?).map_err(io_err(path))
}
