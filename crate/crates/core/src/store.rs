//! Embedding sequences, their binary container format, and pair manifests.
//!
//! Layout of a store file (all integers little-endian):
//!
//! ```text
//! "CESF" | u8 version=1 | u8 dtype=0 (f32) | u16 reserved=0 | u32 D | u64 record_count
//! per record: u32 id_len | id (UTF-8) | u8 modality (0=text, 1=audio) | u32 T | T*D f32, timestep-major
//! ```
//!
//! Values are held in memory as `f64`; they are narrowed to `f32` on write.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CESF";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;
/// Size of the fixed file header in bytes.
pub const HEADER_LEN: usize = 4 + 1 + 1 + 2 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Audio,
}

impl Modality {
    fn to_byte(self) -> u8 {
        match self {
            Modality::Text => 0,
            Modality::Audio => 1,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Modality::Text),
            1 => Some(Modality::Audio),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Audio => "audio",
        }
    }
}

/// One item of one modality: a `T x D` sequence, `T = 1` for text.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    id: String,
    modality: Modality,
    steps: usize,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingRecord {
    pub fn new(
        id: impl Into<String>,
        modality: Modality,
        steps: usize,
        dim: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        let id = id.into();
        if steps == 0 {
            return Err(Error::Data(format!("record `{id}` has no timesteps")));
        }
        if dim == 0 {
            return Err(Error::Data(format!("record `{id}` has zero dimension")));
        }
        if modality == Modality::Text && steps != 1 {
            return Err(Error::Data(format!(
                "text record `{id}` must be a single vector, got T={steps}"
            )));
        }
        if data.len() != steps * dim {
            return Err(Error::Data(format!(
                "record `{id}` holds {} values, expected {}",
                data.len(),
                steps * dim
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Data(format!(
                "record `{id}` has non-finite value at offset {pos}"
            )));
        }
        Ok(Self {
            id,
            modality,
            steps,
            dim,
            data,
        })
    }

    pub fn text(id: impl Into<String>, vector: Vec<f64>) -> Result<Self> {
        let dim = vector.len();
        Self::new(id, Modality::Text, 1, dim, vector)
    }

    pub fn audio(id: impl Into<String>, steps: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(id, Modality::Audio, steps, dim, data)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Row-major (timestep-major) values.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Same record with every value rounded through `f32`.
    pub fn quantized(&self) -> Self {
        Self {
            data: self.data.iter().map(|&x| x as f32 as f64).collect(),
            ..self.clone()
        }
    }
}

/// Validated, immutable collection of records sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    records: Vec<EmbeddingRecord>,
    index: HashMap<String, usize>,
}

impl EmbeddingStore {
    pub fn from_records(records: Vec<EmbeddingRecord>) -> Result<Self> {
        let dim = match records.first() {
            Some(r) => r.dim,
            None => return Err(Error::Data("store must contain at least one record".into())),
        };
        let mut index = HashMap::with_capacity(records.len());
        for (pos, rec) in records.iter().enumerate() {
            if rec.dim != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: rec.dim,
                });
            }
            if index.insert(rec.id.clone(), pos).is_some() {
                return Err(Error::DuplicateId(rec.id.clone()));
            }
        }
        Ok(Self {
            dim,
            records,
            index,
        })
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

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingRecord> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }
}

/// Serialize records into the binary store layout.
pub fn encode_store(records: &[EmbeddingRecord]) -> Result<Vec<u8>> {
    let first = records
        .first()
        .ok_or_else(|| Error::Data("cannot write an empty store".into()))?;
    let dim = first.dim;
    let mut seen = HashSet::with_capacity(records.len());
    let mut payload = 0usize;
    for rec in records {
        if rec.dim != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: rec.dim,
            });
        }
        if !seen.insert(rec.id.as_str()) {
            return Err(Error::DuplicateId(rec.id.clone()));
        }
        payload += 4 + rec.id.len() + 1 + 4 + 4 * rec.data.len();
    }
    let dim32 = u32::try_from(dim).map_err(|_| Error::Format("dimension exceeds u32".into()))?;

    let mut buf = Vec::with_capacity(HEADER_LEN + payload);
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.push(DTYPE_F32);
    buf.extend_from_slice(&0u16.to_le_bytes());
    buf.extend_from_slice(&dim32.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for rec in records {
        let id_len = u32::try_from(rec.id.len())
            .map_err(|_| Error::Format(format!("id of `{}` too long", rec.id)))?;
        let steps = u32::try_from(rec.steps)
            .map_err(|_| Error::Format(format!("record `{}` too long", rec.id)))?;
        buf.extend_from_slice(&id_len.to_le_bytes());
        buf.extend_from_slice(rec.id.as_bytes());
        buf.push(rec.modality.to_byte());
        buf.extend_from_slice(&steps.to_le_bytes());
        for &x in &rec.data {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

/// Write records to `path`, returning the number of bytes written.
pub fn write_store(records: &[EmbeddingRecord], path: impl AsRef<Path>) -> Result<usize> {
    let bytes = encode_store(records)?;
    fs::write(path, &bytes)?;
    Ok(bytes.len())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.buf.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "truncated file while reading {what} at byte {}",
                    self.pos
                ))
            })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Metadata available from the fixed header alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreHeader {
    pub version: u8,
    pub dtype: u8,
    pub dim: usize,
    pub record_count: u64,
}

fn decode_header(cur: &mut Cursor<'_>) -> Result<StoreHeader> {
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"CESF\"",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = cur.u8("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dtype = cur.u8("dtype")?;
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype {dtype}")));
    }
    if cur.u16("reserved")? != 0 {
        return Err(Error::Format("reserved header field must be zero".into()));
    }
    let dim = cur.u32("dimension")? as usize;
    if dim == 0 {
        return Err(Error::Format("dimension must be positive".into()));
    }
    let record_count = cur.u64("record count")?;
    Ok(StoreHeader {
        version,
        dtype,
        dim,
        record_count,
    })
}

/// Parse and validate a store from raw bytes.
pub fn decode_store(bytes: &[u8]) -> Result<EmbeddingStore> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let header = decode_header(&mut cur)?;
    let dim = header.dim;
    let mut records = Vec::new();
    for n in 0..header.record_count {
        let id_len = cur.u32("id length")? as usize;
        let id = std::str::from_utf8(cur.take(id_len, "id")?)
            .map_err(|_| Error::Format(format!("record {n} id is not valid UTF-8")))?
            .to_owned();
        let modality_byte = cur.u8("modality")?;
        let modality = Modality::from_byte(modality_byte).ok_or_else(|| {
            Error::Format(format!(
                "record `{id}` has unknown modality {modality_byte}"
            ))
        })?;
        let steps = cur.u32("timestep count")? as usize;
        let count = steps
            .checked_mul(dim)
            .ok_or_else(|| Error::Format(format!("record `{id}` size overflows")))?;
        if count.saturating_mul(4) > cur.remaining() {
            return Err(Error::Format(format!(
                "truncated file: record `{id}` declares {count} values"
            )));
        }
        let raw = cur.take(4 * count, "values")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        records.push(EmbeddingRecord::new(id, modality, steps, dim, data)?);
    }
    if cur.remaining() != 0 {
        return Err(Error::Format(format!(
            "{} trailing bytes after {} records",
            cur.remaining(),
            header.record_count
        )));
    }
    if records.is_empty() {
        return Err(Error::Format("store declares zero records".into()));
    }
    EmbeddingStore::from_records(records)
}

pub fn read_store(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    decode_store(&fs::read(path)?)
}

pub fn read_header(path: impl AsRef<Path>) -> Result<StoreHeader> {
    let bytes = fs::read(path)?;
    decode_header(&mut Cursor {
        buf: &bytes,
        pos: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    pub text_id: String,
    pub audio_id: String,
    pub split: Split,
}

/// Audio/text pairings, one JSON object per line on disk.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairManifest {
    entries: Vec<PairEntry>,
}

impl PairManifest {
    pub fn new(entries: Vec<PairEntry>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            if !seen.insert((e.text_id.as_str(), e.audio_id.as_str())) {
                return Err(Error::Data(format!(
                    "duplicate pair ({}, {})",
                    e.text_id, e.audio_id
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[PairEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }
}

pub fn parse_manifest(reader: impl BufRead) -> Result<PairManifest> {
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: PairEntry = serde_json::from_str(&line).map_err(|e| Error::FormatAt {
            line: n + 1,
            message: e.to_string(),
        })?;
        if !seen.insert((entry.text_id.clone(), entry.audio_id.clone())) {
            return Err(Error::FormatAt {
                line: n + 1,
                message: format!("duplicate pair ({}, {})", entry.text_id, entry.audio_id),
            });
        }
        entries.push(entry);
    }
    Ok(PairManifest { entries })
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<PairManifest> {
    parse_manifest(BufReader::new(fs::File::open(path)?))
}

/// Look up every manifest entry of `split`, in manifest order.
pub fn resolve_pairs<'s>(
    manifest: &PairManifest,
    text_store: &'s EmbeddingStore,
    audio_store: &'s EmbeddingStore,
    split: Split,
) -> Result<Vec<(&'s EmbeddingRecord, &'s EmbeddingRecord)>> {
    manifest
        .entries
        .iter()
        .filter(|e| e.split == split)
        .map(|e| {
            let text = text_store
                .get(&e.text_id)
                .ok_or_else(|| Error::MissingRecord(e.text_id.clone()))?;
            let audio = audio_store
                .get(&e.audio_id)
                .ok_or_else(|| Error::MissingRecord(e.audio_id.clone()))?;
            if text.modality != Modality::Text {
                return Err(Error::ModalityMismatch {
                    id: text.id.clone(),
                    expected: "text",
                });
            }
            if audio.modality != Modality::Audio {
                return Err(Error::ModalityMismatch {
                    id: audio.id.clone(),
                    expected: "audio",
                });
            }
            Ok((text, audio))
        })
        .collect()
}
