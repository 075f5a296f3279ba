//! Embedding matrix I/O, metadata records, deduplication and row normalization.
//!
//! The on-disk embedding format is little-endian: the magic bytes `SKMB`, a
//! `u32` version (currently 1), a `u64` row count, a `u32` dimension, then
//! `n * d` `f32` values in row-major order. Metadata is JSON Lines with one
//! record per embedding row.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const EMBEDDING_MAGIC: [u8; 4] = *b"SKMB";
pub const EMBEDDING_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 4;

/// Tolerance on the Euclidean norm of normalized rows.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes {found:?}, expected \"SKMB\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported embedding file version {found} (expected {EMBEDDING_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("header shorter than {HEADER_LEN} bytes")]
    TruncatedHeader,
    #[error("truncated payload: header declares {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },
    #[error("{extra} trailing bytes after the declared payload")]
    TrailingBytes { extra: u64 },
    #[error("invalid shape n={n}, d={d}: both must be at least 1")]
    InvalidShape { n: u64, d: u32 },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("row {row} has zero norm and cannot be normalized")]
    ZeroNorm { row: usize },
    #[error("metadata line {line}: {message}")]
    MetadataParse { line: usize, message: String },
    #[error("invalid record {id:?}: {message}")]
    InvalidRecord { id: String, message: String },
    #[error("{records} metadata records but {rows} embedding rows")]
    CountMismatch { records: usize, rows: usize },
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("rows are not unit-normalized (row {row} has norm {norm})")]
    NotNormalized { row: usize, norm: f64 },
}

/// Dense row-major `n x d` matrix of `f32` embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    n: usize,
    d: usize,
    values: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(n: usize, d: usize, values: Vec<f32>) -> Result<Self, CorpusError> {
        if d == 0 {
            return Err(CorpusError::InvalidShape { n: n as u64, d: 0 });
        }
        if values.len() != n * d {
            return Err(CorpusError::TruncatedPayload {
                expected: (n * d * 4) as u64,
                found: (values.len() * 4) as u64,
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(CorpusError::NonFinite { row: pos / d, col: pos % d });
        }
        Ok(Self { n, d, values })
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self, CorpusError> {
        let d = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut values = Vec::with_capacity(rows.len() * d);
        for r in rows {
            let r = r.as_ref();
            if r.len() != d {
                return Err(CorpusError::InvalidShape { n: rows.len() as u64, d: r.len() as u32 });
            }
            values.extend_from_slice(r);
        }
        Self::new(rows.len(), d, values)
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.values.chunks_exact(self.d)
    }

    /// Matrix made of the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> EmbeddingMatrix {
        let mut values = Vec::with_capacity(rows.len() * self.d);
        for &r in rows {
            values.extend_from_slice(self.row(r));
        }
        EmbeddingMatrix { n: rows.len(), d: self.d, values }
    }

    /// Widened copy as an `n x d` nalgebra matrix.
    pub fn to_dmatrix(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(self.n, self.d, |i, j| self.values[i * self.d + j] as f64)
    }

    pub fn row_norm(&self, i: usize) -> f64 {
        self.row(i).iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }
}

pub fn read_embeddings<R: Read>(mut reader: R) -> Result<EmbeddingMatrix, CorpusError> {
    let mut header = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        let got = reader.read(&mut header[filled..])?;
        if got == 0 {
            break;
        }
        filled += got;
    }
    if filled >= 4 && header[..4] != EMBEDDING_MAGIC {
        return Err(CorpusError::BadMagic { found: header[..4].try_into().unwrap() });
    }
    if filled < HEADER_LEN {
        return Err(CorpusError::TruncatedHeader);
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != EMBEDDING_VERSION {
        return Err(CorpusError::VersionMismatch { found: version });
    }
    let n = u64::from_le_bytes(header[8..16].try_into().unwrap());
    let d = u32::from_le_bytes(header[16..20].try_into().unwrap());
    if n == 0 || d == 0 {
        return Err(CorpusError::InvalidShape { n, d });
    }
    let expected = n.checked_mul(d as u64).and_then(|c| c.checked_mul(4)).ok_or(CorpusError::InvalidShape { n, d })?;

    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    let found = payload.len() as u64;
    if found < expected {
        return Err(CorpusError::TruncatedPayload { expected, found });
    }
    if found > expected {
        return Err(CorpusError::TrailingBytes { extra: found - expected });
    }
    let values: Vec<f32> = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    EmbeddingMatrix::new(n as usize, d as usize, values)
}

pub fn write_embeddings<W: Write>(m: &EmbeddingMatrix, mut writer: W) -> io::Result<()> {
    writer.write_all(&EMBEDDING_MAGIC)?;
    writer.write_all(&EMBEDDING_VERSION.to_le_bytes())?;
    writer.write_all(&(m.n as u64).to_le_bytes())?;
    writer.write_all(&(m.d as u32).to_le_bytes())?;
    for v in &m.values {
        writer.write_all(&v.to_le_bytes())?;
    }
    writer.flush()
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix, CorpusError> {
    read_embeddings(BufReader::new(File::open(path)?))
}

pub fn save_embeddings(m: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    write_embeddings(m, BufWriter::new(File::create(path)?))?;
    Ok(())
}

/// One metadata row. Absent fields stay `None`; nothing is encoded as a sentinel.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetadataRecord {
    pub id: String,
    #[serde(default)]
    pub dataset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub year: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub icd: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fst: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body_region: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality: Option<String>,
}

impl MetadataRecord {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |message: &str| CorpusError::InvalidRecord { id: self.id.clone(), message: message.to_string() };
        if self.id.is_empty() {
            return Err(bad("empty id"));
        }
        if let Some(f) = self.fst {
            if !(1..=6).contains(&f) {
                return Err(bad("fst must be in 1..=6"));
            }
        }
        if let Some(a) = self.age {
            if !a.is_finite() || a < 0.0 {
                return Err(bad("age must be a non-negative finite number"));
            }
        }
        if let Some(y) = self.year {
            if !(1000..=9999).contains(&y) {
                return Err(bad("year must be a 4-digit calendar year"));
            }
        }
        Ok(())
    }

    /// String rendering of a field value, `None` when absent.
    pub fn value(&self, field: Field) -> Option<String> {
        match field {
            Field::Id => Some(self.id.clone()),
            Field::Dataset => Some(self.dataset.clone()),
            Field::Year => self.year.map(|y| y.to_string()),
            Field::Label => self.label.clone(),
            Field::Icd => self.icd.clone(),
            Field::Fst => self.fst.map(|f| f.to_string()),
            Field::Age => self.age.map(|a| a.to_string()),
            Field::Gender => self.gender.clone(),
            Field::Origin => self.origin.clone(),
            Field::BodyRegion => self.body_region.clone(),
            Field::Modality => self.modality.clone(),
            Field::FstGroup => self.fst.map(|f| fst_group(f).to_string()),
            Field::AgeBin => self.age.map(|a| age_bin(a).to_string()),
        }
    }

    pub fn has(&self, field: Field) -> bool {
        match field {
            Field::Id | Field::Dataset => true,
            Field::Year => self.year.is_some(),
            Field::Label => self.label.is_some(),
            Field::Icd => self.icd.is_some(),
            Field::Fst | Field::FstGroup => self.fst.is_some(),
            Field::Age | Field::AgeBin => self.age.is_some(),
            Field::Gender => self.gender.is_some(),
            Field::Origin => self.origin.is_some(),
            Field::BodyRegion => self.body_region.is_some(),
            Field::Modality => self.modality.is_some(),
        }
    }
}

/// Skin-type groups used for coarse reporting.
pub fn fst_group(fst: u8) -> &'static str {
    match fst {
        1 | 2 => "I-II",
        3 | 4 => "III-IV",
        _ => "V-VI",
    }
}

pub const AGE_BINS: [&str; 5] = ["0-17", "18-29", "30-49", "50-69", "70+"];

pub fn age_bin(age: f64) -> &'static str {
    if age < 18.0 {
        AGE_BINS[0]
    } else if age < 30.0 {
        AGE_BINS[1]
    } else if age < 50.0 {
        AGE_BINS[2]
    } else if age < 70.0 {
        AGE_BINS[3]
    } else {
        AGE_BINS[4]
    }
}

/// Addressable metadata fields, including the derived `fst_group` and `age_bin`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Id,
    Dataset,
    Year,
    Label,
    Icd,
    Fst,
    Age,
    Gender,
    Origin,
    BodyRegion,
    Modality,
    FstGroup,
    AgeBin,
}

impl Field {
    pub const ALL: [Field; 13] = [
        Field::Id,
        Field::Dataset,
        Field::Year,
        Field::Label,
        Field::Icd,
        Field::Fst,
        Field::Age,
        Field::Gender,
        Field::Origin,
        Field::BodyRegion,
        Field::Modality,
        Field::FstGroup,
        Field::AgeBin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Field::Id => "id",
            Field::Dataset => "dataset",
            Field::Year => "year",
            Field::Label => "label",
            Field::Icd => "icd",
            Field::Fst => "fst",
            Field::Age => "age",
            Field::Gender => "gender",
            Field::Origin => "origin",
            Field::BodyRegion => "body_region",
            Field::Modality => "modality",
            Field::FstGroup => "fst_group",
            Field::AgeBin => "age_bin",
        }
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
#[error("unknown field {name:?}; valid fields: {}", valid.join(", "))]
pub struct UnknownField {
    pub name: String,
    pub valid: Vec<&'static str>,
}

impl FromStr for Field {
    type Err = UnknownField;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Field::ALL
            .iter()
            .copied()
            .find(|f| f.name() == s)
            .ok_or_else(|| UnknownField { name: s.to_string(), valid: Field::ALL.iter().map(|f| f.name()).collect() })
    }
}

pub fn read_metadata<R: BufRead>(reader: R) -> Result<Vec<MetadataRecord>, CorpusError> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: MetadataRecord = serde_json::from_str(&line)
            .map_err(|e| CorpusError::MetadataParse { line: i + 1, message: e.to_string() })?;
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}

pub fn load_metadata(path: impl AsRef<Path>) -> Result<Vec<MetadataRecord>, CorpusError> {
    read_metadata(BufReader::new(File::open(path)?))
}

pub fn write_metadata<W: Write>(records: &[MetadataRecord], mut writer: W) -> Result<(), CorpusError> {
    for r in records {
        serde_json::to_writer(&mut writer, r).map_err(io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemovedDuplicate {
    pub id: String,
    /// Input row of the removed duplicate.
    pub index: usize,
    /// Input row of the retained canonical instance.
    pub first_index: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupReport {
    pub kept: usize,
    pub removed: usize,
    pub removed_ids: Vec<RemovedDuplicate>,
}

/// Keeps the first occurrence of every id, dropping later rows in lockstep.
pub fn deduplicate(
    records: Vec<MetadataRecord>,
    embeddings: &EmbeddingMatrix,
) -> Result<(Vec<MetadataRecord>, EmbeddingMatrix, DedupReport), CorpusError> {
    if records.len() != embeddings.rows() {
        return Err(CorpusError::CountMismatch { records: records.len(), rows: embeddings.rows() });
    }
    let mut first_seen: HashMap<String, usize> = HashMap::with_capacity(records.len());
    let mut kept_rows = Vec::with_capacity(records.len());
    let mut kept_records = Vec::with_capacity(records.len());
    let mut report = DedupReport::default();
    for (i, record) in records.into_iter().enumerate() {
        match first_seen.get(&record.id) {
            Some(&first) => report.removed_ids.push(RemovedDuplicate { id: record.id, index: i, first_index: first }),
            None => {
                first_seen.insert(record.id.clone(), i);
                kept_rows.push(i);
                kept_records.push(record);
            }
        }
    }
    report.kept = kept_rows.len();
    report.removed = report.removed_ids.len();
    Ok((kept_records, embeddings.select_rows(&kept_rows), report))
}

/// Scales every row to unit Euclidean norm. Accumulates in `f64`.
pub fn normalize_rows(m: &EmbeddingMatrix) -> Result<EmbeddingMatrix, CorpusError> {
    let mut values = Vec::with_capacity(m.values.len());
    for (i, row) in m.iter_rows().enumerate() {
        let norm = m.row_norm(i);
        if norm == 0.0 {
            return Err(CorpusError::ZeroNorm { row: i });
        }
        values.extend(row.iter().map(|&v| (v as f64 / norm) as f32));
    }
    Ok(EmbeddingMatrix { n: m.n, d: m.d, values })
}

/// Aligned embeddings and metadata with unique ids. Immutable once built.
#[derive(Debug, Clone)]
pub struct Corpus {
    embeddings: EmbeddingMatrix,
    records: Vec<MetadataRecord>,
    normalized: bool,
    index_by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(
        embeddings: EmbeddingMatrix,
        records: Vec<MetadataRecord>,
        normalized: bool,
    ) -> Result<Self, CorpusError> {
        if records.len() != embeddings.rows() {
            return Err(CorpusError::CountMismatch { records: records.len(), rows: embeddings.rows() });
        }
        let mut index_by_id = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            r.validate()?;
            if index_by_id.insert(r.id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateId(r.id.clone()));
            }
        }
        if normalized {
            for i in 0..embeddings.rows() {
                let norm = embeddings.row_norm(i);
                if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                    return Err(CorpusError::NotNormalized { row: i, norm });
                }
            }
        }
        Ok(Self { embeddings, records, normalized, index_by_id })
    }

    /// Deduplicates by id, normalizes rows and builds the corpus.
    pub fn prepare(
        embeddings: &EmbeddingMatrix,
        records: Vec<MetadataRecord>,
    ) -> Result<(Self, DedupReport), CorpusError> {
        let (records, embeddings, report) = deduplicate(records, embeddings)?;
        let embeddings = normalize_rows(&embeddings)?;
        Ok((Self::new(embeddings, records, true)?, report))
    }

    pub fn load(
        embeddings_path: impl AsRef<Path>,
        metadata_path: impl AsRef<Path>,
    ) -> Result<(Self, DedupReport), CorpusError> {
        let embeddings = load_embeddings(embeddings_path)?;
        let records = load_metadata(metadata_path)?;
        Self::prepare(&embeddings, records)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dim()
    }

    pub fn embeddings(&self) -> &EmbeddingMatrix {
        &self.embeddings
    }

    pub fn records(&self) -> &[MetadataRecord] {
        &self.records
    }

    pub fn record(&self, i: usize) -> &MetadataRecord {
        &self.records[i]
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        self.embeddings.row(i)
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index_by_id.get(id).copied()
    }

    /// Dataset name to row indices, datasets in lexicographic order.
    pub fn rows_by_dataset(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut out: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            out.entry(r.dataset.as_str()).or_default().push(i);
        }
        out
    }

    /// Number of records carrying each field.
    pub fn field_coverage(&self) -> BTreeMap<&'static str, usize> {
        Field::ALL.iter().map(|&f| (f.name(), self.records.iter().filter(|r| r.has(f)).count())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str) -> MetadataRecord {
        MetadataRecord { id: id.into(), dataset: "ds".into(), ..Default::default() }
    }

    fn encode(m: &EmbeddingMatrix) -> Vec<u8> {
        let mut buf = Vec::new();
        write_embeddings(m, &mut buf).unwrap();
        buf
    }

    #[test]
    fn reads_identity_payload() {
        let m = EmbeddingMatrix::from_rows(&[[1.0f32, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        let back = read_embeddings(encode(&m).as_slice()).unwrap();
        assert_eq!(back.rows(), 2);
        assert_eq!(back.dim(), 3);
        assert_eq!(back.row(1), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn header_layout_is_fixed() {
        let m = EmbeddingMatrix::from_rows(&[[1.5f32]]).unwrap();
        let bytes = encode(&m);
        assert_eq!(&bytes[..4], b"SKMB");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..16], &1u64.to_le_bytes());
        assert_eq!(&bytes[16..20], &1u32.to_le_bytes());
        assert_eq!(&bytes[20..], &1.5f32.to_le_bytes());
    }

    #[test]
    fn truncated_payload_is_reported() {
        let m = EmbeddingMatrix::from_rows(&[[1.0f32; 3]; 4]).unwrap();
        let mut bytes = encode(&m);
        bytes[8..16].copy_from_slice(&5u64.to_le_bytes());
        match read_embeddings(bytes.as_slice()) {
            Err(CorpusError::TruncatedPayload { expected, found }) => {
                assert_eq!(expected, 60);
                assert_eq!(found, 48);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_headers_have_distinct_errors() {
        let m = EmbeddingMatrix::from_rows(&[[1.0f32; 2]]).unwrap();
        let mut bad_magic = encode(&m);
        bad_magic[0] = b'X';
        assert!(matches!(read_embeddings(bad_magic.as_slice()), Err(CorpusError::BadMagic { .. })));

        let mut bad_version = encode(&m);
        bad_version[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(read_embeddings(bad_version.as_slice()), Err(CorpusError::VersionMismatch { found: 2 })));

        let mut trailing = encode(&m);
        trailing.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(read_embeddings(trailing.as_slice()), Err(CorpusError::TrailingBytes { extra: 4 })));

        let mut nan = encode(&m);
        nan[24..28].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(read_embeddings(nan.as_slice()), Err(CorpusError::NonFinite { row: 0, col: 1 })));

        assert!(matches!(read_embeddings(&b"SKMB\x01"[..]), Err(CorpusError::TruncatedHeader)));
    }

    #[test]
    fn dedup_keeps_first_occurrence() {
        let m = EmbeddingMatrix::from_rows(&[[1.0f32], [2.0], [3.0]]).unwrap();
        let (records, emb, report) = deduplicate(vec![rec("a"), rec("b"), rec("a")], &m).unwrap();
        assert_eq!(records.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(emb.values(), &[1.0, 2.0]);
        assert_eq!(report.kept, 2);
        assert_eq!(report.removed, 1);
        assert_eq!(report.removed_ids, vec![RemovedDuplicate { id: "a".into(), index: 2, first_index: 0 }]);
    }

    #[test]
    fn dedup_unique_ids_removes_nothing() {
        let m = EmbeddingMatrix::from_rows(&[[1.0f32], [2.0]]).unwrap();
        let (_, _, report) = deduplicate(vec![rec("a"), rec("b")], &m).unwrap();
        assert_eq!(report.removed, 0);
    }

    #[test]
    fn normalize_three_four_five() {
        let m = EmbeddingMatrix::from_rows(&[[3.0f32, 4.0]]).unwrap();
        let n = normalize_rows(&m).unwrap();
        assert!((n.row(0)[0] - 0.6).abs() < 1e-7);
        assert!((n.row(0)[1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn normalize_zero_row_names_index() {
        let m = EmbeddingMatrix::from_rows(&[[1.0f32, 0.0], [0.0, 0.0]]).unwrap();
        assert!(matches!(normalize_rows(&m), Err(CorpusError::ZeroNorm { row: 1 })));
    }

    #[test]
    fn corpus_rejects_collisions_and_mismatches() {
        let m = EmbeddingMatrix::from_rows(&[[1.0f32], [1.0]]).unwrap();
        assert!(matches!(Corpus::new(m.clone(), vec![rec("a"), rec("a")], true), Err(CorpusError::DuplicateId(_))));
        assert!(matches!(Corpus::new(m, vec![rec("a")], true), Err(CorpusError::CountMismatch { .. })));
    }

    #[test]
    fn record_validation() {
        let mut r = rec("x");
        r.fst = Some(7);
        assert!(r.validate().is_err());
        r.fst = Some(6);
        r.age = Some(-1.0);
        assert!(r.validate().is_err());
        r.age = Some(30.0);
        r.year = Some(99);
        assert!(r.validate().is_err());
        r.year = Some(2020);
        assert!(r.validate().is_ok());
        assert!(rec("").validate().is_err());
    }

    #[test]
    fn metadata_absent_keys_are_none() {
        let text = "{\"id\":\"a\",\"dataset\":\"d\",\"fst\":5}\n\n{\"id\":\"b\",\"dataset\":\"d\",\"year\":2020}\n";
        let recs = read_metadata(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].fst, Some(5));
        assert_eq!(recs[0].year, None);
        assert_eq!(recs[1].value(Field::Year).as_deref(), Some("2020"));
        let err = read_metadata("{\"id\":\"a\",\"fst\":9}".as_bytes()).unwrap_err();
        assert!(matches!(err, CorpusError::InvalidRecord { .. }));
    }

    #[test]
    fn unknown_field_lists_valid_names() {
        let err = "colour".parse::<Field>().unwrap_err();
        assert!(err.to_string().contains("body_region"));
        assert_eq!("fst_group".parse::<Field>().unwrap(), Field::FstGroup);
    }

    #[test]
    fn derived_bins() {
        assert_eq!(fst_group(5), "V-VI");
        assert_eq!(fst_group(2), "I-II");
        assert_eq!(age_bin(17.9), "0-17");
        assert_eq!(age_bin(30.0), "30-49");
        assert_eq!(age_bin(85.0), "70+");
    }
}
