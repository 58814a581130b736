//! Representation records and their on-disk formats.
//!
//! Two record formats are supported:
//!
//! * `text`: a comma-delimited table. Header `id,f0,..,f{m-1},l0,..,l{C-1}`,
//!   one record per line. Floats are written in shortest round-trip form.
//! * `binary-v1`: little-endian. `b"D3R1"`, `u32` version (=1), `u32` m,
//!   `u32` C, `u64` count, then `count * (m + C)` `f64` values row-major
//!   (features first, then logits), then the id table: per record a `u32`
//!   byte length followed by UTF-8 bytes.
//!
//! Probabilities are never stored. They are recomputed from logits.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"D3R1";
const BINARY_VERSION: u32 = 1;
const BINARY_HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8;

/// One sample's penultimate features and logits.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationRecord {
    pub id: String,
    pub features: Vec<f64>,
    pub logits: Vec<f64>,
}

impl RepresentationRecord {
    pub fn new(id: impl Into<String>, features: Vec<f64>, logits: Vec<f64>) -> Self {
        Self {
            id: id.into(),
            features,
            logits,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.features.len()
    }

    pub fn num_classes(&self) -> usize {
        self.logits.len()
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.features.len(), self.logits.len())
    }

    /// Softmax of the stored logits.
    pub fn probabilities(&self) -> Result<crate::metrics::ProbabilityVector> {
        crate::metrics::softmax(&self.logits)
    }
}

/// Feature width `m` and class count `C` shared by every record of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub features: usize,
    pub classes: usize,
}

impl Dims {
    pub fn new(features: usize, classes: usize) -> Self {
        Self { features, classes }
    }

    fn validate(self) -> Result<Self> {
        if self.features < 1 {
            return Err(Error::DimensionMismatch("feature width must be >= 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::DimensionMismatch("class count must be >= 2".into()));
        }
        Ok(self)
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m={}, C={}", self.features, self.classes)
    }
}

/// A homogeneous list of records together with their shared dimensions.
///
/// Keeping the dimensions alongside the rows lets an empty dataset still
/// round-trip through a header-only file.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordTable {
    dims: Dims,
    records: Vec<RepresentationRecord>,
}

impl RecordTable {
    /// Infers dimensions from the first record. Fails on an empty list.
    pub fn new(records: Vec<RepresentationRecord>) -> Result<Self> {
        let dims = records
            .first()
            .map(RepresentationRecord::dims)
            .ok_or_else(|| Error::InvalidArgument("cannot infer dimensions of an empty record list".into()))?;
        Self::with_dims(dims, records)
    }

    pub fn with_dims(dims: Dims, records: Vec<RepresentationRecord>) -> Result<Self> {
        let dims = dims.validate()?;
        for (i, r) in records.iter().enumerate() {
            if r.dims() != dims {
                return Err(Error::DimensionMismatch(format!(
                    "record {i} (`{}`) has {} but the table has {dims}",
                    r.id,
                    r.dims()
                )));
            }
            check_finite(i + 1, r)?;
        }
        Ok(Self { dims, records })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn records(&self) -> &[RepresentationRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn into_records(self) -> Vec<RepresentationRecord> {
        self.records
    }
}

fn check_finite(row: usize, r: &RepresentationRecord) -> Result<()> {
    if r.features.iter().chain(&r.logits).all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::malformed(row, format!("non-finite value in record `{}`", r.id)))
    }
}

/// An input and its diffusion generation.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedRecord {
    pub input: RepresentationRecord,
    pub generation: RepresentationRecord,
    /// Ground-truth class, when known. Diagnostics only.
    pub label: Option<usize>,
}

impl PairedRecord {
    pub fn new(input: RepresentationRecord, generation: RepresentationRecord) -> Result<Self> {
        if input.dims() != generation.dims() {
            return Err(Error::DimensionMismatch(format!(
                "pair `{}`: input {} vs generation {}",
                input.id,
                input.dims(),
                generation.dims()
            )));
        }
        Ok(Self {
            input,
            generation,
            label: None,
        })
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn id(&self) -> &str {
        &self.input.id
    }
}

/// Pairs inputs with generations by id, in input order.
pub fn pair_datasets(
    inputs: Vec<RepresentationRecord>,
    generations: Vec<RepresentationRecord>,
) -> Result<Vec<PairedRecord>> {
    if inputs.len() != generations.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} inputs vs {} generations",
            inputs.len(),
            generations.len()
        )));
    }
    let mut by_id: HashMap<String, usize> = HashMap::with_capacity(generations.len());
    for (i, g) in generations.iter().enumerate() {
        if by_id.insert(g.id.clone(), i).is_some() {
            return Err(Error::malformed(i + 1, format!("duplicate generation id `{}`", g.id)));
        }
    }
    let mut slots: Vec<Option<RepresentationRecord>> = generations.into_iter().map(Some).collect();
    let mut pairs = Vec::with_capacity(inputs.len());
    for (index, input) in inputs.into_iter().enumerate() {
        let generation = by_id
            .get(&input.id)
            .and_then(|&j| slots[j].take())
            .ok_or_else(|| Error::IdMismatch {
                index,
                input: input.id.clone(),
                generation: slots
                    .get(index)
                    .and_then(|s| s.as_ref().map(|g| g.id.clone()))
                    .unwrap_or_else(|| "<consumed>".into()),
            })?;
        pairs.push(PairedRecord::new(input, generation)?);
    }
    Ok(pairs)
}

/// Last linear layer of the classifier: `logits = weightsᵀ h + bias`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    /// `m` rows of `C` entries.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl ClassifierHead {
    pub fn new(weights: Vec<Vec<f64>>, bias: Vec<f64>) -> Result<Self> {
        let head = Self { weights, bias };
        head.validate()?;
        Ok(head)
    }

    pub fn zeros(dims: Dims) -> Self {
        Self {
            weights: vec![vec![0.0; dims.classes]; dims.features],
            bias: vec![0.0; dims.classes],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let classes = self.bias.len();
        if self.weights.is_empty() || classes < 2 {
            return Err(Error::DimensionMismatch(
                "head needs m >= 1 weight rows and C >= 2 classes".into(),
            ));
        }
        if let Some(k) = self.weights.iter().position(|row| row.len() != classes) {
            return Err(Error::DimensionMismatch(format!(
                "weight row {k} has {} entries, expected {classes}",
                self.weights[k].len()
            )));
        }
        if !self.weights.iter().flatten().chain(&self.bias).all(|v| v.is_finite()) {
            return Err(Error::Numerical("classifier head has non-finite parameters".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.weights.len(), self.bias.len())
    }

    pub fn logits(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.weights.len() {
            return Err(Error::DimensionMismatch(format!(
                "features have length {}, head expects {}",
                features.len(),
                self.weights.len()
            )));
        }
        let mut out = self.bias.clone();
        for (row, &h) in self.weights.iter().zip(features) {
            for (o, &w) in out.iter_mut().zip(row) {
                *o += w * h;
            }
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let head: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        head.validate()?;
        Ok(head)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecordFormat {
    #[serde(rename = "text")]
    TextTable,
    #[serde(rename = "binary-v1")]
    BinaryV1,
}

impl RecordFormat {
    pub fn extension(self) -> &'static str {
        match self {
            RecordFormat::TextTable => "csv",
            RecordFormat::BinaryV1 => "d3r",
        }
    }

    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "csv" => Some(RecordFormat::TextTable),
            "d3r" => Some(RecordFormat::BinaryV1),
            _ => None,
        }
    }
}

impl FromStr for RecordFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" | "text-table" | "csv" => Ok(RecordFormat::TextTable),
            "binary" | "binary-v1" => Ok(RecordFormat::BinaryV1),
            other => Err(Error::Unknown {
                kind: "record format",
                name: other.into(),
                available: "text, binary-v1".into(),
            }),
        }
    }
}

impl fmt::Display for RecordFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RecordFormat::TextTable => "text",
            RecordFormat::BinaryV1 => "binary-v1",
        })
    }
}

pub fn load_records(path: &Path, format: RecordFormat) -> Result<RecordTable> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        RecordFormat::TextTable => decode_text(&bytes),
        RecordFormat::BinaryV1 => decode_binary(&bytes),
    }
}

pub fn save_records(table: &RecordTable, path: &Path, format: RecordFormat) -> Result<()> {
    let bytes = match format {
        RecordFormat::TextTable => encode_text(table)?,
        RecordFormat::BinaryV1 => encode_binary(table),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn encode_text(table: &RecordTable) -> Result<Vec<u8>> {
    let Dims { features, classes } = table.dims();
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = std::iter::once("id".to_string())
        .chain((0..features).map(|i| format!("f{i}")))
        .chain((0..classes).map(|i| format!("l{i}")));
    w.write_record(header).map_err(csv_err)?;
    for r in table.records() {
        let row = std::iter::once(r.id.clone()).chain(r.features.iter().chain(&r.logits).map(|v| v.to_string()));
        w.write_record(row).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Config(e.to_string()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::malformed(e.position().map_or(0, |p| p.line() as usize), e.to_string())
}

fn decode_text(bytes: &[u8]) -> Result<RecordTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(bytes);
    let mut rows = rdr.records();
    let header = rows
        .next()
        .ok_or_else(|| Error::malformed(1, "missing header"))?
        .map_err(csv_err)?;
    let dims = parse_header(&header)?;
    let width = 1 + dims.features + dims.classes;
    let mut records = Vec::new();
    for (i, row) in rows.enumerate() {
        let line = i + 2;
        let row = row.map_err(csv_err)?;
        if row.len() != width {
            return Err(Error::malformed(
                line,
                format!("expected {width} columns, found {}", row.len()),
            ));
        }
        let mut values = Vec::with_capacity(width - 1);
        for field in row.iter().skip(1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::malformed(line, format!("not a number: `{field}`")))?;
            if !v.is_finite() {
                return Err(Error::malformed(line, format!("non-finite value `{field}`")));
            }
            values.push(v);
        }
        let logits = values.split_off(dims.features);
        records.push(RepresentationRecord::new(&row[0], values, logits));
    }
    RecordTable::with_dims(dims, records)
}

fn parse_header(header: &csv::StringRecord) -> Result<Dims> {
    let bad = |why: &str| Error::malformed(1, format!("bad header: {why}"));
    let mut cols = header.iter();
    if cols.next() != Some("id") {
        return Err(bad("first column must be `id`"));
    }
    let (mut features, mut classes) = (0usize, 0usize);
    for col in cols {
        if let Some(i) = col.strip_prefix('f') {
            if classes > 0 || i.parse::<usize>().ok() != Some(features) {
                return Err(bad(&format!("unexpected column `{col}`")));
            }
            features += 1;
        } else if let Some(i) = col.strip_prefix('l') {
            if i.parse::<usize>().ok() != Some(classes) {
                return Err(bad(&format!("unexpected column `{col}`")));
            }
            classes += 1;
        } else {
            return Err(bad(&format!("unexpected column `{col}`")));
        }
    }
    Dims::new(features, classes).validate().map_err(|e| bad(&e.to_string()))
}

fn encode_binary(table: &RecordTable) -> Vec<u8> {
    let Dims { features, classes } = table.dims();
    let mut out = Vec::with_capacity(BINARY_HEADER_LEN + table.len() * (features + classes) * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&BINARY_VERSION.to_le_bytes());
    out.extend_from_slice(&(features as u32).to_le_bytes());
    out.extend_from_slice(&(classes as u32).to_le_bytes());
    out.extend_from_slice(&(table.len() as u64).to_le_bytes());
    for r in table.records() {
        for v in r.features.iter().chain(&r.logits) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for r in table.records() {
        out.extend_from_slice(&(r.id.len() as u32).to_le_bytes());
        out.extend_from_slice(r.id.as_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, row: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::malformed(row, "unexpected end of file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, row: usize) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, row)?.try_into().unwrap()))
    }

    fn u64(&mut self, row: usize) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, row)?.try_into().unwrap()))
    }

    fn f64(&mut self, row: usize) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, row)?.try_into().unwrap()))
    }
}

/// Binary rows are reported 1-based by record position; row 0 is the header.
fn decode_binary(bytes: &[u8]) -> Result<RecordTable> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, 0)? != MAGIC {
        return Err(Error::malformed(0, "bad magic, expected D3R1"));
    }
    let version = cur.u32(0)?;
    if version != BINARY_VERSION {
        return Err(Error::malformed(0, format!("unsupported version {version}")));
    }
    let dims = Dims::new(cur.u32(0)? as usize, cur.u32(0)? as usize)
        .validate()
        .map_err(|e| Error::malformed(0, e.to_string()))?;
    let count = cur.u64(0)? as usize;
    let width = dims.features + dims.classes;
    if count.checked_mul(width * 8).is_none_or(|n| n > bytes.len()) {
        return Err(Error::malformed(0, "record count exceeds file size"));
    }
    let mut values = Vec::with_capacity(count);
    for row in 1..=count {
        let mut v = Vec::with_capacity(width);
        for _ in 0..width {
            let x = cur.f64(row)?;
            if !x.is_finite() {
                return Err(Error::malformed(row, "non-finite value"));
            }
            v.push(x);
        }
        values.push(v);
    }
    let mut records = Vec::with_capacity(count);
    for (i, mut v) in values.into_iter().enumerate() {
        let row = i + 1;
        let len = cur.u32(row)? as usize;
        let id = std::str::from_utf8(cur.take(len, row)?)
            .map_err(|_| Error::malformed(row, "id is not valid UTF-8"))?
            .to_string();
        let logits = v.split_off(dims.features);
        records.push(RepresentationRecord::new(id, v, logits));
    }
    if cur.pos != bytes.len() {
        return Err(Error::malformed(count, "trailing bytes after id table"));
    }
    RecordTable::with_dims(dims, records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DatasetRole {
    #[serde(rename = "ind-calibration")]
    IndCalibration,
    #[serde(rename = "ind-test")]
    IndTest,
    #[serde(rename = "ood-test")]
    OodTest,
    #[serde(rename = "feature-bank")]
    FeatureBank,
}

impl DatasetRole {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetRole::IndCalibration => "ind-calibration",
            DatasetRole::IndTest => "ind-test",
            DatasetRole::OodTest => "ood-test",
            DatasetRole::FeatureBank => "feature-bank",
        }
    }
}

impl fmt::Display for DatasetRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Provenance document for one dataset file (or input/generation file pair).
///
/// Paths are relative to the directory holding the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub role: DatasetRole,
    pub format: RecordFormat,
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation_path: Option<PathBuf>,
    pub m: usize,
    #[serde(rename = "C")]
    pub classes: usize,
    pub count: usize,
    /// Hex SHA-256 of the record file bytes, followed by the generation file
    /// bytes when present.
    pub checksum: String,
}

impl DatasetManifest {
    /// Writes `table` (and `generations`, if any) next to `dir` and returns the
    /// manifest describing them.
    pub fn write_dataset(
        dir: &Path,
        name: &str,
        role: DatasetRole,
        format: RecordFormat,
        table: &RecordTable,
        generations: Option<&RecordTable>,
    ) -> Result<Self> {
        let ext = format.extension();
        let path = match generations {
            Some(_) => PathBuf::from(format!("{name}.input.{ext}")),
            None => PathBuf::from(format!("{name}.{ext}")),
        };
        save_records(table, &dir.join(&path), format)?;
        let generation_path = match generations {
            Some(g) => {
                if g.dims() != table.dims() || g.len() != table.len() {
                    return Err(Error::DimensionMismatch(format!(
                        "generations for `{name}` do not match inputs"
                    )));
                }
                let p = PathBuf::from(format!("{name}.generation.{ext}"));
                save_records(g, &dir.join(&p), format)?;
                Some(p)
            }
            None => None,
        };
        let mut manifest = Self {
            name: name.to_string(),
            role,
            format,
            path,
            generation_path,
            m: table.dims().features,
            classes: table.dims().classes,
            count: table.len(),
            checksum: String::new(),
        };
        manifest.checksum = manifest.compute_checksum(dir)?;
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn compute_checksum(&self, dir: &Path) -> Result<String> {
        let mut hasher = Sha256::new();
        for p in std::iter::once(&self.path).chain(self.generation_path.as_ref()) {
            let full = dir.join(p);
            hasher.update(fs::read(&full).map_err(|e| Error::io(&full, e))?);
        }
        Ok(hex::encode(hasher.finalize()))
    }

    fn load_table(&self, dir: &Path, rel: &Path) -> Result<RecordTable> {
        let table = load_records(&dir.join(rel), self.format)?;
        if table.dims() != Dims::new(self.m, self.classes) {
            return Err(Error::DimensionMismatch(format!(
                "`{}` declares m={}, C={} but {} holds {}",
                self.name,
                self.m,
                self.classes,
                rel.display(),
                table.dims()
            )));
        }
        if table.len() != self.count {
            return Err(Error::malformed(
                0,
                format!(
                    "`{}` declares {} records, file holds {}",
                    self.name,
                    self.count,
                    table.len()
                ),
            ));
        }
        Ok(table)
    }

    fn verify_checksum(&self, dir: &Path) -> Result<()> {
        let actual = self.compute_checksum(dir)?;
        if actual != self.checksum {
            return Err(Error::malformed(
                0,
                format!(
                    "checksum mismatch for `{}`: manifest {}, files {actual}",
                    self.name, self.checksum
                ),
            ));
        }
        Ok(())
    }

    /// Loads the single record file (feature banks, unpaired sets).
    pub fn load_records(&self, dir: &Path) -> Result<RecordTable> {
        self.verify_checksum(dir)?;
        self.load_table(dir, &self.path)
    }

    /// Loads and pairs inputs with generations.
    pub fn load_pairs(&self, dir: &Path) -> Result<Vec<PairedRecord>> {
        self.verify_checksum(dir)?;
        let gen_path = self
            .generation_path
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("`{}` has no generation file", self.name)))?;
        let inputs = self.load_table(dir, &self.path)?;
        let generations = self.load_table(dir, gen_path)?;
        pair_datasets(inputs.into_records(), generations.into_records())
    }
}
