//! KITTI label ingestion, class-aware visibility filtering and the PRIOFEAT
//! binary feature format.
//!
//! Feature rows join labels through an instance key of
//! `file_id * 1000 + line_index`, where `line_index` is the zero-based raw line
//! number inside the label file (DontCare and blank lines still consume an index).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PrioError, Result};
use crate::size_space::SizeTriple;

pub const FEATURE_MAGIC: &[u8; 8] = b"PRIOFEAT";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 4 + 8;
const MAX_LINES_PER_FILE: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelInstance {
    pub class_name: String,
    pub truncation: f64,
    pub occlusion: u8,
    pub alpha: f64,
    /// `(left, top, right, bottom)` in pixels.
    pub bbox2d: [f64; 4],
    /// KITTI order `(h, w, l)`.
    pub size: SizeTriple,
    pub location: [f64; 3],
    pub rotation_y: f64,
    /// Detection score column present in result files.
    pub score: Option<f64>,
    pub instance_key: u64,
}

impl LabelInstance {
    pub fn bbox_height(&self) -> f64 {
        self.bbox2d[3] - self.bbox2d[1]
    }

    /// Renders the record back to one KITTI label line.
    pub fn to_label_line(&self) -> String {
        let mut fields = vec![
            self.class_name.clone(),
            self.truncation.to_string(),
            self.occlusion.to_string(),
            self.alpha.to_string(),
        ];
        fields.extend(self.bbox2d.iter().map(f64::to_string));
        fields.extend(self.size.as_array().iter().map(f64::to_string));
        fields.extend(self.location.iter().map(f64::to_string));
        fields.push(self.rotation_y.to_string());
        if let Some(s) = self.score {
            fields.push(s.to_string());
        }
        fields.join(" ")
    }
}

/// Where a label text came from; used for error messages and instance keys.
#[derive(Debug, Clone)]
pub struct LabelSource {
    pub name: String,
    pub file_id: u64,
}

impl LabelSource {
    /// Derives the file id from a numeric file stem such as `000123.txt`.
    pub fn from_path(path: &Path) -> Result<Self> {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| PrioError::validation("label path", format!("{}", path.display())))?;
        let file_id = stem.parse::<u64>().map_err(|_| {
            PrioError::validation(
                "label file name",
                format!("{}: stem {stem:?} is not a numeric frame id", path.display()),
            )
        })?;
        Ok(LabelSource {
            name: path.display().to_string(),
            file_id,
        })
    }
}

pub fn parse_label_file(text: &str, source: &LabelSource) -> Result<Vec<LabelInstance>> {
    let mut out = Vec::new();
    for (line_index, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let perr = |column: usize, reason: String| PrioError::Parse {
            file: source.name.clone(),
            line: line_index + 1,
            column,
            reason,
        };
        if fields.len() < 15 {
            return Err(perr(
                fields.len() + 1,
                format!("expected at least 15 fields, found {}", fields.len()),
            ));
        }
        if fields[0] == "DontCare" {
            continue;
        }
        if line_index >= MAX_LINES_PER_FILE {
            return Err(perr(1, "more than 1000 lines; instance keys would collide".into()));
        }
        let num = |col: usize| -> Result<f64> {
            let raw = fields[col];
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| perr(col + 1, format!("malformed number {raw:?}")))
        };
        let truncation = num(1)?;
        if !(0.0..=1.0).contains(&truncation) {
            return Err(perr(2, format!("truncation {truncation} outside [0, 1]")));
        }
        let occlusion = match fields[2].parse::<u8>() {
            Ok(v @ 0..=3) => v,
            _ => return Err(perr(3, format!("occlusion code {:?} not in 0..=3", fields[2]))),
        };
        let alpha = num(3)?;
        let bbox2d = [num(4)?, num(5)?, num(6)?, num(7)?];
        if bbox2d[2] <= bbox2d[0] || bbox2d[3] <= bbox2d[1] {
            return Err(perr(5, format!("degenerate 2D box {bbox2d:?}")));
        }
        let size = SizeTriple::new(num(8)?, num(9)?, num(10)?)
            .map_err(|e| perr(9, e.to_string()))?;
        let location = [num(11)?, num(12)?, num(13)?];
        let rotation_y = num(14)?;
        let score = if fields.len() > 15 { Some(num(15)?) } else { None };
        out.push(LabelInstance {
            class_name: fields[0].to_string(),
            truncation,
            occlusion,
            alpha,
            bbox2d,
            size,
            location,
            rotation_y,
            score,
            instance_key: source.file_id * MAX_LINES_PER_FILE as u64 + line_index as u64,
        });
    }
    Ok(out)
}

/// Reads every `*.txt` label file in a directory, in file-name order.
pub fn read_label_dir(dir: &Path) -> Result<Vec<LabelInstance>> {
    let entries = std::fs::read_dir(dir).map_err(|e| PrioError::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| PrioError::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "txt") {
            paths.push(path);
        }
    }
    paths.sort();
    let mut all = Vec::new();
    for path in paths {
        let text = std::fs::read_to_string(&path).map_err(|e| PrioError::io(&path, e))?;
        all.extend(parse_label_file(&text, &LabelSource::from_path(&path)?)?);
    }
    Ok(all)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassThresholds {
    pub max_truncation: f64,
    pub max_occlusion: u8,
    pub min_bbox_height: f64,
}

impl Default for ClassThresholds {
    fn default() -> Self {
        ClassThresholds {
            max_truncation: 0.5,
            max_occlusion: 1,
            min_bbox_height: 25.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FilterThresholds(pub BTreeMap<String, ClassThresholds>);

impl FilterThresholds {
    /// Default cutoffs for the given classes.
    pub fn for_classes<S: AsRef<str>>(classes: &[S]) -> Self {
        FilterThresholds(
            classes
                .iter()
                .map(|c| (c.as_ref().to_string(), ClassThresholds::default()))
                .collect(),
        )
    }

    pub fn get(&self, class: &str) -> Option<&ClassThresholds> {
        self.0.get(class)
    }

    pub fn keeps(&self, inst: &LabelInstance) -> bool {
        match self.get(&inst.class_name) {
            Some(t) => {
                inst.truncation <= t.max_truncation
                    && inst.occlusion <= t.max_occlusion
                    && inst.bbox_height() >= t.min_bbox_height
            }
            None => false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<LabelInstance>,
    /// Instances dropped because no thresholds exist for their class.
    pub unknown_class: usize,
    pub rejected: usize,
}

pub fn filter_instances(instances: &[LabelInstance], t: &FilterThresholds) -> FilterOutcome {
    let mut out = FilterOutcome::default();
    for inst in instances {
        if t.get(&inst.class_name).is_none() {
            out.unknown_class += 1;
        } else if t.keeps(inst) {
            out.kept.push(inst.clone());
        } else {
            out.rejected += 1;
        }
    }
    out
}

/// Precomputed visual feature vectors keyed by instance key.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    dim: usize,
    rows: BTreeMap<u64, Vec<f32>>,
}

impl FeatureTable {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(PrioError::FeatureFormat("feature dim must be positive".into()));
        }
        Ok(FeatureTable {
            dim,
            rows: BTreeMap::new(),
        })
    }

    pub fn insert(&mut self, key: u64, row: Vec<f32>) -> Result<()> {
        if row.len() != self.dim {
            return Err(PrioError::Dimension {
                what: "feature row",
                expected: self.dim,
                got: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(PrioError::FeatureFormat(format!(
                "non-finite entry in row for key {key}"
            )));
        }
        if self.rows.contains_key(&key) {
            return Err(PrioError::DuplicateKey(key));
        }
        self.rows.insert(key, row);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, key: u64) -> Option<&[f32]> {
        self.rows.get(&key).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &[f32])> {
        self.rows.iter().map(|(k, v)| (*k, v.as_slice()))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(PrioError::FeatureFormat(format!(
                "truncated stream while reading {what} at byte {}",
                self.pos
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(n * 4, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

struct Header {
    dim: usize,
    count: u64,
}

fn read_header(r: &mut Reader<'_>) -> Result<Header> {
    let magic = r.take(8, "magic")?;
    if magic != FEATURE_MAGIC {
        return Err(PrioError::FeatureFormat(format!("bad magic {magic:?}")));
    }
    let version = r.u32("version")?;
    if version != FEATURE_VERSION {
        return Err(PrioError::FeatureFormat(format!(
            "unsupported version {version} (expected {FEATURE_VERSION})"
        )));
    }
    let dim = r.u32("dim")? as usize;
    let count = r.u64("count")?;
    Ok(Header { dim, count })
}

fn write_header(out: &mut Vec<u8>, dim: usize, count: usize) {
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(count as u64).to_le_bytes());
}

pub fn load_feature_file(bytes: &[u8]) -> Result<FeatureTable> {
    let mut r = Reader { bytes, pos: 0 };
    let header = read_header(&mut r)?;
    let mut table = FeatureTable::new(header.dim)?;
    for i in 0..header.count {
        let key = r.u64(&format!("key of record {i}"))?;
        let row = r.f32s(header.dim, &format!("vector of record {i}"))?;
        table.insert(key, row)?;
    }
    if r.pos != bytes.len() {
        return Err(PrioError::FeatureFormat(format!(
            "{} trailing bytes after {} records",
            bytes.len() - r.pos,
            header.count
        )));
    }
    Ok(table)
}

/// Serialises a table in ascending key order.
pub fn write_feature_file(table: &FeatureTable) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + table.len() * (8 + 4 * table.dim));
    write_header(&mut out, table.dim, table.len());
    for (key, row) in table.iter() {
        out.extend_from_slice(&key.to_le_bytes());
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// One routing query: embedding plus class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord {
    pub key: u64,
    pub q: Vec<f32>,
    pub p: Vec<f32>,
}

/// Query files use the PRIOFEAT header; each record is
/// `[u64 key][dim x f32 query][num_classes x f32 class probabilities]`,
/// where `num_classes` comes from the bank the queries are routed against.
pub fn load_query_file(bytes: &[u8], num_classes: usize) -> Result<Vec<QueryRecord>> {
    let mut r = Reader { bytes, pos: 0 };
    let header = read_header(&mut r)?;
    let mut out = Vec::new();
    for i in 0..header.count {
        let key = r.u64(&format!("key of query {i}"))?;
        let q = r.f32s(header.dim, &format!("query vector {i}"))?;
        let p = r.f32s(num_classes, &format!("class probabilities of query {i}"))?;
        out.push(QueryRecord { key, q, p });
    }
    if r.pos != bytes.len() {
        return Err(PrioError::FeatureFormat(format!(
            "{} trailing bytes after {} queries (class count mismatch?)",
            bytes.len() - r.pos,
            header.count
        )));
    }
    Ok(out)
}

pub fn write_query_file(records: &[QueryRecord]) -> Result<Vec<u8>> {
    let dim = records.first().map_or(0, |r| r.q.len());
    let mut out = Vec::new();
    write_header(&mut out, dim, records.len());
    for rec in records {
        if rec.q.len() != dim {
            return Err(PrioError::Dimension {
                what: "query vector",
                expected: dim,
                got: rec.q.len(),
            });
        }
        out.extend_from_slice(&rec.key.to_le_bytes());
        for v in rec.q.iter().chain(&rec.p) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}
