//! Annotation manifests: one row per mitotic-figure crop.
//!
//! File format is UTF-8 CSV with the mandatory header
//! `crop_id,image_ref,source_image_id,label,domain_id,dataset_source`.
//! Labels may be written as `0`/`1` or `NMF`/`AMF`; AMF is always the
//! positive class. Row numbers in errors are 1-based data rows (the header
//! is not counted).

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_COLUMNS: [&str; 6] = [
    "crop_id",
    "image_ref",
    "source_image_id",
    "label",
    "domain_id",
    "dataset_source",
];

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "NMF")]
    Nmf = 0,
    #[serde(rename = "AMF")]
    Amf = 1,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::Amf
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn from_bool(positive: bool) -> Self {
        if positive {
            Label::Amf
        } else {
            Label::Nmf
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Nmf => "NMF",
            Label::Amf => "AMF",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Label {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s.trim() {
            "0" => Ok(Label::Nmf),
            "1" => Ok(Label::Amf),
            t if t.eq_ignore_ascii_case("nmf") => Ok(Label::Nmf),
            t if t.eq_ignore_ascii_case("amf") => Ok(Label::Amf),
            _ => Err(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRecord {
    pub crop_id: String,
    pub image_ref: PathBuf,
    pub source_image_id: String,
    pub label: Label,
    pub domain_id: String,
    pub dataset_source: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub schema_version: u32,
    records: Vec<CropRecord>,
    /// Directory relative image references are resolved against.
    root: PathBuf,
}

impl Manifest {
    /// Builds a manifest from in-memory records, enforcing the same
    /// invariants as [`load_manifest`].
    pub fn new(records: Vec<CropRecord>) -> Result<Self> {
        let mut seen: HashMap<&str, usize> = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            let row = i + 1;
            for (column, value) in [
                ("crop_id", r.crop_id.as_str()),
                ("source_image_id", r.source_image_id.as_str()),
                ("domain_id", r.domain_id.as_str()),
            ] {
                if value.trim().is_empty() {
                    return Err(Error::EmptyField { row, column });
                }
            }
            if let Some(first) = seen.insert(r.crop_id.as_str(), row) {
                return Err(Error::DuplicateCropId {
                    crop_id: r.crop_id.clone(),
                    first,
                    second: row,
                });
            }
        }
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            records,
            root: PathBuf::new(),
        })
    }

    pub fn with_root(mut self, root: impl Into<PathBuf>) -> Self {
        self.root = root.into();
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn records(&self) -> &[CropRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve_image(&self, record: &CropRecord) -> PathBuf {
        if record.image_ref.is_absolute() {
            record.image_ref.clone()
        } else {
            self.root.join(&record.image_ref)
        }
    }

    /// Distinct source images in first-appearance order.
    pub fn source_images(&self) -> Vec<&str> {
        let mut seen = std::collections::HashSet::new();
        self.records
            .iter()
            .filter(|r| seen.insert(r.source_image_id.as_str()))
            .map(|r| r.source_image_id.as_str())
            .collect()
    }

    /// Maps each source image to its domain; errors if an image is filed
    /// under two domains.
    pub fn image_domains(&self) -> Result<BTreeMap<String, String>> {
        let mut out: BTreeMap<String, String> = BTreeMap::new();
        for r in &self.records {
            match out.get(&r.source_image_id) {
                Some(d) if d != &r.domain_id => {
                    return Err(Error::InconsistentDomain {
                        image: r.source_image_id.clone(),
                        first: d.clone(),
                        second: r.domain_id.clone(),
                    })
                }
                Some(_) => {}
                None => {
                    out.insert(r.source_image_id.clone(), r.domain_id.clone());
                }
            }
        }
        Ok(out)
    }

    /// New manifest holding the records at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Manifest {
        Manifest {
            schema_version: self.schema_version,
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            root: self.root.clone(),
        }
    }
}

pub fn class_counts(m: &Manifest) -> BTreeMap<Label, usize> {
    let mut counts = BTreeMap::from([(Label::Nmf, 0), (Label::Amf, 0)]);
    for r in m.records() {
        *counts.entry(r.label).or_default() += 1;
    }
    counts
}

pub fn domain_counts(m: &Manifest) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for r in m.records() {
        *counts.entry(r.domain_id.clone()).or_default() += 1;
    }
    counts
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(read_manifest(file)?.with_root(root))
}

pub fn read_manifest(reader: impl std::io::Read) -> Result<Manifest> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let missing: Vec<String> = MANIFEST_COLUMNS
        .iter()
        .filter(|c| !headers.iter().any(|h| h == **c))
        .map(|c| c.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingColumns(missing));
    }
    let unknown: Vec<String> = headers
        .iter()
        .filter(|h| !MANIFEST_COLUMNS.contains(h))
        .map(str::to_string)
        .collect();
    if !unknown.is_empty() {
        return Err(Error::UnknownColumns(unknown));
    }
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let idx = MANIFEST_COLUMNS.map(col);

    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| Error::MalformedRow {
            row: row_no,
            message: e.to_string(),
        })?;
        let field = |k: usize| row.get(idx[k]).unwrap_or("").to_string();
        let raw_label = field(3);
        let label = raw_label.parse().map_err(|_| Error::InvalidLabel {
            row: row_no,
            value: raw_label.clone(),
        })?;
        records.push(CropRecord {
            crop_id: field(0),
            image_ref: PathBuf::from(field(1)),
            source_image_id: field(2),
            label,
            domain_id: field(4),
            dataset_source: field(5),
        });
    }
    Manifest::new(records)
}

/// Writes the canonical form: fixed column order, integer labels.
pub fn write_manifest(m: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_manifest_to(m, file)
}

pub fn write_manifest_to(m: &Manifest, writer: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(MANIFEST_COLUMNS)?;
    for r in m.records() {
        let label = r.label.as_u8().to_string();
        w.write_record([
            r.crop_id.as_str(),
            &r.image_ref.to_string_lossy(),
            r.source_image_id.as_str(),
            label.as_str(),
            r.domain_id.as_str(),
            r.dataset_source.as_str(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<manifest>", e))?;
    Ok(())
}
