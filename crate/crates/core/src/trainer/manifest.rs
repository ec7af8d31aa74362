//! CSV dataset manifests (`id,volume,label`).
//!
//! Unlabeled and labeled manifests are distinct types: an
//! [`UnlabeledManifest`] has nowhere to store a label, so code that only
//! receives one cannot read labels.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{load_volume, Volume};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnlabeledRecord {
    pub id: String,
    pub volume: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledRecord {
    pub id: String,
    pub volume: PathBuf,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct UnlabeledManifest {
    pub records: Vec<UnlabeledRecord>,
    /// Directory relative volume paths are resolved against.
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabeledManifest {
    pub records: Vec<LabeledRecord>,
    pub base_dir: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    id: String,
    volume: String,
    label: Option<String>,
}

fn read_rows(path: &Path) -> Result<(Vec<Row>, PathBuf)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["id", "volume", "label"] {
        return Err(Error::Manifest {
            row: 1,
            message: format!("expected header id,volume,label, found {}", headers.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (i, rec) in reader.deserialize::<Row>().enumerate() {
        // header is row 1
        let row = i + 2;
        let r = rec.map_err(|e| Error::Manifest {
            row,
            message: e.to_string(),
        })?;
        if r.id.is_empty() || r.volume.is_empty() {
            return Err(Error::Manifest {
                row,
                message: "empty id or volume".into(),
            });
        }
        if !seen.insert(r.id.clone()) {
            return Err(Error::Manifest {
                row,
                message: format!("duplicate id {:?}", r.id),
            });
        }
        rows.push(r);
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((rows, base))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    }
}

fn write_rows(path: &Path, rows: impl Iterator<Item = (String, String, String)>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["id", "volume", "label"]).map_err(|e| csv_error(path, e))?;
    for (id, vol, label) in rows {
        w.write_record([id, vol, label]).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl UnlabeledManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let (rows, base_dir) = read_rows(path.as_ref())?;
        let mut records = Vec::with_capacity(rows.len());
        for (i, r) in rows.into_iter().enumerate() {
            if r.label.as_deref().is_some_and(|l| !l.is_empty()) {
                return Err(Error::Manifest {
                    row: i + 2,
                    message: "unlabeled manifest rows must leave the label empty".into(),
                });
            }
            records.push(UnlabeledRecord {
                id: r.id,
                volume: PathBuf::from(r.volume),
            });
        }
        Ok(Self { records, base_dir })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_rows(
            path.as_ref(),
            self.records
                .iter()
                .map(|r| (r.id.clone(), r.volume.to_string_lossy().into_owned(), String::new())),
        )
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn volume_path(&self, record: &UnlabeledRecord) -> PathBuf {
        resolve(&self.base_dir, &record.volume)
    }

    pub fn load_volumes(&self) -> Result<Vec<Volume>> {
        self.records.iter().map(|r| load_volume(self.volume_path(r))).collect()
    }
}

impl LabeledManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let (rows, base_dir) = read_rows(path.as_ref())?;
        let mut records = Vec::with_capacity(rows.len());
        for (i, r) in rows.into_iter().enumerate() {
            let label = match r.label.as_deref() {
                Some("0") => 0,
                Some("1") => 1,
                other => {
                    return Err(Error::Manifest {
                        row: i + 2,
                        message: format!("label must be 0 or 1, found {other:?}"),
                    })
                }
            };
            records.push(LabeledRecord {
                id: r.id,
                volume: PathBuf::from(r.volume),
                label,
            });
        }
        Ok(Self { records, base_dir })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_rows(
            path.as_ref(),
            self.records
                .iter()
                .map(|r| (r.id.clone(), r.volume.to_string_lossy().into_owned(), r.label.to_string())),
        )
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.id.clone()).collect()
    }

    pub fn volume_path(&self, record: &LabeledRecord) -> PathBuf {
        resolve(&self.base_dir, &record.volume)
    }

    pub fn load_volumes(&self) -> Result<Vec<Volume>> {
        self.records.iter().map(|r| load_volume(self.volume_path(r))).collect()
    }

    /// The records whose ids appear in `keep`, in manifest order.
    pub fn subset(&self, keep: &HashSet<&str>) -> Self {
        Self {
            records: self.records.iter().filter(|r| keep.contains(r.id.as_str())).cloned().collect(),
            base_dir: self.base_dir.clone(),
        }
    }
}

/// A manifest of either kind.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AnyManifest {
    Unlabeled(UnlabeledManifest),
    Labeled(LabeledManifest),
}

impl AnyManifest {
    /// Reads a manifest whose kind is decided by the first data row: an empty
    /// label makes it unlabeled.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (rows, _) = read_rows(path)?;
        match rows.first().and_then(|r| r.label.as_deref()) {
            Some(l) if !l.is_empty() => LabeledManifest::read(path).map(AnyManifest::Labeled),
            _ => UnlabeledManifest::read(path).map(AnyManifest::Unlabeled),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            AnyManifest::Unlabeled(m) => m.len(),
            AnyManifest::Labeled(m) => m.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(id, resolved volume path)` per record.
    pub fn entries(&self) -> Vec<(String, PathBuf)> {
        match self {
            AnyManifest::Unlabeled(m) => m.records.iter().map(|r| (r.id.clone(), m.volume_path(r))).collect(),
            AnyManifest::Labeled(m) => m.records.iter().map(|r| (r.id.clone(), m.volume_path(r))).collect(),
        }
    }
}
