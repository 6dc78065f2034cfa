use std::collections::HashSet;
use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{netpbm, Dataset, GroupName, Plane, SliceRecord};
use crate::error::{Error, Result};

const HEADER: [&str; 4] = ["path", "label", "subject_id", "plane"];

#[derive(Debug, Deserialize, Serialize)]
struct RawRow {
    path: String,
    label: String,
    subject_id: String,
    plane: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub path: PathBuf,
    pub group: GroupName,
    pub subject_id: String,
    pub plane: Plane,
}

/// Rows in file order. Paths are unique.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn from_dataset(ds: &Dataset) -> Self {
        let rows = ds
            .records()
            .iter()
            .map(|r| ManifestRow {
                path: r.source_path.clone(),
                group: r.group,
                subject_id: r.subject_id.clone(),
                plane: r.plane,
            })
            .collect();
        Self { rows }
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        kind => Error::Data(format!("{}: {kind:?}", path.display())),
    }
}

/// Parse and validate a manifest. Row numbers in errors count data rows
/// from zero, excluding the header.
pub fn read_manifest(csv_path: impl AsRef<Path>) -> Result<Manifest> {
    let csv_path = csv_path.as_ref();
    let file = File::open(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header = reader.headers().map_err(|e| csv_error(csv_path, e))?;
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(Error::Data(format!(
            "{}: header must be {}, found {}",
            csv_path.display(),
            HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }

    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (row, raw) in reader.deserialize::<RawRow>().enumerate() {
        let raw = raw.map_err(|e| Error::Manifest { row, reason: e.to_string() })?;
        let group = raw.label.parse::<GroupName>().map_err(|reason| Error::Manifest { row, reason })?;
        let plane = raw.plane.parse::<Plane>().map_err(|reason| Error::Manifest { row, reason })?;
        if raw.path.is_empty() {
            return Err(Error::Manifest { row, reason: "empty path".into() });
        }
        if !seen.insert(raw.path.clone()) {
            return Err(Error::Manifest { row, reason: format!("duplicate path {:?}", raw.path) });
        }
        rows.push(ManifestRow { path: raw.path.into(), group, subject_id: raw.subject_id, plane });
    }
    Ok(Manifest { rows })
}

pub fn write_manifest(manifest: &Manifest, csv_path: impl AsRef<Path>) -> Result<()> {
    let csv_path = csv_path.as_ref();
    let mut writer = csv::Writer::from_path(csv_path).map_err(|e| csv_error(csv_path, e))?;
    writer.write_record(HEADER).map_err(|e| csv_error(csv_path, e))?;
    for r in &manifest.rows {
        let path =
            r.path.to_str().ok_or_else(|| Error::Data(format!("path {} is not valid UTF-8", r.path.display())))?;
        writer
            .write_record([path, r.group.as_str(), &r.subject_id, r.plane.as_str()])
            .map_err(|e| csv_error(csv_path, e))?;
    }
    writer.flush().map_err(|e| Error::io(csv_path, e))
}

/// Read a manifest and every image it lists. Relative image paths resolve
/// against `image_root`; records keep the path exactly as written.
pub fn load_manifest(csv_path: impl AsRef<Path>, image_root: impl AsRef<Path>) -> Result<Dataset> {
    let manifest = read_manifest(csv_path)?;
    let root = image_root.as_ref();
    let mut records = Vec::with_capacity(manifest.rows.len());
    for (row, r) in manifest.rows.into_iter().enumerate() {
        let image = netpbm::load_pgm(root.join(&r.path))
            .map_err(|e| Error::Manifest { row, reason: format!("cannot read image: {e}") })?;
        records.push(SliceRecord {
            image,
            label: r.group.label(),
            group: r.group,
            subject_id: r.subject_id,
            plane: r.plane,
            source_path: r.path,
        });
    }
    Dataset::new(records)
}
