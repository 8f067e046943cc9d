//! Embedding records and the on-disk embedding table.
//!
//! A table named `<stem>` is three files: `<stem>.csv` with columns
//! `well_id, plate_id, experiment_id, perturbation_id, row_index`,
//! `<stem>.f32` holding the `rows x dim` matrix as row-major little-endian
//! `f32`, and `<stem>.json` with `{rows, dim, schema_version}`. Vectors are
//! held as `f64` in memory and rounded to `f32` on write.

use std::path::{Path, PathBuf};

use phenom_core::data::WellMeta;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TABLE_SCHEMA: &str = "phenom-embeddings/1";

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub meta: WellMeta,
    pub vector: Vec<f64>,
}

impl EmbeddingRecord {
    pub fn new(meta: WellMeta, vector: Vec<f64>) -> Self {
        Self { meta, vector }
    }

    pub fn is_control(&self) -> bool {
        self.meta.is_control()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKey {
    Plate,
    Experiment,
}

impl GroupKey {
    pub fn of<'a>(&self, r: &'a EmbeddingRecord) -> &'a str {
        match self {
            Self::Plate => &r.meta.plate_id,
            Self::Experiment => &r.meta.experiment_id,
        }
    }
}

impl std::str::FromStr for GroupKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plate" => Ok(Self::Plate),
            "experiment" => Ok(Self::Experiment),
            other => Err(Error::InvalidArgument(format!(
                "unknown group key {other:?} (plate, experiment)"
            ))),
        }
    }
}

/// Common dimension of a non-empty table with finite entries.
pub fn table_dim(records: &[EmbeddingRecord]) -> Result<usize> {
    let first = records
        .first()
        .ok_or_else(|| Error::Empty("embedding table".into()))?;
    let d = first.vector.len();
    for (i, r) in records.iter().enumerate() {
        if r.vector.len() != d {
            return Err(Error::Dimension(format!(
                "row {i} has {} dims, expected {d}",
                r.vector.len()
            )));
        }
        if r.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "row {i} has non-finite entries"
            )));
        }
    }
    Ok(d)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableHeader {
    pub rows: usize,
    pub dim: usize,
    pub schema_version: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaRow {
    well_id: String,
    plate_id: String,
    experiment_id: String,
    perturbation_id: String,
    row_index: usize,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let with = |ext: &str| {
        let mut s = stem.as_os_str().to_owned();
        s.push(ext);
        PathBuf::from(s)
    };
    (with(".csv"), with(".f32"), with(".json"))
}

/// Write `<stem>.csv`, `<stem>.f32` and `<stem>.json`.
pub fn write_table(stem: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    let dim = table_dim(records)?;
    let (csv_path, bin_path, json_path) = paths(stem);
    let mut w = csv::Writer::from_path(&csv_path)?;
    let mut payload = Vec::with_capacity(records.len() * dim * 4);
    for (i, r) in records.iter().enumerate() {
        w.serialize(MetaRow {
            well_id: r.meta.well_id.clone(),
            plate_id: r.meta.plate_id.clone(),
            experiment_id: r.meta.experiment_id.clone(),
            perturbation_id: r.meta.perturbation_id.clone(),
            row_index: i,
        })?;
        for &v in &r.vector {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    w.flush()?;
    std::fs::write(&bin_path, payload)?;
    let header = TableHeader {
        rows: records.len(),
        dim,
        schema_version: TABLE_SCHEMA.into(),
    };
    std::fs::write(&json_path, serde_json::to_string_pretty(&header)? + "\n")?;
    Ok(())
}

pub fn read_table(stem: &Path) -> Result<Vec<EmbeddingRecord>> {
    let (csv_path, bin_path, json_path) = paths(stem);
    let fmt = |p: &Path, msg: String| Error::Format {
        path: p.to_path_buf(),
        msg,
    };
    let header: TableHeader = serde_json::from_slice(
        &std::fs::read(&json_path).map_err(|e| fmt(&json_path, e.to_string()))?,
    )?;
    if header.schema_version != TABLE_SCHEMA {
        return Err(fmt(
            &json_path,
            format!("unsupported schema {:?}", header.schema_version),
        ));
    }
    let bytes = std::fs::read(&bin_path).map_err(|e| fmt(&bin_path, e.to_string()))?;
    if bytes.len() != header.rows * header.dim * 4 {
        return Err(fmt(
            &bin_path,
            format!(
                "{} bytes for a {}x{} table",
                bytes.len(),
                header.rows,
                header.dim
            ),
        ));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    let mut r = csv::Reader::from_path(&csv_path).map_err(|e| fmt(&csv_path, e.to_string()))?;
    let mut out = Vec::with_capacity(header.rows);
    for row in r.deserialize() {
        let m: MetaRow = row?;
        if m.row_index >= header.rows {
            return Err(fmt(
                &csv_path,
                format!("row_index {} out of range", m.row_index),
            ));
        }
        let d = header.dim;
        out.push(EmbeddingRecord {
            meta: WellMeta {
                well_id: m.well_id,
                plate_id: m.plate_id,
                experiment_id: m.experiment_id,
                perturbation_id: m.perturbation_id,
            },
            vector: values[m.row_index * d..(m.row_index + 1) * d].to_vec(),
        });
    }
    if out.len() != header.rows {
        return Err(fmt(
            &csv_path,
            format!("{} metadata rows, header says {}", out.len(), header.rows),
        ));
    }
    Ok(out)
}
