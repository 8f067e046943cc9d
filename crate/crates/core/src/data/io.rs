//! On-disk image container and dataset manifest.
//!
//! A well file is laid out as:
//!
//! | bytes            | content                                         |
//! |------------------|-------------------------------------------------|
//! | `0..8`           | magic `PHNMIMG1`                                |
//! | `8..12`          | header length `L`, little-endian `u32`          |
//! | `12..12+L`       | UTF-8 JSON [`ImageHeader`]                      |
//! | `12+L..`         | `H*W*C` little-endian `f32`, index `(y*W+x)*C+c` |
//!
//! A dataset directory holds `metadata.csv` (columns `well_id, plate_id,
//! experiment_id, perturbation_id, file_path`, paths relative to the
//! directory) and the well files under `wells/`.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::image::{WellImage, WellMeta};
use crate::error::{Error, Result};

pub const IMAGE_MAGIC: &[u8; 8] = b"PHNMIMG1";
pub const METADATA_FILE: &str = "metadata.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageHeader {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub channel_names: Vec<String>,
    pub well_id: String,
    pub plate_id: String,
    pub experiment_id: String,
    pub perturbation_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub well_id: String,
    pub plate_id: String,
    pub experiment_id: String,
    pub perturbation_id: String,
    pub file_path: String,
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn encode_image(image: &WellImage) -> Result<Vec<u8>> {
    let (h, w, c) = image.pixels.dim();
    let header = ImageHeader {
        height: h,
        width: w,
        channels: c,
        channel_names: image.channel_names.clone(),
        well_id: image.meta.well_id.clone(),
        plate_id: image.meta.plate_id.clone(),
        experiment_id: image.meta.experiment_id.clone(),
        perturbation_id: image.meta.perturbation_id.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + 4 * h * w * c);
    out.extend_from_slice(IMAGE_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    // `iter` walks logical (y, x, c) order regardless of memory layout.
    for &v in image.pixels.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_image(bytes: &[u8], path: &Path) -> Result<WellImage> {
    if bytes.len() < 12 || &bytes[..8] != IMAGE_MAGIC {
        return Err(format_err(path, "missing PHNMIMG1 magic"));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes
        .get(12..12 + len)
        .ok_or_else(|| format_err(path, "truncated header"))?;
    let header: ImageHeader = serde_json::from_slice(body)?;
    let payload = &bytes[12 + len..];
    let n = header.height * header.width * header.channels;
    if payload.len() != 4 * n {
        return Err(format_err(
            path,
            format!("payload has {} bytes, expected {}", payload.len(), 4 * n),
        ));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let pixels = Array3::from_shape_vec((header.height, header.width, header.channels), values)
        .map_err(|e| format_err(path, e.to_string()))?;
    WellImage::new(
        pixels,
        header.channel_names,
        WellMeta {
            well_id: header.well_id,
            plate_id: header.plate_id,
            experiment_id: header.experiment_id,
            perturbation_id: header.perturbation_id,
        },
    )
}

pub fn write_image(path: &Path, image: &WellImage) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(&encode_image(image)?)?;
    f.flush()?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<WellImage> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_image(&bytes, path)
}

/// Write every image under `dir/wells/` plus `dir/metadata.csv`.
pub fn write_dataset(dir: &Path, images: &[WellImage]) -> Result<Vec<ManifestRow>> {
    let wells = dir.join("wells");
    fs::create_dir_all(&wells)?;
    let mut rows = Vec::with_capacity(images.len());
    for image in images {
        let rel = format!("wells/{}.phimg", image.meta.well_id);
        write_image(&dir.join(&rel), image)?;
        rows.push(ManifestRow {
            well_id: image.meta.well_id.clone(),
            plate_id: image.meta.plate_id.clone(),
            experiment_id: image.meta.experiment_id.clone(),
            perturbation_id: image.meta.perturbation_id.clone(),
            file_path: rel,
        });
    }
    write_manifest(&dir.join(METADATA_FILE), &rows)?;
    Ok(rows)
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Read a dataset in manifest order, checking that headers agree with the manifest.
pub fn read_dataset(dir: &Path) -> Result<Vec<WellImage>> {
    let rows = read_manifest(&dir.join(METADATA_FILE))?;
    rows.iter()
        .map(|row| {
            let path: PathBuf = dir.join(&row.file_path);
            let image = read_image(&path)?;
            if image.meta.well_id != row.well_id || image.meta.perturbation_id != row.perturbation_id {
                return Err(format_err(&path, "header ids disagree with metadata.csv"));
            }
            Ok(image)
        })
        .collect()
}
