use ndarray::{s, Array3, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::seed;

/// Perturbation id carried by negative-control wells.
pub const NEG_CONTROL: &str = "NEG_CONTROL";

/// Guard added to the standard deviation during self-standardization.
pub const STANDARDIZE_EPS: f64 = 1e-6;

/// Identifiers attached to every well.
#[derive(Debug, Clone, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct WellMeta {
    pub well_id: String,
    pub plate_id: String,
    pub experiment_id: String,
    pub perturbation_id: String,
}

impl WellMeta {
    pub fn is_control(&self) -> bool {
        self.perturbation_id == NEG_CONTROL
    }
}

/// A multi-channel well image stored as `H x W x C` float32 intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct WellImage {
    pub pixels: Array3<f32>,
    pub channel_names: Vec<String>,
    pub meta: WellMeta,
}

impl WellImage {
    pub fn new(pixels: Array3<f32>, channel_names: Vec<String>, meta: WellMeta) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Dimension(format!("empty image {h}x{w}x{c}")));
        }
        if channel_names.len() != c {
            return Err(Error::Dimension(format!(
                "{} channel names for {c} channels",
                channel_names.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = channel_names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(Error::InvalidArgument(format!("duplicate channel name {dup:?}")));
        }
        Ok(Self {
            pixels,
            channel_names,
            meta,
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().2
    }
}

/// Where a crop came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub well_id: String,
    pub row_offset: usize,
    pub col_offset: usize,
}

/// A square `S x S x C` crop.
#[derive(Debug, Clone, PartialEq)]
pub struct Crop {
    pub pixels: Array3<f32>,
    pub provenance: Provenance,
    pub standardized: bool,
}

impl Crop {
    /// Wrap raw pixels (not standardized) as a crop.
    pub fn from_pixels(pixels: Array3<f32>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h != w || h == 0 || c == 0 {
            return Err(Error::Dimension(format!("crop must be square, got {h}x{w}x{c}")));
        }
        Ok(Self {
            pixels,
            provenance: Provenance {
                well_id: String::new(),
                row_offset: 0,
                col_offset: 0,
            },
            standardized: false,
        })
    }

    pub fn size(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().2
    }

    /// Keep only the listed channels, in the given order.
    pub fn select_channels(&self, order: &[usize]) -> Result<Crop> {
        let c = self.channels();
        if let Some(&bad) = order.iter().find(|&&i| i >= c) {
            return Err(Error::InvalidArgument(format!("channel {bad} of {c}")));
        }
        Ok(Crop {
            pixels: self.pixels.select(Axis(2), order),
            provenance: self.provenance.clone(),
            standardized: self.standardized,
        })
    }
}

fn channel_stats(plane: ArrayView2<f32>) -> (f64, f64) {
    let n = plane.len() as f64;
    let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = plane
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, var.sqrt())
}

/// Per-channel `(x - mean) / max(std, eps)` using the crop's own statistics.
pub fn self_standardize(mut crop: Crop) -> Crop {
    for c in 0..crop.channels() {
        let mut plane = crop.pixels.index_axis_mut(Axis(2), c);
        let (mean, std) = channel_stats(plane.view());
        let denom = std.max(STANDARDIZE_EPS);
        plane.mapv_inplace(|v| ((v as f64 - mean) / denom) as f32);
    }
    crop.standardized = true;
    crop
}

fn extract(image: &WellImage, row: usize, col: usize, size: usize) -> Crop {
    Crop {
        pixels: image
            .pixels
            .slice(s![row..row + size, col..col + size, ..])
            .to_owned(),
        provenance: Provenance {
            well_id: image.meta.well_id.clone(),
            row_offset: row,
            col_offset: col,
        },
        standardized: false,
    }
}

/// Non-overlapping row-major tiling; each tile is self-standardized.
pub fn tile_image(image: &WellImage, crop_size: usize) -> Result<Vec<Crop>> {
    let (h, w) = (image.height(), image.width());
    if crop_size == 0 || h % crop_size != 0 || w % crop_size != 0 {
        return Err(Error::Dimension(format!(
            "{h}x{w} image is not divisible into {crop_size}x{crop_size} tiles"
        )));
    }
    let mut crops = Vec::with_capacity((h / crop_size) * (w / crop_size));
    for row in (0..h).step_by(crop_size) {
        for col in (0..w).step_by(crop_size) {
            crops.push(self_standardize(extract(image, row, col, crop_size)));
        }
    }
    Ok(crops)
}

/// Uniformly placed crop, deterministic in `seed`, self-standardized.
pub fn random_crop(image: &WellImage, size: usize, seed: u64) -> Result<Crop> {
    let (h, w) = (image.height(), image.width());
    if size == 0 || size > h.min(w) {
        return Err(Error::Dimension(format!(
            "crop size {size} does not fit a {h}x{w} image"
        )));
    }
    let mut rng = seed::rng(seed, &[0x6372_6f70]);
    let row = rng.random_range(0..=h - size);
    let col = rng.random_range(0..=w - size);
    Ok(self_standardize(extract(image, row, col, size)))
}

/// Which flips [`augment_flips`] applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FlipOutcome {
    pub horizontal: bool,
    pub vertical: bool,
}

pub fn flip_outcome(seed: u64) -> FlipOutcome {
    let mut rng = seed::rng(seed, &[0x666c_6970]);
    FlipOutcome {
        horizontal: rng.random_bool(0.5),
        vertical: rng.random_bool(0.5),
    }
}

/// Apply the given flips. Vertical reverses rows, horizontal reverses columns.
pub fn apply_flips(mut crop: Crop, outcome: FlipOutcome) -> Crop {
    if outcome.vertical {
        crop.pixels.invert_axis(Axis(0));
    }
    if outcome.horizontal {
        crop.pixels.invert_axis(Axis(1));
    }
    crop.pixels = crop.pixels.as_standard_layout().to_owned();
    crop
}

/// Independent horizontal and vertical flips, each with probability 0.5.
pub fn augment_flips(crop: Crop, seed: u64) -> Crop {
    apply_flips(crop, flip_outcome(seed))
}
