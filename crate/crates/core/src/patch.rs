//! Patch grids and random token masks.

use ndarray::{Array3, ArrayView3};
use rand::seq::SliceRandom;

use crate::data::Crop;
use crate::error::{Error, Result};
use crate::nn::Mat;
use crate::seed;

/// Patch tokens of one crop.
///
/// `tokens` is `N x (P*P*C)`; patches run row-major over the `(S/P, S/P)`
/// grid and each token flattens its block as `(row, col, channel)` with the
/// channel index fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub tokens: Mat,
    pub patch_size: usize,
    pub channels: usize,
    pub grid_shape: (usize, usize),
}

impl PatchGrid {
    pub fn n_tokens(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn patch_dim(&self) -> usize {
        self.tokens.ncols()
    }
}

pub fn check_divisible(size: usize, patch_size: usize) -> Result<()> {
    if patch_size == 0 || size % patch_size != 0 {
        return Err(Error::Dimension(format!(
            "crop size {size} is not divisible by patch size {patch_size}"
        )));
    }
    Ok(())
}

pub fn patchify_pixels(pixels: ArrayView3<f32>, patch_size: usize) -> Result<PatchGrid> {
    let (h, w, c) = pixels.dim();
    check_divisible(h, patch_size)?;
    check_divisible(w, patch_size)?;
    let p = patch_size;
    let (gh, gw) = (h / p, w / p);
    let mut tokens = Mat::zeros((gh * gw, p * p * c));
    for gy in 0..gh {
        for gx in 0..gw {
            let mut row = tokens.row_mut(gy * gw + gx);
            for i in 0..p {
                for j in 0..p {
                    for ch in 0..c {
                        row[(i * p + j) * c + ch] = pixels[[gy * p + i, gx * p + j, ch]] as f64;
                    }
                }
            }
        }
    }
    Ok(PatchGrid {
        tokens,
        patch_size: p,
        channels: c,
        grid_shape: (gh, gw),
    })
}

pub fn patchify(crop: &Crop, patch_size: usize) -> Result<PatchGrid> {
    patchify_pixels(crop.pixels.view(), patch_size)
}

/// Inverse of [`patchify`]; values are cast back to `f32`.
pub fn unpatchify(grid: &PatchGrid) -> Result<Array3<f32>> {
    let p = grid.patch_size;
    let c = grid.channels;
    let (gh, gw) = grid.grid_shape;
    if grid.tokens.dim() != (gh * gw, p * p * c) {
        return Err(Error::Shape {
            expected: vec![gh * gw, p * p * c],
            actual: vec![grid.tokens.nrows(), grid.tokens.ncols()],
        });
    }
    let mut out = Array3::<f32>::zeros((gh * p, gw * p, c));
    for gy in 0..gh {
        for gx in 0..gw {
            let row = grid.tokens.row(gy * gw + gx);
            for i in 0..p {
                for j in 0..p {
                    for ch in 0..c {
                        out[[gy * p + i, gx * p + j, ch]] = row[(i * p + j) * c + ch] as f32;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Boolean masking plan; `true` marks a hidden token.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub mask: Vec<bool>,
    pub ratio: f64,
    pub seed: u64,
}

/// Number of masked tokens, `round(ratio * n)` with ties to even.
pub fn masked_count(n_tokens: usize, ratio: f64) -> usize {
    (ratio * n_tokens as f64).round_ties_even() as usize
}

impl MaskSpec {
    /// All tokens visible.
    pub fn none(n_tokens: usize) -> Self {
        Self {
            mask: vec![false; n_tokens],
            ratio: 0.0,
            seed: 0,
        }
    }

    pub fn from_mask(mask: Vec<bool>) -> Self {
        let ratio = mask.iter().filter(|&&m| m).count() as f64 / mask.len().max(1) as f64;
        Self {
            mask,
            ratio,
            seed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn n_masked(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| !self.mask[i]).collect()
    }
}

pub fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!(
            "mask ratio {ratio} outside [0, 1)"
        )));
    }
    Ok(())
}

/// Uniformly random subset of `round(ratio * n_tokens)` masked tokens.
pub fn sample_mask(n_tokens: usize, ratio: f64, seed: u64) -> Result<MaskSpec> {
    check_ratio(ratio)?;
    let k = masked_count(n_tokens, ratio);
    let mut order: Vec<usize> = (0..n_tokens).collect();
    order.shuffle(&mut seed::rng(seed, &[0x6d61_736b]));
    let mut mask = vec![false; n_tokens];
    for &i in &order[..k] {
        mask[i] = true;
    }
    Ok(MaskSpec { mask, ratio, seed })
}
