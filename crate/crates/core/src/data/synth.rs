//! Synthetic high-content-screening plates with planted gene relationships.
//!
//! Each gene owns a latent phenotype vector. Genes in the same relationship
//! block share a block latent up to small noise, so their images are drawn
//! from nearby distributions. Wells render a field of "cells": Gaussian
//! nuclei and cytoplasm blobs plus an oriented cytoplasmic texture. The
//! latent sets blob radii, texture frequency and the per-channel mixing of
//! the three structure maps. Plates and experiments add smooth additive
//! intensity fields (constant, linear ramps and a low-frequency wave per
//! channel) whose size is `batch_effect_scale`. Negative controls use the
//! zero latent.

use ndarray::{Array2, Array3, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::image::{WellImage, WellMeta, NEG_CONTROL};
use super::relationships::RelationshipDb;
use crate::error::{Error, Result};
use crate::seed;

/// Rendering constants. Defaults are tuned for 128-pixel wells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub image_size: usize,
    pub channels: usize,
    pub cells_per_image: usize,
    /// Baseline nucleus and cytoplasm radii in pixels.
    pub nucleus_radius: f64,
    pub cytoplasm_radius: f64,
    /// Baseline texture frequency in cycles per pixel.
    pub texture_frequency: f64,
    /// Log-scale sensitivity of radii, frequency and mixing to the latent.
    pub phenotype_strength: f64,
    /// Standard deviation of additive pixel noise.
    pub pixel_noise: f64,
    pub background: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            channels: 6,
            cells_per_image: 14,
            nucleus_radius: 3.5,
            cytoplasm_radius: 7.0,
            texture_frequency: 0.12,
            phenotype_strength: 0.35,
            pixel_noise: 0.02,
            background: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_genes: usize,
    pub n_replicates_per_gene: usize,
    /// Plates per experiment.
    pub n_plates: usize,
    pub n_experiments: usize,
    pub n_controls_per_plate: usize,
    /// Gene-index groups that share a phenotype latent.
    pub relationship_blocks: Vec<Vec<usize>>,
    pub phenotype_dim: usize,
    /// Standard deviation of the per-gene deviation from its block latent.
    pub block_noise: f64,
    pub batch_effect_scale: f64,
    pub seed: u64,
    pub render: RenderConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_genes: 48,
            n_replicates_per_gene: 4,
            n_plates: 2,
            n_experiments: 2,
            n_controls_per_plate: 12,
            relationship_blocks: (0..12).map(|b| (4 * b..4 * b + 4).collect()).collect(),
            phenotype_dim: 8,
            block_noise: 0.15,
            batch_effect_scale: 0.3,
            seed: 0,
            render: RenderConfig::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_genes", self.n_genes),
            ("n_replicates_per_gene", self.n_replicates_per_gene),
            ("n_plates", self.n_plates),
            ("n_experiments", self.n_experiments),
            ("phenotype_dim", self.phenotype_dim),
            ("render.image_size", self.render.image_size),
            ("render.channels", self.render.channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if !(self.batch_effect_scale >= 0.0) || !self.batch_effect_scale.is_finite() {
            return Err(Error::InvalidConfig(
                "batch_effect_scale must be a non-negative number".into(),
            ));
        }
        let mut owner = vec![None; self.n_genes];
        for (b, block) in self.relationship_blocks.iter().enumerate() {
            for &g in block {
                let slot = owner.get_mut(g).ok_or_else(|| {
                    Error::InvalidConfig(format!("block {b} names gene {g} >= n_genes"))
                })?;
                if let Some(prev) = slot.replace(b) {
                    return Err(Error::InvalidConfig(format!(
                        "gene {g} appears in blocks {prev} and {b}"
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn gene_id(index: usize) -> String {
    format!("GENE{index:04}")
}

/// Fixed latent-to-image mapping shared by every well of a dataset.
#[derive(Debug, Clone)]
pub struct SynthDesign {
    pub render: RenderConfig,
    /// `channels x 3` baseline weights of (nuclei, cytoplasm, texture).
    base_mix: Array2<f64>,
    /// `(channels * 3) x phenotype_dim` log-mixing loadings.
    mix_loadings: Array2<f64>,
    /// `3 x phenotype_dim` loadings for nucleus radius, cytoplasm radius, frequency.
    shape_loadings: Array2<f64>,
}

/// Ground-truth quantities of one rendered well.
#[derive(Debug, Clone, PartialEq)]
pub struct WellTruth {
    pub nucleus_radius: f64,
    pub cytoplasm_radius: f64,
    pub texture_frequency: f64,
    pub n_cells: usize,
}

/// Additive smooth intensity field: per channel (constant, x-ramp, y-ramp, wave).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchField {
    coeffs: Array2<f64>,
}

impl BatchField {
    pub fn zero(channels: usize) -> Self {
        Self {
            coeffs: Array2::zeros((channels, 4)),
        }
    }

    pub fn random(channels: usize, scale: f64, seed: u64) -> Self {
        let mut rng = seed::rng(seed, &[0x6261_7463]);
        Self {
            coeffs: Array2::from_shape_fn((channels, 4), |_| {
                scale * rng.sample::<f64, _>(StandardNormal)
            }),
        }
    }

    fn add(&self, other: &BatchField) -> BatchField {
        BatchField {
            coeffs: &self.coeffs + &other.coeffs,
        }
    }

    fn value(&self, c: usize, u: f64, v: f64) -> f64 {
        let k = self.coeffs.row(c);
        k[0] + k[1] * (u - 0.5) + k[2] * (v - 0.5)
            + k[3] * (std::f64::consts::TAU * (u + 0.5 * v)).sin()
    }
}

impl SynthDesign {
    pub fn new(render: RenderConfig, phenotype_dim: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed, &[0x6465_7369]);
        let c = render.channels;
        // Channel c leans on structure c mod 3 so every structure is visible.
        let mut base_mix = Array2::from_shape_fn((c, 3), |_| 0.15 + 0.35 * rng.random::<f64>());
        for ch in 0..c {
            base_mix[[ch, ch % 3]] += 1.0;
        }
        let scale = 1.0 / (phenotype_dim as f64).sqrt();
        let mix_loadings = Array2::from_shape_fn((c * 3, phenotype_dim), |_| {
            scale * rng.sample::<f64, _>(StandardNormal)
        });
        let shape_loadings = Array2::from_shape_fn((3, phenotype_dim), |_| {
            scale * rng.sample::<f64, _>(StandardNormal)
        });
        Self {
            render,
            base_mix,
            mix_loadings,
            shape_loadings,
        }
    }

    fn project(row: ndarray::ArrayView1<f64>, z: &[f64]) -> f64 {
        row.iter().zip(z).map(|(a, b)| a * b).sum()
    }

    /// Radii and texture frequency implied by a latent.
    pub fn shape_params(&self, z: &[f64]) -> (f64, f64, f64) {
        let s = self.render.phenotype_strength;
        let rn = self.render.nucleus_radius
            * (s * Self::project(self.shape_loadings.row(0), z)).exp();
        let rc = self.render.cytoplasm_radius
            * (s * Self::project(self.shape_loadings.row(1), z)).exp();
        let f = self.render.texture_frequency
            * (s * Self::project(self.shape_loadings.row(2), z)).exp();
        (rn, rc.max(rn * 1.2), f)
    }

    fn mixing(&self, z: &[f64]) -> Array2<f64> {
        let s = self.render.phenotype_strength;
        let c = self.render.channels;
        Array2::from_shape_fn((c, 3), |(ch, k)| {
            self.base_mix[[ch, k]]
                * (2.0 * s * Self::project(self.mix_loadings.row(ch * 3 + k), z)).exp()
        })
    }

    /// Render one well. `noise_seed` drives cell placement and pixel noise.
    pub fn render(&self, z: &[f64], noise_seed: u64, field: &BatchField) -> (Array3<f32>, WellTruth) {
        let r = &self.render;
        let n = r.image_size;
        let mut rng = seed::rng(noise_seed, &[0x7765_6c6c]);
        let (rn, rc, freq) = self.shape_params(z);
        let jitter = (r.cells_per_image as f64 * 0.25).round() as i64;
        let n_cells = (r.cells_per_image as i64 + rng.random_range(-jitter..=jitter)).max(1) as usize;
        let mut nuclei = Array2::<f64>::zeros((n, n));
        let mut cyto = Array2::<f64>::zeros((n, n));
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let (ct, st) = (theta.cos(), theta.sin());
        for _ in 0..n_cells {
            let cy = rng.random_range(0.0..n as f64);
            let cx = rng.random_range(0.0..n as f64);
            let brightness = 0.7 + 0.6 * rng.random::<f64>();
            splat(&mut nuclei, cy, cx, rn, brightness);
            splat(&mut cyto, cy, cx, rc, brightness);
        }
        let texture = Array2::from_shape_fn((n, n), |(y, x)| {
            let t = (std::f64::consts::TAU * freq * (x as f64 * ct + y as f64 * st) + phase).cos();
            cyto[[y, x]] * 0.5 * (1.0 + t)
        });
        let mix = self.mixing(z);
        let mut pixels = Array3::<f32>::zeros((n, n, r.channels));
        for ch in 0..r.channels {
            let (a, b, t) = (mix[[ch, 0]], mix[[ch, 1]], mix[[ch, 2]]);
            for y in 0..n {
                for x in 0..n {
                    let u = x as f64 / n as f64;
                    let v = y as f64 / n as f64;
                    let noise: f64 = rng.sample(StandardNormal);
                    let value = r.background
                        + a * nuclei[[y, x]]
                        + b * cyto[[y, x]]
                        + t * texture[[y, x]]
                        + field.value(ch, u, v)
                        + r.pixel_noise * noise;
                    pixels[[y, x, ch]] = value.max(0.0) as f32;
                }
            }
        }
        (
            pixels,
            WellTruth {
                nucleus_radius: rn,
                cytoplasm_radius: rc,
                texture_frequency: freq,
                n_cells,
            },
        )
    }
}

fn splat(map: &mut Array2<f64>, cy: f64, cx: f64, radius: f64, amplitude: f64) {
    let n = map.nrows() as i64;
    let reach = (3.5 * radius).ceil() as i64;
    let inv = 1.0 / (2.0 * radius * radius);
    let (y0, x0) = (cy.floor() as i64, cx.floor() as i64);
    for y in (y0 - reach).max(0)..=(y0 + reach).min(n - 1) {
        for x in (x0 - reach).max(0)..=(x0 + reach).min(n - 1) {
            let dy = y as f64 + 0.5 - cy;
            let dx = x as f64 + 0.5 - cx;
            map[[y as usize, x as usize]] += amplitude * (-(dy * dy + dx * dx) * inv).exp();
        }
    }
}

/// Generated wells with their latents and per-well ground truth.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub images: Vec<WellImage>,
    pub relationships: RelationshipDb,
    pub truths: Vec<WellTruth>,
    /// Latent per gene index.
    pub gene_latents: Vec<Vec<f64>>,
}

/// Feature columns emitted by [`SynthDataset::feature_table`], prefixed by category.
pub fn feature_names(channels: usize) -> Vec<String> {
    let mut names = vec![
        "AreaShape_NucleusRadius".to_string(),
        "AreaShape_CytoplasmRadius".to_string(),
        "Neighbors_CellCount".to_string(),
        "RadialDistribution_CytoNucRatio".to_string(),
        "Texture_Frequency".to_string(),
    ];
    for c in 0..channels {
        names.push(format!("Intensity_MeanCh{c}"));
        names.push(format!("Intensity_StdCh{c}"));
    }
    names
}

impl SynthDataset {
    /// CellProfiler-style well-level features (one row per image).
    pub fn feature_table(&self) -> Vec<Vec<f64>> {
        self.images
            .iter()
            .zip(&self.truths)
            .map(|(img, t)| {
                let mut row = vec![
                    t.nucleus_radius,
                    t.cytoplasm_radius,
                    t.n_cells as f64,
                    t.cytoplasm_radius / t.nucleus_radius,
                    t.texture_frequency,
                ];
                for c in 0..img.channels() {
                    let plane = img.pixels.index_axis(ndarray::Axis(2), c);
                    let n = plane.len() as f64;
                    let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / n;
                    let var = plane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
                    row.push(mean);
                    row.push(var.sqrt());
                }
                row
            })
            .collect()
    }
}

fn gene_latents(config: &SynthConfig) -> Vec<Vec<f64>> {
    let k = config.phenotype_dim;
    let mut rng = seed::rng(config.seed, &[0x6c61_7465]);
    let normal = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        (0..k).map(|_| rng.sample(StandardNormal)).collect()
    };
    let mut latents: Vec<Vec<f64>> = (0..config.n_genes).map(|_| normal(&mut rng)).collect();
    for block in &config.relationship_blocks {
        let shared = normal(&mut rng);
        for &g in block {
            let jitter = normal(&mut rng);
            latents[g] = shared
                .iter()
                .zip(&jitter)
                .map(|(s, j)| s + config.block_noise * j)
                .collect();
        }
    }
    latents
}

/// Full generator: images, planted relationships and ground truth.
pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let design = SynthDesign::new(config.render.clone(), config.phenotype_dim, config.seed);
    let latents = gene_latents(config);

    let mut relationships = RelationshipDb::new("synthetic");
    for block in &config.relationship_blocks {
        for (i, &a) in block.iter().enumerate() {
            for &b in &block[i + 1..] {
                relationships.insert(gene_id(a), gene_id(b))?;
            }
        }
    }

    // Genes are spread over experiments by a seeded shuffle; replicates of a
    // gene stay inside its experiment and cycle over that experiment's plates.
    let mut order: Vec<usize> = (0..config.n_genes).collect();
    {
        use rand::seq::SliceRandom;
        let mut rng = seed::rng(config.seed, &[0x6c61_796f]);
        order.shuffle(&mut rng);
    }
    let channels = config.render.channels;
    let channel_names: Vec<String> = (0..channels).map(|c| format!("ch{c}")).collect();
    let zero = vec![0.0; config.phenotype_dim];

    let mut plans: Vec<(WellMeta, Option<usize>, BatchField)> = Vec::new();
    for e in 0..config.n_experiments {
        let exp_field = BatchField::random(
            channels,
            config.batch_effect_scale,
            seed::derive(config.seed, &[0x6578_70, e as u64]),
        );
        let genes: Vec<usize> = order
            .iter()
            .enumerate()
            .filter(|(slot, _)| slot % config.n_experiments == e)
            .map(|(_, &g)| g)
            .collect();
        let mut per_plate: Vec<Vec<Option<usize>>> = vec![Vec::new(); config.n_plates];
        for &g in &genes {
            for r in 0..config.n_replicates_per_gene {
                per_plate[r % config.n_plates].push(Some(g));
            }
        }
        for (p, wells) in per_plate.iter_mut().enumerate() {
            wells.extend(std::iter::repeat_n(None, config.n_controls_per_plate));
            let plate_field = BatchField::random(
                channels,
                config.batch_effect_scale,
                seed::derive(config.seed, &[0x706c_61, e as u64, p as u64]),
            );
            let field = exp_field.add(&plate_field);
            for (w, gene) in wells.iter().enumerate() {
                let meta = WellMeta {
                    well_id: format!("E{e:02}P{p:02}W{w:04}"),
                    plate_id: format!("E{e:02}P{p:02}"),
                    experiment_id: format!("E{e:02}"),
                    perturbation_id: gene.map_or_else(|| NEG_CONTROL.to_string(), gene_id),
                };
                plans.push((meta, *gene, field.clone()));
            }
        }
    }

    let rendered: Vec<(Array3<f32>, WellTruth)> = {
        use rayon::prelude::*;
        plans
            .par_iter()
            .enumerate()
            .map(|(i, (_, gene, field))| {
                let z = gene.map_or(zero.as_slice(), |g| latents[g].as_slice());
                design.render(z, seed::derive(config.seed, &[0x7769, i as u64]), field)
            })
            .collect()
    };

    let mut images = Vec::with_capacity(plans.len());
    let mut truths = Vec::with_capacity(plans.len());
    for ((meta, _, _), (pixels, truth)) in plans.into_iter().zip(rendered) {
        images.push(WellImage::new(pixels, channel_names.clone(), meta)?);
        truths.push(truth);
    }
    Ok(SynthDataset {
        images,
        relationships,
        truths,
        gene_latents: latents,
    })
}

/// Images plus the planted relationship database.
pub fn generate_synthetic_dataset(config: &SynthConfig) -> Result<(Vec<WellImage>, RelationshipDb)> {
    let ds = generate(config)?;
    Ok((ds.images, ds.relationships))
}

/// Pearson correlation of two equally sized images, used by the generator tests.
pub fn pixel_correlation(a: &Array3<f32>, b: &Array3<f32>) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    Zip::from(a).and(b).for_each(|&x, &y| {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    });
    sab / (saa * sbb).sqrt().max(f64::MIN_POSITIVE)
}
