use ndarray::Axis;

use crate::data::Crop;
use crate::error::{Error, Result};
use crate::fourier::ReconstructionLoss;
use crate::nn::{Mat, ParamStore, Tape, Var};
use crate::patch::{patchify, MaskSpec, PatchGrid};
use crate::seed;
use crate::vit::{Decoder, Encoder, ForwardCtx, Init, ViTConfig};

use super::{check_crop, Reconstruction};

/// Per-patch normalization used when `norm_pix_loss` is on.
pub fn normalize_patches(tokens: &Mat) -> Mat {
    let mut out = tokens.clone();
    for mut row in out.rows_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let denom = (var + 1e-6).sqrt();
        row.mapv_inplace(|v| (v - mean) / denom);
    }
    out
}

#[derive(Debug, Clone)]
pub struct MaeModel {
    pub config: ViTConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl MaeModel {
    pub fn new(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let token_dim = config.patch_size * config.patch_size * config.in_channels;
        let mut init = Init {
            store: &mut params,
            rng: seed::rng(seed, &[0x696e_6974]),
        };
        let encoder = Encoder::new(&mut init, &config, token_dim);
        let decoder = Decoder::new(&mut init, "decoder", &config, token_dim);
        Ok(Self {
            config,
            params,
            encoder,
            decoder,
        })
    }

    pub fn token_dim(&self) -> usize {
        self.config.patch_size * self.config.patch_size * self.config.in_channels
    }

    pub fn patchify(&self, crop: &Crop) -> Result<PatchGrid> {
        check_crop(&self.config, crop, Some(self.config.in_channels))?;
        patchify(crop, self.config.patch_size)
    }

    /// Reconstruction target for a patch grid.
    pub fn target(&self, grid: &PatchGrid) -> Mat {
        if self.config.norm_pix_loss {
            normalize_patches(&grid.tokens)
        } else {
            grid.tokens.clone()
        }
    }

    /// Encode the tokens at `visible` (in the given order), then decode all
    /// positions. Returns the `N x D_patch` prediction.
    pub fn forward_visible<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        grid: &PatchGrid,
        visible: &[usize],
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let n = grid.n_tokens();
        if n != self.config.n_patches() {
            return Err(Error::Dimension(format!(
                "{n} tokens for a {}-patch model",
                self.config.n_patches()
            )));
        }
        let rows = grid.tokens.select(Axis(0), visible);
        let tokens = self.encoder.embed_tokens(tape, rows, visible);
        let encoded = self.encoder.forward(tape, tokens, ctx);
        self.decoder.forward(tape, encoded, visible, n, ctx)
    }

    pub fn forward_on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        grid: &PatchGrid,
        mask: &MaskSpec,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        if mask.len() != grid.n_tokens() {
            return Err(Error::Shape {
                expected: vec![grid.n_tokens()],
                actual: vec![mask.len()],
            });
        }
        self.forward_visible(tape, grid, &mask.visible_indices(), ctx)
    }

    /// Evaluation-mode forward pass.
    pub fn mae_forward(&self, crop: &Crop, mask: &MaskSpec) -> Result<Reconstruction> {
        let grid = self.patchify(crop)?;
        let mut tape = Tape::new(&self.params);
        let pred = self.forward_on_tape(&mut tape, &grid, mask, &mut ForwardCtx::eval())?;
        Reconstruction::new(
            tape.value(pred).to_owned(),
            self.target(&grid),
            mask.clone(),
            self.config.patch_size,
            self.config.in_channels,
        )
    }

    /// Reconstruction loss of one crop under `mask`, recorded on `tape`.
    pub fn loss_on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        crop: &Crop,
        mask: &MaskSpec,
        loss: ReconstructionLoss,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let grid = self.patchify(crop)?;
        let pred = self.forward_on_tape(tape, &grid, mask, ctx)?;
        let target = self.target(&grid);
        loss.on_tape(
            tape,
            pred,
            &target,
            mask,
            self.config.patch_size,
            self.config.in_channels,
        )
    }

    /// Final-layer encoder states for the unmasked crop, class token first.
    pub fn encode<'a>(&'a self, tape: &mut Tape<'a>, crop: &Crop) -> Result<Var> {
        let grid = self.patchify(crop)?;
        let all: Vec<usize> = (0..grid.n_tokens()).collect();
        let tokens = self.encoder.embed_tokens(tape, grid.tokens.clone(), &all);
        Ok(self.encoder.forward(tape, tokens, &mut ForwardCtx::eval()))
    }

    /// Mean of the final-layer patch embeddings (class token excluded).
    pub fn extract_embedding(&self, crop: &Crop) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let enc = self.encode(&mut tape, crop)?;
        let n = tape.shape(enc).0;
        let patches = tape.rows(enc, 1, n);
        let mean = tape.mean_rows(patches);
        Ok(tape.value(mean).row(0).to_vec())
    }
}
