use crate::data::Crop;
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tape, Var};
use crate::patch::patchify;
use crate::seed;
use crate::vit::{Encoder, ForwardCtx, Init, Linear, ViTConfig};

use super::{check_crop, cross_entropy};

/// ViT classifier trained on perturbation labels; embeds with the class token.
#[derive(Debug, Clone)]
pub struct WslModel {
    pub config: ViTConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub head: Linear,
    pub n_classes: usize,
}

impl WslModel {
    pub fn new(config: ViTConfig, n_classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if n_classes == 0 {
            return Err(Error::InvalidConfig("classifier needs at least one class".into()));
        }
        let mut params = ParamStore::new();
        let token_dim = config.patch_size * config.patch_size * config.in_channels;
        let mut init = Init {
            store: &mut params,
            rng: seed::rng(seed, &[0x696e_6974]),
        };
        let encoder = Encoder::new(&mut init, &config, token_dim);
        let head = Linear::new(&mut init, "head", config.width, n_classes, true);
        Ok(Self {
            config,
            params,
            encoder,
            head,
            n_classes,
        })
    }

    /// `(logits 1 x K, class token 1 x width)` on a tape.
    pub fn forward_on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        crop: &Crop,
        ctx: &mut ForwardCtx,
    ) -> Result<(Var, Var)> {
        check_crop(&self.config, crop, Some(self.config.in_channels))?;
        let grid = patchify(crop, self.config.patch_size)?;
        let all: Vec<usize> = (0..grid.n_tokens()).collect();
        let tokens = self.encoder.embed_tokens(tape, grid.tokens, &all);
        let enc = self.encoder.forward(tape, tokens, ctx);
        let cls = tape.rows(enc, 0, 1);
        Ok((self.head.forward(tape, cls), cls))
    }

    pub fn wsl_forward(&self, crop: &Crop) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new(&self.params);
        let (logits, cls) = self.forward_on_tape(&mut tape, crop, &mut ForwardCtx::eval())?;
        Ok((tape.value(logits).row(0).to_vec(), tape.value(cls).row(0).to_vec()))
    }

    pub fn loss_on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        crop: &Crop,
        label: usize,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        if label >= self.n_classes {
            return Err(Error::LabelOutOfRange {
                label,
                n_classes: self.n_classes,
            });
        }
        let (logits, _) = self.forward_on_tape(tape, crop, ctx)?;
        cross_entropy(tape, logits, label)
    }

    pub fn extract_embedding(&self, crop: &Crop) -> Result<Vec<f64>> {
        Ok(self.wsl_forward(crop)?.1)
    }

    pub fn predict(&self, crop: &Crop) -> Result<usize> {
        let (logits, _) = self.wsl_forward(crop)?;
        Ok(logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0)
    }
}
