//! Channel-agnostic MAE: every channel is tokenized separately by one shared
//! projection, masked independently, encoded jointly and reconstructed by
//! its own decoder.

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::data::Crop;
use crate::error::{Error, Result};
use crate::fourier::ReconstructionLoss;
use crate::mae::{normalize_patches, Reconstruction};
use crate::nn::{Mat, ParamStore, Tape, Var};
use crate::patch::{check_ratio, patchify_pixels, sample_mask, MaskSpec};
use crate::seed;
use crate::vit::{Decoder, Encoder, ForwardCtx, Init, ViTConfig};

/// Raw single-channel patch tokens, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelTokenBatch {
    /// `(C*N) x P^2`.
    pub tokens: Mat,
    pub channel_of_token: Vec<usize>,
    pub n_channels: usize,
    pub n_patches: usize,
}

impl ChannelTokenBatch {
    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    /// The `N x P^2` block of channel `c`.
    pub fn channel(&self, c: usize) -> Mat {
        let n = self.n_patches;
        self.tokens.slice(ndarray::s![c * n..(c + 1) * n, ..]).to_owned()
    }
}

pub fn tokenize_channels(crop: &Crop, patch_size: usize) -> Result<ChannelTokenBatch> {
    let c = crop.channels();
    let mut blocks = Vec::with_capacity(c);
    for ch in 0..c {
        let plane = crop.pixels.slice(ndarray::s![.., .., ch..ch + 1]);
        blocks.push(patchify_pixels(plane, patch_size)?.tokens);
    }
    let n = blocks[0].nrows();
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    let tokens = ndarray::concatenate(Axis(0), &views).expect("equal token widths");
    Ok(ChannelTokenBatch {
        tokens,
        channel_of_token: (0..c).flat_map(|ch| std::iter::repeat_n(ch, n)).collect(),
        n_channels: c,
        n_patches: n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMaskSpec {
    pub masks: Vec<MaskSpec>,
    pub ratio: f64,
}

impl ChannelMaskSpec {
    pub fn none(channels: usize, n: usize) -> Self {
        Self {
            masks: vec![MaskSpec::none(n); channels],
            ratio: 0.0,
        }
    }
}

/// One independent mask per channel: channel `c` draws from `(seed, c)`.
pub fn sample_channel_masks(
    channels: usize,
    n: usize,
    ratio: f64,
    seed: u64,
) -> Result<ChannelMaskSpec> {
    check_ratio(ratio)?;
    let masks = (0..channels)
        .map(|c| sample_mask(n, ratio, seed::derive(seed, &[c as u64])))
        .collect::<Result<_>>()?;
    Ok(ChannelMaskSpec { masks, ratio })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EmbedMode {
    ClassToken,
    MeanAll,
    ConcatChannelMeans,
}

impl std::str::FromStr for EmbedMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "class_token" | "cls" => Ok(Self::ClassToken),
            "mean_all" | "mean" => Ok(Self::MeanAll),
            "concat_channel_means" | "concat" => Ok(Self::ConcatChannelMeans),
            other => Err(Error::InvalidArgument(format!(
                "unknown embed mode {other:?} (class_token, mean_all, concat_channel_means)"
            ))),
        }
    }
}

/// Encoder output with the bookkeeping needed to route tokens to decoders.
struct Encoded {
    states: Var,
    /// For each channel, the grid positions of its visible tokens, in the
    /// order they appear in `states` after the class token.
    visible: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct CaMaeModel {
    /// `in_channels` is the number of per-channel decoders.
    pub config: ViTConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub decoders: Vec<Decoder>,
}

impl CaMaeModel {
    pub fn new(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let p2 = config.patch_size * config.patch_size;
        let mut init = Init {
            store: &mut params,
            rng: seed::rng(seed, &[0x696e_6974]),
        };
        let encoder = Encoder::new(&mut init, &config, p2);
        let decoders = (0..config.in_channels)
            .map(|c| Decoder::new(&mut init, &format!("decoder.{c}"), &config, p2))
            .collect();
        Ok(Self {
            config,
            params,
            encoder,
            decoders,
        })
    }

    pub fn n_decoders(&self) -> usize {
        self.decoders.len()
    }

    pub fn tokenize(&self, crop: &Crop) -> Result<ChannelTokenBatch> {
        crate::mae::check_crop(&self.config, crop, None)?;
        tokenize_channels(crop, self.config.patch_size)
    }

    fn encode<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        batch: &ChannelTokenBatch,
        masks: &ChannelMaskSpec,
        ctx: &mut ForwardCtx,
    ) -> Result<Encoded> {
        let n = batch.n_patches;
        if masks.masks.len() != batch.n_channels || masks.masks.iter().any(|m| m.len() != n) {
            return Err(Error::Shape {
                expected: vec![batch.n_channels, n],
                actual: vec![masks.masks.len(), masks.masks.first().map_or(0, |m| m.len())],
            });
        }
        let visible: Vec<Vec<usize>> = masks.masks.iter().map(|m| m.visible_indices()).collect();
        let rows: Vec<usize> = visible
            .iter()
            .enumerate()
            .flat_map(|(c, v)| v.iter().map(move |&p| c * n + p))
            .collect();
        let positions: Vec<usize> = visible.iter().flatten().copied().collect();
        let tokens = self
            .encoder
            .embed_tokens(tape, batch.tokens.select(Axis(0), &rows), &positions);
        let states = self.encoder.forward(tape, tokens, ctx);
        Ok(Encoded { states, visible })
    }

    /// Per-channel predictions `N x P^2`, one var per channel.
    fn decode<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        enc: &Encoded,
        n: usize,
        ctx: &mut ForwardCtx,
    ) -> Result<Vec<Var>> {
        let c = enc.visible.len();
        if c > self.decoders.len() {
            return Err(Error::ChannelMismatch {
                expected: self.decoders.len(),
                actual: c,
            });
        }
        let mut offset = 1;
        let mut out = Vec::with_capacity(c);
        for (ch, vis) in enc.visible.iter().enumerate() {
            // Decoder `ch` sees the class token plus the encoded tokens of its own channel.
            let mut picks = vec![(enc.states, 0)];
            picks.extend((offset..offset + vis.len()).map(|r| (enc.states, r)));
            offset += vis.len();
            let own = tape.gather(picks);
            out.push(self.decoders[ch].forward(tape, own, vis, n, ctx)?);
        }
        Ok(out)
    }

    fn targets(&self, batch: &ChannelTokenBatch) -> Vec<Mat> {
        (0..batch.n_channels)
            .map(|c| {
                let t = batch.channel(c);
                if self.config.norm_pix_loss {
                    normalize_patches(&t)
                } else {
                    t
                }
            })
            .collect()
    }

    /// Evaluation-mode forward pass; one reconstruction per channel.
    pub fn ca_forward(&self, crop: &Crop, masks: &ChannelMaskSpec) -> Result<Vec<Reconstruction>> {
        let batch = self.tokenize(crop)?;
        let mut tape = Tape::new(&self.params);
        let mut ctx = ForwardCtx::eval();
        let enc = self.encode(&mut tape, &batch, masks, &mut ctx)?;
        let preds = self.decode(&mut tape, &enc, batch.n_patches, &mut ctx)?;
        preds
            .into_iter()
            .zip(self.targets(&batch))
            .zip(&masks.masks)
            .map(|((p, t), m)| {
                Reconstruction::new(tape.value(p).to_owned(), t, m.clone(), self.config.patch_size, 1)
            })
            .collect()
    }

    /// Mean over `channels` of the per-channel reconstruction losses.
    pub fn loss_on_tape_channels<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        crop: &Crop,
        masks: &ChannelMaskSpec,
        loss: ReconstructionLoss,
        channels: &[usize],
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        if channels.is_empty() {
            return Err(Error::InvalidArgument("no channels selected for the loss".into()));
        }
        let batch = self.tokenize(crop)?;
        let enc = self.encode(tape, &batch, masks, ctx)?;
        let preds = self.decode(tape, &enc, batch.n_patches, ctx)?;
        let targets = self.targets(&batch);
        let w = 1.0 / channels.len() as f64;
        let mut terms = Vec::with_capacity(channels.len());
        for &c in channels {
            let pred = *preds.get(c).ok_or_else(|| {
                Error::InvalidArgument(format!("channel {c} of {}", preds.len()))
            })?;
            let l = loss.on_tape(tape, pred, &targets[c], &masks.masks[c], self.config.patch_size, 1)?;
            terms.push((l, w));
        }
        Ok(tape.weighted_sum(terms))
    }

    pub fn loss_on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        crop: &Crop,
        masks: &ChannelMaskSpec,
        loss: ReconstructionLoss,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let all: Vec<usize> = (0..crop.channels()).collect();
        self.loss_on_tape_channels(tape, crop, masks, loss, &all, ctx)
    }

    /// Embed a crop with any number of channels; decoders are unused.
    pub fn ca_embed(&self, crop: &Crop, mode: EmbedMode) -> Result<Vec<f64>> {
        let batch = self.tokenize(crop)?;
        let masks = ChannelMaskSpec::none(batch.n_channels, batch.n_patches);
        let mut tape = Tape::new(&self.params);
        let enc = self.encode(&mut tape, &batch, &masks, &mut ForwardCtx::eval())?;
        let states = tape.value(enc.states);
        let n = batch.n_patches;
        let mean = |rows: std::ops::Range<usize>| -> Vec<f64> {
            states
                .slice(ndarray::s![rows, ..])
                .mean_axis(Axis(0))
                .expect("non-empty rows")
                .to_vec()
        };
        Ok(match mode {
            EmbedMode::ClassToken => states.row(0).to_vec(),
            EmbedMode::MeanAll => mean(1..1 + batch.len()),
            EmbedMode::ConcatChannelMeans => (0..batch.n_channels)
                .flat_map(|c| mean(1 + c * n..1 + (c + 1) * n))
                .collect(),
        })
    }
}
