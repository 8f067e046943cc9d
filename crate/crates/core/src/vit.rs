//! Transformer building blocks shared by the MAE, CA-MAE and WSL models.

use ndarray::Axis;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Mat, ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    S,
    B,
    L,
    TinyTest,
}

/// Encoder/decoder architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub variant: Variant,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub mlp_ratio: f64,
    pub decoder_depth: usize,
    pub decoder_width: usize,
    pub decoder_heads: usize,
    pub stochastic_depth_rate: f64,
    /// Crop side length the positional tables are built for.
    pub crop_size: usize,
    /// Input channels (standard MAE / WSL); CA-MAE: decoder count.
    pub in_channels: usize,
    #[serde(default)]
    pub parallel_blocks: bool,
    #[serde(default)]
    pub qk_norm: bool,
    #[serde(default = "default_true")]
    pub qk_bias: bool,
    /// Initial LayerScale value; `None` disables LayerScale.
    #[serde(default)]
    pub layer_scale: Option<f64>,
    /// Normalize each target patch by its own mean and variance.
    #[serde(default)]
    pub norm_pix_loss: bool,
}

fn default_true() -> bool {
    true
}

impl ViTConfig {
    /// Depth 2, width 64, 4 heads, 8-pixel patches on 64-pixel crops.
    pub fn tiny_test(in_channels: usize) -> Self {
        Self {
            variant: Variant::TinyTest,
            depth: 2,
            width: 64,
            heads: 4,
            patch_size: 8,
            mlp_ratio: 4.0,
            decoder_depth: 1,
            decoder_width: 32,
            decoder_heads: 4,
            stochastic_depth_rate: 0.0,
            crop_size: 64,
            in_channels,
            parallel_blocks: false,
            qk_norm: false,
            qk_bias: true,
            layer_scale: None,
            norm_pix_loss: false,
        }
    }

    /// ViT-S/B/L with an 8-block, 512-wide decoder and the large-scale
    /// stability options switched on.
    pub fn preset(variant: Variant, patch_size: usize, in_channels: usize) -> Self {
        let (depth, width, heads, sd) = match variant {
            Variant::S => (12, 384, 6, 0.1),
            Variant::B => (12, 768, 12, 0.1),
            Variant::L => (24, 1024, 16, 0.3),
            Variant::TinyTest => return Self::tiny_test(in_channels),
        };
        Self {
            variant,
            depth,
            width,
            heads,
            patch_size,
            mlp_ratio: 4.0,
            decoder_depth: 8,
            decoder_width: 512,
            decoder_heads: 16,
            stochastic_depth_rate: sd,
            crop_size: 256,
            in_channels,
            parallel_blocks: true,
            qk_norm: true,
            qk_bias: false,
            layer_scale: Some(0.1),
            norm_pix_loss: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        if self.decoder_heads == 0 || self.decoder_width % self.decoder_heads != 0 {
            return bad(format!(
                "decoder width {} not divisible by heads {}",
                self.decoder_width, self.decoder_heads
            ));
        }
        if self.width % 4 != 0 || self.decoder_width % 4 != 0 {
            return bad("widths must be multiples of 4 for 2-D sine-cosine tables".into());
        }
        if self.variant != Variant::TinyTest && !matches!(self.patch_size, 8 | 16) {
            return bad(format!("patch size {} for a paper-scale variant", self.patch_size));
        }
        crate::patch::check_divisible(self.crop_size, self.patch_size)?;
        if self.in_channels == 0 || self.depth == 0 {
            return bad("depth and channel count must be positive".into());
        }
        if !(0.0..1.0).contains(&self.stochastic_depth_rate) {
            return bad("stochastic_depth_rate outside [0, 1)".into());
        }
        Ok(())
    }

    pub fn grid_size(&self) -> usize {
        self.crop_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid_size() * self.grid_size()
    }

    pub fn mlp_hidden(&self, width: usize) -> usize {
        (width as f64 * self.mlp_ratio).round() as usize
    }
}

/// 1-D sine-cosine table for integer positions, `dim` even.
fn sincos_1d(dim: usize, positions: &[f64]) -> Mat {
    let half = dim / 2;
    Mat::from_shape_fn((positions.len(), dim), |(p, d)| {
        let i = d % half;
        let omega = 1.0 / 10000f64.powf(i as f64 / half as f64);
        let arg = positions[p] * omega;
        if d < half {
            arg.sin()
        } else {
            arg.cos()
        }
    })
}

/// Fixed 2-D sine-cosine positional table for a `grid x grid` patch grid,
/// rows in row-major patch order. The first half of each row encodes the
/// column coordinate, the second half the row coordinate.
pub fn sincos_2d(dim: usize, grid: usize) -> Mat {
    let cols: Vec<f64> = (0..grid * grid).map(|k| (k % grid) as f64).collect();
    let rows: Vec<f64> = (0..grid * grid).map(|k| (k / grid) as f64).collect();
    let a = sincos_1d(dim / 2, &cols);
    let b = sincos_1d(dim / 2, &rows);
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("sincos concat")
}

/// Parameter initialization, driven by a single seeded stream.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: ChaCha8Rng,
}

impl Init<'_> {
    pub fn xavier(&mut self, name: &str, fan_in: usize, fan_out: usize) -> ParamId {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let rng = &mut self.rng;
        let m = Mat::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-a..a) as f32 as f64);
        self.store.add(name, m, true)
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("normal std");
        let rng = &mut self.rng;
        let m = Mat::from_shape_fn((rows, cols), |_| dist.sample(rng) as f32 as f64);
        self.store.add(name, m, false)
    }

    pub fn constant(&mut self, name: &str, cols: usize, value: f64) -> ParamId {
        self.store.add(name, Mat::from_elem((1, cols), value as f32 as f64), false)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let weight = init.xavier(&format!("{name}.weight"), fan_in, fan_out);
        let bias = bias.then(|| init.constant(&format!("{name}.bias"), fan_out, 0.0));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(init: &mut Init, name: &str, width: usize) -> Self {
        Self {
            gamma: init.constant(&format!("{name}.gamma"), width, 1.0),
            beta: init.constant(&format!("{name}.beta"), width, 0.0),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, groups: usize) -> Var {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b, groups)
    }
}

/// Training/evaluation switch plus the randomness stochastic depth needs.
pub struct ForwardCtx {
    pub train: bool,
    rng: Option<ChaCha8Rng>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self {
            train: false,
            rng: None,
        }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            train: true,
            rng: Some(crate::seed::rng(seed, &[0x6472_6f70])),
        }
    }

    /// `x + branch`, with the branch dropped per sample at rate `rate` in training.
    fn residual(&mut self, tape: &mut Tape, x: Var, branch: Var, rate: f64) -> Var {
        if self.train && rate > 0.0 {
            let rng = self.rng.as_mut().expect("training context has an rng");
            if rng.random::<f64>() < rate {
                return x;
            }
            let b = tape.scale(branch, 1.0 / (1.0 - rate));
            return tape.add(x, b);
        }
        tape.add(x, branch)
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    norm1: Norm,
    norm2: Option<Norm>,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    q_norm: Option<Norm>,
    k_norm: Option<Norm>,
    fc1: Linear,
    fc2: Linear,
    ls1: Option<ParamId>,
    ls2: Option<ParamId>,
    heads: usize,
    drop_rate: f64,
}

pub struct BlockSpec {
    pub width: usize,
    pub heads: usize,
    pub hidden: usize,
    pub parallel: bool,
    pub qk_norm: bool,
    pub qk_bias: bool,
    pub layer_scale: Option<f64>,
    pub drop_rate: f64,
}

impl Block {
    pub fn new(init: &mut Init, name: &str, spec: &BlockSpec) -> Self {
        let w = spec.width;
        let hd = w / spec.heads;
        Self {
            norm1: Norm::new(init, &format!("{name}.norm1"), w),
            norm2: (!spec.parallel).then(|| Norm::new(init, &format!("{name}.norm2"), w)),
            q: Linear::new(init, &format!("{name}.attn.q"), w, w, spec.qk_bias),
            k: Linear::new(init, &format!("{name}.attn.k"), w, w, spec.qk_bias),
            v: Linear::new(init, &format!("{name}.attn.v"), w, w, true),
            proj: Linear::new(init, &format!("{name}.attn.proj"), w, w, true),
            q_norm: spec.qk_norm.then(|| Norm::new(init, &format!("{name}.attn.q_norm"), hd)),
            k_norm: spec.qk_norm.then(|| Norm::new(init, &format!("{name}.attn.k_norm"), hd)),
            fc1: Linear::new(init, &format!("{name}.mlp.fc1"), w, spec.hidden, true),
            fc2: Linear::new(init, &format!("{name}.mlp.fc2"), spec.hidden, w, true),
            ls1: spec.layer_scale.map(|v| init.constant(&format!("{name}.ls1"), w, v)),
            ls2: spec.layer_scale.map(|v| init.constant(&format!("{name}.ls2"), w, v)),
            heads: spec.heads,
            drop_rate: spec.drop_rate,
        }
    }

    fn attn(&self, tape: &mut Tape, y: Var) -> Var {
        let mut q = self.q.forward(tape, y);
        let mut k = self.k.forward(tape, y);
        let v = self.v.forward(tape, y);
        if let (Some(qn), Some(kn)) = (&self.q_norm, &self.k_norm) {
            q = qn.forward(tape, q, self.heads);
            k = kn.forward(tape, k, self.heads);
        }
        let o = tape.attention(q, k, v, self.heads);
        let o = self.proj.forward(tape, o);
        self.scaled(tape, o, self.ls1)
    }

    fn mlp(&self, tape: &mut Tape, y: Var) -> Var {
        let h = self.fc1.forward(tape, y);
        let h = tape.gelu(h);
        let o = self.fc2.forward(tape, h);
        self.scaled(tape, o, self.ls2)
    }

    fn scaled(&self, tape: &mut Tape, x: Var, ls: Option<ParamId>) -> Var {
        match ls {
            Some(id) => {
                let s = tape.param(id);
                tape.mul_row(x, s)
            }
            None => x,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, ctx: &mut ForwardCtx) -> Var {
        match &self.norm2 {
            None => {
                let y = self.norm1.forward(tape, x, 1);
                let a = self.attn(tape, y);
                let m = self.mlp(tape, y);
                let x = ctx.residual(tape, x, a, self.drop_rate);
                ctx.residual(tape, x, m, self.drop_rate)
            }
            Some(norm2) => {
                let y = self.norm1.forward(tape, x, 1);
                let a = self.attn(tape, y);
                let x = ctx.residual(tape, x, a, self.drop_rate);
                let y = norm2.forward(tape, x, 1);
                let m = self.mlp(tape, y);
                ctx.residual(tape, x, m, self.drop_rate)
            }
        }
    }
}

fn block_stack(init: &mut Init, name: &str, cfg: &ViTConfig, decoder: bool) -> Vec<Block> {
    let (depth, width, heads) = if decoder {
        (cfg.decoder_depth, cfg.decoder_width, cfg.decoder_heads)
    } else {
        (cfg.depth, cfg.width, cfg.heads)
    };
    (0..depth)
        .map(|i| {
            // Linearly increasing drop rate over encoder depth; decoders never drop.
            let drop_rate = if decoder || depth < 2 {
                if decoder { 0.0 } else { cfg.stochastic_depth_rate }
            } else {
                cfg.stochastic_depth_rate * i as f64 / (depth - 1) as f64
            };
            let spec = BlockSpec {
                width,
                heads,
                hidden: cfg.mlp_hidden(width),
                parallel: cfg.parallel_blocks,
                qk_norm: cfg.qk_norm,
                qk_bias: cfg.qk_bias,
                layer_scale: cfg.layer_scale,
                drop_rate,
            };
            Block::new(init, &format!("{name}.{i}"), &spec)
        })
        .collect()
}

/// ViT encoder: token embedding, class token, blocks and final norm.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub embed: Linear,
    pub cls_token: ParamId,
    pub blocks: Vec<Block>,
    pub norm: Norm,
    pos: Mat,
}

impl Encoder {
    pub fn new(init: &mut Init, cfg: &ViTConfig, token_dim: usize) -> Self {
        Self {
            embed: Linear::new(init, "encoder.embed", token_dim, cfg.width, true),
            cls_token: init.normal("encoder.cls_token", 1, cfg.width, 0.02),
            blocks: block_stack(init, "encoder.blocks", cfg, false),
            norm: Norm::new(init, "encoder.norm", cfg.width),
            pos: sincos_2d(cfg.width, cfg.grid_size()),
        }
    }

    /// Embed raw token rows and add the positional rows of `positions`.
    pub fn embed_tokens(&self, tape: &mut Tape, rows: Mat, positions: &[usize]) -> Var {
        assert_eq!(rows.nrows(), positions.len());
        let x = tape.input(rows);
        let x = self.embed.forward(tape, x);
        let pos = tape.input(self.pos.select(Axis(0), positions));
        tape.add(x, pos)
    }

    /// Prepend the class token and run the blocks; output row 0 is the class token.
    pub fn forward(&self, tape: &mut Tape, tokens: Var, ctx: &mut ForwardCtx) -> Var {
        let cls = tape.param(self.cls_token);
        let n = tape.shape(tokens).0;
        let mut picks = vec![(cls, 0)];
        picks.extend((0..n).map(|r| (tokens, r)));
        let mut x = tape.gather(picks);
        for block in &self.blocks {
            x = block.forward(tape, x, ctx);
        }
        self.norm.forward(tape, x, 1)
    }
}

/// MAE decoder: fills masked positions with a learned token and predicts patches.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub embed: Linear,
    pub mask_token: ParamId,
    pub blocks: Vec<Block>,
    pub norm: Norm,
    pub pred: Linear,
    pos: Mat,
}

impl Decoder {
    pub fn new(init: &mut Init, name: &str, cfg: &ViTConfig, out_dim: usize) -> Self {
        let dw = cfg.decoder_width;
        let grid = sincos_2d(dw, cfg.grid_size());
        let pos = ndarray::concatenate(Axis(0), &[Mat::zeros((1, dw)).view(), grid.view()])
            .expect("decoder pos");
        Self {
            embed: Linear::new(init, &format!("{name}.embed"), cfg.width, dw, true),
            mask_token: init.normal(&format!("{name}.mask_token"), 1, dw, 0.02),
            blocks: block_stack(init, &format!("{name}.blocks"), cfg, true),
            norm: Norm::new(init, &format!("{name}.norm"), dw),
            pred: Linear::new(init, &format!("{name}.pred"), dw, out_dim, true),
            pos,
        }
    }

    /// `encoded` is `(1 + n_visible) x width` (class token first) and
    /// `visible[k]` is the grid position of encoded row `1 + k`.
    /// Returns `n_tokens x out_dim` predictions in grid order.
    pub fn forward(
        &self,
        tape: &mut Tape,
        encoded: Var,
        visible: &[usize],
        n_tokens: usize,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        if tape.shape(encoded).0 != visible.len() + 1 {
            return Err(Error::Dimension(format!(
                "{} encoded rows for {} visible tokens",
                tape.shape(encoded).0,
                visible.len()
            )));
        }
        let x = self.embed.forward(tape, encoded);
        let mask = tape.param(self.mask_token);
        let mut slot = vec![None; n_tokens];
        for (k, &p) in visible.iter().enumerate() {
            *slot.get_mut(p).ok_or_else(|| Error::Dimension(format!("position {p} >= {n_tokens}")))? =
                Some(k);
        }
        let mut picks = vec![(x, 0)];
        picks.extend(slot.iter().map(|s| match s {
            Some(k) => (x, 1 + k),
            None => (mask, 0),
        }));
        let seq = tape.gather(picks);
        let pos = tape.input(self.pos.slice(ndarray::s![..n_tokens + 1, ..]).to_owned());
        let mut h = tape.add(seq, pos);
        for block in &self.blocks {
            h = block.forward(tape, h, ctx);
        }
        let h = self.norm.forward(tape, h, 1);
        let out = self.pred.forward(tape, h);
        Ok(tape.rows(out, 1, n_tokens + 1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sincos_table_shape_and_range() {
        let t = sincos_2d(16, 4);
        assert_eq!(t.dim(), (16, 16));
        assert!(t.iter().all(|v| v.abs() <= 1.0));
        // Position 0 encodes sin(0) = 0 and cos(0) = 1.
        assert_eq!(t[[0, 0]], 0.0);
        assert_eq!(t[[0, 4]], 1.0);
        // Distinct positions get distinct rows.
        assert_ne!(t.row(1), t.row(4));
    }

    #[test]
    fn presets_validate() {
        for v in [Variant::S, Variant::B, Variant::L] {
            for p in [8, 16] {
                ViTConfig::preset(v, p, 6).validate().unwrap();
            }
        }
        ViTConfig::tiny_test(3).validate().unwrap();
        let mut bad = ViTConfig::preset(Variant::B, 12, 6);
        assert!(bad.validate().is_err());
        bad = ViTConfig::tiny_test(3);
        bad.heads = 3;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn preset_widths() {
        assert_eq!(ViTConfig::preset(Variant::S, 16, 6).width, 384);
        assert_eq!(ViTConfig::preset(Variant::B, 16, 6).width, 768);
        assert_eq!(ViTConfig::preset(Variant::L, 8, 6).width, 1024);
    }
}
