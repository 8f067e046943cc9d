//! Frequency-domain reconstruction loss.
//!
//! Each masked patch is split into its `C` spatial planes; every `P x P`
//! plane goes through an unnormalized forward 2-D DFT
//! (`Z[u,v] = sum_ij x[i,j] exp(-2 pi i (u i + v j) / P)`). The loss is the
//! mean absolute difference of the magnitude spectra, averaged over bins and
//! channels and then over masked patches. At zero-magnitude bins the
//! subgradient of `|z|` is taken as zero.

use std::sync::Arc;

use ndarray::{Array3, ArrayView2, ArrayView3};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mae::loss::{loss_mae, masked_mse, masked_rows, Reconstruction};
use crate::nn::{CustomOp, Mat, Tape, Var};
use crate::patch::MaskSpec;

/// Weight of the Fourier term in the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    alpha: f64,
}

impl LossWeights {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidArgument(format!("alpha {alpha} outside (0, 1)")));
        }
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.01 }
    }
}

/// Forward and inverse 2-D transforms for one patch size.
pub(crate) struct PatchFft {
    p: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl PatchFft {
    pub(crate) fn new(p: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            p,
            fwd: planner.plan_fft_forward(p),
            inv: planner.plan_fft_inverse(p),
        }
    }

    fn transpose(&self, buf: &mut [Complex64]) {
        let p = self.p;
        for i in 0..p {
            for j in i + 1..p {
                buf.swap(i * p + j, j * p + i);
            }
        }
    }

    fn run(&self, fft: &Arc<dyn Fft<f64>>, buf: &mut [Complex64]) {
        // Rows, then columns via transposition.
        fft.process(buf);
        self.transpose(buf);
        fft.process(buf);
        self.transpose(buf);
    }

    /// Unnormalized forward DFT of a row-major `P x P` plane.
    pub(crate) fn forward(&self, buf: &mut [Complex64]) {
        self.run(&self.fwd, buf)
    }

    /// Unnormalized inverse DFT (`exp(+2 pi i ...)`, no `1/P^2`).
    pub(crate) fn inverse(&self, buf: &mut [Complex64]) {
        self.run(&self.inv, buf)
    }

    /// Spectrum of plane `ch` of a flattened `(i, j, c)` patch row.
    fn plane_spectrum(&self, row: &[f64], ch: usize, channels: usize) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = (0..self.p * self.p)
            .map(|k| Complex64::new(row[k * channels + ch], 0.0))
            .collect();
        self.forward(&mut buf);
        buf
    }
}

/// Per-channel magnitude of the unnormalized 2-D DFT of a `P x P x C` patch.
pub fn fft_magnitude(patch: ArrayView3<f64>) -> Result<Array3<f64>> {
    let (h, w, c) = patch.dim();
    if h != w || h == 0 {
        return Err(Error::Dimension(format!("patch must be square, got {h}x{w}")));
    }
    let plan = PatchFft::new(h);
    let mut out = Array3::zeros((h, w, c));
    for ch in 0..c {
        let mut buf: Vec<Complex64> = (0..h * w)
            .map(|k| Complex64::new(patch[[k / w, k % w, ch]], 0.0))
            .collect();
        plan.forward(&mut buf);
        for (k, z) in buf.iter().enumerate() {
            out[[k / w, k % w, ch]] = z.norm();
        }
    }
    Ok(out)
}

fn check_geometry(cols: usize, patch_size: usize, channels: usize) -> Result<()> {
    if patch_size * patch_size * channels != cols || patch_size == 0 {
        return Err(Error::Dimension(format!(
            "patch rows of width {cols} do not unflatten to {patch_size}x{patch_size}x{channels}"
        )));
    }
    Ok(())
}

/// Loss value plus, per masked row and channel, `sign(|Z'| - |Z|) * Z' / |Z'|`.
fn fourier_forward(
    pred: ArrayView2<f64>,
    target: ArrayView2<f64>,
    rows: &[usize],
    patch_size: usize,
    channels: usize,
) -> (f64, Vec<Vec<Complex64>>) {
    let plan = PatchFft::new(patch_size);
    let bins = patch_size * patch_size;
    let mut total = 0.0;
    let mut phases = Vec::with_capacity(rows.len() * channels);
    for &r in rows {
        let pr = pred.row(r).to_vec();
        let tr = target.row(r).to_vec();
        let mut patch_sum = 0.0;
        for ch in 0..channels {
            let zp = plan.plane_spectrum(&pr, ch, channels);
            let zt = plan.plane_spectrum(&tr, ch, channels);
            let mut h = Vec::with_capacity(bins);
            for (a, b) in zp.iter().zip(&zt) {
                let (ma, mb) = (a.norm(), b.norm());
                patch_sum += (ma - mb).abs();
                let sign = if ma > mb {
                    1.0
                } else if ma < mb {
                    -1.0
                } else {
                    0.0
                };
                h.push(if ma > 0.0 { a * (sign / ma) } else { Complex64::new(0.0, 0.0) });
            }
            phases.push(h);
        }
        total += patch_sum / (bins * channels) as f64;
    }
    (total / rows.len() as f64, phases)
}

/// Mean over masked patches of the L1 distance between magnitude spectra.
pub fn loss_ft(recon: &Reconstruction) -> Result<f64> {
    recon.check()?;
    check_geometry(recon.target_patches.ncols(), recon.patch_size, recon.channels)?;
    let rows = masked_rows(&recon.mask)?;
    Ok(fourier_forward(
        recon.predicted_patches.view(),
        recon.target_patches.view(),
        &rows,
        recon.patch_size,
        recon.channels,
    )
    .0)
}

/// `(1 - alpha) * loss_mae + alpha * loss_ft`.
pub fn loss_combined(recon: &Reconstruction, weights: LossWeights) -> Result<f64> {
    let a = weights.alpha();
    Ok((1.0 - a) * loss_mae(recon)? + a * loss_ft(recon)?)
}

struct FourierL1 {
    rows: Vec<usize>,
    phases: Vec<Vec<Complex64>>,
    patch_size: usize,
    channels: usize,
}

impl CustomOp for FourierL1 {
    fn backward(&self, grad: &Mat, inputs: &[ArrayView2<'_, f64>]) -> Vec<Option<Mat>> {
        let pred = inputs[0];
        let p = self.patch_size;
        let bins = p * p;
        let coef = grad[[0, 0]] / (self.rows.len() * bins * self.channels) as f64;
        let plan = PatchFft::new(p);
        let mut g = Mat::zeros(pred.dim());
        for (k, &r) in self.rows.iter().enumerate() {
            for ch in 0..self.channels {
                // d|Z|/dx over real x is Re(IDFT(Z/|Z|)) with the unnormalized inverse.
                let mut buf = self.phases[k * self.channels + ch].clone();
                plan.inverse(&mut buf);
                for (idx, z) in buf.iter().enumerate() {
                    g[[r, idx * self.channels + ch]] = coef * z.re;
                }
            }
        }
        vec![Some(g)]
    }
}

/// Differentiable [`loss_ft`] on a tape.
pub fn fourier_l1(
    tape: &mut Tape,
    pred: Var,
    target: &Mat,
    mask: &MaskSpec,
    patch_size: usize,
    channels: usize,
) -> Result<Var> {
    if tape.shape(pred) != target.dim() || target.nrows() != mask.len() {
        return Err(Error::Shape {
            expected: vec![mask.len(), target.ncols()],
            actual: vec![tape.shape(pred).0, tape.shape(pred).1],
        });
    }
    check_geometry(target.ncols(), patch_size, channels)?;
    let rows = masked_rows(mask)?;
    let (value, phases) = fourier_forward(tape.value(pred), target.view(), &rows, patch_size, channels);
    Ok(tape.custom(
        vec![pred],
        Mat::from_elem((1, 1), value),
        Box::new(FourierL1 {
            rows,
            phases,
            patch_size,
            channels,
        }),
    ))
}

/// Which reconstruction objective a model trains with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReconstructionLoss {
    Mse,
    Fourier,
    Combined { alpha: f64 },
}

impl ReconstructionLoss {
    pub fn combined(weights: LossWeights) -> Self {
        Self::Combined {
            alpha: weights.alpha(),
        }
    }

    pub fn on_tape(
        &self,
        tape: &mut Tape,
        pred: Var,
        target: &Mat,
        mask: &MaskSpec,
        patch_size: usize,
        channels: usize,
    ) -> Result<Var> {
        match *self {
            Self::Mse => masked_mse(tape, pred, target, mask),
            Self::Fourier => fourier_l1(tape, pred, target, mask, patch_size, channels),
            Self::Combined { alpha } => {
                LossWeights::new(alpha)?;
                let mse = masked_mse(tape, pred, target, mask)?;
                let ft = fourier_l1(tape, pred, target, mask, patch_size, channels)?;
                Ok(tape.weighted_sum(vec![(mse, 1.0 - alpha), (ft, alpha)]))
            }
        }
    }

    pub fn evaluate(&self, recon: &Reconstruction) -> Result<f64> {
        match *self {
            Self::Mse => loss_mae(recon),
            Self::Fourier => loss_ft(recon),
            Self::Combined { alpha } => loss_combined(recon, LossWeights::new(alpha)?),
        }
    }
}
