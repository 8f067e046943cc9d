use ndarray::ArrayView2;

use crate::error::{Error, Result};
use crate::nn::{CustomOp, Mat, Tape, Var};
use crate::patch::MaskSpec;

/// Predicted and target patches of one crop (or one channel of a crop).
///
/// `patch_size` and `channels` describe how each row unflattens into a
/// `P x P x C` block, which the Fourier loss needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub predicted_patches: Mat,
    pub target_patches: Mat,
    pub mask: MaskSpec,
    pub patch_size: usize,
    pub channels: usize,
}

impl Reconstruction {
    pub fn new(
        predicted_patches: Mat,
        target_patches: Mat,
        mask: MaskSpec,
        patch_size: usize,
        channels: usize,
    ) -> Result<Self> {
        let r = Self {
            predicted_patches,
            target_patches,
            mask,
            patch_size,
            channels,
        };
        r.check()?;
        Ok(r)
    }

    pub fn check(&self) -> Result<()> {
        let n = self.mask.len();
        let d = self.patch_size * self.patch_size * self.channels;
        for m in [&self.predicted_patches, &self.target_patches] {
            if m.dim() != (n, d) {
                return Err(Error::Shape {
                    expected: vec![n, d],
                    actual: vec![m.nrows(), m.ncols()],
                });
            }
        }
        Ok(())
    }

    /// Number of masked patches, the divisor of both reconstruction losses.
    pub fn n_masked(&self) -> usize {
        self.mask.n_masked()
    }
}

pub(crate) fn masked_rows(mask: &MaskSpec) -> Result<Vec<usize>> {
    let rows = mask.masked_indices();
    if rows.is_empty() {
        return Err(Error::NoMaskedPatches);
    }
    Ok(rows)
}

fn masked_mse_value(pred: ArrayView2<f64>, target: ArrayView2<f64>, rows: &[usize]) -> f64 {
    let d = pred.ncols() as f64;
    let total: f64 = rows
        .iter()
        .map(|&r| {
            pred.row(r)
                .iter()
                .zip(target.row(r))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / d
        })
        .sum();
    total / rows.len() as f64
}

/// Mean over masked patches of the per-patch mean squared error.
pub fn loss_mae(recon: &Reconstruction) -> Result<f64> {
    recon.check()?;
    let rows = masked_rows(&recon.mask)?;
    Ok(masked_mse_value(
        recon.predicted_patches.view(),
        recon.target_patches.view(),
        &rows,
    ))
}

struct MaskedMse {
    target: Mat,
    rows: Vec<usize>,
}

impl CustomOp for MaskedMse {
    fn backward(&self, grad: &Mat, inputs: &[ArrayView2<'_, f64>]) -> Vec<Option<Mat>> {
        let pred = inputs[0];
        let coef = 2.0 * grad[[0, 0]] / (self.rows.len() as f64 * pred.ncols() as f64);
        let mut g = Mat::zeros(pred.dim());
        for &r in &self.rows {
            let mut row = g.row_mut(r);
            for ((out, p), t) in row.iter_mut().zip(pred.row(r)).zip(self.target.row(r)) {
                *out = coef * (p - t);
            }
        }
        vec![Some(g)]
    }
}

/// Differentiable [`loss_mae`] on a tape.
pub fn masked_mse(tape: &mut Tape, pred: Var, target: &Mat, mask: &MaskSpec) -> Result<Var> {
    if tape.shape(pred) != target.dim() || target.nrows() != mask.len() {
        return Err(Error::Shape {
            expected: vec![mask.len(), target.ncols()],
            actual: vec![tape.shape(pred).0, tape.shape(pred).1],
        });
    }
    let rows = masked_rows(mask)?;
    let value = masked_mse_value(tape.value(pred), target.view(), &rows);
    Ok(tape.custom(
        vec![pred],
        Mat::from_elem((1, 1), value),
        Box::new(MaskedMse {
            target: target.clone(),
            rows,
        }),
    ))
}

struct CrossEntropy {
    probs: Mat,
    label: usize,
}

impl CustomOp for CrossEntropy {
    fn backward(&self, grad: &Mat, _inputs: &[ArrayView2<'_, f64>]) -> Vec<Option<Mat>> {
        let mut g = self.probs.clone();
        g[[0, self.label]] -= 1.0;
        g.mapv_inplace(|v| v * grad[[0, 0]]);
        vec![Some(g)]
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax cross-entropy of a `1 x K` logit row against `label`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, label: usize) -> Result<Var> {
    let k = tape.shape(logits).1;
    if label >= k {
        return Err(Error::LabelOutOfRange {
            label,
            n_classes: k,
        });
    }
    let row: Vec<f64> = tape.value(logits).row(0).to_vec();
    let probs = softmax(&row);
    let value = -probs[label].max(f64::MIN_POSITIVE).ln();
    Ok(tape.custom(
        vec![logits],
        Mat::from_elem((1, 1), value),
        Box::new(CrossEntropy {
            probs: Mat::from_shape_vec((1, k), probs).unwrap(),
            label,
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::patch::sample_mask;

    fn recon(pred: Mat, target: Mat, mask: Vec<bool>) -> Reconstruction {
        let d = pred.ncols();
        Reconstruction::new(pred, target, MaskSpec::from_mask(mask), 1, d).unwrap()
    }

    #[test]
    fn perfect_reconstruction_is_zero() {
        let t = Mat::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f64);
        assert_eq!(loss_mae(&recon(t.clone(), t, vec![true, false, true, true])).unwrap(), 0.0);
    }

    #[test]
    fn unit_error_on_single_patch() {
        let r = recon(Mat::zeros((2, 4)), Mat::ones((2, 4)), vec![false, true]);
        assert_eq!(loss_mae(&r).unwrap(), 1.0);
    }

    #[test]
    fn visible_targets_do_not_matter() {
        let mask = sample_mask(16, 0.5, 4).unwrap();
        let pred = Mat::from_shape_fn((16, 8), |(i, j)| ((i * 8 + j) as f64).sin());
        let target = Mat::from_shape_fn((16, 8), |(i, j)| ((i + j) as f64).cos());
        let mut shifted = target.clone();
        for r in mask.visible_indices() {
            shifted.row_mut(r).mapv_inplace(|v| v + 100.0);
        }
        let a = loss_mae(&Reconstruction::new(pred.clone(), target, mask.clone(), 1, 8).unwrap());
        let b = loss_mae(&Reconstruction::new(pred, shifted, mask, 1, 8).unwrap());
        assert_eq!(a.unwrap(), b.unwrap());
    }

    #[test]
    fn no_masked_patches_is_an_error() {
        let r = recon(Mat::zeros((2, 2)), Mat::zeros((2, 2)), vec![false, false]);
        assert!(matches!(loss_mae(&r), Err(Error::NoMaskedPatches)));
    }

    #[test]
    fn tape_loss_matches_plain_loss() {
        let mask = sample_mask(10, 0.4, 1).unwrap();
        let pred = Mat::from_shape_fn((10, 4), |(i, j)| (i as f64 - j as f64) * 0.1);
        let target = Mat::from_shape_fn((10, 4), |(i, j)| (i * j) as f64 * 0.05);
        let plain = loss_mae(&Reconstruction::new(pred.clone(), target.clone(), mask.clone(), 1, 4).unwrap()).unwrap();
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let p = tape.input(pred);
        let l = masked_mse(&mut tape, p, &target, &mask).unwrap();
        assert_eq!(tape.scalar(l), plain);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let l = tape.input(Mat::zeros((1, 3)));
        assert!(cross_entropy(&mut tape, l, 3).is_err());
        let ce = cross_entropy(&mut tape, l, 1).unwrap();
        assert!((tape.scalar(ce) - 3f64.ln()).abs() < 1e-12);
    }
}
