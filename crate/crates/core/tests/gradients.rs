use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use phenom_core::data::{self_standardize, Crop};
use phenom_core::fourier::{fft_magnitude, ReconstructionLoss};
use phenom_core::mae::MaeModel;
use phenom_core::nn::{Gradients, ParamId, Tape};
use phenom_core::patch::{sample_mask, MaskSpec};
use phenom_core::vit::{ForwardCtx, ViTConfig};

const H: f64 = 1e-5;
const ALPHA: f64 = 0.01;

fn setup() -> (MaeModel, Crop, MaskSpec) {
    let model = MaeModel::new(ViTConfig::tiny_test(6), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pixels = Array3::from_shape_fn((64, 64, 6), |(i, j, c)| {
        ((i as f32 * 0.3 + c as f32).sin() + (j as f32 * 0.2).cos()) + rng.random_range(0.0..0.5)
    });
    let crop = self_standardize(Crop::from_pixels(pixels).unwrap());
    let mask = sample_mask(model.config.n_patches(), 0.75, 9).unwrap();
    (model, crop, mask)
}

fn loss_value(model: &MaeModel, crop: &Crop, mask: &MaskSpec, loss: ReconstructionLoss) -> f64 {
    let mut tape = Tape::new(&model.params);
    let l = model
        .loss_on_tape(&mut tape, crop, mask, loss, &mut ForwardCtx::eval())
        .unwrap();
    tape.scalar(l)
}

fn analytic(model: &MaeModel, crop: &Crop, mask: &MaskSpec, loss: ReconstructionLoss) -> Gradients {
    let mut tape = Tape::new(&model.params);
    let l = model
        .loss_on_tape(&mut tape, crop, mask, loss, &mut ForwardCtx::eval())
        .unwrap();
    tape.backward(l)
}

/// Sample `count` parameter entries across distinct tensors, skipping entries
/// whose gradient is too small for a meaningful relative comparison.
fn sample_entries(model: &MaeModel, grads: &Gradients, count: usize, seed: u64) -> Vec<(ParamId, usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = model.params.iter().map(|(id, _)| id).collect();
    let mut out = Vec::new();
    let mut tries = 0;
    while out.len() < count {
        tries += 1;
        assert!(tries < 100_000, "not enough entries with a usable gradient");
        let id = ids[rng.random_range(0..ids.len())];
        let g = grads.get(id);
        let (r, c) = (rng.random_range(0..g.nrows()), rng.random_range(0..g.ncols()));
        if g[[r, c]].abs() >= 1e-5 && !out.contains(&(id, r, c)) {
            out.push((id, r, c));
        }
    }
    out
}

fn check(loss: ReconstructionLoss, seed: u64) {
    let (mut model, crop, mask) = setup();
    let grads = analytic(&model, &crop, &mask, loss);
    let entries = sample_entries(&model, &grads, 20, seed);
    let mut worst = 0.0f64;
    for (id, r, c) in entries {
        let orig = model.params.get(id)[[r, c]];
        model.params.get_mut(id)[[r, c]] = orig + H;
        let up = loss_value(&model, &crop, &mask, loss);
        model.params.get_mut(id)[[r, c]] = orig - H;
        let down = loss_value(&model, &crop, &mask, loss);
        model.params.get_mut(id)[[r, c]] = orig;
        let numeric = (up - down) / (2.0 * H);
        let a = grads.get(id)[[r, c]];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
        let name = &model.params.param(id).name;
        assert!(rel < 1e-4, "{loss:?} {name}[{r},{c}]: analytic {a:e} numeric {numeric:e} rel {rel:e}");
        worst = worst.max(rel);
    }
    eprintln!("{loss:?}: worst relative error {worst:e}");
}

#[test]
fn mse_gradient_matches_finite_differences() {
    check(ReconstructionLoss::Mse, 1);
}

#[test]
fn fourier_gradient_matches_finite_differences() {
    // The magnitude is differentiable away from zero bins; confirm the
    // prediction stays clear of them on this instance.
    let (model, crop, mask) = setup();
    let rec = model.mae_forward(&crop, &mask).unwrap();
    let p = model.config.patch_size;
    let c = model.config.in_channels;
    let mut smallest = f64::INFINITY;
    for i in mask.masked_indices() {
        let row = rec.predicted_patches.row(i);
        let patch = Array3::from_shape_fn((p, p, c), |(y, x, ch)| row[(y * p + x) * c + ch]);
        smallest = fft_magnitude(patch.view()).unwrap().iter().fold(smallest, |m, &v| m.min(v));
    }
    assert!(smallest >= 1e-3, "a predicted spectrum bin is {smallest:e}");
    check(ReconstructionLoss::Fourier, 2);
}

#[test]
fn combined_gradient_matches_finite_differences() {
    check(ReconstructionLoss::Combined { alpha: ALPHA }, 3);
}

#[test]
fn combined_gradient_is_linear_in_the_parts() {
    let (model, crop, mask) = setup();
    let mse = analytic(&model, &crop, &mask, ReconstructionLoss::Mse);
    let ft = analytic(&model, &crop, &mask, ReconstructionLoss::Fourier);
    let both = analytic(&model, &crop, &mask, ReconstructionLoss::Combined { alpha: ALPHA });
    let mut worst = 0.0f64;
    for (id, g) in both.iter() {
        for ((a, m), f) in g.iter().zip(mse.get(id)).zip(ft.get(id)) {
            worst = worst.max((a - ((1.0 - ALPHA) * m + ALPHA * f)).abs());
        }
    }
    assert!(worst < 1e-6, "max deviation {worst:e}");
}
