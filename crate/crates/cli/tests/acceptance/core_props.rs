use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use phenom_core::ca_mae::{tokenize_channels, CaMaeModel, EmbedMode};
use phenom_core::data::{self_standardize, Crop};
use phenom_core::fourier::{fft_magnitude, loss_combined, loss_ft, LossWeights, ReconstructionLoss};
use phenom_core::mae::{loss_mae, MaeModel, Reconstruction};
use phenom_core::nn::{Gradients, ParamId, Tape};
use phenom_core::patch::{patchify, sample_mask, MaskSpec};
use phenom_core::vit::{ForwardCtx, ViTConfig};

use crate::oracles;

fn crop(c: usize, s: usize, seed: u64) -> Crop {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    self_standardize(Crop::from_pixels(Array3::from_shape_fn((s, s, c), |_| rng.random::<f32>())).unwrap())
}

fn random_recon(rng: &mut ChaCha8Rng, n: usize, p: usize, c: usize, ratio: f64) -> Reconstruction {
    let d = p * p * c;
    let pred = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.5..1.5));
    let target = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.5..1.5));
    let mask = sample_mask(n, ratio, rng.random()).unwrap();
    Reconstruction::new(pred, target, mask, p, c).unwrap()
}

fn max_diff<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

pub fn token_counts() -> String {
    let x = crop(6, 256, 0);
    let patches = patchify(&x, 8).unwrap().n_tokens();
    let channel_tokens = tokenize_channels(&x, 8).unwrap().len();
    assert_eq!(patches, 1024);
    assert_eq!(channel_tokens, 6144);
    format!("{patches} patch tokens, {channel_tokens} channel tokens")
}

pub fn masked_locality() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..100 {
        let p = [2, 4, 8][rng.random_range(0..3)];
        let c = rng.random_range(1..7);
        let n = rng.random_range(4..40);
        let ratio = rng.random_range(0.25..0.9);
        let r = random_recon(&mut rng, n, p, c, ratio);
        let mut moved = r.clone();
        for v in r.mask.visible_indices() {
            for x in moved.target_patches.row_mut(v) {
                *x += rng.random_range(-50.0..50.0);
            }
        }
        assert_eq!(loss_mae(&r).unwrap(), loss_mae(&moved).unwrap(), "instance {i}: loss_mae moved");
        assert_eq!(loss_ft(&r).unwrap(), loss_ft(&moved).unwrap(), "instance {i}: loss_ft moved");
    }
    "100 instances, both losses unchanged exactly".into()
}

pub fn loss_combination() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = LossWeights::new(0.01).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let r = random_recon(&mut rng, 16, 4, 3, 0.75);
        let want = 0.99 * loss_mae(&r).unwrap() + 0.01 * loss_ft(&r).unwrap();
        worst = worst.max((loss_combined(&r, w).unwrap() - want).abs());
    }
    assert!(worst <= 1e-9, "max deviation {worst:e}");
    format!("max deviation {worst:.1e}")
}

fn shift(x: &Array3<f64>, di: usize, dj: usize) -> Array3<f64> {
    let (p, _, c) = x.dim();
    Array3::from_shape_fn((p, p, c), |(i, j, ch)| x[[(i + di) % p, (j + dj) % p, ch]])
}

pub fn fourier_correctness() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut dft_err = 0.0f64;
    let mut shift_err = 0.0f64;
    for p in [4, 8, 16] {
        for c in [1, 3] {
            let x = Array3::from_shape_fn((p, p, c), |_| rng.random_range(-2.0..2.0));
            let fast = fft_magnitude(x.view()).unwrap();
            dft_err = dft_err.max(max_diff(&fast, &oracles::dft_magnitude(&x)));
        }
        // Prediction = target rolled by a few pixels.
        let n = 6;
        let c = 2;
        let d = p * p * c;
        let targets: Vec<Array3<f64>> = (0..n)
            .map(|_| Array3::from_shape_fn((p, p, c), |_| rng.random_range(-2.0..2.0)))
            .collect();
        let rows = |f: &dyn Fn(&Array3<f64>) -> Array3<f64>| {
            Array2::from_shape_vec((n, d), targets.iter().flat_map(|x| f(x).into_iter()).collect()).unwrap()
        };
        for (di, dj) in [(1, 0), (0, 1), (3, 2), (p - 1, p - 1)] {
            let t = rows(&|x| x.clone());
            let y = rows(&|x| shift(x, di, dj));
            let recon = Reconstruction::new(y, t, MaskSpec::from_mask(vec![true; n]), p, c).unwrap();
            shift_err = shift_err.max(loss_ft(&recon).unwrap());
        }
    }
    assert!(dft_err <= 1e-6, "FFT vs DFT max error {dft_err:e}");
    assert!(shift_err <= 1e-5, "loss_ft of shifted prediction {shift_err:e}");
    format!("FFT vs DFT {dft_err:.1e}, loss_ft under shift {shift_err:.1e}")
}

const H: f64 = 1e-5;

fn loss_on(model: &MaeModel, x: &Crop, mask: &MaskSpec, loss: ReconstructionLoss) -> (f64, Gradients) {
    let mut tape = Tape::new(&model.params);
    let l = model.loss_on_tape(&mut tape, x, mask, loss, &mut ForwardCtx::eval()).unwrap();
    (tape.scalar(l), tape.backward(l))
}

pub fn gradient_checks() -> String {
    let mut model = MaeModel::new(ViTConfig::tiny_test(6), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pixels = Array3::from_shape_fn((64, 64, 6), |(i, j, c)| {
        ((i as f32 * 0.3 + c as f32).sin() + (j as f32 * 0.2).cos()) + rng.random_range(0.0..0.5)
    });
    let x = self_standardize(Crop::from_pixels(pixels).unwrap());
    let mask = sample_mask(model.config.n_patches(), 0.75, 9).unwrap();
    let ids: Vec<ParamId> = model.params.iter().map(|(id, _)| id).collect();
    let mut summary = Vec::new();
    for (k, loss) in [
        ReconstructionLoss::Mse,
        ReconstructionLoss::Fourier,
        ReconstructionLoss::Combined { alpha: 0.01 },
    ]
    .into_iter()
    .enumerate()
    {
        let (_, grads) = loss_on(&model, &x, &mask, loss);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + k as u64);
        let mut entries: Vec<(ParamId, usize, usize)> = Vec::new();
        while entries.len() < 20 {
            let id = ids[rng.random_range(0..ids.len())];
            let g = grads.get(id);
            let (r, c) = (rng.random_range(0..g.nrows()), rng.random_range(0..g.ncols()));
            if g[[r, c]].abs() >= 1e-5 && !entries.contains(&(id, r, c)) {
                entries.push((id, r, c));
            }
        }
        let mut worst = 0.0f64;
        for (id, r, c) in entries {
            let orig = model.params.get(id)[[r, c]];
            model.params.get_mut(id)[[r, c]] = orig + H;
            let up = loss_on(&model, &x, &mask, loss).0;
            model.params.get_mut(id)[[r, c]] = orig - H;
            let down = loss_on(&model, &x, &mask, loss).0;
            model.params.get_mut(id)[[r, c]] = orig;
            let numeric = (up - down) / (2.0 * H);
            let a = grads.get(id)[[r, c]];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
            assert!(rel <= 1e-4, "{loss:?} {}[{r},{c}]: rel error {rel:e}", model.params.param(id).name);
            worst = worst.max(rel);
        }
        summary.push(format!("{loss:?} {worst:.1e}"));
    }
    format!("20 entries per loss, worst relative error: {}", summary.join(", "))
}

pub fn ca_mae_channels() -> String {
    let m = CaMaeModel::new(ViTConfig::tiny_test(6), 7).unwrap();
    let x = crop(6, 64, 7);
    let mean = m.ca_embed(&x, EmbedMode::MeanAll).unwrap();
    let concat = m.ca_embed(&x, EmbedMode::ConcatChannelMeans).unwrap();
    let w = mean.len();
    assert_eq!(concat.len(), 6 * w);
    let mut worst = 0.0f64;
    for s in 0..6 {
        let order: Vec<usize> = (0..6).map(|c| (c + s) % 6).collect();
        let y = x.select_channels(&order).unwrap();
        worst = worst.max(max_diff(&mean, &m.ca_embed(&y, EmbedMode::MeanAll).unwrap()));
        let permuted = m.ca_embed(&y, EmbedMode::ConcatChannelMeans).unwrap();
        let expected: Vec<f64> = order.iter().flat_map(|&c| concat[c * w..(c + 1) * w].to_vec()).collect();
        worst = worst.max(max_diff(&expected, &permuted));
    }
    assert!(worst <= 1e-5, "max deviation under cyclic permutations {worst:e}");
    for c in 1..=8 {
        let x = crop(c, 64, 20 + c as u64);
        assert_eq!(m.ca_embed(&x, EmbedMode::MeanAll).unwrap().len(), w, "C'={c}");
        assert_eq!(m.ca_embed(&x, EmbedMode::ConcatChannelMeans).unwrap().len(), c * w, "C'={c}");
    }
    format!("max deviation over 6 cyclic shifts {worst:.1e}; C' = 1..8 embed")
}
