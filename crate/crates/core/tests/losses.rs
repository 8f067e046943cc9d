use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use phenom_core::fourier::{fft_magnitude, loss_combined, loss_ft, LossWeights};
use phenom_core::mae::{loss_mae, Reconstruction};
use phenom_core::patch::{sample_mask, MaskSpec};

/// Textbook O(P^4) DFT magnitude, independent of the FFT path.
fn brute_dft_magnitude(x: &Array3<f64>) -> Array3<f64> {
    let (p, _, c) = x.dim();
    let mut out = Array3::zeros((p, p, c));
    for ch in 0..c {
        for u in 0..p {
            for v in 0..p {
                let (mut re, mut im) = (0.0f64, 0.0f64);
                for i in 0..p {
                    for j in 0..p {
                        let angle = -2.0 * std::f64::consts::PI * ((u * i + v * j) as f64) / p as f64;
                        re += x[[i, j, ch]] * angle.cos();
                        im += x[[i, j, ch]] * angle.sin();
                    }
                }
                out[[u, v, ch]] = re.hypot(im);
            }
        }
    }
    out
}

fn random_patch(rng: &mut ChaCha8Rng, p: usize, c: usize) -> Array3<f64> {
    Array3::from_shape_fn((p, p, c), |_| rng.random_range(-2.0..2.0))
}

fn random_recon(rng: &mut ChaCha8Rng, n: usize, p: usize, c: usize, ratio: f64) -> Reconstruction {
    let d = p * p * c;
    let pred = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.5..1.5));
    let target = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.5..1.5));
    let mask = sample_mask(n, ratio, rng.random()).unwrap();
    Reconstruction::new(pred, target, mask, p, c).unwrap()
}

/// Row layout of a flattened patch is `(i * P + j) * C + c`.
fn row_to_patch(row: ndarray::ArrayView1<f64>, p: usize, c: usize) -> Array3<f64> {
    Array3::from_shape_fn((p, p, c), |(i, j, ch)| row[(i * p + j) * c + ch])
}

fn patch_to_row(x: &Array3<f64>) -> Vec<f64> {
    x.iter().copied().collect()
}

fn circular_shift(x: &Array3<f64>, di: usize, dj: usize) -> Array3<f64> {
    let (p, _, c) = x.dim();
    Array3::from_shape_fn((p, p, c), |(i, j, ch)| x[[(i + di) % p, (j + dj) % p, ch]])
}

#[test]
fn fft_magnitude_matches_brute_force_dft() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for p in [4, 8, 16] {
        for c in [1, 3] {
            let x = random_patch(&mut rng, p, c);
            let fast = fft_magnitude(x.view()).unwrap();
            let slow = brute_dft_magnitude(&x);
            let err = fast.iter().zip(&slow).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err < 1e-6, "P={p} C={c}: max error {err}");
        }
    }
}

#[test]
fn constant_patch_dc_bin() {
    let x = Array3::from_elem((8, 8, 1), 2.5);
    let m = fft_magnitude(x.view()).unwrap();
    assert!((m[[0, 0, 0]] - 64.0 * 2.5).abs() < 1e-12);
    assert!(m.iter().skip(1).all(|v| v.abs() < 1e-12));
}

#[test]
fn magnitudes_and_loss_are_shift_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for p in [4, 8, 16] {
        let x = random_patch(&mut rng, p, 2);
        let base = fft_magnitude(x.view()).unwrap();
        for (di, dj) in [(1, 0), (0, 1), (3, 2), (p - 1, p - 1)] {
            let shifted = fft_magnitude(circular_shift(&x, di, dj).view()).unwrap();
            let err = base.iter().zip(&shifted).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err < 1e-5, "P={p} shift ({di},{dj}): {err}");
        }
        // Prediction = target shifted by one pixel: loss_ft vanishes, loss_mae does not.
        let n = 5;
        let targets: Vec<Array3<f64>> = (0..n).map(|_| random_patch(&mut rng, p, 2)).collect();
        let d = p * p * 2;
        let t = Array2::from_shape_fn((n, d), |(r, k)| patch_to_row(&targets[r])[k]);
        let y = Array2::from_shape_fn((n, d), |(r, k)| patch_to_row(&circular_shift(&targets[r], 1, 0))[k]);
        let recon = Reconstruction::new(y, t, MaskSpec::from_mask(vec![true; n]), p, 2).unwrap();
        assert!(loss_ft(&recon).unwrap() < 1e-5);
        assert!(loss_mae(&recon).unwrap() > 0.1);
    }
}

#[test]
fn loss_ft_matches_brute_force_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for p in [4, 8] {
        let c = 3;
        let r = random_recon(&mut rng, 9, p, c, 0.5);
        let mut total = 0.0;
        let masked = r.mask.masked_indices();
        for &i in &masked {
            let a = brute_dft_magnitude(&row_to_patch(r.predicted_patches.row(i), p, c));
            let b = brute_dft_magnitude(&row_to_patch(r.target_patches.row(i), p, c));
            total += a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / (p * p * c) as f64;
        }
        let expected = total / masked.len() as f64;
        assert!((loss_ft(&r).unwrap() - expected).abs() < 1e-9);
    }
}

#[test]
fn losses_ignore_visible_targets_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..100 {
        let p = [2, 4, 8][rng.random_range(0..3)];
        let c = rng.random_range(1..4);
        let n = rng.random_range(2..20);
        let ratio = rng.random_range(0.1..0.9);
        let r = random_recon(&mut rng, n, p, c, ratio);
        let mut moved = r.clone();
        for i in r.mask.visible_indices() {
            for v in moved.target_patches.row_mut(i) {
                *v += rng.random_range(-100.0..100.0);
            }
        }
        assert_eq!(loss_mae(&r).unwrap(), loss_mae(&moved).unwrap());
        assert_eq!(loss_ft(&r).unwrap(), loss_ft(&moved).unwrap());
    }
}

#[test]
fn combined_is_exact_convex_mix() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let w = LossWeights::new(0.01).unwrap();
    for _ in 0..50 {
        let r = random_recon(&mut rng, 16, 4, 2, 0.75);
        let expected = 0.99 * loss_mae(&r).unwrap() + 0.01 * loss_ft(&r).unwrap();
        assert!((loss_combined(&r, w).unwrap() - expected).abs() < 1e-9);
        let perfect = Reconstruction {
            predicted_patches: r.target_patches.clone(),
            ..r.clone()
        };
        assert_eq!(loss_combined(&perfect, w).unwrap(), 0.0);
    }
}

#[test]
fn no_masked_patch_is_an_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut r = random_recon(&mut rng, 4, 4, 1, 0.5);
    r.mask = MaskSpec::none(4);
    assert!(loss_mae(&r).is_err());
    assert!(loss_ft(&r).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_ft_is_nonnegative_and_zero_on_identity(seed in any::<u64>(), p in 1usize..6, c in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = random_recon(&mut rng, 6, p, c, 0.5);
        prop_assert!(loss_ft(&r).unwrap() >= 0.0);
        let same = Reconstruction { predicted_patches: r.target_patches.clone(), ..r };
        prop_assert_eq!(loss_ft(&same).unwrap(), 0.0);
        prop_assert_eq!(loss_mae(&same).unwrap(), 0.0);
    }

    #[test]
    fn loss_ft_ignores_prediction_sign(seed in any::<u64>()) {
        // |F(-x)| = |F(x)|: negating the prediction changes loss_mae but not the spectra.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = random_recon(&mut rng, 4, 4, 2, 0.5);
        let neg = Reconstruction { predicted_patches: -&r.predicted_patches, ..r.clone() };
        prop_assert!((loss_ft(&r).unwrap() - loss_ft(&neg).unwrap()).abs() < 1e-9);
    }
}
