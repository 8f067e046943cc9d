use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, StandardNormal};

use phenom_eval::benchmarks::regression::{
    fit_elastic_net_cv, fit_feature_regressors, r_squared, skew_transform, skewness, ColumnTransform,
    FeatureCategory, FeatureTable, SkewBranch, L1_RATIOS,
};

fn embeddings(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect()
}

fn table(columns: Vec<Vec<f64>>) -> FeatureTable {
    let n = columns[0].len();
    let cats: Vec<FeatureCategory> = (0..columns.len()).map(|j| FeatureCategory::ALL[j % 5]).collect();
    let names = cats.iter().enumerate().map(|(j, c)| format!("{}_f{j}", c.name())).collect();
    FeatureTable::new((0..n).map(|i| format!("W{i}")).collect(), names, cats, columns).unwrap()
}

fn linear_columns(x: &[Vec<f64>], betas: &[Vec<f64>]) -> Vec<Vec<f64>> {
    betas
        .iter()
        .map(|b| x.iter().map(|r| 2.0 + r.iter().zip(b).map(|(a, c)| a * c).sum::<f64>()).collect())
        .collect()
}

#[test]
fn linear_targets_are_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = 16;
    let betas: Vec<Vec<f64>> = (0..5)
        .map(|j| (0..d).map(|k| if k % (j + 1) == 0 { rng.random_range(-2.0..2.0) } else { 0.0 }).collect())
        .collect();
    let xtr = embeddings(&mut rng, 400, d);
    let xte = embeddings(&mut rng, 200, d);
    let ytr = table(linear_columns(&xtr, &betas));
    let yte = table(linear_columns(&xte, &betas));
    let report = fit_feature_regressors(&xtr, &ytr, &xte, &yte).unwrap();
    assert_eq!(report.features.len(), 5);
    assert_eq!(report.categories.len(), 5);
    for f in &report.features {
        assert!(f.r2 >= 0.999, "{} r2 {}", f.name, f.r2);
        assert!(L1_RATIOS.contains(&f.l1_ratio));
    }
}

#[test]
fn permuted_targets_carry_no_signal() {
    let mut r2 = Vec::new();
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let d = 16;
        let betas: Vec<Vec<f64>> = (0..4).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let xtr = embeddings(&mut rng, 200, d);
        let xte = embeddings(&mut rng, 100, d);
        let mut cols = linear_columns(&xtr, &betas);
        for c in &mut cols {
            c.shuffle(&mut rng);
        }
        let mut test_cols = linear_columns(&xte, &betas);
        for c in &mut test_cols {
            c.shuffle(&mut rng);
        }
        let report = fit_feature_regressors(&xtr, &table(cols), &xte, &table(test_cols)).unwrap();
        r2.extend(report.features.iter().map(|f| f.r2));
    }
    let mean = r2.iter().sum::<f64>() / r2.len() as f64;
    eprintln!("mean test R2 on permuted targets {mean:.4}");
    assert!(mean <= 0.05);
}

#[test]
fn skew_branches_follow_thresholds() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let exp = Exp::new(1.0).unwrap();
    let right: Vec<f64> = (0..2000).map(|_| rng.sample(exp)).collect();
    let left: Vec<f64> = right.iter().map(|v| -v).collect();
    let sym: Vec<f64> = (0..2000).map(|_| rng.sample(StandardNormal)).collect();
    assert!(skewness(&right) > 1.5 && skewness(&left) < -1.5 && skewness(&sym).abs() < 0.5);
    // Two-point columns: with k ones among 100 the skew is (1 - 2p)/sqrt(p(1 - p)), p = k/100.
    let two_point = |k: usize| -> Vec<f64> { (0..100).map(|i| if i < k { 1.0 } else { 0.0 }).collect() };
    let just_above = two_point(37);
    let just_below = two_point(38);
    let oracle_skew = |p: f64| (1.0 - 2.0 * p) / (p * (1.0 - p)).sqrt();
    assert!((skewness(&just_above) - oracle_skew(0.37)).abs() < 1e-12);
    assert!(oracle_skew(0.37) > 0.5 && oracle_skew(0.38) < 0.5);
    let mirror = |c: &[f64]| c.iter().map(|v| 1.0 - v).collect::<Vec<f64>>();
    let t = table(vec![right.clone(), left.clone(), sym.clone(), vec![3.0; 2000]]);
    let branch = |c: &[f64]| ColumnTransform::fit(c).branch;
    assert_eq!(branch(&just_above), SkewBranch::Log);
    assert_eq!(branch(&just_below), SkewBranch::Identity);
    assert_eq!(branch(&mirror(&just_above)), SkewBranch::Square);
    assert_eq!(branch(&mirror(&just_below)), SkewBranch::Identity);
    let (out, branches) = skew_transform(&t);
    assert_eq!(&branches[..3], &[SkewBranch::Log, SkewBranch::Square, SkewBranch::Identity]);
    assert_eq!(branches[3], SkewBranch::Identity);
    for (j, col) in out.columns.iter().enumerate() {
        assert!(col.iter().all(|v| v.is_finite()));
        let n = col.len() as f64;
        let m = col.iter().sum::<f64>() / n;
        let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
        assert!(m.abs() < 1e-9);
        if j == 3 {
            assert!(col.iter().all(|&v| v == 0.0));
        } else {
            assert!((sd - 1.0).abs() < 1e-9);
        }
    }
    // Log branch with non-positive values shifts by 1 - min.
    let with_zero: Vec<f64> = right.iter().map(|v| v - 0.5).collect();
    let tf = ColumnTransform::fit(&with_zero);
    let min = with_zero.iter().copied().fold(f64::INFINITY, f64::min);
    assert_eq!(tf.branch, SkewBranch::Log);
    assert_eq!(tf.shift, 1.0 - min);
    assert!(tf.apply(min - 10.0).is_finite());
}

#[test]
fn elastic_net_guards() {
    let x: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64]).collect();
    assert!(fit_elastic_net_cv(&x, &[0.0, 1.0, 2.0, 3.0]).is_err());
    assert_eq!(L1_RATIOS, [0.1, 0.6, 0.9, 0.95, 0.99]);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = embeddings(&mut rng, 60, 3);
    let y: Vec<f64> = x.iter().map(|r| 1.0 + 3.0 * r[0] - r[2]).collect();
    let fit = fit_elastic_net_cv(&x, &y).unwrap();
    let pred: Vec<f64> = x.iter().map(|r| fit.predict(r)).collect();
    assert!(r_squared(&y, &pred) > 0.999);
    assert!(fit.coef[1].abs() < 0.05);
    assert!(fit_elastic_net_cv(&x, &y[..10]).is_err());
}

#[test]
fn feature_csv_is_read_by_prefix() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("features.csv");
    std::fs::write(&p, "well_id,AreaShape_area,Texture_contrast_3\nW0,1.5,2\nW1,3,4\n").unwrap();
    let t = FeatureTable::read_csv(&p).unwrap();
    assert_eq!(t.categories, vec![FeatureCategory::AreaShape, FeatureCategory::Texture]);
    assert_eq!(t.columns[0], vec![1.5, 3.0]);
    std::fs::write(&p, "well_id,Bogus_x\nW0,1\n").unwrap();
    assert!(FeatureTable::read_csv(&p).is_err());
    std::fs::write(&p, "id,AreaShape_x\nW0,1\n").unwrap();
    assert!(FeatureTable::read_csv(&p).is_err());
    std::fs::write(&p, "well_id,AreaShape_x\nW0,nan\n").unwrap();
    assert!(FeatureTable::read_csv(&p).is_err());
}
