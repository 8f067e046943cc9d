use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, StandardNormal};

use phenom_core::data::{RelationshipDb, WellMeta, NEG_CONTROL};
use phenom_eval::benchmarks::regression::{
    fit_feature_regressors, ColumnTransform, FeatureCategory, FeatureTable, SkewBranch,
};
use phenom_eval::benchmarks::{average_precision, bh_qvalues, recall_from_vectors, retrieval_benchmark, RetrievalTask};
use phenom_eval::postprocess::{fit_tvn, spherical_mean, TvnOptions};
use phenom_eval::table::EmbeddingRecord;

use crate::oracles;

fn normal_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

fn rec(i: usize, pert: &str, v: Vec<f64>) -> EmbeddingRecord {
    EmbeddingRecord::new(
        WellMeta {
            well_id: format!("W{i}"),
            plate_id: "P0".into(),
            experiment_id: "E0".into(),
            perturbation_id: pert.into(),
        },
        v,
    )
}

pub fn random_recall() -> String {
    let start = Instant::now();
    let ids: Vec<String> = (0..1000).map(|i| format!("G{i}")).collect();
    let mut recalls = Vec::new();
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let vectors: Vec<Vec<f64>> = (0..1000).map(|_| normal_vec(&mut rng, 1024)).collect();
        let mut db = RelationshipDb::new("random");
        while db.len() < 500 {
            let (a, b) = (rng.random_range(0..1000), rng.random_range(0..1000));
            if a != b {
                db.insert(ids[a].clone(), ids[b].clone()).unwrap();
            }
        }
        recalls.push(recall_from_vectors(&ids, &vectors, &db, 5.0).unwrap());
    }
    let mean = recalls.iter().sum::<f64>() / 10.0;
    let secs = start.elapsed().as_secs_f64();
    assert!((mean - 0.100).abs() <= 0.010, "mean recall {mean:.4} over seeds {recalls:.3?}");
    assert!(secs < 60.0, "took {secs:.1}s");
    format!("mean recall {mean:.4} over 10 seeds in {secs:.1}s")
}

pub fn tvn_postconditions() -> String {
    let mut worst_mean = 0.0f64;
    let mut worst_cov = 0.0f64;
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let d = rng.random_range(1..=16);
        let n = d + rng.random_range(1..40);
        let mix: Vec<Vec<f64>> = (0..d).map(|_| normal_vec(&mut rng, d)).collect();
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let z = normal_vec(&mut rng, d);
                (0..d).map(|j| 3.0 + (0..d).map(|k| mix[k][j] * z[k]).sum::<f64>()).collect()
            })
            .collect();
        let model = fit_tvn(&rows, TvnOptions::default()).unwrap();
        let white: Vec<Vec<f64>> = rows.iter().map(|r| model.transform(r)).collect();
        let m = n as f64;
        let mean: Vec<f64> = (0..d).map(|j| white.iter().map(|r| r[j]).sum::<f64>() / m).collect();
        for a in 0..d {
            worst_mean = worst_mean.max(mean[a].abs());
            for b in 0..d {
                let cov = white.iter().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])).sum::<f64>() / (m - 1.0);
                worst_cov = worst_cov.max((cov - if a == b { 1.0 } else { 0.0 }).abs());
            }
        }
    }
    assert!(worst_mean < 1e-6, "per-dim mean {worst_mean:e}");
    assert!(worst_cov <= 1e-4, "covariance deviation {worst_cov:e}");
    format!("50 fit sets: max |mean| {worst_mean:.1e}, max |cov - I| {worst_cov:.1e}")
}

pub fn spherical_mean_props() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_norm = 0.0f64;
    let mut worst_order = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..8);
        let d = rng.random_range(2..10);
        let reps: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| 0.5 + rng.random::<f64>()).collect()).collect();
        let m = spherical_mean(&reps).unwrap();
        worst_norm = worst_norm.max((m.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs());
        let mut shuffled = reps.clone();
        shuffled.shuffle(&mut rng);
        let m2 = spherical_mean(&shuffled).unwrap();
        worst_order = worst_order.max(m.iter().zip(&m2).fold(0.0, |w, (a, b)| w.max((a - b).abs())));
    }
    assert!(worst_norm <= 1e-9, "norm deviation {worst_norm:e}");
    assert!(worst_order <= 1e-12, "order dependence {worst_order:e}");
    assert!(spherical_mean(&[vec![1.0, 2.0, -1.0], vec![-1.0, -2.0, 1.0]]).is_err(), "antipodal pair accepted");
    let e = spherical_mean(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let h = std::f64::consts::FRAC_1_SQRT_2;
    assert!((e[0] - h).abs() <= 1e-9 && (e[1] - h).abs() <= 1e-9, "{{e1,e2}} gave {e:?}");
    format!("norm {worst_norm:.1e}, order {worst_order:.1e}, antipodal rejected, {{e1,e2}} exact")
}

/// Members score as replicate spherical means; the null relabels every pool entry.
fn oracle_retrieval(records: &[EmbeddingRecord], groups: &[Vec<usize>], negatives: &[usize]) -> Vec<(f64, f64, f64)> {
    let mut scored = Vec::new();
    for members in groups {
        let mut pool: Vec<Vec<f64>> = members.iter().map(|&i| oracles::unit(&records[i].vector)).collect();
        pool.extend(negatives.iter().map(|&i| oracles::unit(&records[i].vector)));
        let k = members.len();
        let observed = oracles::group_map(&pool, &(0..k).collect::<Vec<_>>());
        let perms = oracles::permutations(pool.len());
        let at_least = perms
            .iter()
            .filter(|p| oracles::group_map(&pool, &p[..k]) >= observed - 1e-12)
            .count();
        scored.push((observed, at_least as f64 / perms.len() as f64));
    }
    let q = oracles::bh(&scored.iter().map(|s| s.1).collect::<Vec<_>>());
    scored.iter().zip(q).map(|(&(m, p), q)| (m, p, q)).collect()
}

pub fn retrieval_oracle() -> String {
    let mut worst = 0.0f64;
    let mut instances = 0;
    for seed in 0..40u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
        let n_pert = rng.random_range(1..=3);
        let n_neg = rng.random_range(1..=4);
        let mut records = Vec::new();
        for p in 0..n_pert {
            let centre = normal_vec(&mut rng, 4);
            let spread = [0.2, 1.0, 3.0][rng.random_range(0..3)];
            for _ in 0..2 {
                let v = centre.iter().map(|c| c + spread * rng.sample::<f64, _>(StandardNormal)).collect();
                records.push(rec(records.len(), &format!("G{p}"), v));
            }
        }
        for _ in 0..n_neg {
            let v = normal_vec(&mut rng, 4);
            records.push(rec(records.len(), NEG_CONTROL, v));
        }
        records.shuffle(&mut rng);
        let by_label = |label: &str| -> Vec<usize> {
            (0..records.len()).filter(|&i| records[i].meta.perturbation_id == label).collect()
        };
        let groups: Vec<Vec<usize>> = (0..n_pert).map(|p| by_label(&format!("G{p}"))).collect();
        let want = oracle_retrieval(&records, &groups, &by_label(NEG_CONTROL));
        let got = retrieval_benchmark(&records, &RetrievalTask::perturbation(&records, 100), seed).unwrap();
        assert_eq!(got.groups.len(), n_pert);
        for g in &got.groups {
            let p: usize = g.id.trim_start_matches('G').parse().unwrap();
            let (map, pv, q) = want[p];
            let dev = (g.map - map).abs().max((g.p_value - pv).abs()).max((g.q_value - q).abs());
            assert!(dev < 1e-12, "seed {seed} {}: got ({}, {}, {}) want ({map}, {pv}, {q})", g.id, g.map, g.p_value, g.q_value);
            assert_eq!(g.retrieved, q < 0.05);
            worst = worst.max(dev);
        }
        instances += 1;
    }

    let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
    assert!(close(&bh_qvalues(&[0.01, 0.04, 0.03, 0.005]), &[0.02, 0.04, 0.04, 0.02]), "BH fixture");
    assert!(close(&bh_qvalues(&[0.01, 0.02, 0.03, 0.5]), &[0.04, 0.04, 0.04, 0.5]), "BH fixture");

    let mut fractions = Vec::new();
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let mut records = Vec::new();
        for p in 0..8 {
            for _ in 0..3 {
                let v = normal_vec(&mut rng, 16);
                records.push(rec(records.len(), &format!("G{p}"), v));
            }
        }
        for _ in 0..30 {
            let v = normal_vec(&mut rng, 16);
            records.push(rec(records.len(), NEG_CONTROL, v));
        }
        let task = RetrievalTask::perturbation(&records, 200);
        fractions.push(retrieval_benchmark(&records, &task, seed).unwrap().fraction_retrieved);
    }
    let mean = fractions.iter().sum::<f64>() / 50.0;
    assert!(mean <= 0.05, "mean retrieved fraction under random labels {mean}");
    format!("{instances} oracle instances (max dev {worst:.1e}), BH fixtures, random-label fraction {mean:.3}")
}

pub fn ap_oracle() -> String {
    let mut checked = 0;
    for len in 1..=8usize {
        for bits in 0u32..(1 << len) {
            let rel: Vec<bool> = (0..len).map(|i| bits >> i & 1 == 1).collect();
            match oracles::average_precision(&rel) {
                Some(want) => {
                    let got = average_precision(&rel).unwrap();
                    assert!((got - want).abs() < 1e-12, "{rel:?}: {got} vs {want}");
                    checked += 1;
                }
                None => assert!(average_precision(&rel).is_err(), "{rel:?} has no positives"),
            }
        }
    }
    format!("{checked} sequences with a positive, all-negative sequences rejected")
}

fn feature_table(columns: Vec<Vec<f64>>) -> FeatureTable {
    let n = columns[0].len();
    let cats: Vec<FeatureCategory> = (0..columns.len()).map(|j| FeatureCategory::ALL[j % 5]).collect();
    let names = cats.iter().enumerate().map(|(j, c)| format!("{}_f{j}", c.name())).collect();
    FeatureTable::new((0..n).map(|i| format!("W{i}")).collect(), names, cats, columns).unwrap()
}

pub fn regression_sanity() -> String {
    let d = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let embed = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Vec<f64>> { (0..n).map(|_| normal_vec(rng, d)).collect() };
    let linear = |x: &[Vec<f64>], betas: &[Vec<f64>]| -> Vec<Vec<f64>> {
        betas
            .iter()
            .map(|b| x.iter().map(|r| 2.0 + r.iter().zip(b).map(|(a, c)| a * c).sum::<f64>()).collect())
            .collect()
    };
    let betas: Vec<Vec<f64>> = (0..5).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let (xtr, xte) = (embed(&mut rng, 400), embed(&mut rng, 200));
    let report = fit_feature_regressors(
        &xtr,
        &feature_table(linear(&xtr, &betas)),
        &xte,
        &feature_table(linear(&xte, &betas)),
    )
    .unwrap();
    let min_r2 = report.features.iter().map(|f| f.r2).fold(f64::INFINITY, f64::min);
    assert!(min_r2 >= 0.999, "linear targets: min test R2 {min_r2}");

    let mut permuted = Vec::new();
    for _ in 0..10 {
        let (xtr, xte) = (embed(&mut rng, 200), embed(&mut rng, 100));
        let mut tr = linear(&xtr, &betas[..4]);
        let mut te = linear(&xte, &betas[..4]);
        tr.iter_mut().chain(te.iter_mut()).for_each(|c| c.shuffle(&mut rng));
        let r = fit_feature_regressors(&xtr, &feature_table(tr), &xte, &feature_table(te)).unwrap();
        permuted.extend(r.features.iter().map(|f| f.r2));
    }
    let mean_perm = permuted.iter().sum::<f64>() / permuted.len() as f64;
    assert!(mean_perm <= 0.05, "permuted targets: mean test R2 {mean_perm}");

    // Two-point columns put the skew on either side of the +/-0.5 thresholds.
    let two_point = |k: usize| -> Vec<f64> { (0..100).map(|i| if i < k { 1.0 } else { 0.0 }).collect() };
    let mirror = |c: Vec<f64>| -> Vec<f64> { c.into_iter().map(|v| 1.0 - v).collect() };
    let branch = |c: &[f64]| ColumnTransform::fit(c).branch;
    assert_eq!(branch(&two_point(37)), SkewBranch::Log);
    assert_eq!(branch(&two_point(38)), SkewBranch::Identity);
    assert_eq!(branch(&mirror(two_point(37))), SkewBranch::Square);
    assert_eq!(branch(&mirror(two_point(38))), SkewBranch::Identity);
    let exp = Exp::new(1.0).unwrap();
    let shifted: Vec<f64> = (0..2000).map(|_| rng.sample::<f64, _>(exp) - 0.5).collect();
    let t = ColumnTransform::fit(&shifted);
    let min = shifted.iter().copied().fold(f64::INFINITY, f64::min);
    assert_eq!(t.branch, SkewBranch::Log);
    assert_eq!(t.shift, 1.0 - min, "log shift");
    format!("linear min R2 {min_r2:.5}, permuted mean R2 {mean_perm:.4}, skew branches exact")
}
