use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use phenom_cli::commands::{init_model, load_train_config, Common};
use phenom_cli::manifest::MANIFEST_FILE;
use phenom_core::checkpoint::{AnyModel, Checkpoint};
use phenom_eval::report::BenchmarkReport;

fn phenom(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_phenom"))
        .args(args)
        .env_remove("PHENOM_SEED")
        .output()
        .expect("spawn phenom");
    assert!(
        out.status.success(),
        "phenom {} failed: {}",
        args[0],
        String::from_utf8_lossy(&out.stderr).trim()
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// embed -> transform -> benchmark for one checkpoint; returns (raw, transformed) recall.
fn score(ckpt: &Path, data: &Path, dir: &Path) -> (f64, f64) {
    let emb = dir.join("emb");
    let tvn = dir.join("tvn");
    phenom(&["embed", "--checkpoint", s(ckpt), "--dataset", s(data), "--out", s(&emb)]);
    phenom(&["transform", "--table", s(&emb), "--pipeline", "tvn:ridge", "--out", s(&tvn)]);
    let db = data.join("relationships.csv");
    let recall = |table: &Path, name: &str| {
        let out = dir.join(name);
        phenom(&["benchmark", "--table", s(table), "--db", s(&db), "--out", s(&out)]);
        BenchmarkReport::read(&out.join("report.json")).unwrap().recall[0].recall
    };
    (recall(&emb, "bench_raw"), recall(&tvn, "bench_tvn"))
}

pub fn flagship() -> String {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let start = Instant::now();
    phenom(&["synth", "--out", s(&data), "--n_controls_per_plate", "24"]);
    let synth_cfg: toml::Table = std::fs::read_to_string(data.join("config.toml")).unwrap().parse().unwrap();
    let batch = synth_cfg["batch_effect_scale"].as_float().unwrap();
    assert!(batch > 0.0, "batch_effect_scale {batch}");

    let train = tmp.path().join("train");
    phenom(&[
        "train", "--dataset", s(&data), "--out", s(&train),
        "--epochs", "120", "--batch_size", "8", "--max_lr", "0.004",
    ]);
    let (trained_raw, trained_tvn) = score(&train.join("model.ckpt"), &data, &tmp.path().join("trained"));
    let minutes = start.elapsed().as_secs_f64() / 60.0;

    // Same config, same derived init seed, zero steps.
    let cfg_path = train.join("config.toml");
    let run = load_train_config(&Common { config: Some(&cfg_path), overrides: &[], out: tmp.path() }).unwrap();
    let untrained_ckpt = tmp.path().join("untrained.ckpt");
    match init_model(&run, 6, 0).unwrap() {
        AnyModel::Mae(m) => Checkpoint::from_mae(&m, None).write(&untrained_ckpt).unwrap(),
        _ => panic!("flagship trains an MAE"),
    }
    let (untrained_raw, untrained_tvn) = score(&untrained_ckpt, &data, &tmp.path().join("untrained"));

    let detail = format!(
        "recall trained {trained_tvn:.3} (raw {trained_raw:.3}), untrained {untrained_tvn:.3} (raw {untrained_raw:.3}); \
         synth+train+embed {minutes:.1} min"
    );
    assert!(trained_tvn > untrained_tvn, "trained <= untrained: {detail}");
    assert!(trained_tvn > trained_raw, "TVN <= no transform: {detail}");
    assert!(trained_tvn >= 0.15, "trained recall below 0.15: {detail}");
    assert!(minutes <= 30.0, "over 30 minutes: {detail}");
    detail
}

/// Every file under `dir` except run manifests.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else if p.file_name().unwrap() != MANIFEST_FILE {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

pub fn determinism() -> String {
    let tmp = tempfile::tempdir().unwrap();
    let small = [
        "--n_genes", "8", "--n_replicates_per_gene", "2", "--n_controls_per_plate", "2",
        "--relationship_blocks", "[[0, 1], [2, 3, 4]]", "--render.image_size", "64",
    ];
    let commands = ["synth", "train", "embed", "transform", "benchmark", "report"];
    let mut runs = Vec::new();
    for run in ["a", "b"] {
        let root = tmp.path().join(run);
        let d = |name: &str| root.join(name);
        let data = d("synth");
        let mut synth = vec!["synth", "--out", s(&data), "--seed", "7"];
        synth.extend_from_slice(&small);
        phenom(&synth);
        phenom(&["train", "--dataset", s(&data), "--out", s(&d("train")), "--epochs", "2", "--batch_size", "4", "--seed", "7"]);
        phenom(&["embed", "--checkpoint", s(&d("train").join("model.ckpt")), "--dataset", s(&data), "--out", s(&d("embed"))]);
        phenom(&["transform", "--table", s(&d("embed")), "--pipeline", "center_by:plate,tvn:ridge", "--out", s(&d("transform"))]);
        phenom(&[
            "benchmark", "--table", s(&d("transform")), "--db", s(&data.join("relationships.csv")),
            "--features", s(&data.join("features.csv")), "--retrieval", "true", "--n_permutations", "200",
            "--seed", "7", "--out", s(&d("benchmark")),
        ]);
        phenom(&["report", "--input", s(&d("benchmark")), "--markdown", "--out", s(&d("report"))]);
        for c in commands {
            assert!(d(c).join(MANIFEST_FILE).exists(), "{c} wrote no manifest");
        }
        runs.push(root);
    }
    let mut files = 0;
    for c in commands {
        let a = snapshot(&runs[0].join(c));
        let b = snapshot(&runs[1].join(c));
        assert!(!a.is_empty(), "{c} wrote nothing");
        for (path, bytes) in &a {
            assert!(b.get(path) == Some(bytes), "{c}: {} differs between runs", path.display());
        }
        assert_eq!(a.len(), b.len(), "{c}: file sets differ");
        files += a.len();
    }
    format!("{} commands run twice, {files} output files byte-identical", commands.len())
}
