//! The pipeline commands. Each reads its inputs fully, computes, then
//! writes its artifacts and finally the run manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use chrono::Utc;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use phenom_core::ca_mae::{CaMaeModel, EmbedMode};
use phenom_core::checkpoint::{AnyModel, Checkpoint};
use phenom_core::data::image::tile_image;
use phenom_core::data::io::{read_dataset, write_dataset};
use phenom_core::data::synth::{feature_names, generate, SynthConfig};
use phenom_core::data::{RelationshipDb, WellImage};
use phenom_core::mae::{MaeModel, WslModel};
use phenom_core::seed;
use phenom_core::trainer::{fit, FitOptions, Objective, TrainConfig, TrainItem, Trainable};
use phenom_core::vit::{Variant, ViTConfig};
use phenom_eval::benchmarks::{
    fit_feature_regressors, recall_counts, cosine_similarity_matrix, retrieval_benchmark, FeatureTable,
    RetrievalTask,
};
use phenom_eval::postprocess::{aggregate_well, parse_pipeline, perturbation_means, run_pipeline};
use phenom_eval::report::{render_markdown, BenchmarkReport, ContextKey, RecallEntry, RetrievalEntry};
use phenom_eval::table::{read_table, write_table, EmbeddingRecord};

use crate::config::{resolve, Resolved};
use crate::manifest::RunManifest;

pub const RELATIONSHIPS_FILE: &str = "relationships.csv";
pub const FEATURES_FILE: &str = "features.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CURVE_FILE: &str = "loss_curve.csv";
pub const TABLE_STEM: &str = "embeddings";
pub const REPORT_FILE: &str = "report.json";

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_config<T: Serialize>(dir: &Path, config: &T) -> Result<()> {
    fs::write(dir.join(CONFIG_FILE), toml::to_string(config)?)?;
    Ok(())
}

/// `dir/embeddings` for a directory, otherwise the path minus any table extension.
pub fn table_stem(path: &Path) -> PathBuf {
    if path.is_dir() {
        return path.join(TABLE_STEM);
    }
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv" | "f32" | "json") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

pub struct Common<'a> {
    pub config: Option<&'a Path>,
    pub overrides: &'a [(String, String)],
    pub out: &'a Path,
}

impl Common<'_> {
    fn resolve(&self) -> Result<Resolved> {
        resolve(self.config, self.overrides)
    }

    fn finish(&self, command: &str, seed: u64, started: chrono::DateTime<Utc>) -> Result<()> {
        RunManifest::new(command, self.config, seed, self.out, started).write(self.out)
    }
}

// ---------------------------------------------------------------- synth

pub fn synth(c: &Common) -> Result<()> {
    let started = Utc::now();
    let cfg: SynthConfig = c.resolve()?.into_config()?;
    let ds = generate(&cfg)?;
    prepare_out(c.out)?;
    write_dataset(c.out, &ds.images)?;
    ds.relationships.write_csv(&c.out.join(RELATIONSHIPS_FILE))?;
    let mut w = std::io::BufWriter::new(fs::File::create(c.out.join(FEATURES_FILE))?);
    writeln!(w, "well_id,{}", feature_names(cfg.render.channels).join(","))?;
    for (img, row) in ds.images.iter().zip(ds.feature_table()) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{},{}", img.meta.well_id, cells.join(","))?;
    }
    w.flush()?;
    write_config(c.out, &cfg)?;
    c.finish("synth", cfg.seed, started)
}

// ---------------------------------------------------------------- train

/// Architecture section (`[model]`) of a training config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub variant: Variant,
    pub patch_size: usize,
    /// Defaults to the variant's crop size.
    pub crop_size: Option<usize>,
    pub norm_pix_loss: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            variant: Variant::TinyTest,
            patch_size: 8,
            crop_size: None,
            norm_pix_loss: true,
        }
    }
}

impl ModelSpec {
    pub fn vit(&self, channels: usize) -> ViTConfig {
        let mut cfg = ViTConfig::preset(self.variant, self.patch_size, channels);
        if self.variant == Variant::TinyTest {
            cfg.patch_size = self.patch_size;
        }
        if let Some(s) = self.crop_size {
            cfg.crop_size = s;
        }
        cfg.norm_pix_loss = self.norm_pix_loss;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainRun {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub model: ModelSpec,
}

pub fn load_train_config(c: &Common) -> Result<TrainRun> {
    let mut resolved = c.resolve()?;
    let model: ModelSpec = resolved.take("model")?;
    let train: TrainConfig = resolved.into_config()?;
    train.validate()?;
    Ok(TrainRun { train, model })
}

/// Class index per perturbation id, in sorted id order.
pub fn label_index(images: &[WellImage]) -> BTreeMap<String, usize> {
    let ids: BTreeSet<&str> = images.iter().map(|i| i.meta.perturbation_id.as_str()).collect();
    ids.into_iter().enumerate().map(|(i, s)| (s.to_string(), i)).collect()
}

/// Fresh model for a run; its seed is derived from the training seed.
pub fn init_model(run: &TrainRun, channels: usize, n_classes: usize) -> Result<AnyModel> {
    let cfg = run.model.vit(channels);
    let s = seed::derive(run.train.seed, &[0x696e_6974]);
    Ok(match run.train.objective {
        Objective::Mae => AnyModel::Mae(MaeModel::new(cfg, s)?),
        Objective::CaMae => AnyModel::CaMae(CaMaeModel::new(cfg, s)?),
        Objective::Wsl => AnyModel::Wsl(WslModel::new(cfg, n_classes, s)?),
    })
}

fn fit_any<M: Trainable>(
    items: &[TrainItem],
    model: &mut M,
    cfg: &TrainConfig,
    options: FitOptions,
    out: &Path,
) -> Result<()> {
    let outcome = fit(items, model, cfg, options)?;
    model.to_checkpoint(Some(&outcome.state)).write(&out.join(CHECKPOINT_FILE))?;
    let mut csv = Vec::new();
    outcome.curve.write_csv(&mut csv)?;
    fs::write(out.join(CURVE_FILE), csv)?;
    Ok(())
}

pub fn train(c: &Common, dataset: &Path, resume: Option<&Path>) -> Result<()> {
    let started = Utc::now();
    let run = load_train_config(c)?;
    let images = read_dataset(dataset).with_context(|| format!("reading dataset {}", dataset.display()))?;
    ensure!(!images.is_empty(), "dataset {} has no wells", dataset.display());
    let channels = images[0].channels();
    ensure!(images.iter().all(|i| i.channels() == channels), "wells disagree on channel count");
    let labels = label_index(&images);
    let items: Vec<TrainItem> = images
        .into_iter()
        .map(|image| {
            let label = (run.train.objective == Objective::Wsl).then(|| labels[&image.meta.perturbation_id]);
            TrainItem { image, label }
        })
        .collect();
    let (mut model, state) = match resume {
        Some(p) => {
            let (m, state) = Checkpoint::read(p)?.into_model()?;
            let state = state.with_context(|| format!("{} holds no training state", p.display()))?;
            (m, Some(state))
        }
        None => (init_model(&run, channels, labels.len())?, None),
    };
    let expected = match run.train.objective {
        Objective::Mae => phenom_core::checkpoint::ModelKind::Mae,
        Objective::CaMae => phenom_core::checkpoint::ModelKind::CaMae,
        Objective::Wsl => phenom_core::checkpoint::ModelKind::Wsl,
    };
    ensure!(model.kind() == expected, "checkpoint holds a {:?} model, config asks for {:?}", model.kind(), expected);
    prepare_out(c.out)?;
    let ckpt_dir = c.out.join("checkpoints");
    prepare_out(&ckpt_dir)?;
    let options = FitOptions {
        checkpoint_dir: Some(ckpt_dir),
        resume: state,
        validation: None,
    };
    match &mut model {
        AnyModel::Mae(m) => fit_any(&items, m, &run.train, options, c.out)?,
        AnyModel::CaMae(m) => fit_any(&items, m, &run.train, options, c.out)?,
        AnyModel::Wsl(m) => fit_any(&items, m, &run.train, options, c.out)?,
    }
    write_config(c.out, &run)?;
    c.finish("train", run.train.seed, started)
}

// ---------------------------------------------------------------- embed

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedConfig {
    /// CA-MAE only: class_token, mean_all or concat_channel_means.
    pub mode: String,
    pub seed: u64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            mode: "mean_all".into(),
            seed: 0,
        }
    }
}

/// One row per well: the mean embedding over the well's non-overlapping
/// crop tiles.
pub fn embed_images(model: &AnyModel, images: &[WellImage], mode: EmbedMode) -> Result<Vec<EmbeddingRecord>> {
    let cfg = model.config();
    images
        .par_iter()
        .map(|img| {
            if !matches!(model, AnyModel::CaMae(_)) && img.channels() != cfg.in_channels {
                bail!(
                    "channel mismatch: well {} has {} channels, the model was trained on {}",
                    img.meta.well_id,
                    img.channels(),
                    cfg.in_channels
                );
            }
            let crops = tile_image(img, cfg.crop_size)?;
            let vecs: Vec<Vec<f64>> = crops
                .iter()
                .map(|crop| match model {
                    AnyModel::Mae(m) => m.extract_embedding(crop),
                    AnyModel::Wsl(m) => m.extract_embedding(crop),
                    AnyModel::CaMae(m) => m.ca_embed(crop, mode),
                })
                .collect::<phenom_core::Result<_>>()?;
            Ok(EmbeddingRecord::new(img.meta.clone(), aggregate_well(&vecs)?))
        })
        .collect()
}

pub fn embed(c: &Common, checkpoint: &Path, dataset: &Path) -> Result<()> {
    let started = Utc::now();
    let cfg: EmbedConfig = c.resolve()?.into_config()?;
    let (model, _) = Checkpoint::read(checkpoint)
        .with_context(|| format!("reading checkpoint {}", checkpoint.display()))?
        .into_model()?;
    let images = read_dataset(dataset).with_context(|| format!("reading dataset {}", dataset.display()))?;
    let mode: EmbedMode = cfg.mode.parse()?;
    let records = embed_images(&model, &images, mode)?;
    prepare_out(c.out)?;
    write_table(&c.out.join(TABLE_STEM), &records)?;
    write_config(c.out, &cfg)?;
    c.finish("embed", cfg.seed, started)
}

// ---------------------------------------------------------------- transform

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformConfig {
    /// Comma-separated ops, applied left to right.
    pub pipeline: String,
    pub seed: u64,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            pipeline: "tvn".into(),
            seed: 0,
        }
    }
}

pub fn transform(c: &Common, table: &Path) -> Result<()> {
    let started = Utc::now();
    let cfg: TransformConfig = c.resolve()?.into_config()?;
    let ops = parse_pipeline(&cfg.pipeline)?;
    let records = read_table(&table_stem(table))?;
    let out = run_pipeline(&records, &ops, None)?;
    prepare_out(c.out)?;
    write_table(&c.out.join(TABLE_STEM), &out)?;
    write_config(c.out, &cfg)?;
    c.finish("transform", cfg.seed, started)
}

// ---------------------------------------------------------------- benchmark

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub label: String,
    pub tail_pct: f64,
    /// Run perturbation retrieval against the table's negative controls.
    pub retrieval: bool,
    pub n_permutations: usize,
    pub q_threshold: f64,
    /// Experiments held out as the regression test split; empty means the
    /// last experiment in sorted order.
    pub test_experiments: Vec<String>,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            label: "embeddings".into(),
            tail_pct: 5.0,
            retrieval: false,
            n_permutations: 1000,
            q_threshold: 0.05,
            test_experiments: Vec::new(),
            seed: 0,
        }
    }
}

pub struct BenchmarkInputs<'a> {
    pub table: &'a Path,
    pub dbs: &'a [PathBuf],
    pub siblings: Option<&'a Path>,
    pub features: Option<&'a Path>,
}

/// Recall of each database over spherical-mean perturbation vectors.
pub fn recall_entries(records: &[EmbeddingRecord], dbs: &[RelationshipDb], tail_pct: f64) -> Result<Vec<RecallEntry>> {
    let means = perturbation_means(records)?;
    ensure!(means.len() >= 2, "recall needs at least two perturbations");
    let index = means.iter().enumerate().map(|(i, (id, _))| (id.clone(), i)).collect();
    let vectors: Vec<&[f64]> = means.iter().map(|(_, v)| v.as_slice()).collect();
    let sims = cosine_similarity_matrix(&vectors)?;
    dbs.iter()
        .map(|db| {
            let counts = recall_counts(&sims, db, &index, tail_pct)?;
            Ok(RecallEntry {
                database: db.name.clone(),
                tail_pct,
                recall: counts.recall(),
                n_pairs: counts.known,
            })
        })
        .collect()
}

/// `set_id,perturbation_id` rows.
fn read_siblings(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = r.headers()?.clone();
    ensure!(
        headers.iter().collect::<Vec<_>>() == ["set_id", "perturbation_id"],
        "{}: expected header set_id,perturbation_id",
        path.display()
    );
    let mut sets: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for row in r.records() {
        let row = row?;
        sets.entry(row[0].to_string()).or_default().push(row[1].to_string());
    }
    Ok(sets.into_iter().collect())
}

fn regression(
    records: &[EmbeddingRecord],
    features: &FeatureTable,
    cfg: &BenchmarkConfig,
) -> Result<phenom_eval::benchmarks::RegressionReport> {
    let by_well: BTreeMap<&str, usize> = features.well_ids.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();
    let test: BTreeSet<String> = if cfg.test_experiments.is_empty() {
        let exps: BTreeSet<&str> = records.iter().map(|r| r.meta.experiment_id.as_str()).collect();
        ensure!(exps.len() >= 2, "regression needs two experiments for a train/test split");
        exps.last().map(|s| s.to_string()).into_iter().collect()
    } else {
        cfg.test_experiments.iter().cloned().collect()
    };
    let (mut tr_x, mut tr_rows, mut te_x, mut te_rows) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for r in records {
        let row = *by_well
            .get(r.meta.well_id.as_str())
            .with_context(|| format!("well {} missing from the feature table", r.meta.well_id))?;
        if test.contains(&r.meta.experiment_id) {
            te_x.push(r.vector.clone());
            te_rows.push(row);
        } else {
            tr_x.push(r.vector.clone());
            tr_rows.push(row);
        }
    }
    ensure!(!te_x.is_empty(), "regression test split is empty");
    Ok(fit_feature_regressors(
        &tr_x,
        &features.select_rows(&tr_rows),
        &te_x,
        &features.select_rows(&te_rows),
    )?)
}

pub fn benchmark(c: &Common, inputs: &BenchmarkInputs) -> Result<()> {
    let started = Utc::now();
    let cfg: BenchmarkConfig = c.resolve()?.into_config()?;
    // Read everything before computing, so a missing file fails fast.
    let records = read_table(&table_stem(inputs.table))
        .with_context(|| format!("reading table {}", inputs.table.display()))?;
    let dbs: Vec<RelationshipDb> = inputs
        .dbs
        .iter()
        .map(|p| RelationshipDb::read_csv(p).with_context(|| format!("reading database {}", p.display())))
        .collect::<Result<_>>()?;
    let siblings = inputs.siblings.map(read_siblings).transpose()?;
    let features = inputs
        .features
        .map(|p| FeatureTable::read_csv(p).with_context(|| format!("reading features {}", p.display())))
        .transpose()?;

    let mut report = BenchmarkReport::new(cfg.label.clone());
    if !dbs.is_empty() {
        report.recall = recall_entries(&records, &dbs, cfg.tail_pct)?;
    }
    let mut tasks = Vec::new();
    if cfg.retrieval {
        tasks.push(RetrievalTask::perturbation(&records, cfg.n_permutations));
    }
    if let Some(sets) = &siblings {
        tasks.push(RetrievalTask::siblings(&records, sets, cfg.n_permutations));
    }
    for mut task in tasks {
        task.q_threshold = cfg.q_threshold;
        let result = retrieval_benchmark(&records, &task, cfg.seed)?;
        report.retrieval.push(RetrievalEntry::new(ContextKey::default(), result));
    }
    if let Some(f) = &features {
        report.regression = Some(regression(&records, f, &cfg)?);
    }
    ensure!(!report.is_empty(), "nothing to benchmark: pass --db, --siblings, --features or --retrieval true");
    prepare_out(c.out)?;
    report.write(&c.out.join(REPORT_FILE))?;
    write_config(c.out, &cfg)?;
    c.finish("benchmark", cfg.seed, started)
}

// ---------------------------------------------------------------- report

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub seed: u64,
}

/// Collect reports into `summary.json`; with `markdown`, also render
/// `summary.md` and print it.
pub fn report(c: &Common, inputs: &[PathBuf], markdown: bool) -> Result<()> {
    let started = Utc::now();
    let cfg: ReportConfig = c.resolve()?.into_config()?;
    ensure!(!inputs.is_empty(), "no reports given");
    let reports: Vec<BenchmarkReport> = inputs
        .iter()
        .map(|p| {
            let p = if p.is_dir() { p.join(REPORT_FILE) } else { p.clone() };
            BenchmarkReport::read(&p).with_context(|| format!("reading report {}", p.display()))
        })
        .collect::<Result<_>>()?;
    prepare_out(c.out)?;
    fs::write(c.out.join("summary.json"), serde_json::to_string_pretty(&reports)? + "\n")?;
    if markdown {
        let md = render_markdown(&reports);
        fs::write(c.out.join("summary.md"), &md)?;
        print!("{md}");
    }
    c.finish("report", cfg.seed, started)
}
