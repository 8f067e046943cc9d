//! Predicting hand-engineered image features from embeddings with
//! cross-validated elastic nets.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FeatureCategory {
    AreaShape,
    Intensity,
    Neighbors,
    RadialDistribution,
    Texture,
}

impl FeatureCategory {
    pub const ALL: [Self; 5] = [
        Self::AreaShape,
        Self::Intensity,
        Self::Neighbors,
        Self::RadialDistribution,
        Self::Texture,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::AreaShape => "AreaShape",
            Self::Intensity => "Intensity",
            Self::Neighbors => "Neighbors",
            Self::RadialDistribution => "RadialDistribution",
            Self::Texture => "Texture",
        }
    }

    /// Category from a `<Category>_...` column name.
    pub fn from_column(name: &str) -> Option<Self> {
        let prefix = name.split('_').next()?;
        Self::ALL.into_iter().find(|c| c.name() == prefix)
    }
}

/// Column-major feature table aligned to wells.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub well_ids: Vec<String>,
    pub names: Vec<String>,
    pub categories: Vec<FeatureCategory>,
    /// `columns[j][i]` is feature `j` of well `i`.
    pub columns: Vec<Vec<f64>>,
}

impl FeatureTable {
    pub fn new(
        well_ids: Vec<String>,
        names: Vec<String>,
        categories: Vec<FeatureCategory>,
        columns: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if names.len() != columns.len() || categories.len() != columns.len() {
            return Err(Error::Dimension(format!(
                "{} names, {} categories, {} columns",
                names.len(),
                categories.len(),
                columns.len()
            )));
        }
        for (j, c) in columns.iter().enumerate() {
            if c.len() != well_ids.len() {
                return Err(Error::Dimension(format!(
                    "column {} has {} rows for {} wells",
                    names[j],
                    c.len(),
                    well_ids.len()
                )));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "column {} has non-finite values",
                    names[j]
                )));
            }
        }
        Ok(Self {
            well_ids,
            names,
            categories,
            columns,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.well_ids.len()
    }

    /// Read a CSV with a `well_id` column followed by `<Category>_...` feature columns.
    pub fn read_csv(path: &std::path::Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let headers = r.headers()?.clone();
        if headers.get(0) != Some("well_id") {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: "first column must be well_id".into(),
            });
        }
        let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
        let categories = names
            .iter()
            .map(|n| {
                FeatureCategory::from_column(n).ok_or_else(|| Error::Format {
                    path: path.to_path_buf(),
                    msg: format!("column {n:?} has no known category prefix"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut well_ids = Vec::new();
        let mut columns = vec![Vec::new(); names.len()];
        for rec in r.records() {
            let rec = rec?;
            well_ids.push(rec.get(0).unwrap_or_default().to_string());
            for (j, col) in columns.iter_mut().enumerate() {
                let s = rec.get(j + 1).unwrap_or_default();
                col.push(s.parse().map_err(|_| Error::Format {
                    path: path.to_path_buf(),
                    msg: format!("bad number {s:?} in column {}", names[j]),
                })?);
            }
        }
        Self::new(well_ids, names, categories, columns)
    }

    /// Keep the given rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            well_ids: rows.iter().map(|&i| self.well_ids[i].clone()).collect(),
            names: self.names.clone(),
            categories: self.categories.clone(),
            columns: self
                .columns
                .iter()
                .map(|c| rows.iter().map(|&i| c[i]).collect())
                .collect(),
        }
    }
}

/// Fisher-Pearson sample skewness `m3 / m2^1.5`; 0 for constant data.
pub fn skewness(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let m2 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m3 = x.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
    if m2 <= 0.0 {
        0.0
    } else {
        m3 / m2.powf(1.5)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkewBranch {
    Log,
    Square,
    Identity,
}

pub const SKEW_THRESHOLD: f64 = 0.5;

/// A per-column feature transform fitted on one table and reusable on another.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColumnTransform {
    pub branch: SkewBranch,
    /// Added before the log branch; values below the fitted minimum are clamped to it.
    pub shift: f64,
    pub floor: f64,
    pub mean: f64,
    pub std: f64,
}

impl ColumnTransform {
    /// Log if skew > 0.5 (shifted by `1 - min` when `min <= 0`), square if
    /// skew < -0.5, else unchanged; then standardize.
    pub fn fit(col: &[f64]) -> Self {
        let s = skewness(col);
        let branch = if s > SKEW_THRESHOLD {
            SkewBranch::Log
        } else if s < -SKEW_THRESHOLD {
            SkewBranch::Square
        } else {
            SkewBranch::Identity
        };
        let floor = col.iter().copied().fold(f64::INFINITY, f64::min);
        let shift = if floor <= 0.0 { 1.0 - floor } else { 0.0 };
        let mut t = Self {
            branch,
            shift,
            floor,
            mean: 0.0,
            std: 1.0,
        };
        let raw: Vec<f64> = col.iter().map(|&v| t.reshape(v)).collect();
        let n = raw.len() as f64;
        t.mean = raw.iter().sum::<f64>() / n;
        let std = (raw.iter().map(|v| (v - t.mean).powi(2)).sum::<f64>() / n).sqrt();
        t.std = if std > 0.0 { std } else { 1.0 };
        t
    }

    fn reshape(&self, v: f64) -> f64 {
        match self.branch {
            SkewBranch::Log => (v.max(self.floor) + self.shift).ln(),
            SkewBranch::Square => v * v,
            SkewBranch::Identity => v,
        }
    }

    pub fn apply(&self, v: f64) -> f64 {
        (self.reshape(v) - self.mean) / self.std
    }
}

/// Fit [`ColumnTransform`]s on `table` and apply them to it.
pub fn skew_transform(table: &FeatureTable) -> (FeatureTable, Vec<SkewBranch>) {
    let fitted: Vec<ColumnTransform> = table
        .columns
        .iter()
        .map(|c| ColumnTransform::fit(c))
        .collect();
    let out = apply_transforms(table, &fitted);
    (out, fitted.iter().map(|t| t.branch).collect())
}

pub fn apply_transforms(table: &FeatureTable, transforms: &[ColumnTransform]) -> FeatureTable {
    let mut out = table.clone();
    for (col, t) in out.columns.iter_mut().zip(transforms) {
        col.iter_mut().for_each(|v| *v = t.apply(*v));
    }
    out
}

pub const L1_RATIOS: [f64; 5] = [0.1, 0.6, 0.9, 0.95, 0.99];
pub const N_ALPHAS: usize = 100;
pub const ALPHA_RANGE: f64 = 1e-3;
pub const N_FOLDS: usize = 5;
const MAX_ITER: usize = 1000;
const TOL: f64 = 1e-7;

/// Centered design statistics for coordinate descent on the Gram matrix.
struct Design {
    gram: Vec<f64>,
    xty: Vec<f64>,
    d: usize,
    n: f64,
    x_mean: Vec<f64>,
    y_mean: f64,
}

impl Design {
    fn new(x: &[Vec<f64>], y: &[f64], rows: &[usize]) -> Self {
        let d = x[0].len();
        let n = rows.len() as f64;
        let mut x_mean = vec![0.0; d];
        let mut y_mean = 0.0;
        for &i in rows {
            for (m, v) in x_mean.iter_mut().zip(&x[i]) {
                *m += v / n;
            }
            y_mean += y[i] / n;
        }
        let mut gram = vec![0.0; d * d];
        let mut xty = vec![0.0; d];
        let mut xc = vec![0.0; d];
        for &i in rows {
            for k in 0..d {
                xc[k] = x[i][k] - x_mean[k];
            }
            let yc = y[i] - y_mean;
            for a in 0..d {
                xty[a] += xc[a] * yc;
                let row = &mut gram[a * d..(a + 1) * d];
                for b in a..d {
                    row[b] += xc[a] * xc[b];
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                gram[a * d + b] = gram[b * d + a];
            }
        }
        Self {
            gram,
            xty,
            d,
            n,
            x_mean,
            y_mean,
        }
    }

    fn alpha_max(&self, l1_ratio: f64) -> f64 {
        let m = self.xty.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        (m / (self.n * l1_ratio)).max(f64::MIN_POSITIVE)
    }

    /// Minimize `1/(2n)|y - Xw|^2 + alpha*(r|w|_1 + (1-r)/2 |w|^2)` in place.
    fn solve(&self, alpha: f64, l1_ratio: f64, w: &mut [f64], gw: &mut [f64]) {
        let d = self.d;
        let l1 = alpha * l1_ratio * self.n;
        let l2 = alpha * (1.0 - l1_ratio) * self.n;
        for _ in 0..MAX_ITER {
            let mut max_delta = 0.0f64;
            let mut max_w = 0.0f64;
            for j in 0..d {
                let gjj = self.gram[j * d + j];
                if gjj <= 0.0 {
                    continue;
                }
                let rho = self.xty[j] - gw[j] + gjj * w[j];
                let new = soft_threshold(rho, l1) / (gjj + l2);
                let delta = new - w[j];
                if delta != 0.0 {
                    let col = &self.gram[j * d..(j + 1) * d];
                    for (g, c) in gw.iter_mut().zip(col) {
                        *g += c * delta;
                    }
                    w[j] = new;
                }
                max_delta = max_delta.max(delta.abs());
                max_w = max_w.max(new.abs());
            }
            if max_delta <= TOL * max_w.max(1e-12) {
                break;
            }
        }
    }

    fn intercept(&self, w: &[f64]) -> f64 {
        self.y_mean - w.iter().zip(&self.x_mean).map(|(a, b)| a * b).sum::<f64>()
    }
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

fn alpha_path(alpha_max: f64) -> Vec<f64> {
    let lo = alpha_max * ALPHA_RANGE;
    (0..N_ALPHAS)
        .map(|i| alpha_max * (lo / alpha_max).powf(i as f64 / (N_ALPHAS - 1) as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElasticNetFit {
    pub l1_ratio: f64,
    pub alpha: f64,
    pub coef: Vec<f64>,
    pub intercept: f64,
}

impl ElasticNetFit {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + self.coef.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
    }
}

/// Contiguous K-fold boundaries over `n` rows.
fn folds(n: usize, k: usize) -> Vec<std::ops::Range<usize>> {
    let base = n / k;
    let extra = n % k;
    let mut start = 0;
    (0..k)
        .map(|f| {
            let len = base + usize::from(f < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// Grid search over [`L1_RATIOS`] and a data-driven alpha path with
/// contiguous 5-fold cross-validation, then refit on all rows.
pub fn fit_elastic_net_cv(x: &[Vec<f64>], y: &[f64]) -> Result<ElasticNetFit> {
    let n = x.len();
    if n < N_FOLDS {
        return Err(Error::InvalidArgument(format!(
            "{n} training rows, at least {N_FOLDS} needed"
        )));
    }
    if y.len() != n {
        return Err(Error::Dimension(format!(
            "{} targets for {n} rows",
            y.len()
        )));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::Dimension("ragged design matrix".into()));
    }
    let all: Vec<usize> = (0..n).collect();
    let full = Design::new(x, y, &all);
    let fold_designs: Vec<(Design, std::ops::Range<usize>)> = folds(n, N_FOLDS)
        .into_iter()
        .map(|test| {
            let train: Vec<usize> = (0..n).filter(|i| !test.contains(i)).collect();
            (Design::new(x, y, &train), test)
        })
        .collect();
    let mut best: Option<(f64, f64, f64)> = None;
    for &r in &L1_RATIOS {
        let path = alpha_path(full.alpha_max(r));
        let mut mse = vec![0.0; path.len()];
        for (design, test) in &fold_designs {
            let mut w = vec![0.0; d];
            let mut gw = vec![0.0; d];
            for (ai, &alpha) in path.iter().enumerate() {
                design.solve(alpha, r, &mut w, &mut gw);
                let b = design.intercept(&w);
                for i in test.clone() {
                    let pred = b + w.iter().zip(&x[i]).map(|(a, v)| a * v).sum::<f64>();
                    mse[ai] += (y[i] - pred).powi(2) / n as f64;
                }
            }
        }
        for (ai, &m) in mse.iter().enumerate() {
            if best.is_none_or(|(bm, _, _)| m < bm) {
                best = Some((m, r, path[ai]));
            }
        }
    }
    let (_, l1_ratio, alpha) = best.expect("non-empty grid");
    // Refit along the path down to the chosen alpha for a warm start.
    let mut w = vec![0.0; d];
    let mut gw = vec![0.0; d];
    for a in alpha_path(full.alpha_max(l1_ratio))
        .into_iter()
        .filter(|&a| a >= alpha)
    {
        full.solve(a, l1_ratio, &mut w, &mut gw);
    }
    let intercept = full.intercept(&w);
    Ok(ElasticNetFit {
        l1_ratio,
        alpha,
        coef: w,
        intercept,
    })
}

pub fn r_squared(y: &[f64], pred: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res: f64 = y.iter().zip(pred).map(|(a, b)| (a - b).powi(2)).sum();
    if ss_tot == 0.0 {
        if ss_res == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - ss_res / ss_tot
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median absolute deviation from the median (unscaled).
pub fn mad(values: &[f64]) -> f64 {
    let m = median(values);
    let dev: Vec<f64> = values.iter().map(|v| (v - m).abs()).collect();
    median(&dev)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScore {
    pub name: String,
    pub category: FeatureCategory,
    pub r2: f64,
    pub l1_ratio: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySummary {
    pub category: FeatureCategory,
    pub n_features: usize,
    pub median_r2: f64,
    pub mad_r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub features: Vec<FeatureScore>,
    pub categories: Vec<CategorySummary>,
}

/// Per-column (mean, std) of a row-major matrix; constant columns get std 1.
fn column_stats(x: &[Vec<f64>]) -> Vec<(f64, f64)> {
    let n = x.len() as f64;
    (0..x[0].len())
        .map(|j| {
            let mean = x.iter().map(|r| r[j]).sum::<f64>() / n;
            let std = (x.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n).sqrt();
            (mean, if std > 0.0 { std } else { 1.0 })
        })
        .collect()
}

fn standardize_with(x: &[Vec<f64>], stats: &[(f64, f64)]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|r| r.iter().zip(stats).map(|(v, (m, s))| (v - m) / s).collect())
        .collect()
}

/// One cross-validated elastic net per feature column, scored by test R².
/// Embedding standardization and feature skew transforms are fitted on the
/// training rows and applied unchanged to the test rows.
pub fn fit_feature_regressors(
    train_embeddings: &[Vec<f64>],
    train_features: &FeatureTable,
    test_embeddings: &[Vec<f64>],
    test_features: &FeatureTable,
) -> Result<RegressionReport> {
    if train_embeddings.len() != train_features.n_rows()
        || test_embeddings.len() != test_features.n_rows()
    {
        return Err(Error::Dimension(
            "embedding and feature rows are not aligned".into(),
        ));
    }
    if train_features.names != test_features.names {
        return Err(Error::Dimension(
            "train and test feature columns differ".into(),
        ));
    }
    if train_embeddings.len() < N_FOLDS {
        return Err(Error::InvalidArgument(format!(
            "{} training rows, at least {N_FOLDS} needed",
            train_embeddings.len()
        )));
    }
    let d = train_embeddings[0].len();
    if test_embeddings
        .iter()
        .chain(train_embeddings)
        .any(|r| r.len() != d)
    {
        return Err(Error::Dimension("embedding dimensions differ".into()));
    }
    let stats = column_stats(train_embeddings);
    let xtr = standardize_with(train_embeddings, &stats);
    let xte = standardize_with(test_embeddings, &stats);
    let fitted: Vec<ColumnTransform> = train_features
        .columns
        .iter()
        .map(|c| ColumnTransform::fit(c))
        .collect();
    let ytr = apply_transforms(train_features, &fitted);
    let yte = apply_transforms(test_features, &fitted);
    let features: Vec<FeatureScore> = (0..ytr.columns.len())
        .into_par_iter()
        .map(|j| {
            let fit = fit_elastic_net_cv(&xtr, &ytr.columns[j])?;
            let pred: Vec<f64> = xte.iter().map(|r| fit.predict(r)).collect();
            Ok(FeatureScore {
                name: ytr.names[j].clone(),
                category: ytr.categories[j],
                r2: r_squared(&yte.columns[j], &pred),
                l1_ratio: fit.l1_ratio,
                alpha: fit.alpha,
            })
        })
        .collect::<Result<_>>()?;
    let mut by_cat: BTreeMap<FeatureCategory, Vec<f64>> = BTreeMap::new();
    for f in &features {
        by_cat.entry(f.category).or_default().push(f.r2);
    }
    let categories = by_cat
        .into_iter()
        .map(|(category, r2)| CategorySummary {
            category,
            n_features: r2.len(),
            median_r2: median(&r2),
            mad_r2: mad(&r2),
        })
        .collect();
    Ok(RegressionReport {
        features,
        categories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fold_sizes() {
        let f = folds(12, 5);
        assert_eq!(
            f.iter().map(|r| r.len()).collect::<Vec<_>>(),
            vec![3, 3, 2, 2, 2]
        );
        assert_eq!(f[4].end, 12);
    }

    #[test]
    fn alpha_path_spans_three_decades() {
        let p = alpha_path(2.0);
        assert_eq!(p.len(), 100);
        assert_eq!(p[0], 2.0);
        assert!((p[99] - 2e-3).abs() < 1e-15);
    }

    #[test]
    fn skew_branches() {
        let sym: Vec<f64> = (0..11).map(|i| i as f64).collect();
        let right: Vec<f64> = (0..50).map(|i| (i as f64 / 10.0).exp()).collect();
        let left: Vec<f64> = right.iter().map(|v| -v).collect();
        let t = FeatureTable::new(
            (0..50).map(|i| i.to_string()).collect(),
            vec!["Texture_a".into(), "Texture_b".into()],
            vec![FeatureCategory::Texture; 2],
            vec![right, left],
        )
        .unwrap();
        let (_, b) = skew_transform(&t);
        assert_eq!(b, vec![SkewBranch::Log, SkewBranch::Square]);
        assert!(skewness(&sym).abs() < 1e-12);
    }

    #[test]
    fn median_and_mad() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(mad(&[1.0, 2.0, 3.0, 4.0, 100.0]), 1.0);
    }
}
