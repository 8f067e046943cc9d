//! Embedding corrections: well aggregation, group centering and scaling,
//! PCA, TVN whitening on negative controls and spherical means.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::table::{table_dim, EmbeddingRecord, GroupKey};

/// Floor on every standard-deviation or scale divisor.
pub const SCALE_EPS: f64 = 1e-6;

/// Arithmetic mean of one well's crop embeddings.
pub fn aggregate_well<V: AsRef<[f64]>>(crops: &[V]) -> Result<Vec<f64>> {
    let first = crops
        .first()
        .ok_or_else(|| Error::Empty("crop embeddings".into()))?;
    let d = first.as_ref().len();
    let mut sum = vec![0.0; d];
    for v in crops {
        let v = v.as_ref();
        if v.len() != d {
            return Err(Error::Dimension(format!(
                "crop embedding of length {} vs {d}",
                v.len()
            )));
        }
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
    }
    let n = crops.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

fn mean_of<'a>(rows: impl Iterator<Item = &'a [f64]>, d: usize) -> (Vec<f64>, usize) {
    let mut sum = vec![0.0; d];
    let mut n = 0;
    for r in rows {
        for (s, x) in sum.iter_mut().zip(r) {
            *s += x;
        }
        n += 1;
    }
    (sum.into_iter().map(|s| s / n.max(1) as f64).collect(), n)
}

fn groups(records: &[EmbeddingRecord], key: GroupKey) -> BTreeMap<&str, Vec<usize>> {
    let mut g: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        g.entry(key.of(r)).or_default().push(i);
    }
    g
}

/// Subtract each group's mean.
pub fn center_by(records: &[EmbeddingRecord], key: GroupKey) -> Result<Vec<EmbeddingRecord>> {
    let d = table_dim(records)?;
    let mut out = records.to_vec();
    for idx in groups(records, key).values() {
        let (mean, _) = mean_of(idx.iter().map(|&i| records[i].vector.as_slice()), d);
        for &i in idx {
            for (x, m) in out[i].vector.iter_mut().zip(&mean) {
                *x -= m;
            }
        }
    }
    Ok(out)
}

/// Per group and dimension, `(x - mean) / max(std, eps)` with the population std.
pub fn standardize_by(records: &[EmbeddingRecord], key: GroupKey) -> Result<Vec<EmbeddingRecord>> {
    let d = table_dim(records)?;
    let mut out = records.to_vec();
    for (name, idx) in groups(records, key) {
        if idx.len() < 2 {
            return Err(Error::UndersizedGroup {
                group: name.to_string(),
                size: idx.len(),
                needed: 2,
            });
        }
        let (mean, n) = mean_of(idx.iter().map(|&i| records[i].vector.as_slice()), d);
        let mut var = vec![0.0; d];
        for &i in &idx {
            for ((v, x), m) in var.iter_mut().zip(&records[i].vector).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std: Vec<f64> = var
            .iter()
            .map(|v| (v / n as f64).sqrt().max(SCALE_EPS))
            .collect();
        for &i in &idx {
            for ((x, m), s) in out[i].vector.iter_mut().zip(&mean).zip(&std) {
                *x = (*x - m) / s;
            }
        }
    }
    Ok(out)
}

fn to_matrix(rows: &[&[f64]], d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j])
}

/// Eigen-decomposition of the sample covariance (ddof 1), eigenvalues
/// descending, each eigenvector's largest-magnitude entry made positive.
fn principal_axes(rows: &[&[f64]], d: usize) -> (Vec<f64>, Vec<f64>, DMatrix<f64>) {
    let (mean, n) = mean_of(rows.iter().copied(), d);
    let mut x = to_matrix(rows, d);
    for mut row in x.row_iter_mut() {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let denom = (n.max(2) - 1) as f64;
    let cov = (x.transpose() * &x) / denom;
    let cov = (&cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let values: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();
    let mut basis = DMatrix::zeros(d, d);
    for (c, &k) in order.iter().enumerate() {
        let mut col: DVector<f64> = eig.eigenvectors.column(k).into_owned();
        let pivot = col.iter().fold(
            0.0f64,
            |best, &v| if v.abs() > best.abs() { v } else { best },
        );
        if pivot < 0.0 {
            col.neg_mut();
        }
        basis.set_column(c, &col);
    }
    (mean, values, basis)
}

fn project(x: &[f64], mean: &[f64], basis: &DMatrix<f64>, k: usize) -> Vec<f64> {
    let centered = DVector::from_iterator(mean.len(), x.iter().zip(mean).map(|(a, m)| a - m));
    (0..k).map(|c| basis.column(c).dot(&centered)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TvnModel {
    pub mean: Vec<f64>,
    /// `D x D`, columns are principal axes of the negative controls.
    pub basis: DMatrix<f64>,
    /// Per-component standard deviations used as whitening divisors.
    pub scale: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    pub fitted_on: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TvnOptions {
    /// Floor component scales at [`SCALE_EPS`] instead of failing on a
    /// rank-deficient control covariance.
    pub ridge: bool,
}

/// PCA whitening fitted on negative-control vectors.
pub fn fit_tvn<V: AsRef<[f64]>>(neg_controls: &[V], options: TvnOptions) -> Result<TvnModel> {
    let rows: Vec<&[f64]> = neg_controls.iter().map(|v| v.as_ref()).collect();
    let first = rows
        .first()
        .ok_or_else(|| Error::Empty("negative controls".into()))?;
    let d = first.len();
    if let Some(bad) = rows.iter().position(|r| r.len() != d) {
        return Err(Error::Dimension(format!(
            "control {bad} has {} dims, expected {d}",
            rows[bad].len()
        )));
    }
    if rows.len() < 2 {
        return Err(Error::RankDeficient(format!(
            "{} negative control(s)",
            rows.len()
        )));
    }
    let (mean, eigenvalues, basis) = principal_axes(&rows, d);
    let top = eigenvalues.first().copied().unwrap_or(0.0);
    let tol = (top * d as f64 * 1e-12).max(1e-300);
    let deficient = eigenvalues.iter().filter(|&&l| l <= tol).count();
    if deficient > 0 && !options.ridge {
        return Err(Error::RankDeficient(format!(
            "{deficient} of {d} components have no variance across {} controls \
             (a full-rank fit needs at least {} controls); enable the ridge floor to proceed",
            rows.len(),
            d + 1
        )));
    }
    let scale = eigenvalues
        .iter()
        .map(|l| l.sqrt().max(SCALE_EPS))
        .collect();
    Ok(TvnModel {
        mean,
        basis,
        scale,
        eigenvalues,
        fitted_on: rows.len(),
    })
}

impl TvnModel {
    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        project(x, &self.mean, &self.basis, self.mean.len())
            .into_iter()
            .zip(&self.scale)
            .map(|(v, s)| v / s)
            .collect()
    }
}

pub fn apply_tvn(model: &TvnModel, records: &[EmbeddingRecord]) -> Result<Vec<EmbeddingRecord>> {
    let d = table_dim(records)?;
    if d != model.mean.len() {
        return Err(Error::Dimension(format!(
            "table has {d} dims, TVN model {}",
            model.mean.len()
        )));
    }
    Ok(records
        .iter()
        .map(|r| EmbeddingRecord::new(r.meta.clone(), model.transform(&r.vector)))
        .collect())
}

/// Fit TVN on the table's negative controls and apply it to every record.
pub fn tvn(records: &[EmbeddingRecord], options: TvnOptions) -> Result<Vec<EmbeddingRecord>> {
    let controls: Vec<&[f64]> = records
        .iter()
        .filter(|r| r.is_control())
        .map(|r| r.vector.as_slice())
        .collect();
    let model = fit_tvn(&controls, options)?;
    apply_tvn(&model, records)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    pub basis: DMatrix<f64>,
    /// Variance along each kept component, non-increasing.
    pub explained_variance: Vec<f64>,
}

pub fn fit_pca<V: AsRef<[f64]>>(rows: &[V], n_components: usize) -> Result<PcaModel> {
    let rows: Vec<&[f64]> = rows.iter().map(|v| v.as_ref()).collect();
    let d = rows
        .first()
        .ok_or_else(|| Error::Empty("PCA input".into()))?
        .len();
    if n_components == 0 || n_components > d {
        return Err(Error::InvalidArgument(format!(
            "n_components {n_components} must lie in 1..={d}"
        )));
    }
    let (mean, values, basis) = principal_axes(&rows, d);
    Ok(PcaModel {
        mean,
        basis: basis.columns(0, n_components).into_owned(),
        explained_variance: values[..n_components].to_vec(),
    })
}

impl PcaModel {
    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        project(x, &self.mean, &self.basis, self.basis.ncols())
    }
}

/// Project onto the top principal components of all records.
pub fn pca_transform(
    records: &[EmbeddingRecord],
    n_components: usize,
) -> Result<Vec<EmbeddingRecord>> {
    table_dim(records)?;
    let rows: Vec<&[f64]> = records.iter().map(|r| r.vector.as_slice()).collect();
    let model = fit_pca(&rows, n_components)?;
    Ok(records
        .iter()
        .map(|r| EmbeddingRecord::new(r.meta.clone(), model.transform(&r.vector)))
        .collect())
}

/// Normalize, average, renormalize.
pub fn spherical_mean<V: AsRef<[f64]>>(replicates: &[V]) -> Result<Vec<f64>> {
    let d = replicates
        .first()
        .ok_or_else(|| Error::Empty("replicates".into()))?
        .as_ref()
        .len();
    let mut sum = vec![0.0; d];
    for (i, v) in replicates.iter().enumerate() {
        let v = v.as_ref();
        if v.len() != d {
            return Err(Error::Dimension(format!(
                "replicate {i} has {} dims, expected {d}",
                v.len()
            )));
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroVector(i));
        }
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x / norm;
        }
    }
    let n = replicates.len() as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-9 {
        return Err(Error::UndefinedMean(norm));
    }
    Ok(sum.into_iter().map(|s| s / norm).collect())
}

pub fn control_mean(records: &[EmbeddingRecord]) -> Result<Vec<f64>> {
    let d = table_dim(records)?;
    let (mean, n) = mean_of(
        records
            .iter()
            .filter(|r| r.is_control())
            .map(|r| r.vector.as_slice()),
        d,
    );
    if n == 0 {
        return Err(Error::Empty("negative controls".into()));
    }
    Ok(mean)
}

pub fn shift_origin_to_controls(
    records: &[EmbeddingRecord],
    neg_control_mean: &[f64],
) -> Result<Vec<EmbeddingRecord>> {
    let d = table_dim(records)?;
    if neg_control_mean.len() != d {
        return Err(Error::Dimension(format!(
            "control mean has {} dims, table {d}",
            neg_control_mean.len()
        )));
    }
    Ok(records
        .iter()
        .map(|r| {
            let v = r
                .vector
                .iter()
                .zip(neg_control_mean)
                .map(|(x, m)| x - m)
                .collect();
            EmbeddingRecord::new(r.meta.clone(), v)
        })
        .collect())
}

/// Per-perturbation spherical means of non-control records, sorted by id.
pub fn perturbation_means(records: &[EmbeddingRecord]) -> Result<Vec<(String, Vec<f64>)>> {
    let mut by_id: BTreeMap<&str, Vec<&[f64]>> = BTreeMap::new();
    for r in records.iter().filter(|r| !r.is_control()) {
        by_id
            .entry(&r.meta.perturbation_id)
            .or_default()
            .push(&r.vector);
    }
    by_id
        .into_iter()
        .map(|(id, reps)| Ok((id.to_string(), spherical_mean(&reps)?)))
        .collect()
}

/// One step of a transformation pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransformOp {
    CenterBy(GroupKey),
    StandardizeBy(GroupKey),
    /// `None` keeps every component.
    Pca(Option<usize>),
    Tvn(TvnOptions),
    ShiftToControls,
}

pub const TRANSFORM_OPS: &str =
    "center_by:<plate|experiment>, standardize_by:<plate|experiment>, pca[:k], tvn, tvn:ridge, shift_to_controls";

impl std::str::FromStr for TransformOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let unknown = || {
            Error::InvalidArgument(format!(
                "unknown transform {s:?}; valid ops: {TRANSFORM_OPS}"
            ))
        };
        Ok(match (name, arg) {
            ("center_by", Some(k)) => Self::CenterBy(k.parse()?),
            ("standardize_by", Some(k)) => Self::StandardizeBy(k.parse()?),
            ("pca", None) => Self::Pca(None),
            ("pca", Some(k)) => Self::Pca(Some(k.parse().map_err(|_| unknown())?)),
            ("tvn", None) => Self::Tvn(TvnOptions::default()),
            ("tvn", Some("ridge")) => Self::Tvn(TvnOptions { ridge: true }),
            ("shift_to_controls", None) => Self::ShiftToControls,
            _ => return Err(unknown()),
        })
    }
}

/// Parse a comma-separated pipeline such as `pca,standardize_by:plate`.
pub fn parse_pipeline(spec: &str) -> Result<Vec<TransformOp>> {
    if spec.trim().is_empty() {
        return Ok(Vec::new());
    }
    spec.split(',').map(str::parse).collect()
}

pub type PostTvnHook<'a> = &'a dyn Fn(Vec<EmbeddingRecord>) -> Result<Vec<EmbeddingRecord>>;

pub fn apply_op(records: &[EmbeddingRecord], op: TransformOp) -> Result<Vec<EmbeddingRecord>> {
    match op {
        TransformOp::CenterBy(k) => center_by(records, k),
        TransformOp::StandardizeBy(k) => standardize_by(records, k),
        TransformOp::Pca(k) => {
            let d = table_dim(records)?;
            pca_transform(records, k.unwrap_or(d))
        }
        TransformOp::Tvn(o) => tvn(records, o),
        TransformOp::ShiftToControls => shift_origin_to_controls(records, &control_mean(records)?),
    }
}

/// Apply ops in order; `post_tvn` runs after every TVN step.
pub fn run_pipeline(
    records: &[EmbeddingRecord],
    ops: &[TransformOp],
    post_tvn: Option<PostTvnHook>,
) -> Result<Vec<EmbeddingRecord>> {
    let mut cur = records.to_vec();
    for &op in ops {
        cur = apply_op(&cur, op)?;
        if let (TransformOp::Tvn(_), Some(hook)) = (op, post_tvn) {
            cur = hook(cur)?;
        }
    }
    Ok(cur)
}
