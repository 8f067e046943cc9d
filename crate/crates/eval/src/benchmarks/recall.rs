use std::collections::HashMap;

use nalgebra::DMatrix;
use rayon::prelude::*;

use phenom_core::data::RelationshipDb;

use crate::error::{Error, Result};

/// Pairwise cosine similarities; the diagonal is exactly 1.
pub fn cosine_similarity_matrix<V: AsRef<[f64]> + Sync>(vectors: &[V]) -> Result<DMatrix<f64>> {
    let m = vectors.len();
    let d = vectors.first().map_or(0, |v| v.as_ref().len());
    let mut unit = Vec::with_capacity(m);
    for (i, v) in vectors.iter().enumerate() {
        let v = v.as_ref();
        if v.len() != d {
            return Err(Error::Dimension(format!(
                "row {i} has {} dims, expected {d}",
                v.len()
            )));
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroVector(i));
        }
        unit.push(v.iter().map(|x| x / norm).collect::<Vec<f64>>());
    }
    let rows: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| {
            (0..m)
                .map(|j| {
                    if i == j {
                        1.0
                    } else {
                        let dot: f64 = unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum();
                        dot.clamp(-1.0, 1.0)
                    }
                })
                .collect()
        })
        .collect();
    Ok(DMatrix::from_fn(m, m, |i, j| rows[i][j]))
}

/// Percentile of sorted data with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], pct: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = pct / 100.0 * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Fraction of known pairs whose similarity lies in either `tail_pct` tail
/// of all off-diagonal similarities.
pub fn recall_known_pairs(
    sims: &DMatrix<f64>,
    db: &RelationshipDb,
    id_index: &HashMap<String, usize>,
    tail_pct: f64,
) -> Result<f64> {
    recall_counts(sims, db, id_index, tail_pct).map(|c| c.recall())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecallCounts {
    pub known: usize,
    pub hits: usize,
}

impl RecallCounts {
    pub fn recall(&self) -> f64 {
        self.hits as f64 / self.known as f64
    }
}

pub fn recall_counts(
    sims: &DMatrix<f64>,
    db: &RelationshipDb,
    id_index: &HashMap<String, usize>,
    tail_pct: f64,
) -> Result<RecallCounts> {
    if !(0.0..=50.0).contains(&tail_pct) {
        return Err(Error::InvalidArgument(format!(
            "tail_pct {tail_pct} outside [0, 50]"
        )));
    }
    let m = sims.nrows();
    if sims.ncols() != m || m < 2 {
        return Err(Error::Dimension(format!(
            "similarity matrix {}x{}",
            m,
            sims.ncols()
        )));
    }
    let mut all = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in i + 1..m {
            all.push(sims[(i, j)]);
        }
    }
    all.sort_by(f64::total_cmp);
    let low = percentile(&all, tail_pct);
    let high = percentile(&all, 100.0 - tail_pct);
    let mut known = 0usize;
    let mut hits = 0usize;
    for (a, b) in db.pairs() {
        let (Some(&i), Some(&j)) = (id_index.get(a), id_index.get(b)) else {
            continue;
        };
        if i >= m || j >= m {
            return Err(Error::Dimension(format!(
                "index ({i}, {j}) outside {m}x{m}"
            )));
        }
        known += 1;
        let s = sims[(i, j)];
        if s <= low || s >= high {
            hits += 1;
        }
    }
    if known == 0 {
        return Err(Error::Empty(format!(
            "relationship database {:?} after restriction",
            db.name
        )));
    }
    Ok(RecallCounts { known, hits })
}

/// Recall over perturbation-level vectors keyed by id.
pub fn recall_from_vectors(
    ids: &[String],
    vectors: &[Vec<f64>],
    db: &RelationshipDb,
    tail_pct: f64,
) -> Result<f64> {
    if ids.len() != vectors.len() {
        return Err(Error::Dimension(format!(
            "{} ids for {} vectors",
            ids.len(),
            vectors.len()
        )));
    }
    let sims = cosine_similarity_matrix(vectors)?;
    let index: HashMap<String, usize> = ids
        .iter()
        .cloned()
        .enumerate()
        .map(|(i, s)| (s, i))
        .collect();
    recall_known_pairs(&sims, db, &index, tail_pct)
}
