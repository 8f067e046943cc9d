//! Replicate and sibling retrieval against a negative-control null.
//!
//! For one group the pool is its members followed by the negatives. Each
//! member in turn is a query; the rest of the pool is ranked by cosine
//! similarity (descending, ties in pool order) and scored by average
//! precision with the other members as positives. The group statistic is
//! the mean of those APs. The null relabels which pool entries form the
//! group: every relabeling is enumerated when there are at most
//! `n_permutations` of them (p = share of relabelings scoring at least the
//! observed value), otherwise `n_permutations` random relabelings are drawn
//! and p = (1 + #{null >= observed}) / (1 + n_permutations).

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postprocess::spherical_mean;
use crate::table::EmbeddingRecord;

/// Slack used when comparing null statistics to the observed one.
const TIE_TOL: f64 = 1e-12;

/// Mean over positive ranks `k` of precision at `k`.
pub fn average_precision(ranked_relevance: &[bool]) -> Result<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in ranked_relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::InvalidArgument(
            "average precision needs at least one positive".into(),
        ));
    }
    Ok(sum / hits as f64)
}

/// Benjamini-Hochberg adjusted p-values, in input order.
pub fn bh_qvalues(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
    let mut q = vec![0.0; m];
    let mut running = 1.0f64;
    for (rank, &i) in order.iter().enumerate().rev() {
        running = running.min(p[i] * m as f64 / (rank + 1) as f64);
        q[i] = running.min(1.0);
    }
    q
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RetrievalKind {
    Perturbation,
    Siblings,
}

/// The member vectors of one group. A member is a list of record indices
/// reduced to one vector by the spherical mean: single replicates for the
/// perturbation task, all replicates of a sibling perturbation otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalGroup {
    pub id: String,
    pub members: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalTask {
    pub kind: RetrievalKind,
    pub groups: Vec<RetrievalGroup>,
    pub negatives: Vec<usize>,
    pub q_threshold: f64,
    pub n_permutations: usize,
}

impl RetrievalTask {
    /// Every non-control perturbation with at least two replicates; pooled
    /// negative controls.
    pub fn perturbation(records: &[EmbeddingRecord], n_permutations: usize) -> Self {
        let mut by_id: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        let mut negatives = Vec::new();
        for (i, r) in records.iter().enumerate() {
            if r.is_control() {
                negatives.push(i);
            } else {
                by_id.entry(&r.meta.perturbation_id).or_default().push(i);
            }
        }
        let groups = by_id
            .into_iter()
            .filter(|(_, idx)| idx.len() >= 2)
            .map(|(id, idx)| RetrievalGroup {
                id: id.to_string(),
                members: idx.into_iter().map(|i| vec![i]).collect(),
            })
            .collect();
        Self {
            kind: RetrievalKind::Perturbation,
            groups,
            negatives,
            q_threshold: 0.05,
            n_permutations,
        }
    }

    /// `sibling_sets` maps a set name to the perturbation ids it contains.
    pub fn siblings(
        records: &[EmbeddingRecord],
        sibling_sets: &[(String, Vec<String>)],
        n_permutations: usize,
    ) -> Self {
        let mut by_id: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        let mut negatives = Vec::new();
        for (i, r) in records.iter().enumerate() {
            if r.is_control() {
                negatives.push(i);
            } else {
                by_id.entry(&r.meta.perturbation_id).or_default().push(i);
            }
        }
        let groups = sibling_sets
            .iter()
            .map(|(name, ids)| RetrievalGroup {
                id: name.clone(),
                members: ids
                    .iter()
                    .filter_map(|id| by_id.get(id.as_str()).cloned())
                    .collect(),
            })
            .collect();
        Self {
            kind: RetrievalKind::Siblings,
            groups,
            negatives,
            q_threshold: 0.05,
            n_permutations,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.negatives.is_empty() {
            return Err(Error::Empty("negative controls for retrieval".into()));
        }
        if self.groups.is_empty() {
            return Err(Error::Empty("retrieval groups".into()));
        }
        if self.n_permutations < 100 {
            return Err(Error::InvalidArgument(format!(
                "n_permutations {} is below 100",
                self.n_permutations
            )));
        }
        for g in &self.groups {
            if g.members.len() < 2 {
                return Err(Error::UndersizedGroup {
                    group: g.id.clone(),
                    size: g.members.len(),
                    needed: 2,
                });
            }
            for m in g.members.iter().flatten() {
                if self.negatives.contains(m) {
                    return Err(Error::InvalidArgument(format!(
                        "record {m} is both in group {:?} and a negative",
                        g.id
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub id: String,
    pub map: f64,
    pub p_value: f64,
    pub q_value: f64,
    pub retrieved: bool,
    /// Whether the null was enumerated exhaustively.
    pub exact: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub kind: RetrievalKind,
    pub fraction_retrieved: f64,
    pub groups: Vec<GroupResult>,
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    v.iter().map(|x| x / n).collect()
}

/// Mean AP of the pool entries flagged in `in_group`, given pool similarities.
pub fn group_map(sims: &[Vec<f64>], in_group: &[bool]) -> f64 {
    let n = sims.len();
    let mut total = 0.0;
    let mut count = 0usize;
    let mut cand: Vec<usize> = Vec::with_capacity(n);
    let mut ranked = Vec::with_capacity(n);
    for q in (0..n).filter(|&i| in_group[i]) {
        cand.clear();
        cand.extend((0..n).filter(|&j| j != q));
        cand.sort_by(|&a, &b| sims[q][b].total_cmp(&sims[q][a]).then(a.cmp(&b)));
        ranked.clear();
        ranked.extend(cand.iter().map(|&j| in_group[j]));
        total += average_precision(&ranked).expect("group has another member");
        count += 1;
    }
    total / count as f64
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Visit every k-subset of `0..n` in lexicographic order.
fn for_each_subset(n: usize, k: usize, mut f: impl FnMut(&[usize])) {
    if k > n {
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        f(&idx);
        // Advance the rightmost index that still has room.
        let mut i = k;
        while i > 0 && idx[i - 1] == n - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return;
        }
        idx[i - 1] += 1;
        for j in i..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

fn score_group(
    records: &[EmbeddingRecord],
    group: &RetrievalGroup,
    negatives: &[usize],
    n_permutations: usize,
    seed: u64,
) -> Result<(f64, f64, bool)> {
    let mut pool: Vec<Vec<f64>> = Vec::with_capacity(group.members.len() + negatives.len());
    for m in &group.members {
        let reps: Vec<&[f64]> = m.iter().map(|&i| records[i].vector.as_slice()).collect();
        pool.push(spherical_mean(&reps)?);
    }
    for &i in negatives {
        pool.push(unit(&records[i].vector));
    }
    let n = pool.len();
    let k = group.members.len();
    let sims: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| pool[i].iter().zip(&pool[j]).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();
    let observed_flags: Vec<bool> = (0..n).map(|i| i < k).collect();
    let observed = group_map(&sims, &observed_flags);
    let mut flags = vec![false; n];
    let mut score = |subset: &[usize]| {
        flags.iter_mut().for_each(|f| *f = false);
        for &i in subset {
            flags[i] = true;
        }
        group_map(&sims, &flags)
    };
    if binomial(n, k) <= n_permutations as f64 {
        let (mut total, mut at_least) = (0usize, 0usize);
        for_each_subset(n, k, |s| {
            total += 1;
            if score(s) >= observed - TIE_TOL {
                at_least += 1;
            }
        });
        Ok((observed, at_least as f64 / total as f64, true))
    } else {
        let mut rng = phenom_core::seed::rng(seed, &[0x6e75_6c6c]);
        let mut at_least = 0usize;
        for _ in 0..n_permutations {
            let mut s = sample(&mut rng, n, k).into_vec();
            s.sort_unstable();
            if score(&s) >= observed - TIE_TOL {
                at_least += 1;
            }
        }
        Ok((
            observed,
            (1 + at_least) as f64 / (1 + n_permutations) as f64,
            false,
        ))
    }
}

pub fn retrieval_benchmark(
    records: &[EmbeddingRecord],
    task: &RetrievalTask,
    seed: u64,
) -> Result<RetrievalResult> {
    task.validate()?;
    let bound = records.len();
    if let Some(&bad) = task
        .negatives
        .iter()
        .chain(task.groups.iter().flat_map(|g| g.members.iter().flatten()))
        .find(|&&i| i >= bound)
    {
        return Err(Error::Dimension(format!(
            "record index {bad} outside table of {bound}"
        )));
    }
    let scored: Vec<Result<(f64, f64, bool)>> = task
        .groups
        .par_iter()
        .enumerate()
        .map(|(gi, g)| {
            score_group(
                records,
                g,
                &task.negatives,
                task.n_permutations,
                phenom_core::seed::derive(seed, &[gi as u64]),
            )
        })
        .collect();
    let scored: Vec<(f64, f64, bool)> = scored.into_iter().collect::<Result<_>>()?;
    let p: Vec<f64> = scored.iter().map(|s| s.1).collect();
    let q = bh_qvalues(&p);
    let groups: Vec<GroupResult> = task
        .groups
        .iter()
        .zip(scored)
        .zip(q)
        .map(|((g, (map, p_value, exact)), q_value)| GroupResult {
            id: g.id.clone(),
            map,
            p_value,
            q_value,
            retrieved: q_value < task.q_threshold,
            exact,
        })
        .collect();
    let fraction_retrieved =
        groups.iter().filter(|g| g.retrieved).count() as f64 / groups.len() as f64;
    Ok(RetrievalResult {
        kind: task.kind,
        fraction_retrieved,
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true, true, false]).unwrap(), 1.0);
        assert!(
            (average_precision(&[true, false, true, false]).unwrap() - 5.0 / 6.0).abs() < 1e-15
        );
        assert_eq!(
            average_precision(&[false, false, false, true]).unwrap(),
            0.25
        );
        assert!(average_precision(&[false, false]).is_err());
    }

    #[test]
    fn bh_fixture() {
        let q = bh_qvalues(&[0.01, 0.04, 0.03, 0.20]);
        let want = [0.04, 0.16 / 3.0, 0.16 / 3.0, 0.2];
        for (a, b) in q.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{q:?}");
        }
    }

    #[test]
    fn subsets_are_enumerated_once() {
        let mut seen = Vec::new();
        for_each_subset(5, 2, |s| seen.push(s.to_vec()));
        assert_eq!(seen.len(), 10);
        assert_eq!(seen[0], vec![0, 1]);
        assert_eq!(seen[9], vec![3, 4]);
        let mut n = 0;
        for_each_subset(4, 4, |_| n += 1);
        assert_eq!(n, 1);
    }
}
