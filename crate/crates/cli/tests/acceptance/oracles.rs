//! Reference implementations written from the definitions, independent of the crates under test.

use ndarray::Array3;

/// O(P^4) DFT magnitude per channel.
pub fn dft_magnitude(x: &Array3<f64>) -> Array3<f64> {
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

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Mean of precision@k over the positions k of positives.
pub fn average_precision(rel: &[bool]) -> Option<f64> {
    let positives: Vec<usize> = (0..rel.len()).filter(|&i| rel[i]).collect();
    if positives.is_empty() {
        return None;
    }
    let total: f64 = positives
        .iter()
        .map(|&i| rel[..=i].iter().filter(|&&r| r).count() as f64 / (i + 1) as f64)
        .sum();
    Some(total / positives.len() as f64)
}

/// q_i = min over p_j >= p_i of p_j m / rank_j, capped at 1.
pub fn bh(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut sorted = p.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    p.iter()
        .map(|&pi| {
            (0..m)
                .filter(|&r| sorted[r] >= pi)
                .map(|r| sorted[r] * m as f64 / (r + 1) as f64)
                .fold(1.0f64, f64::min)
        })
        .collect()
}

pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Mean AP over member queries, each ranking the rest of the pool by cosine.
pub fn group_map(pool: &[Vec<f64>], members: &[usize]) -> f64 {
    let mut total = 0.0;
    for &q in members {
        let mut others: Vec<usize> = (0..pool.len()).filter(|&j| j != q).collect();
        others.sort_by(|&a, &b| {
            cosine(&pool[q], &pool[b])
                .partial_cmp(&cosine(&pool[q], &pool[a]))
                .unwrap()
                .then(a.cmp(&b))
        });
        let rel: Vec<bool> = others.iter().map(|j| members.contains(j)).collect();
        total += average_precision(&rel).unwrap();
    }
    total / members.len() as f64
}
