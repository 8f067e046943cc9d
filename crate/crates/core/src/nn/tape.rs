//! Reverse-mode automatic differentiation over 2-D `f64` matrices.
//!
//! A [`Tape`] records one forward pass. Operations are evaluated eagerly and
//! recorded with whatever they need for the backward sweep. Parameters are
//! referenced from a borrowed [`ParamStore`] instead of copied.

use ndarray::{s, Array1, ArrayView2, Axis};

use super::params::{Gradients, Mat, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Backward rule for an operation defined outside this module.
pub trait CustomOp {
    /// Given the gradient of the output and the input values, return one
    /// gradient per input (`None` for inputs that need none).
    fn backward(&self, grad: &Mat, inputs: &[ArrayView2<'_, f64>]) -> Vec<Option<Mat>>;
}

enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Mat,
        inv_std: Mat,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Mat>,
    },
    Gather(Vec<(Var, usize)>),
    MeanRows(Var),
    WeightedSum(Vec<(Var, f64)>),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Option<Mat>,
    op: Op,
    requires_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, f64> {
        match (&self.nodes[v.0].value, &self.nodes[v.0].op) {
            (Some(m), _) => m.view(),
            (None, Op::Param(id)) => self.params.get(*id).view(),
            (None, _) => unreachable!("node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// A constant; no gradient flows into it.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let out = &self.value(a) + &self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// `x + row`, broadcasting a `1 x m` row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1);
        let out = &self.value(x) + &self.value(row);
        let rg = self.rg(x) || self.rg(row);
        self.push(out, Op::AddRow(x, row), rg)
    }

    /// `x * row` elementwise, broadcasting a `1 x m` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1);
        let out = &self.value(x) * &self.value(row);
        let rg = self.rg(x) || self.rg(row);
        self.push(out, Op::MulRow(x, row), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).mapv(|v| v * s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(gelu);
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Layer norm over each contiguous group of `cols / groups` columns,
    /// with `gamma`/`beta` of width `cols / groups` shared by all groups.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        assert!(groups > 0 && cols % groups == 0);
        let width = cols / groups;
        assert_eq!(self.shape(gamma), (1, width));
        assert_eq!(self.shape(beta), (1, width));
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = Mat::zeros((rows, cols));
        let mut inv_std = Mat::zeros((rows, groups));
        let mut out = Mat::zeros((rows, cols));
        for r in 0..rows {
            for k in 0..groups {
                let seg = xv.slice(s![r, k * width..(k + 1) * width]);
                let mean = seg.sum() / width as f64;
                let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
                let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                inv_std[[r, k]] = is;
                for j in 0..width {
                    let h = (seg[j] - mean) * is;
                    xhat[[r, k * width + j]] = h;
                    out[[r, k * width + j]] = h * g[[0, j]] + b[[0, j]];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Multi-head scaled dot-product attention on `T x D` queries, keys and
    /// values split into `heads` contiguous column blocks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (tq, d) = qv.dim();
        assert_eq!(kv.dim(), vv.dim());
        assert_eq!(kv.ncols(), d);
        assert!(heads > 0 && d % heads == 0);
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = Mat::zeros((tq, d));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let mut scores = qv.slice(cols).dot(&kv.slice(cols).t());
            scores.mapv_inplace(|x| x * scale);
            for mut row in scores.rows_mut() {
                let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                row.mapv_inplace(|x| (x - max).exp());
                let sum = row.sum();
                row.mapv_inplace(|x| x / sum);
            }
            out.slice_mut(cols).assign(&scores.dot(&vv.slice(cols)));
            probs.push(scores);
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        )
    }

    /// Row `i` of the output is row `picks[i].1` of `picks[i].0`.
    pub fn gather(&mut self, picks: Vec<(Var, usize)>) -> Var {
        assert!(!picks.is_empty());
        let cols = self.shape(picks[0].0).1;
        let mut out = Mat::zeros((picks.len(), cols));
        for (i, &(src, row)) in picks.iter().enumerate() {
            out.row_mut(i).assign(&self.value(src).row(row));
        }
        let rg = picks.iter().any(|&(v, _)| self.rg(v));
        self.push(out, Op::Gather(picks), rg)
    }

    /// Rows `start..end` of `x`.
    pub fn rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        self.gather((start..end).map(|r| (x, r)).collect())
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .mean_axis(Axis(0))
            .expect("mean of empty matrix")
            .insert_axis(Axis(0));
        let rg = self.rg(x);
        self.push(out, Op::MeanRows(x), rg)
    }

    /// `sum_i w_i * x_i` over equally shaped nodes.
    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Var {
        assert!(!terms.is_empty());
        let mut out = Mat::zeros(self.shape(terms[0].0));
        for &(v, w) in &terms {
            out.scaled_add(w, &self.value(v));
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        self.push(out, Op::WeightedSum(terms), rg)
    }

    /// Record an externally computed value with its own backward rule.
    pub fn custom(&mut self, inputs: Vec<Var>, value: Mat, op: Box<dyn CustomOp>) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(value, Op::Custom(inputs, op), rg)
    }

    fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot => *slot = Some(g),
        }
    }

    /// Gradients of the scalar `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut out = Gradients::zeros_like(self.params);
        self.backward_into(loss, &mut out);
        out
    }

    /// Add the gradients of `loss` into `out`.
    pub fn backward_into(&self, loss: Var, out: &mut Gradients) {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Mat>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.step_back(i, g, &mut grads, out);
        }
    }

    fn step_back(&self, i: usize, g: Mat, grads: &mut [Option<Mat>], out: &mut Gradients) {
        let acc = |grads: &mut [Option<Mat>], v: Var, m: Mat| {
            if self.rg(v) {
                Self::accumulate(grads, v, m);
            }
        };
        match &self.nodes[i].op {
            Op::Input => {}
            Op::Param(id) => *out.get_mut(*id) += &g,
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    acc(grads, *b, self.value(*a).t().dot(&g));
                }
            }
            Op::Add(a, b) => {
                acc(grads, *b, g.clone());
                acc(grads, *a, g);
            }
            Op::AddRow(x, row) => {
                if self.rg(*row) {
                    acc(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                acc(grads, *x, g);
            }
            Op::MulRow(x, row) => {
                if self.rg(*row) {
                    let gr = (&g * &self.value(*x)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(grads, *row, gr);
                }
                if self.rg(*x) {
                    acc(grads, *x, &g * &self.value(*row));
                }
            }
            Op::Scale(x, s) => acc(grads, *x, g.mapv(|v| v * s)),
            Op::Gelu(x) => {
                let mut gx = g;
                gx.zip_mut_with(&self.value(*x), |gv, &xv| *gv *= gelu_grad(xv));
                acc(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = g.dim();
                let width = cols / groups;
                let gam = self.value(*gamma);
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut gg = Mat::zeros((1, width));
                    let mut gb = Mat::zeros((1, width));
                    for r in 0..rows {
                        for c in 0..cols {
                            gg[[0, c % width]] += g[[r, c]] * xhat[[r, c]];
                            gb[[0, c % width]] += g[[r, c]];
                        }
                    }
                    acc(grads, *gamma, gg);
                    acc(grads, *beta, gb);
                }
                if self.rg(*x) {
                    let mut gx = Mat::zeros((rows, cols));
                    let n = width as f64;
                    for r in 0..rows {
                        for k in 0..*groups {
                            let range = k * width..(k + 1) * width;
                            let (mut s1, mut s2) = (0.0, 0.0);
                            for (j, c) in range.clone().enumerate() {
                                let dh = g[[r, c]] * gam[[0, j]];
                                s1 += dh;
                                s2 += dh * xhat[[r, c]];
                            }
                            let is = inv_std[[r, k]];
                            for (j, c) in range.enumerate() {
                                let dh = g[[r, c]] * gam[[0, j]];
                                gx[[r, c]] = is / n * (n * dh - s1 - xhat[[r, c]] * s2);
                            }
                        }
                    }
                    acc(grads, *x, gx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qv.ncols();
                let hd = d / heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let mut gq = Mat::zeros(qv.dim());
                let mut gk = Mat::zeros(kv.dim());
                let mut gv = Mat::zeros(vv.dim());
                for (h, a) in probs.iter().enumerate() {
                    let cols = s![.., h * hd..(h + 1) * hd];
                    let go = g.slice(cols);
                    gv.slice_mut(cols).assign(&a.t().dot(&go));
                    let ga = go.dot(&vv.slice(cols).t());
                    let mut gs = a * &ga;
                    let row_dot: Array1<f64> = gs.sum_axis(Axis(1));
                    gs.scaled_add(-1.0, &(a * &row_dot.insert_axis(Axis(1))));
                    gs.mapv_inplace(|x| x * scale);
                    gq.slice_mut(cols).assign(&gs.dot(&kv.slice(cols)));
                    gk.slice_mut(cols).assign(&gs.t().dot(&qv.slice(cols)));
                }
                acc(grads, *q, gq);
                acc(grads, *k, gk);
                acc(grads, *v, gv);
            }
            Op::Gather(picks) => {
                for (i, &(src, row)) in picks.iter().enumerate() {
                    if !self.rg(src) {
                        continue;
                    }
                    let slot = grads[src.0].get_or_insert_with(|| Mat::zeros(self.shape(src)));
                    let mut target = slot.row_mut(row);
                    target += &g.row(i);
                }
            }
            Op::MeanRows(x) => {
                let (rows, cols) = self.shape(*x);
                let gx = g
                    .broadcast((rows, cols))
                    .expect("mean_rows broadcast")
                    .mapv(|v| v / rows as f64);
                acc(grads, *x, gx);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    acc(grads, v, g.mapv(|x| x * w));
                }
            }
            Op::Custom(inputs, op) => {
                let views: Vec<_> = inputs.iter().map(|&v| self.value(v)).collect();
                for (&v, gi) in inputs.iter().zip(op.backward(&g, &views)) {
                    if let Some(gi) = gi {
                        acc(grads, v, gi);
                    }
                }
            }
        }
    }
}
