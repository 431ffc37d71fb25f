//! A small reverse-mode autodiff tape over 2-D `f64` matrices.
//!
//! Every forward pass records its nodes on a [`Tape`]; calling
//! [`Tape::backward`] on a scalar node walks the tape in reverse and returns
//! gradients for the parameters that were read. Parameters never read by a
//! forward pass receive no gradient slot at all.

use std::collections::{BTreeSet, HashMap};

use ndarray::{s, Array2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::params::{Grads, Mat, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    /// Position in the tape; indexes the vector from [`Tape::backward_all`].
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Adds a `1 × n` row to every row.
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    /// Row `i` comes from `b` when `take_b[i]`, else from `a`.
    SelectRows {
        a: Var,
        b: Var,
        take_b: Vec<bool>,
    },
    Dropout(Var, Mat),
    Lincomb(Vec<(Var, f64)>),
    MeanAll(Var),
    /// Scalar node whose gradient with respect to each input was computed
    /// during the forward pass.
    Fused(Vec<(Var, Mat)>),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    training: bool,
    rng: ChaCha8Rng,
}

impl<'p> Tape<'p> {
    /// `training` enables dropout; `seed` drives the dropout masks.
    pub fn new(params: &'p ParamStore, training: bool, seed: u64) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(512),
            param_vars: HashMap::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Parameters read by any forward computation recorded so far.
    pub fn touched_params(&self) -> BTreeSet<ParamId> {
        self.param_vars.keys().copied().collect()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant leaf. Gradients never flow into it.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Input, false)
    }

    /// A leaf that records gradients, for probing input sensitivities.
    pub fn watched(&mut self, value: Mat) -> Var {
        self.push(value, Op::Input, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param, true);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let val = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(val, Op::MatMul(a, b), rg)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let val = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(val, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let val = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(val, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let val = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(val, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let val = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(val, Op::Mul(a, b), rg)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let val = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(val, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let val = self.value(a) * k;
        let rg = self.rg(a);
        self.push(val, Op::Scale(a, k), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let val = self.value(a).mapv(f64::tanh);
        let rg = self.rg(a);
        self.push(val, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let val = self.value(a).mapv(|v| v.max(0.0));
        let rg = self.rg(a);
        self.push(val, Op::Relu(a), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let val = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            val,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut val = self.value(a).clone();
        for mut row in val.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - m).exp());
            let z = row.sum();
            row.mapv_inplace(|v| v / z);
        }
        let rg = self.rg(a);
        self.push(val, Op::Softmax(a), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let val = self.value(a).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(a);
        self.push(val, Op::SliceCols(a, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let val = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(val, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let val = self.value(a).select(Axis(0), &idx);
        let rg = self.rg(a);
        self.push(val, Op::GatherRows(a, idx), rg)
    }

    pub fn select_rows(&mut self, a: Var, b: Var, take_b: Vec<bool>) -> Var {
        let mut val = self.value(a).clone();
        let bv = self.value(b);
        for (i, &t) in take_b.iter().enumerate() {
            if t {
                val.row_mut(i).assign(&bv.row(i));
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(val, Op::SelectRows { a, b, take_b }, rg)
    }

    /// Inverted dropout; identity outside training mode or at rate 0.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Var {
        if !self.training || rate <= 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let (r, c) = self.value(a).dim();
        let rng = &mut self.rng;
        let mask = Array2::from_shape_simple_fn((r, c), || if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
        let val = self.value(a) * &mask;
        let rg = self.rg(a);
        self.push(val, Op::Dropout(a, mask), rg)
    }

    /// `Σ wᵢ·xᵢ` over same-shaped nodes.
    pub fn lincomb(&mut self, terms: &[(Var, f64)]) -> Var {
        let (first, w0) = terms[0];
        let mut val = self.value(first) * w0;
        for &(v, w) in &terms[1..] {
            val.scaled_add(w, self.value(v));
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        self.push(val, Op::Lincomb(terms.to_vec()), rg)
    }

    /// Mean of all elements as a `1 × 1` node.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let val = Array2::from_elem((1, 1), self.value(a).mean().unwrap_or(0.0));
        let rg = self.rg(a);
        self.push(val, Op::MeanAll(a), rg)
    }

    /// Records a scalar computed outside the tape together with its
    /// gradient with respect to each input.
    pub fn fused_scalar(&mut self, value: f64, grads: Vec<(Var, Mat)>) -> Var {
        let rg = grads.iter().any(|(v, _)| self.rg(*v));
        self.push(Array2::from_elem((1, 1), value), Op::Fused(grads), rg)
    }

    /// Gradient of `seed · out` with respect to every node.
    pub fn backward_all(&self, out: Var, seed: f64) -> Vec<Option<Mat>> {
        let mut grads: Vec<Option<Mat>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        let shape = self.value(out).dim();
        grads[out.0] = Some(Array2::from_elem(shape, seed));

        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads
    }

    /// Parameter gradients of `seed · out`.
    pub fn backward(&self, out: Var, seed: f64) -> Grads {
        let all = self.backward_all(out, seed);
        let mut grads = Grads::new(self.params.len());
        for (&id, &v) in &self.param_vars {
            if let Some(g) = &all[v.0] {
                grads.accumulate(id, g, 1.0);
            }
        }
        grads
    }

    fn propagate(&self, op: &Op, out_val: &Mat, g: &Mat, grads: &mut [Option<Mat>]) {
        let mut acc = |v: Var, d: Mat| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(a) => *a += &d,
                slot @ None => *slot = Some(d),
            }
        };
        match op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    acc(*b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.dot(self.value(*b)));
                }
                if self.rg(*b) {
                    acc(*b, g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g * self.value(*b));
                }
                if self.rg(*b) {
                    acc(*b, g * self.value(*a));
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if self.rg(*row) {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, k) => acc(*a, g * *k),
            Op::Tanh(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(out_val).for_each(|d, &y| *d *= 1.0 - y * y);
                acc(*a, d);
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(out_val).for_each(|d, &y| {
                    if y <= 0.0 {
                        *d = 0.0
                    }
                });
                acc(*a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if self.rg(*gamma) {
                    acc(*gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.rg(*beta) {
                    acc(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.rg(*x) {
                    let n = g.ncols() as f64;
                    let dxhat = g * self.value(*gamma);
                    let mut dx = Array2::zeros(g.dim());
                    for (r, mut row) in dx.rows_mut().into_iter().enumerate() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let sum_dh = dh.sum();
                        let sum_dh_xh = dh.dot(&xh);
                        let k = inv_std[r] / n;
                        Zip::from(&mut row).and(&dh).and(&xh).for_each(|o, &d, &h| {
                            *o = k * (n * d - sum_dh - h * sum_dh_xh);
                        });
                    }
                    acc(*x, dx);
                }
            }
            Op::Softmax(a) => {
                let mut d = g * out_val;
                for (r, mut row) in d.rows_mut().into_iter().enumerate() {
                    let dot = row.sum();
                    let y = out_val.row(r);
                    Zip::from(&mut row).and(&y).for_each(|o, &yv| *o -= yv * dot);
                }
                acc(*a, d);
            }
            Op::SliceCols(a, start) => {
                let mut d = Array2::zeros(self.value(*a).dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    acc(p, g.slice(s![.., off..off + w]).to_owned());
                    off += w;
                }
            }
            Op::GatherRows(a, idx) => {
                let mut d = Array2::zeros(self.value(*a).dim());
                for (r, &src) in idx.iter().enumerate() {
                    let mut dst = d.row_mut(src);
                    dst += &g.row(r);
                }
                acc(*a, d);
            }
            Op::SelectRows { a, b, take_b } => {
                let mut da = g.clone();
                let mut db = Array2::zeros(g.dim());
                for (i, &t) in take_b.iter().enumerate() {
                    if t {
                        db.row_mut(i).assign(&g.row(i));
                        da.row_mut(i).fill(0.0);
                    }
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::Dropout(a, mask) => acc(*a, g * mask),
            Op::Lincomb(terms) => {
                for &(v, w) in terms {
                    acc(v, g * w);
                }
            }
            Op::MeanAll(a) => {
                let dim = self.value(*a).dim();
                let n = (dim.0 * dim.1).max(1) as f64;
                acc(*a, Array2::from_elem(dim, g[[0, 0]] / n));
            }
            Op::Fused(inputs) => {
                let up = g[[0, 0]];
                for (v, d) in inputs {
                    acc(*v, d * up);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fd_check(build: impl Fn(&mut Tape, Var) -> Var, x0: Mat) {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store, false, 0);
        let x = tape.watched(x0.clone());
        let out = build(&mut tape, x);
        let g = tape.backward_all(out, 1.0)[x.0].clone().unwrap();
        let h = 1e-6;
        for i in 0..x0.nrows() {
            for j in 0..x0.ncols() {
                let eval = |delta: f64| {
                    let mut xp = x0.clone();
                    xp[[i, j]] += delta;
                    let mut t = Tape::new(&store, false, 0);
                    let xv = t.input(xp);
                    let o = build(&mut t, xv);
                    t.scalar(o)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                assert!(
                    (fd - g[[i, j]]).abs() < 1e-6 * (1.0 + fd.abs()),
                    "({i},{j}) fd={fd} analytic={}",
                    g[[i, j]]
                );
            }
        }
    }

    #[test]
    fn layer_norm_softmax_attention_gradients() {
        let x0 = array![[0.3, -1.2, 0.5, 2.0], [1.1, 0.2, -0.7, 0.4], [-0.5, 0.9, 1.3, -2.2]];
        fd_check(
            |t, x| {
                let gamma = t.input(array![[1.0, 0.5, -0.3, 2.0]]);
                let beta = t.input(array![[0.1, 0.0, 0.2, -0.1]]);
                let y = t.layer_norm(x, gamma, beta, 1e-5);
                let scores = t.matmul_t(y, x);
                let p = t.softmax(scores);
                let o = t.matmul(p, y);
                let o = t.tanh(o);
                let sq = t.mul(o, o);
                t.mean_all(sq)
            },
            x0,
        );
    }

    #[test]
    fn gather_select_slice_concat_gradients() {
        let x0 = array![[0.3, -1.2, 0.5], [1.1, 0.2, -0.7]];
        fd_check(
            |t, x| {
                let g = t.gather_rows(x, vec![1, 0, 1, 1]);
                let a = t.slice_cols(g, 0, 2);
                let b = t.slice_cols(g, 1, 2);
                let c = t.concat_cols(&[b, a]);
                let r = t.relu(c);
                let other = t.scale(c, -0.5);
                let sel = t.select_rows(r, other, vec![true, false, false, true]);
                let bias = t.input(array![[0.2, -0.3, 0.1, 0.4]]);
                let sb = t.add_row(sel, bias);
                let m = t.mul(sb, sb);
                let l = t.lincomb(&[(m, 0.7), (sb, -1.3)]);
                t.mean_all(l)
            },
            x0,
        );
    }

    #[test]
    fn untouched_params_have_no_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", array![[1.0, 2.0]]).unwrap();
        let b = store.add("b", array![[3.0, 4.0]]).unwrap();
        let mut tape = Tape::new(&store, true, 0);
        let av = tape.param(a);
        let m = tape.mean_all(av);
        let grads = tape.backward(m, 1.0);
        assert!(grads.get(b).is_none());
        assert_eq!(grads.get(a).unwrap(), &array![[0.5, 0.5]]);
        assert_eq!(tape.touched_params().into_iter().collect::<Vec<_>>(), vec![a]);
    }

    #[test]
    fn dropout_is_identity_in_eval_mode() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store, false, 1);
        let x = tape.input(array![[1.0, 2.0]]);
        assert_eq!(tape.dropout(x, 0.5), x);
    }
}
