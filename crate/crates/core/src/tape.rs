//! Reverse-mode differentiation over a Wengert list of tensor ops.
//!
//! The op set is exactly what the mini transformer and the supportness
//! classifiers use; each op stores whatever its backward rule needs. A tape
//! is single-threaded; run independent tapes per worker for parallelism.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{gemm, log_sum_exp, softmax_in_place, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a value recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

enum Op {
    Leaf,
    Param,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Gelu(usize),
    Tanh(usize),
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Embed { table: usize, ids: Vec<usize> },
    Dropout { x: usize, mask: Vec<f64> },
    Attention { q: usize, k: usize, v: usize, heads: usize, probs: Vec<Vec<f64>> },
    NllSum { logits: usize, rows: Vec<(usize, u32)>, scale: f64, probs: Vec<Vec<f64>> },
    TargetProb { logits: usize, row: usize, target: u32, probs: Vec<f64> },
    BceLogits { logits: usize, labels: Vec<f64> },
    SumSquares(usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients keyed by parameter slot.
#[derive(Debug, Clone)]
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, slot: usize) -> Option<&Tensor> {
        self.slots.get(slot).and_then(Option::as_ref)
    }

    pub fn into_slots(self) -> Vec<Option<Tensor>> {
        self.slots
    }
}

pub struct GradTape {
    id: u64,
    nodes: Vec<Node>,
    params: Vec<(usize, usize)>,
}

impl Default for GradTape {
    fn default() -> Self {
        Self::new()
    }
}

impl GradTape {
    pub fn new() -> Self {
        GradTape { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), params: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.is_finite(), "non-finite value recorded on tape");
        self.nodes.push(Node { value, op });
        Var { tape: self.id, idx: self.nodes.len() - 1 }
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable from another tape");
        v.idx
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a parameter tensor under `slot`.
    pub fn param(&mut self, slot: usize, value: Tensor) -> Var {
        let v = self.push(value, Op::Param);
        self.params.push((slot, v.idx));
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.idx(v)].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let out = self.nodes[ia].value.matmul(&self.nodes[ib].value);
        self.push(out, Op::MatMul(ia, ib))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let out = self.nodes[ia].value.matmul_t(&self.nodes[ib].value);
        self.push(out, Op::MatMulT(ia, ib))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let mut out = self.nodes[ia].value.clone();
        assert_eq!(out.len(), self.nodes[ib].value.len(), "add shapes");
        out.add_assign(&self.nodes[ib].value);
        self.push(out, Op::Add(ia, ib))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(bias));
        let mut out = self.nodes[ia].value.clone();
        let b = self.nodes[ib].value.data();
        assert_eq!(out.cols(), b.len(), "bias width");
        for r in 0..out.rows() {
            for (o, x) in out.row_mut(r).iter_mut().zip(b) {
                *o += x;
            }
        }
        self.push(out, Op::AddRow(ia, ib))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ia = self.idx(a);
        let out = self.nodes[ia].value.scale(s);
        self.push(out, Op::Scale(ia, s))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let out = self.nodes[ia].value.map(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push(out, Op::Gelu(ia))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let out = self.nodes[ia].value.map(f64::tanh);
        self.push(out, Op::Tanh(ia))
    }

    /// Row-wise layer normalisation with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (ix, ig, ib) = (self.idx(x), self.idx(gain), self.idx(bias));
        let xv = &self.nodes[ix].value;
        let (rows, cols) = (xv.rows(), xv.cols());
        let g = self.nodes[ig].value.data();
        let b = self.nodes[ib].value.data();
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let out = Tensor::new(vec![rows, cols], out).expect("layer norm shape");
        self.push(out, Op::LayerNorm { x: ix, gain: ig, bias: ib, xhat, inv_std })
    }

    /// Gathers rows of `table` (one per id).
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Var {
        let it = self.idx(table);
        let out = self.nodes[it].value.gather_rows(ids);
        self.push(out, Op::Embed { table: it, ids: ids.to_vec() })
    }

    /// Multiplies elementwise by a fixed mask (already scaled by 1/keep).
    pub fn dropout(&mut self, x: Var, mask: Vec<f64>) -> Var {
        let ix = self.idx(x);
        let mut out = self.nodes[ix].value.clone();
        assert_eq!(out.len(), mask.len(), "dropout mask");
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push(out, Op::Dropout { x: ix, mask })
    }

    /// Multi-head causal self-attention over `T×d` query/key/value rows.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (iq, ik, iv) = (self.idx(q), self.idx(k), self.idx(v));
        let (qv, kv, vv) = (&self.nodes[iq].value, &self.nodes[ik].value, &self.nodes[iv].value);
        let (t, d) = (qv.rows(), qv.cols());
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; t * d];
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let off = h * dh;
            let mut p = vec![0.0; t * t];
            for i in 0..t {
                let qi = &qv.row(i)[off..off + dh];
                let row = &mut p[i * t..i * t + i + 1];
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = &kv.row(j)[off..off + dh];
                    *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_in_place(row);
                let o = &mut out[i * d + off..i * d + off + dh];
                for (j, &pij) in row.iter().enumerate() {
                    let vj = &vv.row(j)[off..off + dh];
                    for (oo, x) in o.iter_mut().zip(vj) {
                        *oo += pij * x;
                    }
                }
            }
            probs.push(p);
        }
        let out = Tensor::new(vec![t, d], out).expect("attention shape");
        self.push(out, Op::Attention { q: iq, k: ik, v: iv, heads, probs })
    }

    /// `scale · Σ −log softmax(logits[row])[target]` over the listed rows.
    pub fn nll_sum(&mut self, logits: Var, rows: &[(usize, u32)], scale: f64) -> Result<Var> {
        let il = self.idx(logits);
        let lv = &self.nodes[il].value;
        let vocab = lv.cols();
        let mut total = 0.0;
        let mut probs = Vec::with_capacity(rows.len());
        for (n, &(r, t)) in rows.iter().enumerate() {
            if t as usize >= vocab {
                return Err(Error::TokenOutOfRange { token: t, vocab, index: n });
            }
            let row = lv.row(r);
            total -= row[t as usize] - log_sum_exp(row);
            let mut p = row.to_vec();
            softmax_in_place(&mut p);
            probs.push(p);
        }
        Ok(self.push(Tensor::scalar(total * scale), Op::NllSum { logits: il, rows: rows.to_vec(), scale, probs }))
    }

    /// `softmax(logits[row])[target]` as a scalar.
    pub fn target_prob(&mut self, logits: Var, row: usize, target: u32) -> Result<Var> {
        let il = self.idx(logits);
        let lv = &self.nodes[il].value;
        if target as usize >= lv.cols() {
            return Err(Error::TokenOutOfRange { token: target, vocab: lv.cols(), index: row });
        }
        let mut p = lv.row(row).to_vec();
        softmax_in_place(&mut p);
        let value = p[target as usize];
        Ok(self.push(Tensor::scalar(value), Op::TargetProb { logits: il, row, target, probs: p }))
    }

    /// Mean binary cross-entropy of an `n×1` logit column against 0/1 labels.
    pub fn bce_logits(&mut self, logits: Var, labels: &[f64]) -> Var {
        let il = self.idx(logits);
        let lv = self.nodes[il].value.data();
        assert_eq!(lv.len(), labels.len(), "bce labels");
        let n = labels.len().max(1) as f64;
        let loss: f64 = lv
            .iter()
            .zip(labels)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        self.push(Tensor::scalar(loss), Op::BceLogits { logits: il, labels: labels.to_vec() })
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let s = self.nodes[ia].value.data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSquares(ia))
    }

    /// Propagates d(root)/d(node) backwards and returns parameter gradients.
    ///
    /// Registered parameters that the root does not depend on get zeros.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if root.tape != self.id || root.idx >= self.nodes.len() {
            return Err(Error::ForeignRoot);
        }
        if self.nodes[root.idx].value.len() != 1 {
            return Err(Error::Shape("backward root must be a scalar".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.idx).map(|_| None).collect();
        grads[root.idx] = Some(Tensor::new(self.nodes[root.idx].value.shape().to_vec(), vec![1.0])?);

        for i in (0..=root.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    accumulate(&mut grads, *a, g.matmul_t(bv));
                    accumulate(&mut grads, *b, av.t_matmul(&g));
                }
                Op::MatMulT(a, b) => {
                    // out = a·bᵀ ⇒ da = g·b, db = gᵀ·a
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    accumulate(&mut grads, *a, g.matmul(bv));
                    accumulate(&mut grads, *b, g.t_matmul(av));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, b) => {
                    let mut gb = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for (s, x) in gb.iter_mut().zip(g.row(r)) {
                            *s += x;
                        }
                    }
                    let shape = self.nodes[*b].value.shape().to_vec();
                    accumulate(&mut grads, *b, Tensor::new(shape, gb)?);
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::Gelu(a) => {
                    let x = self.nodes[*a].value.data();
                    let mut out = g;
                    for (o, &x) in out.data_mut().iter_mut().zip(x) {
                        let inner = GELU_C * (x + 0.044715 * x * x * x);
                        let t = inner.tanh();
                        let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        *o *= d;
                    }
                    accumulate(&mut grads, *a, out);
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    let mut out = g;
                    for (o, &y) in out.data_mut().iter_mut().zip(y) {
                        *o *= 1.0 - y * y;
                    }
                    accumulate(&mut grads, *a, out);
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let cols = g.cols();
                    let rows = g.rows();
                    let gv = self.nodes[*gain].value.data();
                    let mut dgain = vec![0.0; cols];
                    let mut dbias = vec![0.0; cols];
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for c in 0..cols {
                            dgain[c] += gr[c] * xh[c];
                            dbias[c] += gr[c];
                            let dxh = gr[c] * gv[c];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh[c];
                        }
                        let n = cols as f64;
                        for c in 0..cols {
                            let dxh = gr[c] * gv[c];
                            dx[r * cols + c] = inv_std[r] * (dxh - sum_dxh / n - xh[c] * sum_dxh_xh / n);
                        }
                    }
                    let gshape = self.nodes[*gain].value.shape().to_vec();
                    let bshape = self.nodes[*bias].value.shape().to_vec();
                    accumulate(&mut grads, *gain, Tensor::new(gshape, dgain)?);
                    accumulate(&mut grads, *bias, Tensor::new(bshape, dbias)?);
                    accumulate(&mut grads, *x, Tensor::new(vec![rows, cols], dx)?);
                }
                Op::Embed { table, ids } => {
                    let tv = &self.nodes[*table].value;
                    let mut dt = Tensor::zeros(tv.shape());
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, x) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::Dropout { x, mask } => {
                    let mut out = g;
                    for (o, m) in out.data_mut().iter_mut().zip(mask) {
                        *o *= m;
                    }
                    accumulate(&mut grads, *x, out);
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (qv, kv, vv) = (&self.nodes[*q].value, &self.nodes[*k].value, &self.nodes[*v].value);
                    let (t, d) = (qv.rows(), qv.cols());
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = vec![0.0; t * d];
                    let mut dk = vec![0.0; t * d];
                    let mut dv = vec![0.0; t * d];
                    let mut dp = vec![0.0; t];
                    for (h, p) in probs.iter().enumerate() {
                        let off = h * dh;
                        for i in 0..t {
                            let go = &g.row(i)[off..off + dh];
                            let prow = &p[i * t..i * t + i + 1];
                            let mut dot_pd = 0.0;
                            for j in 0..=i {
                                let vj = &vv.row(j)[off..off + dh];
                                dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                                dot_pd += prow[j] * dp[j];
                                let pij = prow[j];
                                for (dvv, gg) in dv[j * d + off..j * d + off + dh].iter_mut().zip(go) {
                                    *dvv += pij * gg;
                                }
                            }
                            let qi = &qv.row(i)[off..off + dh];
                            for j in 0..=i {
                                let ds = prow[j] * (dp[j] - dot_pd) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = &kv.row(j)[off..off + dh];
                                for (dqq, kk) in dq[i * d + off..i * d + off + dh].iter_mut().zip(kj) {
                                    *dqq += ds * kk;
                                }
                                for (dkk, qq) in dk[j * d + off..j * d + off + dh].iter_mut().zip(qi) {
                                    *dkk += ds * qq;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *q, Tensor::new(vec![t, d], dq)?);
                    accumulate(&mut grads, *k, Tensor::new(vec![t, d], dk)?);
                    accumulate(&mut grads, *v, Tensor::new(vec![t, d], dv)?);
                }
                Op::NllSum { logits, rows, scale, probs } => {
                    let lv = &self.nodes[*logits].value;
                    let mut dl = Tensor::zeros(lv.shape());
                    let coef = g.item() * scale;
                    for (&(r, t), p) in rows.iter().zip(probs) {
                        let dr = dl.row_mut(r);
                        for (d, &pv) in dr.iter_mut().zip(p) {
                            *d += coef * pv;
                        }
                        dr[t as usize] -= coef;
                    }
                    accumulate(&mut grads, *logits, dl);
                }
                Op::TargetProb { logits, row, target, probs } => {
                    let lv = &self.nodes[*logits].value;
                    let mut dl = Tensor::zeros(lv.shape());
                    let pt = probs[*target as usize];
                    let coef = g.item() * pt;
                    let dr = dl.row_mut(*row);
                    for (d, &pv) in dr.iter_mut().zip(probs) {
                        *d = -coef * pv;
                    }
                    dr[*target as usize] += coef;
                    accumulate(&mut grads, *logits, dl);
                }
                Op::BceLogits { logits, labels } => {
                    let lv = &self.nodes[*logits].value;
                    let n = labels.len().max(1) as f64;
                    let coef = g.item() / n;
                    let data = lv
                        .data()
                        .iter()
                        .zip(labels)
                        .map(|(&z, &y)| coef * (sigmoid(z) - y))
                        .collect();
                    accumulate(&mut grads, *logits, Tensor::new(lv.shape().to_vec(), data)?);
                }
                Op::SumSquares(a) => {
                    let c = 2.0 * g.item();
                    accumulate(&mut grads, *a, self.nodes[*a].value.scale(c));
                }
            }
        }

        let max_slot = self.params.iter().map(|&(s, _)| s + 1).max().unwrap_or(0);
        let mut slots: Vec<Option<Tensor>> = vec![None; max_slot];
        for &(slot, idx) in &self.params {
            let g = if idx <= root.idx { grads[idx].take() } else { None };
            let g = g.unwrap_or_else(|| Tensor::zeros(self.nodes[idx].value.shape()));
            match &mut slots[slot] {
                Some(existing) => existing.add_assign(&g),
                s => *s = Some(g),
            }
        }
        Ok(Gradients { slots })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    match &mut grads[idx] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `out += a · b` on raw row-major buffers.
pub fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    gemm(m, k, n, a, k as isize, 1, b, n as isize, 1, out, 1.0);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_coordinates, GradCheckConfig};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_head_gradient_matches_closed_form() {
        // one sample, φ = (1, 2), three tokens with logits chosen so p(y) = 0.3
        let phi = [1.0, 2.0];
        let p_target: f64 = 0.3;
        // rows: θ_0 gives logit ln(0.3), θ_1 and θ_2 give ln(0.35)
        let l0 = p_target.ln();
        let l1 = 0.35f64.ln();
        let head = t(&[3, 2], &[l0, 0.0, l1, 0.0, l1, 0.0]);
        let mut tape = GradTape::new();
        let h = tape.param(0, head);
        let x = tape.constant(t(&[1, 2], &phi));
        let logits = tape.matmul_t(x, h);
        let lp = tape.nll_sum(logits, &[(0, 0)], -1.0).unwrap(); // log p(y|x)
        let g = tape.backward(lp).unwrap();
        let g = g.get(0).unwrap();
        assert!((g.row(0)[0] - 0.7 * phi[0]).abs() < 1e-12);
        assert!((g.row(0)[1] - 0.7 * phi[1]).abs() < 1e-12);
        assert!((g.row(1)[1] + 0.35 * phi[1]).abs() < 1e-12);
    }

    #[test]
    fn constant_root_gives_zero_gradient() {
        let mut tape = GradTape::new();
        let _p = tape.param(0, t(&[2], &[1.0, 2.0]));
        let c = tape.constant(Tensor::scalar(5.0));
        let g = tape.backward(c).unwrap();
        assert_eq!(g.get(0).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn foreign_root_is_rejected() {
        let mut a = GradTape::new();
        let mut b = GradTape::new();
        let _ = a.constant(Tensor::scalar(1.0));
        let root = b.constant(Tensor::scalar(1.0));
        assert!(matches!(a.backward(root), Err(Error::ForeignRoot)));
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        // LN → attention → gelu → tanh → nll over every op with parameters
        let shapes = vec![vec![4, 6], vec![6, 6], vec![6], vec![6], vec![6, 6], vec![5, 6]];
        let mut rng = crate::rng::stream(3, "tape-test");
        let params: Vec<Tensor> = shapes.iter().map(|s| crate::rng::normal_tensor(&mut rng, s, 0.5)).collect();
        let f = |ps: &[Tensor], grad: bool| -> (f64, Option<Gradients>) {
            let mut tape = GradTape::new();
            let v: Vec<Var> = ps.iter().enumerate().map(|(i, p)| tape.param(i, p.clone())).collect();
            let ln = tape.layer_norm(v[0], v[2], v[3]);
            let q = tape.matmul(ln, v[1]);
            let k = tape.matmul(ln, v[4]);
            let att = tape.causal_attention(q, k, ln, 2);
            let a = tape.add_row(att, v[2]);
            let a = tape.gelu(a);
            let a = tape.tanh(a);
            let a = tape.scale(a, 1.5);
            let logits = tape.matmul_t(a, v[5]);
            let nll = tape.nll_sum(logits, &[(0, 1), (2, 4), (3, 0)], 1.0 / 3.0).unwrap();
            let p = tape.target_prob(logits, 1, 2).unwrap();
            let sq = tape.sum_squares(v[4]);
            let sq = tape.scale(sq, 0.01);
            let s = tape.add(nll, p);
            let root = tape.add(s, sq);
            let val = tape.value(root).item();
            (val, if grad { Some(tape.backward(root).unwrap()) } else { None })
        };
        let report = check_coordinates(
            &params,
            |ps| f(ps, false).0,
            |ps| f(ps, true).1.unwrap().into_slots().into_iter().map(Option::unwrap).collect(),
            &GradCheckConfig { coordinates: 60, step: 1e-5, seed: 11 },
        );
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
    }

    #[test]
    fn bce_and_embed_gradients() {
        let mut rng = crate::rng::stream(5, "bce");
        let params = vec![crate::rng::normal_tensor(&mut rng, &[4, 3], 1.0), crate::rng::normal_tensor(&mut rng, &[3, 1], 1.0)];
        let f = |ps: &[Tensor], grad: bool| {
            let mut tape = GradTape::new();
            let e = tape.param(0, ps[0].clone());
            let w = tape.param(1, ps[1].clone());
            let x = tape.embed(e, &[0, 2, 2, 3]);
            let x = tape.dropout(x, vec![2.0, 0.0, 2.0, 2.0, 2.0, 0.0, 0.0, 2.0, 2.0, 2.0, 2.0, 2.0]);
            let z = tape.matmul(x, w);
            let l = tape.bce_logits(z, &[1.0, 0.0, 1.0, 0.0]);
            (tape.value(l).item(), if grad { Some(tape.backward(l).unwrap()) } else { None })
        };
        let report = check_coordinates(
            &params,
            |ps| f(ps, false).0,
            |ps| f(ps, true).1.unwrap().into_slots().into_iter().map(Option::unwrap).collect(),
            &GradCheckConfig { coordinates: 15, step: 1e-5, seed: 2 },
        );
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
    }
}
