//! Dynamic reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so every node's inputs have
//! smaller indices than the node itself. [`Tape::backward`] walks the nodes
//! once, from the loss down to index 0.

use super::tensor::{
    add_row_bias_kernel, l2_normalize_kernel, log_softmax_rows, matmul_kernel, matmul_nt_kernel, matmul_tn_kernel, relu_kernel, Tensor,
    NORM_EPS,
};
use super::NumericsError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    MatMulNt { a: usize, b: usize, m: usize, k: usize, n: usize },
    AddRowBias { x: usize, bias: usize },
    Relu { x: usize },
    Normalize { x: usize, norms: Vec<f64>, d: usize },
    RowDot { a: usize, b: usize, d: usize },
    ConcatCols { parts: Vec<(usize, usize)>, rows: usize },
    Scale { x: usize, c: f64 },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Sum { x: usize },
    WeightedNll { logits: usize, k: usize, weights: Vec<f64>, row_scale: Vec<f64>, log_probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    degenerate_normalizations: usize,
}

/// Result of [`Tape::backward`]: one optional gradient per recorded node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient w.r.t. `v`, zero-filled when `v` is unreachable from the loss.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; self.lens[v.0]])
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of rows that hit the degenerate branch of [`Tape::l2_normalize`].
    pub fn degenerate_normalizations(&self) -> usize {
        self.degenerate_normalizations
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    /// Trainable leaf (gradient tracked).
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.detached(), Op::Leaf, true)
    }

    /// Constant leaf (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.detached(), Op::Leaf, false)
    }

    fn dims2(&self, v: Var) -> Option<(usize, usize)> {
        let s = self.value(v).shape();
        (s.len() == 2).then(|| (s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = self.dims2(a).ok_or_else(|| self.dims_err("matmul", a, b))?;
        let (k2, n) = self.dims2(b).ok_or_else(|| self.dims_err("matmul", a, b))?;
        if k != k2 {
            return Err(self.dims_err("matmul", a, b));
        }
        let out = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(Tensor::raw(vec![m, n], out), Op::MatMul { a: a.0, b: b.0, m, k, n }, rg))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = self.dims2(a).ok_or_else(|| self.dims_err("matmul_nt", a, b))?;
        let (n, k2) = self.dims2(b).ok_or_else(|| self.dims_err("matmul_nt", a, b))?;
        if k != k2 {
            return Err(self.dims_err("matmul_nt", a, b));
        }
        let out = matmul_nt_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(Tensor::raw(vec![m, n], out), Op::MatMulNt { a: a.0, b: b.0, m, k, n }, rg))
    }

    /// `x[B×n] + bias[n]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let (_, n) = self.dims2(x).ok_or_else(|| self.dims_err("add_row_bias", x, bias))?;
        if self.value(bias).len() != n {
            return Err(self.dims_err("add_row_bias", x, bias));
        }
        let out = add_row_bias_kernel(self.value(x).data(), self.value(bias).data());
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x.0) || self.rg(bias.0);
        Ok(self.push(Tensor::raw(shape, out), Op::AddRowBias { x: x.0, bias: bias.0 }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = relu_kernel(self.value(x).data());
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x.0);
        self.push(Tensor::raw(shape, out), Op::Relu { x: x.0 }, rg)
    }

    /// Unit-normalizes every trailing-axis vector. Rows with norm below
    /// [`NORM_EPS`] map to zero, pass no gradient, and are counted in
    /// [`Tape::degenerate_normalizations`].
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let shape = self.value(x).shape().to_vec();
        let d = *shape.last().unwrap_or(&1);
        let (out, norms) = l2_normalize_kernel(self.value(x).data(), d);
        let degenerate = norms.iter().filter(|&&n| n < NORM_EPS).count();
        if degenerate > 0 {
            log::warn!("l2_normalize: {degenerate} degenerate row(s) mapped to zero");
            self.degenerate_normalizations += degenerate;
        }
        let rg = self.rg(x.0);
        self.push(Tensor::raw(shape, out), Op::Normalize { x: x.0, norms, d }, rg)
    }

    /// Row-wise inner product of two `B×d` matrices → `B×1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (r, d) = self.dims2(a).ok_or_else(|| self.dims_err("row_dot", a, b))?;
        if self.value(b).shape() != self.value(a).shape() {
            return Err(self.dims_err("row_dot", a, b));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .chunks(d)
            .zip(self.value(b).data().chunks(d))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
            .collect();
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(Tensor::raw(vec![r, 1], out), Op::RowDot { a: a.0, b: b.0, d }, rg))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let rows = parts
            .first()
            .and_then(|&p| self.dims2(p))
            .map(|(r, _)| r)
            .ok_or_else(|| NumericsError::Shape { op: "concat_cols", detail: "no parts".into() })?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            match self.dims2(p) {
                Some((r, c)) if r == rows => widths.push((p.0, c)),
                _ => return Err(self.dims_err("concat_cols", parts[0], p)),
            }
        }
        let total: usize = widths.iter().map(|w| w.1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &(p, c) in &widths {
                out.extend_from_slice(&self.nodes[p].value.data()[i * c..(i + 1) * c]);
            }
        }
        let rg = widths.iter().any(|&(p, _)| self.rg(p));
        Ok(self.push(Tensor::raw(vec![rows, total], out), Op::ConcatCols { parts: widths, rows }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x.0);
        self.push(Tensor::raw(shape, out), Op::Scale { x: x.0, c }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.dims_err("add", a, b));
        }
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(Tensor::raw(shape, out), Op::Add { a: a.0, b: b.0 }, rg))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.dims_err("mul", a, b));
        }
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(Tensor::raw(shape, out), Op::Mul { a: a.0, b: b.0 }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x.0);
        self.push(Tensor::scalar(s), Op::Sum { x: x.0 }, rg)
    }

    /// Mean over rows of `−log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NumericsError> {
        let (b, k) =
            self.dims2(logits).ok_or_else(|| NumericsError::Shape { op: "softmax_cross_entropy", detail: "logits must be B×K".into() })?;
        if k == 0 {
            return Err(NumericsError::Shape { op: "softmax_cross_entropy", detail: "K == 0".into() });
        }
        if targets.len() != b {
            return Err(NumericsError::Shape { op: "softmax_cross_entropy", detail: format!("{} targets for {} rows", targets.len(), b) });
        }
        if let Some((row, &t)) = targets.iter().enumerate().find(|(_, &t)| t >= k) {
            return Err(NumericsError::Index { op: "softmax_cross_entropy", index: t, bound: k, row });
        }
        let mut weights = vec![0.0; b * k];
        for (i, &t) in targets.iter().enumerate() {
            weights[i * k + t] = 1.0;
        }
        self.weighted_nll(logits, weights, vec![1.0 / b as f64; b])
    }

    /// `Σ_i row_scale[i] · Σ_j weights[i,j] · (−log softmax(logits_i)_j)`.
    ///
    /// Hard-label cross-entropy and every contrastive objective reduce to
    /// this form.
    pub fn weighted_nll(&mut self, logits: Var, weights: Vec<f64>, row_scale: Vec<f64>) -> Result<Var, NumericsError> {
        let (b, k) = self.dims2(logits).ok_or_else(|| NumericsError::Shape { op: "weighted_nll", detail: "logits must be B×K".into() })?;
        if weights.len() != b * k || row_scale.len() != b {
            return Err(NumericsError::Shape {
                op: "weighted_nll",
                detail: format!("weights {} / row_scale {} for {}×{} logits", weights.len(), row_scale.len(), b, k),
            });
        }
        let log_probs = log_softmax_rows(self.value(logits).data(), k);
        let mut total = 0.0;
        for i in 0..b {
            if row_scale[i] == 0.0 {
                continue;
            }
            let row: f64 = (0..k).filter(|&j| weights[i * k + j] != 0.0).map(|j| -weights[i * k + j] * log_probs[i * k + j]).sum();
            total += row_scale[i] * row;
        }
        let rg = self.rg(logits.0);
        Ok(self.push(Tensor::scalar(total), Op::WeightedNll { logits: logits.0, k, weights, row_scale, log_probs }, rg))
    }

    fn dims_err(&self, op: &'static str, a: Var, b: Var) -> NumericsError {
        NumericsError::dims(op, self.value(a).shape(), self.value(b).shape())
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        if !self.value(loss).is_scalar() {
            return Err(NumericsError::Contract(format!("backward needs a scalar loss, got shape {:?}", self.value(loss).shape())));
        }
        let lens: Vec<usize> = self.nodes.iter().map(|n| n.value.len()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            // leaves keep their gradient; interior gradients are consumed
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let acc = |i: usize, contrib: Vec<f64>, grads: &mut Vec<Option<Vec<f64>>>| {
                if !self.nodes[i].requires_grad {
                    return;
                }
                match &mut grads[i] {
                    Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                &Op::MatMul { a, b, m, k, n } => {
                    if self.rg(a) {
                        acc(a, matmul_nt_kernel(&g, self.nodes[b].value.data(), m, n, k), &mut grads);
                    }
                    if self.rg(b) {
                        acc(b, matmul_tn_kernel(self.nodes[a].value.data(), &g, m, k, n), &mut grads);
                    }
                }
                &Op::MatMulNt { a, b, m, k, n } => {
                    // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A
                    if self.rg(a) {
                        acc(a, matmul_kernel(&g, self.nodes[b].value.data(), m, n, k), &mut grads);
                    }
                    if self.rg(b) {
                        acc(b, matmul_tn_kernel(&g, self.nodes[a].value.data(), m, n, k), &mut grads);
                    }
                }
                &Op::AddRowBias { x, bias } => {
                    if self.rg(bias) {
                        let n = self.nodes[bias].value.len();
                        let mut gb = vec![0.0; n];
                        for row in g.chunks(n) {
                            gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                        }
                        acc(bias, gb, &mut grads);
                    }
                    acc(x, g, &mut grads);
                }
                &Op::Relu { x } => {
                    let out = node.value.data();
                    let gx = g.iter().zip(out).map(|(&gv, &o)| if o > 0.0 { gv } else { 0.0 }).collect();
                    acc(x, gx, &mut grads);
                }
                Op::Normalize { x, norms, d } => {
                    // y = x/‖x‖ ⇒ dx = (g − y·(g·y)) / ‖x‖
                    let y = node.value.data();
                    let mut gx = vec![0.0; y.len()];
                    for (r, &norm) in norms.iter().enumerate() {
                        if norm < NORM_EPS {
                            continue;
                        }
                        let sl = r * d..(r + 1) * d;
                        let dot: f64 = g[sl.clone()].iter().zip(&y[sl.clone()]).map(|(a, b)| a * b).sum();
                        for j in sl {
                            gx[j] = (g[j] - y[j] * dot) / norm;
                        }
                    }
                    acc(*x, gx, &mut grads);
                }
                &Op::RowDot { a, b, d } => {
                    let av = self.nodes[a].value.data();
                    let bv = self.nodes[b].value.data();
                    if self.rg(a) {
                        let ga = bv.iter().enumerate().map(|(j, v)| v * g[j / d]).collect();
                        acc(a, ga, &mut grads);
                    }
                    if self.rg(b) {
                        let gb = av.iter().enumerate().map(|(j, v)| v * g[j / d]).collect();
                        acc(b, gb, &mut grads);
                    }
                }
                Op::ConcatCols { parts, rows } => {
                    let total: usize = parts.iter().map(|p| p.1).sum();
                    let mut offset = 0;
                    for &(p, c) in parts {
                        if self.rg(p) {
                            let mut gp = Vec::with_capacity(rows * c);
                            for i in 0..*rows {
                                gp.extend_from_slice(&g[i * total + offset..i * total + offset + c]);
                            }
                            acc(p, gp, &mut grads);
                        }
                        offset += c;
                    }
                }
                &Op::Scale { x, c } => acc(x, g.iter().map(|v| v * c).collect(), &mut grads),
                &Op::Add { a, b } => {
                    acc(a, g.clone(), &mut grads);
                    acc(b, g, &mut grads);
                }
                &Op::Mul { a, b } => {
                    let av = self.nodes[a].value.data();
                    let bv = self.nodes[b].value.data();
                    acc(a, g.iter().zip(bv).map(|(x, y)| x * y).collect(), &mut grads);
                    acc(b, g.iter().zip(av).map(|(x, y)| x * y).collect(), &mut grads);
                }
                &Op::Sum { x } => {
                    let n = self.nodes[x].value.len();
                    acc(x, vec![g[0]; n], &mut grads);
                }
                Op::WeightedNll { logits, k, weights, row_scale, log_probs } => {
                    // d/dl_ij = s_i (W_i p_ij − w_ij), W_i = Σ_j w_ij
                    let k = *k;
                    let mut gl = vec![0.0; log_probs.len()];
                    for (i, &s) in row_scale.iter().enumerate() {
                        if s == 0.0 {
                            continue;
                        }
                        let w = &weights[i * k..(i + 1) * k];
                        let wsum: f64 = w.iter().sum();
                        for j in 0..k {
                            let p = log_probs[i * k + j].exp();
                            gl[i * k + j] = g[0] * s * (wsum * p - w[j]);
                        }
                    }
                    acc(*logits, gl, &mut grads);
                }
            }
        }
        Ok(Gradients { grads, lens })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn rand_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.uniform_range(-2.0, 2.0)).collect()).unwrap()
    }

    /// Max relative error between the tape gradient and central differences
    /// (h = 1e-5) for every input of `f`.
    fn grad_check<F>(inputs: &[Tensor], f: F) -> f64
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
        let loss = f(&mut tape, &vars);
        let grads = tape.backward(loss).unwrap();
        let eval = |xs: &[Tensor]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = xs.iter().map(|x| t.param(x)).collect();
            let l = f(&mut t, &vs);
            t.scalar_value(l)
        };
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (ti, v) in vars.iter().enumerate() {
            let analytic = grads.wrt(*v);
            for j in 0..inputs[ti].len() {
                let mut plus = inputs.to_vec();
                plus[ti].data_mut()[j] += h;
                let mut minus = inputs.to_vec();
                minus[ti].data_mut()[j] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let err = (analytic[j] - numeric).abs() / (analytic[j].abs() + numeric.abs()).max(1e-3);
                worst = worst.max(err);
            }
        }
        worst
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let i2 = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let m = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let out = t.matmul(i2, m).unwrap();
        assert_eq!(t.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
        let p = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap());
        let c = t.constant(Tensor::from_rows(&[vec![5.0], vec![7.0]]).unwrap());
        let out = t.matmul(p, c).unwrap();
        assert_eq!(t.value(out).data(), &[5.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(5);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let mut t = Tape::new();
        let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
        let c = t.matmul(va, vb).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += a.get2(i, p) * b.get2(p, j);
                }
                assert!((t.value(c).get2(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let msg = t.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn cross_entropy_examples() {
        let mut t = Tape::new();
        let l = t.constant(Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap());
        let ce = t.softmax_cross_entropy(l, &[0]).unwrap();
        assert!((t.scalar_value(ce) - 2f64.ln()).abs() < 1e-15);
        let l = t.constant(Tensor::from_rows(&[vec![30.0, -30.0]]).unwrap());
        let ce = t.softmax_cross_entropy(l, &[0]).unwrap();
        assert!(t.scalar_value(ce) <= 1e-9);
        let l = t.constant(Tensor::from_rows(&[vec![1.0, 2.0, 0.5]]).unwrap());
        let ce = t.softmax_cross_entropy(l, &[1]).unwrap();
        let direct = -(2f64.exp() / (1f64.exp() + 2f64.exp() + 0.5f64.exp())).ln();
        assert!((t.scalar_value(ce) - direct).abs() < 1e-14);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        for k in 2..=64 {
            let mut t = Tape::new();
            let l = t.constant(Tensor::filled(&[3, k], 1.7));
            let ce = t.softmax_cross_entropy(l, &[0, k / 2, k - 1]).unwrap();
            assert!((t.scalar_value(ce) - (k as f64).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn cross_entropy_errors() {
        let mut t = Tape::new();
        let l = t.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(t.softmax_cross_entropy(l, &[0, 3]), Err(NumericsError::Index { .. })));
        assert!(matches!(t.softmax_cross_entropy(l, &[0]), Err(NumericsError::Shape { .. })));
    }

    #[test]
    fn cross_entropy_grad_is_softmax_minus_onehot() {
        let mut t = Tape::new();
        let l = t.param(&Tensor::from_rows(&[vec![1.0, 2.0, 0.5], vec![0.0, 0.0, 0.0]]).unwrap());
        let ce = t.softmax_cross_entropy(l, &[1, 2]).unwrap();
        let g = t.backward(ce).unwrap().wrt(l);
        let p = crate::numerics::softmax_rows(&[1.0, 2.0, 0.5], 3);
        assert!((g[0] - p[0] / 2.0).abs() < 1e-15);
        assert!((g[1] - (p[1] - 1.0) / 2.0).abs() < 1e-15);
        assert!((g[5] - (1.0 / 3.0 - 1.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn backward_simple_cases() {
        let mut rng = Rng::new(1);
        let x = rand_tensor(&mut rng, &[2, 3]);
        let mut t = Tape::new();
        let v = t.param(&x);
        let s = t.sum(v);
        assert_eq!(t.backward(s).unwrap().wrt(v), vec![1.0; 6]);

        let mut t = Tape::new();
        let v = t.param(&x);
        let sq = t.mul(v, v).unwrap();
        let s = t.sum(sq);
        let g = t.backward(s).unwrap().wrt(v);
        for (gi, xi) in g.iter().zip(x.data()) {
            assert!((gi - 2.0 * xi).abs() < 1e-15);
        }
    }

    #[test]
    fn unreachable_param_gets_zero_and_nonscalar_rejected() {
        let mut t = Tape::new();
        let a = t.param(&Tensor::filled(&[2], 1.0));
        let b = t.param(&Tensor::filled(&[3], 1.0));
        let s = t.sum(a);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(b), vec![0.0; 3]);
        assert!(matches!(t.backward(a), Err(NumericsError::Contract(_))));
    }

    #[test]
    fn normalize_gradient_matches_finite_differences() {
        let mut rng = Rng::new(9);
        let c = rand_tensor(&mut rng, &[2, 4]);
        for _ in 0..20 {
            let x = rand_tensor(&mut rng, &[2, 4]);
            let err = grad_check(&[x], |t, v| {
                let n = t.l2_normalize(v[0]);
                let cc = t.constant(c.clone());
                let p = t.mul(n, cc).unwrap();
                let sq = t.mul(p, p).unwrap();
                t.sum(sq)
            });
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn degenerate_normalize_counts() {
        let mut t = Tape::new();
        let z = t.param(&Tensor::from_rows(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap());
        let n = t.l2_normalize(z);
        assert_eq!(t.value(n).data(), &[0.0, 0.0, 0.6, 0.8]);
        assert_eq!(t.degenerate_normalizations(), 1);
    }

    /// Every differentiable op, ≥ 100 seeded trials each, inputs in [−2, 2].
    #[test]
    fn all_ops_match_finite_differences() {
        let mut rng = Rng::new(2024);
        let mut worst: f64 = 0.0;
        for trial in 0..100 {
            let a = rand_tensor(&mut rng, &[3, 4]);
            let b = rand_tensor(&mut rng, &[4, 2]);
            let bias = rand_tensor(&mut rng, &[2]);
            let c = rand_tensor(&mut rng, &[3, 4]);
            let targets = [trial % 3, (trial + 1) % 3, (trial + 2) % 3];
            let w: Vec<f64> = (0..9).map(|_| rng.uniform()).collect();

            worst = worst.max(grad_check(&[a.clone(), b.clone(), bias.clone()], |t, v| {
                let h = t.matmul(v[0], v[1]).unwrap();
                let h = t.add_row_bias(h, v[2]).unwrap();
                let h = t.relu(h);
                let h = t.scale(h, 0.7);
                let sq = t.mul(h, h).unwrap();
                t.sum(sq)
            }));
            worst = worst.max(grad_check(&[a.clone(), c.clone()], |t, v| {
                let m = t.matmul_nt(v[0], v[1]).unwrap();
                t.softmax_cross_entropy(m, &targets).unwrap()
            }));
            worst = worst.max(grad_check(&[a.clone(), c.clone()], |t, v| {
                let na = t.l2_normalize(v[0]);
                let nc = t.l2_normalize(v[1]);
                let d = t.row_dot(na, nc).unwrap();
                let m = t.matmul_nt(na, nc).unwrap();
                let cat = t.concat_cols(&[d, m]).unwrap();
                let cat = t.scale(cat, 1.0 / 0.5);
                t.softmax_cross_entropy(cat, &[0, 0, 0]).unwrap()
            }));
            worst = worst.max(grad_check(&[a.clone(), c.clone()], |t, v| {
                let s = t.add(v[0], v[1]).unwrap();
                let m = t.matmul_nt(s, v[1]).unwrap();
                t.weighted_nll(m, w.clone(), vec![0.5, 0.0, 0.25]).unwrap()
            }));
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn deterministic_replay() {
        let run = || {
            let mut rng = Rng::new(77);
            let a = rand_tensor(&mut rng, &[3, 4]);
            let b = rand_tensor(&mut rng, &[4, 2]);
            let mut t = Tape::new();
            let (va, vb) = (t.param(&a), t.param(&b));
            let m = t.matmul(va, vb).unwrap();
            let ce = t.softmax_cross_entropy(m, &[0, 1, 0]).unwrap();
            let g = t.backward(ce).unwrap();
            (t.value(m).data().to_vec(), g.wrt(va), g.wrt(vb))
        };
        let (x, y) = (run(), run());
        assert!(x.0.iter().zip(&y.0).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert!(x.1.iter().zip(&y.1).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert!(x.2.iter().zip(&y.2).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
