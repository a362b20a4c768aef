//! Reverse-mode gradient tape over a fixed set of primitives.
//!
//! Values are recorded eagerly as nodes are pushed; [`Tape::backward`]
//! walks the nodes in reverse and returns gradients for every node created
//! with [`Tape::param`]. Inputs created with [`Tape::input`] never receive
//! gradients and nothing upstream of them is differentiated.

use crate::error::{Error, Result};
use crate::exec::{Exec, ROW_CHUNK};

use super::mat::{axpy, dot, linear_forward, linear_input_grad, linear_weight_grad, Mat};

pub const BN_EPS: f64 = 1e-5;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-column statistics of a training-mode batch-norm call.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    pub rows: usize,
}

enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
        batch: bool,
    },
    Relu(Var),
    SegmentMax {
        x: Var,
        argmax: Vec<u32>,
    },
    Sigmoid(Var),
    Concat(Vec<Var>),
    Gather {
        x: Var,
        index: Vec<u32>,
    },
    Affine {
        x: Var,
        scale: f64,
    },
    ScaleRows {
        s: Var,
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        probs: Mat,
    },
    Sum(Var),
    SumSquares(Var),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    exec: Exec,
}

/// Gradients from one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new(Exec::default())
    }
}

impl Tape {
    pub fn new(exec: Exec) -> Self {
        Tape {
            nodes: Vec::new(),
            exec,
        }
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Fingerprint of every piecewise choice on the tape: which ReLU inputs
    /// were positive and which rows won each max. Two evaluations with the
    /// same fingerprint lie on the same smooth piece.
    pub fn active_pattern(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in &self.nodes[x.0].value.data {
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::SegmentMax { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
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

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Constant input.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// `x W^T + b` with `w: out x in` and `b: 1 x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (_, inp) = self.shape(x);
        let (out, w_in) = self.shape(w);
        if inp != w_in || self.shape(b) != (1, out) {
            return Err(Error::config(format!(
                "linear: input width {inp}, weight {out}x{w_in}, bias {:?}",
                self.shape(b)
            )));
        }
        let y = linear_forward(self.value(x), self.value(w), self.value(b), self.exec);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(y, Op::Linear { x, w, b }, rg))
    }

    /// Training-mode batch norm over rows. Returns the normalized output and
    /// the batch statistics used.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        if n == 0 {
            return Err(Error::Contract("batch norm over an empty batch".into()));
        }
        self.check_affine_params(c, gamma, beta)?;
        let mean: Vec<f64> = xv
            .column_sums(self.exec)
            .iter()
            .map(|s| s / n as f64)
            .collect();
        let var: Vec<f64> = self
            .exec
            .reduce_chunks(
                n,
                ROW_CHUNK,
                |range| {
                    let mut acc = vec![0.0; c];
                    for r in range {
                        for ((a, &v), &mu) in acc.iter_mut().zip(xv.row(r)).zip(&mean) {
                            *a += (v - mu) * (v - mu);
                        }
                    }
                    acc
                },
                |mut a, b| {
                    axpy(&mut a, 1.0, &b);
                    a
                },
            )
            .unwrap_or_default()
            .iter()
            .map(|s| s / n as f64)
            .collect();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (xhat, y) = self.normalize(x, &mean, &inv_std, gamma, beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let stats = BatchStats { mean, var, rows: n };
        let v = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch: true,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Eval-mode batch norm with fixed running statistics.
    pub fn batch_norm_fixed(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<Var> {
        let c = self.shape(x).1;
        self.check_affine_params(c, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::config("running statistics width mismatch"));
        }
        let inv_std: Vec<f64> = running_var
            .iter()
            .map(|v| 1.0 / (v + BN_EPS).sqrt())
            .collect();
        let (xhat, y) = self.normalize(x, running_mean, &inv_std, gamma, beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch: false,
            },
            rg,
        ))
    }

    fn check_affine_params(&self, c: usize, gamma: Var, beta: Var) -> Result<()> {
        if self.shape(gamma) != (1, c) || self.shape(beta) != (1, c) {
            return Err(Error::config(format!(
                "batch norm scale/shift must be 1x{c}"
            )));
        }
        Ok(())
    }

    fn normalize(
        &self,
        x: Var,
        mean: &[f64],
        inv_std: &[f64],
        gamma: Var,
        beta: Var,
    ) -> (Mat, Mat) {
        let xv = self.value(x);
        let c = xv.cols;
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let mut xhat = Mat::zeros(xv.rows, c);
        self.exec
            .for_row_chunks(&mut xhat.data, c, ROW_CHUNK, |first, chunk| {
                for (k, row) in chunk.chunks_mut(c).enumerate() {
                    for (j, (o, &v)) in row.iter_mut().zip(xv.row(first + k)).enumerate() {
                        *o = (v - mean[j]) * inv_std[j];
                    }
                }
            });
        let mut y = xhat.clone();
        self.exec
            .for_row_chunks(&mut y.data, c, ROW_CHUNK, |_, chunk| {
                for row in chunk.chunks_mut(c) {
                    for (j, o) in row.iter_mut().enumerate() {
                        *o = g[j] * *o + b[j];
                    }
                }
            });
        (xhat, y)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut y = self.value(x).clone();
        y.data.iter_mut().for_each(|v| *v = v.max(0.0));
        let rg = self.rg(x);
        self.push(y, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut y = self.value(x).clone();
        y.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        let rg = self.rg(x);
        self.push(y, Op::Sigmoid(x), rg)
    }

    /// Column-wise max over each row segment `offsets[s]..offsets[s + 1]`.
    /// Ties resolve to the lowest row.
    pub fn segment_max(&mut self, x: Var, offsets: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols;
        let segs = offsets.len().saturating_sub(1);
        if offsets.first() != Some(&0) || offsets.last() != Some(&xv.rows) {
            return Err(Error::config("segment offsets must span all rows"));
        }
        if offsets.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Contract("max over an empty set".into()));
        }
        let rows: Vec<(Vec<f64>, Vec<u32>)> = self.exec.map(segs, |s| {
            let start = offsets[s];
            let mut best = xv.row(start).to_vec();
            let mut arg = vec![start as u32; c];
            for r in start + 1..offsets[s + 1] {
                for (j, &v) in xv.row(r).iter().enumerate() {
                    if v > best[j] {
                        best[j] = v;
                        arg[j] = r as u32;
                    }
                }
            }
            (best, arg)
        });
        let mut y = Mat::zeros(segs, c);
        let mut argmax = Vec::with_capacity(segs * c);
        for (s, (best, arg)) in rows.into_iter().enumerate() {
            y.row_mut(s).copy_from_slice(&best);
            argmax.extend(arg);
        }
        let rg = self.rg(x);
        Ok(self.push(y, Op::SegmentMax { x, argmax }, rg))
    }

    /// Horizontal concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.shape(p).0)
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(Error::config("concat: row counts differ"));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut y = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                y.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(y, Op::Concat(parts.to_vec()), rg))
    }

    /// Row `r` of the output is row `index[r]` of `x`.
    pub fn gather_rows(&mut self, x: Var, index: Vec<u32>) -> Result<Var> {
        let n = self.shape(x).0;
        if index.iter().any(|&i| i as usize >= n) {
            return Err(Error::config("gather index out of bounds"));
        }
        let y = self.value(x).gather_rows(&index);
        let rg = self.rg(x);
        Ok(self.push(y, Op::Gather { x, index }, rg))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let mut y = self.value(x).clone();
        y.data.iter_mut().for_each(|v| *v = scale * *v + shift);
        let rg = self.rg(x);
        self.push(y, Op::Affine { x, scale }, rg)
    }

    /// Row `r` of `x` multiplied by the scalar `s[r]` (`s: n x 1`).
    pub fn scale_rows(&mut self, s: Var, x: Var) -> Result<Var> {
        let (n, k) = self.shape(x);
        if self.shape(s) != (n, 1) {
            return Err(Error::config(format!(
                "scale_rows: scales {:?} for {n} rows",
                self.shape(s)
            )));
        }
        let sv = &self.value(s).data;
        let mut y = self.value(x).clone();
        for (r, row) in y.data.chunks_mut(k.max(1)).enumerate().take(n) {
            row.iter_mut().for_each(|v| *v *= sv[r]);
        }
        let rg = self.rg(s) || self.rg(x);
        Ok(self.push(y, Op::ScaleRows { s, x }, rg))
    }

    /// Mean softmax cross-entropy over rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, m) = lv.shape();
        if n == 0 || targets.len() != n {
            return Err(Error::Contract(format!(
                "cross entropy over {n} rows with {} targets",
                targets.len()
            )));
        }
        if let Some(t) = targets.iter().find(|&&t| t as usize >= m) {
            return Err(Error::data(format!("target class {t} outside 0..{m}")));
        }
        let mut probs = Mat::zeros(n, m);
        let mut total = 0.0;
        for r in 0..n {
            let row = lv.row(r);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            total += lse - row[targets[r] as usize];
            for (p, &v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Mat::scalar(total / n as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let rg = self.rg(x);
        self.push(Mat::scalar(s), Op::Sum(x), rg)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().map(|v| v * v).sum();
        let rg = self.rg(x);
        self.push(Mat::scalar(s), Op::SumSquares(x), rg)
    }

    /// Gradients of the scalar `loss` with respect to every trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward from a non-scalar of shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Mat>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Mat::scalar(1.0));
        let exec = self.exec;
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                Op::Linear { x, w, b } => {
                    if self.rg(*x) {
                        self.acc(&mut grads, *x, linear_input_grad(&g, self.value(*w), exec));
                    }
                    if self.rg(*w) {
                        self.acc(&mut grads, *w, linear_weight_grad(&g, self.value(*x), exec));
                    }
                    if self.rg(*b) {
                        let gb = g.column_sums(exec);
                        self.acc(&mut grads, *b, Mat::from_vec(1, gb.len(), gb)?);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch,
                } => {
                    let c = g.cols;
                    let n = g.rows as f64;
                    let gsum = g.column_sums(exec);
                    let gxhat = exec
                        .reduce_chunks(
                            g.rows,
                            ROW_CHUNK,
                            |range| {
                                let mut acc = vec![0.0; c];
                                for r in range {
                                    for ((a, &gv), &h) in
                                        acc.iter_mut().zip(g.row(r)).zip(xhat.row(r))
                                    {
                                        *a += gv * h;
                                    }
                                }
                                acc
                            },
                            |mut a, b| {
                                axpy(&mut a, 1.0, &b);
                                a
                            },
                        )
                        .unwrap_or_else(|| vec![0.0; c]);
                    if self.rg(*gamma) {
                        self.acc(&mut grads, *gamma, Mat::from_vec(1, c, gxhat.clone())?);
                    }
                    if self.rg(*beta) {
                        self.acc(&mut grads, *beta, Mat::from_vec(1, c, gsum.clone())?);
                    }
                    if self.rg(*x) {
                        let gam = &self.value(*gamma).data;
                        let mut gx = Mat::zeros(g.rows, c);
                        exec.for_row_chunks(&mut gx.data, c, ROW_CHUNK, |first, chunk| {
                            for (k, row) in chunk.chunks_mut(c).enumerate() {
                                let r = first + k;
                                for j in 0..c {
                                    let scale = gam[j] * inv_std[j];
                                    row[j] = if *batch {
                                        scale / n
                                            * (n * g.get(r, j)
                                                - gsum[j]
                                                - xhat.get(r, j) * gxhat[j])
                                    } else {
                                        scale * g.get(r, j)
                                    };
                                }
                            }
                        });
                        self.acc(&mut grads, *x, gx);
                    }
                }
                Op::Relu(x) => {
                    let mut gx = g;
                    for (gv, &y) in gx.data.iter_mut().zip(&node.value.data) {
                        if y <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let mut gx = g;
                    for (gv, &y) in gx.data.iter_mut().zip(&node.value.data) {
                        *gv *= y * (1.0 - y);
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::SegmentMax { x, argmax } => {
                    let (rows, c) = self.shape(*x);
                    let mut gx = Mat::zeros(rows, c);
                    for (k, (&gv, &r)) in g.data.iter().zip(argmax).enumerate() {
                        gx.data[r as usize * c + k % c] += gv;
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (rows, c) = self.shape(p);
                        if self.rg(p) {
                            let mut gp = Mat::zeros(rows, c);
                            for r in 0..rows {
                                gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + c]);
                            }
                            self.acc(&mut grads, p, gp);
                        }
                        off += c;
                    }
                }
                Op::Gather { x, index } => {
                    let (rows, c) = self.shape(*x);
                    let mut gx = Mat::zeros(rows, c);
                    for (r, &i) in index.iter().enumerate() {
                        axpy(gx.row_mut(i as usize), 1.0, g.row(r));
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::Affine { x, scale } => {
                    let mut gx = g;
                    gx.data.iter_mut().for_each(|v| *v *= scale);
                    self.acc(&mut grads, *x, gx);
                }
                Op::ScaleRows { s, x } => {
                    let xv = self.value(*x);
                    let sv = self.value(*s);
                    if self.rg(*s) {
                        let gs: Vec<f64> = (0..g.rows).map(|r| dot(g.row(r), xv.row(r))).collect();
                        self.acc(&mut grads, *s, Mat::from_vec(g.rows, 1, gs)?);
                    }
                    if self.rg(*x) {
                        let mut gx = g.clone();
                        for r in 0..gx.rows {
                            let k = sv.data[r];
                            gx.row_mut(r).iter_mut().for_each(|v| *v *= k);
                        }
                        self.acc(&mut grads, *x, gx);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let n = probs.rows as f64;
                    let scale = g.data[0] / n;
                    let mut gl = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        gl.data[r * gl.cols + t as usize] -= 1.0;
                    }
                    gl.data.iter_mut().for_each(|v| *v *= scale);
                    self.acc(&mut grads, *logits, gl);
                }
                Op::Sum(x) => {
                    let (r, c) = self.shape(*x);
                    self.acc(&mut grads, *x, Mat::filled(r, c, g.data[0]));
                }
                Op::SumSquares(x) => {
                    let mut gx = self.value(*x).clone();
                    let k = 2.0 * g.data[0];
                    gx.data.iter_mut().for_each(|v| *v *= k);
                    self.acc(&mut grads, *x, gx);
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }
}

/// Logistic function, evaluated without overflow for large `|x|`.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        for x in [-30.0, -2.5, -0.1, 0.3, 7.0, 40.0] {
            assert!((sigmoid(-x) - (1.0 - sigmoid(x))).abs() < 1e-12);
        }
        let tiny = sigmoid(-745.0);
        assert!(tiny > 0.0 && tiny.is_finite());
        assert!(sigmoid(800.0) == 1.0);
    }

    #[test]
    fn sum_of_params_has_unit_gradient() {
        let mut t = Tape::default();
        let p = t.param(Mat::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5]]).unwrap());
        let loss = t.sum(p);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(p).unwrap().data, vec![1.0; 4]);
    }

    #[test]
    fn squared_norm_of_wx() {
        let w0 = Mat::from_rows(&[vec![1.0, 2.0, -1.0], vec![0.5, 0.0, 3.0]]).unwrap();
        let x0 = Mat::from_rows(&[vec![2.0, -1.0, 0.5]]).unwrap();
        let mut t = Tape::default();
        let w = t.param(w0.clone());
        let x = t.input(x0.clone());
        let b = t.input(Mat::zeros(1, 2));
        let y = t.linear(x, w, b).unwrap();
        let loss = t.sum_squares(y);
        let g = t.backward(loss).unwrap();
        // closed form: 2 (W x) x^T
        let wx: Vec<f64> = (0..2).map(|o| dot(w0.row(o), &x0.data)).collect();
        let mut expect = Vec::new();
        for wo in &wx {
            for xi in &x0.data {
                expect.push(2.0 * wo * xi);
            }
        }
        assert_eq!(g.get(w).unwrap().data, expect);
        assert!(g.get(x).is_none());
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut t = Tape::default();
        let p = t.param(Mat::zeros(2, 2));
        assert!(matches!(t.backward(p), Err(Error::Contract(_))));
    }

    #[test]
    fn segment_max_routes_to_lowest_tie() {
        let mut t = Tape::default();
        let x = t.param(Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 0.0], vec![3.0, 2.0]]).unwrap());
        let y = t.segment_max(x, &[0, 3]).unwrap();
        assert_eq!(t.value(y).data, vec![3.0, 2.0]);
        let loss = t.sum(y);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data, vec![0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(
            t.segment_max(x, &[0, 0, 3]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn cross_entropy_reference_values() {
        let mut t = Tape::default();
        let l = t.input(Mat::zeros(3, 4));
        let loss = t.cross_entropy(l, &[0, 1, 3]).unwrap();
        assert!((t.value(loss).data[0] - 4f64.ln()).abs() < 1e-15);
        let l = t.input(Mat::from_rows(&[vec![0.0, 1000.0, 0.0]]).unwrap());
        let loss = t.cross_entropy(l, &[1]).unwrap();
        assert!(t.value(loss).data[0].abs() < 1e-12);
        assert!(matches!(t.cross_entropy(l, &[3]), Err(Error::Data(_))));
    }
}
