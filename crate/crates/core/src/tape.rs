//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation as it is evaluated. Nodes are appended
//! in evaluation order, so the node list is already topologically sorted and
//! the backward pass is a single reverse sweep.

use crate::error::{Result, UdacError};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    /// Input and the elementwise derivative saved by the forward pass.
    Mish(Var, Tensor),
    Relu(Var),
    Tanh(Var),
    Clamp(Var, f64, f64),
    ConcatCols(Vec<Var>),
    RepeatRows(Var, usize),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    RowMean(Var),
    LogSoftmax(Var),
    Gather(Var, Vec<usize>),
    QuantileHuber {
        pred: Var,
        target: Tensor,
        taus: Tensor,
        kappa: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros if `v` did not
    /// contribute to the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn has(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }

    pub fn collect(&self, vars: &[Var]) -> Vec<Tensor> {
        vars.iter().map(|&v| self.wrt(v)).collect()
    }
}

pub fn softplus(x: f64) -> f64 {
    (-x.abs()).exp().ln_1p() + x.max(0.0)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(tanh(softplus(x)), sigmoid(x))` from a single exponential, using
/// `tanh(ln(1 + e)) = n / (n + 2)` with `n = e (e + 2)`.
fn tanh_softplus(x: f64) -> (f64, f64) {
    if x > 20.0 {
        return (1.0, sigmoid(x));
    }
    let e = x.exp();
    let n = e * (e + 2.0);
    (n / (n + 2.0), e / (1.0 + e))
}

/// `x * tanh(softplus(x))`.
pub fn mish(x: f64) -> f64 {
    x * tanh_softplus(x).0
}

pub fn mish_grad(x: f64) -> f64 {
    let (t, s) = tanh_softplus(x);
    t + x * (1.0 - t * t) * s
}

/// Quantile Huber loss for a single residual. `kappa` must be positive.
pub fn quantile_huber_value(delta: f64, tau: f64, kappa: f64) -> f64 {
    let w = (if delta < 0.0 { 1.0 } else { 0.0 } - tau).abs();
    if delta.abs() < kappa {
        w * delta * delta / (2.0 * kappa)
    } else {
        w * (delta.abs() - kappa / 2.0)
    }
}

/// Derivative of [`quantile_huber_value`] with respect to `delta`.
pub fn quantile_huber_grad(delta: f64, tau: f64, kappa: f64) -> f64 {
    let w = (if delta < 0.0 { 1.0 } else { 0.0 } - tau).abs();
    if delta.abs() < kappa {
        w * delta / kappa
    } else {
        w * delta.signum()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    /// A differentiable input (parameter or anything else we want adjoints for).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A value that is treated as fixed: no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn binary_shape_check(&self, op: &str, a: Var, b: Var) {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        assert!(sa == sb, "{op}: operand shapes differ, {sa:?} vs {sb:?}");
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert!(
            ta.cols() == tb.rows(),
            "matmul: inner dimensions differ, {:?} x {:?}",
            ta.shape(),
            tb.shape()
        );
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), rg)
    }

    /// `x + bias` with `bias` of shape `[1, cols]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (tx, tb) = (self.value(x), self.value(bias));
        assert!(
            tb.len() == tx.cols(),
            "add_row: bias has {} entries for {} columns",
            tb.len(),
            tx.cols()
        );
        let c = tx.cols();
        let mut out = tx.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += tb.data()[i % c];
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(out, Op::AddRow(x, bias), rg)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("zip_with keeps shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_shape_check("add", a, b);
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_shape_check("sub", a, b);
        let out = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_shape_check("mul", a, b);
        let out = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x * k);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, k), rg)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x + k);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(out, Op::Square(a), rg)
    }

    pub fn mish(&mut self, a: Var) -> Var {
        let rg = self.rg(a);
        let x = self.value(a);
        if !rg {
            let out = x.map(mish);
            return self.push(out, Op::Mish(a, Tensor::zeros(&[0])), false);
        }
        let mut out = Vec::with_capacity(x.len());
        let mut der = Vec::with_capacity(x.len());
        for &v in x.data() {
            let (t, s) = tanh_softplus(v);
            out.push(v * t);
            der.push(t + v * (1.0 - t * t) * s);
        }
        let shape = x.shape().to_vec();
        let out = Tensor::new(shape.clone(), out).expect("mish value");
        let der = Tensor::new(shape, der).expect("mish derivative");
        self.push(out, Op::Mish(a, der), true)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    /// Elementwise clamp; the gradient is zero where the input was clipped.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(out, Op::Clamp(a, lo, hi), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::hstack(&tensors).expect("concat_cols: row counts differ");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Each input row repeated `times` times consecutively: output row
    /// `r * times + j` equals input row `r`.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        let t = self.value(a);
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(rows * times * cols);
        for r in 0..rows {
            for _ in 0..times {
                data.extend_from_slice(t.row(r));
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::matrix(rows * times, cols, data), Op::RepeatRows(a, times), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self
            .value(a)
            .clone()
            .reshape(shape)
            .expect("reshape: element count differs");
        let rg = self.rg(a);
        self.push(out, Op::Reshape(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.sum() / t.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Mean over columns: `[rows, cols] -> [rows, 1]`.
    pub fn row_mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols() as f64;
        let data = (0..t.rows()).map(|r| t.row(r).iter().sum::<f64>() / c).collect();
        let out = Tensor::matrix(t.rows(), 1, data);
        let rg = self.rg(a);
        self.push(out, Op::RowMean(a), rg)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = t.clone();
        let c = t.cols();
        for row in out.data_mut().chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::LogSoftmax(a), rg)
    }

    /// Picks column `indices[r]` from row `r`: `[rows, cols] -> [rows, 1]`.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Var {
        let t = self.value(a);
        assert_eq!(t.rows(), indices.len(), "gather: one index per row");
        let data = indices
            .iter()
            .enumerate()
            .map(|(r, &c)| {
                assert!(c < t.cols(), "gather: column {c} out of range");
                t.get(r, c)
            })
            .collect();
        let out = Tensor::matrix(t.rows(), 1, data);
        let rg = self.rg(a);
        self.push(out, Op::Gather(a, indices.to_vec()), rg)
    }

    /// Pairwise quantile Huber loss between predicted quantiles `pred`
    /// (`[B, N]`, levels `taus`) and fixed target samples `target` (`[B, K]`):
    ///
    /// `mean_b (1/(N K)) sum_i sum_j L(target[b,j] - pred[b,i]; taus[b,i])`.
    pub fn quantile_huber(&mut self, pred: Var, target: Tensor, taus: Tensor, kappa: f64) -> Var {
        let p = self.value(pred);
        assert!(kappa > 0.0, "quantile_huber: kappa must be positive");
        assert_eq!(p.shape(), taus.shape(), "quantile_huber: taus must match pred");
        assert_eq!(p.rows(), target.rows(), "quantile_huber: batch sizes differ");
        let (b, n, k) = (p.rows(), p.cols(), target.cols());
        let mut total = 0.0;
        for r in 0..b {
            for i in 0..n {
                let (q, tau) = (p.get(r, i), taus.get(r, i));
                for j in 0..k {
                    total += quantile_huber_value(target.get(r, j) - q, tau, kappa);
                }
            }
        }
        let value = total / (b * n * k) as f64;
        let rg = self.rg(pred);
        self.push(
            Tensor::scalar(value),
            Op::QuantileHuber {
                pred,
                target,
                taus,
                kappa,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(UdacError::Shape {
                op: "backward (loss must be scalar)",
                expected: vec![1],
                actual: lv.shape().to_vec(),
            });
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0]).expect("scalar"));

        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let acc = |grads: &mut [Option<Tensor>], v: Var, t: Tensor| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let unary = |v: Var, f: &dyn Fn(f64, f64, f64) -> f64| -> Tensor {
            // f(input, output, upstream)
            let x = self.value(v);
            let data = x
                .data()
                .iter()
                .zip(node.value.data())
                .zip(g.data())
                .map(|((&xi, &yi), &gi)| f(xi, yi, gi))
                .collect();
            Tensor::new(x.shape().to_vec(), data).expect("unary grad")
        };

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.rg(a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, tb.data(), true, &mut da, false);
                    acc(grads, a, Tensor::matrix(m, k, da));
                }
                if self.rg(b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, g.data(), false, &mut db, false);
                    acc(grads, b, Tensor::matrix(k, n, db));
                }
            }
            &Op::AddRow(x, bias) => {
                if self.rg(bias) {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let shape = self.value(bias).shape().to_vec();
                    acc(grads, bias, Tensor::new(shape, db).expect("bias grad"));
                }
                acc(grads, x, g.clone());
            }
            &Op::Add(a, b) => {
                acc(grads, a, g.clone());
                acc(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                acc(grads, a, g.clone());
                if self.rg(b) {
                    acc(grads, b, g.map(|x| -x));
                }
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    let t = unary(b, &|bv, _, gi| bv * gi);
                    acc(grads, a, t);
                }
                if self.rg(b) {
                    let t = unary(a, &|av, _, gi| av * gi);
                    acc(grads, b, t);
                }
            }
            &Op::Scale(a, k) => acc(grads, a, g.map(|x| x * k)),
            &Op::AddScalar(a) => acc(grads, a, g.clone()),
            &Op::Square(a) => acc(grads, a, unary(a, &|x, _, gi| 2.0 * x * gi)),
            Op::Mish(a, der) => {
                let data = der.data().iter().zip(g.data()).map(|(d, gi)| d * gi).collect();
                acc(grads, *a, Tensor::new(der.shape().to_vec(), data).expect("mish grad"));
            }
            &Op::Relu(a) => acc(grads, a, unary(a, &|x, _, gi| if x > 0.0 { gi } else { 0.0 })),
            &Op::Tanh(a) => acc(grads, a, unary(a, &|_, y, gi| (1.0 - y * y) * gi)),
            &Op::Clamp(a, lo, hi) => acc(grads, a, unary(a, &|x, _, gi| if x > lo && x < hi { gi } else { 0.0 })),
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.rg(p) {
                        let mut data = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            data.extend_from_slice(&g.row(r)[offset..offset + c]);
                        }
                        acc(grads, p, Tensor::matrix(rows, c, data));
                    }
                    offset += c;
                }
            }
            &Op::RepeatRows(a, times) => {
                let t = self.value(a);
                let (rows, cols) = (t.rows(), t.cols());
                let mut data = vec![0.0; rows * cols];
                for r in 0..rows {
                    let dst = &mut data[r * cols..(r + 1) * cols];
                    for j in 0..times {
                        for (d, v) in dst.iter_mut().zip(g.row(r * times + j)) {
                            *d += v;
                        }
                    }
                }
                acc(grads, a, Tensor::matrix(rows, cols, data));
            }
            &Op::Reshape(a) => {
                let shape = self.value(a).shape().to_vec();
                acc(grads, a, g.clone().reshape(&shape).expect("reshape grad"));
            }
            &Op::Sum(a) => {
                let shape = self.value(a).shape().to_vec();
                acc(grads, a, Tensor::full(&shape, g.item()));
            }
            &Op::Mean(a) => {
                let t = self.value(a);
                acc(grads, a, Tensor::full(t.shape(), g.item() / t.len() as f64));
            }
            &Op::RowMean(a) => {
                let t = self.value(a);
                let c = t.cols();
                let data = (0..t.len()).map(|i| g.data()[i / c] / c as f64).collect();
                acc(grads, a, Tensor::new(t.shape().to_vec(), data).expect("row_mean grad"));
            }
            &Op::LogSoftmax(a) => {
                let c = g.cols();
                let mut data = Vec::with_capacity(g.len());
                for (yrow, grow) in node.value.data().chunks(c).zip(g.data().chunks(c)) {
                    let gsum: f64 = grow.iter().sum();
                    data.extend(yrow.iter().zip(grow).map(|(y, gi)| gi - y.exp() * gsum));
                }
                acc(grads, a, Tensor::new(g.shape().to_vec(), data).expect("lsm grad"));
            }
            Op::Gather(a, indices) => {
                let t = self.value(*a);
                let mut out = Tensor::zeros(t.shape());
                for (r, &c) in indices.iter().enumerate() {
                    out.set(r, c, g.data()[r]);
                }
                acc(grads, *a, out);
            }
            Op::QuantileHuber {
                pred,
                target,
                taus,
                kappa,
            } => {
                let p = self.value(*pred);
                let (b, n, k) = (p.rows(), p.cols(), target.cols());
                let scale = g.item() / (b * n * k) as f64;
                let mut out = Tensor::zeros(p.shape());
                for r in 0..b {
                    for i in 0..n {
                        let (q, tau) = (p.get(r, i), taus.get(r, i));
                        let s: f64 = (0..k)
                            .map(|j| quantile_huber_grad(target.get(r, j) - q, tau, *kappa))
                            .sum();
                        out.set(r, i, -s * scale);
                    }
                }
                acc(grads, *pred, out);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_sum_gradient_is_input() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::matrix(3, 1, vec![0.5, -1.0, 2.0]));
        let x = t.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]));
        let y = t.matmul(x, w);
        let l = t.sum(y);
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(w).data(), &[1.0, 2.0, 3.0]);
        assert!(!g.has(x) || g.wrt(x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quadratic_gradient() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::scalar(5.0));
        let d = t.add_scalar(w, -3.0);
        let l = t.square(d);
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(w).item(), 4.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        assert!(t.backward(w).is_err());
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::scalar(1.0));
        let b = t.leaf(Tensor::matrix(2, 2, vec![1.0; 4]));
        let l = t.square(a);
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(b), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn shared_node_accumulates() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::scalar(3.0));
        let b = t.mul(a, a);
        let c = t.add(b, a);
        let g = t.backward(c).unwrap();
        assert_eq!(g.wrt(a).item(), 7.0);
    }

    #[test]
    fn mish_reference_values() {
        assert_eq!(mish(0.0), 0.0);
        // 1 * tanh(ln(1 + e)) evaluated in extended precision.
        assert!((mish(1.0) - 0.865_098_388_267_310_3).abs() < 1e-15);
        assert!(mish(800.0).is_finite() && mish(-800.0).is_finite());
        for k in -400..=400 {
            let x = k as f64 * 0.1;
            let slow = x * softplus(x).tanh();
            assert!((mish(x) - slow).abs() <= 1e-14 * (1.0 + slow.abs()), "{x}");
        }
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 700.0]));
        let l = t.log_softmax(a);
        for r in 0..2 {
            let s: f64 = t.value(l).row(r).iter().map(|x| x.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
