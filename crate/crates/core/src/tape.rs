//! Minimal reverse-mode gradient tape.
//!
//! Every operation appends one node holding its forward value and the
//! handles of its inputs. [`GradTape::backward`] walks the nodes in reverse
//! insertion order, so each recorded op is visited exactly once.

use crate::error::{Error, Result};
use crate::kernels;
use crate::qcfs::{self, QcfsParams};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    AvgPool {
        x: Var,
        k: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Relu(Var),
    Qcfs {
        x: Var,
        lambda: Var,
        levels: u32,
        shift: f64,
    },
    Clip {
        x: Var,
        lambda: Var,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`GradTape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable tensor.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Records a tensor that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push_raw(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        Ok(self.push_raw(value, op, tracked))
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::matmul(self.value(a), self.value(b))?;
        self.push(y, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// `x·wᵀ + b` for `x[B×I]`, `w[O×I]`, `b[O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = kernels::linear(self.value(x), self.value(w), self.value(b))?;
        self.push(y, Op::Linear { x, w, b }, &[x, w, b], "linear")
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = kernels::conv2d_bias(self.value(x), self.value(w), Some(self.value(b)), stride, pad)?;
        self.push(y, Op::Conv2d { x, w, b, stride, pad }, &[x, w, b], "conv2d")
    }

    pub fn avgpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let y = kernels::avgpool2d(self.value(x), k)?;
        self.push(y, Op::AvgPool { x, k }, &[x], "avgpool2d")
    }

    pub fn maxpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let (y, argmax) = kernels::maxpool2d(self.value(x), k)?;
        self.push(y, Op::MaxPool { x, argmax }, &[x], "maxpool2d")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        self.push(y, Op::Reshape(x), &[x], "reshape")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| v.max(0.0));
        self.push(y, Op::Relu(x), &[x], "relu")
    }

    /// QCFS activation with a trainable scalar threshold `lambda`.
    pub fn qcfs(&mut self, x: Var, lambda: Var, levels: u32, shift: f64) -> Result<Var> {
        let p = QcfsParams::new(levels, self.value(lambda).item()?, shift)?;
        let y = qcfs::qcfs_forward(self.value(x), &p);
        self.push(
            y,
            Op::Qcfs {
                x,
                lambda,
                levels,
                shift,
            },
            &[x, lambda],
            "qcfs",
        )
    }

    /// `clip(x, 0, λ)` with a trainable scalar `lambda`.
    pub fn clip(&mut self, x: Var, lambda: Var) -> Result<Var> {
        let l = self.value(lambda).item()?;
        let y = self.value(x).map(|v| qcfs::clip_scalar(v, l));
        self.push(y, Op::Clip { x, lambda }, &[x, lambda], "clip")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum(x), &[x], "sum")
    }

    /// Mean cross-entropy of `logits[B×C]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = softmax_cross_entropy(self.value(logits), labels)?;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
            "cross_entropy",
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let Some(node) = self.nodes.get(loss.0) else {
            return Err(Error::Usage(format!(
                "backward from {loss:?}, which is not on this tape"
            )));
        };
        if !node.tracked {
            return Err(Error::Usage("backward from an untracked value".into()));
        }
        if node.value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(node.value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(&node.op, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) || !node.tracked {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (da, db) = kernels::matmul_backward(self.value(*a), self.value(*b), g)?;
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = kernels::linear_backward(self.value(*x), self.value(*w), g, self.tracked(*x))?;
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, dw);
                self.accumulate(grads, *b, db);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) =
                    kernels::conv2d_backward(self.value(*x), self.value(*w), g, *stride, *pad, self.tracked(*x))?;
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, dw);
                self.accumulate(grads, *b, db);
            }
            Op::AvgPool { x, k } => {
                let dx = kernels::avgpool2d_backward(self.value(*x).shape(), g, *k)?;
                self.accumulate(grads, *x, dx);
            }
            Op::MaxPool { x, argmax } => {
                let dx = kernels::maxpool2d_backward(self.value(*x).shape(), g, argmax)?;
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => {
                let dx = g.reshape(self.value(*x).shape())?;
                self.accumulate(grads, *x, dx);
            }
            Op::Relu(x) => {
                let dx = self.value(*x).zip_map(g, |v, gi| if v > 0.0 { gi } else { 0.0 })?;
                self.accumulate(grads, *x, dx);
            }
            Op::Qcfs {
                x,
                lambda,
                levels,
                shift,
            } => {
                let p = QcfsParams::new(*levels, self.value(*lambda).item()?, *shift)?;
                let (dx, dl) = qcfs::qcfs_backward(self.value(*x), g, &p)?;
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *lambda, Tensor::scalar(dl));
            }
            Op::Clip { x, lambda } => {
                let l = self.value(*lambda).item()?;
                let mut dl = 0.0;
                let dx = self.value(*x).zip_map(g, |v, gi| {
                    let (gz, gl) = qcfs::clip_grad_scalar(v, l);
                    dl += gl * gi;
                    gz * gi
                })?;
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *lambda, Tensor::scalar(dl));
            }
            Op::Sum(x) => {
                let gi = g.item()?;
                let dx = Tensor::full(self.value(*x).shape(), gi);
                self.accumulate(grads, *x, dx);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let scale = g.item()? / labels.len() as f64;
                let mut dx = probs.clone();
                let c = probs.shape()[1];
                for (row, &y) in dx.data_mut().chunks_exact_mut(c).zip(labels) {
                    row[y] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                self.accumulate(grads, *logits, dx);
            }
        }
        Ok(())
    }
}

/// Mean `−log softmax(logits)[label]` over the batch, with max-subtraction;
/// also returns the softmax probabilities.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let [b, c] = logits.dims2("cross_entropy")?;
    if labels.len() != b {
        return Err(Error::dim("cross_entropy", logits.shape(), &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
    }
    let mut probs = logits.clone();
    let mut total = 0.0;
    for (row, &y) in probs.data_mut().chunks_exact_mut(c).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        total += z.ln() - (row[y].ln());
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Ok((total / b as f64, probs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_linear_map_gives_input_broadcast() {
        let mut tape = GradTape::new();
        let w = tape.param(Tensor::from_rows(&[&[0.5, -1.0, 2.0], &[1.0, 0.0, 3.0]]).unwrap());
        let x = tape.constant(Tensor::from_rows(&[&[1.0], &[2.0], &[3.0]]).unwrap());
        let y = tape.matmul(w, x).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert!(g.get(x).is_none());
    }

    #[test]
    fn avgpool_gradient_is_uniform() {
        let mut tape = GradTape::new();
        let x = tape.param(Tensor::new(vec![1, 1, 4, 4], (0..16).map(f64::from).collect()).unwrap());
        let y = tape.avgpool2d(x, 2).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn backward_on_untracked_value_is_usage_error() {
        let mut tape = GradTape::new();
        let x = tape.constant(Tensor::scalar(1.0));
        let y = tape.sum(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Usage(_))));
        let other = GradTape::new();
        assert!(matches!(other.backward(y), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_needs_scalar() {
        let mut tape = GradTape::new();
        let x = tape.param(Tensor::vector(&[1.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Usage(_))));
    }

    #[test]
    fn shared_input_accumulates() {
        let mut tape = GradTape::new();
        let x = tape.param(Tensor::from_rows(&[&[3.0]]).unwrap());
        let y = tape.matmul(x, x).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::zeros(&[3, 5]);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 3, 4]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_large_margin_goes_to_zero() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 10.0, 100.0, 1000.0] {
            let logits = Tensor::from_rows(&[&[margin, 0.0, 0.0]]).unwrap();
            let (loss, _) = softmax_cross_entropy(&logits, &[0]).unwrap();
            assert!(loss <= prev && loss >= 0.0);
            prev = loss;
        }
        assert_eq!(prev, 0.0);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let logits = Tensor::zeros(&[1, 3]);
        assert!(matches!(softmax_cross_entropy(&logits, &[3]), Err(Error::Data(_))));
    }
}
