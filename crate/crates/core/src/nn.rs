//! Layers, parameter traversal and the SGD optimizer shared by every model.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Gradients, Graph, Tensor, Var};

/// Models expose their parameters under stable dotted names such as
/// `stage1.linear.weight`. The same names key gradients and checkpoints.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));

    fn named_parameters(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Affine map `x W + b` with `W: [in, out]`; `b` is absent for layers that feed
/// straight into batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    /// Weights and bias uniform in `±1/sqrt(fan_in)`.
    pub fn new(fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| rng.uniform(-bound, bound)).collect();
        let b = (0..fan_out).map(|_| rng.uniform(-bound, bound)).collect();
        Self {
            weight: Tensor::new(vec![fan_in, fan_out], w).expect("shape"),
            bias: Some(Tensor::vector(b)),
        }
    }

    pub fn without_bias(fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| rng.uniform(-bound, bound)).collect();
        Self {
            weight: Tensor::new(vec![fan_in, fan_out], w).expect("shape"),
            bias: None,
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros([fan_in, fan_out]),
            bias: Some(Tensor::zeros([fan_out])),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, g: &mut Graph, x: Var, prefix: &str, trainable: bool) -> Result<Var> {
        let w = g.bind(&join(prefix, "weight"), &self.weight, trainable);
        let h = g.matmul(x, w)?;
        match &self.bias {
            Some(bias) => {
                let b = g.bind(&join(prefix, "bias"), bias, trainable);
                g.add(h, b)
            }
            None => Ok(h),
        }
    }
}

impl Parameters for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Mean softmax cross-entropy of `[n, k]` logits against integer labels.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: shape,
            rhs: vec![labels.len()],
        });
    }
    let (n, k) = (shape[0], shape[1]);
    if n == 0 {
        return Err(Error::invalid("cross-entropy of an empty batch"));
    }
    let mut onehot = Tensor::zeros([n, k]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::invalid(format!("label {y} out of range for {k} classes")));
        }
        onehot.data_mut()[i * k + y] = 1.0;
    }
    let logp = g.log_softmax(logits)?;
    let y = g.constant(onehot);
    let picked = g.mul(logp, y)?;
    let total = g.sum_all(picked)?;
    g.scale(total, -1.0 / n as f64)
}

/// Row-wise softmax of plain values.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let w = logits.cols().max(1);
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(w) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let s: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / s));
    }
    Tensor::new(logits.shape().to_vec(), out).expect("same shape")
}

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let w = t.cols().max(1);
    t.data()
        .chunks(w)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// SGD with optional heavy-ball momentum (`v <- mu v + g; p <- p - lr v`).
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub momentum: f64,
    velocity: HashMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: HashMap::new(),
        }
    }

    /// Updates every parameter of `model` whose name appears in `grads`.
    pub fn step(&mut self, model: &mut dyn Parameters, prefix: &str, grads: &Gradients, lr: f64) {
        let momentum = self.momentum;
        let velocity = &mut self.velocity;
        model.visit_mut(prefix, &mut |name, p| {
            let Some(g) = grads.get(name) else { return };
            if momentum == 0.0 {
                for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                    *w -= lr * d;
                }
                return;
            }
            let v = velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; g.len()]);
            for ((w, d), vel) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vel = momentum * *vel + d;
                *w -= lr * *vel;
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference_gradient, max_relative_error};

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = SeededRng::new(2);
        let t = Tensor::new(vec![5, 7], rng.normals(35)).unwrap();
        let p = softmax_rows(&t);
        for r in 0..5 {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![0, 1]);
    }

    #[test]
    fn cross_entropy_matches_finite_differences() {
        let mut rng = SeededRng::new(9);
        let logits = Tensor::new(vec![1, 4], rng.normals(4)).unwrap();
        let labels = [2usize];
        let mut g = Graph::new();
        let l = g.param("z", &logits);
        let loss = cross_entropy(&mut g, l, &labels).unwrap();
        let grad = g.backward(loss).unwrap().get("z").unwrap().clone();
        let fd = finite_difference_gradient(
            |z| {
                let mut g = Graph::new();
                let l = g.constant(z.clone());
                let loss = cross_entropy(&mut g, l, &labels)?;
                Ok(g.value(loss).data()[0])
            },
            &logits,
            1e-6,
        )
        .unwrap();
        assert!(max_relative_error(grad.data(), fd.data()) < 1e-5);
    }

    #[test]
    fn cross_entropy_grad_at_uniform_prediction() {
        let k = 5;
        let mut g = Graph::new();
        let l = g.param("z", &Tensor::zeros([1, k]));
        let loss = cross_entropy(&mut g, l, &[3]).unwrap();
        let grad = g.backward(loss).unwrap().get("z").unwrap().clone();
        for (i, v) in grad.data().iter().enumerate() {
            let expect = 1.0 / k as f64 - if i == 3 { 1.0 } else { 0.0 };
            assert!((v - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros([2, 3]));
        assert!(cross_entropy(&mut g, l, &[0, 3]).is_err());
        assert!(cross_entropy(&mut g, l, &[0]).is_err());
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut lin = Linear::zeros(1, 1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let y = lin.forward(&mut g, x, "lin", true).unwrap();
        let loss = g.sum_all(y).unwrap();
        let grads = g.backward(loss).unwrap();
        let mut opt = Sgd::new(0.9);
        opt.step(&mut lin, "lin", &grads, 0.1);
        assert!((lin.bias.as_ref().unwrap().data()[0] + 0.1).abs() < 1e-15);
        opt.step(&mut lin, "lin", &grads, 0.1);
        assert!((lin.bias.as_ref().unwrap().data()[0] + 0.1 + 0.19).abs() < 1e-15);
    }
}
