//! MLP classifier split into a staged feature extractor and a linear head.
//!
//! Each stage is `Linear -> BatchNorm -> tanh`. Features for the flow are tapped
//! after `split_stage`; only stages up to the split are touched at test time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{argmax_rows, join, softmax_rows, Linear, Parameters};
use crate::rng::SeededRng;
use crate::tensor::{Graph, Tensor, Var};

/// Parameter-name prefix used when a backbone is bound into a graph.
pub const BACKBONE_PREFIX: &str = "backbone";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with running statistics.
    Eval,
}

/// How a forward pass treats batch norm and which stages record gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pass {
    pub mode: BnMode,
    /// Fold batch statistics into the running averages (train mode only).
    pub update_stats: bool,
    /// Stages `1..=trainable_upto` bind their parameters as trainable; 0 freezes all.
    pub trainable_upto: usize,
    /// Whether the head binds as trainable.
    pub train_head: bool,
}

impl Pass {
    pub fn eval() -> Self {
        Self {
            mode: BnMode::Eval,
            update_stats: false,
            trainable_upto: 0,
            train_head: false,
        }
    }

    pub fn train_all() -> Self {
        Self {
            mode: BnMode::Train,
            update_stats: true,
            trainable_upto: usize::MAX,
            train_head: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(dim: usize, momentum: f64, eps: f64) -> Self {
        Self {
            gamma: Tensor::full([dim], 1.0),
            beta: Tensor::zeros([dim]),
            running_mean: Tensor::zeros([dim]),
            running_var: Tensor::full([dim], 1.0),
            momentum,
            eps,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    /// Normalizes `x: [n, d]`. Train mode uses the biased batch variance and, when
    /// `update_stats` is set, moves the running averages by `momentum`.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        x: Var,
        prefix: &str,
        mode: BnMode,
        update_stats: bool,
        trainable: bool,
    ) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "batchnorm",
                lhs: shape,
                rhs: vec![self.dim()],
            });
        }
        let gamma = g.bind(&join(prefix, "gamma"), &self.gamma, trainable);
        let beta = g.bind(&join(prefix, "beta"), &self.beta, trainable);
        let normalized = match mode {
            BnMode::Train => {
                if shape[0] < 2 {
                    return Err(Error::invalid(
                        "batch norm in train mode needs a batch of at least 2",
                    ));
                }
                let mean = g.mean(x, 0)?;
                let centered = g.sub(x, mean)?;
                let sq = g.square(centered)?;
                let var = g.mean(sq, 0)?;
                if update_stats {
                    let m = self.momentum;
                    let bm = g.value(mean).data();
                    let bv = g.value(var).data();
                    for (r, b) in self.running_mean.data_mut().iter_mut().zip(bm) {
                        *r = (1.0 - m) * *r + m * b;
                    }
                    for (r, b) in self.running_var.data_mut().iter_mut().zip(bv) {
                        *r = (1.0 - m) * *r + m * b;
                    }
                }
                let shifted = g.add_scalar(var, self.eps)?;
                let inv_std = g.powf(shifted, -0.5)?;
                g.mul(centered, inv_std)?
            }
            BnMode::Eval => {
                let mean = g.constant(self.running_mean.clone());
                let inv_std = self.running_var.map(|v| 1.0 / (v + self.eps).sqrt());
                let inv_std = g.constant(inv_std);
                let centered = g.sub(x, mean)?;
                g.mul(centered, inv_std)?
            }
        };
        let scaled = g.mul(normalized, gamma)?;
        g.add(scaled, beta)
    }
}

impl Parameters for BatchNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// `tanh(bn(x W))`. The linear map has no bias; batch norm's `beta` plays that role.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub linear: Linear,
    pub bn: BatchNorm,
}

impl Stage {
    fn forward(&mut self, g: &mut Graph, x: Var, prefix: &str, pass: Pass, trainable: bool) -> Result<Var> {
        let h = self.linear.forward(g, x, &join(prefix, "linear"), trainable)?;
        let h = self
            .bn
            .forward(g, h, &join(prefix, "bn"), pass.mode, pass.update_stats, trainable)?;
        g.tanh(h)
    }
}

impl Parameters for Stage {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.linear.visit(&join(prefix, "linear"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.linear.visit_mut(&join(prefix, "linear"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub input_dim: usize,
    /// Output widths of the three extractor stages.
    pub widths: [usize; 3],
    pub classes: usize,
    pub split_stage: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_dim: 20,
            widths: [32, 16, 16],
            classes: 10,
            split_stage: 2,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.widths.contains(&0) {
            return Err(Error::invalid("backbone widths must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if !(1..=3).contains(&self.split_stage) {
            return Err(Error::invalid("split_stage must be 1, 2 or 3"));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) || self.bn_eps <= 0.0 {
            return Err(Error::invalid("bn momentum must be in (0,1) and eps positive"));
        }
        Ok(())
    }

    /// Width of the features fed to the flow.
    pub fn feature_dim(&self) -> usize {
        self.widths[self.split_stage - 1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
    pub stages: Vec<Stage>,
    pub head: Linear,
}

/// Split-point features and class logits from one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub split_features: Var,
    pub logits: Var,
}

impl Backbone {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(seed);
        let mut fan_in = config.input_dim;
        let mut stages = Vec::with_capacity(3);
        for &w in &config.widths {
            stages.push(Stage {
                linear: Linear::without_bias(fan_in, w, &mut rng),
                bn: BatchNorm::new(w, config.bn_momentum, config.bn_eps),
            });
            fan_in = w;
        }
        let head = Linear::new(fan_in, config.classes, &mut rng);
        Ok(Self { config, stages, head })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn split_stage(&self) -> usize {
        self.config.split_stage
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    fn stage_prefix(i: usize) -> String {
        join(BACKBONE_PREFIX, &format!("stage{}", i + 1))
    }

    pub fn head_prefix() -> String {
        join(BACKBONE_PREFIX, "head")
    }

    /// Name prefix of stage `stage` (1-based) as bound in a graph.
    pub fn stage_name(stage: usize) -> String {
        Self::stage_prefix(stage - 1)
    }

    /// Output of stages `1..=upto`.
    pub fn extract_features(&mut self, g: &mut Graph, x: Var, upto: usize, pass: Pass) -> Result<Var> {
        if !(1..=3).contains(&upto) {
            return Err(Error::invalid(format!("stage index {upto} not in 1..=3")));
        }
        let shape = g.value(x).shape();
        if shape.len() != 2 || shape[1] != self.config.input_dim {
            return Err(Error::ShapeMismatch {
                op: "extract_features",
                lhs: shape.to_vec(),
                rhs: vec![self.config.input_dim],
            });
        }
        let mut h = x;
        for i in 0..upto {
            let trainable = i < pass.trainable_upto;
            h = self.stages[i].forward(g, h, &Self::stage_prefix(i), pass, trainable)?;
        }
        Ok(h)
    }

    pub fn logits(&self, g: &mut Graph, features: Var, trainable: bool) -> Result<Var> {
        self.head.forward(g, features, &Self::head_prefix(), trainable)
    }

    /// Full pass returning both the split features and the logits.
    pub fn forward(&mut self, g: &mut Graph, x: Var, pass: Pass) -> Result<ForwardOutput> {
        let split = self.split_stage();
        let split_features = self.extract_features(g, x, split, pass)?;
        let mut h = split_features;
        for i in split..3 {
            let trainable = i < pass.trainable_upto;
            h = self.stages[i].forward(g, h, &Self::stage_prefix(i), pass, trainable)?;
        }
        let logits = self.logits(g, h, pass.train_head)?;
        Ok(ForwardOutput {
            split_features,
            logits,
        })
    }

    /// Eval-mode features as plain values.
    pub fn features(&self, x: &Tensor, upto: usize) -> Result<Tensor> {
        let mut frozen = self.clone();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let f = frozen.extract_features(&mut g, xv, upto, Pass::eval())?;
        Ok(g.value(f).clone())
    }

    /// Softmax of the head applied to full-depth features.
    pub fn classify(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let f = g.constant(features.clone());
        let l = self.logits(&mut g, f, false)?;
        Ok(softmax_rows(g.value(l)))
    }

    /// Eval-mode logits for raw inputs.
    pub fn eval_logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut frozen = self.clone();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = frozen.forward(&mut g, xv, Pass::eval())?;
        Ok(g.value(out.logits).clone())
    }

    /// Arg-max class per sample (eval mode, ties to the lowest index).
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.eval_logits(x)?))
    }

    /// Visits the running statistics of every batch-norm layer.
    pub fn visit_bn_stats(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, s) in self.stages.iter().enumerate() {
            let p = join(&Self::stage_prefix(i), "bn");
            f(&join(&p, "running_mean"), &s.bn.running_mean);
            f(&join(&p, "running_var"), &s.bn.running_var);
        }
    }

    pub fn visit_bn_stats_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            let p = join(&Self::stage_prefix(i), "bn");
            f(&join(&p, "running_mean"), &mut s.bn.running_mean);
            f(&join(&p, "running_var"), &mut s.bn.running_var);
        }
    }
}

impl Parameters for Backbone {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("stage{}", i + 1)), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("stage{}", i + 1)), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference_gradient, max_relative_error};
    use crate::nn::cross_entropy;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            input_dim: 5,
            widths: [6, 4, 4],
            classes: 3,
            ..BackboneConfig::default()
        }
    }

    fn batch(n: usize, d: usize, seed: u64) -> Tensor {
        Tensor::new(vec![n, d], SeededRng::new(seed).normals(n * d)).unwrap()
    }

    #[test]
    fn bn_train_on_standardized_batch_is_near_identity() {
        let mut bn = BatchNorm::new(2, 0.1, 1e-5);
        let x = Tensor::new(vec![4, 2], vec![1.0, -1.0, -1.0, 1.0, 1.0, 1.0, -1.0, -1.0]).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = bn.forward(&mut g, xv, "bn", BnMode::Train, true, false).unwrap();
        for (a, b) in g.value(y).data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn bn_eval_subtracts_running_mean() {
        let mut bn = BatchNorm::new(3, 0.1, 0.0);
        bn.running_mean = Tensor::vector(vec![1.0, 2.0, -3.0]);
        let x = batch(4, 3, 1);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = bn.forward(&mut g, xv, "bn", BnMode::Eval, false, false).unwrap();
        for (i, (a, b)) in g.value(y).data().iter().zip(x.data()).enumerate() {
            assert!((a - (b - bn.running_mean.data()[i % 3])).abs() < 1e-15);
        }
    }

    #[test]
    fn bn_train_rejects_single_sample() {
        let mut bn = BatchNorm::new(3, 0.1, 1e-5);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([1, 3]));
        assert!(bn.forward(&mut g, x, "bn", BnMode::Train, true, false).is_err());
    }

    #[test]
    fn bn_running_stats_converge() {
        let mut bn = BatchNorm::new(1, 0.1, 1e-5);
        let mut rng = SeededRng::new(3);
        for _ in 0..1000 {
            let x = Tensor::new(vec![64, 1], (0..64).map(|_| 3.0 + 2.0 * rng.normal()).collect()).unwrap();
            let mut g = Graph::new();
            let xv = g.constant(x);
            bn.forward(&mut g, xv, "bn", BnMode::Train, true, false).unwrap();
        }
        assert!((bn.running_mean.data()[0] - 3.0).abs() < 0.1);
        assert!((bn.running_var.data()[0] - 4.0).abs() < 0.3);
    }

    #[test]
    fn eval_mode_does_not_depend_on_batch_composition() {
        let b = Backbone::new(tiny(), 1).unwrap();
        let x = batch(6, 5, 2);
        let all = b.features(&x, 2).unwrap();
        let part = b.features(&x.select_rows(&[3, 1]), 2).unwrap();
        assert_eq!(part.row(0), all.row(3));
        assert_eq!(part.row(1), all.row(1));
        assert_eq!(b.features(&x, 2).unwrap(), all);
    }

    #[test]
    fn bad_stage_index() {
        let mut b = Backbone::new(tiny(), 1).unwrap();
        let mut g = Graph::new();
        let x = g.constant(batch(2, 5, 2));
        assert!(b.extract_features(&mut g, x, 0, Pass::eval()).is_err());
        assert!(b.extract_features(&mut g, x, 4, Pass::eval()).is_err());
    }

    #[test]
    fn full_depth_then_head_is_the_forward_pass() {
        let b = Backbone::new(tiny(), 4).unwrap();
        let x = batch(5, 5, 5);
        let via_features = b.classify(&b.features(&x, 3).unwrap()).unwrap();
        let direct = softmax_rows(&b.eval_logits(&x).unwrap());
        assert_eq!(via_features, direct);
        for r in 0..5 {
            assert!((direct.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_head_gives_uniform_probabilities() {
        let mut b = Backbone::new(tiny(), 4).unwrap();
        b.head = Linear::zeros(4, 3);
        let p = b.classify(&b.features(&batch(3, 5, 6), 3).unwrap()).unwrap();
        assert!(p.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn saturated_logit_wins() {
        let mut logits = vec![0.0; 10];
        logits[0] = 10.0;
        let p = softmax_rows(&Tensor::new(vec![1, 10], logits.clone()).unwrap());
        assert!(p.data()[0] > 0.999);
        assert_eq!(argmax_rows(&Tensor::new(vec![1, 10], logits).unwrap()), vec![0]);
    }

    #[test]
    fn later_stages_do_not_affect_split_features() {
        let b = Backbone::new(tiny(), 7).unwrap();
        let x = batch(4, 5, 8);
        let before = b.features(&x, 2).unwrap();
        let mut c = b.clone();
        c.visit_mut("", &mut |name, t| {
            if name.starts_with("stage3") || name.starts_with("head") {
                t.data_mut().iter_mut().for_each(|v| *v += 1.0);
            }
        });
        assert_eq!(c.features(&x, 2).unwrap(), before);
        assert_ne!(c.predict(&x).unwrap().len(), 0);
    }

    #[test]
    fn corrupted_input_moves_features() {
        let b = Backbone::new(tiny(), 7).unwrap();
        let x = batch(4, 5, 8);
        let noisy = Tensor::new(
            vec![4, 5],
            x.data().iter().zip(SeededRng::new(9).normals(20)).map(|(a, n)| a + 0.5 * n).collect(),
        )
        .unwrap();
        let (f0, f1) = (b.features(&x, 2).unwrap(), b.features(&noisy, 2).unwrap());
        let l2: f64 = f0.data().iter().zip(f1.data()).map(|(a, b)| (a - b).powi(2)).sum();
        assert!(l2 > 0.0);
    }

    /// Train-mode classifier loss against finite differences for every parameter.
    #[test]
    fn classifier_gradient_check() {
        let b = Backbone::new(tiny(), 10).unwrap();
        let x = batch(8, 5, 11);
        let labels = [0, 1, 2, 0, 1, 2, 0, 1];
        let loss_of = |m: &Backbone, trainable: bool| -> Result<(Graph, Var)> {
            let mut m = m.clone();
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let pass = Pass {
                trainable_upto: if trainable { 3 } else { 0 },
                train_head: trainable,
                ..Pass::train_all()
            };
            let out = m.forward(&mut g, xv, pass)?;
            let l = cross_entropy(&mut g, out.logits, &labels)?;
            Ok((g, l))
        };
        let (mut g, l) = loss_of(&b, true).unwrap();
        let grads = g.backward(l).unwrap();
        for (name, p) in b.named_parameters(BACKBONE_PREFIX) {
            let fd = finite_difference_gradient(
                |v| {
                    let mut m = b.clone();
                    m.visit_mut(BACKBONE_PREFIX, &mut |n, t| {
                        if n == name {
                            *t = v.clone();
                        }
                    });
                    let (g, l) = loss_of(&m, false)?;
                    Ok(g.value(l).data()[0])
                },
                &p,
                1e-6,
            )
            .unwrap();
            let err = max_relative_error(grads.get(&name).unwrap().data(), fd.data());
            assert!(err < 1e-4, "{name}: {err}");
        }
    }
}
