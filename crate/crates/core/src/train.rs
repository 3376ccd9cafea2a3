//! Source-phase training: supervised classifier, flow on frozen features, and
//! the joint objective `L_cls + beta * L_uns`.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BnMode, Pass, BACKBONE_PREFIX};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::flow::{FlowModel, FLOW_PREFIX};
use crate::io_util::write_atomic;
use crate::nn::{cross_entropy, Sgd};
use crate::rng::SeededRng;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    /// Divides the rate by `factor` at every milestone passed.
    Step { milestones: Vec<usize>, factor: f64 },
    Cosine,
}

impl Schedule {
    /// Learning rate after `t` completed epochs out of `total`.
    pub fn lr(&self, lr0: f64, t: usize, total: usize) -> f64 {
        match self {
            Schedule::Step { milestones, factor } => {
                let passed = milestones.iter().filter(|&&m| t >= m).count() as i32;
                lr0 * factor.powi(-passed)
            }
            Schedule::Cosine => {
                if total == 0 {
                    return lr0;
                }
                lr0 * 0.5 * (1.0 + (PI * t as f64 / total as f64).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub schedule: Schedule,
    pub momentum: f64,
    pub seed: u64,
    /// Weight of the flow loss in joint training.
    pub beta: f64,
    /// Let batch-norm running statistics follow the data while training the flow.
    pub bn_stat_update: bool,
}

impl TrainConfig {
    pub fn classifier() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            lr0: 0.1,
            schedule: Schedule::Step {
                milestones: vec![25, 40],
                factor: 10.0,
            },
            momentum: 0.9,
            seed: 0,
            beta: 0.0,
            bn_stat_update: true,
        }
    }

    pub fn flow() -> Self {
        Self {
            epochs: 40,
            batch_size: 128,
            lr0: 0.1,
            schedule: Schedule::Cosine,
            momentum: 0.0,
            seed: 0,
            beta: 0.0,
            bn_stat_update: true,
        }
    }

    /// Collects every violated constraint, prefixed with `section`.
    pub fn problems(&self, section: &str) -> Vec<String> {
        let mut out = Vec::new();
        if self.batch_size < 2 {
            out.push(format!("{section}.batch_size must be at least 2"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            out.push(format!("{section}.lr0 must be positive"));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            out.push(format!("{section}.momentum must be in [0, 1)"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            out.push(format!("{section}.beta must be non-negative"));
        }
        if let Schedule::Step { milestones, factor } = &self.schedule {
            if !milestones.windows(2).all(|w| w[0] < w[1]) {
                out.push(format!("{section}.schedule.milestones must be strictly increasing"));
            }
            if milestones.iter().any(|&m| m >= self.epochs) {
                out.push(format!("{section}.schedule.milestones must be below epochs"));
            }
            if !(*factor > 0.0 && factor.is_finite()) {
                out.push(format!("{section}.schedule.factor must be positive"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems("train");
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.schedule.lr(self.lr0, epoch, self.epochs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
}

pub type History = Vec<HistoryRow>;

pub fn save_history_csv(history: &[HistoryRow], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,split,loss\n");
    for r in history {
        out.push_str(&format!("{},{},{:.16e}\n", r.epoch, r.split, r.loss));
    }
    write_atomic(path, out.as_bytes())
}

/// Shuffled mini-batches for one epoch. A trailing batch of a single sample is
/// folded into its predecessor because train-mode batch norm needs two rows.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = SeededRng::stream(seed, epoch as u64);
    let order = rng.permutation(n);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

fn check_dataset(backbone: &Backbone, ds: &LabeledDataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if ds.input_dim() != backbone.config().input_dim {
        return Err(Error::ShapeMismatch {
            op: "train",
            lhs: vec![ds.len(), ds.input_dim()],
            rhs: vec![backbone.config().input_dim],
        });
    }
    if let Some(&y) = ds.labels.iter().find(|&&y| y >= backbone.classes()) {
        return Err(Error::invalid(format!(
            "label {y} out of range for {} classes",
            backbone.classes()
        )));
    }
    Ok(())
}

fn diverged(epoch: usize, batch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } | Error::NonFiniteSample { .. } => Error::Diverged { epoch, batch },
        other => other,
    }
}

fn finite_or_diverged(v: f64, epoch: usize, batch: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Diverged { epoch, batch })
    }
}

/// Mean cross-entropy with heavy-ball SGD and batch norm in train mode.
/// Returns the per-epoch mean loss.
pub fn train_source(backbone: &mut Backbone, ds: &LabeledDataset, cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    check_dataset(backbone, ds)?;
    let mut opt = Sgd::new(cfg.momentum);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut total = 0.0;
        let batches = epoch_batches(ds.len(), cfg.batch_size, cfg.seed, epoch);
        for (b, idx) in batches.iter().enumerate() {
            let mut g = Graph::new();
            let x = g.constant(ds.inputs.select_rows(idx));
            let labels: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
            let step = (|| {
                let out = backbone.forward(&mut g, x, Pass::train_all())?;
                let loss = cross_entropy(&mut g, out.logits, &labels)?;
                let grads = g.backward(loss)?;
                Ok::<_, Error>((g.value(loss).data()[0], grads))
            })();
            let (loss, grads) = step.map_err(diverged(epoch, b))?;
            total += finite_or_diverged(loss, epoch, b)? * idx.len() as f64;
            opt.step(backbone, BACKBONE_PREFIX, &grads, lr);
        }
        history.push(HistoryRow {
            epoch,
            split: "train",
            loss: total / ds.len() as f64,
        });
    }
    Ok(history)
}

/// Batch-norm handling while the flow trains on the frozen extractor.
fn feature_pass(cfg: &TrainConfig) -> Pass {
    Pass {
        mode: if cfg.bn_stat_update { BnMode::Train } else { BnMode::Eval },
        update_stats: cfg.bn_stat_update,
        trainable_upto: 0,
        train_head: false,
    }
}

/// Fits the flow to split-point features by minimizing their NLL. Extractor
/// weights are bound as constants; only batch-norm running statistics may move.
pub fn train_flow(
    flow: &mut FlowModel,
    backbone: &mut Backbone,
    ds: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<History> {
    cfg.validate()?;
    if ds.input_dim() != backbone.config().input_dim {
        return Err(Error::ShapeMismatch {
            op: "train_flow",
            lhs: vec![ds.len(), ds.input_dim()],
            rhs: vec![backbone.config().input_dim],
        });
    }
    if flow.dim() != backbone.feature_dim() {
        return Err(Error::ShapeMismatch {
            op: "train_flow",
            lhs: vec![flow.dim()],
            rhs: vec![backbone.feature_dim()],
        });
    }
    let split = backbone.split_stage();
    let pass = feature_pass(cfg);
    let mut opt = Sgd::new(cfg.momentum);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut total = 0.0;
        let batches = epoch_batches(ds.len(), cfg.batch_size, cfg.seed, epoch);
        for (b, idx) in batches.iter().enumerate() {
            let mut g = Graph::new();
            let x = g.constant(ds.inputs.select_rows(idx));
            let step = (|| {
                let feats = backbone.extract_features(&mut g, x, split, pass)?;
                let loss = flow.nll_loss(&mut g, feats, true)?;
                let grads = g.backward(loss)?;
                Ok::<_, Error>((g.value(loss).data()[0], grads))
            })();
            let (loss, grads) = step.map_err(diverged(epoch, b))?;
            total += finite_or_diverged(loss, epoch, b)? * idx.len() as f64;
            opt.step(flow, FLOW_PREFIX, &grads, lr);
        }
        history.push(HistoryRow {
            epoch,
            split: "nll",
            loss: total / ds.len() as f64,
        });
    }
    Ok(history)
}

/// Classifier and flow optimized together on `L_cls + beta * L_uns`.
///
/// The extractor sees `beta * grad L_uns` through a gradient-scaling identity on
/// the split features; the flow sees the unscaled `grad L_uns` and follows the
/// rate, schedule and momentum of `flow_cfg` over `cfg.epochs`. With `beta = 0`
/// the features are detached, leaving the classifier trajectory identical to
/// [`train_source`].
pub fn train_joint(
    backbone: &mut Backbone,
    flow: &mut FlowModel,
    ds: &LabeledDataset,
    cfg: &TrainConfig,
    flow_cfg: &TrainConfig,
) -> Result<History> {
    cfg.validate()?;
    flow_cfg.validate()?;
    check_dataset(backbone, ds)?;
    if flow.dim() != backbone.feature_dim() {
        return Err(Error::ShapeMismatch {
            op: "train_joint",
            lhs: vec![flow.dim()],
            rhs: vec![backbone.feature_dim()],
        });
    }
    let beta = cfg.beta;
    let mut opt = Sgd::new(cfg.momentum);
    let mut flow_opt = Sgd::new(flow_cfg.momentum);
    let mut history = Vec::with_capacity(cfg.epochs * 3);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let flow_lr = flow_cfg.schedule.lr(flow_cfg.lr0, epoch, cfg.epochs);
        let (mut cls_sum, mut uns_sum) = (0.0, 0.0);
        let batches = epoch_batches(ds.len(), cfg.batch_size, cfg.seed, epoch);
        for (b, idx) in batches.iter().enumerate() {
            let mut g = Graph::new();
            let x = g.constant(ds.inputs.select_rows(idx));
            let labels: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
            let step = (|| {
                let out = backbone.forward(&mut g, x, Pass::train_all())?;
                let cls = cross_entropy(&mut g, out.logits, &labels)?;
                let fin = if beta == 0.0 {
                    g.detach(out.split_features)
                } else {
                    g.scale_grad(out.split_features, beta)?
                };
                let uns = flow.nll_loss(&mut g, fin, true)?;
                let both = g.add(cls, uns)?;
                let grads = g.backward(both)?;
                Ok::<_, Error>((g.value(cls).data()[0], g.value(uns).data()[0], grads))
            })();
            let (cls, uns, grads) = step.map_err(diverged(epoch, b))?;
            cls_sum += finite_or_diverged(cls, epoch, b)? * idx.len() as f64;
            uns_sum += finite_or_diverged(uns, epoch, b)? * idx.len() as f64;
            opt.step(backbone, BACKBONE_PREFIX, &grads, lr);
            flow_opt.step(flow, FLOW_PREFIX, &grads, flow_lr);
        }
        let n = ds.len() as f64;
        let (cls, uns) = (cls_sum / n, uns_sum / n);
        history.push(HistoryRow { epoch, split: "cls", loss: cls });
        history.push(HistoryRow { epoch, split: "uns", loss: uns });
        history.push(HistoryRow {
            epoch,
            split: "joint",
            loss: cls + beta * uns,
        });
    }
    Ok(history)
}

/// `L_cls + beta * L_uns` on one batch, as a plain value.
pub fn joint_loss_value(
    backbone: &Backbone,
    flow: &FlowModel,
    x: &Tensor,
    labels: &[usize],
    beta: f64,
) -> Result<f64> {
    let mut bb = backbone.clone();
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let pass = Pass {
        update_stats: false,
        ..Pass::train_all()
    };
    let out = bb.forward(&mut g, xv, pass)?;
    let cls = cross_entropy(&mut g, out.logits, labels)?;
    let uns = flow.nll_loss(&mut g, out.split_features, false)?;
    let scaled = g.scale(uns, beta)?;
    let total = g.add(cls, scaled)?;
    Ok(g.value(total).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::data::{generate_source, DatasetMeta};
    use crate::flow::FlowConfig;
    use crate::nn::Parameters;

    fn small_backbone(input_dim: usize, classes: usize, seed: u64) -> Backbone {
        Backbone::new(
            BackboneConfig {
                input_dim,
                widths: [12, 8, 8],
                classes,
                ..BackboneConfig::default()
            },
            seed,
        )
        .unwrap()
    }

    fn small_flow(seed: u64) -> FlowModel {
        FlowModel::new(
            FlowConfig {
                dim: 8,
                hidden: 16,
                ..FlowConfig::default()
            },
            seed,
        )
        .unwrap()
    }

    fn slow_flow() -> TrainConfig {
        TrainConfig {
            lr0: 0.01,
            ..TrainConfig::flow()
        }
    }

    fn quick(mut cfg: TrainConfig, epochs: usize) -> TrainConfig {
        cfg.epochs = epochs;
        if let Schedule::Step { milestones, .. } = &mut cfg.schedule {
            milestones.retain(|&m| m < epochs);
        }
        cfg
    }

    #[test]
    fn schedule_endpoints() {
        let c = Schedule::Cosine;
        assert_eq!(c.lr(0.1, 0, 40), 0.1);
        assert!(c.lr(0.1, 40, 40).abs() < 1e-17);
        assert!((c.lr(0.1, 20, 40) - 0.05).abs() < 1e-15);
        let s = Schedule::Step {
            milestones: vec![25, 40],
            factor: 10.0,
        };
        assert_eq!(s.lr(0.1, 0, 50), 0.1);
        assert_eq!(s.lr(0.1, 24, 50), 0.1);
        assert!((s.lr(0.1, 25, 50) - 0.01).abs() < 1e-17);
        assert!((s.lr(0.1, 45, 50) - 0.001).abs() < 1e-18);
    }

    #[test]
    fn config_validation_lists_every_problem() {
        let mut cfg = TrainConfig::classifier();
        cfg.lr0 = -1.0;
        cfg.momentum = 1.5;
        cfg.schedule = Schedule::Step {
            milestones: vec![40, 25, 60],
            factor: 10.0,
        };
        match cfg.validate() {
            Err(Error::Config(p)) => assert_eq!(p.len(), 4, "{p:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn batches_cover_every_index_once() {
        let b = epoch_batches(257, 128, 3, 1);
        assert_eq!(b.len(), 2);
        assert_eq!(b[1].len(), 129);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..257).collect::<Vec<_>>());
        assert_ne!(epoch_batches(257, 128, 3, 1), epoch_batches(257, 128, 3, 2));
        assert_eq!(epoch_batches(300, 128, 3, 0).last().unwrap().len(), 44);
    }

    #[test]
    fn zero_epochs_leave_parameters_unchanged() {
        let ds = generate_source(3, 6, 60, 1).unwrap();
        let mut bb = small_backbone(6, 3, 2);
        let before = bb.clone();
        let h = train_source(&mut bb, &ds, &quick(TrainConfig::classifier(), 0)).unwrap();
        assert!(h.is_empty());
        assert_eq!(bb, before);
    }

    /// Two 2-d blobs six standard deviations apart.
    fn blobs(n: usize, seed: u64) -> LabeledDataset {
        let mut rng = SeededRng::new(seed);
        let mut data = Vec::with_capacity(2 * n);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        for &y in &labels {
            let c = if y == 0 { -3.0 } else { 3.0 };
            data.push(c + rng.normal());
            data.push(rng.normal());
        }
        LabeledDataset::new(
            Tensor::new(vec![n, 2], data).unwrap(),
            labels,
            2,
            DatasetMeta {
                generator: "blobs".into(),
                seed,
                corruption: None,
            },
        )
        .unwrap()
    }

    #[test]
    fn separable_blobs_are_learned() {
        let ds = blobs(2000, 5);
        let mut bb = small_backbone(2, 2, 7);
        let h = train_source(&mut bb, &ds, &TrainConfig::classifier()).unwrap();
        assert!(h.iter().all(|r| r.loss.is_finite()));
        assert!(h.last().unwrap().loss < h[0].loss);
        let pred = bb.predict(&ds.inputs).unwrap();
        let acc = pred.iter().zip(&ds.labels).filter(|(a, b)| a == b).count() as f64 / ds.len() as f64;
        assert!(acc >= 0.99, "accuracy {acc}");
    }

    #[test]
    fn training_is_deterministic() {
        let ds = generate_source(3, 6, 200, 1).unwrap();
        let run = || {
            let mut bb = small_backbone(6, 3, 2);
            let h = train_source(&mut bb, &ds, &quick(TrainConfig::classifier(), 3)).unwrap();
            (bb, h)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn diverging_run_reports_its_location() {
        let ds = generate_source(3, 6, 200, 1).unwrap();
        let mut bb = small_backbone(6, 3, 2);
        let mut cfg = quick(TrainConfig::classifier(), 3);
        cfg.lr0 = 1e200;
        assert!(matches!(
            train_source(&mut bb, &ds, &cfg),
            Err(Error::Diverged { epoch: 0, .. })
        ));
    }

    #[test]
    fn flow_training_freezes_the_extractor() {
        let ds = generate_source(3, 6, 300, 4).unwrap();
        let mut bb = small_backbone(6, 3, 2);
        train_source(&mut bb, &ds, &quick(TrainConfig::classifier(), 3)).unwrap();
        let held_out = generate_source(3, 6, 300, 4).unwrap();
        for update in [true, false] {
            let mut b = bb.clone();
            let mut flow = small_flow(1);
            let untrained = flow.clone();
            let mut cfg = quick(TrainConfig::flow(), 5);
            cfg.bn_stat_update = update;
            cfg.lr0 = 0.02;
            train_flow(&mut flow, &mut b, &ds, &cfg).unwrap();
            assert_eq!(b.named_parameters(""), bb.named_parameters(""));
            let mut stats_same = true;
            let mut reference = Vec::new();
            bb.visit_bn_stats(&mut |_, t| reference.push(t.clone()));
            let mut k = 0;
            b.visit_bn_stats(&mut |_, t| {
                stats_same &= *t == reference[k];
                k += 1;
            });
            assert_eq!(stats_same, !update);
            let f = b.features(&held_out.inputs, 2).unwrap();
            let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
            assert!(mean(flow.log_prob_values(&f).unwrap()) > mean(untrained.log_prob_values(&f).unwrap()));
        }
    }

    #[test]
    fn flow_dimension_must_match_features() {
        let ds = generate_source(3, 6, 30, 4).unwrap();
        let mut bb = small_backbone(6, 3, 2);
        let mut flow = FlowModel::new(
            FlowConfig {
                dim: 5,
                hidden: 8,
                ..FlowConfig::default()
            },
            0,
        )
        .unwrap();
        assert!(matches!(
            train_flow(&mut flow, &mut bb, &ds, &quick(TrainConfig::flow(), 1)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn joint_with_zero_beta_matches_source_training() {
        let ds = generate_source(3, 6, 300, 4).unwrap();
        let cfg = quick(TrainConfig::classifier(), 4);
        let mut a = small_backbone(6, 3, 2);
        train_source(&mut a, &ds, &cfg).unwrap();
        let mut b = small_backbone(6, 3, 2);
        let mut flow = small_flow(3);
        let before = flow.clone();
        let h = train_joint(&mut b, &mut flow, &ds, &cfg, &slow_flow()).unwrap();
        assert_eq!(a, b);
        assert_ne!(flow, before);
        assert!(h.iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn joint_with_positive_beta_moves_the_extractor_differently() {
        let ds = generate_source(3, 6, 300, 4).unwrap();
        let mut cfg = quick(TrainConfig::classifier(), 2);
        let mut a = small_backbone(6, 3, 2);
        train_source(&mut a, &ds, &cfg).unwrap();
        cfg.beta = 0.01;
        let mut b = small_backbone(6, 3, 2);
        let mut flow = small_flow(3);
        train_joint(&mut b, &mut flow, &ds, &cfg, &slow_flow()).unwrap();
        assert_ne!(a.stages[0].linear.weight, b.stages[0].linear.weight);
    }

    #[test]
    fn joint_loss_is_the_weighted_sum() {
        let ds = generate_source(3, 6, 16, 4).unwrap();
        let bb = small_backbone(6, 3, 2);
        let flow = small_flow(3);
        let beta = 0.01;
        let total = joint_loss_value(&bb, &flow, &ds.inputs, &ds.labels, beta).unwrap();
        let cls = joint_loss_value(&bb, &flow, &ds.inputs, &ds.labels, 0.0).unwrap();
        let uns = (joint_loss_value(&bb, &flow, &ds.inputs, &ds.labels, 1.0).unwrap() - cls) / 1.0;
        assert!((total - (cls + beta * uns)).abs() < 1e-12);
    }
}
