//! Test-time adaptation: per batch, restore the source extractor, take SGD steps
//! on the frozen flow's NLL of the split features, then classify.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BnMode, Pass, BACKBONE_PREFIX};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::nn::{argmax_rows, Sgd};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    pub iterations: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub reset_per_batch: bool,
    /// Stages `1..=adapt_scope` are updated; must not exceed the split stage.
    pub adapt_scope: usize,
    pub bn_mode_during_adapt: BnMode,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            lr: 0.001,
            batch_size: 128,
            reset_per_batch: true,
            adapt_scope: 2,
            bn_mode_during_adapt: BnMode::Train,
        }
    }
}

impl AdaptConfig {
    pub fn problems(&self, section: &str) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            out.push(format!("{section}.lr must be positive"));
        }
        if self.batch_size < 2 {
            out.push(format!("{section}.batch_size must be at least 2"));
        }
        if self.adapt_scope == 0 {
            out.push(format!("{section}.adapt_scope must be at least 1"));
        }
        out
    }

    /// The scope, checked against the split stage of `backbone`.
    pub fn scope(&self, backbone: &Backbone) -> Result<usize> {
        let split = backbone.split_stage();
        let scope = self.adapt_scope;
        if scope == 0 || scope > split {
            return Err(Error::invalid(format!(
                "adapt_scope {scope} must lie in 1..={split} (the split stage)"
            )));
        }
        Ok(scope)
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems("adapt");
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

/// Mean negative log-likelihood of eval-mode split features; larger means
/// farther from the source distribution.
pub fn shift_score(flow: &FlowModel, backbone: &Backbone, x: &Tensor) -> Result<f64> {
    let f = backbone.features(x, backbone.split_stage())?;
    let lp = flow.log_prob_values(&f)?;
    if lp.is_empty() {
        return Err(Error::invalid("shift score of an empty batch"));
    }
    Ok(-lp.iter().sum::<f64>() / lp.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptOutcome {
    pub backbone: Backbone,
    /// NLL before any step followed by the NLL after each step.
    pub trace: Vec<f64>,
    pub failed: bool,
}

fn adapt_pass(cfg: &AdaptConfig, scope: usize, update_stats: bool) -> Pass {
    Pass {
        mode: cfg.bn_mode_during_adapt,
        update_stats: update_stats && cfg.bn_mode_during_adapt == BnMode::Train,
        trainable_upto: scope,
        train_head: false,
    }
}

/// Runs `cfg.iterations` steps from `snapshot`, calling `observe(k, backbone)`
/// after `k` steps for every `k` in `0..=iterations`. A non-finite value
/// anywhere restores the snapshot and marks the outcome failed; no further
/// observations are made after a failure.
pub fn adapt_trajectory(
    snapshot: &Backbone,
    flow: &FlowModel,
    x: &Tensor,
    cfg: &AdaptConfig,
    observe: &mut dyn FnMut(usize, &Backbone) -> Result<()>,
) -> Result<AdaptOutcome> {
    let scope = cfg.scope(snapshot)?;
    let split = snapshot.split_stage();
    if flow.dim() != snapshot.feature_dim() {
        return Err(Error::ShapeMismatch {
            op: "adapt",
            lhs: vec![flow.dim()],
            rhs: vec![snapshot.feature_dim()],
        });
    }
    let mut bb = snapshot.clone();
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    let mut opt = Sgd::new(0.0);
    let failure = |snapshot: &Backbone, trace: Vec<f64>| AdaptOutcome {
        backbone: snapshot.clone(),
        trace,
        failed: true,
    };
    observe(0, &bb)?;
    for k in 0..cfg.iterations {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let step = (|| {
            let f = bb.extract_features(&mut g, xv, split, adapt_pass(cfg, scope, true))?;
            let loss = flow.nll_loss(&mut g, f, false)?;
            let grads = g.backward(loss)?;
            Ok::<_, Error>((g.value(loss).data()[0], grads))
        })();
        let (loss, grads) = match step {
            Ok(v) if v.0.is_finite() && v.1.all_finite() => v,
            Ok(_) | Err(Error::NonFinite { .. }) | Err(Error::NonFiniteSample { .. }) => {
                return Ok(failure(snapshot, trace));
            }
            Err(e) => return Err(e),
        };
        trace.push(loss);
        opt.step(&mut bb, BACKBONE_PREFIX, &grads, cfg.lr);
        observe(k + 1, &bb)?;
    }
    // NLL after the last step, measured without touching running statistics.
    let mut probe = bb.clone();
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let last = (|| {
        let f = probe.extract_features(&mut g, xv, split, adapt_pass(cfg, scope, false))?;
        let loss = flow.nll_loss(&mut g, f, false)?;
        Ok::<_, Error>(g.value(loss).data()[0])
    })();
    match last {
        Ok(v) if v.is_finite() => trace.push(v),
        Ok(_) | Err(Error::NonFinite { .. }) | Err(Error::NonFiniteSample { .. }) => {
            return Ok(failure(snapshot, trace));
        }
        Err(e) => return Err(e),
    }
    Ok(AdaptOutcome {
        backbone: bb,
        trace,
        failed: false,
    })
}

pub fn adapt_batch(snapshot: &Backbone, flow: &FlowModel, x: &Tensor, cfg: &AdaptConfig) -> Result<AdaptOutcome> {
    adapt_trajectory(snapshot, flow, x, cfg, &mut |_, _| Ok(()))
}

/// Contiguous evaluation batches; a trailing single sample joins the previous batch.
pub fn stream_batches(n: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    let bs = batch_size.max(1);
    let mut out: Vec<std::ops::Range<usize>> = (0..n).step_by(bs).map(|s| s..(s + bs).min(n)).collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").end = last.end;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BatchLog {
    pub batch_index: usize,
    pub nll_before: f64,
    pub nll_after: f64,
    pub iterations: usize,
    pub failed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedPredictions {
    pub predictions: Vec<usize>,
    pub batches: Vec<BatchLog>,
    /// Eval-mode shift score per batch before and after adaptation.
    pub shift_pre: Vec<f64>,
    pub shift_post: Vec<f64>,
}

impl AdaptedPredictions {
    pub fn accuracy(&self, labels: &[usize]) -> f64 {
        accuracy(&self.predictions, labels)
    }

    /// One JSON object per batch.
    pub fn json_lines(&self) -> String {
        self.batches
            .iter()
            .map(|b| serde_json::to_string(b).expect("plain struct") + "\n")
            .collect()
    }
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

struct BatchResult {
    predictions: Vec<usize>,
    log: BatchLog,
    shift_pre: f64,
    shift_post: f64,
    adapted: Backbone,
}

fn run_batch(
    index: usize,
    start: &Backbone,
    flow: &FlowModel,
    x: &Tensor,
    cfg: &AdaptConfig,
) -> Result<BatchResult> {
    let shift_pre = shift_score(flow, start, x)?;
    let outcome = adapt_batch(start, flow, x, cfg)?;
    let predictions = outcome.backbone.predict(x)?;
    let shift_post = shift_score(flow, &outcome.backbone, x)?;
    let nan = f64::NAN;
    Ok(BatchResult {
        predictions,
        log: BatchLog {
            batch_index: index,
            nll_before: outcome.trace.first().copied().unwrap_or(nan),
            nll_after: outcome.trace.last().copied().unwrap_or(nan),
            iterations: cfg.iterations,
            failed: outcome.failed,
        },
        shift_pre,
        shift_post,
        adapted: outcome.backbone,
    })
}

/// Offline protocol over a test stream batched at `cfg.batch_size`. With
/// `reset_per_batch` every batch starts from `snapshot` (and batches run in
/// parallel); otherwise each batch continues from the previous adapted weights.
pub fn predict_with_adaptation(
    snapshot: &Backbone,
    flow: &FlowModel,
    x: &Tensor,
    cfg: &AdaptConfig,
) -> Result<AdaptedPredictions> {
    cfg.validate()?;
    cfg.scope(snapshot)?;
    let ranges = stream_batches(x.rows(), cfg.batch_size);
    let rows = |r: &std::ops::Range<usize>| x.select_rows(&r.clone().collect::<Vec<_>>());
    let results: Vec<BatchResult> = if cfg.reset_per_batch {
        ranges
            .par_iter()
            .enumerate()
            .map(|(i, r)| run_batch(i, snapshot, flow, &rows(r), cfg))
            .collect::<Result<_>>()?
    } else {
        let mut current = snapshot.clone();
        let mut out = Vec::with_capacity(ranges.len());
        for (i, r) in ranges.iter().enumerate() {
            let res = run_batch(i, &current, flow, &rows(r), cfg)?;
            current = res.adapted.clone();
            out.push(res);
        }
        out
    };
    let mut out = AdaptedPredictions {
        predictions: Vec::with_capacity(x.rows()),
        batches: Vec::with_capacity(results.len()),
        shift_pre: Vec::with_capacity(results.len()),
        shift_post: Vec::with_capacity(results.len()),
    };
    for r in results {
        out.predictions.extend(r.predictions);
        out.batches.push(r.log);
        out.shift_pre.push(r.shift_pre);
        out.shift_post.push(r.shift_post);
    }
    Ok(out)
}

/// Eval-mode predictions of the unadapted model.
pub fn baseline_predictions(backbone: &Backbone, x: &Tensor) -> Result<Vec<usize>> {
    Ok(argmax_rows(&backbone.eval_logits(x)?))
}
