//! Evaluation protocol: corruption x severity accuracy tables over adaptation
//! iteration counts and seeds, iteration curves, the joint-versus-separate
//! ablation, and 2-D PCA projections of extractor features.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;

use crate::adapt::{adapt_trajectory, shift_score, stream_batches, AdaptConfig};
use crate::backbone::Backbone;
use crate::config::{BenchConfig, RunConfig};
use crate::data::{apply_corruption, natural_shift, CorruptionSpec, LabeledDataset, SourceFamily};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::pipeline;
use crate::tensor::Tensor;

/// A named backbone/flow pair under evaluation.
#[derive(Clone, Debug)]
pub struct Method {
    pub name: String,
    pub backbone: Backbone,
    pub flow: FlowModel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Target {
    Clean,
    Natural,
    Corrupted(CorruptionSpec),
}

impl Target {
    pub fn corruption(&self) -> String {
        match self {
            Target::Clean => "clean".into(),
            Target::Natural => "natural_shift".into(),
            Target::Corrupted(s) => s.kind.to_string(),
        }
    }

    pub fn severity(&self) -> u8 {
        match self {
            Target::Corrupted(s) => s.severity,
            _ => 0,
        }
    }

    /// Test data for evaluation seed `seed`.
    pub fn dataset(&self, family: &SourceFamily, n_test: usize, seed: u64) -> Result<LabeledDataset> {
        match self {
            Target::Clean => family.test_set(n_test, seed),
            Target::Natural => natural_shift(family, seed),
            Target::Corrupted(spec) => apply_corruption(&family.test_set(n_test, seed)?, *spec),
        }
    }
}

/// Targets in report order: clean, natural, then corruptions by kind and severity.
pub fn targets(cfg: &BenchConfig) -> Result<Vec<Target>> {
    let mut out = Vec::new();
    if cfg.include_clean {
        out.push(Target::Clean);
    }
    if cfg.include_natural {
        out.push(Target::Natural);
    }
    for &k in &cfg.corruptions {
        for &s in &cfg.severities {
            out.push(Target::Corrupted(CorruptionSpec::new(k, s)?));
        }
    }
    Ok(out)
}

/// Per-iteration results of adapting every batch of one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct CellEval {
    pub iterations: Vec<usize>,
    pub accuracy: Vec<f64>,
    /// Sample-mean eval-mode NLL of the split features, per iteration count.
    pub shift: Vec<f64>,
    pub failed_batches: usize,
    pub batches: usize,
}

struct BatchEval {
    correct: Vec<usize>,
    nll_sum: Vec<f64>,
    failed: bool,
}

/// Adapts each batch once up to the largest requested count and records
/// accuracy (and optionally the shift score) at every requested count.
/// A failed batch contributes its unadapted result at every count.
pub fn evaluate_cell(
    method: &Method,
    ds: &LabeledDataset,
    iterations: &[usize],
    adapt: &AdaptConfig,
    with_shift: bool,
) -> Result<CellEval> {
    if iterations.is_empty() {
        return Err(Error::invalid("iteration set is empty"));
    }
    let max = *iterations.iter().max().expect("non-empty");
    let cfg = AdaptConfig {
        iterations: max,
        ..adapt.clone()
    };
    cfg.validate()?;
    let ranges = stream_batches(ds.len(), cfg.batch_size);
    let per_batch: Vec<BatchEval> = ranges
        .par_iter()
        .map(|r| {
            let idx: Vec<usize> = r.clone().collect();
            let x = ds.inputs.select_rows(&idx);
            let y: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
            let mut correct = vec![0; iterations.len()];
            let mut nll_sum = vec![0.0; iterations.len()];
            let outcome = adapt_trajectory(&method.backbone, &method.flow, &x, &cfg, &mut |k, b| {
                for (slot, _) in iterations.iter().enumerate().filter(|(_, &it)| it == k) {
                    let pred = b.predict(&x)?;
                    correct[slot] = pred.iter().zip(&y).filter(|(p, t)| p == t).count();
                    if with_shift {
                        nll_sum[slot] = shift_score(&method.flow, b, &x)? * x.rows() as f64;
                    }
                }
                Ok(())
            })?;
            if outcome.failed {
                let base = iterations.iter().position(|&it| it == 0);
                let (c0, n0) = match base {
                    Some(p) => (correct[p], nll_sum[p]),
                    None => {
                        let pred = method.backbone.predict(&x)?;
                        let c = pred.iter().zip(&y).filter(|(p, t)| p == t).count();
                        let n = if with_shift {
                            shift_score(&method.flow, &method.backbone, &x)? * x.rows() as f64
                        } else {
                            0.0
                        };
                        (c, n)
                    }
                };
                correct.iter_mut().for_each(|c| *c = c0);
                nll_sum.iter_mut().for_each(|n| *n = n0);
            }
            Ok(BatchEval {
                correct,
                nll_sum,
                failed: outcome.failed,
            })
        })
        .collect::<Result<_>>()?;
    let n = ds.len() as f64;
    let mut accuracy = vec![0.0; iterations.len()];
    let mut shift = vec![0.0; iterations.len()];
    for b in &per_batch {
        for i in 0..iterations.len() {
            accuracy[i] += b.correct[i] as f64;
            shift[i] += b.nll_sum[i];
        }
    }
    accuracy.iter_mut().for_each(|a| *a /= n);
    if with_shift {
        shift.iter_mut().for_each(|s| *s /= n);
    } else {
        shift.iter_mut().for_each(|s| *s = f64::NAN);
    }
    Ok(CellEval {
        iterations: iterations.to_vec(),
        accuracy,
        shift,
        failed_batches: per_batch.iter().filter(|b| b.failed).count(),
        batches: per_batch.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub method: String,
    pub corruption: String,
    pub severity: u8,
    pub iterations: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub shift_pre: f64,
    pub shift_post: f64,
    pub failed_batches: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Mean and sample standard deviation (n - 1 denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> Stat {
    let n = values.len();
    if n == 0 {
        return Stat {
            mean: f64::NAN,
            std: f64::NAN,
            n,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Stat { mean, std, n }
}

/// One line of the wide table: a cell with one column per iteration count.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WideRow {
    pub method: String,
    pub corruption: String,
    pub severity: u8,
    pub columns: Vec<(usize, Stat)>,
    /// Largest mean over the columns with at least one adaptation step.
    pub best: Option<(usize, Stat)>,
    pub shift_pre: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub metadata: serde_json::Value,
}

impl BenchReport {
    pub fn wide(&self) -> Vec<WideRow> {
        let mut cells: Vec<(String, String, u8)> = Vec::new();
        let mut by_cell: BTreeMap<(String, String, u8), BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
        let mut shift: BTreeMap<(String, String, u8), BTreeMap<u64, f64>> = BTreeMap::new();
        let mut order: BTreeMap<(String, String, u8), Vec<usize>> = BTreeMap::new();
        for r in &self.rows {
            let key = (r.method.clone(), r.corruption.clone(), r.severity);
            if !by_cell.contains_key(&key) {
                cells.push(key.clone());
            }
            let its = order.entry(key.clone()).or_default();
            if !its.contains(&r.iterations) {
                its.push(r.iterations);
            }
            by_cell.entry(key.clone()).or_default().entry(r.iterations).or_default().push(r.accuracy);
            shift.entry(key).or_default().insert(r.seed, r.shift_pre);
        }
        cells
            .into_iter()
            .map(|key| {
                let cols = &by_cell[&key];
                let columns: Vec<(usize, Stat)> = order[&key].iter().map(|&it| (it, mean_std(&cols[&it]))).collect();
                let best = columns
                    .iter()
                    .filter(|(it, _)| *it > 0)
                    .fold(None::<&(usize, Stat)>, |acc, c| match acc {
                        Some(a) if a.1.mean >= c.1.mean => Some(a),
                        _ => Some(c),
                    })
                    .cloned();
                let pre: Vec<f64> = shift[&key].values().copied().collect();
                WideRow {
                    method: key.0.clone(),
                    corruption: key.1.clone(),
                    severity: key.2,
                    columns,
                    best,
                    shift_pre: mean_std(&pre),
                }
            })
            .collect()
    }

    pub fn rows_csv(&self) -> String {
        let mut out =
            String::from("method,corruption,severity,iterations,seed,accuracy,shift_pre,shift_post,failed_batches\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.10},{:.10},{:.10},{}",
                r.method, r.corruption, r.severity, r.iterations, r.seed, r.accuracy, r.shift_pre, r.shift_post, r.failed_batches
            );
        }
        out
    }

    pub fn wide_csv(&self) -> String {
        let wide = self.wide();
        let mut out = String::from("method,corruption,severity");
        if let Some(first) = wide.first() {
            for (it, _) in &first.columns {
                let _ = write!(out, ",it{it}_mean,it{it}_std");
            }
        }
        out.push_str(",best_iterations,best_mean,best_std,shift_pre_mean\n");
        for w in &wide {
            let _ = write!(out, "{},{},{}", w.method, w.corruption, w.severity);
            for (_, s) in &w.columns {
                let _ = write!(out, ",{:.10},{:.10}", s.mean, s.std);
            }
            match &w.best {
                Some((it, s)) => {
                    let _ = write!(out, ",{it},{:.10},{:.10}", s.mean, s.std);
                }
                None => out.push_str(",,,"),
            }
            let _ = writeln!(out, ",{:.10}", w.shift_pre.mean);
        }
        out
    }

    /// Aligned plain-text table of mean ± std accuracy (in percent).
    pub fn text_table(&self) -> String {
        let wide = self.wide();
        let mut header = vec!["method".to_string(), "corruption".into(), "sev".into()];
        if let Some(first) = wide.first() {
            header.extend(first.columns.iter().map(|(it, _)| format!("it{it}")));
        }
        header.push("best".into());
        header.push("shift".into());
        let pct = |s: &Stat| format!("{:.2}±{:.2}", 100.0 * s.mean, 100.0 * s.std);
        let mut lines: Vec<Vec<String>> = vec![header];
        for w in &wide {
            let mut l = vec![w.method.clone(), w.corruption.clone(), w.severity.to_string()];
            l.extend(w.columns.iter().map(|(_, s)| pct(s)));
            l.push(match &w.best {
                Some((it, s)) => format!("{} @{it}", pct(s)),
                None => "-".into(),
            });
            l.push(format!("{:.3}", w.shift_pre.mean));
            lines.push(l);
        }
        let cols = lines.iter().map(Vec::len).max().unwrap_or(0);
        let widths: Vec<usize> = (0..cols)
            .map(|c| lines.iter().filter_map(|l| l.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for l in &lines {
            let cells: Vec<String> = l
                .iter()
                .enumerate()
                .map(|(c, s)| format!("{s:<w$}", w = widths[c]))
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

/// Full grid: every method on every target, iteration count and seed.
pub fn run_benchmark(
    methods: &[Method],
    family: &SourceFamily,
    n_test: usize,
    cfg: &BenchConfig,
    adapt: &AdaptConfig,
    metadata: serde_json::Value,
) -> Result<BenchReport> {
    if methods.is_empty() {
        return Err(Error::invalid("no methods to benchmark"));
    }
    if cfg.iterations.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::invalid("iteration set and seed set must be non-empty"));
    }
    for m in methods {
        adapt.scope(&m.backbone)?;
    }
    let targets = targets(cfg)?;
    let jobs: Vec<(usize, Target, u64)> = methods
        .iter()
        .enumerate()
        .flat_map(|(mi, _)| {
            targets
                .iter()
                .flat_map(move |&t| cfg.seeds.iter().map(move |&s| (mi, t, s)))
        })
        .collect();
    let cells: Vec<CellEval> = jobs
        .par_iter()
        .map(|&(mi, t, s)| {
            let ds = t.dataset(family, n_test, s)?;
            evaluate_cell(&methods[mi], &ds, &cfg.iterations, adapt, true)
        })
        .collect::<Result<_>>()?;
    let mut keyed: Vec<((usize, usize, u64), &CellEval, Target)> = jobs
        .iter()
        .zip(&cells)
        .map(|(&(mi, t, s), c)| {
            let ti = targets.iter().position(|x| *x == t).expect("listed");
            ((mi, ti, s), c, t)
        })
        .collect();
    keyed.sort_by_key(|k| k.0);
    let mut rows = Vec::with_capacity(keyed.len() * cfg.iterations.len());
    // Report order: method, target, iteration count, seed.
    let mut i = 0;
    while i < keyed.len() {
        let (mi, ti, _) = keyed[i].0;
        let group: Vec<_> = keyed[i..].iter().take_while(|k| k.0 .0 == mi && k.0 .1 == ti).collect();
        for (slot, &it) in cfg.iterations.iter().enumerate() {
            for g in &group {
                let (cell, t) = (g.1, g.2);
                let base = cell.shift[cell.iterations.iter().position(|&x| x == 0).unwrap_or(slot)];
                let pre = if cell.iterations.contains(&0) {
                    base
                } else {
                    f64::NAN
                };
                rows.push(BenchRow {
                    method: methods[mi].name.clone(),
                    corruption: t.corruption(),
                    severity: t.severity(),
                    iterations: it,
                    seed: g.0 .2,
                    accuracy: cell.accuracy[slot],
                    shift_pre: pre,
                    shift_post: cell.shift[slot],
                    failed_batches: cell.failed_batches,
                });
            }
        }
        i += group.len();
    }
    Ok(BenchReport { rows, metadata })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub severity: u8,
    pub iteration: usize,
    pub accuracy: f64,
}

/// Accuracy after every adaptation step `0..=max_iters`, averaged over seeds.
pub fn iteration_curve(
    method: &Method,
    family: &SourceFamily,
    n_test: usize,
    kind: crate::data::CorruptionKind,
    severities: &[u8],
    max_iters: usize,
    seeds: &[u64],
    adapt: &AdaptConfig,
) -> Result<Vec<CurvePoint>> {
    if max_iters == 0 {
        return Err(Error::invalid("max_iters must be at least 1"));
    }
    if seeds.is_empty() {
        return Err(Error::invalid("need at least one seed"));
    }
    let its: Vec<usize> = (0..=max_iters).collect();
    let mut out = Vec::with_capacity(severities.len() * its.len());
    for &sev in severities {
        let spec = CorruptionSpec::new(kind, sev)?;
        let evals: Vec<CellEval> = seeds
            .par_iter()
            .map(|&s| {
                let ds = Target::Corrupted(spec).dataset(family, n_test, s)?;
                evaluate_cell(method, &ds, &its, adapt, false)
            })
            .collect::<Result<_>>()?;
        for (slot, &it) in its.iter().enumerate() {
            let acc: Vec<f64> = evals.iter().map(|e| e.accuracy[slot]).collect();
            out.push(CurvePoint {
                severity: sev,
                iteration: it,
                accuracy: mean_std(&acc).mean,
            });
        }
    }
    Ok(out)
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("severity,iteration,accuracy\n");
    for p in points {
        let _ = writeln!(out, "{},{},{:.10}", p.severity, p.iteration, p.accuracy);
    }
    out
}

/// Principal axes of a point cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit-norm principal directions, largest variance first.
    pub components: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
}

impl Pca {
    pub fn fit(x: &Tensor, k: usize) -> Result<Pca> {
        let (n, d) = (x.rows(), x.cols());
        if n < 2 {
            return Err(Error::invalid("PCA needs at least two samples"));
        }
        if k == 0 || k > d {
            return Err(Error::invalid(format!("cannot take {k} components of {d}-d data")));
        }
        let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x.row(i)[j]).sum::<f64>() / n as f64).collect();
        let centered = DMatrix::from_fn(n, d, |i, j| x.row(i)[j] - mean[j]);
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        let total: f64 = cov.diagonal().iter().sum();
        if total.is_nan() || total <= 1e-300 {
            return Err(Error::invalid("features have zero variance"));
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut components = Vec::with_capacity(k);
        let mut variances = Vec::with_capacity(k);
        for &c in order.iter().take(k) {
            let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
            // Fix the sign so the largest-magnitude entry is positive.
            let lead = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            if lead < 0.0 {
                v.iter_mut().for_each(|e| *e = -*e);
            }
            components.push(v);
            variances.push(eig.eigenvalues[c].max(0.0));
        }
        Ok(Pca {
            mean,
            components,
            variances,
        })
    }

    pub fn transform(&self, x: &Tensor) -> Vec<Vec<f64>> {
        (0..x.rows())
            .map(|i| {
                self.components
                    .iter()
                    .map(|c| x.row(i).iter().zip(&self.mean).zip(c).map(|((v, m), e)| (v - m) * e).sum())
                    .collect()
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProjectionMode {
    Pre,
    PostAdapt,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProjectionRow {
    pub x: f64,
    pub y: f64,
    pub label: usize,
    pub predicted: usize,
    pub dataset: String,
}

/// Split-point features of every dataset, pooled and projected onto two
/// principal axes. `PostAdapt` adapts each batch first.
pub fn project_features(
    backbone: &Backbone,
    flow: &FlowModel,
    datasets: &[(String, LabeledDataset)],
    mode: ProjectionMode,
    adapt: &AdaptConfig,
) -> Result<Vec<ProjectionRow>> {
    let split = backbone.split_stage();
    let mut feats: Vec<f64> = Vec::new();
    let mut meta: Vec<(usize, usize, String)> = Vec::new();
    let mut width = 0;
    for (tag, ds) in datasets {
        let ranges = stream_batches(ds.len(), adapt.batch_size);
        let parts: Vec<(Tensor, Vec<usize>)> = ranges
            .par_iter()
            .map(|r| {
                let idx: Vec<usize> = r.clone().collect();
                let x = ds.inputs.select_rows(&idx);
                let model = match mode {
                    ProjectionMode::Pre => backbone.clone(),
                    ProjectionMode::PostAdapt => crate::adapt::adapt_batch(backbone, flow, &x, adapt)?.backbone,
                };
                Ok((model.features(&x, split)?, model.predict(&x)?))
            })
            .collect::<Result<_>>()?;
        let mut i = 0;
        for (f, pred) in parts {
            width = f.cols();
            feats.extend_from_slice(f.data());
            for p in pred {
                meta.push((ds.labels[i], p, tag.clone()));
                i += 1;
            }
        }
    }
    let n = meta.len();
    let pooled = Tensor::new(vec![n, width], feats)?;
    let pca = Pca::fit(&pooled, 2)?;
    Ok(pca
        .transform(&pooled)
        .into_iter()
        .zip(meta)
        .map(|(xy, (label, predicted, dataset))| ProjectionRow {
            x: xy[0],
            y: xy[1],
            label,
            predicted,
            dataset,
        })
        .collect())
}

pub fn projection_csv(rows: &[ProjectionRow]) -> String {
    let mut out = String::from("x,y,label,predicted,dataset\n");
    for r in rows {
        let _ = writeln!(out, "{:.10},{:.10},{},{},{}", r.x, r.y, r.label, r.predicted, r.dataset);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub beta: Option<f64>,
    pub baseline: Stat,
    /// Adapted accuracy at the best iteration count.
    pub adapted: Stat,
    pub best_iterations: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub corruption: String,
    pub severity: u8,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn csv(&self) -> String {
        let mut out = String::from(
            "variant,beta,corruption,severity,baseline_mean,baseline_std,adapted_mean,adapted_std,best_iterations\n",
        );
        for r in &self.rows {
            let beta = r.beta.map(|b| b.to_string()).unwrap_or_default();
            let best = r.best_iterations.map(|b| b.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{beta},{},{},{:.10},{:.10},{:.10},{:.10},{best}",
                r.variant, self.corruption, self.severity, r.baseline.mean, r.baseline.std, r.adapted.mean, r.adapted.std
            );
        }
        out
    }

    pub fn text(&self) -> String {
        let mut out = format!("{} severity {}\n", self.corruption, self.severity);
        let w = self.rows.iter().map(|r| r.variant.len()).max().unwrap_or(0);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<w$}  baseline {:.2}±{:.2}  adapted {:.2}±{:.2}",
                r.variant,
                100.0 * r.baseline.mean,
                100.0 * r.baseline.std,
                100.0 * r.adapted.mean,
                100.0 * r.adapted.std
            );
        }
        out
    }
}

pub fn joint_variant_name(beta: f64) -> String {
    format!("JT (beta = {beta})")
}

/// Summarizes one method's report on a single cell into an ablation row.
pub fn ablation_row(variant: String, beta: Option<f64>, report: &BenchReport) -> Result<AblationRow> {
    let wide = report.wide();
    let w = wide.first().ok_or_else(|| Error::invalid("empty report"))?;
    let baseline = w
        .columns
        .iter()
        .find(|(it, _)| *it == 0)
        .map(|(_, s)| s.clone())
        .ok_or_else(|| Error::invalid("ablation needs iteration 0 in the iteration set"))?;
    let (best_iterations, adapted) = match &w.best {
        Some((it, s)) => (Some(*it), s.clone()),
        None => (None, baseline.clone()),
    };
    Ok(AblationRow {
        variant,
        beta,
        baseline,
        adapted,
        best_iterations,
    })
}

/// Separate two-phase training against joint training at each configured
/// beta, compared on one corruption cell after adaptation.
pub fn ablation_joint_vs_separate(cfg: &RunConfig) -> Result<AblationTable> {
    cfg.validate()?;
    let family = pipeline::family(cfg)?;
    let ds = family.train_set(cfg.data.n_train)?;
    let spec = CorruptionSpec::new(cfg.joint.corruption, cfg.joint.severity)?;
    let bench = BenchConfig {
        corruptions: vec![spec.kind],
        severities: vec![spec.severity],
        include_clean: false,
        include_natural: false,
        ..cfg.bench.clone()
    };
    let mut variants: Vec<(String, Option<f64>)> = vec![("separate".into(), None)];
    variants.extend(cfg.joint.betas.iter().map(|&b| (joint_variant_name(b), Some(b))));
    let rows = variants
        .par_iter()
        .map(|(name, beta)| {
            let (backbone, flow) = match beta {
                None => pipeline::run_separate(cfg, &ds)?,
                Some(b) => {
                    let (bb, f, _) = pipeline::run_joint(cfg, &ds, *b)?;
                    (bb, f)
                }
            };
            let method = Method {
                name: name.clone(),
                backbone,
                flow,
            };
            let report = run_benchmark(
                std::slice::from_ref(&method),
                &family,
                cfg.data.n_test,
                &bench,
                &cfg.adapt,
                serde_json::Value::Null,
            )?;
            ablation_row(name.clone(), *beta, &report)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable {
        corruption: spec.kind.to_string(),
        severity: spec.severity,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::data::CorruptionKind;
    use crate::flow::FlowConfig;
    use crate::rng::SeededRng;

    fn method() -> Method {
        Method {
            name: "m".into(),
            backbone: Backbone::new(
                BackboneConfig {
                    input_dim: 6,
                    widths: [8, 4, 4],
                    classes: 3,
                    ..BackboneConfig::default()
                },
                1,
            )
            .unwrap(),
            flow: FlowModel::new(
                FlowConfig {
                    dim: 4,
                    hidden: 6,
                    ..FlowConfig::default()
                },
                2,
            )
            .unwrap(),
        }
    }

    fn small_bench(iterations: Vec<usize>) -> BenchConfig {
        BenchConfig {
            corruptions: vec![CorruptionKind::GaussianNoise, CorruptionKind::Rotation],
            severities: vec![1, 5],
            iterations,
            seeds: vec![0, 1, 2],
            include_clean: false,
            include_natural: false,
            curve_max_iters: 3,
        }
    }

    fn adapt() -> AdaptConfig {
        AdaptConfig {
            batch_size: 32,
            lr: 0.01,
            ..AdaptConfig::default()
        }
    }

    #[test]
    fn grid_has_one_row_per_combination_and_best_is_the_column_max() {
        let fam = SourceFamily::new(3, 6, 0).unwrap();
        let m = method();
        let bench = small_bench(vec![0, 1, 3]);
        let r = run_benchmark(&[m.clone(), Method { name: "n".into(), ..m }], &fam, 70, &bench, &adapt(), serde_json::Value::Null).unwrap();
        assert_eq!(r.rows.len(), 2 * 2 * 2 * 3 * 3);
        assert!(r.rows.iter().all(|row| (0.0..=1.0).contains(&row.accuracy)));
        for w in r.wide() {
            let max = w.columns.iter().filter(|(it, _)| *it > 0).map(|(_, s)| s.mean).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(w.best.as_ref().unwrap().1.mean, max);
            assert!(w.columns.iter().all(|(_, s)| s.std >= 0.0 && s.n == 3));
        }
        // Same source checkpoint, same baseline.
        let base = |name: &str| -> Vec<f64> {
            r.rows.iter().filter(|x| x.method == name && x.iterations == 0).map(|x| x.accuracy).collect()
        };
        assert_eq!(base("m"), base("n"));
        assert_eq!(r.text_table().lines().count(), 1 + 8);
        assert_eq!(r.wide_csv().lines().count(), 1 + 8);
    }

    #[test]
    fn zero_iteration_report_is_the_baseline() {
        let fam = SourceFamily::new(3, 6, 0).unwrap();
        let m = method();
        let r = run_benchmark(std::slice::from_ref(&m), &fam, 50, &small_bench(vec![0]), &adapt(), serde_json::Value::Null).unwrap();
        for row in &r.rows {
            let spec = CorruptionSpec::new(row.corruption.parse().unwrap(), row.severity).unwrap();
            let ds = Target::Corrupted(spec).dataset(&fam, 50, row.seed).unwrap();
            let pred = m.backbone.predict(&ds.inputs).unwrap();
            assert_eq!(row.accuracy, crate::adapt::accuracy(&pred, &ds.labels));
            assert_eq!(row.shift_pre, row.shift_post);
        }
        assert!(r.wide().iter().all(|w| w.best.is_none()));
    }

    #[test]
    fn reports_are_deterministic() {
        let fam = SourceFamily::new(3, 6, 0).unwrap();
        let run = || run_benchmark(&[method()], &fam, 40, &small_bench(vec![0, 2]), &adapt(), serde_json::Value::Null).unwrap().rows_csv();
        assert_eq!(run(), run());
    }

    #[test]
    fn curve_has_max_iters_plus_one_points_per_severity() {
        let fam = SourceFamily::new(3, 6, 0).unwrap();
        let m = method();
        let c = iteration_curve(&m, &fam, 40, CorruptionKind::GaussianNoise, &[1, 3], 4, &[0, 1], &adapt()).unwrap();
        assert_eq!(c.len(), 2 * 5);
        let base = Target::Corrupted(CorruptionSpec::new(CorruptionKind::GaussianNoise, 1).unwrap());
        let b: Vec<f64> = [0, 1]
            .iter()
            .map(|&s| {
                let ds = base.dataset(&fam, 40, s).unwrap();
                crate::adapt::accuracy(&m.backbone.predict(&ds.inputs).unwrap(), &ds.labels)
            })
            .collect();
        assert_eq!(c[0].accuracy, mean_std(&b).mean);
        assert!(iteration_curve(&m, &fam, 40, CorruptionKind::GaussianNoise, &[1], 0, &[0], &adapt()).is_err());
    }

    #[test]
    fn sample_std_uses_n_minus_one() {
        let s = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[7.0]).std, 0.0);
    }

    #[test]
    fn pca_of_planar_data_is_exact() {
        let mut rng = SeededRng::new(3);
        let x = Tensor::new(vec![50, 2], rng.normals(100).iter().enumerate().map(|(i, v)| if i % 2 == 0 { 3.0 * v } else { *v }).collect()).unwrap();
        let pca = Pca::fit(&x, 2).unwrap();
        let y = pca.transform(&x);
        for (i, p) in y.iter().enumerate() {
            for j in 0..2 {
                let back = pca.mean[j] + p[0] * pca.components[0][j] + p[1] * pca.components[1][j];
                assert!((back - x.row(i)[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pca_components_are_orthonormal() {
        let mut rng = SeededRng::new(4);
        let x = Tensor::new(vec![40, 7], rng.normals(280)).unwrap();
        let pca = Pca::fit(&x, 2).unwrap();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        let c = &pca.components;
        assert!((dot(&c[0], &c[0]) - 1.0).abs() < 1e-10);
        assert!((dot(&c[1], &c[1]) - 1.0).abs() < 1e-10);
        assert!(dot(&c[0], &c[1]).abs() < 1e-10);
        assert!(pca.variances[0] >= pca.variances[1]);
        assert!(Pca::fit(&Tensor::full([5, 3], 2.0), 2).is_err());
        assert!(Pca::fit(&Tensor::zeros([1, 3]), 2).is_err());
    }

    #[test]
    fn projection_emits_one_row_per_sample() {
        let fam = SourceFamily::new(3, 6, 0).unwrap();
        let m = method();
        let sets = vec![
            ("clean".to_string(), fam.test_set(40, 0).unwrap()),
            ("noisy".to_string(), Target::Corrupted(CorruptionSpec::new(CorruptionKind::GaussianNoise, 5).unwrap()).dataset(&fam, 30, 0).unwrap()),
        ];
        for mode in [ProjectionMode::Pre, ProjectionMode::PostAdapt] {
            let rows = project_features(&m.backbone, &m.flow, &sets, mode, &adapt()).unwrap();
            assert_eq!(rows.len(), 70);
            assert_eq!(rows.iter().filter(|r| r.dataset == "noisy").count(), 30);
            assert_eq!(projection_csv(&rows).lines().count(), 71);
        }
    }
}
