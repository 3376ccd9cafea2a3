//! Glue from a [`RunConfig`] to datasets and trained models.

use crate::backbone::Backbone;
use crate::config::RunConfig;
use crate::data::{LabeledDataset, SourceFamily};
use crate::error::Result;
use crate::flow::FlowModel;
use crate::train::{train_flow, train_joint, train_source, History};

pub fn family(cfg: &RunConfig) -> Result<SourceFamily> {
    SourceFamily::new(cfg.data.classes, cfg.data.input_dim, cfg.data.seed)
}

pub fn source_train(cfg: &RunConfig) -> Result<LabeledDataset> {
    family(cfg)?.train_set(cfg.data.n_train)
}

pub fn fresh_backbone(cfg: &RunConfig) -> Result<Backbone> {
    Backbone::new(cfg.backbone.clone(), cfg.train.seed)
}

pub fn fresh_flow(cfg: &RunConfig) -> Result<FlowModel> {
    FlowModel::new(cfg.flow.clone(), cfg.flow_train.seed)
}

pub fn run_train_source(cfg: &RunConfig, ds: &LabeledDataset) -> Result<(Backbone, History)> {
    let mut b = fresh_backbone(cfg)?;
    let h = train_source(&mut b, ds, &cfg.train)?;
    Ok((b, h))
}

/// Trains a flow on the frozen extractor; `backbone` may have its batch-norm
/// running statistics moved, per `flow_train.bn_stat_update`.
pub fn run_train_flow(cfg: &RunConfig, backbone: &mut Backbone, ds: &LabeledDataset) -> Result<(FlowModel, History)> {
    let mut f = fresh_flow(cfg)?;
    let h = train_flow(&mut f, backbone, ds, &cfg.flow_train)?;
    Ok((f, h))
}

/// Source classifier followed by the flow: the separate two-phase recipe.
pub fn run_separate(cfg: &RunConfig, ds: &LabeledDataset) -> Result<(Backbone, FlowModel)> {
    let (mut b, _) = run_train_source(cfg, ds)?;
    let (f, _) = run_train_flow(cfg, &mut b, ds)?;
    Ok((b, f))
}

pub fn run_joint(cfg: &RunConfig, ds: &LabeledDataset, beta: f64) -> Result<(Backbone, FlowModel, History)> {
    let mut b = fresh_backbone(cfg)?;
    let mut f = fresh_flow(cfg)?;
    let mut tc = cfg.train.clone();
    tc.beta = beta;
    let h = train_joint(&mut b, &mut f, ds, &tc, &cfg.flow_train)?;
    Ok((b, f, h))
}
