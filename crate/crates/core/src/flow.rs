//! RealNVP-style normalizing flow over feature vectors.
//!
//! Each [`CouplingLayer`] keeps the masked coordinates and applies an elementwise
//! affine map to the rest:
//!
//! ```text
//! z = m*x + (1-m) * (x * exp(s(m*x)) + t(m*x))
//! s = clamp * tanh(raw_s)
//! log|det dz/dx| = sum over unmasked coordinates of s
//! ```
//!
//! Layers alternate complementary masks. The prior is the standard Gaussian, so
//! `log p(x) = log N(g(x); 0, I) + sum of layer log-determinants`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, Linear, Parameters};
use crate::rng::SeededRng;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    /// Even coordinates condition, odd ones are transformed; flipped per layer.
    Checkerboard,
    /// First half conditions, second half is transformed; flipped per layer.
    Channelwise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub dim: usize,
    pub layers: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub scale_clamp: f64,
    pub mask: MaskKind,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            layers: 3,
            hidden: 64,
            blocks: 2,
            scale_clamp: 2.0,
            mask: MaskKind::Checkerboard,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::invalid("flow dimension must be at least 2"));
        }
        if self.layers == 0 || self.hidden == 0 {
            return Err(Error::invalid("flow needs at least one layer and a hidden width"));
        }
        if self.scale_clamp <= 0.0 || !self.scale_clamp.is_finite() {
            return Err(Error::invalid("scale_clamp must be positive"));
        }
        Ok(())
    }

    /// Mask for layer `index`: `true` marks a conditioning (identity) coordinate.
    pub fn mask_for(&self, index: usize) -> Vec<bool> {
        let base: Vec<bool> = match self.mask {
            MaskKind::Checkerboard => (0..self.dim).map(|i| i % 2 == 0).collect(),
            MaskKind::Channelwise => (0..self.dim).map(|i| i < self.dim / 2).collect(),
        };
        if index % 2 == 0 {
            base
        } else {
            base.into_iter().map(|b| !b).collect()
        }
    }
}

/// `y = x + fc2(tanh(fc1(x)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ResBlock {
    fn forward(&self, g: &mut Graph, x: Var, prefix: &str, trainable: bool) -> Result<Var> {
        let h = self.fc1.forward(g, x, &join(prefix, "fc1"), trainable)?;
        let h = g.tanh(h)?;
        let h = self.fc2.forward(g, h, &join(prefix, "fc2"), trainable)?;
        g.add(x, h)
    }
}

/// Residual blocks followed by a linear head. The head starts at zero, so a
/// freshly built coupling layer is the identity map.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioner {
    pub blocks: Vec<ResBlock>,
    pub head: Linear,
}

impl Conditioner {
    pub fn new(dim: usize, hidden: usize, blocks: usize, rng: &mut SeededRng) -> Self {
        let blocks = (0..blocks)
            .map(|_| ResBlock {
                fc1: Linear::new(dim, hidden, rng),
                fc2: Linear::new(hidden, dim, rng),
            })
            .collect();
        Self {
            blocks,
            head: Linear::zeros(dim, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, prefix: &str, trainable: bool) -> Result<Var> {
        let mut h = x;
        for (i, b) in self.blocks.iter().enumerate() {
            h = b.forward(g, h, &join(prefix, &format!("block{i}")), trainable)?;
        }
        self.head.forward(g, h, &join(prefix, "head"), trainable)
    }
}

impl Parameters for Conditioner {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, b) in self.blocks.iter().enumerate() {
            let p = join(prefix, &format!("block{i}"));
            b.fc1.visit(&join(&p, "fc1"), f);
            b.fc2.visit(&join(&p, "fc2"), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = join(prefix, &format!("block{i}"));
            b.fc1.visit_mut(&join(&p, "fc1"), f);
            b.fc2.visit_mut(&join(&p, "fc2"), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingLayer {
    mask: Vec<bool>,
    pub scale_net: Conditioner,
    pub translate_net: Conditioner,
    pub scale_clamp: f64,
}

/// Maps an op failure inside a row-independent computation to the sample it hit.
fn at_sample(stage: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { row, .. } => Error::NonFiniteSample { stage, index: row },
        other => other,
    }
}

fn check_rows(x: &Tensor, stage: &'static str) -> Result<()> {
    let w = x.cols().max(1);
    match x.data().iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFiniteSample { stage, index: i / w }),
        None => Ok(()),
    }
}

impl CouplingLayer {
    pub fn new(
        mask: Vec<bool>,
        hidden: usize,
        blocks: usize,
        scale_clamp: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if mask.iter().all(|&m| m) || mask.iter().all(|&m| !m) {
            return Err(Error::invalid("coupling mask must be neither all-zero nor all-one"));
        }
        let d = mask.len();
        let scale_net = Conditioner::new(d, hidden, blocks, rng);
        let translate_net = Conditioner::new(d, hidden, blocks, rng);
        Ok(Self {
            mask,
            scale_net,
            translate_net,
            scale_clamp,
        })
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn dim(&self) -> usize {
        self.mask.len()
    }

    fn mask_tensors(&self) -> (Tensor, Tensor) {
        let m: Vec<f64> = self.mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let inv = m.iter().map(|v| 1.0 - v).collect();
        (Tensor::vector(m), Tensor::vector(inv))
    }

    /// Clamped scale and translation for an already-masked input.
    fn conditioners(
        &self,
        g: &mut Graph,
        xm: Var,
        prefix: &str,
        trainable: bool,
    ) -> Result<(Var, Var)> {
        let raw = self.scale_net.forward(g, xm, &join(prefix, "scale"), trainable)?;
        let s = g.tanh(raw)?;
        let s = g.scale(s, self.scale_clamp)?;
        let t = self.translate_net.forward(g, xm, &join(prefix, "translate"), trainable)?;
        Ok((s, t))
    }

    /// Returns `(z, logdet)` with shapes `[n, d]` and `[n]`.
    pub fn forward(&self, g: &mut Graph, x: Var, prefix: &str, trainable: bool) -> Result<(Var, Var)> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "coupling_forward",
                lhs: shape,
                rhs: vec![self.dim()],
            });
        }
        check_rows(g.value(x), "coupling input")?;
        let (m, inv) = self.mask_tensors();
        let body = |g: &mut Graph| -> Result<(Var, Var)> {
            let m = g.constant(m);
            let inv = g.constant(inv);
            let xm = g.mul(x, m)?;
            let (s, t) = self.conditioners(g, xm, prefix, trainable)?;
            let s = g.mul(s, inv)?;
            let es = g.exp(s)?;
            let scaled = g.mul(x, es)?;
            let shifted = g.add(scaled, t)?;
            let moved = g.mul(shifted, inv)?;
            let z = g.add(xm, moved)?;
            let logdet = g.sum(s, 1)?;
            Ok((z, logdet))
        };
        body(g).map_err(at_sample("coupling"))
    }

    /// Exact algebraic inverse of [`CouplingLayer::forward`] on plain values.
    pub fn inverse(&self, z: &Tensor) -> Result<Tensor> {
        if z.shape().len() != 2 || z.cols() != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "coupling_inverse",
                lhs: z.shape().to_vec(),
                rhs: vec![self.dim()],
            });
        }
        check_rows(z, "coupling inverse input")?;
        let (m, _) = self.mask_tensors();
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let mv = g.constant(m);
        let zm = g.mul(zv, mv).map_err(at_sample("coupling inverse"))?;
        let (s, t) = self
            .conditioners(&mut g, zm, "", false)
            .map_err(at_sample("coupling inverse"))?;
        let (s, t) = (g.value(s).data(), g.value(t).data());
        let d = self.dim();
        let mut out = z.data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            if !self.mask[i % d] {
                *v = (*v - t[i]) * (-s[i]).exp();
            }
        }
        if let Some(i) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteSample {
                stage: "coupling inverse",
                index: i / d,
            });
        }
        Tensor::new(z.shape().to_vec(), out)
    }
}

impl Parameters for CouplingLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.scale_net.visit(&join(prefix, "scale"), f);
        self.translate_net.visit(&join(prefix, "translate"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.scale_net.visit_mut(&join(prefix, "scale"), f);
        self.translate_net.visit_mut(&join(prefix, "translate"), f);
    }
}

/// Parameter-name prefix used when a flow is bound into a graph.
pub const FLOW_PREFIX: &str = "flow";

#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    config: FlowConfig,
    layers: Vec<CouplingLayer>,
}

impl FlowModel {
    pub fn new(config: FlowConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(seed);
        let layers = (0..config.layers)
            .map(|i| {
                CouplingLayer::new(
                    config.mask_for(i),
                    config.hidden,
                    config.blocks,
                    config.scale_clamp,
                    &mut rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [CouplingLayer] {
        &mut self.layers
    }

    fn layer_prefix(i: usize) -> String {
        join(FLOW_PREFIX, &format!("layer{i}"))
    }

    /// `(z, total logdet)` through every layer in order.
    pub fn forward(&self, g: &mut Graph, x: Var, trainable: bool) -> Result<(Var, Var)> {
        let mut h = x;
        let mut total: Option<Var> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let (z, ld) = layer.forward(g, h, &Self::layer_prefix(i), trainable)?;
            h = z;
            total = Some(match total {
                Some(acc) => g.add(acc, ld)?,
                None => ld,
            });
        }
        Ok((h, total.expect("flow has at least one layer")))
    }

    /// Per-sample `log N(z; 0, I) + sum logdet`, shape `[n]`.
    pub fn log_prob(&self, g: &mut Graph, x: Var, trainable: bool) -> Result<Var> {
        let (z, logdet) = self.forward(g, x, trainable)?;
        let d = self.dim() as f64;
        let sq = g.square(z)?;
        let norm = g.sum(sq, 1)?;
        let half = g.scale(norm, -0.5)?;
        let log_prior = g.add_scalar(half, -0.5 * d * (2.0 * PI).ln())?;
        g.add(log_prior, logdet)
    }

    /// Mean negative log-likelihood over the batch.
    pub fn nll_loss(&self, g: &mut Graph, x: Var, trainable: bool) -> Result<Var> {
        if g.value(x).rows() == 0 || g.value(x).shape().len() != 2 {
            return Err(Error::invalid("nll_loss needs a non-empty [n, d] batch"));
        }
        let lp = self.log_prob(g, x, trainable)?;
        let m = g.mean(lp, 0)?;
        g.neg(m)
    }

    pub fn log_prob_values(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let lp = self.log_prob(&mut g, xv, false)?;
        Ok(g.value(lp).data().to_vec())
    }

    pub fn transform(&self, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (z, ld) = self.forward(&mut g, xv, false)?;
        Ok((g.value(z).clone(), g.value(ld).data().to_vec()))
    }

    pub fn inverse(&self, z: &Tensor) -> Result<Tensor> {
        let mut x = z.clone();
        for layer in self.layers.iter().rev() {
            x = layer.inverse(&x)?;
        }
        Ok(x)
    }

    /// Draws `n` latent points from the seeded Gaussian prior and maps them back.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::invalid("sample count must be at least 1"));
        }
        let mut rng = SeededRng::new(seed);
        let z = Tensor::new(vec![n, self.dim()], rng.normals(n * self.dim()))?;
        self.inverse(&z)
    }
}

impl Parameters for FlowModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layer{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layer{i}")), f);
        }
    }
}
