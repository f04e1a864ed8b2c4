//! Pre-classification stage: continuous target level from ROI area, Gaussian
//! level weights, normalized fusion, and the classification/regression heads.

use crate::error::{FlexError, Result};
use crate::numerics::{NodeId, Tape, Tensor};
use crate::pyramid::{init_uniform, param_seed};

/// Stage hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparams {
    /// Scale factor δ (pixels) anchoring the area→level mapping.
    pub delta: f64,
    /// Gaussian width σ for the pre-classification fusion weights.
    pub sigma: f64,
    /// Weight γ on the pre-classification term of the loss.
    pub gamma: f64,
    /// Pyramid level count N.
    pub levels: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams { delta: 56.0, sigma: std::f64::consts::FRAC_1_SQRT_2, gamma: 0.5, levels: 5 }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) {
            return Err(FlexError::Param("delta must be positive".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(FlexError::Param("sigma must be positive".into()));
        }
        if self.gamma < 0.0 {
            return Err(FlexError::Param("gamma must be non-negative".into()));
        }
        if self.levels < 2 {
            return Err(FlexError::Param("at least 2 pyramid levels required".into()));
        }
        Ok(())
    }
}

/// Per-level fusion weight vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights(pub Vec<f64>);

impl FusionWeights {
    pub fn one_hot(level: usize, n: usize) -> Self {
        let mut w = vec![0.0; n];
        w[level - 1] = 1.0;
        FusionWeights(w)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// Discrete target level: clamp(floor(1 + log2(sqrt(w·h)/δ)), 1, N).
pub fn target_level_floor(w: f64, h: f64, delta: f64, n: usize) -> Result<usize> {
    if !(w > 0.0) || !(h > 0.0) {
        return Err(FlexError::Param("roi extents must be positive".into()));
    }
    let raw = (1.0 + ((w * h).sqrt() / delta).log2()).floor();
    Ok(raw.clamp(1.0, n as f64) as usize)
}

/// Continuous target level: clamp(1 + log2(sqrt(w·h)/δ), 1, N).
pub fn target_level(w: f64, h: f64, delta: f64, n: usize) -> Result<f64> {
    if !(w > 0.0) || !(h > 0.0) {
        return Err(FlexError::Param("roi extents must be positive".into()));
    }
    Ok((1.0 + ((w * h).sqrt() / delta).log2()).clamp(1.0, n as f64))
}

/// Gaussian level weights centered at the continuous target level:
/// W_k = exp(-(k-i)² / 2σ²) / (σ √(2π)) for k = 1..N.
pub fn gaussian_weights(center: f64, sigma: f64, n: usize) -> Result<FusionWeights> {
    if !(sigma > 0.0) {
        return Err(FlexError::Param("sigma must be positive".into()));
    }
    if !(1.0..=n as f64).contains(&center) {
        return Err(FlexError::Param(format!("target level {center} outside [1, {n}]")));
    }
    let norm = 1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    Ok(FusionWeights(
        (1..=n)
            .map(|k| {
                let d = k as f64 - center;
                norm * (-d * d / (2.0 * sigma * sigma)).exp()
            })
            .collect(),
    ))
}

/// Normalized weighted sum of same-shaped features (eager).
pub fn fuse(features: &[Tensor], weights: &FusionWeights) -> Result<Tensor> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = features.iter().map(|f| tape.leaf(f, false)).collect();
    let w = tape.leaf(&Tensor::new(vec![weights.len()], weights.0.clone())?, false);
    let out = tape.weighted_fuse(&ids, w)?;
    Ok(tape.tensor(out))
}

/// Head widths and class count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadConfig {
    pub classes: usize,
    pub hidden: usize,
    pub channels: usize,
    pub grid: usize,
}

impl HeadConfig {
    pub fn input_len(&self) -> usize {
        self.channels * self.grid * self.grid
    }
}

/// Pre-classification head parameters: shared trunk, then a class branch
/// and a box-regression branch.
#[derive(Debug, Clone)]
pub struct PreHeadParams {
    pub config: HeadConfig,
    pub trunk_w: Tensor,
    pub trunk_b: Tensor,
    pub cls_w: Tensor,
    pub cls_b: Tensor,
    pub reg_w: Tensor,
    pub reg_b: Tensor,
}

impl PreHeadParams {
    pub fn init(config: HeadConfig, seed: u64, name: &str) -> Self {
        let d_in = config.input_len();
        let h = config.hidden;
        let k = config.classes;
        PreHeadParams {
            config,
            trunk_w: init_uniform(vec![h, d_in], d_in, h, param_seed(seed, &format!("{name}.trunk.w"))),
            trunk_b: Tensor::zeros(vec![h]),
            cls_w: init_uniform(vec![k, h], h, k, param_seed(seed, &format!("{name}.cls.w"))),
            cls_b: Tensor::zeros(vec![k]),
            reg_w: init_uniform(vec![4, h], h, 4, param_seed(seed, &format!("{name}.reg.w"))),
            reg_b: Tensor::zeros(vec![4]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PreHeadIds {
    pub trunk_w: NodeId,
    pub trunk_b: NodeId,
    pub cls_w: NodeId,
    pub cls_b: NodeId,
    pub reg_w: NodeId,
    pub reg_b: NodeId,
}

pub fn register_pre_head(tape: &mut Tape, p: &PreHeadParams, trainable: bool) -> PreHeadIds {
    PreHeadIds {
        trunk_w: tape.leaf(&p.trunk_w, trainable),
        trunk_b: tape.leaf(&p.trunk_b, trainable),
        cls_w: tape.leaf(&p.cls_w, trainable),
        cls_b: tape.leaf(&p.cls_b, trainable),
        reg_w: tape.leaf(&p.reg_w, trainable),
        reg_b: tape.leaf(&p.reg_b, trainable),
    }
}

/// Flatten a fused [C,S,S] block, run the trunk, and emit K-way logits plus
/// 4 box deltas (dx, dy, dw, dh).
pub fn pre_head_forward(
    tape: &mut Tape,
    fused: NodeId,
    ids: &PreHeadIds,
) -> Result<(NodeId, NodeId)> {
    let n = tape.value(fused).len();
    let flat = tape.reshape(fused, vec![n])?;
    let t = tape.affine(flat, ids.trunk_w, ids.trunk_b)?;
    let t = tape.relu(t)?;
    let logits = tape.affine(t, ids.cls_w, ids.cls_b)?;
    let deltas = tape.affine(t, ids.reg_w, ids.reg_b)?;
    Ok((logits, deltas))
}

/// Eager head evaluation.
pub fn preclass_heads(fused: &Tensor, params: &PreHeadParams) -> Result<(Tensor, Tensor)> {
    if !fused.is_finite() {
        return Err(FlexError::Numeric("head input must be finite".into()));
    }
    let mut tape = Tape::new();
    let f = tape.leaf(fused, false);
    let ids = register_pre_head(&mut tape, params, false);
    let (logits, deltas) = pre_head_forward(&mut tape, f, &ids)?;
    Ok((tape.tensor(logits), tape.tensor(deltas)))
}
