//! Feedback refine stage: image feedback from the whole pyramid, per-ROI
//! classification feedback from the first pass, refined fusion weights
//! (with the direct / gaussian / interpolation parameterizations), the
//! refined classification head, and cascading.

use std::sync::Arc;

use crate::error::{FlexError, Result};
use crate::numerics::{NodeId, Tape, Tensor};
use crate::preclass::FusionWeights;
use crate::pyramid::{init_uniform, param_seed, FeaturePyramid};

/// Hidden width of the two feedback networks.
pub const FEEDBACK_HIDDEN: usize = 32;

/// Image feedback: one non-negative scalar per pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeedback(pub Vec<f64>);

impl ImageFeedback {
    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Classification feedback: the knots of a piecewise-linear kernel,
/// length 2⌊N/2⌋+1, non-negative, 0-indexed.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassFeedback(pub Vec<f64>);

impl ClassFeedback {
    pub fn knot_count(levels: usize) -> usize {
        2 * (levels / 2) + 1
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// How the per-ROI refine weights are produced from the first pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightParameterization {
    /// N weights emitted directly; blind to ROI area.
    Direct,
    /// A Gaussian kernel's center offset and width are emitted.
    Gaussian,
    /// Knots of a piecewise-linear kernel centered at the target level.
    Interpolation,
}

impl WeightParameterization {
    pub fn output_len(&self, levels: usize) -> usize {
        match self {
            WeightParameterization::Direct => levels,
            WeightParameterization::Gaussian => 2,
            WeightParameterization::Interpolation => ClassFeedback::knot_count(levels),
        }
    }
}

/// Channel schedule for the per-level projections: C_i = C0 / 2^(N+1-min(2,i)).
pub fn projection_channels(c0: usize, levels: usize, level: usize) -> Result<usize> {
    if level == 0 || level > levels {
        return Err(FlexError::Param(format!("level {level} outside 1..={levels}")));
    }
    let divisor = 1usize << levels;
    if c0 % divisor != 0 {
        return Err(FlexError::Config(format!(
            "channel count {c0} not divisible by 2^{levels}"
        )));
    }
    Ok(c0 / (1usize << (levels + 1 - level.min(2))))
}

// ── image feedback network ───────────────────────────────────────────

/// Image-feedback network: per-level strided projection chains to a shared
/// coarse extent, channel-wise concat, one 3×3 conv, global average pool,
/// and an affine map to N softplus-activated values.
#[derive(Debug, Clone)]
pub struct ImageFeedbackParams {
    pub levels: usize,
    pub channels: usize,
    /// chains[k-1]: stride-2 convs taking level k down to the target extent.
    pub chains: Vec<Vec<(Tensor, Tensor)>>,
    pub post_w: Tensor,
    pub post_b: Tensor,
    pub fc_w: Tensor,
    pub fc_b: Tensor,
}

impl ImageFeedbackParams {
    pub fn init(levels: usize, channels: usize, seed: u64) -> Result<Self> {
        let mut chains = Vec::with_capacity(levels);
        let mut concat_channels = 0;
        for k in 1..=levels {
            let ck = projection_channels(channels, levels, k)?;
            concat_channels += ck;
            let mut chain = Vec::new();
            for j in 0..(levels + 1 - k) {
                let (cin, cout) = if j == 0 { (channels, ck) } else { (ck, ck) };
                let w = init_uniform(
                    vec![cout, cin, 3, 3],
                    cin * 9,
                    cout * 9,
                    param_seed(seed, &format!("imgfb.proj{k}.{j}.w")),
                );
                chain.push((w, Tensor::zeros(vec![cout])));
            }
            chains.push(chain);
        }
        let post_c = channels / 2;
        Ok(ImageFeedbackParams {
            levels,
            channels,
            chains,
            post_w: init_uniform(
                vec![post_c, concat_channels, 3, 3],
                concat_channels * 9,
                post_c * 9,
                param_seed(seed, "imgfb.post.w"),
            ),
            post_b: Tensor::zeros(vec![post_c]),
            fc_w: init_uniform(vec![levels, post_c], post_c, levels, param_seed(seed, "imgfb.fc.w")),
            fc_b: Tensor::zeros(vec![levels]),
        })
    }
}

#[derive(Debug, Clone)]
pub struct ImageFeedbackIds {
    pub chains: Vec<Vec<(NodeId, NodeId)>>,
    pub post_w: NodeId,
    pub post_b: NodeId,
    pub fc_w: NodeId,
    pub fc_b: NodeId,
}

pub fn register_image_feedback(tape: &mut Tape, p: &ImageFeedbackParams, trainable: bool) -> ImageFeedbackIds {
    ImageFeedbackIds {
        chains: p
            .chains
            .iter()
            .map(|chain| {
                chain
                    .iter()
                    .map(|(w, b)| (tape.leaf(w, trainable), tape.leaf(b, trainable)))
                    .collect()
            })
            .collect(),
        post_w: tape.leaf(&p.post_w, trainable),
        post_b: tape.leaf(&p.post_b, trainable),
        fc_w: tape.leaf(&p.fc_w, trainable),
        fc_b: tape.leaf(&p.fc_b, trainable),
    }
}

/// Build the image-feedback vector on a tape from pyramid level nodes.
pub fn image_feedback_node(tape: &mut Tape, levels: &[NodeId], ids: &ImageFeedbackIds) -> Result<NodeId> {
    let n = levels.len();
    if ids.chains.len() != n {
        return Err(FlexError::Config("image feedback built for a different level count".into()));
    }
    let base = tape.shape(levels[0]).to_vec();
    if base[1].min(base[2]) < (1 << n) {
        return Err(FlexError::Config(format!(
            "level extent {}x{} cannot be projected {n} more times",
            base[1], base[2]
        )));
    }
    // leaky activations: the narrow projection chains must not go dark
    let mut projected = Vec::with_capacity(n);
    for (k, &lvl) in levels.iter().enumerate() {
        let mut cur = lvl;
        for (w, b) in &ids.chains[k] {
            let c = tape.conv2d(cur, *w, 2, 1)?;
            let c = tape.bias_channel(c, *b)?;
            cur = tape.leaky_relu(c, 0.1)?;
        }
        projected.push(cur);
    }
    let target = tape.shape(projected[0]).to_vec();
    for &p in &projected {
        if tape.shape(p)[1..] != target[1..] {
            return Err(FlexError::Config("projected levels disagree on extent".into()));
        }
    }
    let cat = tape.concat_channels(&projected)?;
    let c = tape.conv2d(cat, ids.post_w, 1, 1)?;
    let c = tape.bias_channel(c, ids.post_b)?;
    let c = tape.leaky_relu(c, 0.1)?;
    let pooled = tape.global_avg_pool(c)?;
    let raw = tape.affine(pooled, ids.fc_w, ids.fc_b)?;
    tape.softplus(raw)
}

/// Eager image feedback over a built pyramid.
pub fn image_feedback(pyramid: &FeaturePyramid, params: &ImageFeedbackParams) -> Result<ImageFeedback> {
    let mut tape = Tape::new();
    let levels: Vec<NodeId> = pyramid.levels.iter().map(|l| tape.leaf(l, false)).collect();
    let ids = register_image_feedback(&mut tape, params, false);
    let out = image_feedback_node(&mut tape, &levels, &ids)?;
    Ok(ImageFeedback(tape.value(out).to_vec()))
}

// ── classification feedback network ──────────────────────────────────

/// Two-layer network from the first-pass class distribution to the raw
/// outputs of a weight parameterization.
#[derive(Debug, Clone)]
pub struct ClassNetParams {
    pub parameterization: WeightParameterization,
    pub levels: usize,
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
}

impl ClassNetParams {
    pub fn init(
        parameterization: WeightParameterization,
        classes: usize,
        levels: usize,
        seed: u64,
        name: &str,
    ) -> Self {
        let h = FEEDBACK_HIDDEN;
        let out = parameterization.output_len(levels);
        ClassNetParams {
            parameterization,
            levels,
            fc1_w: init_uniform(vec![h, classes], classes, h, param_seed(seed, &format!("{name}.fc1.w"))),
            fc1_b: Tensor::zeros(vec![h]),
            fc2_w: init_uniform(vec![out, h], h, out, param_seed(seed, &format!("{name}.fc2.w"))),
            fc2_b: Tensor::zeros(vec![out]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClassNetIds {
    pub parameterization: WeightParameterization,
    pub fc1_w: NodeId,
    pub fc1_b: NodeId,
    pub fc2_w: NodeId,
    pub fc2_b: NodeId,
}

pub fn register_class_net(tape: &mut Tape, p: &ClassNetParams, trainable: bool) -> ClassNetIds {
    ClassNetIds {
        parameterization: p.parameterization,
        fc1_w: tape.leaf(&p.fc1_w, trainable),
        fc1_b: tape.leaf(&p.fc1_b, trainable),
        fc2_w: tape.leaf(&p.fc2_w, trainable),
        fc2_b: tape.leaf(&p.fc2_b, trainable),
    }
}

fn class_net_raw(tape: &mut Tape, probs: NodeId, ids: &ClassNetIds) -> Result<NodeId> {
    let h = tape.affine(probs, ids.fc1_w, ids.fc1_b)?;
    let h = tape.relu(h)?;
    tape.affine(h, ids.fc2_w, ids.fc2_b)
}

fn check_probs(probs: &[f64]) -> Result<()> {
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || probs.iter().any(|&p| !(0.0..=1.0 + 1e-9).contains(&p)) {
        return Err(FlexError::Param("class feedback expects a probability vector".into()));
    }
    Ok(())
}

/// Eager classification feedback (interpolation knots) for one ROI.
pub fn class_feedback(pre_probs: &[f64], params: &ClassNetParams) -> Result<ClassFeedback> {
    check_probs(pre_probs)?;
    if params.parameterization != WeightParameterization::Interpolation {
        return Err(FlexError::Config("class_feedback needs an interpolation net".into()));
    }
    let mut tape = Tape::new();
    let p = tape.leaf(&Tensor::new(vec![pre_probs.len()], pre_probs.to_vec())?, false);
    let ids = register_class_net(&mut tape, params, false);
    let raw = class_net_raw(&mut tape, p, &ids)?;
    let out = tape.softplus(raw)?;
    Ok(ClassFeedback(tape.value(out).to_vec()))
}

// ── refine weight construction ───────────────────────────────────────

/// Coefficient matrix of the piecewise-linear kernel evaluation: row k-1
/// holds the knot weights for level k; rows outside the window are zero.
pub fn interpolation_matrix(target: f64, levels: usize) -> Vec<f64> {
    let half = (levels / 2) as f64;
    let m = ClassFeedback::knot_count(levels);
    let target = target.clamp(1.0, levels as f64);
    let mut mat = vec![0.0; levels * m];
    for k in 1..=levels {
        let kf = k as f64;
        if kf < target - half || kf > target + half {
            continue;
        }
        let j = (kf - target + half).clamp(0.0, (m - 1) as f64);
        let j0 = j.floor() as usize;
        let frac = j - j0 as f64;
        let row = &mut mat[(k - 1) * m..k * m];
        if j0 >= m - 1 {
            // j landed exactly on the last knot
            row[m - 1] = 1.0;
        } else {
            row[j0] = 1.0 - frac;
            row[j0 + 1] = frac;
        }
    }
    mat
}

/// Evaluate the piecewise-linear kernel centered at the target level:
/// W_k = Φ[⌊j⌋] + (j-⌊j⌋)(Φ[⌊j⌋+1] - Φ[⌊j⌋]) inside the window, 0 outside.
pub fn interpolate_cls_weights(phi: &ClassFeedback, target: f64, levels: usize) -> Result<FusionWeights> {
    let m = ClassFeedback::knot_count(levels);
    if phi.0.len() != m {
        return Err(FlexError::Shape(format!(
            "expected {m} kernel knots for {levels} levels, got {}",
            phi.0.len()
        )));
    }
    let mat = interpolation_matrix(target, levels);
    Ok(FusionWeights(
        (0..levels)
            .map(|r| mat[r * m..(r + 1) * m].iter().zip(&phi.0).map(|(c, p)| c * p).sum())
            .collect(),
    ))
}

/// Gaussian-kernel weights from an emitted center offset and width,
/// centered at clamp(target + mu, 1, N).
pub fn gaussian_weights_from_params(target: f64, mu: f64, sigma: f64, levels: usize) -> Result<FusionWeights> {
    if !(sigma > 0.0) {
        return Err(FlexError::Param("gaussian width must be positive".into()));
    }
    let c = (target + mu).clamp(1.0, levels as f64);
    let norm = 1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    Ok(FusionWeights(
        (1..=levels)
            .map(|k| {
                let d = k as f64 - c;
                norm * (-d * d / (2.0 * sigma * sigma)).exp()
            })
            .collect(),
    ))
}

/// Eager Gaussian-parameterized weights for one ROI.
pub fn gaussian_cls_weights(pre_probs: &[f64], target: f64, params: &ClassNetParams) -> Result<FusionWeights> {
    check_probs(pre_probs)?;
    if params.parameterization != WeightParameterization::Gaussian {
        return Err(FlexError::Config("gaussian_cls_weights needs a gaussian net".into()));
    }
    let mut tape = Tape::new();
    let p = tape.leaf(&Tensor::new(vec![pre_probs.len()], pre_probs.to_vec())?, false);
    let ids = register_class_net(&mut tape, params, false);
    let raw = class_net_raw(&mut tape, p, &ids)?;
    let mu = tape.value(raw)[0];
    let sigma = crate::numerics::softplus(tape.value(raw)[1]);
    gaussian_weights_from_params(target, mu, sigma, params.levels)
}

/// Eager direct weights for one ROI; area never enters.
pub fn direct_cls_weights(pre_probs: &[f64], params: &ClassNetParams) -> Result<FusionWeights> {
    check_probs(pre_probs)?;
    if params.parameterization != WeightParameterization::Direct {
        return Err(FlexError::Config("direct_cls_weights needs a direct net".into()));
    }
    let mut tape = Tape::new();
    let p = tape.leaf(&Tensor::new(vec![pre_probs.len()], pre_probs.to_vec())?, false);
    let ids = register_class_net(&mut tape, params, false);
    let raw = class_net_raw(&mut tape, p, &ids)?;
    let out = tape.softplus(raw)?;
    Ok(FusionWeights(tape.value(out).to_vec()))
}

/// Elementwise product of image feedback and class weights (Eq-style W^FB).
pub fn combine_weights(phi_img: &ImageFeedback, w_cls: &FusionWeights) -> Result<FusionWeights> {
    if phi_img.0.len() != w_cls.len() {
        return Err(FlexError::Shape(format!(
            "image feedback has {} levels, class weights {}",
            phi_img.0.len(),
            w_cls.len()
        )));
    }
    Ok(FusionWeights(
        phi_img.0.iter().zip(w_cls.as_slice()).map(|(a, b)| a * b).collect(),
    ))
}

// ── refined head ─────────────────────────────────────────────────────

/// Refined classification head: same shape as the pre-classification class
/// branch, independent parameters, no regression branch.
#[derive(Debug, Clone)]
pub struct RefineHeadParams {
    pub trunk_w: Tensor,
    pub trunk_b: Tensor,
    pub cls_w: Tensor,
    pub cls_b: Tensor,
}

impl RefineHeadParams {
    pub fn init(input_len: usize, hidden: usize, classes: usize, seed: u64, name: &str) -> Self {
        RefineHeadParams {
            trunk_w: init_uniform(vec![hidden, input_len], input_len, hidden, param_seed(seed, &format!("{name}.trunk.w"))),
            trunk_b: Tensor::zeros(vec![hidden]),
            cls_w: init_uniform(vec![classes, hidden], hidden, classes, param_seed(seed, &format!("{name}.cls.w"))),
            cls_b: Tensor::zeros(vec![classes]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RefineHeadIds {
    pub trunk_w: NodeId,
    pub trunk_b: NodeId,
    pub cls_w: NodeId,
    pub cls_b: NodeId,
}

pub fn register_refine_head(tape: &mut Tape, p: &RefineHeadParams, trainable: bool) -> RefineHeadIds {
    RefineHeadIds {
        trunk_w: tape.leaf(&p.trunk_w, trainable),
        trunk_b: tape.leaf(&p.trunk_b, trainable),
        cls_w: tape.leaf(&p.cls_w, trainable),
        cls_b: tape.leaf(&p.cls_b, trainable),
    }
}

pub fn refine_head_forward(tape: &mut Tape, fused: NodeId, ids: &RefineHeadIds) -> Result<NodeId> {
    let n = tape.value(fused).len();
    let flat = tape.reshape(fused, vec![n])?;
    let t = tape.affine(flat, ids.trunk_w, ids.trunk_b)?;
    let t = tape.relu(t)?;
    tape.affine(t, ids.cls_w, ids.cls_b)
}

/// Eager refine: normalize W^FB, fuse the pooled level features, classify.
/// Degenerate weights surface as an error so the caller can fall back.
pub fn refine(
    pooled: &[Tensor],
    w_fb: &FusionWeights,
    head: &RefineHeadParams,
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = pooled.iter().map(|f| tape.leaf(f, false)).collect();
    let w = tape.leaf(&Tensor::new(vec![w_fb.len()], w_fb.0.clone())?, false);
    let fused = tape.weighted_fuse(&ids, w)?;
    let head_ids = register_refine_head(&mut tape, head, false);
    let logits = refine_head_forward(&mut tape, fused, &head_ids)?;
    Ok((tape.tensor(fused), tape.tensor(logits)))
}

// ── per-ROI cascade on a tape ────────────────────────────────────────

/// One refinement layer's parameters.
#[derive(Debug, Clone)]
pub struct FeedbackLayerIds {
    pub class_net: ClassNetIds,
    pub head: RefineHeadIds,
}

/// Outcome of a cascade pass for one ROI.
pub struct CascadeOutput {
    /// Logits after the final layer (pre-classification logits at depth 0).
    pub final_logits: NodeId,
    /// Logits emitted by every refinement layer, in order.
    pub layer_logits: Vec<NodeId>,
    /// Count of layers that fell back to the previous logits because their
    /// fused weights degenerated.
    pub fallbacks: usize,
}

/// Run `layers.len()` refinement layers for one ROI. Each layer feeds the
/// softmax of the previous logits into its class net; the image feedback is
/// computed once by the caller and shared. `phi_img` of `None` means the
/// class weights are used alone, and `fixed_weights` (when given) bypasses
/// the class nets entirely (the fixed-Gaussian ablation).
pub fn cascade_refine(
    tape: &mut Tape,
    pooled: &[NodeId],
    pre_logits: NodeId,
    phi_img: Option<NodeId>,
    fixed_weights: Option<NodeId>,
    target: f64,
    layers: &[FeedbackLayerIds],
) -> Result<CascadeOutput> {
    let levels = pooled.len();
    let mut current = pre_logits;
    let mut layer_logits = Vec::with_capacity(layers.len());
    let mut fallbacks = 0;
    for layer in layers {
        let probs = tape.softmax(current)?;
        let w_cls = match fixed_weights {
            Some(w) => w,
            None => match layer.class_net.parameterization {
                WeightParameterization::Interpolation => {
                    let raw = class_net_raw(tape, probs, &layer.class_net)?;
                    let phi = tape.softplus(raw)?;
                    let mat = Arc::new(interpolation_matrix(target, levels));
                    tape.linear_map(phi, mat, levels)?
                }
                WeightParameterization::Gaussian => {
                    let raw = class_net_raw(tape, probs, &layer.class_net)?;
                    let mu = tape.index(raw, 0)?;
                    let s_raw = tape.index(raw, 1)?;
                    let sigma_node = tape.softplus(s_raw)?;
                    tape.gaussian_kernel(mu, sigma_node, target, levels)?
                }
                WeightParameterization::Direct => {
                    let raw = class_net_raw(tape, probs, &layer.class_net)?;
                    tape.softplus(raw)?
                }
            },
        };
        let w_fb = match phi_img {
            Some(img) => tape.mul(img, w_cls)?,
            None => w_cls,
        };
        match tape.weighted_fuse(pooled, w_fb) {
            Ok(fused) => {
                let logits = refine_head_forward(tape, fused, &layer.head)?;
                layer_logits.push(logits);
                current = logits;
            }
            Err(FlexError::DegenerateWeights { .. }) => {
                // keep the previous logits for this layer and record the event
                fallbacks += 1;
                layer_logits.push(current);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(CascadeOutput { final_logits: current, layer_logits, fallbacks })
}
