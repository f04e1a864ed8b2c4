//! Full per-scene model assembly: backbone, pre-classification pass, and the
//! feedback refine cascade, under the ablation configuration axes.

use crate::error::{FlexError, Result};
use crate::feedback::{
    cascade_refine, image_feedback_node, register_class_net, register_image_feedback,
    register_refine_head, ClassNetParams, FeedbackLayerIds, ImageFeedbackIds, ImageFeedbackParams,
    RefineHeadParams, WeightParameterization,
};
use crate::numerics::{NodeId, Tape, Tensor};
use crate::preclass::{
    gaussian_weights, pre_head_forward, register_pre_head, target_level, target_level_floor,
    FusionWeights, HeadConfig, Hyperparams, PreHeadIds, PreHeadParams,
};
use crate::pyramid::{
    level_stride, pyramid_levels, register_backbone, roi_pool_taps, BackboneConfig,
    BackboneIds, BackboneParams, Roi,
};

/// Which pieces of the feedback refine stage are enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationMode {
    /// Single-level extraction by the discrete area rule; no refine stage.
    Baseline,
    /// Gaussian-fused pre-classification plus a refine stage whose fusion
    /// weights are the same fixed Gaussian.
    MultiLevel,
    /// Refine weights from classification feedback alone.
    ClassFeedback,
    /// Refine weights from classification feedback scaled by image feedback.
    Full,
}

impl AblationMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(AblationMode::Baseline),
            "multi-level" => Ok(AblationMode::MultiLevel),
            "cls" => Ok(AblationMode::ClassFeedback),
            "cls-img" => Ok(AblationMode::Full),
            other => Err(FlexError::Usage(format!(
                "unknown ablation mode `{other}` (expected baseline|multi-level|cls|cls-img)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AblationMode::Baseline => "baseline",
            AblationMode::MultiLevel => "multi-level",
            AblationMode::ClassFeedback => "cls",
            AblationMode::Full => "cls-img",
        }
    }

    pub fn has_refine_stage(&self) -> bool {
        !matches!(self, AblationMode::Baseline)
    }

    pub fn uses_class_feedback(&self) -> bool {
        matches!(self, AblationMode::ClassFeedback | AblationMode::Full)
    }

    pub fn uses_image_feedback(&self) -> bool {
        matches!(self, AblationMode::Full)
    }
}

impl WeightParameterization {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(WeightParameterization::Direct),
            "gaussian" => Ok(WeightParameterization::Gaussian),
            "interpolation" => Ok(WeightParameterization::Interpolation),
            other => Err(FlexError::Usage(format!(
                "unknown parameterization `{other}` (expected direct|gaussian|interpolation)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            WeightParameterization::Direct => "direct",
            WeightParameterization::Gaussian => "gaussian",
            WeightParameterization::Interpolation => "interpolation",
        }
    }
}

/// Complete model configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub hyper: Hyperparams,
    pub channels: usize,
    pub classes: usize,
    pub grid: usize,
    pub head_hidden: usize,
    pub ablation: AblationMode,
    pub parameterization: WeightParameterization,
    pub cascade_depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hyper: Hyperparams::default(),
            channels: 64,
            classes: 6,
            grid: 7,
            head_hidden: 256,
            ablation: AblationMode::Full,
            parameterization: WeightParameterization::Interpolation,
            cascade_depth: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if self.classes < 2 {
            return Err(FlexError::Config("need at least 2 classes".into()));
        }
        if self.grid == 0 || self.head_hidden == 0 {
            return Err(FlexError::Config("grid and head width must be positive".into()));
        }
        if self.cascade_depth == 0 && self.ablation.has_refine_stage() {
            return Err(FlexError::Usage(
                "cascade depth 0 only makes sense for the baseline ablation".into(),
            ));
        }
        if self.cascade_depth > 1 && !self.ablation.uses_class_feedback() {
            return Err(FlexError::Usage(
                "cascading needs class feedback: use ablation cls or cls-img".into(),
            ));
        }
        if self.parameterization != WeightParameterization::Interpolation
            && !self.ablation.uses_class_feedback()
        {
            return Err(FlexError::Usage(
                "weight parameterizations apply only when class feedback is enabled".into(),
            ));
        }
        Ok(())
    }

    fn head_config(&self) -> HeadConfig {
        HeadConfig {
            classes: self.classes,
            hidden: self.head_hidden,
            channels: self.channels,
            grid: self.grid,
        }
    }

    fn refine_layer_count(&self) -> usize {
        if self.ablation.uses_class_feedback() {
            self.cascade_depth.max(1)
        } else {
            1
        }
    }
}

/// Every learned tensor in the model.
#[derive(Debug, Clone)]
pub struct FlexParams {
    pub config: ModelConfig,
    pub backbone: BackboneParams,
    pub pre_head: PreHeadParams,
    pub image_net: ImageFeedbackParams,
    pub layers: Vec<(ClassNetParams, RefineHeadParams)>,
}

impl FlexParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let n = config.hyper.levels;
        let backbone = BackboneParams::init(
            BackboneConfig { levels: n, channels: config.channels },
            seed,
        );
        let pre_head = PreHeadParams::init(config.head_config(), seed, "pre");
        let image_net = ImageFeedbackParams::init(n, config.channels, seed)?;
        let input_len = config.head_config().input_len();
        let layers = (0..config.refine_layer_count())
            .map(|t| {
                (
                    ClassNetParams::init(
                        config.parameterization,
                        config.classes,
                        n,
                        seed,
                        &format!("layer{t}.clsfb"),
                    ),
                    RefineHeadParams::init(
                        input_len,
                        config.head_hidden,
                        config.classes,
                        seed,
                        &format!("layer{t}.refine"),
                    ),
                )
            })
            .collect();
        Ok(FlexParams { config, backbone, pre_head, image_net, layers })
    }

    /// Visit every parameter in a stable order.
    pub fn for_each(&self, mut f: impl FnMut(&str, &Tensor)) {
        f("backbone.stem.w", &self.backbone.stem_w);
        f("backbone.stem.b", &self.backbone.stem_b);
        for (i, (w, b)) in self.backbone.stages.iter().enumerate() {
            f(&format!("backbone.stage{i}.w"), w);
            f(&format!("backbone.stage{i}.b"), b);
        }
        f("pre.trunk.w", &self.pre_head.trunk_w);
        f("pre.trunk.b", &self.pre_head.trunk_b);
        f("pre.cls.w", &self.pre_head.cls_w);
        f("pre.cls.b", &self.pre_head.cls_b);
        f("pre.reg.w", &self.pre_head.reg_w);
        f("pre.reg.b", &self.pre_head.reg_b);
        for (k, chain) in self.image_net.chains.iter().enumerate() {
            for (j, (w, b)) in chain.iter().enumerate() {
                f(&format!("imgfb.proj{k}.{j}.w"), w);
                f(&format!("imgfb.proj{k}.{j}.b"), b);
            }
        }
        f("imgfb.post.w", &self.image_net.post_w);
        f("imgfb.post.b", &self.image_net.post_b);
        f("imgfb.fc.w", &self.image_net.fc_w);
        f("imgfb.fc.b", &self.image_net.fc_b);
        for (t, (net, head)) in self.layers.iter().enumerate() {
            f(&format!("layer{t}.clsfb.fc1.w"), &net.fc1_w);
            f(&format!("layer{t}.clsfb.fc1.b"), &net.fc1_b);
            f(&format!("layer{t}.clsfb.fc2.w"), &net.fc2_w);
            f(&format!("layer{t}.clsfb.fc2.b"), &net.fc2_b);
            f(&format!("layer{t}.refine.trunk.w"), &head.trunk_w);
            f(&format!("layer{t}.refine.trunk.b"), &head.trunk_b);
            f(&format!("layer{t}.refine.cls.w"), &head.cls_w);
            f(&format!("layer{t}.refine.cls.b"), &head.cls_b);
        }
    }

    /// Mutable visit in the same order as [`FlexParams::for_each`].
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        f("backbone.stem.w", &mut self.backbone.stem_w);
        f("backbone.stem.b", &mut self.backbone.stem_b);
        for (i, (w, b)) in self.backbone.stages.iter_mut().enumerate() {
            f(&format!("backbone.stage{i}.w"), w);
            f(&format!("backbone.stage{i}.b"), b);
        }
        f("pre.trunk.w", &mut self.pre_head.trunk_w);
        f("pre.trunk.b", &mut self.pre_head.trunk_b);
        f("pre.cls.w", &mut self.pre_head.cls_w);
        f("pre.cls.b", &mut self.pre_head.cls_b);
        f("pre.reg.w", &mut self.pre_head.reg_w);
        f("pre.reg.b", &mut self.pre_head.reg_b);
        for (k, chain) in self.image_net.chains.iter_mut().enumerate() {
            for (j, (w, b)) in chain.iter_mut().enumerate() {
                f(&format!("imgfb.proj{k}.{j}.w"), w);
                f(&format!("imgfb.proj{k}.{j}.b"), b);
            }
        }
        f("imgfb.post.w", &mut self.image_net.post_w);
        f("imgfb.post.b", &mut self.image_net.post_b);
        f("imgfb.fc.w", &mut self.image_net.fc_w);
        f("imgfb.fc.b", &mut self.image_net.fc_b);
        for (t, (net, head)) in self.layers.iter_mut().enumerate() {
            f(&format!("layer{t}.clsfb.fc1.w"), &mut net.fc1_w);
            f(&format!("layer{t}.clsfb.fc1.b"), &mut net.fc1_b);
            f(&format!("layer{t}.clsfb.fc2.w"), &mut net.fc2_w);
            f(&format!("layer{t}.clsfb.fc2.b"), &mut net.fc2_b);
            f(&format!("layer{t}.refine.trunk.w"), &mut head.trunk_w);
            f(&format!("layer{t}.refine.trunk.b"), &mut head.trunk_b);
            f(&format!("layer{t}.refine.cls.w"), &mut head.cls_w);
            f(&format!("layer{t}.refine.cls.b"), &mut head.cls_b);
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.for_each(|n, _| names.push(n.to_string()));
        names
    }

    /// Whether a named parameter belongs to a group the configured ablation
    /// actually trains. Inactive groups must never change during training.
    pub fn is_active(&self, name: &str) -> bool {
        let mode = self.config.ablation;
        if name.starts_with("backbone.") || name.starts_with("pre.") {
            return true;
        }
        if name.starts_with("imgfb.") {
            return mode.uses_image_feedback();
        }
        if name.contains(".clsfb.") {
            return mode.uses_class_feedback();
        }
        if name.contains(".refine.") {
            return mode.has_refine_stage();
        }
        false
    }
}

/// Tape ids of every registered parameter, parallel to the stable order.
pub struct ModelIds {
    pub backbone: BackboneIds,
    pub pre: PreHeadIds,
    pub image_net: ImageFeedbackIds,
    pub layers: Vec<FeedbackLayerIds>,
    pub flat: Vec<NodeId>,
}

pub fn register_model(tape: &mut Tape, params: &FlexParams, trainable: bool) -> ModelIds {
    let backbone = register_backbone(tape, &params.backbone, trainable);
    let pre = register_pre_head(tape, &params.pre_head, trainable);
    let image_net = register_image_feedback(tape, &params.image_net, trainable);
    let layers: Vec<FeedbackLayerIds> = params
        .layers
        .iter()
        .map(|(net, head)| FeedbackLayerIds {
            class_net: register_class_net(tape, net, trainable),
            head: register_refine_head(tape, head, trainable),
        })
        .collect();
    let mut flat = Vec::new();
    flat.push(backbone.stem_w);
    flat.push(backbone.stem_b);
    for (w, b) in &backbone.stages {
        flat.push(*w);
        flat.push(*b);
    }
    flat.extend([pre.trunk_w, pre.trunk_b, pre.cls_w, pre.cls_b, pre.reg_w, pre.reg_b]);
    for chain in &image_net.chains {
        for (w, b) in chain {
            flat.push(*w);
            flat.push(*b);
        }
    }
    flat.extend([image_net.post_w, image_net.post_b, image_net.fc_w, image_net.fc_b]);
    for layer in &layers {
        flat.extend([
            layer.class_net.fc1_w,
            layer.class_net.fc1_b,
            layer.class_net.fc2_w,
            layer.class_net.fc2_b,
            layer.head.trunk_w,
            layer.head.trunk_b,
            layer.head.cls_w,
            layer.head.cls_b,
        ]);
    }
    ModelIds { backbone, pre, image_net, layers, flat }
}

/// One proposal with its training targets.
#[derive(Debug, Clone)]
pub struct RoiSample {
    pub proposal: Roi,
    pub class: usize,
    pub reg_target: [f64; 4],
}

/// Per-ROI node handles after a forward pass.
pub struct RoiForward {
    pub pre_logits: NodeId,
    pub deltas: NodeId,
    pub final_logits: NodeId,
    pub layer_logits: Vec<NodeId>,
    pub fallbacks: usize,
}

/// Scene-level forward result.
pub struct SceneForward {
    pub rois: Vec<RoiForward>,
    pub phi_img: Option<NodeId>,
    pub fallbacks: usize,
}

/// Run the configured pipeline for one scene's image and proposals.
pub fn scene_forward(
    tape: &mut Tape,
    image: NodeId,
    samples: &[RoiSample],
    params: &FlexParams,
    ids: &ModelIds,
) -> Result<SceneForward> {
    let cfg = &params.config;
    let n = cfg.hyper.levels;
    let image_size = tape.shape(image)[1].max(tape.shape(image)[2]);
    let levels = pyramid_levels(tape, image, &ids.backbone)?;

    // image feedback is computed once per scene and shared across ROIs
    let phi_img = if cfg.ablation.uses_image_feedback() {
        Some(image_feedback_node(tape, &levels, &ids.image_net)?)
    } else {
        None
    };

    let mut rois = Vec::with_capacity(samples.len());
    let mut fallbacks = 0;
    for sample in samples {
        let roi = sample.proposal.clamped(image_size as f64);
        let continuous = target_level(roi.w, roi.h, cfg.hyper.delta, n)?;

        // pool an S×S block from every level
        let mut pooled = Vec::with_capacity(n);
        for (k, &lvl) in levels.iter().enumerate() {
            let shape = tape.shape(lvl).to_vec();
            let taps = roi_pool_taps(&roi, level_stride(k + 1), shape[1], shape[2], cfg.grid);
            pooled.push(tape.roi_pool(lvl, taps, cfg.grid)?);
        }

        // pre-classification fusion weights
        let pre_weights = if cfg.ablation == AblationMode::Baseline {
            let lvl = target_level_floor(roi.w, roi.h, cfg.hyper.delta, n)?;
            FusionWeights::one_hot(lvl, n)
        } else {
            gaussian_weights(continuous, cfg.hyper.sigma, n)?
        };
        let w_pre = tape.leaf(&Tensor::new(vec![n], pre_weights.0.clone())?, false);
        let fused_pre = tape.weighted_fuse(&pooled, w_pre)?;
        let (pre_logits, deltas) = pre_head_forward(tape, fused_pre, &ids.pre)?;

        let (final_logits, layer_logits, roi_fallbacks) = match cfg.ablation {
            AblationMode::Baseline => (pre_logits, Vec::new(), 0),
            AblationMode::MultiLevel => {
                let out = cascade_refine(
                    tape,
                    &pooled,
                    pre_logits,
                    None,
                    Some(w_pre),
                    continuous,
                    &ids.layers[..1],
                )?;
                (out.final_logits, out.layer_logits, out.fallbacks)
            }
            AblationMode::ClassFeedback | AblationMode::Full => {
                let out = cascade_refine(
                    tape,
                    &pooled,
                    pre_logits,
                    phi_img.filter(|_| cfg.ablation.uses_image_feedback()),
                    None,
                    continuous,
                    &ids.layers,
                )?;
                (out.final_logits, out.layer_logits, out.fallbacks)
            }
        };
        fallbacks += roi_fallbacks;
        rois.push(RoiForward { pre_logits, deltas, final_logits, layer_logits, fallbacks: roi_fallbacks });
    }
    Ok(SceneForward { rois, phi_img, fallbacks })
}

/// Per-scene loss terms (already averaged over the scene's ROIs).
pub struct SceneLoss {
    pub total: NodeId,
    pub reg: f64,
    pub cls_pre: f64,
    pub cls_refine: f64,
}

/// Assemble the joint loss for one scene: smooth-L1 regression plus
/// γ-weighted pre-classification cross-entropy plus refine cross-entropy
/// (averaged over cascade layers), averaged over the ROI batch. The baseline
/// ablation has no refine stage; its classification term enters with
/// coefficient 1.
pub fn scene_loss(
    tape: &mut Tape,
    rois: &[RoiForward],
    samples: &[RoiSample],
    params: &FlexParams,
) -> Result<Option<SceneLoss>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let cfg = &params.config;
    let gamma = cfg.hyper.gamma;
    let mut terms = Vec::new();
    let mut reg_sum = 0.0;
    let mut pre_sum = 0.0;
    let mut refine_sum = 0.0;
    let inv = 1.0 / samples.len() as f64;
    for (roi, sample) in rois.iter().zip(samples) {
        let reg = tape.smooth_l1(roi.deltas, sample.reg_target.to_vec())?;
        reg_sum += tape.value(reg)[0];
        let reg = tape.scale(reg, inv)?;
        terms.push(reg);

        let ce_pre = tape.softmax_cross_entropy(roi.pre_logits, sample.class)?;
        pre_sum += tape.value(ce_pre)[0];
        let pre_coeff = if cfg.ablation.has_refine_stage() { gamma } else { 1.0 };
        let ce_pre = tape.scale(ce_pre, inv * pre_coeff)?;
        terms.push(ce_pre);

        if !roi.layer_logits.is_empty() {
            let layer_inv = inv / roi.layer_logits.len() as f64;
            for &logits in &roi.layer_logits {
                let ce = tape.softmax_cross_entropy(logits, sample.class)?;
                refine_sum += tape.value(ce)[0] / roi.layer_logits.len() as f64;
                let ce = tape.scale(ce, layer_inv)?;
                terms.push(ce);
            }
        }
    }
    let total = tape.sum_scalars(&terms)?;
    if !tape.value(total)[0].is_finite() {
        return Err(FlexError::Numeric("scene loss is not finite".into()));
    }
    Ok(Some(SceneLoss {
        total,
        reg: reg_sum * inv,
        cls_pre: pre_sum * inv,
        cls_refine: refine_sum * inv,
    }))
}

/// Joint loss over an ROI batch from already-computed head outputs (eager):
/// smooth-L1 regression + γ · pre-classification cross-entropy + refine
/// cross-entropy, averaged over the batch. `refine_logits` is None for the
/// baseline path, where the classification term enters with coefficient 1.
/// An empty batch is defined as loss 0.
pub fn total_loss(
    pre_logits: &[Tensor],
    refine_logits: Option<&[Tensor]>,
    bbox_deltas: &[Tensor],
    targets: &[(usize, [f64; 4])],
    gamma: f64,
) -> Result<f64> {
    if pre_logits.len() != targets.len() || bbox_deltas.len() != targets.len() {
        return Err(FlexError::Shape("loss inputs disagree on batch size".into()));
    }
    if let Some(r) = refine_logits {
        if r.len() != targets.len() {
            return Err(FlexError::Shape("loss inputs disagree on batch size".into()));
        }
    }
    if gamma < 0.0 {
        return Err(FlexError::Param("gamma must be non-negative".into()));
    }
    if targets.is_empty() {
        return Ok(0.0);
    }
    let mut tape = Tape::new();
    let mut terms = Vec::new();
    let inv = 1.0 / targets.len() as f64;
    let pre_coeff = if refine_logits.is_some() { gamma } else { 1.0 };
    for (i, (class, reg_target)) in targets.iter().enumerate() {
        let d = tape.leaf(&bbox_deltas[i], false);
        let reg = tape.smooth_l1(d, reg_target.to_vec())?;
        terms.push(tape.scale(reg, inv)?);
        let p = tape.leaf(&pre_logits[i], false);
        let ce = tape.softmax_cross_entropy(p, *class)?;
        terms.push(tape.scale(ce, inv * pre_coeff)?);
        if let Some(refined) = refine_logits {
            let r = tape.leaf(&refined[i], false);
            let ce = tape.softmax_cross_entropy(r, *class)?;
            terms.push(tape.scale(ce, inv)?);
        }
    }
    let total = tape.sum_scalars(&terms)?;
    Ok(tape.value(total)[0])
}
