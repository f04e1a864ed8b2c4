//! Strided convolutional backbone producing an N-level feature pyramid,
//! plus bilinear ROI feature pooling.
//!
//! Level k (1-based) has spatial extent ceil(image / 2^k): a stride-2 stem
//! followed by stride-2 stages, all at the same channel width. ROI features
//! are sampled on an S×S grid of cell centers mapped into level coordinates
//! with continuous scaling (no rounding), centers at index + 0.5.

use std::sync::Arc;

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

use crate::error::{FlexError, Result};
use crate::numerics::{bilinear_taps, NodeId, Tape, Tensor};

/// Axis-aligned box in image pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Roi {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Roi {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0) || !(h > 0.0) {
            return Err(FlexError::Param(format!("roi extents must be positive, got {w}x{h}")));
        }
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(FlexError::Param("roi coordinates must be finite".into()));
        }
        Ok(Roi { x, y, w, h })
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    /// Clamp the box into `[0, size] × [0, size]`, preserving positivity.
    pub fn clamped(&self, size: f64) -> Roi {
        let x0 = self.x.clamp(0.0, size - 1e-6);
        let y0 = self.y.clamp(0.0, size - 1e-6);
        let x1 = (self.x + self.w).clamp(x0 + 1e-6, size);
        let y1 = (self.y + self.h).clamp(y0 + 1e-6, size);
        Roi { x: x0, y: y0, w: x1 - x0, h: y1 - y0 }
    }

    pub fn iou(&self, other: &Roi) -> f64 {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = (self.x + self.w).min(other.x + other.w);
        let y1 = (self.y + self.h).min(other.y + other.h);
        if x1 <= x0 || y1 <= y0 {
            return 0.0;
        }
        let inter = (x1 - x0) * (y1 - y0);
        inter / (self.area() + other.area() - inter)
    }
}

/// Backbone shape: level count and shared channel width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackboneConfig {
    pub levels: usize,
    pub channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { levels: 5, channels: 64 }
    }
}

/// Learned backbone tensors: a stem plus one conv per further level.
#[derive(Debug, Clone)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub stem_w: Tensor,
    pub stem_b: Tensor,
    pub stages: Vec<(Tensor, Tensor)>,
}

/// Uniform init in [-b, b] with b = sqrt(6 / (fan_in + fan_out)).
pub fn init_uniform(shape: Vec<usize>, fan_in: usize, fan_out: usize, seed: u64) -> Tensor {
    let b = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-b..b)).collect();
    Tensor::new(shape, data).expect("init shape consistent")
}

/// Stable per-parameter seed derived from a master seed and the tensor name.
pub fn param_seed(master: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for byte in name.as_bytes() {
        h ^= *byte as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^ master.rotate_left(17)
}

impl BackboneParams {
    pub fn init(config: BackboneConfig, seed: u64) -> Self {
        let c = config.channels;
        let stem_fan = (3 * 9, c * 9);
        let stem_w = init_uniform(vec![c, 3, 3, 3], stem_fan.0, stem_fan.1, param_seed(seed, "backbone.stem.w"));
        let stem_b = Tensor::zeros(vec![c]);
        let mut stages = Vec::new();
        for s in 1..config.levels {
            let w = init_uniform(
                vec![c, c, 3, 3],
                c * 9,
                c * 9,
                param_seed(seed, &format!("backbone.stage{s}.w")),
            );
            stages.push((w, Tensor::zeros(vec![c])));
        }
        BackboneParams { config, stem_w, stem_b, stages }
    }
}

/// Backbone parameters registered on a tape.
#[derive(Debug, Clone)]
pub struct BackboneIds {
    pub stem_w: NodeId,
    pub stem_b: NodeId,
    pub stages: Vec<(NodeId, NodeId)>,
}

pub fn register_backbone(tape: &mut Tape, params: &BackboneParams, trainable: bool) -> BackboneIds {
    BackboneIds {
        stem_w: tape.leaf(&params.stem_w, trainable),
        stem_b: tape.leaf(&params.stem_b, trainable),
        stages: params
            .stages
            .iter()
            .map(|(w, b)| (tape.leaf(w, trainable), tape.leaf(b, trainable)))
            .collect(),
    }
}

/// Stride (image pixels per cell) of 1-based level `k`: stem stride 2 times
/// 2^(k-1) further halvings.
pub fn level_stride(k: usize) -> f64 {
    (1u64 << k) as f64
}

/// Build the N pyramid levels on a tape. The image node must be [3, H, W].
pub fn pyramid_levels(tape: &mut Tape, image: NodeId, ids: &BackboneIds) -> Result<Vec<NodeId>> {
    let shape = tape.shape(image).to_vec();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(FlexError::Shape(format!("expected an image [3,H,W], got {shape:?}")));
    }
    let n_levels = ids.stages.len() + 1;
    let min_extent = shape[1].min(shape[2]);
    if min_extent < (1 << n_levels) {
        return Err(FlexError::Config(format!(
            "image extent {min_extent} too small for {n_levels} pyramid levels"
        )));
    }
    let mut levels = Vec::with_capacity(n_levels);
    let c = tape.conv2d(image, ids.stem_w, 2, 1)?;
    let c = tape.bias_channel(c, ids.stem_b)?;
    let mut cur = tape.relu(c)?;
    levels.push(cur);
    for (w, b) in &ids.stages {
        let c = tape.conv2d(cur, *w, 2, 1)?;
        let c = tape.bias_channel(c, *b)?;
        cur = tape.relu(c)?;
        levels.push(cur);
    }
    Ok(levels)
}

/// N-level stack of feature maps with halving spatial extents.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn level_count(&self) -> usize {
        self.levels.len()
    }
}

/// Eager pyramid construction (forward only).
pub fn build_pyramid(image: &Tensor, params: &BackboneParams) -> Result<FeaturePyramid> {
    let mut tape = Tape::new();
    let img = tape.leaf(image, false);
    let ids = register_backbone(&mut tape, params, false);
    let levels = pyramid_levels(&mut tape, img, &ids)?;
    Ok(FeaturePyramid { levels: levels.into_iter().map(|id| tape.tensor(id)).collect() })
}

/// Bilinear taps for pooling `roi` from a level of extent `level_h`×`level_w`
/// at the given stride. Returns an empty tap list when the mapped ROI misses
/// the feature map entirely (pooled features are zeros — a signal, not an
/// error).
pub fn roi_pool_taps(
    roi: &Roi,
    stride: f64,
    level_h: usize,
    level_w: usize,
    grid: usize,
) -> Arc<Vec<[(usize, f64); 4]>> {
    let lx0 = roi.x / stride;
    let ly0 = roi.y / stride;
    let lx1 = (roi.x + roi.w) / stride;
    let ly1 = (roi.y + roi.h) / stride;
    if lx1 <= 0.0 || ly1 <= 0.0 || lx0 >= level_w as f64 || ly0 >= level_h as f64 {
        return Arc::new(Vec::new());
    }
    let mut taps = Vec::with_capacity(grid * grid);
    for r in 0..grid {
        for c in 0..grid {
            let gx = roi.x + (c as f64 + 0.5) * roi.w / grid as f64;
            let gy = roi.y + (r as f64 + 0.5) * roi.h / grid as f64;
            taps.push(bilinear_taps(gx / stride, gy / stride, level_w, level_h));
        }
    }
    Arc::new(taps)
}

/// Pool an S×S feature block for `roi` from one pyramid level (eager).
///
/// `image_size` clamps the ROI to the image; `stride` maps image pixels to
/// level cells (see [`level_stride`]).
pub fn roi_pool(level: &Tensor, roi: &Roi, image_size: usize, stride: f64, grid: usize) -> Result<Tensor> {
    if grid == 0 {
        return Err(FlexError::Param("pooling grid must be at least 1".into()));
    }
    let shape = level.shape();
    if shape.len() != 3 {
        return Err(FlexError::Shape("roi_pool expects a level [C,H,W]".into()));
    }
    let clamped = roi.clamped(image_size as f64);
    let taps = roi_pool_taps(&clamped, stride, shape[1], shape[2], grid);
    let mut tape = Tape::new();
    let lvl = tape.leaf(level, false);
    let out = tape.roi_pool(lvl, taps, grid)?;
    Ok(tape.tensor(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;

    #[test]
    fn roi_validation() {
        assert!(Roi::new(0.0, 0.0, 10.0, 5.0).is_ok());
        assert!(Roi::new(0.0, 0.0, 0.0, 5.0).is_err());
        assert!(Roi::new(0.0, 0.0, 3.0, -1.0).is_err());
    }

    #[test]
    fn iou_of_disjoint_and_identical_boxes() {
        let a = Roi::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let b = Roi::new(20.0, 20.0, 10.0, 10.0).unwrap();
        assert_eq!(a.iou(&b), 0.0);
        assert!((a.iou(&a) - 1.0).abs() < 1e-12);
        let c = Roi::new(5.0, 0.0, 10.0, 10.0).unwrap();
        assert!((a.iou(&c) - 50.0 / 150.0).abs() < 1e-12);
    }

    #[test]
    fn pyramid_shapes_for_default_config() {
        // 256×256 input, stride-2 stem: level extents 128, 64, 32, 16, 8
        let params = BackboneParams::init(BackboneConfig { levels: 5, channels: 64 }, 1);
        let image = Tensor::zeros(vec![3, 256, 256]);
        let pyr = build_pyramid(&image, &params).unwrap();
        let want = [128usize, 64, 32, 16, 8];
        assert_eq!(pyr.level_count(), 5);
        for (k, lvl) in pyr.levels.iter().enumerate() {
            assert_eq!(lvl.shape(), &[64, want[k], want[k]], "level {}", k + 1);
        }
    }

    #[test]
    fn level_extents_halve_with_ceiling() {
        let params = BackboneParams::init(BackboneConfig { levels: 4, channels: 8 }, 2);
        let image = Tensor::zeros(vec![3, 100, 68]);
        let pyr = build_pyramid(&image, &params).unwrap();
        let mut h = 100usize;
        let mut w = 68usize;
        for lvl in &pyr.levels {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
            assert_eq!(lvl.shape(), &[8, h, w]);
        }
    }

    #[test]
    fn zero_image_with_zero_bias_gives_zero_pyramid() {
        let params = BackboneParams::init(BackboneConfig { levels: 5, channels: 32 }, 3);
        let image = Tensor::zeros(vec![3, 64, 64]);
        let pyr = build_pyramid(&image, &params).unwrap();
        for lvl in &pyr.levels {
            assert!(lvl.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn identical_images_give_identical_pyramids() {
        let params = BackboneParams::init(BackboneConfig::default(), 4);
        let cfg = crate::synthgen::SynthConfig {
            image_size: 64,
            min_size: 8.0,
            max_size: 24.0,
            ..Default::default()
        };
        let img = crate::synthgen::synth_scene(9, &cfg).unwrap().image;
        let a = build_pyramid(&img, &params).unwrap();
        let b = build_pyramid(&img, &params).unwrap();
        for (x, y) in a.levels.iter().zip(&b.levels) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn image_too_small_for_levels_is_a_config_error() {
        let params = BackboneParams::init(BackboneConfig { levels: 5, channels: 32 }, 5);
        let image = Tensor::zeros(vec![3, 16, 16]);
        assert!(matches!(build_pyramid(&image, &params), Err(FlexError::Config(_))));
    }

    #[test]
    fn pooling_constant_map_returns_the_constant() {
        let level = Tensor::full(vec![4, 8, 8], 2.5);
        let roi = Roi::new(3.0, 5.0, 20.0, 9.0).unwrap();
        let out = roi_pool(&level, &roi, 64, level_stride(3), 7).unwrap();
        assert_eq!(out.shape(), &[4, 7, 7]);
        for v in out.data() {
            assert!((v - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn single_cell_roi_with_unit_grid_reads_that_cell() {
        let mut data = vec![0.0; 16];
        data[2 * 4 + 1] = 7.0; // cell (row 2, col 1)
        let level = Tensor::new(vec![1, 4, 4], data).unwrap();
        // level stride 4: cell (2,1) covers image pixels x in [4,8), y in [8,12)
        let roi = Roi::new(4.0, 8.0, 4.0, 4.0).unwrap();
        let out = roi_pool(&level, &roi, 16, 4.0, 1).unwrap();
        assert_eq!(out.data(), &[7.0]);
    }

    #[test]
    fn pooling_matches_pointwise_bilinear_oracle() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(11);
        let (h, w) = (6usize, 9usize);
        let data: Vec<f64> = (0..2 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let level = Tensor::new(vec![2, h, w], data.clone()).unwrap();
        let stride = 4.0;
        let roi = Roi::new(3.0, 2.5, 17.0, 11.0).unwrap();
        let grid = 3usize;
        let out = roi_pool(&level, &roi, 36, stride, grid).unwrap();
        for c in 0..2 {
            for r in 0..grid {
                for q in 0..grid {
                    let gx = roi.x + (q as f64 + 0.5) * roi.w / grid as f64;
                    let gy = roi.y + (r as f64 + 0.5) * roi.h / grid as f64;
                    // align-corners-false bilinear, clamped to the map
                    let xf = (gx / stride - 0.5).clamp(0.0, (w - 1) as f64);
                    let yf = (gy / stride - 0.5).clamp(0.0, (h - 1) as f64);
                    let (x0, y0) = (xf.floor() as usize, yf.floor() as usize);
                    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                    let (fx, fy) = (xf - x0 as f64, yf - y0 as f64);
                    let at = |yy: usize, xx: usize| data[(c * h + yy) * w + xx];
                    let want = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
                        + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
                    let got = out.data()[(c * grid + r) * grid + q];
                    assert!((got - want).abs() < 1e-12, "c{c} r{r} q{q}: {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn off_map_roi_pools_zeros() {
        let level = Tensor::full(vec![2, 4, 4], 3.0);
        // stride 8 maps the level to image span [0,32); this ROI starts at 200
        let roi = Roi::new(200.0, 200.0, 16.0, 16.0).unwrap();
        let taps = roi_pool_taps(&roi, 8.0, 4, 4, 2);
        assert!(taps.is_empty());
        let mut tape = Tape::new();
        let lvl = tape.leaf(&level, false);
        let out = tape.roi_pool(lvl, taps, 2).unwrap();
        assert!(tape.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pooling_is_linear_in_the_feature_map() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(13);
        let data: Vec<f64> = (0..3 * 5 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let level = Tensor::new(vec![3, 5, 5], data.clone()).unwrap();
        let scaled = Tensor::new(vec![3, 5, 5], data.iter().map(|v| v * -2.5).collect()).unwrap();
        let roi = Roi::new(1.0, 3.0, 12.0, 9.0).unwrap();
        let a = roi_pool(&level, &roi, 20, 4.0, 4).unwrap();
        let b = roi_pool(&scaled, &roi, 20, 4.0, 4).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((y - x * -2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_gradients_pass_finite_differences() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(17);
        let data: Vec<f64> = (0..2 * 4 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let roi = Roi::new(2.0, 1.0, 10.0, 9.0).unwrap();
        let taps = roi_pool_taps(&roi, 4.0, 4, 4, 3);
        let run = |flat: &[f64]| -> crate::error::Result<f64> {
            let t = Tensor::new(vec![2, 4, 4], flat.to_vec())?;
            let mut tape = Tape::new();
            let lvl = tape.leaf(&t, true);
            let pooled = tape.roi_pool(lvl, Arc::clone(&taps), 3)?;
            let g = tape.global_avg_pool(pooled)?;
            let a = tape.index(g, 0)?;
            let b = tape.index(g, 1)?;
            let s = tape.sum_scalars(&[a, b])?;
            Ok(tape.value(s)[0])
        };
        let analytic = {
            let t = Tensor::new(vec![2, 4, 4], data.clone()).unwrap();
            let mut tape = Tape::new();
            let lvl = tape.leaf(&t, true);
            let pooled = tape.roi_pool(lvl, Arc::clone(&taps), 3).unwrap();
            let g = tape.global_avg_pool(pooled).unwrap();
            let a = tape.index(g, 0).unwrap();
            let b = tape.index(g, 1).unwrap();
            let s = tape.sum_scalars(&[a, b]).unwrap();
            let grads = tape.backward(s).unwrap();
            grads.get_or_zeros(lvl, data.len())
        };
        let errs = finite_diff_check(run, &data, &analytic, 1e-6).unwrap();
        let max = errs.iter().cloned().fold(0.0, f64::max);
        assert!(max < 1e-4, "max rel err {max}");
    }
}
