//! Quantitative analyses of a trained model: blur response of the image
//! feedback, top-decile blur sensitivity, and information gain of the
//! refinement stage versus pre-classification entropy.

use rand_chacha::ChaCha12Rng;
use rand::SeedableRng;

use crate::error::{FlexError, Result};
use crate::feedback::image_feedback;
use crate::model::{register_model, scene_forward, FlexParams};
use crate::numerics::{softmax, Tape};
use crate::pyramid::build_pyramid;
use crate::synthgen::{blur_image, BlurSpec};
use crate::trainer::{make_proposals, LoadedScene};

/// Reference means of the first-layer image feedback on a large-scale study,
/// by mean-kernel size; printed next to toy values for comparison.
pub const REFERENCE_FIRST_LAYER: [(usize, f64); 4] =
    [(1, 0.8289), (5, 0.8175), (9, 0.7970), (21, 0.7768)];
/// Reference last-layer means, same study.
pub const REFERENCE_LAST_LAYER: [(usize, f64); 4] =
    [(1, 1.1806), (5, 1.1855), (9, 1.2050), (21, 1.2223)];
/// Reference first-layer means over the top-10% subset.
pub const REFERENCE_TOP10_FIRST: [(usize, f64); 4] =
    [(1, 1.1477), (5, 1.0955), (9, 0.9910), (21, 0.8490)];
/// Reference last-layer means over the top-10% subset.
pub const REFERENCE_TOP10_LAST: [(usize, f64); 4] =
    [(1, 0.9897), (5, 1.0166), (9, 1.0768), (21, 1.1689)];

/// Shannon entropy in bits, with 0·log 0 = 0.
pub fn entropy(probs: &[f64]) -> Result<f64> {
    if probs.iter().any(|&p| p < 0.0) {
        return Err(FlexError::Param("entropy of negative probabilities".into()));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(FlexError::Param(format!("probabilities sum to {sum}, not 1")));
    }
    Ok(probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.log2())
        .sum())
}

/// Entropy drop from the pre-classification to the refined distribution;
/// negative when refinement becomes less certain.
pub fn information_gain(pre_probs: &[f64], refine_probs: &[f64]) -> Result<f64> {
    Ok(entropy(pre_probs)? - entropy(refine_probs)?)
}

/// One row of a blur-response report.
#[derive(Debug, Clone, PartialEq)]
pub struct BlurRow {
    pub kernel: usize,
    pub first_layer_mean: f64,
    pub last_layer_mean: f64,
    /// Full-set last-layer mean, for top-fraction reports.
    pub full_set_last_layer_mean: Option<f64>,
}

/// Blur-response report with provenance.
#[derive(Debug, Clone)]
pub struct BlurReport {
    pub rows: Vec<BlurRow>,
    /// 1.0 for the full set, the kept fraction otherwise.
    pub fraction: f64,
    pub scenes_used: usize,
    /// Set when the subset is smaller than 10 scenes.
    pub small_subset: bool,
    pub trained: bool,
    pub checkpoint_digest: String,
    pub dataset_digest: String,
}

fn phi_for_scene(params: &FlexParams, scene: &LoadedScene, spec: BlurSpec) -> Result<Vec<f64>> {
    let image = blur_image(&scene.image, spec)?;
    let pyramid = build_pyramid(&image, &params.backbone)?;
    Ok(image_feedback(&pyramid, &params.image_net)?.0)
}

fn mean_phi(params: &FlexParams, scenes: &[&LoadedScene], kernel: usize) -> Result<(f64, f64)> {
    let spec = BlurSpec::new(kernel)?;
    let mut first = 0.0;
    let mut last = 0.0;
    for scene in scenes {
        let phi = phi_for_scene(params, scene, spec)?;
        first += phi[0];
        last += phi[phi.len() - 1];
    }
    let n = scenes.len().max(1) as f64;
    Ok((first / n, last / n))
}

/// For each kernel size, blur every clean scene, run the image feedback, and
/// average the first- and last-layer entries.
pub fn blur_response(params: &FlexParams, scenes: &[LoadedScene], kernels: &[usize]) -> Result<Vec<BlurRow>> {
    let refs: Vec<&LoadedScene> = scenes.iter().collect();
    let mut rows = Vec::with_capacity(kernels.len());
    for &kernel in kernels {
        let (first, last) = mean_phi(params, &refs, kernel)?;
        rows.push(BlurRow {
            kernel,
            first_layer_mean: first,
            last_layer_mean: last,
            full_set_last_layer_mean: None,
        });
    }
    Ok(rows)
}

/// Rank clean scenes by their first-layer image feedback, keep the top
/// fraction, and compute the blur response on that subset. Each row also
/// carries the full-set last-layer mean for comparison.
pub fn top_fraction_blur_response(
    params: &FlexParams,
    scenes: &[LoadedScene],
    fraction: f64,
    kernels: &[usize],
) -> Result<(Vec<BlurRow>, usize)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(FlexError::Param(format!("fraction {fraction} outside (0, 1]")));
    }
    let mut ranked: Vec<(usize, f64)> = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let phi = phi_for_scene(params, scene, BlurSpec::new(1)?)?;
        ranked.push((i, phi[0]));
    }
    // deterministic ranking: value descending, index as tiebreak
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    let keep = ((scenes.len() as f64 * fraction).round() as usize)
        .clamp(1, scenes.len());
    // membership from the ranking; aggregation in original scene order
    let mut kept_idx: Vec<usize> = ranked[..keep].iter().map(|&(i, _)| i).collect();
    kept_idx.sort_unstable();
    let subset: Vec<&LoadedScene> = kept_idx.iter().map(|&i| &scenes[i]).collect();
    let full: Vec<&LoadedScene> = scenes.iter().collect();

    let mut rows = Vec::with_capacity(kernels.len());
    for &kernel in kernels {
        let (first, last) = mean_phi(params, &subset, kernel)?;
        let (_, full_last) = mean_phi(params, &full, kernel)?;
        rows.push(BlurRow {
            kernel,
            first_layer_mean: first,
            last_layer_mean: last,
            full_set_last_layer_mean: Some(full_last),
        });
    }
    Ok((rows, keep))
}

/// One entropy bin of the information-gain curve.
#[derive(Debug, Clone)]
pub struct InfoGainBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Undefined (NaN) when the bin is empty.
    pub mean_ig: f64,
    /// Standard error of the mean; NaN for fewer than 2 samples.
    pub stderr: f64,
    /// Bin contains log2(2) = 1 bit.
    pub marks_two_way: bool,
    /// Bin contains log2(3) ≈ 1.585 bits.
    pub marks_three_way: bool,
}

/// Binned information gain versus pre-classification entropy, plus the raw
/// per-ROI (entropy, gain) pairs for quantile analyses.
#[derive(Debug, Clone)]
pub struct InfoGainCurve {
    pub bins: Vec<InfoGainBin>,
    pub pairs: Vec<(f64, f64)>,
    pub classes: usize,
}

/// Uniform bin edges over [0, log2 K].
pub fn info_gain_bin_edges(classes: usize, bins: usize) -> Vec<f64> {
    let top = (classes as f64).log2();
    (0..=bins).map(|i| top * i as f64 / bins as f64).collect()
}

/// Run the detector over the scenes and bin per-ROI information gain by
/// pre-classification entropy.
pub fn info_gain_curve(
    params: &FlexParams,
    scenes: &[LoadedScene],
    bins: usize,
    seed: u64,
) -> Result<InfoGainCurve> {
    if bins == 0 {
        return Err(FlexError::Param("need at least one bin".into()));
    }
    let classes = params.config.classes;
    let mut pairs = Vec::new();
    for (si, scene) in scenes.iter().enumerate() {
        let image_size = scene.image.shape()[1];
        let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(si as u64 * 0x9e37));
        let samples = make_proposals(&scene.annotations, image_size, 2, &mut rng);
        if samples.is_empty() {
            continue;
        }
        let mut tape = Tape::new();
        let image = tape.leaf(&scene.image, false);
        let ids = register_model(&mut tape, params, false);
        let fwd = scene_forward(&mut tape, image, &samples, params, &ids)?;
        for roi in &fwd.rois {
            let pre = softmax(tape.value(roi.pre_logits));
            let refined = softmax(tape.value(roi.final_logits));
            let h_pre = entropy(&pre)?;
            let ig = h_pre - entropy(&refined)?;
            pairs.push((h_pre, ig));
        }
    }

    let edges = info_gain_bin_edges(classes, bins);
    let mut sums = vec![0.0; bins];
    let mut sq = vec![0.0; bins];
    let mut counts = vec![0usize; bins];
    for &(h, ig) in &pairs {
        let top = (classes as f64).log2();
        let mut b = ((h / top) * bins as f64).floor() as usize;
        if b >= bins {
            b = bins - 1;
        }
        sums[b] += ig;
        sq[b] += ig * ig;
        counts[b] += 1;
    }
    let bins_out = (0..bins)
        .map(|b| {
            let n = counts[b];
            let mean = if n > 0 { sums[b] / n as f64 } else { f64::NAN };
            let stderr = if n > 1 {
                let var = (sq[b] - sums[b] * sums[b] / n as f64) / (n as f64 - 1.0);
                (var.max(0.0) / n as f64).sqrt()
            } else {
                f64::NAN
            };
            let (lo, hi) = (edges[b], edges[b + 1]);
            InfoGainBin {
                lo,
                hi,
                count: n,
                mean_ig: mean,
                stderr,
                marks_two_way: lo <= 1.0 && 1.0 < hi,
                marks_three_way: lo <= 3f64.log2() && 3f64.log2() < hi,
            }
        })
        .collect();
    Ok(InfoGainCurve { bins: bins_out, pairs, classes })
}

/// Mean information gain in the bottom and top quartiles of the
/// pre-classification entropy distribution.
pub fn quartile_means(pairs: &[(f64, f64)]) -> Option<(f64, f64)> {
    if pairs.len() < 4 {
        return None;
    }
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
    let q = sorted.len() / 4;
    let low: f64 = sorted[..q].iter().map(|p| p.1).sum::<f64>() / q as f64;
    let high: f64 = sorted[sorted.len() - q..].iter().map(|p| p.1).sum::<f64>() / q as f64;
    Some((low, high))
}

// ── report formatting ────────────────────────────────────────────────

pub fn blur_report_csv(report: &BlurReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "# checkpoint {} dataset {} fraction {} trained {}\n",
        report.checkpoint_digest, report.dataset_digest, report.fraction, report.trained
    ));
    if report.rows.iter().any(|r| r.full_set_last_layer_mean.is_some()) {
        out.push_str("kernel,first_layer_mean,last_layer_mean,full_set_last_layer_mean\n");
        for r in &report.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.kernel,
                r.first_layer_mean,
                r.last_layer_mean,
                r.full_set_last_layer_mean.unwrap_or(f64::NAN)
            ));
        }
    } else {
        out.push_str("kernel,first_layer_mean,last_layer_mean\n");
        for r in &report.rows {
            out.push_str(&format!("{},{},{}\n", r.kernel, r.first_layer_mean, r.last_layer_mean));
        }
    }
    out
}

/// Human-oriented summary printing toy means beside the reference values.
pub fn blur_report_summary(report: &BlurReport) -> String {
    let mut out = String::new();
    let subset = if report.fraction < 1.0 {
        format!("top {:.0}% by first-layer feedback", report.fraction * 100.0)
    } else {
        "all scenes".to_string()
    };
    out.push_str(&format!(
        "blur response over {} ({} scenes{})\n",
        subset,
        report.scenes_used,
        if report.small_subset { ", small-subset warning" } else { "" }
    ));
    if !report.trained {
        out.push_str("warning: untrained parameters\n");
    }
    out.push_str(&format!("checkpoint {}\ndataset {}\n", report.checkpoint_digest, report.dataset_digest));
    let (ref_first, ref_last) = if report.fraction < 1.0 {
        (&REFERENCE_TOP10_FIRST, &REFERENCE_TOP10_LAST)
    } else {
        (&REFERENCE_FIRST_LAYER, &REFERENCE_LAST_LAYER)
    };
    out.push_str("kernel  first(toy)  first(ref)  last(toy)  last(ref)\n");
    for r in &report.rows {
        let rf = ref_first.iter().find(|(k, _)| *k == r.kernel).map(|(_, v)| *v);
        let rl = ref_last.iter().find(|(k, _)| *k == r.kernel).map(|(_, v)| *v);
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "{:<7} {:<11.4} {:<11} {:<10.4} {}\n",
            r.kernel,
            r.first_layer_mean,
            fmt(rf),
            r.last_layer_mean,
            fmt(rl)
        ));
    }
    out
}

pub fn info_gain_csv(curve: &InfoGainCurve, checkpoint_digest: &str, dataset_digest: &str) -> String {
    let mut out = String::new();
    out.push_str(&format!("# checkpoint {checkpoint_digest} dataset {dataset_digest}\n"));
    out.push_str("bin_lo,bin_hi,count,mean_ig,stderr,marks_log2_2,marks_log2_3\n");
    for b in &curve.bins {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            b.lo, b.hi, b.count, b.mean_ig, b.stderr, b.marks_two_way, b.marks_three_way
        ));
    }
    out
}
