// Calibration probe for the synthetic benchmark: trains selected ablation
// modes on the mixed-blur scene mix and reports the quantities the
// acceptance gate checks. Not part of the documented example set.

use flex::analysis::{blur_response, info_gain_curve, quartile_means, top_fraction_blur_response};
use flex::feedback::WeightParameterization;
use flex::model::{AblationMode, ModelConfig};
use flex::preclass::Hyperparams;
use flex::synthgen::{blur_image, synth_scene, scene_seed, BlurSpec, SynthConfig};
use flex::trainer::{train, LoadedScene, TrainConfig, default_milestones};
use std::time::Instant;

fn scene_config() -> SynthConfig {
    SynthConfig {
        image_size: 64,
        classes: 6,
        min_objects: 1,
        max_objects: 3,
        min_size: 8.0,
        max_size: 40.0,
    }
}

fn make_split(base_seed: u64, per_blur: usize, blurs: &[usize]) -> Vec<LoadedScene> {
    let cfg = scene_config();
    let mut scenes = Vec::new();
    for (bi, &b) in blurs.iter().enumerate() {
        let spec = BlurSpec::new(b).unwrap();
        for i in 0..per_blur {
            let s = synth_scene(scene_seed(base_seed + bi as u64 * 1000, i), &cfg).unwrap();
            let image = blur_image(&s.image, spec).unwrap();
            scenes.push(LoadedScene { image, annotations: s.annotations });
        }
    }
    scenes
}

fn clean_split(base_seed: u64, n: usize) -> Vec<LoadedScene> {
    let cfg = scene_config();
    (0..n)
        .map(|i| {
            let s = synth_scene(scene_seed(base_seed, i), &cfg).unwrap();
            LoadedScene { image: s.image, annotations: s.annotations }
        })
        .collect()
}

fn model(ablation: AblationMode, p: WeightParameterization, depth: usize) -> ModelConfig {
    ModelConfig {
        hyper: Hyperparams { delta: 8.0, ..Default::default() },
        channels: 64,
        classes: 6,
        grid: 7,
        head_hidden: 256,
        ablation,
        parameterization: p,
        cascade_depth: depth,
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let modes: Vec<&str> = if args.len() > 1 {
        args[1].split(',').collect()
    } else {
        vec!["baseline", "multi-level", "cls", "cls-img"]
    };
    let seeds: Vec<u64> = if args.len() > 2 {
        args[2].split(',').map(|s| s.parse().unwrap()).collect()
    } else {
        vec![0]
    };
    let epochs: usize = if args.len() > 3 { args[3].parse().unwrap() } else { 12 };

    let blurs = [1usize, 5, 9, 15];
    let train_scenes = make_split(500, 20, &blurs);
    let eval_scenes = make_split(900, 12, &blurs);
    println!("train {} scenes, eval {} scenes", train_scenes.len(), eval_scenes.len());

    for mode in &modes {
        for &seed in &seeds {
            let (ablation, p, depth) = match *mode {
                "baseline" => (AblationMode::Baseline, WeightParameterization::Interpolation, 1),
                "multi-level" => (AblationMode::MultiLevel, WeightParameterization::Interpolation, 1),
                "cls" => (AblationMode::ClassFeedback, WeightParameterization::Interpolation, 1),
                "cls-img" => (AblationMode::Full, WeightParameterization::Interpolation, 1),
                "direct" => (AblationMode::Full, WeightParameterization::Direct, 1),
                "gaussian" => (AblationMode::Full, WeightParameterization::Gaussian, 1),
                "cascade2" => (AblationMode::Full, WeightParameterization::Interpolation, 2),
                "cascade3" => (AblationMode::Full, WeightParameterization::Interpolation, 3),
                other => panic!("unknown mode {other}"),
            };
            let cfg = TrainConfig {
                epochs,
                batch_size: 8,
                learning_rate: 0.01,
                milestones: default_milestones(epochs),
                seed,
                proposals_per_gt: 2,
                model: model(ablation, p, depth),
                ..Default::default()
            };
            let t0 = Instant::now();
            let result = train(&cfg, &train_scenes, &eval_scenes).unwrap();
            let dt = t0.elapsed().as_secs_f64();
            let last = result.rows.last().unwrap();
            println!(
                "{mode} seed {seed}: mAP {:.4} AP50 {:.4} AP75 {:.4} loss {:.4} fallbacks {} ({:.0} s)",
                last.eval.map, last.eval.ap50, last.eval.ap75, last.loss_total, last.eval.fallbacks, dt
            );

            if *mode == "cls-img" {
                let clean = clean_split(1300, 48);
                let rows = blur_response(&result.params, &clean, &[1, 5, 9, 21]).unwrap();
                for r in &rows {
                    println!("  blur {:>2}: first {:.4} last {:.4}", r.kernel, r.first_layer_mean, r.last_layer_mean);
                }
                let (top_rows, kept) = top_fraction_blur_response(&result.params, &clean, 0.1, &[1, 21]).unwrap();
                let full_drop = rows[0].first_layer_mean - rows[3].first_layer_mean;
                let top_drop = top_rows[0].first_layer_mean - top_rows[1].first_layer_mean;
                println!("  top-{kept} drop {top_drop:.4} vs full drop {full_drop:.4}");
                let curve = info_gain_curve(&result.params, &eval_scenes, 16, 77).unwrap();
                if let Some((low, high)) = quartile_means(&curve.pairs) {
                    println!("  IG quartiles: low {low:.4} high {high:.4} ({} rois)", curve.pairs.len());
                }
            }
        }
    }
}
