// Learning-rate / batch-size probe on the baseline ablation.
use flex::model::{AblationMode, ModelConfig};
use flex::feedback::WeightParameterization;
use flex::preclass::Hyperparams;
use flex::synthgen::{blur_image, synth_scene, scene_seed, BlurSpec, SynthConfig};
use flex::trainer::{train, LoadedScene, TrainConfig, default_milestones};

fn scene_config() -> SynthConfig {
    SynthConfig { image_size: 64, classes: 6, min_objects: 1, max_objects: 3, min_size: 8.0, max_size: 40.0 }
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

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args[1].parse().unwrap();
    let batch: usize = args[2].parse().unwrap();
    let epochs: usize = args[3].parse().unwrap();
    let mode = if args.len() > 4 { args[4].clone() } else { "baseline".to_string() };

    let blurs = [1usize, 5, 9, 15];
    let train_scenes = make_split(500, 20, &blurs);
    let eval_scenes = make_split(900, 12, &blurs);
    let ablation = match mode.as_str() {
        "baseline" => AblationMode::Baseline,
        "multi-level" => AblationMode::MultiLevel,
        "cls" => AblationMode::ClassFeedback,
        _ => AblationMode::Full,
    };
    let cfg = TrainConfig {
        epochs,
        batch_size: batch,
        learning_rate: lr,
        milestones: default_milestones(epochs),
        seed: 0,
        proposals_per_gt: 2,
        model: ModelConfig {
            hyper: Hyperparams { delta: 8.0, ..Default::default() },
            ablation,
            parameterization: WeightParameterization::Interpolation,
            ..Default::default()
        },
        ..Default::default()
    };
    let result = train(&cfg, &train_scenes, &eval_scenes).unwrap();
    for r in &result.rows {
        println!(
            "epoch {:>2}: loss {:.4} (reg {:.3} pre {:.3} ref {:.3}) mAP {:.4} AP50 {:.4}",
            r.epoch, r.loss_total, r.loss_reg, r.loss_cls_pre, r.loss_cls_refine, r.eval.map, r.eval.ap50
        );
    }
}
