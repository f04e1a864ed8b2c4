//! Command-line entry points: dataset synthesis, training, evaluation, and
//! the blur / top-fraction / information-gain analyses.
//!
//! Exit codes: 0 success, 1 usage, 2 data/config error, 3 numeric failure.
//! Flag precedence: flags > config file > defaults. All randomness flows
//! from the single `--seed`.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use crate::analysis::{
    blur_report_csv, blur_report_summary, blur_response, info_gain_csv, info_gain_curve,
    quartile_means, top_fraction_blur_response, BlurReport,
};
use crate::config::RunConfig;
use crate::error::{FlexError, Result};
use crate::model::FlexParams;
use crate::synthgen::{build_dataset, hex_digest, load_dataset, BlurSpec, DatasetIndex};
use crate::trainer::{evaluate_scenes, load_checkpoint, load_scenes, save_checkpoint, train, LoadedScene};

#[derive(Debug, Parser)]
#[command(
    name = "flex",
    version,
    about = "Feedback-refined multi-level ROI feature extraction on a synthetic detection benchmark",
    after_help = "Flag precedence: flags > --config file > built-in defaults."
)]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Master seed for every random choice in the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker cap. Execution is sequential; results never depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint plus a metrics CSV.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Run a trained-model analysis.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of scenes to generate.
    #[arg(long)]
    pub scenes: Option<usize>,
    /// Odd mean-kernel size applied to every image (1 = no blur).
    #[arg(long)]
    pub blur: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub min_objects: Option<usize>,
    #[arg(long)]
    pub max_objects: Option<usize>,
    #[arg(long)]
    pub min_size: Option<f64>,
    #[arg(long)]
    pub max_size: Option<f64>,
    /// Output dataset directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training dataset directory (repeatable).
    #[arg(long = "dataset", value_name = "DIR")]
    pub datasets: Vec<PathBuf>,
    /// Held-out dataset directory (repeatable; defaults to the training sets).
    #[arg(long = "eval-dataset", value_name = "DIR")]
    pub eval_datasets: Vec<PathBuf>,
    /// Output directory for checkpoint, metrics, and metadata.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// baseline | multi-level | cls | cls-img
    #[arg(long)]
    pub ablation: Option<String>,
    /// direct | gaussian | interpolation
    #[arg(long)]
    pub parameterization: Option<String>,
    /// Number of refinement layers (1 = single refine).
    #[arg(long)]
    pub cascade_depth: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long = "dataset", value_name = "DIR")]
    pub datasets: Vec<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Mean image feedback of the first and last level under blur.
    Blur(BlurArgs),
    /// Blur response restricted to the scenes with the largest first-level
    /// image feedback.
    Top(TopArgs),
    /// Information gain of refinement, binned by pre-classification entropy.
    Ig(IgArgs),
}

#[derive(Debug, Args)]
pub struct BlurArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Clean-scene dataset directory.
    #[arg(long = "dataset", value_name = "DIR")]
    pub datasets: Vec<PathBuf>,
    /// Comma-separated odd kernel sizes.
    #[arg(long, default_value = "1,5,9,21")]
    pub kernels: String,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TopArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long = "dataset", value_name = "DIR")]
    pub datasets: Vec<PathBuf>,
    /// Fraction of scenes to keep, ranked by first-level feedback.
    #[arg(long, default_value_t = 0.1)]
    pub fraction: f64,
    #[arg(long, default_value = "1,5,9,21")]
    pub kernels: String,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IgArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long = "dataset", value_name = "DIR")]
    pub datasets: Vec<PathBuf>,
    /// Number of uniform entropy bins over [0, log2 K].
    #[arg(long, default_value_t = 16)]
    pub bins: usize,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

/// Parse argv and run; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(FlexError::Usage("--threads must be at least 1".into()));
        }
        config.threads = threads;
    }
    match cli.command {
        Command::Synth(args) => cmd_synth(config, args),
        Command::Train(args) => cmd_train(config, args),
        Command::Eval(args) => cmd_eval(config, args),
        Command::Analyze(what) => match what {
            AnalyzeCommand::Blur(args) => cmd_analyze_blur(config, args),
            AnalyzeCommand::Top(args) => cmd_analyze_top(config, args),
            AnalyzeCommand::Ig(args) => cmd_analyze_ig(config, args),
        },
    }
}

fn cmd_synth(mut config: RunConfig, args: SynthArgs) -> Result<()> {
    if let Some(v) = args.scenes {
        config.synth.scenes = v;
    }
    if let Some(v) = args.blur {
        config.synth.blur = v;
    }
    if let Some(v) = args.image_size {
        config.synth.image_size = v;
    }
    if let Some(v) = args.classes {
        config.synth.classes = v;
    }
    if let Some(v) = args.min_objects {
        config.synth.min_objects = v;
    }
    if let Some(v) = args.max_objects {
        config.synth.max_objects = v;
    }
    if let Some(v) = args.min_size {
        config.synth.min_size = v;
    }
    if let Some(v) = args.max_size {
        config.synth.max_size = v;
    }
    let spec = BlurSpec::new(config.synth.blur)?;
    let synth_cfg = config.synth.to_synth_config();
    let index = build_dataset(config.synth.scenes, spec, config.seed, &synth_cfg, &args.out)?;
    println!("dataset index: {}", index.index_path().display());
    println!("dataset digest: {}", index.digest()?);
    Ok(())
}

fn load_indices(paths: &[PathBuf]) -> Result<Vec<DatasetIndex>> {
    paths.iter().map(|p| load_dataset(p)).collect()
}

fn dataset_paths(flag: &[PathBuf], from_config: &[String]) -> Vec<PathBuf> {
    if flag.is_empty() {
        from_config.iter().map(PathBuf::from).collect()
    } else {
        flag.to_vec()
    }
}

fn combined_digest(indices: &[DatasetIndex]) -> Result<String> {
    let mut all = String::new();
    for idx in indices {
        all.push_str(&idx.digest()?);
        all.push('\n');
    }
    Ok(hex_digest(all.as_bytes()))
}

fn write_meta(dir: &Path, config: &RunConfig, what: &str) -> Result<()> {
    let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let meta = format!(
        "command {what}\nconfig_digest {}\ntimestamp {ts}\n",
        config.digest()
    );
    std::fs::write(dir.join("run_meta.txt"), meta)?;
    Ok(())
}

fn cmd_train(mut config: RunConfig, args: TrainArgs) -> Result<()> {
    if let Some(v) = &args.ablation {
        config.train.ablation = v.clone();
    }
    if let Some(v) = &args.parameterization {
        config.train.parameterization = v.clone();
    }
    if let Some(v) = args.cascade_depth {
        config.train.cascade_depth = v;
    }
    if let Some(v) = args.gamma {
        config.model.gamma = v;
    }
    if let Some(v) = args.sigma {
        config.model.sigma = v;
    }
    if let Some(v) = args.delta {
        config.model.delta = v;
    }
    if let Some(v) = args.epochs {
        config.train.epochs = v;
    }
    if let Some(v) = args.batch_size {
        config.train.batch_size = v;
    }
    if let Some(v) = args.lr {
        config.train.learning_rate = v;
    }
    let train_paths = dataset_paths(&args.datasets, &config.paths.datasets);
    if train_paths.is_empty() {
        return Err(FlexError::Usage("no training dataset given (use --dataset)".into()));
    }
    let eval_paths = {
        let p = dataset_paths(&args.eval_datasets, &config.paths.eval_datasets);
        if p.is_empty() {
            train_paths.clone()
        } else {
            p
        }
    };
    let out = args
        .out
        .or_else(|| {
            if config.paths.output.is_empty() {
                None
            } else {
                Some(PathBuf::from(&config.paths.output))
            }
        })
        .ok_or_else(|| FlexError::Usage("no output directory given (use --out)".into()))?;

    let train_cfg = config.to_train_config()?;
    let train_idx = load_indices(&train_paths)?;
    let eval_idx = load_indices(&eval_paths)?;
    let train_scenes = load_scenes(&train_idx, train_cfg.model.classes)?;
    let eval_scenes = load_scenes(&eval_idx, train_cfg.model.classes)?;

    let result = train(&train_cfg, &train_scenes, &eval_scenes)?;

    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("metrics.csv"), result.csv())?;
    save_checkpoint(&out.join("model.ckpt"), &result.params, train_cfg.epochs, &config.digest())?;
    write_meta(&out, &config, "train")?;
    let last = result.rows.last();
    println!("checkpoint: {}", out.join("model.ckpt").display());
    println!("metrics: {}", out.join("metrics.csv").display());
    if let Some(row) = last {
        println!(
            "final epoch {}: loss {:.4}, mAP {:.4}, AP50 {:.4}, AP75 {:.4}, fallbacks {}",
            row.epoch, row.loss_total, row.eval.map, row.eval.ap50, row.eval.ap75, row.eval.fallbacks
        );
    }
    Ok(())
}

struct LoadedCheckpoint {
    params: FlexParams,
    trained: bool,
    digest: String,
}

fn load_checkpoint_arg(arg: &Option<PathBuf>, config: &RunConfig) -> Result<LoadedCheckpoint> {
    let path = match arg {
        Some(p) => p.clone(),
        None if !config.paths.checkpoint.is_empty() => PathBuf::from(&config.paths.checkpoint),
        None => return Err(FlexError::Usage("no checkpoint given (use --checkpoint)".into())),
    };
    if !path.exists() {
        return Err(FlexError::Usage(format!("checkpoint {} does not exist", path.display())));
    }
    let bytes = std::fs::read(&path)?;
    let digest = hex_digest(&bytes);
    let (params, meta) = load_checkpoint(&path)?;
    Ok(LoadedCheckpoint { params, trained: meta.trained_epochs > 0, digest })
}

fn load_eval_scenes(
    args_datasets: &[PathBuf],
    config: &RunConfig,
    classes: usize,
) -> Result<(Vec<LoadedScene>, String)> {
    let paths = dataset_paths(args_datasets, &config.paths.datasets);
    if paths.is_empty() {
        return Err(FlexError::Usage("no dataset given (use --dataset)".into()));
    }
    let indices = load_indices(&paths)?;
    let digest = combined_digest(&indices)?;
    Ok((load_scenes(&indices, classes)?, digest))
}

fn out_dir(arg: Option<PathBuf>, config: &RunConfig) -> Result<PathBuf> {
    let dir = arg.unwrap_or_else(|| {
        PathBuf::from(if config.paths.output.is_empty() { "out" } else { &config.paths.output })
    });
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn cmd_eval(config: RunConfig, args: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint_arg(&args.checkpoint, &config)?;
    let (scenes, dataset_digest) = load_eval_scenes(&args.datasets, &config, ckpt.params.config.classes)?;
    let report = evaluate_scenes(&ckpt.params, &scenes, config.seed)?;
    let dir = out_dir(args.out, &config)?;
    let mut csv = format!(
        "# checkpoint {} dataset {} config {}\n",
        ckpt.digest,
        dataset_digest,
        config.digest()
    );
    csv.push_str("mAP,AP50,AP75,fallbacks");
    for c in 0..report.per_class_ap.len() {
        csv.push_str(&format!(",class{c}"));
    }
    csv.push('\n');
    csv.push_str(&format!("{},{},{},{}", report.map, report.ap50, report.ap75, report.fallbacks));
    for ap in &report.per_class_ap {
        csv.push_str(&format!(",{ap}"));
    }
    csv.push('\n');
    let path = dir.join("eval.csv");
    std::fs::write(&path, csv)?;
    write_meta(&dir, &config, "eval")?;
    println!("mAP {:.4}  AP50 {:.4}  AP75 {:.4}  fallbacks {}", report.map, report.ap50, report.ap75, report.fallbacks);
    println!("report: {}", path.display());
    Ok(())
}

fn parse_kernels(text: &str) -> Result<Vec<usize>> {
    let kernels: Vec<usize> = text
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| FlexError::Usage(format!("bad kernel size `{t}`")))
        })
        .collect::<Result<_>>()?;
    if kernels.is_empty() {
        return Err(FlexError::Usage("no kernel sizes given".into()));
    }
    for &k in &kernels {
        BlurSpec::new(k)?;
    }
    Ok(kernels)
}

fn kernels_tag(kernels: &[usize]) -> String {
    kernels.iter().map(|k| k.to_string()).collect::<Vec<_>>().join("-")
}

fn cmd_analyze_blur(config: RunConfig, args: BlurArgs) -> Result<()> {
    let ckpt = load_checkpoint_arg(&args.checkpoint, &config)?;
    let (scenes, dataset_digest) = load_eval_scenes(&args.datasets, &config, ckpt.params.config.classes)?;
    let kernels = parse_kernels(&args.kernels)?;
    let rows = blur_response(&ckpt.params, &scenes, &kernels)?;
    let report = BlurReport {
        rows,
        fraction: 1.0,
        scenes_used: scenes.len(),
        small_subset: scenes.len() < 10,
        trained: ckpt.trained,
        checkpoint_digest: ckpt.digest.clone(),
        dataset_digest,
    };
    let dir = out_dir(args.out, &config)?;
    let stem = format!("blur_{}_k{}", &ckpt.digest[..8], kernels_tag(&kernels));
    std::fs::write(dir.join(format!("{stem}.csv")), blur_report_csv(&report))?;
    std::fs::write(dir.join(format!("{stem}.txt")), blur_report_summary(&report))?;
    write_meta(&dir, &config, "analyze-blur")?;
    print!("{}", blur_report_summary(&report));
    println!("report: {}", dir.join(format!("{stem}.csv")).display());
    Ok(())
}

fn cmd_analyze_top(config: RunConfig, args: TopArgs) -> Result<()> {
    let ckpt = load_checkpoint_arg(&args.checkpoint, &config)?;
    let (scenes, dataset_digest) = load_eval_scenes(&args.datasets, &config, ckpt.params.config.classes)?;
    let kernels = parse_kernels(&args.kernels)?;
    let (rows, kept) = top_fraction_blur_response(&ckpt.params, &scenes, args.fraction, &kernels)?;
    let report = BlurReport {
        rows,
        fraction: args.fraction,
        scenes_used: kept,
        small_subset: kept < 10,
        trained: ckpt.trained,
        checkpoint_digest: ckpt.digest.clone(),
        dataset_digest,
    };
    let dir = out_dir(args.out, &config)?;
    let stem = format!("top_{}_f{}_k{}", &ckpt.digest[..8], args.fraction, kernels_tag(&kernels));
    std::fs::write(dir.join(format!("{stem}.csv")), blur_report_csv(&report))?;
    std::fs::write(dir.join(format!("{stem}.txt")), blur_report_summary(&report))?;
    write_meta(&dir, &config, "analyze-top")?;
    print!("{}", blur_report_summary(&report));
    println!("report: {}", dir.join(format!("{stem}.csv")).display());
    Ok(())
}

fn cmd_analyze_ig(config: RunConfig, args: IgArgs) -> Result<()> {
    let ckpt = load_checkpoint_arg(&args.checkpoint, &config)?;
    let (scenes, dataset_digest) = load_eval_scenes(&args.datasets, &config, ckpt.params.config.classes)?;
    let curve = info_gain_curve(&ckpt.params, &scenes, args.bins, config.seed)?;
    let dir = out_dir(args.out, &config)?;
    let stem = format!("ig_{}_b{}", &ckpt.digest[..8], args.bins);
    std::fs::write(dir.join(format!("{stem}.csv")), info_gain_csv(&curve, &ckpt.digest, &dataset_digest))?;
    write_meta(&dir, &config, "analyze-ig")?;
    if let Some((low, high)) = quartile_means(&curve.pairs) {
        println!(
            "mean IG: bottom entropy quartile {:.4}, top quartile {:.4} ({} ROIs)",
            low,
            high,
            curve.pairs.len()
        );
    }
    println!("report: {}", dir.join(format!("{stem}.csv")).display());
    Ok(())
}
