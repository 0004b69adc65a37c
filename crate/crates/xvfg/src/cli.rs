//! Command-line interface: training, evaluation, generation, gradient
//! checking, ablation sweeps, and toy-dataset export.
//!
//! Flags override config-file values, which override defaults. Exit codes
//! are stable: 2 for configuration errors, 3 for data errors, 4 for
//! checkpoint integrity failures, 5 for gradient-check violations.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use indexmap::IndexMap;

use crate::data::{self, load_dataset, loader::export_pairs, loader::Layout};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::metrics::{self, ProbeClassifier, UniformProbe, METRIC_CSV_HEADER};
use crate::networks::{Ablation, DeformPlacement};
use crate::probe::ConvProbe;
use crate::trainer::{
    ablate, ablate_means, evaluate, restore, train, Direction, TrainConfig, ABLATE_CSV_HEADER,
};

#[derive(Parser)]
#[command(
    name = "xvfg",
    version,
    about = "Cross-view image synthesis: two-stage GAN with deformable convolution and attention"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the two-stage pipeline
    Train(TrainArgs),
    /// Evaluate a checkpoint and append a metrics CSV row
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite
    Gradcheck(GradcheckArgs),
    /// Train and evaluate ablation rows A through D
    Ablate(AblateArgs),
    /// Generate images from a checkpoint
    Generate(GenerateArgs),
    /// Write a procedural toy dataset to disk
    MakeToy(MakeToyArgs),
}

#[derive(Args)]
struct CommonTrainArgs {
    /// key=value config file; flags override file values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset: toy[:count[:start]] or a directory of pairs
    #[arg(long)]
    data: String,
    #[arg(long)]
    direction: Option<String>,
    /// Image size: 32, 64 or 256
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Stop after this many iterations
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonTrainArgs,
    /// Output directory for checkpoints, loss log and sample grids
    #[arg(long)]
    out: PathBuf,
    /// Ablation row: A, B, C or D
    #[arg(long)]
    ablation: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset: toy[:count[:start]] or a directory of pairs
    #[arg(long)]
    data: String,
    /// Metrics CSV to append to
    #[arg(long)]
    out: PathBuf,
    /// Probe classifier: "toy" (small conv net trained on the dataset) or
    /// "uniform"
    #[arg(long, default_value = "toy")]
    probe: String,
    #[arg(long, default_value_t = 777)]
    probe_seed: u64,
    #[arg(long, default_value_t = 200)]
    probe_iters: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    /// One of tensor, deform, attention, losses, all
    #[arg(long, default_value = "all")]
    module: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Harness self-test: run a deliberately wrong backward rule and expect
    /// the suite to flag it (exits 5)
    #[arg(long)]
    sabotage: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: CommonTrainArgs,
    /// Output directory for the ablation CSV
    #[arg(long)]
    out: PathBuf,
    /// Number of seeds (seed, seed+1, ...)
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Held-out dataset for evaluation; defaults to toy:16:1000
    #[arg(long)]
    eval_data: Option<String>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MakeToyArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    start: u64,
    /// side-by-side or split-folders
    #[arg(long, default_value = "side-by-side")]
    layout: String,
}

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders help/version on stdout with code 0 and usage
            // errors on stderr with code 2
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Gradcheck(args) => cmd_gradcheck(args),
        Cmd::Ablate(args) => cmd_ablate(args),
        Cmd::Generate(args) => cmd_generate(args),
        Cmd::MakeToy(args) => cmd_make_toy(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

// ── config file ─────────────────────────────────────────────────────────

/// Every key the config file accepts; unknown keys are rejected.
const CONFIG_KEYS: &[&str] = &[
    "direction",
    "size",
    "epochs",
    "batch_size",
    "seed",
    "ablation",
    "iterations",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "lambda",
    "lambda1",
    "lambda2",
    "lambda3",
    "lambda4",
    "lambda_tv",
    "depth",
    "base_channels",
    "feature_channels",
    "attention_reduction",
    "deform_placement",
    "checkpoint_every",
];

fn parse_config_file(path: &Path) -> Result<IndexMap<String, String>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut map = IndexMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "{}:{}: expected key=value, got {line:?}",
                path.display(),
                lineno + 1
            )));
        };
        let key = key.trim().to_string();
        if !CONFIG_KEYS.contains(&key.as_str()) {
            return Err(Error::Config(format!(
                "{}:{}: unknown key {key:?}",
                path.display(),
                lineno + 1
            )));
        }
        map.insert(key, value.trim().to_string());
    }
    Ok(map)
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

/// Defaults, then config file, then flags.
fn build_train_config(
    common: &CommonTrainArgs,
    ablation_flag: Option<&str>,
    out_dir: Option<PathBuf>,
) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut ablation = cfg.ablation;
    if let Some(path) = &common.config {
        let map = parse_config_file(path)?;
        for (key, value) in &map {
            match key.as_str() {
                "direction" => cfg.direction = Direction::parse(value)?,
                "size" => cfg.size = parse_as(key, value)?,
                "epochs" => cfg.epochs = parse_as(key, value)?,
                "batch_size" => cfg.batch_size = parse_as(key, value)?,
                "seed" => cfg.seed = parse_as(key, value)?,
                "ablation" => ablation = Ablation::parse(value)?,
                "iterations" => cfg.max_iterations = Some(parse_as(key, value)?),
                "lr" => cfg.lr = parse_as(key, value)?,
                "beta1" => cfg.beta1 = parse_as(key, value)?,
                "beta2" => cfg.beta2 = parse_as(key, value)?,
                "adam_eps" => cfg.adam_eps = parse_as(key, value)?,
                "lambda" => cfg.weights.stage2_weight = parse_as(key, value)?,
                "lambda1" => cfg.weights.pixel[0] = parse_as(key, value)?,
                "lambda2" => cfg.weights.pixel[1] = parse_as(key, value)?,
                "lambda3" => cfg.weights.pixel[2] = parse_as(key, value)?,
                "lambda4" => cfg.weights.pixel[3] = parse_as(key, value)?,
                "lambda_tv" => cfg.weights.tv_weight = parse_as(key, value)?,
                "depth" => cfg.net.depth = parse_as(key, value)?,
                "base_channels" => cfg.net.base_channels = parse_as(key, value)?,
                "feature_channels" => cfg.net.feature_channels = parse_as(key, value)?,
                "attention_reduction" => cfg.net.attention_reduction = parse_as(key, value)?,
                "deform_placement" => {
                    cfg.net.deform_placement = match value.as_str() {
                        "first-encoder" => DeformPlacement::FirstEncoder,
                        "last-decoder" => DeformPlacement::LastDecoder,
                        _ => {
                            return Err(Error::Config(format!(
                                "bad deform_placement {value:?}; expected first-encoder or last-decoder"
                            )))
                        }
                    }
                }
                "checkpoint_every" => cfg.checkpoint_every = parse_as(key, value)?,
                _ => unreachable!("key list enforced above"),
            }
        }
    }
    if let Some(d) = &common.direction {
        cfg.direction = Direction::parse(d)?;
    }
    if let Some(v) = common.size {
        cfg.size = v;
    }
    if let Some(v) = common.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = common.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = common.seed {
        cfg.seed = v;
    }
    if let Some(v) = common.iterations {
        cfg.max_iterations = Some(v);
    }
    if let Some(a) = ablation_flag {
        ablation = Ablation::parse(a)?;
    }
    let keep_weights = cfg.weights;
    cfg = cfg.with_ablation(ablation);
    cfg.weights.stage2_weight = keep_weights.stage2_weight;
    cfg.weights.pixel = keep_weights.pixel;
    cfg.weights.tv_weight = keep_weights.tv_weight;
    cfg.out_dir = out_dir;
    cfg.validate()?;
    Ok(cfg)
}

// ── commands ────────────────────────────────────────────────────────────

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = build_train_config(&args.common, args.ablation.as_deref(), Some(args.out.clone()))?;
    let dataset = load_dataset(&args.common.data, cfg.size)?;
    let outcome = train(&cfg, &dataset)?;
    if let Some(path) = &outcome.final_checkpoint {
        println!("final checkpoint: {}", path.display());
    }
    println!(
        "trained {} iterations; final total loss {:.4}",
        outcome.loss_log.len(),
        outcome.loss_log.last().map(|r| r.total).unwrap_or(f64::NAN)
    );
    Ok(())
}

fn build_probe(
    kind: &str,
    dataset: &[data::PairedSample],
    direction: Direction,
    seed: u64,
    iters: usize,
) -> Result<Box<dyn ProbeClassifier>> {
    match kind {
        "uniform" => Ok(Box::new(UniformProbe {
            classes: data::NUM_CLASSES,
        })),
        "toy" => Ok(Box::new(ConvProbe::from_samples(
            dataset,
            direction == Direction::A2g,
            seed,
            iters,
        )?)),
        _ => Err(Error::Config(format!(
            "unknown probe {kind:?}; expected toy or uniform"
        ))),
    }
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (bank, model, cfg) = restore(&args.checkpoint)?;
    let dataset = load_dataset(&args.data, cfg.size)?;
    if dataset.is_empty() {
        return Err(Error::Data(format!("no samples in {:?}", args.data)));
    }
    let probe = build_probe(
        &args.probe,
        &dataset,
        cfg.direction,
        args.probe_seed,
        args.probe_iters,
    )?;
    let report = evaluate(&bank, &model, &cfg, &dataset, probe.as_ref())?;
    let fmt = metrics::format_metric_value;
    let row = format!(
        "{},{},{},{},{},{},{},{},{}",
        cfg.ablation.method_string(),
        cfg.direction,
        cfg.size,
        fmt(report.refined.ssim),
        fmt(report.refined.psnr),
        fmt(report.refined.kl_mean),
        fmt(report.refined.kl_std),
        fmt(report.refined.top1),
        fmt(report.refined.top5),
    );
    append_csv_row(&args.out, METRIC_CSV_HEADER, &row)?;
    println!("refined: {row}");
    println!(
        "coarse (stage 1): ssim {} psnr {} kl {} {} top1 {} top5 {}",
        fmt(report.coarse.ssim),
        fmt(report.coarse.psnr),
        fmt(report.coarse.kl_mean),
        fmt(report.coarse.kl_std),
        fmt(report.coarse.top1),
        fmt(report.coarse.top5),
    );
    Ok(())
}

fn append_csv_row(path: &Path, header: &str, row: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    let fresh = !path.exists();
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if fresh {
        writeln!(file, "{header}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    writeln!(file, "{row}").map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    if args.sabotage {
        let report = gradcheck::run_sabotaged(args.seed)?;
        println!("{report}");
        return Err(Error::GradCheck(format!(
            "sabotaged rule detected as intended: {} rel err {:.3e} at {}[{}]",
            report.op, report.max_rel_err, report.worst_param, report.worst_index
        )));
    }
    let reports = if args.module == "all" {
        gradcheck::run_all(args.seed)?
    } else {
        gradcheck::run_module(gradcheck::Module::parse(&args.module)?, args.seed)?
    };
    let mut failures = Vec::new();
    for report in &reports {
        println!("{report}");
        if !report.pass {
            failures.push(format!(
                "{} rel err {:.3e} at {}[{}]",
                report.op, report.max_rel_err, report.worst_param, report.worst_index
            ));
        }
    }
    if failures.is_empty() {
        println!("all {} ops within {:.0e}", reports.len(), gradcheck::TOLERANCE);
        Ok(())
    } else {
        Err(Error::GradCheck(failures.join("; ")))
    }
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let cfg = build_train_config(&args.common, None, None)?;
    let train_set = load_dataset(&args.common.data, cfg.size)?;
    let eval_spec = args.eval_data.as_deref().unwrap_or("toy:16:1000");
    let eval_set = load_dataset(eval_spec, cfg.size)?;
    if eval_set.is_empty() {
        return Err(Error::Data(format!("no samples in {eval_spec:?}")));
    }
    let probe = build_probe("toy", &eval_set, cfg.direction, 777, 200)?;
    let seeds: Vec<u64> = (0..args.seeds).map(|i| cfg.seed + i).collect();
    let rows = ablate(&cfg, &train_set, &eval_set, probe.as_ref(), &seeds)?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Error::io(args.out.display().to_string(), e))?;
    let path = args.out.join("ablation.csv");
    let mut csv = String::from(ABLATE_CSV_HEADER);
    csv.push('\n');
    for row in &rows {
        csv.push_str(&row.to_csv());
        csv.push('\n');
    }
    for mean in ablate_means(&rows) {
        csv.push_str(&format!(
            "{},{},mean,{},{}\n",
            mean.baseline,
            mean.method,
            metrics::format_metric_value(mean.psnr),
            metrics::format_metric_value(mean.ssim)
        ));
    }
    std::fs::write(&path, &csv).map_err(|e| Error::io(path.display().to_string(), e))?;
    print!("{csv}");
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let (bank, model, cfg) = restore(&args.checkpoint)?;
    let dataset = load_dataset(&args.data, cfg.size)?;
    if dataset.is_empty() {
        return Err(Error::Data(format!("no samples in {:?}", args.data)));
    }
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Error::io(args.out.display().to_string(), e))?;
    for sample in &dataset {
        let mut s = crate::optim::Session::new();
        let (source, target) = match cfg.direction {
            Direction::A2g => (&sample.aerial, &sample.ground),
            Direction::G2a => (&sample.ground, &sample.aerial),
        };
        let src = crate::tape::Var::constant(source.clone());
        let sem = crate::tape::Var::constant(sample.ground_semantic_color.clone());
        let s1 = crate::networks::stage1(&mut s, &bank, &model, &src, &sem)?;
        let s2 = crate::networks::stage2(&mut s, &bank, &model, &src, &s1)?;
        let grid = data::image::image_grid(&[vec![
            source,
            &s1.coarse.value,
            &s2.refined.value,
            target,
        ]])?;
        data::image::encode_image(&grid, &args.out.join(format!("{}_grid.ppm", sample.id)))?;
        data::image::encode_image(
            &s2.refined.value,
            &args.out.join(format!("{}_refined.ppm", sample.id)),
        )?;
    }
    println!("wrote {} grids to {}", dataset.len(), args.out.display());
    Ok(())
}

fn cmd_make_toy(args: MakeToyArgs) -> Result<()> {
    let layout = Layout::parse(&args.layout)?;
    let samples = data::toy_dataset(args.start, args.count, args.size)?;
    export_pairs(&args.out, layout, &samples)?;
    println!(
        "wrote {} pairs ({}x{}) to {}",
        samples.len(),
        args.size,
        args.size,
        args.out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_rejects_unknown_keys() {
        let dir = std::env::temp_dir().join("xvfg_cli_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.cfg");
        std::fs::write(&path, "epochs=3\nbogus_key=1\n").unwrap();
        let err = parse_config_file(&path).unwrap_err();
        assert!(err.to_string().contains("bogus_key"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn config_file_parses_comments_and_values() {
        let dir = std::env::temp_dir().join("xvfg_cli_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("good.cfg");
        std::fs::write(&path, "# comment\n\nepochs = 7\nlambda_tv=1e-6\nablation=B\n").unwrap();
        let map = parse_config_file(&path).unwrap();
        assert_eq!(map.get("epochs").unwrap(), "7");
        assert_eq!(map.get("lambda_tv").unwrap(), "1e-6");
    }

    #[test]
    fn flags_override_config_file() {
        let dir = std::env::temp_dir().join("xvfg_cli_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("precedence.cfg");
        std::fs::write(&path, "epochs=7\nseed=3\nablation=A\n").unwrap();
        let common = CommonTrainArgs {
            config: Some(path),
            data: "toy:4".into(),
            direction: None,
            size: None,
            epochs: Some(2),
            batch_size: None,
            seed: None,
            iterations: None,
        };
        let cfg = build_train_config(&common, Some("C"), None).unwrap();
        assert_eq!(cfg.epochs, 2); // flag wins
        assert_eq!(cfg.seed, 3); // file wins over default
        assert_eq!(cfg.ablation, Ablation::C); // flag wins
        let (am, dc, ls) = cfg.ablation.toggles();
        assert_eq!((am, dc, ls), (true, true, false));
        assert!(!cfg.weights.semantic_adv);
    }
}
