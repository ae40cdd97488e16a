//! The `fbnet` command line.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use crate::ablation::{run_ablation, Arm};
use crate::backbone::Model;
use crate::data::{netpbm, read_split, write_split, CamoConfig};
use crate::error::{Error, Result};
use crate::fbnet::Stage;
use crate::gradcheck;
use crate::metrics::dilution_probe;
use crate::train::{evaluate, train, LogRow, TrainConfig};
use crate::visualize::heatmap;

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const CONFIG_FILE: &str = "config.json";
pub const MODEL_FILE: &str = "model.fbn";
pub const LOG_FILE: &str = "train_log.csv";

#[derive(Debug, Parser)]
#[command(
    name = "fbnet",
    version,
    about = "Block-wise supervision and feature modulation for small-object segmentation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a split of the synthetic camouflage benchmark.
    GenData(GenDataArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a trained run on a dataset split.
    Eval(EvalArgs),
    /// Finite-difference check of all gradients.
    Gradcheck(GradcheckArgs),
    /// Gradient dilution table for point-wise vs block-wise supervision.
    Dilution(DilutionArgs),
    /// Train and evaluate the four component arms over several seeds.
    Ablate(AblateArgs),
    /// Colour-mapped channel mean of the modulated features.
    Visualize(VisualizeArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Generator config (JSON); defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Overwrite an existing split or a dataset made with another config.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Training config (JSON); defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Train the plain backbone without any block.
    #[arg(long, conflicts_with = "inject")]
    pub no_fbnet: bool,
    /// Stages that receive a block, e.g. `res4,res5`.
    #[arg(long, value_delimiter = ',')]
    pub inject: Option<Vec<Stage>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "train")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Output directory of a `train` run.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Checkpoint inside or outside the run (defaults to the final model).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DilutionArgs {
    #[arg(long)]
    pub stride: usize,
    /// CSV file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// Base training config (JSON); each arm rewrites only its block setup.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "val")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Training config of the checkpoint (defaults to `config.json` beside it).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input image (binary PPM).
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value = "res5")]
    pub stage: Stage,
    /// Heatmap PPM to write.
    #[arg(long)]
    pub out: PathBuf,
}

/// Process exit status for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Argument(_) => EXIT_USAGE,
        Error::Config(_) | Error::Data(_) | Error::Parse { .. } | Error::Io { .. } | Error::Json(_) => EXIT_DATA,
        Error::Numeric(_) | Error::Shape(_) => EXIT_NUMERIC,
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn create_parent(file: &Path) -> Result<()> {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Dilution(a) => dilution_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Visualize(a) => visualize_cmd(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let config: CamoConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => CamoConfig::default(),
    };
    let manifest = write_split(&a.out, &a.split, &config, a.count, a.force)?;
    println!("{}", serde_json::to_string_pretty(&manifest)?);
    Ok(())
}

/// Resolves the training config from a file plus command-line overrides.
pub fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if a.no_fbnet {
        cfg.model.inject.clear();
    }
    if let Some(stages) = &a.inject {
        let mut stages = stages.clone();
        stages.sort();
        stages.dedup();
        cfg.model.inject = stages;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = resolve_train_config(&a)?;
    let samples = read_split(&a.data, &a.split)?;
    create_dir(&a.out)?;
    let resolved = serde_json::to_string_pretty(&cfg)? + "\n";
    print!("{resolved}");
    write_text(&a.out.join(CONFIG_FILE), &resolved)?;

    let log_path = a.out.join(LOG_FILE);
    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = std::io::BufWriter::new(file);
    writeln!(log, "{}", LogRow::csv_header(&cfg.model.aux_stages())).map_err(|e| Error::io(&log_path, e))?;

    let total = cfg.total_iterations(samples.len());
    let mut model = Model::build(cfg.model.clone(), cfg.seed)?;
    let out = a.out.clone();
    train(&mut model, &samples, &cfg, |row, model| {
        writeln!(log, "{}", row.to_csv()).map_err(|e| Error::io(&log_path, e))?;
        let done = row.iter + 1;
        if done % 50 == 0 || done == total {
            eprintln!("iter {done}/{total}  lr {:.5}  loss {:.4}", row.lr, row.total);
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < total {
            model.save(&out.join(format!("ckpt_{done:06}.fbn")))?;
        }
        Ok(())
    })?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    model.save(&a.out.join(MODEL_FILE))
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let cfg: TrainConfig = read_json(&a.run.join(CONFIG_FILE))?;
    let ckpt = a.checkpoint.clone().unwrap_or_else(|| a.run.join(MODEL_FILE));
    let model = Model::<f32>::load(cfg.model.clone(), &ckpt)?;
    let samples = read_split(&a.data, &a.split)?;
    let report = evaluate(&model, &samples, cfg.batch_size)?;
    create_dir(&a.out)?;
    let json = report.to_json()?;
    write_text(&a.out.join("eval.json"), &json)?;
    println!("mIoU {:.4}  f-mIoU {:.4}", report.miou, report.f_miou);
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<()> {
    if a.seeds == 0 {
        return Err(Error::arg("--seeds must be at least 1"));
    }
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let results = gradcheck::run(&seeds)?;
    create_dir(&a.out)?;
    write_text(
        &a.out.join("gradcheck.json"),
        &(serde_json::to_string_pretty(&results)? + "\n"),
    )?;
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).collect();
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    println!(
        "{} checks over {} seeds, worst relative error {worst:.3e}",
        results.len(),
        seeds.len()
    );
    if let Some(r) = failed.first() {
        return Err(Error::Numeric(format!(
            "{} checks failed; first: {} (seed {}) relative error {:.3e}",
            failed.len(),
            r.name,
            r.seed,
            r.max_rel_error
        )));
    }
    Ok(())
}

fn dilution_cmd(a: DilutionArgs) -> Result<()> {
    let report = dilution_probe(a.stride)?;
    create_parent(&a.out)?;
    let csv = report.to_csv();
    write_text(&a.out, &csv)?;
    print!("{csv}");
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> Result<()> {
    if a.seeds == 0 {
        return Err(Error::arg("--seeds must be at least 1"));
    }
    let base: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    base.validate()?;
    let train_set = read_split(&a.data, "train")?;
    let val = read_split(&a.data, &a.split)?;
    create_dir(&a.out)?;
    write_text(&a.out.join(CONFIG_FILE), &(serde_json::to_string_pretty(&base)? + "\n"))?;
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let report = run_ablation(&base, &train_set, &val, &seeds, |r| {
        eprintln!(
            "{:<10} seed {}  mIoU {:.4}  f-mIoU {:.4}",
            r.arm, r.seed, r.miou, r.f_miou
        );
    })?;
    write_text(&a.out.join("ablation.csv"), &report.to_csv())?;
    write_text(&a.out.join("ablation.md"), &report.to_markdown())?;
    print!("{}", report.to_markdown());
    if let (Some((_, full)), Some((_, base_f))) = (report.mean(Arm::Fbnet), report.mean(Arm::Baseline)) {
        println!("f-mIoU gain over baseline: {:+.2} points", 100.0 * (full - base_f));
    }
    Ok(())
}

fn visualize_cmd(a: VisualizeArgs) -> Result<()> {
    let config_path = match &a.config {
        Some(p) => p.clone(),
        None => a
            .checkpoint
            .parent()
            .map_or_else(|| PathBuf::from(CONFIG_FILE), |d| d.join(CONFIG_FILE)),
    };
    let cfg: TrainConfig = read_json(&config_path)?;
    let model = Model::<f32>::load(cfg.model, &a.checkpoint)?;
    let image = netpbm::read_ppm(&a.image)?;
    let map = heatmap(&model, &image, a.stage)?;
    create_parent(&a.out)?;
    netpbm::write_ppm(&a.out, &map)
}
