//! Command-line front end for the compression pipeline.
//!
//! Exit codes: 0 success, 2 configuration error, 3 missing stage input,
//! 4 malformed checkpoint, 5 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use eibert::distill::DistillMode;
use eibert::pipeline::{init_threads, Pipeline, PipelineConfig, PipelineError, StageOrder};

#[derive(Parser)]
#[command(name = "eibert", version, about = "Ultra-compact transformer compression pipeline")]
struct Cli {
    /// JSON pipeline configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed override; re-derives every stage seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts and metrics.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Distillation mode override for distill/prune/quantize.
    #[arg(long, global = true, value_enum)]
    mode: Option<CliMode>,
    /// Stage ordering: "default" (distill, prune, quantize) or "prune-first"
    /// (prune first, teacher-scored).
    #[arg(long, global = true)]
    stage_order: Option<StageOrder>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum CliMode {
    Kd,
    PiKd,
    CrossKd,
}

impl From<CliMode> for DistillMode {
    fn from(m: CliMode) -> Self {
        match m {
            CliMode::Kd => DistillMode::Kd,
            CliMode::PiKd => DistillMode::PiKd,
            CliMode::CrossKd => DistillMode::CrossKd,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the vocabulary and the train/eval/calibration splits.
    GenData,
    /// Masked-token pretraining of the student.
    Pretrain,
    /// Task fine-tuning of the teacher.
    FinetuneTeacher,
    /// Cross-distill the student from the teacher.
    Distill,
    /// Attention-scored vocabulary pruning.
    Prune,
    /// Module-wise int8 quantization.
    Quantize,
    /// Re-evaluate every artifact present in the output directory.
    Eval,
    /// Combine metrics fragments into report.csv / report.txt.
    Report,
    /// Run the full ladder end to end.
    RunAll,
    /// Print the effective configuration as JSON.
    ShowConfig,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::from_json(&std::fs::read_to_string(path)?)?,
        None => PipelineConfig::desk_default(),
    };
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    if let Some(order) = cli.stage_order {
        cfg.stage_order = order;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    init_threads();
    let cfg = load_config(cli)?;
    if let Command::ShowConfig = cli.command {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    let pipe = Pipeline::new(cfg, &cli.out)?;
    let mode = cli.mode.map(DistillMode::from);
    match cli.command {
        Command::GenData => pipe.gen_data()?,
        Command::Pretrain => pipe.pretrain()?,
        Command::FinetuneTeacher => pipe.finetune_teacher()?,
        Command::Distill => pipe.distill(mode)?,
        Command::Prune => pipe.prune(mode)?,
        Command::Quantize => pipe.quantize(mode)?,
        Command::Eval => pipe.eval()?,
        Command::Report => print!("{}", pipe.report()?),
        Command::RunAll => print!("{}", pipe.run_all()?),
        Command::ShowConfig => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
