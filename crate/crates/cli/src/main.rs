mod commands;
mod error;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use slotforge::losses::MatchStrategy;
use slotforge::metrics::MboOrientation;
use slotforge::theory::BoundMode;
use slotforge::trainer::KdVariant;

use error::CliError;

#[derive(Parser)]
#[command(name = "slotforge", version, about = "Slot-level distillation experiments on synthetic videos")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct ConfigArg {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic videos, one file per video.
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        /// Object count per video, `N` or `MIN..MAX` (inclusive).
        #[arg(long)]
        objects: Option<String>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Pretrain the teacher on the reconstruction and contrastive objective.
    TrainTeacher {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the checkpoint, run record and resolved config.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Train a student, distilling from a frozen teacher.
    Distill {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_variant)]
        kd_variant: Option<KdVariant>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long = "match", value_parser = parse_match)]
        match_strategy: Option<MatchStrategy>,
        /// Run every distillation weight of the standard grid, one subdirectory each.
        #[arg(long)]
        sweep: bool,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Score a checkpoint's masks with FG-ARI and mBO at image and video level.
    Evaluate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, required_unless_present = "oracle_pred")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated slot-noise seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Score the ground truth against itself.
        #[arg(long)]
        oracle_pred: bool,
        #[arg(long, value_parser = parse_mbo)]
        mbo: Option<MboOrientation>,
    },
    /// Check the decoded-discrepancy bound on matched teacher/student slot pairs.
    VerifyTheorem {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pairs: Option<usize>,
        #[arg(long, default_value = "equalized", value_parser = parse_mode)]
        mode: BoundMode,
        #[arg(long = "match", value_parser = parse_match)]
        match_strategy: Option<MatchStrategy>,
        /// Slot-noise seed of the forward passes.
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// CSV path; an SVG is written next to it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare parameters, FLOPs and forward wall-clock of two checkpoints.
    Bench {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long, default_value_t = 20)]
        repeats: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate run records into a table and SVG plots.
    Report {
        #[arg(long)]
        runs: PathBuf,
        /// Output prefix: writes `<out>.csv`, `<out>_scatter.svg` and `<out>_loss.svg`.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Clone, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Held-out videos scored after training; the mean over eval seeds lands in the run record.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
}

fn parse_variant(s: &str) -> Result<KdVariant, String> {
    KdVariant::parse(s).ok_or_else(|| {
        let names: Vec<_> = KdVariant::ALL.iter().map(|v| v.name()).collect();
        format!("unknown variant {s:?}; expected one of {}", names.join(", "))
    })
}

fn parse_match(s: &str) -> Result<MatchStrategy, String> {
    match s {
        "index" => Ok(MatchStrategy::Index),
        "hungarian" => Ok(MatchStrategy::Hungarian),
        _ => Err(format!("unknown match strategy {s:?}; expected index or hungarian")),
    }
}

fn parse_mode(s: &str) -> Result<BoundMode, String> {
    match s {
        "equalized" => Ok(BoundMode::Equalized),
        "raw" => Ok(BoundMode::Raw),
        _ => Err(format!("unknown mode {s:?}; expected equalized or raw")),
    }
}

fn parse_mbo(s: &str) -> Result<MboOrientation, String> {
    match s {
        "per_ground_truth" => Ok(MboOrientation::PerGroundTruth),
        "per_prediction" => Ok(MboOrientation::PerPrediction),
        _ => Err(format!("unknown mBO orientation {s:?}")),
    }
}

fn configure_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("SLOTFORGE_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| CliError::Config(format!("SLOTFORGE_THREADS={v:?} is not a thread count")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::GenData {
            config,
            seed,
            out,
            count,
            objects,
            size,
            frames,
        } => commands::gen_data(&config, seed, &out, count, objects.as_deref(), size, frames),
        Command::TrainTeacher {
            config,
            data,
            out,
            overrides,
        } => commands::train_teacher(&config, &data, &out, &overrides),
        Command::Distill {
            config,
            teacher,
            data,
            out,
            kd_variant,
            beta,
            match_strategy,
            sweep,
            overrides,
        } => commands::distill(
            &config,
            &teacher,
            &data,
            &out,
            commands::DistillFlags {
                kd_variant,
                beta,
                match_strategy,
                sweep,
            },
            &overrides,
        ),
        Command::Evaluate {
            config,
            checkpoint,
            data,
            seeds,
            out,
            oracle_pred,
            mbo,
        } => commands::evaluate(&config, checkpoint.as_deref(), &data, seeds, out.as_deref(), oracle_pred, mbo),
        Command::VerifyTheorem {
            config,
            teacher,
            student,
            data,
            pairs,
            mode,
            match_strategy,
            seed,
            out,
        } => commands::verify_theorem(
            &config,
            &teacher,
            &student,
            &data,
            pairs,
            mode,
            match_strategy,
            seed,
            out.as_deref(),
        ),
        Command::Bench {
            config,
            teacher,
            student,
            repeats,
            warmup,
            out,
        } => commands::bench(&config, &teacher, &student, repeats, warmup, out.as_deref()),
        Command::Report { runs, out } => commands::report(&runs, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
