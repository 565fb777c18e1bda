use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ones::gather::{BiasPolicy, GatherConfig, GatherMethod};
use ones::metrics::NoiseTarget;
use ones::train::{DistillMode, KlDirection};
use ones::workbench::commands::{self, DistillOverrides, Split};
use ones::workbench::{run_pipeline, ExperimentConfig};
use ones::Error;

#[derive(Parser)]
#[command(
    name = "ones",
    version,
    about = "MoE teacher, knowledge gathering and distillation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an MoE teacher.
    Teach {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gather a dense student from a teacher.
    Gather {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        method: GatherMethod,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, value_enum, default_value = "average")]
        bias: Bias,
        #[arg(long)]
        allow_remainder: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distil a student against a frozen teacher.
    Distill {
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        temp: Option<f64>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long, value_enum)]
        kl_direction: Option<Direction>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy of a checkpoint on its task.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "test")]
        task: Split,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// MoE benefits from three scores (numbers or scores files).
    Benefits {
        #[arg(long, allow_hyphen_values = true)]
        student: String,
        #[arg(long, allow_hyphen_values = true)]
        dense: String,
        #[arg(long, allow_hyphen_values = true)]
        moe: String,
    },
    /// Signal/noise split of SVD gathering across a grid of ratios.
    NoiseScan {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long, default_value = "0.1:1.0:0.1")]
        lambdas: String,
        #[arg(long, value_enum, default_value = "first-layer")]
        target: Target,
        #[arg(long, default_value_t = 64)]
        examples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-token feed-forward FLOPs of a checkpoint.
    Flops {
        #[arg(long)]
        model: PathBuf,
    },
    /// Full teach, gather, distil and compare run.
    Pipeline {
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Bias {
    Average,
    Matched,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Soft,
    Hard,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum Direction {
    TeacherToStudent,
    StudentToTeacher,
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    FirstLayer,
    FullFfn,
}

fn print<T: Serialize>(value: &T) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Error> {
    ExperimentConfig::load(path)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Teach { config, out } => {
            print(&commands::run_teach(&load_config(&config)?, &out)?)
        }
        Command::Gather {
            teacher,
            method,
            lambda,
            bias,
            allow_remainder,
            out,
        } => {
            let lambda = match (method, lambda) {
                (GatherMethod::SvdKg, None) => Some(0.75),
                (_, l) => l,
            };
            let cfg = GatherConfig {
                method,
                lambda,
                bias_policy: match bias {
                    Bias::Average => BiasPolicy::Average,
                    Bias::Matched => BiasPolicy::Matched,
                },
                allow_remainder,
                seed: 0,
            };
            print(&commands::run_gather(&teacher, &cfg, &out)?)
        }
        Command::Distill {
            student,
            teacher,
            alpha,
            temp,
            mode,
            kl_direction,
            steps,
            out,
        } => {
            let overrides = DistillOverrides {
                alpha,
                temperature: temp,
                mode: mode.map(|m| match m {
                    Mode::Soft => DistillMode::Soft,
                    Mode::Hard => DistillMode::Hard,
                    Mode::None => DistillMode::None,
                }),
                kl_direction: kl_direction.map(|d| match d {
                    Direction::TeacherToStudent => KlDirection::TeacherToStudent,
                    Direction::StudentToTeacher => KlDirection::StudentToTeacher,
                }),
                steps,
            };
            print(&commands::run_distill(
                &student, &teacher, &overrides, &out,
            )?)
        }
        Command::Eval { model, task, out } => {
            print(&commands::run_eval(&model, task, out.as_deref())?)
        }
        Command::Benefits {
            student,
            dense,
            moe,
        } => print(&commands::run_benefits(&student, &dense, &moe)?),
        Command::NoiseScan {
            teacher,
            lambdas,
            target,
            examples,
            out,
        } => {
            let target = match target {
                Target::FirstLayer => NoiseTarget::FirstLayer,
                Target::FullFfn => NoiseTarget::FullFfn,
            };
            let grid = commands::parse_lambda_grid(&lambdas)?;
            print(&commands::run_noise_scan(
                &teacher,
                &grid,
                target,
                examples,
                out.as_deref(),
            )?)
        }
        Command::Flops { model } => print(&commands::run_flops(&model)?),
        Command::Pipeline {
            config,
            preset,
            out_dir,
        } => {
            let mut cfg = match config {
                Some(path) => load_config(&path)?,
                None => {
                    let mut cfg = ExperimentConfig::preset(preset.as_deref().unwrap_or("default"))?;
                    cfg.apply_env_seed()?;
                    cfg
                }
            };
            if let Some(dir) = out_dir {
                cfg.output_dir = dir;
            }
            print(&run_pipeline(&cfg)?)
        }
    }
}

#[derive(Serialize)]
struct Diagnostic {
    kind: &'static str,
    stage: Option<String>,
    message: String,
}

fn diagnose(err: &Error) -> (Diagnostic, u8) {
    let mut inner = err;
    let mut stage = None;
    while let Error::Stage { stage: s, source } = inner {
        stage.get_or_insert_with(|| s.clone());
        inner = source;
    }
    let (kind, code) = match inner {
        Error::Argument(_) | Error::Config(_) => ("config", 2),
        Error::Checkpoint(_) => ("checkpoint", 3),
        Error::Io { .. } | Error::Json(_) => ("io", 3),
        Error::Divergence { .. } | Error::NonFinite(_) => ("numeric", 4),
        Error::NoConvergence { .. } => ("numeric", 4),
        Error::Shape { .. } | Error::Structural { .. } => ("structure", 5),
        Error::UndefinedMetric(_) => ("metric", 6),
        Error::Stage { .. } => unreachable!(),
    };
    (
        Diagnostic {
            kind,
            stage,
            message: err.to_string(),
        },
        code,
    )
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (diag, code) = diagnose(&err);
            let line = serde_json::to_string(&serde_json::json!({ "error": diag }))
                .unwrap_or_else(|_| format!("{{\"error\":{{\"message\":{:?}}}}}", err.to_string()));
            eprintln!("{line}");
            ExitCode::from(code)
        }
    }
}
