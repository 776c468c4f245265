//! Command-line front end. [`execute`] parses arguments, runs one
//! subcommand, writes JSON to `out` and diagnostics to `err`, and returns
//! the process exit code.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::config::{
    eil_ms, flops_per_segment, frame_latency_range_ms, savings_ratio, Arch, ModelConfig,
};
use crate::encoder::{stack_frames, EncoderModel};
use crate::error::{Error, Result};
use crate::features::{read_features, write_features, FeatureData};
use crate::numerics::{DType, Matrix, Scalar};
use crate::verify::{self, CheckKind, SuiteOptions, ThroughputMode};

pub const EXIT_OK: i32 = 0;
/// A check failed or the config is invalid.
pub const EXIT_FAILED: i32 = 1;
/// Bad arguments.
pub const EXIT_USAGE: i32 = 2;
/// I/O, format or runtime error.
pub const EXIT_ERROR: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "emformer",
    version,
    about = "Streaming memory-transformer encoder tools"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// Model config JSON; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a config against the model invariants.
    Validate(ConfigArg),
    /// Algorithmic latency of a config.
    Latency(ConfigArg),
    /// Per-segment FLOPs of both architectures and the saving.
    Flops(ConfigArg),
    /// Run verification checks on a seeded random model and input.
    Verify {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        seed: u64,
        /// Comma-separated subset of: equivalence, leak, cache, gradients,
        /// summary_mask, baseline, flops.
        #[arg(long, value_delimiter = ',')]
        checks: Option<Vec<String>>,
        /// Input length in frames.
        #[arg(long)]
        frames: Option<usize>,
        /// Perturbation probes for the leak check.
        #[arg(long, default_value_t = 50)]
        probes: usize,
    },
    /// Time one forward mode on a seeded random model and input.
    Bench {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        frames: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, value_enum)]
        mode: BenchMode,
    },
    /// Forward a feature file through a seeded model.
    Run {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum)]
        mode: RunMode,
        /// Stack this many consecutive frames before the encoder.
        #[arg(long, default_value_t = 1)]
        stack: usize,
    },
    /// Maximum absolute difference between two feature files.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        tolerance: f64,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BenchMode {
    Parallel,
    AmtrfSequential,
    EmformerStream,
}

impl From<BenchMode> for ThroughputMode {
    fn from(m: BenchMode) -> Self {
        match m {
            BenchMode::Parallel => ThroughputMode::Parallel,
            BenchMode::AmtrfSequential => ThroughputMode::AmTrfSequential,
            BenchMode::EmformerStream => ThroughputMode::EmformerStream,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RunMode {
    Parallel,
    Stream,
    Amtrf,
}

fn load_config(arg: &ConfigArg) -> Result<ModelConfig> {
    match &arg.config {
        Some(p) => ModelConfig::from_json(
            &std::fs::read_to_string(p)
                .map_err(|e| Error::Format(format!("cannot read {}: {e}", p.display())))?,
        ),
        None => Ok(ModelConfig::default()),
    }
}

/// Result of a subcommand: JSON for stdout and whether it succeeded.
struct Outcome {
    report: Value,
    ok: bool,
}

fn validate_cmd(cfg: &ModelConfig) -> Outcome {
    let violations = cfg.violations();
    Outcome {
        ok: violations.is_empty(),
        report: json!({ "valid": violations.is_empty(), "violations": violations }),
    }
}

fn latency_cmd(cfg: &ModelConfig) -> Result<Outcome> {
    cfg.validate()?;
    let (lo, hi) = frame_latency_range_ms(cfg);
    Ok(Outcome {
        ok: true,
        report: json!({
            "eil_ms": eil_ms(cfg),
            "frame_latency_min_ms": lo,
            "frame_latency_max_ms": hi,
            "center_ms": cfg.center_ms(),
            "right_ms": cfg.right_ms(),
            "left_ms": cfg.left_ms(),
        }),
    })
}

fn flops_cmd(cfg: &ModelConfig) -> Result<Outcome> {
    cfg.validate()?;
    let (l, c, r) = (cfg.left_frames, cfg.center_frames, cfg.right_frames);
    Ok(Outcome {
        ok: true,
        report: json!({
            "emformer": serde_json::to_value(flops_per_segment(cfg, Arch::Emformer))?,
            "amtrf": serde_json::to_value(flops_per_segment(cfg, Arch::AmTrf))?,
            "savings_ratio": savings_ratio(cfg),
            "left_fraction": l as f64 / (l + c + r) as f64,
            "n_layers": cfg.n_layers,
        }),
    })
}

fn verify_cmd(
    cfg: &ModelConfig,
    seed: u64,
    checks: Option<&[String]>,
    frames: Option<usize>,
    probes: usize,
) -> Result<Outcome> {
    let kinds = match checks {
        Some(names) => names
            .iter()
            .map(|s| s.trim().parse())
            .collect::<Result<Vec<CheckKind>>>()?,
        None => CheckKind::ALL.to_vec(),
    };
    let opts = SuiteOptions {
        seed,
        frames,
        probes,
        ..SuiteOptions::default()
    };
    let reports = verify::run_suite(cfg, &kinds, &opts)?;
    let ok = reports.iter().all(|r| r.pass);
    Ok(Outcome {
        ok,
        report: json!({
            "pass": ok,
            "seed": seed,
            "reports": reports.iter().map(|r| r.to_json()).collect::<Vec<_>>(),
        }),
    })
}

fn bench_typed<T: Scalar>(
    cfg: &ModelConfig,
    seed: u64,
    frames: usize,
    repeats: usize,
    mode: ThroughputMode,
) -> Result<Outcome> {
    let model = EncoderModel::<T>::init(cfg, seed)?;
    let x = verify::random_frames::<T>(frames, cfg.d_model, seed.wrapping_add(1));
    let r = verify::measure_throughput(&model, &x, mode, repeats);
    Ok(Outcome {
        ok: r.pass,
        report: json!({
            "throughput": r.to_json(),
            "flops_per_segment": {
                "emformer": serde_json::to_value(flops_per_segment(cfg, Arch::Emformer))?,
                "amtrf": serde_json::to_value(flops_per_segment(cfg, Arch::AmTrf))?,
            },
            "savings_ratio": savings_ratio(cfg),
        }),
    })
}

fn run_typed<T: Scalar>(
    cfg: &ModelConfig,
    seed: u64,
    input: &FeatureData,
    stack: usize,
    mode: RunMode,
    output: &Path,
) -> Result<Outcome> {
    let raw: Matrix<T> = input.to_matrix();
    let x = stack_frames(&raw, stack)?;
    let model = EncoderModel::<T>::init(cfg, seed)?;
    let y = match mode {
        RunMode::Parallel => model.forward_parallel(&x)?,
        RunMode::Stream => model.forward_stream(&x)?,
        RunMode::Amtrf => model.amtrf_forward_sequential(&x)?,
    };
    write_features(output, &y)?;
    Ok(Outcome {
        ok: true,
        report: json!({
            "input_frames": raw.rows(),
            "encoder_frames": x.rows(),
            "d_model": cfg.d_model,
            "dtype": T::DTYPE.name(),
            "output": output.display().to_string(),
        }),
    })
}

fn compare_cmd(a: &Path, b: &Path, tolerance: f64) -> Result<Outcome> {
    let (fa, fb) = (read_features(a)?, read_features(b)?);
    if fa.shape() != fb.shape() {
        return Err(Error::shape(
            "compare",
            format!("{:?} vs {:?}", fa.shape(), fb.shape()),
        ));
    }
    let (ma, mb) = (fa.to_matrix::<f64>(), fb.to_matrix::<f64>());
    let diff = ma.max_abs_diff(&mb).unwrap_or(0.0);
    let ok = diff <= tolerance;
    Ok(Outcome {
        ok,
        report: json!({
            "max_abs_diff": diff,
            "bitwise_equal": fa == fb,
            "tolerance": tolerance,
            "pass": ok,
        }),
    })
}

fn dispatch(command: Command) -> Result<Outcome> {
    match command {
        Command::Validate(c) => Ok(validate_cmd(&load_config(&c)?)),
        Command::Latency(c) => latency_cmd(&load_config(&c)?),
        Command::Flops(c) => flops_cmd(&load_config(&c)?),
        Command::Verify {
            config,
            seed,
            checks,
            frames,
            probes,
        } => verify_cmd(
            &load_config(&config)?,
            seed,
            checks.as_deref(),
            frames,
            probes,
        ),
        Command::Bench {
            config,
            seed,
            frames,
            repeats,
            mode,
        } => {
            let cfg = load_config(&config)?;
            match cfg.dtype {
                DType::F32 => bench_typed::<f32>(&cfg, seed, frames, repeats, mode.into()),
                DType::F64 => bench_typed::<f64>(&cfg, seed, frames, repeats, mode.into()),
            }
        }
        Command::Run {
            config,
            seed,
            input,
            output,
            mode,
            stack,
        } => {
            let cfg = load_config(&config)?;
            let data = read_features(&input)?;
            match cfg.dtype {
                DType::F32 => run_typed::<f32>(&cfg, seed, &data, stack, mode, &output),
                DType::F64 => run_typed::<f64>(&cfg, seed, &data, stack, mode, &output),
            }
        }
        Command::Compare { a, b, tolerance } => compare_cmd(&a, &b, tolerance),
    }
}

/// Runs the command line `args` (program name first).
pub fn execute<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() {
                write!(err, "{e}")
            } else {
                write!(out, "{e}")
            };
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(outcome) => {
            let text = serde_json::to_string_pretty(&outcome.report).expect("json");
            if writeln!(out, "{text}").is_err() {
                return EXIT_ERROR;
            }
            if outcome.ok {
                EXIT_OK
            } else {
                EXIT_FAILED
            }
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            match e {
                Error::InvalidConfig(_) => EXIT_FAILED,
                _ => EXIT_ERROR,
            }
        }
    }
}
