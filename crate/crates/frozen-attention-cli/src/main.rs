//! `frozen-attn`: build and measure frozen emulators, run the constructive
//! property checks and the trained experiments.
//!
//! Exit codes: 0 on success, 1 when a checked property fails, 2 on usage
//! or input errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use frozen_attention::algorithms::{curvature, gd_multi, AlgorithmSpec, GdLayer, Loss, Pair};
use frozen_attention::emulator::{build, build_for_library, measure_against_prompt, swap_algorithm, Construction, TargetHead};
use frozen_attention::experiments::{self, write_outputs, ExperimentConfig, ExperimentKind, ResultRecord};
use frozen_attention::linalg::read_csv;
use frozen_attention::prompt::PromptFile;
use frozen_attention::rng::Rng;

#[derive(Parser, Debug)]
#[command(name = "frozen-attn", version, about = "Frozen softmax-attention emulators and their experiments")]
struct Cli {
    /// Seed for generated data; replaces the config's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON config merged over the experiment's defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Report file (emulate, swap, gd) or output directory (experiments).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ConstructionArg {
    Interpolation,
    CoordinateGrid,
}

impl From<ConstructionArg> for Construction {
    fn from(c: ConstructionArg) -> Self {
        match c {
            ConstructionArg::Interpolation => Construction::Interpolation,
            ConstructionArg::CoordinateGrid => Construction::CoordinateGrid,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TrainArg {
    SimF,
    Heads,
    Frozen,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a frozen emulator for one target head and measure it.
    Emulate {
        #[arg(long, value_enum)]
        construction: ConstructionArg,
        /// Target head JSON `{W_K, W_Q, W_V}`.
        #[arg(long)]
        target: PathBuf,
        /// Input tokens `X` as a CSV matrix (`d x n`).
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        eps: f64,
    },
    /// Run every member of an algorithm library through one frozen emulator.
    Swap {
        #[arg(long, value_enum, default_value = "interpolation")]
        construction: ConstructionArg,
        /// JSON list of algorithm specs with `kind: target_head`.
        #[arg(long)]
        library: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        eps: f64,
    },
    /// Truncated-linear error against the head budget.
    ConstructSweep,
    /// Batch checks of the hardmax and truncated-linear bounds.
    VerifyLemmas {
        /// Multiplier on the planned temperature (below 1 is a negative control).
        #[arg(long)]
        beta_scale: Option<f64>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Trained experiments.
    Train {
        #[arg(value_enum)]
        experiment: TrainArg,
    },
    /// Frozen-vs-baseline comparison on the Ames housing data.
    Ames {
        #[arg(long)]
        data: PathBuf,
    },
    /// Stack one frozen GD layer `L` times and compare with exact GD.
    Gd {
        #[arg(long)]
        steps: usize,
        /// GD prompt JSON with `pairs` and `w`; a random prompt otherwise.
        #[arg(long)]
        prompt: Option<PathBuf>,
        /// Step size (default `1/L_f` of the mean objective).
        #[arg(long)]
        eta: Option<f64>,
        /// Ridge penalty of the mean objective.
        #[arg(long, default_value_t = 0.0)]
        lambda: f64,
        /// Per-step error of the frozen layer.
        #[arg(long, default_value_t = 0.01)]
        eps: f64,
    },
}

/// A finished command: its JSON report and whether its property held.
struct Outcome {
    report: Value,
    passed: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(outcome) => {
            if outcome.passed {
                ExitCode::SUCCESS
            } else {
                eprintln!("property check failed");
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: &Cli) -> Result<Outcome> {
    let outcome = match &cli.command {
        Command::Emulate {
            construction,
            target,
            input,
            eps,
        } => emulate((*construction).into(), target, input, *eps)?,
        Command::Swap {
            construction,
            library,
            input,
            eps,
        } => swap((*construction).into(), library, input, *eps)?,
        Command::ConstructSweep => return experiment(cli, config(cli, ExperimentKind::ConstructSweep)?),
        Command::VerifyLemmas { beta_scale, trials } => {
            let mut cfg = config(cli, ExperimentKind::VerifyLemmas)?;
            if let Some(s) = beta_scale {
                cfg.beta_scale = *s;
            }
            if let Some(t) = trials {
                cfg.trials = *t;
            }
            return experiment(cli, cfg);
        }
        Command::Train { experiment: which } => {
            let kind = match which {
                TrainArg::SimF => ExperimentKind::SimF,
                TrainArg::Heads => ExperimentKind::SimAttentionHeads,
                TrainArg::Frozen => ExperimentKind::FrozenVsBaseline,
            };
            return experiment(cli, config(cli, kind)?);
        }
        Command::Ames { data } => {
            let mut cfg = config(cli, ExperimentKind::Ames)?;
            cfg.data_path = Some(data.clone());
            return experiment(cli, cfg);
        }
        Command::Gd {
            steps,
            prompt,
            eta,
            lambda,
            eps,
        } => gd(*steps, prompt.as_deref(), *eta, *lambda, *eps, cli.seed.unwrap_or(0))?,
    };
    emit(cli.out.as_deref(), &outcome.report)?;
    Ok(outcome)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Write a report to `out`, or to stdout when no path is given.
fn emit(out: Option<&Path>, report: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn config(cli: &Cli, kind: ExperimentKind) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let cfg = ExperimentConfig::from_json(&text, kind)?;
            if cfg.experiment != kind {
                bail!("config is for {}, not {}", cfg.experiment.tag(), kind.tag());
            }
            cfg
        }
        None => ExperimentConfig::desk(kind),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Run an experiment, write its artifacts and print a summary.
fn experiment(cli: &Cli, cfg: ExperimentConfig) -> Result<Outcome> {
    let record = experiments::run(&cfg)?;
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("results"));
    let written = write_outputs(&record, &dir)?;
    summarise(&record);
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(Outcome {
        passed: record.passed.unwrap_or(true),
        report: Value::Null,
    })
}

fn summarise(record: &ResultRecord) {
    println!("{} ({:.1} s)", record.experiment.tag(), record.runtime_secs);
    for m in &record.metrics {
        let reference = m
            .reference
            .as_ref()
            .map(|r| format!("  [published {}{}]", r.mean, r.std.map(|s| format!(" ± {s}")).unwrap_or_default()))
            .unwrap_or_default();
        println!("  {:<32} {:>12.5e} ± {:<10.3e} (n={}){reference}", m.name, m.mean, m.std, m.values.len());
    }
    for f in &record.flags {
        println!("  note: {f}");
    }
    if let Some(p) = record.passed {
        println!("  property {}", if p { "holds" } else { "FAILS" });
    }
}

fn emulate(construction: Construction, target: &Path, input: &Path, eps: f64) -> Result<Outcome> {
    let target: TargetHead = read_json(target)?;
    let x = read_csv(input).with_context(|| format!("reading {}", input.display()))?;
    let emulator = build(construction, &x, &target, eps)?;
    let report = measure_against_prompt(&emulator, &emulator.prompt_for(&x, &target)?)?;
    eprintln!(
        "measured {:.3e}, budget {:.3e}, eps {eps}, {} heads",
        report.measured_error,
        report.theoretical_budget,
        emulator.head_count()
    );
    Ok(Outcome {
        passed: report.measured_error <= report.theoretical_budget && report.measured_error <= eps,
        report: serde_json::to_value(&report)?,
    })
}

fn swap(construction: Construction, library: &Path, input: &Path, eps: f64) -> Result<Outcome> {
    let specs: Vec<AlgorithmSpec> = read_json(library)?;
    let x = read_csv(input).with_context(|| format!("reading {}", input.display()))?;
    let heads = specs.iter().map(AlgorithmSpec::target_head).collect::<frozen_attention::Result<Vec<_>>>()?;
    let emulator = build_for_library(construction, &x, &heads, eps)?;
    let checksum = emulator.checksum();
    let reports = swap_algorithm(&emulator, &specs, &x)?;
    for r in &reports {
        eprintln!("{}: measured {:.3e}", r.name.as_deref().unwrap_or("?"), r.measured_error);
    }
    let passed = reports.iter().all(|r| r.measured_error <= eps && r.weight_checksum == checksum);
    Ok(Outcome {
        passed,
        report: json!({"weight_checksum": checksum, "reports": reports}),
    })
}

fn random_gd_prompt(seed: u64) -> (Vec<Pair>, Vec<f64>) {
    let mut rng = Rng::substream(seed, 0x6d);
    let (n, d) = (6, 2);
    let w_true: Vec<f64> = (0..d).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    let pairs = (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..d).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            let y = x.iter().zip(&w_true).map(|(a, b)| a * b).sum::<f64>() + 0.1 * rng.normal();
            (x, y)
        })
        .collect();
    (pairs, vec![0.0; d])
}

fn gd(steps: usize, prompt: Option<&Path>, eta: Option<f64>, lambda: f64, eps: f64, seed: u64) -> Result<Outcome> {
    let (pairs, w0) = match prompt {
        Some(path) => {
            let file: PromptFile = read_json(path)?;
            match (file.pairs, file.w) {
                (Some(p), Some(w)) => (p, w),
                _ => bail!("{} is not a GD prompt (needs pairs and w)", path.display()),
            }
        }
        None => random_gd_prompt(seed),
    };
    let eta = match eta {
        Some(e) => e,
        None => 1.0 / curvature(&pairs, lambda)?.smooth,
    };
    let exact = gd_multi(&pairs, &w0, eta, Loss::Squared, lambda, steps)?;
    // Plan for every iterate the exact trajectory visits, with room for the
    // accumulated emulation error.
    let w_norm = exact
        .iterates
        .iter()
        .map(|w| w.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
        + steps as f64 * eps * (w0.len() as f64).sqrt()
        + 1.0;
    let layer = GdLayer::plan(&pairs, Loss::Squared, eta, lambda, w_norm, eps)?;
    let emulated = layer.run(&pairs, &w0, Loss::Squared, steps)?;
    let deviations: Vec<f64> = exact
        .iterates
        .iter()
        .zip(&emulated.iterates)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
        .collect();
    let passed = deviations.iter().enumerate().all(|(l, d)| *d <= l as f64 * eps);
    eprintln!(
        "{steps} steps, final deviation {:.3e} (limit {:.3e})",
        deviations.last().copied().unwrap_or(0.0),
        steps as f64 * eps
    );
    Ok(Outcome {
        passed,
        report: json!({
            "steps": steps,
            "eta": eta,
            "lambda": lambda,
            "eps": eps,
            "step_bound": layer.step_bound(),
            "deviation": deviations,
            "exact": exact.iterates,
            "emulated": emulated.iterates,
            "loss_exact": exact.loss_values,
            "loss_emulated": emulated.loss_values,
        }),
    })
}
