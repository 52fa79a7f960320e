use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use metalab::experiments::{preset, run_experiment, ExperimentConfig, Kind, PRESETS};
use metalab::LabError;

const OUT_ENV: &str = "META_LAB_OUT";
const DEFAULT_OUT: &str = "meta-lab-out";

/// Order-parameter dynamics and finite-size simulation of first-order ANIL
/// meta-learning in two-layer erf networks.
#[derive(Parser)]
#[command(name = "meta-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the averaged order-parameter equations
    Theory(RunArgs),
    /// Run the finite-N simulator over one or more seeds
    Simulate(RunArgs),
    /// Theory and simulation side by side, with a per-alpha delta table
    Compare(RunArgs),
    /// First threshold crossing over a parameter grid
    Sweep(RunArgs),
    /// Closed-form integrals against quadrature on random covariances
    ValidateIntegrals(RunArgs),
    /// List the shipped presets
    PresetList,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON)
    #[arg(long, value_name = "PATH", conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Shipped preset (see preset-list)
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
    /// Output directory [default: $META_LAB_OUT, else ./meta-lab-out]
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Seed override: the seed list for simulate/compare, the draw seed for
    /// validate-integrals, the random-init seed otherwise
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Worker threads (0 = one per core)
    #[arg(long, value_name = "INT", default_value_t = 0)]
    jobs: usize,
}

fn kind_of(cmd: &Command) -> Option<Kind> {
    Some(match cmd {
        Command::Theory(_) => Kind::Theory,
        Command::Simulate(_) => Kind::Simulate,
        Command::Compare(_) => Kind::Compare,
        Command::Sweep(_) => Kind::Sweep,
        Command::ValidateIntegrals(_) => Kind::ValidateIntegrals,
        Command::PresetList => return None,
    })
}

fn load_config(kind: Kind, args: &RunArgs) -> anyhow::Result<ExperimentConfig> {
    let mut config = match (&args.config, &args.preset) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ExperimentConfig::from_json(&text)?
        }
        (None, Some(name)) => preset(name).ok_or_else(|| {
            let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            LabError::config("preset", format!("unknown preset `{name}`; expected one of {}", names.join(", ")))
        })?,
        (None, None) if kind == Kind::ValidateIntegrals => ExperimentConfig::from_json(r#"{"kind": "validate-integrals"}"#)?,
        (None, None) => return Err(LabError::config("config", "pass --config PATH or --preset NAME").into()),
    };
    if config.kind != kind {
        return Err(LabError::config(
            "kind",
            format!("config is `{}` but the subcommand is `{}`", config.kind.name(), kind.name()),
        )
        .into());
    }
    if let Some(seed) = args.seed {
        match kind {
            Kind::Simulate | Kind::Compare => config.seeds = vec![seed],
            Kind::ValidateIntegrals => config.validate.get_or_insert_with(Default::default).seed = seed,
            Kind::Theory | Kind::Sweep => config.sim.init_seed = seed,
        }
    }
    Ok(config)
}

fn out_dir(args: &RunArgs, config: &ExperimentConfig) -> PathBuf {
    args.out
        .clone()
        .or_else(|| config.output.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| Path::new(DEFAULT_OUT).to_path_buf())
}

fn run(cli: Cli) -> anyhow::Result<i32> {
    let Some(kind) = kind_of(&cli.command) else {
        for (name, desc) in PRESETS {
            let kind = preset(name).map(|c| c.kind.name()).unwrap_or_default();
            println!("{name:<10} {kind:<19} {desc}");
        }
        return Ok(0);
    };
    let args = match &cli.command {
        Command::Theory(a)
        | Command::Simulate(a)
        | Command::Compare(a)
        | Command::Sweep(a)
        | Command::ValidateIntegrals(a) => a,
        Command::PresetList => unreachable!(),
    };
    let config = load_config(kind, args)?;
    let dir = out_dir(args, &config);
    let outcome = run_experiment(&config, &dir, args.jobs)?;
    for path in &outcome.artifacts {
        println!("{}", path.display());
    }
    println!("{}", outcome.manifest.display());
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    Ok(outcome.status.exit_code())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = match err.downcast_ref::<LabError>() {
                Some(e) => e.exit_code(),
                None => 2,
            };
            ExitCode::from(code as u8)
        }
    }
}
