use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use coarsenlab::harness::{exit_code, run_experiment, ExperimentConfig, ExperimentKind};
use coarsenlab::Error;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Kind {
    Bd,
    Classical,
    Diffusive,
    Sweep,
    McCheck,
    Duality,
}

impl From<Kind> for ExperimentKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Bd => ExperimentKind::Bd,
            Kind::Classical => ExperimentKind::Classical,
            Kind::Diffusive => ExperimentKind::Diffusive,
            Kind::Sweep => ExperimentKind::Sweep,
            Kind::McCheck => ExperimentKind::McCheck,
            Kind::Duality => ExperimentKind::Duality,
        }
    }
}

/// Run a coarsening experiment and write its artifacts.
#[derive(Debug, Parser)]
#[command(name = "coarsenlab", version)]
struct Args {
    /// experiment kind; must match the config's `kind`
    #[arg(value_enum)]
    kind: Kind,
    /// JSON experiment config
    #[arg(long)]
    config: PathBuf,
    /// artifact directory (defaults to the config's `output`)
    #[arg(long)]
    out: Option<PathBuf>,
    /// overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// double the resolution of every solver
    #[arg(long)]
    refine: bool,
}

fn run(args: Args) -> Result<i32, Error> {
    let mut config = ExperimentConfig::load(&args.config)?;
    let kind = ExperimentKind::from(args.kind);
    if config.kind != kind {
        return Err(Error::InvalidConfig {
            field: "kind".into(),
            message: format!(
                "config is `{}` but `{}` was requested",
                config.kind.as_str(),
                kind.as_str()
            ),
        });
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if args.refine {
        config = config.refined();
    }
    let out = args
        .out
        .or_else(|| config.output.clone())
        .ok_or_else(|| Error::InvalidConfig {
            field: "output".into(),
            message: "no output directory: pass --out or set `output`".into(),
        })?;
    log::info!("running {} into {}", kind.as_str(), out.display());
    let summary = run_experiment(&config, &out)?;
    for c in &summary.checks {
        println!(
            "{} {} value={:e} threshold={:e}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.threshold
        );
    }
    println!(
        "{} {}",
        kind.as_str(),
        if summary.passed { "passed" } else { "failed" }
    );
    Ok(summary.exit_code())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    let code = match run(args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}
