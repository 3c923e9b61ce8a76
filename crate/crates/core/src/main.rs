use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use propproc::analysis::Method;
use propproc::cli::{cmd_analyze, cmd_compare, cmd_simulate, cmd_validate, GlobalArgs, PipelineConfig};
use propproc::{Error, Result};

#[derive(Parser)]
#[command(name = "propproc", version, about = "Propensity-process matching for registries with time-varying covariates")]
struct Cli {
    /// Pipeline configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for simulation; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Number of cells of the path time grid.
    #[arg(long, global = true)]
    grid: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct RegistryArgs {
    /// Subjects CSV (`id,treatment_time,outcome,<baseline...>`).
    #[arg(long)]
    subjects: Option<PathBuf>,
    /// Visits CSV (`id,time,<covariates...>`).
    #[arg(long)]
    visits: Option<PathBuf>,
    /// Ingest settings JSON (`horizon_L`, `time_unit`, `truncate_at_U`).
    #[arg(long)]
    ingest: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Naive,
    Pf,
    Gps,
    Pp,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Naive => Method::Naive,
            MethodArg::Pf => Method::Pf,
            MethodArg::Gps => Method::Gps,
            MethodArg::Pp => Method::Pp,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic registry and write it with its ground truth.
    Simulate {
        /// Number of subjects; overrides the config.
        #[arg(long)]
        n: Option<usize>,
        /// True treatment effect; overrides the config.
        #[arg(long)]
        effect: Option<f64>,
    },
    /// Run one method end to end on a registry.
    Analyze {
        #[arg(long, value_enum)]
        method: MethodArg,
        #[command(flatten)]
        registry: RegistryArgs,
    },
    /// Compare all methods on a registry or over simulated replicates.
    Compare {
        /// Number of simulated replicates; overrides the config.
        #[arg(long)]
        replicates: Option<usize>,
        #[command(flatten)]
        registry: RegistryArgs,
    },
    /// Check registry files against every invariant.
    Validate {
        #[command(flatten)]
        registry: RegistryArgs,
    },
}

fn apply_registry(config: &mut PipelineConfig, args: RegistryArgs) -> Result<()> {
    if args.subjects.is_some() {
        config.subjects = args.subjects;
    }
    if args.visits.is_some() {
        config.visits = args.visits;
    }
    if let Some(path) = args.ingest {
        config.ingest = Some(propproc::registry::IngestConfig::from_json_file(&path)?);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let globals = GlobalArgs {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
        grid: cli.grid,
    };
    let mut config = PipelineConfig::resolve(&globals)?;
    match cli.command {
        Command::Simulate { n, effect } => {
            let mut sim = config.simulation();
            if let Some(n) = n {
                sim.n = n;
            }
            if let Some(effect) = effect {
                sim.outcome.effect = effect;
            }
            config.simulation = Some(sim);
            let out = cmd_simulate(&config)?;
            println!("wrote simulated registry to {}", out.display());
        }
        Command::Analyze { method, registry } => {
            apply_registry(&mut config, registry)?;
            let out = cmd_analyze(&config, method.into())?;
            println!("wrote {} analysis to {}", Method::from(method).label(), out.display());
        }
        Command::Compare { replicates, registry } => {
            apply_registry(&mut config, registry)?;
            if let Some(r) = replicates {
                config.replicates = r;
                config.check()?;
            }
            let out = cmd_compare(&config)?;
            println!("wrote comparison tables to {}", out.display());
        }
        Command::Validate { registry } => {
            apply_registry(&mut config, registry)?;
            let summary = cmd_validate(&config)?;
            println!("{} subjects, {} visits", summary.subjects, summary.visits);
            if summary.report.is_empty() {
                println!("no violations");
            } else {
                for (kind, count) in &summary.report.violations {
                    println!("{kind:?}: {count}");
                }
                return Err(Error::InvalidRegistry(summary.report.violations.values().sum()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
