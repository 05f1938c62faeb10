use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use syntax_sim::harness::{load_summary, render_table, run_experiment, write_outputs};
use syntax_sim::{Error, ExperimentSpec, FactorRegime, LambdaMode, Mismatch, PolicyKind};

#[derive(Parser)]
#[command(name = "syntax-sim", version, about = "Adaptive subpopulation trial simulations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write results.csv and summary.json.
    Run(RunArgs),
    /// Print the comparison table of a finished experiment.
    Report {
        #[arg(long = "in")]
        dir: PathBuf,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    /// TOML experiment file; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated: syntax, conventional, thresholding, synthetic-study, synthetic-design.
    #[arg(long, value_delimiter = ',')]
    policies: Option<Vec<PolicyKind>>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    envs: Option<usize>,
    #[arg(long, value_parser = parse_regime)]
    regime: Option<FactorRegime>,
    #[arg(long, value_parser = parse_mismatch)]
    mismatch: Option<Mismatch>,
    /// `oracle`, `sweep`, or a number.
    #[arg(long)]
    lambda: Option<LambdaMode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to RAYON_NUM_THREADS or the CPU count.
    #[arg(long)]
    threads: Option<usize>,
}

fn parse_regime(s: &str) -> Result<FactorRegime, String> {
    match s {
        "diminishing" => Ok(FactorRegime::Diminishing),
        "increasing" => Ok(FactorRegime::Increasing),
        _ => Err(format!("unknown regime {s:?} (diminishing|increasing)")),
    }
}

fn parse_mismatch(s: &str) -> Result<Mismatch, String> {
    match s {
        "none" => Ok(Mismatch::None),
        "squared" => Ok(Mismatch::SquaredFeatures),
        "fullrank" => Ok(Mismatch::FullRankFactors),
        _ => Err(format!("unknown mismatch {s:?} (none|squared|fullrank)")),
    }
}

fn build_spec(args: &RunArgs) -> Result<ExperimentSpec, Error> {
    let mut spec = match &args.config {
        Some(path) => ExperimentSpec::load(path)?,
        None => ExperimentSpec::default(),
    };
    if let Some(p) = &args.policies {
        spec.policies = p.clone();
    }
    if let Some(h) = args.horizon {
        spec.horizon = h;
    }
    if let Some(r) = args.runs {
        spec.n_runs_per_environment = r;
    }
    if let Some(e) = args.envs {
        spec.n_environments = e;
    }
    if let Some(r) = args.regime {
        spec.sim.factor_regime = r;
    }
    if let Some(m) = args.mismatch {
        spec.sim.mismatch = m;
    }
    if let Some(l) = &args.lambda {
        spec.lambda = l.clone();
    }
    if let Some(s) = args.seed {
        spec.sim.seed = s;
    }
    if let Some(o) = &args.out {
        spec.output_path = o.display().to_string();
    }
    spec.validate()?;
    Ok(spec)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run(args) => {
            let spec = build_spec(&args)?;
            let report = run_experiment(&spec, args.threads)?;
            write_outputs(&report, &spec.output_path)?;
            print!("{}", render_table(&report));
            println!("wrote {}", spec.output_path);
        }
        Command::Report { dir } => print!("{}", render_table(&load_summary(dir)?)),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let doc = serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{doc}");
            ExitCode::FAILURE
        }
    }
}
