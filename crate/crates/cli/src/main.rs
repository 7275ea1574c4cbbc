use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ppde_cli::config::ExperimentKind;
use ppde_cli::manifest::{compare_runs, OutputKind};
use ppde_cli::{load_manifest, run, CliError, RunOptions};

#[derive(Parser)]
#[command(name = "ppde", version, about = "Experiments for path-dependent elliptic PDEs")]
struct Cli {
    /// Maximum number of worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's `output`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for sampled experiments; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Exit-time DP against the closed form, with optional Monte Carlo.
    ExitTime(RunArgs),
    /// Distance between two paths.
    Frechet(RunArgs),
    /// Uncertain-volatility price, Perron bracket and MC bounds.
    PriceUvm(RunArgs),
    /// Upper and lower Perron envelopes over a list of depths.
    PerronSweep(RunArgs),
    /// Empirical modulus of continuity.
    ModulusProbe(RunArgs),
    /// Semijet audit of a value functional.
    ViscosityAudit(RunArgs),
    /// Sampled structural checks of generators.
    AssumptionsCheck(RunArgs),
    /// Diff of the key outputs of two runs.
    CompareRuns {
        /// First manifest (or run directory).
        a: PathBuf,
        /// Second manifest (or run directory).
        b: PathBuf,
        /// Write diff.json and diff.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run_experiment(kind: ExperimentKind, args: RunArgs) -> Result<(), CliError> {
    let opts = RunOptions {
        out: args.out,
        seed: args.seed,
    };
    let summary = run(kind, &args.config, &opts)?;
    println!("{kind}: wrote {} artifacts to {}", summary.manifest.artifacts.len() + 1, summary.out_dir.display());
    for k in &summary.manifest.key_outputs {
        match k.std_error {
            Some(se) => println!("  {} = {} (se {se})", k.name, k.value),
            None => println!("  {} = {}", k.name, k.value),
        }
    }
    Ok(())
}

fn compare(a: PathBuf, b: PathBuf, out: Option<PathBuf>) -> Result<(), CliError> {
    let report = compare_runs(&load_manifest(&a)?, &load_manifest(&b)?)?;
    if let Some(dir) = out {
        let io = |source| CliError::Io {
            path: dir.clone(),
            source,
        };
        std::fs::create_dir_all(&dir).map_err(io)?;
        let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
        std::fs::write(dir.join("diff.json"), json).map_err(io)?;
        std::fs::write(dir.join("diff.csv"), report.to_csv()).map_err(io)?;
    }
    if report.is_empty() {
        println!("no differences");
        return Ok(());
    }
    for r in &report.rows {
        let kind = if r.kind == OutputKind::Dp { "dp" } else { "mc" };
        let show = |v: Option<f64>| v.map_or("-".to_string(), |x| x.to_string());
        println!(
            "{:<24} {kind} a={} b={} diff={} tol={} {}",
            r.name,
            show(r.a),
            show(r.b),
            show(r.diff),
            r.tolerance,
            if r.within { "ok" } else { "OUT OF TOLERANCE" }
        );
    }
    for o in &report.orders {
        println!(
            "{:<24} h {} -> {}: gap {:.3e} -> {:.3e}, observed order {:.2}",
            o.name, o.h_a, o.h_b, o.gap_a, o.gap_b, o.order
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: cannot size the worker pool: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::ExitTime(a) => run_experiment(ExperimentKind::ExitTime, a),
        Command::Frechet(a) => run_experiment(ExperimentKind::Frechet, a),
        Command::PriceUvm(a) => run_experiment(ExperimentKind::PriceUvm, a),
        Command::PerronSweep(a) => run_experiment(ExperimentKind::PerronSweep, a),
        Command::ModulusProbe(a) => run_experiment(ExperimentKind::ModulusProbe, a),
        Command::ViscosityAudit(a) => run_experiment(ExperimentKind::ViscosityAudit, a),
        Command::AssumptionsCheck(a) => run_experiment(ExperimentKind::AssumptionsCheck, a),
        Command::CompareRuns { a, b, out } => compare(a, b, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Numerical {
                diagnostics: Some(p), ..
            } = &e
            {
                eprintln!("diagnostics written to {}", p.display());
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
