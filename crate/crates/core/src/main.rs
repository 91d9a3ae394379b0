//! Command-line front end of the registration engine.
//!
//! Every subcommand operates on one experiment directory (`--out`): stages
//! read the artifacts earlier stages wrote there and print one summary line
//! each. The process exits non-zero if any requested scenario failed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use defreg::eval::{
    build_graphs, evaluate, gen_data, load_config, register_predictions, report, run_ablation,
    run_libr, run_wicp, train_models, MasterConfig, OutPaths, StageSummary,
};
use defreg::synth::load_manifest;
use defreg::{Error, Result};

#[derive(Parser)]
#[command(
    name = "defreg",
    version,
    about = "Hybrid deformable registration: rigid wICP, elastic-basis LIBR, and the \
             LIBR+ residual network"
)]
struct Cli {
    /// Configuration document; built-in defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the master seed (training and split carving) of the
    /// configuration. Dataset content keeps its own configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Experiment output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset (or verify an existing one).
    GenData,
    /// Rigid initialization: register measurements onto the preoperative
    /// surface for every scenario.
    RunWicp,
    /// Deformable reconstruction: fit the per-geometry elastic basis to the
    /// aligned measurements for every scenario.
    RunLibr,
    /// Materialize the mesh and measurement graphs for every scenario.
    BuildGraphs,
    /// Train one residual network per configured split.
    Train,
    /// Apply each split's trained model to its test scenarios.
    Register,
    /// Compute result tables and per-vertex error fields.
    Evaluate,
    /// Train and evaluate the ablation grid and sparse-weight sweep.
    Ablate,
    /// Re-emit the text tables from the stored machine tables.
    Report,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn print_summaries(summaries: &[StageSummary]) -> bool {
    let mut ok = true;
    for s in summaries {
        println!(
            "{}: {} succeeded, {} failed",
            s.stage,
            s.succeeded,
            s.failures.len()
        );
        for f in &s.failures {
            eprintln!("  [{}] {}", f.scenario, f.error);
            ok = false;
        }
    }
    ok
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::invalid(format!("could not size the thread pool: {e}")))?;
    }

    let mut cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => MasterConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = OutPaths::new(&cli.out);

    match cli.command {
        Command::GenData => {
            let manifest = gen_data(&cfg, &out)?;
            println!(
                "gen-data: {} scenarios ready under {}",
                manifest.scenarios.len(),
                out.data_dir().display()
            );
            return Ok(true);
        }
        Command::Report => {
            for stem in report(&out)? {
                println!(
                    "report: rendered {}",
                    out.tables_dir().join(format!("{stem}.txt")).display()
                );
            }
            return Ok(true);
        }
        _ => {}
    }

    let manifest = load_manifest(&out.data_dir())?;
    let summary = match cli.command {
        Command::RunWicp => run_wicp(&cfg, &out, &manifest),
        Command::RunLibr => run_libr(&cfg, &out, &manifest),
        Command::BuildGraphs => build_graphs(&cfg, &out, &manifest),
        Command::Train => train_models(&cfg, &out, &manifest),
        Command::Register => register_predictions(&cfg, &out, &manifest),
        Command::Evaluate => evaluate(&cfg, &out, &manifest).1,
        Command::Ablate => run_ablation(&cfg, &out, &manifest).1,
        Command::GenData | Command::Report => unreachable!("handled above"),
    };
    Ok(print_summaries(&[summary]))
}
