use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vmoe::backend::BackendKind;
use vmoe::diversity::DEFAULT_WINDOW;
use vmoe::harness::{self, AblationVariant, ExperimentSpec, Overrides};
use vmoe::{oracle, Error, Result};

/// Virtual mixture-of-experts decoding experiments.
#[derive(Debug, Parser)]
#[command(name = "vmoe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (JSON); defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendKind>,
    /// Output directory (the directory to summarize for `report`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Expert counts, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    experts: Option<Vec<usize>>,
    /// Ablation variant for `eval`.
    #[arg(long, global = true)]
    variant: Option<AblationVariant>,
    /// Evaluation fixture (JSONL with `question` and `references`).
    #[arg(long, global = true)]
    cases: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Decode every (task, expert count) pair and write traces.
    Generate,
    /// Orthogonality sweep over expert counts: CSVs, heatmaps, line plot.
    Orthogonality,
    /// Compare baseline, full fusion and the two single-module ablations.
    Ablation,
    /// Hallucination rate and latency on a reference-answer fixture.
    Eval,
    /// Consolidate the traces of a run directory.
    Report,
    /// Monte Carlo checks of the ensemble statistics.
    Oracle,
}

fn spec(cli: &Cli) -> Result<ExperimentSpec> {
    let base = match &cli.config {
        Some(path) => ExperimentSpec::load(path)?,
        None => ExperimentSpec::default(),
    };
    let spec = base.with_overrides(&Overrides {
        seed: cli.seed,
        backend: cli.backend,
        out: cli.out.clone(),
        steps: cli.steps,
        experts: cli.experts.clone(),
        cases: cli.cases.clone(),
    });
    spec.validate()?;
    Ok(spec)
}

fn run(cli: &Cli) -> Result<()> {
    let spec = spec(cli)?;
    let out = &spec.output_dir;
    match cli.command {
        Command::Generate => {
            for path in harness::generate_all(&spec)? {
                println!("{}", path.display());
            }
        }
        Command::Orthogonality => {
            let sweep = harness::run_orthogonality_experiment(&spec)?;
            println!("task,experts,mean_orthogonality,final_smoothed_{DEFAULT_WINDOW}");
            for c in &sweep.cells {
                let last = c.scores.smoothed.last().copied().unwrap_or(f64::NAN);
                println!(
                    "{},{},{:.6},{:.6}",
                    c.task_index,
                    c.num_experts,
                    c.mean_orthogonality(),
                    last
                );
            }
            println!("wrote {} files under {}", sweep.files.len(), out.display());
        }
        Command::Ablation => {
            let report = harness::run_ablation(&spec)?;
            report.write(out)?;
            print!("{}", report.to_csv());
        }
        Command::Eval => {
            let path = spec
                .eval_cases
                .clone()
                .ok_or_else(|| Error::config("eval needs --cases or eval_cases in the config"))?;
            let cases = harness::load_cases(&path)?;
            let variant = cli.variant.unwrap_or(AblationVariant::FusionFull);
            let report = harness::run_eval(&spec, &cases, variant)?;
            let written = harness::write_eval_report(out, &report)?;
            println!(
                "{variant}: {} experts, hallucination rate {:.4} ({}/{}), mean latency {:.3} ms",
                report.num_experts,
                report.hallucination_rate,
                report.hallucinated,
                report.total,
                report.mean_latency_ms
            );
            println!("wrote {}", written.display());
        }
        Command::Report => {
            let bundle = harness::emit_report(out)?;
            println!(
                "{} runs, {} warnings",
                bundle.aggregate.runs,
                bundle.warnings.len()
            );
            for w in &bundle.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::Oracle => {
            let reports = oracle::run_suite(spec.seed)?;
            let mut json = serde_json::to_string_pretty(&reports)?;
            json.push('\n');
            let path = out.join("oracle.json");
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
            for r in &reports {
                println!(
                    "{} {}: empirical {:.6}",
                    if r.pass { "PASS" } else { "FAIL" },
                    r.claim,
                    r.empirical
                );
            }
            if let Some(failed) = reports.iter().find(|r| !r.pass) {
                return Err(Error::Metric(format!(
                    "oracle check failed: {}",
                    failed.claim
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
