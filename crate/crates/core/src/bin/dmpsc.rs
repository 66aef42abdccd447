use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;

use dmpsc::bench::{
    self, approach_scenario, make_policy, simulate, CompareConfig, Controller, PolicySpec, SimConfig,
};
use dmpsc::certifier::{Artifacts, Backend, CertSettings};
use dmpsc::distsolve::{ConsensusParams, Distributed};
use dmpsc::netmodel::{build_chain_benchmark, ChainParams, NetworkModel};
use dmpsc::terminal::TerminalOptions;
use dmpsc::tube::{rpi_certificate, verify_rpi_monte_carlo, TauChoice, TubeOptions};
use dmpsc::{Error, Result};

#[derive(Parser)]
#[command(name = "dmpsc", version, about = "Distributed predictive safety certification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize tube, tightened constraints and terminal ingredients.
    Synth {
        #[command(flatten)]
        model: ModelArg,
        /// Global multiplier, or `auto` to search for the best one.
        #[arg(long, default_value = "0.055")]
        tau: TauChoice,
        #[arg(long, default_value = "artifacts.json")]
        out: PathBuf,
        /// Also write the model that was used.
        #[arg(long)]
        model_out: Option<PathBuf>,
    },
    /// Check a tube by sampling one closed-loop step from its boundary.
    VerifyTube {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long)]
        artifacts: Option<PathBuf>,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Multiply every `P_i` by this factor first (negative control).
        #[arg(long)]
        corrupt: Option<f64>,
    },
    /// Run one closed loop and write its trace.
    CertifyRun(RunArgs),
    /// Compare the two certified policies with the tube MPC baseline.
    Compare {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long)]
        artifacts: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        runs: usize,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long, default_value_t = 10)]
        horizon: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "compare-out")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ModelArg {
    /// Model JSON; the 9-mass chain benchmark when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
}

impl ModelArg {
    fn load(&self) -> Result<NetworkModel> {
        match &self.model {
            Some(path) => NetworkModel::load(path),
            None => build_chain_benchmark(&ChainParams::benchmark()),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverKind {
    Centralized,
    Distributed,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    model: ModelArg,
    /// Artifact JSON from `synth`; synthesized with defaults when omitted.
    #[arg(long)]
    artifacts: Option<PathBuf>,
    /// zero, linear, nominal-dmpc or external:<file>.
    #[arg(long, default_value = "linear")]
    policy: PolicySpec,
    #[arg(long, default_value = "certified")]
    controller: Controller,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    horizon: usize,
    /// Comma-separated initial state; the approach scenario when omitted.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x0: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value = "centralized")]
    solver: SolverKind,
    #[arg(long, default_value_t = 1.0)]
    rho: f64,
    #[arg(long, default_value_t = 2000)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-5)]
    consensus_tol: f64,
    #[arg(long, default_value = "run-out")]
    out: PathBuf,
}

fn artifacts_for(model: &NetworkModel, path: Option<&Path>) -> Result<Artifacts> {
    match path {
        Some(p) => {
            let a = Artifacts::load(p)?;
            a.check(model)?;
            Ok(a)
        }
        None => Artifacts::synthesize(model, &TubeOptions::default(), &TerminalOptions::default()),
    }
}

fn synth(model: &ModelArg, tau: TauChoice, out: &Path, model_out: Option<&Path>) -> Result<()> {
    let model = model.load()?;
    if let Some(path) = model_out {
        model.save(path)?;
    }
    let options = TubeOptions {
        tau,
        ..TubeOptions::default()
    };
    let artifacts = Artifacts::synthesize(&model, &options, &TerminalOptions::default())?;
    artifacts.save(out)?;
    println!("tau               {:.6}", artifacts.tube.tau_global);
    println!("tube objective    {:.6}", artifacts.tube.objective);
    println!("terminal level    {:.6}", artifacts.terminal.alpha_bar);
    println!("wrote {}", out.display());
    Ok(())
}

fn verify_tube(model: &ModelArg, artifacts: Option<&Path>, samples: usize, seed: u64, corrupt: Option<f64>) -> Result<bool> {
    let model = model.load()?;
    let artifacts = artifacts_for(&model, artifacts)?;
    let tube = match corrupt {
        Some(f) => artifacts.tube.with_scaled_shape(f),
        None => artifacts.tube,
    };
    let cert = rpi_certificate(&model, &tube);
    let report = verify_rpi_monte_carlo(&model, &tube, samples, seed, 1e-9);
    println!(
        "certificate: max eigenvalue {:.3e} (scale {:.3e}), level {:.9}",
        cert.max_eigenvalue, cert.scale, cert.level
    );
    println!(
        "monte carlo: {} samples, {} violations, max level {:.9}",
        report.samples, report.violations, report.max_level
    );
    Ok(report.violations == 0)
}

fn certify_run(args: &RunArgs) -> Result<()> {
    let model = args.model.load()?;
    let artifacts = artifacts_for(&model, args.artifacts.as_deref())?;
    let x0 = match &args.x0 {
        Some(v) if v.len() == model.total_state_dim() => DVector::from_column_slice(v),
        Some(v) => {
            return Err(Error::Dimension(format!(
                "x0 has {} entries, model has {} states",
                v.len(),
                model.total_state_dim()
            )))
        }
        None => approach_scenario(&model, args.seed),
    };
    let mut policy = make_policy(&args.policy, &model)?;
    let config = SimConfig {
        steps: args.steps,
        seed: args.seed,
        cert: CertSettings::with_horizon(args.horizon),
        boundary_disturbances: false,
    };
    let distributed = match args.solver {
        SolverKind::Distributed => Some(Distributed::new(ConsensusParams {
            rho: args.rho,
            max_iter: args.max_iter,
            tol: args.consensus_tol,
            ..ConsensusParams::default()
        })),
        SolverKind::Centralized => None,
    };
    let backend = distributed.as_ref().map(|d| d as &dyn Backend);
    let trace = simulate(&model, &artifacts, policy.as_mut(), args.controller, &x0, &config, backend)?;

    std::fs::create_dir_all(&args.out)?;
    trace.write_csv(&model, args.out.join("trace.csv"))?;
    trace.write_json(args.out.join("trace.json"))?;
    if let Some(d) = &distributed {
        write_telemetry(d, &args.out.join("telemetry.jsonl"))?;
        let fell_back = d.reports().iter().filter(|r| r.fell_back).count();
        println!("distributed solves: {}, centralized fallbacks: {fell_back}", d.reports().len());
    }
    let fallbacks = trace
        .statuses()
        .filter(|&s| s == bench::StepStatus::Fallback)
        .count();
    println!(
        "{} steps, cost {:.6}, state violations {}, input violations {}, fallbacks {}",
        trace.steps.len(),
        trace.total_cost,
        trace.state_violations,
        trace.input_violations,
        fallbacks
    );
    println!("wrote {}", args.out.display());
    Ok(())
}

fn write_telemetry(backend: &Distributed, path: &Path) -> Result<()> {
    let mut lines = String::new();
    for (step, report) in backend.reports().iter().enumerate() {
        let Some(t) = &report.telemetry else {
            lines.push_str(&serde_json::to_string(&serde_json::json!({
                "solve": step,
                "fell_back": true,
                "iterations": report.iterations,
                "primal_residual": report.primal,
                "dual_residual": report.dual,
            }))?);
            lines.push('\n');
            continue;
        };
        for r in &t.records {
            let mut v = serde_json::to_value(r)?;
            v["solve"] = step.into();
            lines.push_str(&serde_json::to_string(&v)?);
            lines.push('\n');
        }
    }
    std::fs::write(path, lines)?;
    Ok(())
}

fn compare(model: &ModelArg, artifacts: Option<&Path>, config: CompareConfig, out: &Path) -> Result<()> {
    let model = model.load()?;
    let artifacts = artifacts_for(&model, artifacts)?;
    let summary = bench::compare_controllers(&model, &artifacts, &config)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!("{:<14} {:>10} {:>10} {:>10} {:>12} {:>10}", "variant", "cost q1", "median", "q3", "solve ms", "violations");
    for v in &summary.variants {
        println!(
            "{:<14} {:>10.4} {:>10.4} {:>10.4} {:>12.2} {:>10}",
            v.name,
            v.cost.q1,
            v.cost.median,
            v.cost.q3,
            v.solve_time.median,
            v.state_violations + v.input_violations
        );
    }
    println!("wrote {}", out.join("summary.json").display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Synth {
            model,
            tau,
            out,
            model_out,
        } => synth(model, tau.clone(), out, model_out.as_deref()).map(|_| true),
        Command::VerifyTube {
            model,
            artifacts,
            samples,
            seed,
            corrupt,
        } => verify_tube(model, artifacts.as_deref(), *samples, *seed, *corrupt),
        Command::CertifyRun(args) => certify_run(args).map(|_| true),
        Command::Compare {
            model,
            artifacts,
            runs,
            steps,
            horizon,
            seed,
            out,
        } => compare(
            model,
            artifacts.as_deref(),
            CompareConfig {
                runs: *runs,
                steps: *steps,
                horizon: *horizon,
                seed: *seed,
                ..CompareConfig::default()
            },
            out,
        )
        .map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
