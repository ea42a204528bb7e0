use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use rmpc_core::certify::{check_conditions, classify_kkt};
use rmpc_core::fixtures::{irregular_by_name, regular_by_name, IrregularKind, REGULAR_FIXTURES};
use rmpc_core::harness::{
    emit_csv, multistart, run_reproduce_paper, ExperimentConfig, HarnessError,
};
use rmpc_core::hydraulics::tracking_objective;
use rmpc_core::optimizer::minimize;
use rmpc_core::problem::RmpcProblem;
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "rmpc",
    about = "Reduced-space MPC of a river reach with KKT certificates"
)]
struct Cli {
    /// JSON experiment config; the built-in paper preset when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for Latin-hypercube sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for CSV/JSON artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the reach under a constant release or a release series file.
    Simulate {
        #[arg(long, conflicts_with = "control")]
        release: Option<f64>,
        /// JSON array or one value per line.
        #[arg(long)]
        control: Option<PathBuf>,
    },
    /// Optimise the release from the all-zero start (projected onto the bounds).
    Optimize,
    /// Optimise, then check the regularity conditions and classify the KKT point.
    Certify,
    /// Latin-hypercube multi-start.
    Multistart {
        #[arg(long)]
        starts: Option<usize>,
    },
    /// Full study with all threshold checks; exit code 2 if any fails.
    ReproducePaper {
        #[arg(long)]
        starts: Option<usize>,
    },
    /// Analytic test problems.
    Fixtures {
        #[command(subcommand)]
        action: FixtureAction,
    },
}

#[derive(Subcommand)]
enum FixtureAction {
    List,
    Run { name: String },
}

/// Threshold failures; distinct from configuration and numerical errors.
struct ThresholdFailure(String);

enum Failure {
    Harness(HarnessError),
    Threshold(ThresholdFailure),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        Failure::Harness(e)
    }
}

impl From<rmpc_core::problem::ProblemError> for Failure {
    fn from(e: rmpc_core::problem::ProblemError) -> Self {
        Failure::Harness(e.into())
    }
}

fn write_json(dir: &Path, name: &str, value: &serde_json::Value) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value).expect("json");
    text.push('\n');
    fs::write(&path, text).map_err(|source| HarnessError::Io { path, source })?;
    Ok(())
}

fn read_series(path: &Path) -> Result<Vec<f64>, Failure> {
    let text = fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let t = text.trim();
    let parsed = if t.starts_with('[') {
        serde_json::from_str(t).map_err(|e| e.to_string())
    } else {
        t.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| l.parse::<f64>().map_err(|e| format!("{l:?}: {e}")))
            .collect()
    };
    parsed.map_err(|m| Failure::Harness(HarnessError::Config(format!("{}: {m}", path.display()))))
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::paper(),
    };
    if let Some(seed) = cli.seed {
        cfg.multistart.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let mut cfg = load_config(cli)?;
    let out = cfg.output_dir.clone();
    match &cli.command {
        Command::Simulate { release, control } => {
            let p = cfg.build_problem()?;
            let u = match (release, control) {
                (_, Some(path)) => read_series(path)?,
                (Some(r), None) => vec![*r; cfg.channel.horizon],
                (None, None) => vec![p.initial().outflow(); cfg.channel.horizon],
            };
            if u.len() != cfg.channel.horizon {
                return Err(HarnessError::Config(format!(
                    "control has {} values, horizon is {}",
                    u.len(),
                    cfg.channel.horizon
                ))
                .into());
            }
            let traj = p
                .simulate(&u)
                .map_err(|e| HarnessError::Numerical(e.to_string()))?;
            fs::create_dir_all(&out).map_err(|source| HarnessError::Io {
                path: out.clone(),
                source,
            })?;
            emit_csv(&cfg.channel, &traj, &out.join("trajectory.csv"))?;
            let f = tracking_objective(&traj, cfg.channel.target_level, cfg.exponent);
            println!("objective {f:.12e}");
            println!("wrote {}", out.join("trajectory.csv").display());
        }
        Command::Optimize => {
            let p = cfg.build_problem()?;
            let t = Instant::now();
            let r = minimize(&p, &vec![0.0; cfg.channel.horizon], &cfg.optimizer)?;
            let secs = t.elapsed().as_secs_f64();
            let traj = p
                .simulate(&r.u_star)
                .map_err(|e| HarnessError::Numerical(e.to_string()))?;
            write_json(
                &out,
                "optimization.json",
                &serde_json::to_value(&r).expect("json"),
            )?;
            emit_csv(&cfg.channel, &traj, &out.join("trajectory.csv"))?;
            println!(
                "{:?} after {} iterations in {secs:.2} s: f* = {:.12e}, KKT residual {:.3e}, {} active bounds",
                r.termination,
                r.iterations,
                r.f_star,
                r.kkt_residual,
                r.active_set.len()
            );
            if !r.converged() {
                return Err(Failure::Threshold(ThresholdFailure(
                    "optimizer did not converge".into(),
                )));
            }
        }
        Command::Certify => {
            let p = cfg.build_problem()?;
            let r = minimize(&p, &vec![0.0; cfg.channel.horizon], &cfg.optimizer)?;
            let report = check_conditions(
                &p,
                cfg.certify.condition_samples,
                cfg.multistart.seed,
                cfg.execution,
            );
            write_json(&out, "conditions.json", &report.to_json())?;
            let cert = classify_kkt(&p, &r, cfg.certify.kkt_tol)
                .map_err(|e| Failure::Threshold(ThresholdFailure(e.to_string())))?;
            write_json(&out, "certificate.json", &cert.to_json())?;
            println!(
                "classification {:?}: {}",
                cert.classification, cert.guarantee
            );
            println!("conditions failing: {:?}", report.failed());
            if !report.all_pass() {
                return Err(Failure::Threshold(ThresholdFailure(
                    "regularity conditions not all satisfied".into(),
                )));
            }
        }
        Command::Multistart { starts } => {
            if let Some(n) = starts {
                cfg.multistart.starts = *n;
            }
            cfg.validate()?;
            let p = cfg.build_problem()?;
            let s = multistart(
                &p,
                cfg.multistart.starts,
                cfg.multistart.seed,
                &cfg.optimizer,
                cfg.execution,
            )?;
            write_json(
                &out,
                "multistart.json",
                &serde_json::to_value(&s).expect("json"),
            )?;
            println!(
                "{} of {} starts converged; max coordinate std {:.3e}; objective spread {:.3e}",
                s.converged, s.n_starts, s.max_coordinate_std, s.objective_spread
            );
            if s.max_coordinate_std > 1e-6
                || s.objective_spread.is_nan()
                || s.objective_spread > 1e-8
            {
                return Err(Failure::Threshold(ThresholdFailure(
                    "multi-start dispersion above threshold".into(),
                )));
            }
        }
        Command::ReproducePaper { starts } => {
            if let Some(n) = starts {
                cfg.multistart.starts = *n;
            }
            cfg.validate()?;
            let t = Instant::now();
            let report = run_reproduce_paper(&cfg, Some(&out))?;
            for c in &report.checks {
                println!(
                    "{} {:<40} value {:.4e} threshold {:.4e}",
                    if c.pass { "PASS" } else { "FAIL" },
                    c.name,
                    c.value,
                    c.threshold
                );
            }
            println!(
                "finished in {:.1} s; artifacts in {}",
                t.elapsed().as_secs_f64(),
                out.display()
            );
            if !report.all_pass() {
                return Err(Failure::Threshold(ThresholdFailure(
                    "threshold checks failed".into(),
                )));
            }
        }
        Command::Fixtures { action } => match action {
            FixtureAction::List => {
                for name in REGULAR_FIXTURES {
                    println!("{name}\tregular");
                }
                for k in IrregularKind::ALL {
                    println!(
                        "{}\tirregular (fails condition {})",
                        k.name(),
                        k.violated_condition()
                    );
                }
            }
            FixtureAction::Run { name } => run_fixture(&cfg, name, &out)?,
        },
    }
    Ok(())
}

fn run_fixture(cfg: &ExperimentConfig, name: &str, out: &Path) -> Result<(), Failure> {
    let seed = cfg.multistart.seed;
    let samples = cfg.certify.condition_samples;
    if let Some(p) = regular_by_name(name) {
        let p: &dyn RmpcProblem = p.as_ref();
        let report = check_conditions(p, samples, seed, cfg.execution);
        let r = minimize(
            p,
            &p.bounds().center(),
            &rmpc_core::optimizer::OptimizerConfig::default(),
        )?;
        let cert = classify_kkt(p, &r, cfg.certify.kkt_tol)
            .map_err(|e| Failure::Threshold(ThresholdFailure(e.to_string())))?;
        let doc = json!({
            "fixture": name,
            "conditions": report.to_json(),
            "optimization": r,
            "certificate": cert.to_json(),
        });
        write_json(out, &format!("{name}.json"), &doc)?;
        println!(
            "{name}: conditions failing {:?}; f* = {:.6e}; {:?}",
            report.failed(),
            r.f_star,
            cert.classification
        );
        if !report.all_pass() {
            return Err(Failure::Threshold(ThresholdFailure(format!(
                "{name} failed conditions {:?}",
                report.failed()
            ))));
        }
        Ok(())
    } else if let Some(p) = irregular_by_name(name) {
        let report = check_conditions(&p, samples, seed, cfg.execution);
        let expected = p.kind().violated_condition();
        write_json(
            out,
            &format!("{}.json", p.kind().name()),
            &json!({ "fixture": p.kind().name(), "expected_failure": expected, "conditions": report.to_json() }),
        )?;
        println!(
            "{}: conditions failing {:?} (expected [{expected}])",
            p.kind().name(),
            report.failed()
        );
        if report.failed() != vec![expected] {
            return Err(Failure::Threshold(ThresholdFailure(
                "irregular fixture did not fail exactly its condition".into(),
            )));
        }
        Ok(())
    } else {
        Err(HarnessError::Config(format!(
            "unknown fixture {name:?}; try `rmpc fixtures list`"
        ))
        .into())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Threshold(ThresholdFailure(msg))) => {
            eprintln!("threshold failure: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Harness(e)) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
