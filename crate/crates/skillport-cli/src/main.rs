//! `skillport` — synthesize, transport and replay keypoint-parametrized
//! skills from the command line.
//!
//! Verbs: `synth` writes scenario artifacts, `transport` generalizes a
//! demonstration to new keypoints, `execute` replays a transported
//! demonstration in the kinematic simulator, `report` sweeps scenarios into
//! a CSV table. Exit code 0 means no pipeline error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};

use skillport::demonstration::{load_demonstration, load_transported, save_demonstration};
use skillport::policy::{PolicyConfig, GAMMA_DEFAULT, SERVO_STEP_DEFAULT, WINDOW_DEFAULT};
use skillport::projection::project_and_shift;
use skillport::scenarios::{
    builtin_scenario, load_scenario, load_sweep_scenarios, report_csv, run_report,
    sweep_has_failures, write_scenario_files, RunConfig,
};
use skillport::simulation::{
    run_rollout, write_trace_csv, write_trace_json, FollowerConfig, SimError, ALPHA_DEFAULT,
    MAX_STEPS_DEFAULT, TOL_TRACK_DEFAULT,
};
use skillport::transport::{load_keypoints, KeypointLabel, LAMBDA_DEFAULT};
use skillport::DeformationMap;

#[derive(Parser)]
#[command(
    name = "skillport",
    about = "Keypoint-parametrized skill transport and replay for a hybrid rigid/soft arm",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the demonstration and keypoint files of a scenario.
    Synth {
        /// Builtin scenario name or path to a scenario JSON file.
        scenario: String,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// Target-keypoint variant index.
        #[arg(long, default_value_t = 0)]
        variant: usize,
    },
    /// Transport a demonstration to new keypoints.
    Transport {
        /// Demonstration JSON file.
        #[arg(long)]
        demo: PathBuf,
        /// Source keypoints JSON file.
        #[arg(long)]
        source: PathBuf,
        /// Target keypoints JSON file.
        #[arg(long)]
        target: PathBuf,
        /// Transported demonstration output path.
        #[arg(long)]
        out: PathBuf,
        /// Transport report JSON output path (defaults to `<out>.report.json`).
        #[arg(long)]
        report: Option<PathBuf>,
        /// Kernel ridge λ.
        #[arg(long, default_value_t = LAMBDA_DEFAULT)]
        lambda: f64,
        /// Skip the keypoint projection onto the trajectory (ablation).
        #[arg(long)]
        no_projection: bool,
    },
    /// Replay a transported demonstration in the kinematic simulator.
    Execute {
        /// Transported demonstration JSON file.
        #[arg(long)]
        demo: PathBuf,
        /// Output prefix; writes `<prefix>.json` and `<prefix>.csv`.
        #[arg(long, default_value = "trace")]
        out_prefix: PathBuf,
        /// Follower gain α ∈ (0, 1].
        #[arg(long, default_value_t = ALPHA_DEFAULT)]
        alpha: f64,
        /// Policy time-term weight γ.
        #[arg(long, default_value_t = GAMMA_DEFAULT)]
        gamma: f64,
        /// Policy forward search window, samples.
        #[arg(long, default_value_t = WINDOW_DEFAULT)]
        window: usize,
        /// Rollout step budget.
        #[arg(long, default_value_t = MAX_STEPS_DEFAULT)]
        max_steps: usize,
        /// Servo increment per step, radians.
        #[arg(long, default_value_t = SERVO_STEP_DEFAULT)]
        servo_step: f64,
        /// Convergence tolerance on the final position, meters.
        #[arg(long, default_value_t = TOL_TRACK_DEFAULT)]
        tol_track: f64,
    },
    /// Sweep scenarios and write an aggregate CSV table.
    Report {
        /// Sweep configuration JSON; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// CSV output path; stdout when omitted and the config names none.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            scenario,
            out_dir,
            variant,
        } => cmd_synth(&scenario, &out_dir, variant),
        Command::Transport {
            demo,
            source,
            target,
            out,
            report,
            lambda,
            no_projection,
        } => cmd_transport(&demo, &source, &target, &out, report, lambda, no_projection),
        Command::Execute {
            demo,
            out_prefix,
            alpha,
            gamma,
            window,
            max_steps,
            servo_step,
            tol_track,
        } => cmd_execute(
            &demo, &out_prefix, alpha, gamma, window, max_steps, servo_step, tol_track,
        ),
        Command::Report { config, out } => cmd_report(config.as_deref(), out.as_deref()),
    }
}

fn resolve_scenario(name_or_path: &str) -> Result<skillport::scenarios::Scenario> {
    if Path::new(name_or_path).is_file() {
        return load_scenario(name_or_path)
            .with_context(|| format!("loading scenario file '{name_or_path}'"));
    }
    Ok(builtin_scenario(name_or_path)?)
}

fn cmd_synth(scenario: &str, out_dir: &Path, variant: usize) -> Result<()> {
    let scenario = resolve_scenario(scenario)?;
    let paths = write_scenario_files(&scenario, variant, out_dir)?;
    for p in &paths {
        println!("wrote {}", p.display());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_transport(
    demo_path: &Path,
    source_path: &Path,
    target_path: &Path,
    out: &Path,
    report: Option<PathBuf>,
    lambda: f64,
    no_projection: bool,
) -> Result<()> {
    let demo = load_demonstration(demo_path)
        .with_context(|| format!("loading demonstration '{}'", demo_path.display()))?;
    let source = load_keypoints(source_path, KeypointLabel::Source)
        .with_context(|| format!("loading source keypoints '{}'", source_path.display()))?;
    let target = load_keypoints(target_path, KeypointLabel::Target)
        .with_context(|| format!("loading target keypoints '{}'", target_path.display()))?;

    let (fit_source, fit_target, shifts, indices) = if no_projection {
        let zeros = vec![[0.0f64; 3]; source.len()];
        (source.clone(), target.clone(), zeros, Vec::new())
    } else {
        let p = project_and_shift(&demo, &source, &target)?;
        let shifts = p.shifts.iter().map(|d| [d.x, d.y, d.z]).collect();
        (p.projected_source, p.shifted_target, shifts, p.indices)
    };
    let duplicate = fit_source.has_duplicates();
    if duplicate {
        eprintln!("warning: projected source keypoints contain duplicates; relying on the ridge");
    }

    let map = DeformationMap::fit(&fit_source, &fit_target, lambda)?;
    let transported = map.transport_demonstration(&demo)?;
    save_demonstration(&transported, out)
        .with_context(|| format!("writing '{}'", out.display()))?;

    let residuals: Vec<f64> = fit_source
        .points()
        .iter()
        .zip(fit_target.points())
        .map(|(s, t)| (map.evaluate(s) - t).norm())
        .collect();
    for (i, r) in residuals.iter().enumerate() {
        let shift = shifts[i];
        println!(
            "keypoint {i}: residual {r:.3e} m, shift [{}, {}, {}]",
            shift[0], shift[1], shift[2]
        );
    }

    let report_path = report.unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".report.json");
        PathBuf::from(p)
    });
    let doc = serde_json::json!({
        "lambda": lambda,
        "projection": !no_projection,
        "duplicate_projection": duplicate,
        "shifts": shifts,
        "projected_indices": indices,
        "keypoint_residuals": residuals,
    });
    std::fs::write(&report_path, serde_json::to_string_pretty(&doc)?)
        .with_context(|| format!("writing '{}'", report_path.display()))?;
    println!("wrote {} and {}", out.display(), report_path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_execute(
    demo_path: &Path,
    out_prefix: &Path,
    alpha: f64,
    gamma: f64,
    window: usize,
    max_steps: usize,
    servo_step: f64,
    tol_track: f64,
) -> Result<()> {
    let demo = load_transported(demo_path)
        .with_context(|| format!("loading transported demonstration '{}'", demo_path.display()))?;
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(anyhow!("--gamma must be finite and >= 0, got {gamma}"));
    }
    if window < 1 {
        return Err(anyhow!("--window must be >= 1"));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(anyhow!("--alpha must be in (0, 1], got {alpha}"));
    }
    if !servo_step.is_finite() || servo_step <= 0.0 {
        return Err(anyhow!("--servo-step must be > 0, got {servo_step}"));
    }
    if max_steps < 1 {
        return Err(anyhow!("--max-steps must be >= 1"));
    }
    if !tol_track.is_finite() || tol_track <= 0.0 {
        return Err(anyhow!("--tol-track must be > 0, got {tol_track}"));
    }
    let policy = PolicyConfig { gamma, window };
    let follower = FollowerConfig {
        alpha,
        servo_step,
        tol_track,
        ..FollowerConfig::default()
    };
    let json_path = with_extension(out_prefix, "json");
    let csv_path = with_extension(out_prefix, "csv");

    match run_rollout(&demo, &policy, &follower, max_steps) {
        Ok(trace) => {
            write_trace_json(&trace, &json_path)?;
            write_trace_csv(&trace, &csv_path)?;
            println!(
                "converged in {} steps, final position error {:.3e} m",
                trace.steps(),
                trace.final_error
            );
            println!("wrote {} and {}", json_path.display(), csv_path.display());
            Ok(())
        }
        Err(SimError::DidNotConverge {
            steps,
            final_error,
            trace,
        }) => {
            write_trace_json(&trace, &json_path)?;
            write_trace_csv(&trace, &csv_path)?;
            println!("wrote {} and {}", json_path.display(), csv_path.display());
            Err(anyhow!(
                "DidNotConverge: {steps} steps used, final position error {final_error:.3e} m"
            ))
        }
    }
}

fn cmd_report(config_path: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let config = match config_path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config '{}'", p.display()))?;
            RunConfig::from_json_str(&text)?
        }
        None => RunConfig::default(),
    };
    let scenarios = load_sweep_scenarios(&config)?;
    let rows = run_report(&scenarios, &config);
    let csv = report_csv(&rows);

    let out_path = out.map(Path::to_path_buf).or(config.output.clone());
    match &out_path {
        Some(p) => {
            std::fs::write(p, &csv).with_context(|| format!("writing '{}'", p.display()))?;
            println!("wrote {} ({} rows)", p.display(), rows.len());
        }
        None => print!("{csv}"),
    }
    for row in &rows {
        if let Err(e) = &row.result {
            eprintln!("failed: {}/{}: {e}", row.scenario, row.variant);
        }
    }
    if sweep_has_failures(&rows) {
        return Err(anyhow!("sweep finished with failing variants"));
    }
    Ok(())
}

fn with_extension(prefix: &Path, ext: &str) -> PathBuf {
    let mut p = prefix.as_os_str().to_owned();
    p.push(".");
    p.push(ext);
    PathBuf::from(p)
}
