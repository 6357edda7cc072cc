use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use freeflyer::config::ScenarioFile;
use freeflyer::estimator::EstimationResult;
use freeflyer::io;
use freeflyer::lqr::trajectory_cost;
use freeflyer::pipeline::{run_full, run_segment1, run_segment2, ScenarioConfig, SegmentReport};
use freeflyer::planner::{path_cost, plan, shortcut_smooth, PlannerConfig};
use freeflyer::{Error, State};

#[derive(Parser, Debug)]
#[command(name = "freeflyer", version, about = "Plan, track and estimate for a free-flying robot")]
struct Cli {
    /// Scenario file (TOML); the built-in scenario when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Existing output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Override the master seed from the scenario file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Plan and smooth one transit; writes raw.csv, smoothed.csv, plan.json.
    Plan {
        #[arg(long, value_enum, default_value = "assembly")]
        from: Pose,
        #[arg(long, value_enum, default_value = "printer")]
        to: Pose,
        /// Use the inflated obstacles of the carrying segments.
        #[arg(long)]
        carrying: bool,
    },
    /// Run the assembly scenario through the given segment.
    Pipeline {
        #[arg(long, value_enum, default_value = "all")]
        segment: SegmentChoice,
    },
    /// Write plot-ready columnar files from a finished pipeline run.
    ExportPlots {
        /// Run directory written by `pipeline`.
        run: PathBuf,
        /// What to export; everything when omitted.
        #[arg(long, value_enum)]
        export: Vec<ExportKind>,
    },
    /// Print the default scenario file.
    DefaultConfig,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Pose {
    Assembly,
    Printer,
    SafeArea,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SegmentChoice {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ExportKind {
    Trajectories,
    Estimates,
    Summary,
}

#[derive(Debug, Serialize)]
struct RunManifest {
    config: Option<PathBuf>,
    out: PathBuf,
    seed: u64,
    command: String,
    version: &'static str,
}

#[derive(Debug, Serialize, Deserialize)]
struct SegmentSummary {
    segment: u8,
    collision_violations: usize,
    input_violations: usize,
    state_violations: usize,
    peak_tracking_error: f64,
    terminal_error: f64,
    peak_input: f64,
    input_authority: [f64; 3],
    posterior_mass: Option<(f64, f64)>,
    ablations: Vec<AblationSummary>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AblationSummary {
    name: String,
    model_mass: f64,
    input_authority: [f64; 3],
    peak_tracking_error: Option<f64>,
    terminal_error: Option<f64>,
    failure: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RunSummary {
    completed: bool,
    failure: Option<String>,
    segments: Vec<SegmentSummary>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Algorithm(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if e.is_algorithmic() {
            CliError::Algorithm(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

fn load_scenario(cli: &Cli) -> Result<(ScenarioFile, ScenarioConfig), CliError> {
    let mut file = match &cli.config {
        Some(p) => ScenarioFile::load(p)?,
        None => ScenarioFile::default(),
    };
    if let Some(seed) = cli.seed {
        file.seed = seed;
    }
    let cfg = file.to_scenario()?;
    Ok((file, cfg))
}

fn require_dir(dir: &Path) -> Result<(), CliError> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("output directory {} does not exist", dir.display())))
    }
}

fn write_manifest(cli: &Cli, seed: u64, command: &str) -> Result<(), CliError> {
    let manifest = RunManifest {
        config: cli.config.clone(),
        out: cli.out.clone(),
        seed,
        command: command.into(),
        version: env!("CARGO_PKG_VERSION"),
    };
    io::write_json(&cli.out.join("manifest.json"), &manifest)?;
    Ok(())
}

fn pose(cfg: &ScenarioConfig, p: Pose) -> State {
    match p {
        Pose::Assembly => cfg.assembly_pose,
        Pose::Printer => cfg.printer_pose,
        Pose::SafeArea => cfg.safe_area_pose,
    }
}

fn cmd_plan(cli: &Cli, from: Pose, to: Pose, carrying: bool) -> Result<(), CliError> {
    require_dir(&cli.out)?;
    let (file, cfg) = load_scenario(cli)?;
    write_manifest(cli, file.seed, "plan")?;
    let world = if carrying {
        cfg.world.with_safety_factor(cfg.carrying_safety_factor)
    } else {
        cfg.world.clone()
    };
    let params = cfg.astrobee_params;
    let planner = PlannerConfig {
        rng_seed: file.seed,
        ..cfg.planner.clone()
    };
    let started = Instant::now();
    let res = plan(&pose(&cfg, from), &pose(&cfg, to), &world, &params, &planner)?;
    let mut rng = ChaCha8Rng::seed_from_u64(file.seed.wrapping_add(1));
    let smoothed = shortcut_smooth(&res.trajectory, &world, &params, &planner, cfg.smoothing_attempts, &mut rng)?;
    io::write_trajectory(&cli.out.join("raw.csv"), &res.trajectory)?;
    io::write_trajectory(&cli.out.join("smoothed.csv"), &smoothed)?;
    let cost = &planner.steering.cost;
    let summary = serde_json::json!({
        "stats": res.stats,
        "raw_cost": path_cost(&res.trajectory, cost),
        "smoothed_cost": trajectory_cost(&smoothed, res.trajectory.final_state(), cost),
        "raw_steps": res.trajectory.steps(),
        "smoothed_steps": smoothed.steps(),
    });
    io::write_json(&cli.out.join("plan.json"), &summary)?;
    io::write_json(&cli.out.join("timing.json"), &serde_json::json!({ "plan": started.elapsed().as_secs_f64() }))?;
    eprintln!("plan: {} nodes, {} steps after smoothing", res.stats.nodes, smoothed.steps());
    Ok(())
}

fn summarize(r: &SegmentReport) -> SegmentSummary {
    let t = &r.tracking;
    SegmentSummary {
        segment: r.segment,
        collision_violations: t.violations.collision,
        input_violations: t.violations.input,
        state_violations: t.violations.state,
        peak_tracking_error: t.peak_tracking_error,
        terminal_error: t.terminal_error,
        peak_input: t.peak_input,
        input_authority: r.input_authority,
        posterior_mass: r.posterior.map(|b| (b.mu, b.sigma)),
        ablations: r
            .ablations
            .iter()
            .map(|a| AblationSummary {
                name: a.name.clone(),
                model_mass: a.model_mass,
                input_authority: a.input_authority,
                peak_tracking_error: a.run.as_ref().map(|x| x.peak_tracking_error),
                terminal_error: a.run.as_ref().map(|x| x.terminal_error),
                failure: a.failure.clone(),
            })
            .collect(),
    }
}

fn write_segment(out: &Path, r: &SegmentReport) -> Result<(), CliError> {
    let dir = out.join(format!("segment{}", r.segment));
    fs::create_dir_all(&dir)?;
    io::write_trajectory(&dir.join("planned.csv"), &r.planned)?;
    io::write_trajectory(&dir.join("executed.csv"), r.executed())?;
    if let Some(est) = &r.estimation {
        io::write_json(&dir.join("estimation.json"), est)?;
    }
    for (i, a) in r.ablations.iter().enumerate() {
        if let Some(run) = &a.run {
            io::write_trajectory(&dir.join(format!("ablation{}.csv", i + 1)), &run.executed)?;
        }
    }
    io::write_json(&dir.join("report.json"), &r.without_timing())?;
    Ok(())
}

/// Segments 1 through `last`, keeping completed reports on failure.
fn run_through(cfg: &ScenarioConfig, last: u8) -> (Vec<SegmentReport>, Option<Error>) {
    if last == 3 {
        return match run_full(cfg) {
            Ok(r) => (r, None),
            Err(f) => (f.completed, Some(f.error)),
        };
    }
    let mut reports = Vec::new();
    let s1 = match run_segment1(cfg) {
        Ok(r) => r,
        Err(e) => return (reports, Some(e)),
    };
    let end = *s1.executed().final_state();
    reports.push(s1);
    if last == 2 {
        match run_segment2(cfg, &end) {
            Ok(r) => reports.push(r),
            Err(e) => return (reports, Some(e)),
        }
    }
    (reports, None)
}

fn cmd_pipeline(cli: &Cli, segment: SegmentChoice) -> Result<(), CliError> {
    require_dir(&cli.out)?;
    let (file, cfg) = load_scenario(cli)?;
    write_manifest(cli, file.seed, "pipeline")?;
    io::write_atomic(
        &cli.out.join("scenario.toml"),
        file.to_toml_string()?.as_bytes(),
    )?;
    let last = match segment {
        SegmentChoice::One => 1,
        SegmentChoice::Two => 2,
        SegmentChoice::Three | SegmentChoice::All => 3,
    };
    let started = Instant::now();
    let (reports, error) = run_through(&cfg, last);
    for r in &reports {
        write_segment(&cli.out, r)?;
        eprintln!(
            "segment {}: {} violations, terminal error {:.3e} m, {:.2} s",
            r.segment,
            r.violations(),
            r.tracking.terminal_error,
            r.wall_clock
        );
    }
    let summary = RunSummary {
        completed: error.is_none(),
        failure: error.as_ref().map(|e| e.to_string()),
        segments: reports.iter().map(summarize).collect(),
    };
    io::write_json(&cli.out.join("summary.json"), &summary)?;
    let timing = serde_json::json!({
        "segments": reports.iter().map(|r| (r.segment, r.wall_clock)).collect::<Vec<_>>(),
        "total": started.elapsed().as_secs_f64(),
    });
    io::write_json(&cli.out.join("timing.json"), &timing)?;
    match error {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn cmd_export(cli: &Cli, run: &Path, kinds: &[ExportKind]) -> Result<(), CliError> {
    let want = |k| kinds.is_empty() || kinds.contains(&k);
    let summary_path = run.join("summary.json");
    if !summary_path.is_file() {
        return Err(CliError::Usage(format!("{} is not a pipeline run directory", run.display())));
    }
    let summary: RunSummary = serde_json::from_str(&fs::read_to_string(&summary_path)?)
        .map_err(|e| CliError::Usage(format!("{}: {e}", summary_path.display())))?;
    let out = if cli.out == Path::new(".") { run.join("plots") } else { cli.out.clone() };
    fs::create_dir_all(&out)?;
    let mut written = 0usize;
    for s in &summary.segments {
        let dir = run.join(format!("segment{}", s.segment));
        if want(ExportKind::Trajectories) {
            for name in ["planned", "executed"] {
                let traj = io::read_trajectory(&dir.join(format!("{name}.csv")))?;
                let stem = format!("segment{}_{name}", s.segment);
                io::write_atomic(&out.join(format!("{stem}_position.csv")), io::position_history_csv(&traj).as_bytes())?;
                io::write_atomic(&out.join(format!("{stem}_attitude.csv")), io::attitude_history_csv(&traj).as_bytes())?;
                io::write_atomic(&out.join(format!("{stem}_inputs.csv")), io::input_history_csv(&traj).as_bytes())?;
                written += 3;
            }
            for i in 1..=s.ablations.len() {
                let p = dir.join(format!("ablation{i}.csv"));
                if p.is_file() {
                    let traj = io::read_trajectory(&p)?;
                    let stem = format!("segment{}_ablation{i}", s.segment);
                    io::write_atomic(&out.join(format!("{stem}_position.csv")), io::position_history_csv(&traj).as_bytes())?;
                    io::write_atomic(&out.join(format!("{stem}_inputs.csv")), io::input_history_csv(&traj).as_bytes())?;
                    written += 2;
                }
            }
        }
        if want(ExportKind::Estimates) {
            let p = dir.join("estimation.json");
            if p.is_file() {
                let est: EstimationResult = serde_json::from_str(&fs::read_to_string(&p)?)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                io::write_atomic(
                    &out.join(format!("segment{}_estimates.csv", s.segment)),
                    io::estimate_history_csv(&est).as_bytes(),
                )?;
                written += 1;
            }
        }
    }
    if want(ExportKind::Summary) {
        let mut text = String::from("segment,collision_violations,input_violations,state_violations,peak_tracking_error,terminal_error,peak_input\n");
        for s in &summary.segments {
            text.push_str(&format!(
                "{},{},{},{},{:.16e},{:.16e},{:.16e}\n",
                s.segment,
                s.collision_violations,
                s.input_violations,
                s.state_violations,
                s.peak_tracking_error,
                s.terminal_error,
                s.peak_input
            ));
        }
        io::write_atomic(&out.join("summary.csv"), text.as_bytes())?;
        written += 1;
    }
    eprintln!("wrote {written} files to {}", out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Plan { from, to, carrying } => cmd_plan(cli, *from, *to, *carrying),
        Command::Pipeline { segment } => cmd_pipeline(cli, *segment),
        Command::ExportPlots { run, export } => cmd_export(cli, run, export),
        Command::DefaultConfig => {
            print!("{}", ScenarioFile::default().to_toml_string()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Algorithm(msg)) => {
            eprintln!("failed: {msg}");
            ExitCode::from(2)
        }
    }
}
