//! `slidewin`: generation, solving, calibration, adaptive runs and the cost
//! model from the command line.

mod output;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde_json::json;
use slidewin::hwmodel::{
    cost_report, power_model, sweep, sweep_csv, ActivityTrace, AuditOptions, PowerParams, ScheduleConfig,
    ScheduleMode, WindowDims,
};
use slidewin::io::{
    ground_truth_from_json, ground_truth_to_json, stream_from_json, stream_to_json, to_json, trajectory_csv,
    GeneratorHeader,
};
use slidewin::metrics::ate;
use slidewin::model::{KeyframeState, WindowProblem};
use slidewin::nls::LmConfig;
use slidewin::reconfig::{
    calibrate, run_adaptive, run_fixed, run_max_budget, Budget, CalibrationError, CalibrationOptions,
    CalibrationScene, LookupTable, StreamRun,
};
use slidewin::scenegen::{generate, SceneConfig, SceneError};

use output::OutputDir;

const FORMATS: &str = "\
Formats:
  stream.json        {\"generator\"?, \"gravity\", \"windows\": [...]}; floats with 17 significant
                     digits, quaternions [w,x,y,z], matrices {\"rows\",\"cols\",\"data\"} row-major
  ground_truth.json  {\"keyframes\": [...], \"landmarks\": [{\"id\",\"position\",\"inv_depth\"}]}
  trajectory.csv     kf_id,px,py,pz,qw,qx,qy,qz
  sweep.csv          n,m,mode,cycles,speedup
  table.json         lookup table with provenance (scene seeds, date)
  manifest.json      command, arguments, config paths, seeds, versions, sha256 of every output

Exit codes: 0 success, 2 invalid input, 3 solver failure, 4 insufficient calibration.";

#[derive(Debug, Parser)]
#[command(name = "slidewin", version, about, after_help = FORMATS)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Scene seed for gen (overrides the config's seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "SLIDEWIN_OUT", default_value = "slidewin-out")]
    out: PathBuf,
    /// Where to write per-window solver statistics (default <out>/stats.json).
    #[arg(long, global = true)]
    stats: Option<PathBuf>,
    /// Ground-truth sidecar; enables ATE reporting.
    #[arg(long, global = true)]
    gt: Option<PathBuf>,
    /// run-adaptive: also run every window at the maximum budget and report
    /// the ATE difference (needs --gt).
    #[arg(long, global = true)]
    baseline: bool,
    /// Lookup table for run-adaptive.
    #[arg(long, global = true)]
    table: Option<PathBuf>,
    /// JSON config: scene config for gen, LM config for solve, calibrate and
    /// run-adaptive, power parameters for model.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic window stream and its ground truth.
    Gen,
    /// Sliding-window solve of a stream at the LM config's iteration cap.
    Solve {
        /// Window stream JSON.
        stream: PathBuf,
    },
    /// Build the feature-count lookup table from calibration scenes.
    Calibrate {
        /// Directory of scenes: gen output directories (stream.json +
        /// ground_truth.json) and/or scene config JSON files.
        #[arg(long)]
        scenes: PathBuf,
        /// Target ATE in metres.
        #[arg(long, default_value_t = 1e-4)]
        target: f64,
        /// Provenance date (default: today, UTC).
        #[arg(long)]
        date: Option<String>,
        #[arg(long, default_value_t = 50)]
        bucket_width: usize,
        #[arg(long, default_value_t = 64)]
        features_per_lane: usize,
        #[arg(long, default_value_t = 10)]
        max_iterations: usize,
        #[arg(long, default_value_t = 8)]
        max_update_units: usize,
    },
    /// Sliding-window run with per-window configuration from --table.
    RunAdaptive {
        /// Window stream JSON.
        stream: PathBuf,
    },
    /// Cost model: CostReport JSON and schedule sweep CSV.
    Model {
        /// Window dimensions: `default-window` (11 keyframes, 110 features,
        /// span 4) or `KEYFRAMES,FEATURES,SPAN`.
        #[arg(long, default_value = "default-window", value_parser = parse_dims)]
        audit: WindowDims,
        /// Cholesky dimension (default: 15 per keyframe of --audit).
        #[arg(long)]
        n: Option<usize>,
        /// Update units.
        #[arg(long, default_value_t = 6)]
        m: usize,
        #[arg(long, value_enum, default_value_t = Mode::Pipelined)]
        mode: Mode,
        /// Schur lanes.
        #[arg(long, default_value_t = 2)]
        lanes: usize,
        /// Update units of a user baseline design (default: one per column, n).
        #[arg(long)]
        user_units: Option<usize>,
        /// Keyframes covered by a marginalization prior section.
        #[arg(long, default_value_t = 0)]
        prior_keyframes: usize,
        /// Inclusive sweep range over n, `START-END`.
        #[arg(long, default_value = "60-200", value_parser = parse_range)]
        sweep_n: (usize, usize),
        /// Inclusive sweep range over m, `START-END`.
        #[arg(long, default_value = "4-8", value_parser = parse_range)]
        sweep_m: (usize, usize),
        /// Activity trace (trace.json from run-adaptive) for the power model.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Sequential,
    Pipelined,
}

impl From<Mode> for ScheduleMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Sequential => ScheduleMode::Sequential,
            Mode::Pipelined => ScheduleMode::Pipelined,
        }
    }
}

fn parse_dims(s: &str) -> Result<WindowDims, String> {
    if s == "default-window" {
        return Ok(WindowDims {
            n_keyframes: 11,
            n_features: 110,
            co_obs_span: 4,
        });
    }
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [n_keyframes, n_features, co_obs_span] if n_keyframes > 0 => Ok(WindowDims {
            n_keyframes,
            n_features,
            co_obs_span,
        }),
        _ => Err("expected default-window or KEYFRAMES,FEATURES,SPAN with KEYFRAMES > 0".into()),
    }
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once('-').ok_or("expected START-END")?;
    let a: usize = a.trim().parse().map_err(|e| format!("{a:?}: {e}"))?;
    let b: usize = b.trim().parse().map_err(|e| format!("{b:?}: {e}"))?;
    if a == 0 || a > b {
        return Err("need 1 <= START <= END".into());
    }
    Ok((a, b))
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Solver(String),
    #[error("{0}")]
    Calibration(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Solver(_) => 3,
            CliError::Calibration(_) => 4,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let args: Vec<String> = std::env::args().skip(1).collect();
    match run(cli, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli, args: Vec<String>) -> Result<(), CliError> {
    let g = cli.global;
    match cli.command {
        Command::Gen => cmd_gen(&g, args),
        Command::Solve { stream } => cmd_solve(&g, &stream, args),
        Command::Calibrate {
            scenes,
            target,
            date,
            bucket_width,
            features_per_lane,
            max_iterations,
            max_update_units,
        } => {
            let lm = load_lm(&g)?;
            let opts = CalibrationOptions {
                bucket_width,
                features_per_lane,
                max_iterations,
                max_update_units,
                target_accuracy: target,
                lm,
                date: date.unwrap_or_else(|| chrono::Utc::now().format("%Y-%m-%d").to_string()),
                ..Default::default()
            };
            cmd_calibrate(&g, &scenes, opts, args)
        }
        Command::RunAdaptive { stream } => cmd_run_adaptive(&g, &stream, args),
        Command::Model {
            audit,
            n,
            m,
            mode,
            lanes,
            user_units,
            prior_keyframes,
            sweep_n,
            sweep_m,
            trace,
        } => {
            let schedule = ScheduleConfig {
                n: n.unwrap_or(audit.n_states()),
                update_units: m,
                schur_lanes: lanes,
                mode: mode.into(),
            };
            let model = ModelArgs {
                audit,
                schedule,
                user_units: user_units.unwrap_or(schedule.n),
                prior_keyframes,
                sweep_n,
                sweep_m,
                trace,
            };
            cmd_model(&g, &model, args)
        }
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Parses JSON, anchoring errors at `path:line:column`.
fn parse_json<T: DeserializeOwned>(path: &Path, text: &str) -> Result<T, CliError> {
    serde_json::from_str(text)
        .map_err(|e| CliError::Input(format!("{}:{}:{}: {e}", path.display(), e.line(), e.column())))
}

/// Line of the first occurrence of `"field"` in `text`, if any.
fn field_line(text: &str, field: &str) -> Option<usize> {
    let key = format!("\"{field}\"");
    text.lines().position(|l| l.contains(&key)).map(|k| k + 1)
}

fn load_scene_config(path: &Path) -> Result<SceneConfig, CliError> {
    let text = read(path)?;
    let cfg: SceneConfig = parse_json(path, &text)?;
    if let Err(e) = cfg.validate() {
        return Err(scene_error(path, &text, e));
    }
    Ok(cfg)
}

fn scene_error(path: &Path, text: &str, e: SceneError) -> CliError {
    match &e {
        SceneError::InvalidConfig { field, message } => match field_line(text, field) {
            Some(line) => CliError::Input(format!("{}:{line}: {field}: {message}", path.display())),
            None => CliError::Input(format!("{}: {field}: {message}", path.display())),
        },
        SceneError::NotVisible { .. } => CliError::Input(format!("{}: {e}", path.display())),
    }
}

fn load_lm(g: &Global) -> Result<LmConfig, CliError> {
    let lm = match &g.config {
        Some(path) => parse_json(path, &read(path)?)?,
        None => LmConfig::default(),
    };
    lm.validate().map_err(|e| CliError::Input(e.to_string()))?;
    Ok(lm)
}

fn load_stream(path: &Path) -> Result<Vec<WindowProblem>, CliError> {
    let text = read(path)?;
    let stream = stream_from_json(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    if stream.windows.is_empty() {
        return Err(CliError::Input(format!("{}: stream has no windows", path.display())));
    }
    Ok(stream.windows)
}

fn load_truth(path: &Path) -> Result<Vec<KeyframeState>, CliError> {
    let text = read(path)?;
    ground_truth_from_json(&text)
        .map(|gt| gt.keyframes)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn json_text<T: serde::Serialize + ?Sized>(value: &T) -> String {
    to_json(value).expect("report types serialize")
}

fn cmd_gen(g: &Global, args: Vec<String>) -> Result<(), CliError> {
    let mut out = OutputDir::create(&g.out, "gen", args)?;
    let mut cfg = match &g.config {
        Some(path) => {
            out.config(path);
            load_scene_config(path)?
        }
        None => SceneConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    let scene = generate(&cfg).map_err(|e| match &g.config {
        Some(path) => scene_error(path, &read(path).unwrap_or_default(), e),
        None => CliError::Input(e.to_string()),
    })?;
    out.seed(cfg.seed);
    let stream = stream_to_json(&scene.windows, Some(GeneratorHeader::new(&cfg)))
        .map_err(|e| CliError::Input(e.to_string()))?;
    let gt = ground_truth_to_json(&scene.ground_truth).map_err(|e| CliError::Input(e.to_string()))?;
    out.write("stream.json", &stream)?;
    out.write("ground_truth.json", &gt)?;
    out.finish()?;
    println!(
        "generated {} window(s), {} keyframes, {} features per window, seed {} -> {}",
        scene.windows.len(),
        scene.ground_truth.keyframes.len(),
        cfg.n_features,
        cfg.seed,
        g.out.display()
    );
    Ok(())
}

fn solver_failure(run: &StreamRun) -> Option<CliError> {
    run.windows
        .iter()
        .find_map(|o| o.solver_error.clone())
        .map(CliError::Solver)
}

fn write_stats(out: &mut OutputDir, g: &Global, run: &StreamRun) -> Result<(), CliError> {
    let text = json_text(&run.windows);
    match &g.stats {
        Some(path) => out.write_at(path, &text),
        None => out.write("stats.json", &text).map(|_| ()),
    }
}

fn report_ate(label: &str, trajectory: &[KeyframeState], truth: &[KeyframeState]) -> f64 {
    let e = ate(trajectory, truth);
    println!("{label} {e:.6e} m over {} keyframes", trajectory.len());
    e
}

fn cmd_solve(g: &Global, stream_path: &Path, args: Vec<String>) -> Result<(), CliError> {
    let mut out = OutputDir::create(&g.out, "solve", args)?;
    out.input(stream_path);
    if let Some(path) = &g.config {
        out.config(path);
    }
    let lm = load_lm(g)?;
    let stream = load_stream(stream_path)?;
    let truth = g.gt.as_deref().map(load_truth).transpose()?;
    let budget = Budget {
        iterations: lm.max_iterations,
        schur_lanes: 1,
        update_units: 1,
    };
    let run = run_fixed(&stream, budget, &lm);
    if let Some(e) = solver_failure(&run) {
        write_stats(&mut out, g, &run)?;
        out.finish()?;
        return Err(e);
    }
    out.write("trajectory.csv", &trajectory_csv(&run.trajectory))?;
    write_stats(&mut out, g, &run)?;
    out.finish()?;
    println!("solved {} window(s), {} keyframes", run.windows.len(), run.trajectory.len());
    if let Some(truth) = truth {
        report_ate("ATE", &run.trajectory, &truth);
    }
    Ok(())
}

/// Scenes from a directory: gen output directories and scene config files,
/// in name order.
fn load_scenes(dir: &Path, out: &mut OutputDir) -> Result<Vec<CalibrationScene>, CliError> {
    let io_err = |e: std::io::Error| CliError::Input(format!("{}: {e}", dir.display()));
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(io_err)?;
    entries.sort();
    let mut scenes = Vec::new();
    for path in entries {
        if path.is_dir() {
            let stream_path = path.join("stream.json");
            let gt_path = path.join("ground_truth.json");
            if !stream_path.is_file() || !gt_path.is_file() {
                continue;
            }
            out.input(&stream_path);
            out.input(&gt_path);
            let text = read(&stream_path)?;
            let stream =
                stream_from_json(&text).map_err(|e| CliError::Input(format!("{}: {e}", stream_path.display())))?;
            let Some(window) = stream.windows.first() else {
                return Err(CliError::Input(format!("{}: stream has no windows", stream_path.display())));
            };
            let seed = stream.generator.as_ref().map_or(scenes.len() as u64, |h| h.seed);
            scenes.push(CalibrationScene {
                seed,
                window: window.clone(),
                truth: load_truth(&gt_path)?,
            });
        } else if path.extension().is_some_and(|e| e == "json") {
            out.config(&path);
            let cfg = load_scene_config(&path)?;
            let scene = generate(&cfg).map_err(|e| scene_error(&path, &read(&path).unwrap_or_default(), e))?;
            scenes.push(CalibrationScene::from_scene(cfg.seed, &scene));
        }
    }
    Ok(scenes)
}

fn cmd_calibrate(g: &Global, dir: &Path, opts: CalibrationOptions, args: Vec<String>) -> Result<(), CliError> {
    let mut out = OutputDir::create(&g.out, "calibrate", args)?;
    if let Some(path) = &g.config {
        out.config(path);
    }
    if opts.target_accuracy.is_nan() || opts.target_accuracy <= 0.0 {
        return Err(CliError::Input("--target must be positive".into()));
    }
    let scenes = load_scenes(dir, &mut out)?;
    for s in &scenes {
        out.seed(s.seed);
    }
    let table = calibrate(&scenes, &opts).map_err(|e| match e {
        CalibrationError::InsufficientCalibration { .. } => CliError::Calibration(e.to_string()),
        CalibrationError::Options(_) => CliError::Input(e.to_string()),
    })?;
    out.write("table.json", &json_text(&table))?;
    out.finish()?;
    println!("calibrated {} scene(s) into {} bucket(s)", scenes.len(), table.entries.len());
    for (b, e) in table.entries.iter().enumerate() {
        let lo = b * table.bucket_width;
        println!(
            "  features [{lo}, {}): {} iteration(s), {} lane(s), {} update unit(s), {} scene(s){}",
            lo + table.bucket_width,
            e.iterations,
            e.schur_lanes,
            e.update_units,
            e.scenes,
            if e.flagged { ", flagged" } else { "" }
        );
    }
    Ok(())
}

fn cmd_run_adaptive(g: &Global, stream_path: &Path, args: Vec<String>) -> Result<(), CliError> {
    let mut out = OutputDir::create(&g.out, "run-adaptive", args)?;
    out.input(stream_path);
    let Some(table_path) = &g.table else {
        return Err(CliError::Input("run-adaptive needs --table".into()));
    };
    out.config(table_path);
    if let Some(path) = &g.config {
        out.config(path);
    }
    if g.baseline && g.gt.is_none() {
        return Err(CliError::Input("--baseline needs --gt to compare trajectories".into()));
    }
    let lm = load_lm(g)?;
    let table: LookupTable = parse_json(table_path, &read(table_path)?)?;
    let stream = load_stream(stream_path)?;
    let truth = g.gt.as_deref().map(load_truth).transpose()?;

    let run = run_adaptive(&stream, &table, &lm);
    if let Some(e) = solver_failure(&run) {
        write_stats(&mut out, g, &run)?;
        out.finish()?;
        return Err(e);
    }
    let power = power_model(&run.trace, &PowerParams::default());
    let mut report = json!({
        "windows": run.windows.len(),
        "power": power,
        "energy_ratio": power.energy_ratio(),
        "overhead_fraction": power.overhead_fraction(),
    });
    out.write("trajectory.csv", &trajectory_csv(&run.trajectory))?;
    out.write("trace.json", &json_text(&run.trace))?;
    write_stats(&mut out, g, &run)?;

    println!(
        "adaptive run: {} window(s), always-max energy {:.4}x adaptive, reconfiguration overhead {:.4e}",
        run.windows.len(),
        power.energy_ratio(),
        power.overhead_fraction()
    );
    if let Some(truth) = &truth {
        report["ate"] = json!(report_ate("ATE", &run.trajectory, truth));
        if g.baseline {
            let base = run_max_budget(&stream, &table, &lm);
            if let Some(e) = solver_failure(&base) {
                return Err(e);
            }
            out.write("baseline_trajectory.csv", &trajectory_csv(&base.trajectory))?;
            let base_ate = report_ate("baseline ATE", &base.trajectory, truth);
            let delta = ate(&run.trajectory, truth) - base_ate;
            println!("delta ATE (adaptive - max budget) {delta:.6e} m");
            report["baseline_ate"] = json!(base_ate);
            report["delta_ate"] = json!(delta);
        }
    }
    out.write("report.json", &json_text(&report))?;
    out.finish()?;
    Ok(())
}

struct ModelArgs {
    audit: WindowDims,
    schedule: ScheduleConfig,
    user_units: usize,
    prior_keyframes: usize,
    sweep_n: (usize, usize),
    sweep_m: (usize, usize),
    trace: Option<PathBuf>,
}

fn cmd_model(g: &Global, a: &ModelArgs, args: Vec<String>) -> Result<(), CliError> {
    let mut out = OutputDir::create(&g.out, "model", args)?;
    let params = match &g.config {
        Some(path) => {
            out.config(path);
            parse_json::<PowerParams>(path, &read(path)?)?
        }
        None => PowerParams::default(),
    };
    params.validate().map_err(|e| CliError::Input(e.to_string()))?;
    let power = match &a.trace {
        Some(path) => {
            out.input(path);
            let trace: ActivityTrace = parse_json(path, &read(path)?)?;
            Some(power_model(&trace, &params))
        }
        None => None,
    };
    let audit = AuditOptions {
        prior_keyframes: a.prior_keyframes,
    };
    let report = cost_report(&a.schedule, &a.audit, &audit, a.user_units, power)
        .map_err(|e| CliError::Input(e.to_string()))?;
    let ratios = report.ratios();
    let ns: Vec<usize> = (a.sweep_n.0..=a.sweep_n.1).collect();
    let ms: Vec<usize> = (a.sweep_m.0..=a.sweep_m.1).collect();
    let rows = sweep(&ns, &ms);

    out.write("cost_report.json", &json_text(&json!({ "report": report, "ratios": ratios })))?;
    out.write("sweep.csv", &sweep_csv(&rows))?;
    out.finish()?;

    let w = &report.memory_words;
    let s = &a.schedule;
    println!(
        "cholesky n={} m={} {}: {} cycles, speedup {:.4}x over sequential m=1",
        s.n, s.update_units, s.mode, report.cycles_cholesky, ratios.cholesky_speedup
    );
    println!(
        "imu jacobian: {} of {} words stored, {:.1}% reduction",
        w.imu_jacobian,
        w.imu_jacobian_dense,
        100.0 * ratios.imu_jacobian_reduction
    );
    println!(
        "schur storage: {} words, {:.4}x smaller with X read from W ({:.4}x against dense U as well)",
        w.schur_optimized(),
        ratios.schur_x_ratio,
        ratios.schur_combined_ratio
    );
    println!(
        "structured S: {} words, {:.3}x vs dense, {:.3}x vs symmetric half",
        w.s_structured, ratios.s_structured_vs_dense, ratios.s_structured_vs_half
    );
    println!(
        "update units: {} vs {} zero-stall, {} user baseline",
        s.update_units, report.unit_counts.zero_stall_update_units, report.unit_counts.user_baseline_update_units
    );
    if let (Some(r), Some(o)) = (ratios.energy_ratio, ratios.overhead_fraction) {
        println!("power: always-max energy {r:.4}x adaptive, reconfiguration overhead {o:.4e}");
    }
    println!("sweep: {} rows", rows.len());
    Ok(())
}
