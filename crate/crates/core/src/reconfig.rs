//! Feature-count driven runtime configuration: offline calibration of the
//! lookup table, per-window selection, and the adaptive sliding-window run.
//!
//! Buckets are half-open: bucket `b` holds feature counts in
//! `[b·width, (b+1)·width)`.

use serde::{Deserialize, Serialize};

use crate::hwmodel::{iteration_cycles, min_update_units, ActivityTrace, WindowActivity};
use crate::marginalize::marginalize_oldest;
use crate::metrics::ate;
use crate::model::{KeyframeState, PriorFactor, WindowProblem};
use crate::nls::{lm_solve, lm_solve_observed, LmConfig, SolveStats};
use crate::scenegen::{ImuNoise, PerturbMagnitudes, Scene, SceneConfig};

pub const MIN_SCENES_PER_BUCKET: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub iterations: usize,
    pub schur_lanes: usize,
    pub update_units: usize,
    /// No iteration count met the target, or the bucket had no scenes.
    pub flagged: bool,
    pub scenes: usize,
    /// Median ATE at the chosen iteration count.
    pub median_ate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub scene_seeds: Vec<u64>,
    pub date: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookupTable {
    pub bucket_width: usize,
    /// Meters; `null` in JSON when unbounded.
    #[serde(with = "unbounded_as_null")]
    pub target_accuracy: f64,
    pub max_iterations: usize,
    pub max_schur_lanes: usize,
    pub max_update_units: usize,
    pub features_per_lane: usize,
    /// Entry `b` covers bucket `b`.
    pub entries: Vec<TableEntry>,
    /// Used for feature counts beyond the last bucket.
    pub fallback: TableEntry,
    pub provenance: Provenance,
}

mod unbounded_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

impl LookupTable {
    pub fn bucket(&self, feature_count: usize) -> usize {
        feature_count / self.bucket_width
    }

    pub fn entry(&self, feature_count: usize) -> &TableEntry {
        self.entries.get(self.bucket(feature_count)).unwrap_or(&self.fallback)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "module", content = "index", rename_all = "snake_case")]
pub enum GatedModule {
    SchurLane(usize),
    UpdateUnit(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuntimeConfig {
    pub iterations: usize,
    pub schur_lanes: usize,
    pub update_units: usize,
    pub gated_modules: Vec<GatedModule>,
}

/// Features with at least one observation.
pub fn observed_feature_count(window: &WindowProblem) -> usize {
    window
        .features
        .iter()
        .filter(|f| window.observations.iter().any(|o| o.feature_id == f.id))
        .count()
}

/// Largest configuration a run may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub iterations: usize,
    pub schur_lanes: usize,
    pub update_units: usize,
}

impl LookupTable {
    pub fn max_budget(&self) -> Budget {
        Budget {
            iterations: self.max_iterations,
            schur_lanes: self.max_schur_lanes,
            update_units: self.max_update_units,
        }
    }
}

/// Pure table lookup.
pub fn select(table: &LookupTable, window: &WindowProblem) -> RuntimeConfig {
    let entry = table.entry(observed_feature_count(window));
    let lanes = entry.schur_lanes.clamp(1, table.max_schur_lanes);
    let units = entry.update_units.clamp(1, table.max_update_units);
    let gated_modules = (lanes..table.max_schur_lanes)
        .map(GatedModule::SchurLane)
        .chain((units..table.max_update_units).map(GatedModule::UpdateUnit))
        .collect();
    RuntimeConfig {
        iterations: entry.iterations.clamp(1, table.max_iterations),
        schur_lanes: lanes,
        update_units: units,
        gated_modules,
    }
}

/// A calibration sample: a window to solve and its true keyframe states.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationScene {
    pub seed: u64,
    pub window: WindowProblem,
    pub truth: Vec<KeyframeState>,
}

impl CalibrationScene {
    /// First window of a generated scene.
    pub fn from_scene(seed: u64, scene: &Scene) -> Self {
        Self {
            seed,
            window: scene.windows[0].clone(),
            truth: scene.ground_truth.keyframes.clone(),
        }
    }
}

/// The scene family used for calibration and held-out evaluation: the
/// default circle with low measurement noise and a moderate initial
/// perturbation, so accuracy depends on the iteration count.
pub fn calibration_scene_config(seed: u64, n_features: usize, n_windows: usize) -> SceneConfig {
    SceneConfig {
        n_features,
        n_windows,
        pixel_noise_sigma: 2e-6,
        imu_noise: ImuNoise {
            accel_sigma: 1e-4,
            gyro_sigma: 1e-5,
            bias_rw_sigma: 1e-5,
        },
        perturbation: PerturbMagnitudes {
            position: 0.05,
            rotation: 0.02,
            velocity: 0.05,
            bias: 0.0,
            inv_depth: 0.05,
        },
        seed,
        ..Default::default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOptions {
    pub bucket_width: usize,
    pub features_per_lane: usize,
    pub max_iterations: usize,
    pub max_update_units: usize,
    /// Accepted fractional latency loss when trimming Update units.
    pub update_latency_tolerance: f64,
    pub target_accuracy: f64,
    /// Base solver config; its iteration cap is replaced.
    pub lm: LmConfig,
    pub date: String,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            bucket_width: 50,
            features_per_lane: 64,
            max_iterations: 10,
            max_update_units: 8,
            update_latency_tolerance: 0.05,
            target_accuracy: 1e-4,
            lm: LmConfig::default(),
            date: String::from("unspecified"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CalibrationError {
    #[error("insufficient calibration: bucket {bucket} has {scenes} scene(s), need {MIN_SCENES_PER_BUCKET}")]
    InsufficientCalibration { bucket: usize, scenes: usize },
    #[error("invalid calibration options: {0}")]
    Options(String),
}

/// ATE after each of the first `budget` iterations. Iterations the solver
/// did not need repeat the final ATE; a failed solve gives infinity.
pub fn ate_per_iteration(scene: &CalibrationScene, budget: usize, lm: &LmConfig) -> Vec<f64> {
    let mut ates = vec![f64::NAN; budget];
    let cfg = LmConfig {
        max_iterations: budget,
        ..*lm
    };
    let result = lm_solve_observed(&scene.window, &cfg, |k, state| {
        if (1..=budget).contains(&k) {
            ates[k - 1] = ate(&state.keyframes, &scene.truth);
        }
    });
    match result {
        Ok((final_state, _)) => {
            let last = ate(&final_state.keyframes, &scene.truth);
            ates.iter_mut().filter(|a| a.is_nan()).for_each(|a| *a = last);
        }
        Err(_) => ates.iter_mut().for_each(|a| *a = f64::INFINITY),
    }
    ates
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn calibrate(scenes: &[CalibrationScene], opts: &CalibrationOptions) -> Result<LookupTable, CalibrationError> {
    if opts.bucket_width == 0 || opts.features_per_lane == 0 || opts.max_iterations == 0 || opts.max_update_units == 0 {
        return Err(CalibrationError::Options(
            "bucket_width, features_per_lane, max_iterations and max_update_units must be positive".into(),
        ));
    }
    if scenes.is_empty() {
        return Err(CalibrationError::InsufficientCalibration { bucket: 0, scenes: 0 });
    }
    let width = opts.bucket_width;
    let buckets: Vec<usize> = scenes.iter().map(|s| observed_feature_count(&s.window) / width).collect();
    let n_buckets = buckets.iter().max().map_or(0, |b| b + 1);
    let mut members = vec![Vec::new(); n_buckets];
    for (k, b) in buckets.iter().enumerate() {
        members[*b].push(k);
    }
    if let Some((bucket, m)) = members
        .iter()
        .enumerate()
        .find(|(_, m)| !m.is_empty() && m.len() < MIN_SCENES_PER_BUCKET)
    {
        return Err(CalibrationError::InsufficientCalibration { bucket, scenes: m.len() });
    }

    let lanes_for = |b: usize| ((b + 1) * width - 1).div_ceil(opts.features_per_lane).max(1);
    let max_lanes = lanes_for(n_buckets - 1);
    let n_states = scenes.iter().map(|s| s.window.state_dim()).max().unwrap_or(1).max(1);
    let units = min_update_units(n_states, opts.max_update_units, opts.update_latency_tolerance);

    let curves: Vec<Vec<f64>> = scenes
        .iter()
        .map(|s| ate_per_iteration(s, opts.max_iterations, &opts.lm))
        .collect();

    let entries = members
        .iter()
        .enumerate()
        .map(|(b, m)| {
            if m.is_empty() {
                return TableEntry {
                    iterations: opts.max_iterations,
                    schur_lanes: lanes_for(b),
                    update_units: opts.max_update_units,
                    flagged: true,
                    scenes: 0,
                    median_ate: None,
                };
            }
            let medians: Vec<f64> = (0..opts.max_iterations)
                .map(|k| median(&mut m.iter().map(|&s| curves[s][k]).collect::<Vec<_>>()))
                .collect();
            let hit = medians.iter().position(|a| *a <= opts.target_accuracy);
            let k = hit.unwrap_or(opts.max_iterations - 1);
            TableEntry {
                iterations: k + 1,
                schur_lanes: lanes_for(b),
                update_units: units,
                flagged: hit.is_none(),
                scenes: m.len(),
                median_ate: Some(medians[k]),
            }
        })
        .collect();

    Ok(LookupTable {
        bucket_width: width,
        target_accuracy: opts.target_accuracy,
        max_iterations: opts.max_iterations,
        max_schur_lanes: max_lanes,
        max_update_units: opts.max_update_units,
        features_per_lane: opts.features_per_lane,
        entries,
        fallback: TableEntry {
            iterations: opts.max_iterations,
            schur_lanes: max_lanes,
            update_units: opts.max_update_units,
            flagged: true,
            scenes: 0,
            median_ate: None,
        },
        provenance: Provenance {
            scene_seeds: scenes.iter().map(|s| s.seed).collect(),
            date: opts.date.clone(),
        },
    })
}

/// Result of one window of a sliding-window run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowOutcome {
    pub window: usize,
    pub config: RuntimeConfig,
    pub stats: Option<SolveStats>,
    pub solver_error: Option<String>,
    pub marginalization_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamRun {
    /// Final estimate of every keyframe, ordered by id.
    pub trajectory: Vec<KeyframeState>,
    pub windows: Vec<WindowOutcome>,
    pub trace: ActivityTrace,
    /// Solved states of each window before marginalization.
    pub solved: Vec<WindowProblem>,
}

/// Copies estimates of the previous solved window onto the overlapping
/// states of `next` and attaches the carried prior.
fn carry_forward(next: &WindowProblem, previous: Option<&WindowProblem>, prior: Option<PriorFactor>) -> WindowProblem {
    let mut out = next.clone();
    if let Some(prev) = previous {
        for kf in &mut out.keyframes {
            if let Some(k) = prev.kf_index(kf.id) {
                *kf = prev.keyframes[k].clone();
            }
        }
        for f in &mut out.features {
            if let Some(k) = prev.feature_index(f.id) {
                f.inv_depth = prev.features[k].inv_depth;
            }
        }
    }
    if prior.is_some() {
        out.prior = prior;
    }
    out
}

fn run_stream(
    stream: &[WindowProblem],
    max: Budget,
    lm: &LmConfig,
    policy: impl Fn(&WindowProblem) -> (RuntimeConfig, bool),
) -> StreamRun {
    let mut trajectory: Vec<KeyframeState> = Vec::new();
    let mut windows = Vec::with_capacity(stream.len());
    let mut trace = Vec::with_capacity(stream.len());
    let mut solved = Vec::with_capacity(stream.len());
    let mut previous: Option<WindowProblem> = None;
    let mut prior: Option<PriorFactor> = None;

    for (w, raw) in stream.iter().enumerate() {
        let window = carry_forward(raw, previous.as_ref(), prior.take());
        let (config, reconfigured) = policy(&window);
        let cfg = LmConfig {
            max_iterations: config.iterations,
            ..*lm
        };
        let (state, stats, solver_error) = match lm_solve(&window, &cfg) {
            Ok((s, st)) => (s, Some(st), None),
            Err(e) => (window.clone(), None, Some(format!("window {w}: {e}"))),
        };

        let n_obs = state.observations.len();
        let n_imu = state.imu_factors.len();
        let nf = state.features.len();
        let ns = state.state_dim();
        let per_iter = iteration_cycles(ns, nf, n_obs, n_imu, config.schur_lanes, config.update_units);
        let per_iter_max = iteration_cycles(ns, nf, n_obs, n_imu, max.schur_lanes, max.update_units);
        let iterations = stats.as_ref().map_or(config.iterations, |s| s.iterations_run);
        trace.push(WindowActivity {
            window: w,
            iterations,
            max_iterations: max.iterations,
            schur_lanes: config.schur_lanes,
            max_schur_lanes: max.schur_lanes,
            update_units: config.update_units,
            max_update_units: max.update_units,
            cycles: if reconfigured {
                iterations as u64 * per_iter
            } else {
                max.iterations as u64 * per_iter_max
            },
            max_cycles: max.iterations as u64 * per_iter_max,
            reconfigured,
        });

        let mut marginalization_error = None;
        if w + 1 < stream.len() {
            match marginalize_oldest(&state) {
                Ok((_, m)) => prior = Some(m.prior),
                Err(e) => marginalization_error = Some(format!("window {w}: {e}")),
            }
            trajectory.push(state.keyframes[0].clone());
        } else {
            trajectory.extend(state.keyframes.iter().cloned());
        }
        windows.push(WindowOutcome {
            window: w,
            config,
            stats,
            solver_error,
            marginalization_error,
        });
        previous = Some(state.clone());
        solved.push(state);
    }
    trajectory.sort_by_key(|k| k.id);
    StreamRun {
        trajectory,
        windows,
        trace,
        solved,
    }
}

/// Sliding-window run with per-window configuration from `table`.
pub fn run_adaptive(stream: &[WindowProblem], table: &LookupTable, lm: &LmConfig) -> StreamRun {
    run_stream(stream, table.max_budget(), lm, |w| (select(table, w), true))
}

/// The same run at the table's maximum configuration on every window.
pub fn run_max_budget(stream: &[WindowProblem], table: &LookupTable, lm: &LmConfig) -> StreamRun {
    run_fixed(stream, table.max_budget(), lm)
}

/// Sliding-window run at a fixed configuration, without table lookups.
pub fn run_fixed(stream: &[WindowProblem], budget: Budget, lm: &LmConfig) -> StreamRun {
    let config = RuntimeConfig {
        iterations: budget.iterations,
        schur_lanes: budget.schur_lanes,
        update_units: budget.update_units,
        gated_modules: Vec::new(),
    };
    run_stream(stream, budget, lm, |_| (config.clone(), false))
}
