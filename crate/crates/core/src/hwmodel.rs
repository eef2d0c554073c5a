//! Cycle, resource, memory and power models of the accelerator.
//!
//! One operation takes one cycle on one unit, with no port contention.
//! Column `i` of a Cholesky factorization (`i` = remaining columns) costs
//! `E(i) = i` Evaluate operations and `Up(i) = i(i-1)/2` Update operations.

use serde::{Deserialize, Serialize};

use crate::factors::{IMU_DENSE_BLOCKS, IMU_IDENTITY_BLOCKS, IMU_ZERO_BLOCKS};
use crate::marginalize::POSE_DIM;
use crate::model::STATE_DIM;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleMode {
    Sequential,
    Pipelined,
}

impl std::fmt::Display for ScheduleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScheduleMode::Sequential => "sequential",
            ScheduleMode::Pipelined => "pipelined",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub n: usize,
    pub update_units: usize,
    pub schur_lanes: usize,
    pub mode: ScheduleMode,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid schedule config: {0}")]
pub struct ScheduleError(pub String);

impl ScheduleConfig {
    pub fn validate(&self) -> Result<(), ScheduleError> {
        if self.n == 0 {
            return Err(ScheduleError("n must be at least 1".into()));
        }
        if self.update_units == 0 {
            return Err(ScheduleError("update_units must be at least 1".into()));
        }
        if self.schur_lanes == 0 {
            return Err(ScheduleError("schur_lanes must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn evaluate_ops(i: u64) -> u64 {
    i
}

pub fn update_ops(i: u64) -> u64 {
    i * i.saturating_sub(1) / 2
}

/// Per-column op counts in factorization order (`i = n, n-1, ..., 1`).
pub fn column_ops(n: usize) -> (Vec<u64>, Vec<u64>) {
    (1..=n as u64).rev().map(|i| (evaluate_ops(i), update_ops(i))).unzip()
}

/// Schedules measured per-column op counts on one Evaluate unit and `m`
/// Update units.
pub fn schedule_from_ops(evaluate: &[u64], update: &[u64], m: usize, mode: ScheduleMode) -> u64 {
    assert_eq!(evaluate.len(), update.len());
    let m = m as u64;
    let up = |k: usize| update[k].div_ceil(m);
    match mode {
        ScheduleMode::Sequential => (0..evaluate.len()).map(|k| evaluate[k] + up(k)).sum(),
        ScheduleMode::Pipelined => {
            let Some(&first) = evaluate.first() else { return 0 };
            // Evaluate of column k+1 runs under the Update of column k.
            first
                + (0..evaluate.len() - 1)
                    .map(|k| up(k).max(evaluate[k + 1]))
                    .sum::<u64>()
        }
    }
}

/// Cycles of one `n × n` factorization.
pub fn cholesky_schedule(cfg: &ScheduleConfig) -> u64 {
    let (e, u) = column_ops(cfg.n);
    schedule_from_ops(&e, &u, cfg.update_units, cfg.mode)
}

/// Speedup of `cfg` over the sequential single-Update-unit schedule.
pub fn cholesky_speedup(cfg: &ScheduleConfig) -> f64 {
    let base = cholesky_schedule(&ScheduleConfig {
        update_units: 1,
        mode: ScheduleMode::Sequential,
        ..*cfg
    });
    base as f64 / cholesky_schedule(cfg) as f64
}

/// Smallest `m` for which the pipeline never stalls the Evaluate unit:
/// `Up(i)/m ≤ E(i-1)` for all `i`.
pub fn zero_stall_units(n: usize) -> usize {
    n.div_ceil(2).max(1)
}

/// Cycles to eliminate `n_f` features from an `n_s` state system with the
/// work spread over `lanes` lanes, one feature per lane at a time.
pub fn schur_cycles(n_f: usize, n_s: usize, lanes: usize) -> u64 {
    let per_feature = 1 + (n_s * n_s + n_s) as u64;
    n_f.div_ceil(lanes.max(1)) as u64 * per_feature
}

/// Cycles for the Jacobian engines: one per factor.
pub fn jacobian_cycles(n_observations: usize, n_imu: usize) -> u64 {
    (n_observations + n_imu) as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceReport {
    pub evaluate_units: usize,
    pub update_units: usize,
    pub schur_lanes: usize,
    pub zero_stall_update_units: usize,
    pub user_baseline_update_units: usize,
}

impl ResourceReport {
    /// Update units of the zero-stall design per unit used here.
    pub fn ratio_vs_zero_stall(&self) -> f64 {
        self.zero_stall_update_units as f64 / self.update_units as f64
    }

    pub fn ratio_vs_user_baseline(&self) -> f64 {
        self.user_baseline_update_units as f64 / self.update_units as f64
    }
}

pub fn resource_report(cfg: &ScheduleConfig, user_baseline_units: usize) -> ResourceReport {
    ResourceReport {
        evaluate_units: 1,
        update_units: cfg.update_units,
        schur_lanes: cfg.schur_lanes,
        zero_stall_update_units: zero_stall_units(cfg.n),
        user_baseline_update_units: user_baseline_units,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowDims {
    pub n_keyframes: usize,
    pub n_features: usize,
    pub co_obs_span: usize,
}

impl WindowDims {
    pub fn n_states(&self) -> usize {
        STATE_DIM * self.n_keyframes
    }

    /// Keyframe pairs `(j, k)` with `1 ≤ k - j ≤ span`.
    pub fn co_observing_pairs(&self) -> usize {
        (1..=self.co_obs_span).map(|d| self.n_keyframes.saturating_sub(d)).sum()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditOptions {
    /// Keyframes spanned by a marginalization prior, stored as its own
    /// packed section.
    pub prior_keyframes: usize,
}

/// Word counts of the declared layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryWords {
    pub imu_jacobian: usize,
    pub imu_jacobian_dense: usize,
    pub u: usize,
    pub u_dense: usize,
    pub w: usize,
    /// Always zero: `X = Wᵀ` is read from `W`.
    pub x: usize,
    pub x_naive: usize,
    pub v: usize,
    pub s_structured: usize,
    pub s_prior: usize,
    pub s_dense_baseline: usize,
    pub s_symmetric_half: usize,
}

fn packed(n: usize) -> usize {
    n * (n + 1) / 2
}

pub const IMU_JACOBIAN_WORDS: usize = IMU_DENSE_BLOCKS * 9;
pub const IMU_JACOBIAN_DENSE_WORDS: usize = (IMU_DENSE_BLOCKS + IMU_IDENTITY_BLOCKS + IMU_ZERO_BLOCKS) * 9;

pub fn memory_audit(dims: &WindowDims, options: &AuditOptions) -> MemoryWords {
    let n = dims.n_keyframes;
    let ns = dims.n_states();
    let nf = dims.n_features;
    let factors = n.saturating_sub(1);
    let s_structured = n * packed(STATE_DIM)
        + factors * STATE_DIM * STATE_DIM
        + n * packed(POSE_DIM)
        + dims.co_observing_pairs() * POSE_DIM * POSE_DIM;
    MemoryWords {
        imu_jacobian: factors * IMU_JACOBIAN_WORDS,
        imu_jacobian_dense: factors * IMU_JACOBIAN_DENSE_WORDS,
        u: nf,
        u_dense: nf * nf,
        w: ns * nf,
        x: 0,
        x_naive: ns * nf,
        v: ns * ns,
        s_structured,
        s_prior: packed(STATE_DIM * options.prior_keyframes),
        s_dense_baseline: ns * ns,
        s_symmetric_half: packed(ns),
    }
}

impl MemoryWords {
    /// `1 - sparse/dense` for the IMU Jacobian.
    pub fn imu_jacobian_reduction(&self) -> f64 {
        1.0 - self.imu_jacobian as f64 / self.imu_jacobian_dense as f64
    }

    /// Storage saved by reading `X` from `W`, all else optimized.
    pub fn schur_x_ratio(&self) -> f64 {
        (self.u + self.w + self.x_naive + self.v) as f64 / self.schur_optimized() as f64
    }

    /// Naive `{U dense, W, X, V}` over optimized `{U diagonal, W, V}`.
    pub fn schur_combined_ratio(&self) -> f64 {
        (self.u_dense + self.w + self.x_naive + self.v) as f64 / self.schur_optimized() as f64
    }

    pub fn schur_optimized(&self) -> usize {
        self.u + self.w + self.x + self.v
    }

    pub fn s_vs_dense(&self) -> f64 {
        self.s_dense_baseline as f64 / self.s_structured as f64
    }

    pub fn s_vs_half(&self) -> f64 {
        self.s_symmetric_half as f64 / self.s_structured as f64
    }

    /// Dense over structured, counting the prior section too.
    pub fn s_with_prior_vs_dense(&self) -> f64 {
        self.s_dense_baseline as f64 / (self.s_structured + self.s_prior) as f64
    }
}

/// Energy per active cycle per module instance, arbitrary units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PowerParams {
    pub schur_lane_weight: f64,
    pub update_unit_weight: f64,
    pub evaluate_unit_weight: f64,
    pub jacobian_engine_weight: f64,
    /// Fraction of the dynamic weight a gated module still draws.
    pub leakage_fraction: f64,
    /// Cycles spent on a table lookup and reconfiguration per window.
    pub reconfig_cycles: u64,
}

impl Default for PowerParams {
    fn default() -> Self {
        Self {
            schur_lane_weight: 1.0,
            update_unit_weight: 1.0,
            evaluate_unit_weight: 1.5,
            jacobian_engine_weight: 2.0,
            leakage_fraction: 0.05,
            reconfig_cycles: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid power params: {0}")]
pub struct PowerParamsError(pub String);

impl PowerParams {
    pub fn validate(&self) -> Result<(), PowerParamsError> {
        let weights = [
            self.schur_lane_weight,
            self.update_unit_weight,
            self.evaluate_unit_weight,
            self.jacobian_engine_weight,
        ];
        if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(PowerParamsError("weights must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.leakage_fraction) {
            return Err(PowerParamsError("leakage_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Module activity of one window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowActivity {
    pub window: usize,
    pub iterations: usize,
    pub max_iterations: usize,
    pub schur_lanes: usize,
    pub max_schur_lanes: usize,
    pub update_units: usize,
    pub max_update_units: usize,
    /// Busy cycles of the window under the selected configuration.
    pub cycles: u64,
    /// Busy cycles of the same window at the maximum configuration.
    pub max_cycles: u64,
    /// Whether a table lookup and reconfiguration happened.
    pub reconfigured: bool,
}

pub type ActivityTrace = Vec<WindowActivity>;

/// Energy split by module class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ModuleEnergy {
    pub schur: f64,
    pub update: f64,
    pub evaluate: f64,
    pub jacobian: f64,
    pub reconfig: f64,
}

impl ModuleEnergy {
    pub fn total(&self) -> f64 {
        self.schur + self.update + self.evaluate + self.jacobian + self.reconfig
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerReport {
    pub adaptive: ModuleEnergy,
    pub always_max: ModuleEnergy,
    pub busy_cycles: u64,
    pub overhead_cycles: u64,
}

impl PowerReport {
    pub fn active_energy(&self) -> f64 {
        self.always_max.total()
    }

    pub fn gated_energy(&self) -> f64 {
        self.adaptive.total()
    }

    /// Always-max energy over adaptive energy.
    pub fn energy_ratio(&self) -> f64 {
        self.always_max.total() / self.adaptive.total()
    }

    /// Reconfiguration cycles over all cycles.
    pub fn overhead_fraction(&self) -> f64 {
        let total = self.busy_cycles + self.overhead_cycles;
        if total == 0 {
            0.0
        } else {
            self.overhead_cycles as f64 / total as f64
        }
    }
}

fn gated(weight: f64, active: usize, max: usize, leakage: f64) -> f64 {
    let idle = max.saturating_sub(active);
    if idle == 0 {
        return weight * active as f64;
    }
    weight * (active as f64 + leakage * idle as f64)
}

/// Linear energy accounting over a trace. Every module is clocked for the
/// window's busy cycles; gated modules draw `leakage_fraction` of their
/// weight. Reconfiguration cycles run with every ungated module clocked.
pub fn power_model(trace: &[WindowActivity], params: &PowerParams) -> PowerReport {
    let leak = params.leakage_fraction;
    let mut adaptive = ModuleEnergy::default();
    let mut always_max = ModuleEnergy::default();
    let mut busy = 0;
    let mut overhead = 0;
    for w in trace {
        let t = w.cycles as f64;
        adaptive.schur += t * gated(params.schur_lane_weight, w.schur_lanes, w.max_schur_lanes, leak);
        adaptive.update += t * gated(params.update_unit_weight, w.update_units, w.max_update_units, leak);
        adaptive.evaluate += t * params.evaluate_unit_weight;
        adaptive.jacobian += t * params.jacobian_engine_weight;
        if w.reconfigured {
            let active = params.schur_lane_weight * w.schur_lanes as f64
                + params.update_unit_weight * w.update_units as f64
                + params.evaluate_unit_weight
                + params.jacobian_engine_weight;
            adaptive.reconfig += params.reconfig_cycles as f64 * active;
            overhead += params.reconfig_cycles;
        }
        busy += w.cycles;

        let tm = w.max_cycles as f64;
        always_max.schur += tm * (params.schur_lane_weight * w.max_schur_lanes as f64);
        always_max.update += tm * (params.update_unit_weight * w.max_update_units as f64);
        always_max.evaluate += tm * params.evaluate_unit_weight;
        always_max.jacobian += tm * params.jacobian_engine_weight;
    }
    PowerReport {
        adaptive,
        always_max,
        busy_cycles: busy,
        overhead_cycles: overhead,
    }
}

/// Cycles of one solver iteration on a window of the given shape.
pub fn iteration_cycles(
    n_states: usize,
    n_features: usize,
    n_observations: usize,
    n_imu: usize,
    schur_lanes: usize,
    update_units: usize,
) -> u64 {
    jacobian_cycles(n_observations, n_imu)
        + schur_cycles(n_features, n_states, schur_lanes)
        + cholesky_schedule(&ScheduleConfig {
            n: n_states,
            update_units,
            schur_lanes,
            mode: ScheduleMode::Pipelined,
        })
}

/// Raw counts of the cost model. Ratios are computed on demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub schedule: ScheduleConfig,
    pub dims: WindowDims,
    pub cycles_cholesky: u64,
    pub cycles_cholesky_sequential_baseline: u64,
    pub cycles_schur: u64,
    pub cycles_total: u64,
    pub memory_words: MemoryWords,
    pub unit_counts: ResourceReport,
    pub power: Option<PowerReport>,
}

/// Ratios derived from a [`CostReport`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedRatios {
    pub cholesky_speedup: f64,
    pub imu_jacobian_reduction: f64,
    pub schur_x_ratio: f64,
    pub schur_combined_ratio: f64,
    pub s_structured_vs_dense: f64,
    pub s_structured_vs_half: f64,
    pub update_units_vs_zero_stall: f64,
    pub update_units_vs_user_baseline: f64,
    pub energy_ratio: Option<f64>,
    pub overhead_fraction: Option<f64>,
}

impl CostReport {
    pub fn ratios(&self) -> DerivedRatios {
        let m = &self.memory_words;
        DerivedRatios {
            cholesky_speedup: self.cycles_cholesky_sequential_baseline as f64 / self.cycles_cholesky as f64,
            imu_jacobian_reduction: m.imu_jacobian_reduction(),
            schur_x_ratio: m.schur_x_ratio(),
            schur_combined_ratio: m.schur_combined_ratio(),
            s_structured_vs_dense: m.s_vs_dense(),
            s_structured_vs_half: m.s_vs_half(),
            update_units_vs_zero_stall: self.unit_counts.ratio_vs_zero_stall(),
            update_units_vs_user_baseline: self.unit_counts.ratio_vs_user_baseline(),
            energy_ratio: self.power.map(|p| p.energy_ratio()),
            overhead_fraction: self.power.map(|p| p.overhead_fraction()),
        }
    }
}

pub fn cost_report(
    schedule: &ScheduleConfig,
    dims: &WindowDims,
    audit: &AuditOptions,
    user_baseline_units: usize,
    power: Option<PowerReport>,
) -> Result<CostReport, ScheduleError> {
    schedule.validate()?;
    let cycles_cholesky = cholesky_schedule(schedule);
    let cycles_cholesky_sequential_baseline = cholesky_schedule(&ScheduleConfig {
        update_units: 1,
        mode: ScheduleMode::Sequential,
        ..*schedule
    });
    let cycles_schur = schur_cycles(dims.n_features, schedule.n, schedule.schur_lanes);
    Ok(CostReport {
        schedule: *schedule,
        dims: *dims,
        cycles_cholesky,
        cycles_cholesky_sequential_baseline,
        cycles_schur,
        cycles_total: cycles_cholesky + cycles_schur,
        memory_words: memory_audit(dims, audit),
        unit_counts: resource_report(schedule, user_baseline_units),
        power,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub m: usize,
    pub mode: ScheduleMode,
    pub cycles: u64,
    pub speedup: f64,
}

/// Every `(n, m, mode)` combination, speedups against sequential `m = 1`.
pub fn sweep(ns: &[usize], ms: &[usize]) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    for &n in ns {
        for &m in ms {
            for mode in [ScheduleMode::Sequential, ScheduleMode::Pipelined] {
                let cfg = ScheduleConfig {
                    n,
                    update_units: m,
                    schur_lanes: 1,
                    mode,
                };
                rows.push(SweepRow {
                    n,
                    m,
                    mode,
                    cycles: cholesky_schedule(&cfg),
                    speedup: cholesky_speedup(&cfg),
                });
            }
        }
    }
    rows
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("n,m,mode,cycles,speedup\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{:.6}\n", r.n, r.m, r.mode, r.cycles, r.speedup));
    }
    out
}

/// Fewest Update units whose pipelined latency is within `tolerance`
/// (fractional) of the latency at `max_units`.
pub fn min_update_units(n: usize, max_units: usize, tolerance: f64) -> usize {
    let latency = |m| {
        cholesky_schedule(&ScheduleConfig {
            n,
            update_units: m,
            schur_lanes: 1,
            mode: ScheduleMode::Pipelined,
        }) as f64
    };
    let best = latency(max_units);
    (1..=max_units)
        .find(|&m| latency(m) <= best * (1.0 + tolerance))
        .unwrap_or(max_units)
}
