//! Levenberg-Marquardt solver for one window.
//!
//! Each attempt runs the full pipeline: linearize, assemble, eliminate the
//! features, factor the reduced system, back-substitute, retract and
//! re-evaluate the cost. A step is kept only if the cost decreases.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::factors::{imu_residual, linearize, visual_residual};
use crate::linsolve::{
    assemble_tagged, cholesky, schur_eliminate, solve, LinsolveError, SchurBlocks,
};
use crate::model::{WindowProblem, DEFAULT_MIN_INV_DEPTH, STATE_DIM};

/// Damping above which the solve gives up.
pub const MAX_DAMPING: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub max_iterations: usize,
    pub mu0: f64,
    pub mu_up: f64,
    pub mu_down: f64,
    /// Tolerance on the largest gradient entry after scaling each entry by
    /// the inverse square root of its normal-matrix diagonal.
    pub gradient_tol: f64,
    /// Relative tolerance on the step norm.
    pub step_tol: f64,
    pub min_inv_depth: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 10,
            mu0: 1e-4,
            mu_up: 2.0,
            mu_down: 0.5,
            gradient_tol: 1e-8,
            step_tol: 1e-10,
            min_inv_depth: DEFAULT_MIN_INV_DEPTH,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NlsError {
    #[error("invalid LM config: {0}")]
    Config(String),
    #[error("diverged: damping {mu:e} exceeded the limit after {iterations} iterations without an accepted step")]
    Divergence { mu: f64, iterations: usize },
    #[error("diverged: initial cost is not finite")]
    NonFiniteCost,
}

impl LmConfig {
    pub fn validate(&self) -> Result<(), NlsError> {
        if !(self.mu0 > 0.0) {
            return Err(NlsError::Config("mu0 must be positive".into()));
        }
        if !(self.mu_up > 1.0 && 1.0 > self.mu_down && self.mu_down > 0.0) {
            return Err(NlsError::Config("need mu_up > 1 > mu_down > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIterations,
    GradientTolerance,
    StepTolerance,
    DampingLimit,
}

/// Counters and outcome of one attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub mu: f64,
    pub cost_before: f64,
    pub cost_after: Option<f64>,
    pub accepted: bool,
    pub not_positive_definite: bool,
    pub u_divisions: u64,
    pub schur_multiply_adds: u64,
    pub cholesky_evaluate_ops: u64,
    pub cholesky_update_ops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    pub iterations_run: usize,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    /// Cost at the start followed by the cost after every accepted step.
    pub cost_trace: Vec<f64>,
    pub final_gradient_norm: f64,
    pub stop_reason: StopReason,
    pub records: Vec<IterationRecord>,
    /// Features whose inverse depth hit the floor.
    pub clamped_features: Vec<usize>,
    /// Features dropped because they became unobservable.
    pub dropped_features: Vec<usize>,
    /// Observations skipped for cheirality at the final estimate.
    pub skipped_observations: usize,
}

impl SolveStats {
    pub fn final_cost(&self) -> f64 {
        *self.cost_trace.last().expect("cost trace is never empty")
    }
}

/// `½·Σ‖r‖²` over visual, inertial and prior factors. Observations failing
/// the cheirality check contribute nothing.
pub fn cost(window: &WindowProblem) -> f64 {
    let mut total = 0.0;
    for obs in &window.observations {
        if let Ok(r) = visual_residual(window, obs) {
            total += r.norm_squared();
        }
    }
    for f in &window.imu_factors {
        let (Some(i), Some(j)) = (window.kf_index(f.kf_i), window.kf_index(f.kf_j)) else {
            continue;
        };
        total += imu_residual(f, &window.keyframes[i], &window.keyframes[j], &window.gravity)
            .norm_squared();
    }
    if let (Some(prior), Some(states)) = (&window.prior, window.prior_states()) {
        total += prior.residual(&states).norm_squared();
    }
    0.5 * total
}

/// Applies a step to every keyframe and feature, clamping inverse depths.
/// Returns the new window and the ids of clamped features.
pub fn retract(
    window: &WindowProblem,
    dx_s: &DVector<f64>,
    dx_f: &DVector<f64>,
    min_inv_depth: f64,
) -> (WindowProblem, Vec<usize>) {
    let mut out = window.clone();
    for (k, kf) in out.keyframes.iter_mut().enumerate() {
        *kf = kf.retract(dx_s.rows(k * STATE_DIM, STATE_DIM).as_slice());
    }
    let mut clamped = Vec::new();
    for (k, f) in out.features.iter_mut().enumerate() {
        let next = f.inv_depth + dx_f[k];
        if next < min_inv_depth {
            f.inv_depth = min_inv_depth;
            clamped.push(f.id);
        } else {
            f.inv_depth = next;
        }
    }
    (out, clamped)
}

/// Largest `|b_k| / sqrt(H_kk)`. The scaling makes the test independent of
/// the measurement weights; zero diagonals are skipped.
pub fn scaled_gradient_norm(blocks: &SchurBlocks) -> f64 {
    let scaled = |b: f64, d: f64| if d > 0.0 { b.abs() / d.sqrt() } else { 0.0 };
    let features = blocks.b_f.iter().zip(blocks.u.iter()).map(|(b, d)| scaled(*b, *d));
    let states = (0..blocks.n_s()).map(|k| scaled(blocks.b_s[k], blocks.v[(k, k)]));
    features.chain(states).fold(0.0, f64::max)
}

fn drop_feature(window: &mut WindowProblem, index: usize) -> usize {
    let id = window.features.remove(index).id;
    window.observations.retain(|o| o.feature_id != id);
    id
}

/// Solves with no per-iteration callback.
pub fn lm_solve(
    window: &WindowProblem,
    config: &LmConfig,
) -> Result<(WindowProblem, SolveStats), NlsError> {
    lm_solve_observed(window, config, |_, _| {})
}

/// Solves, calling `observer(attempt, state)` after every attempt with the
/// state the solver holds at that point.
pub fn lm_solve_observed<F>(
    window: &WindowProblem,
    config: &LmConfig,
    mut observer: F,
) -> Result<(WindowProblem, SolveStats), NlsError>
where
    F: FnMut(usize, &WindowProblem),
{
    config.validate()?;
    let mut state = window.clone();
    let mut current = cost(&state);
    if !current.is_finite() {
        return Err(NlsError::NonFiniteCost);
    }
    let mut mu = config.mu0;
    let mut stats = SolveStats {
        iterations_run: 0,
        accepted_steps: 0,
        rejected_steps: 0,
        cost_trace: vec![current],
        final_gradient_norm: f64::NAN,
        stop_reason: StopReason::MaxIterations,
        records: Vec::new(),
        clamped_features: Vec::new(),
        dropped_features: Vec::new(),
        skipped_observations: 0,
    };

    'outer: loop {
        let (lin, undamped) = loop {
            let lin = linearize(&state);
            let blocks = assemble_tagged(&state, &lin).blocks;
            match blocks.check_features() {
                Ok(()) => break (lin, blocks),
                Err(LinsolveError::SingularAssembly { feature, .. }) => {
                    let id = drop_feature(&mut state, feature);
                    stats.dropped_features.push(id);
                    current = cost(&state);
                }
                Err(e) => unreachable!("{e}"),
            }
        };
        let gradient = scaled_gradient_norm(&undamped);
        stats.final_gradient_norm = gradient;
        stats.skipped_observations = lin.visual.skipped.len();
        if gradient <= config.gradient_tol {
            stats.stop_reason = StopReason::GradientTolerance;
            break;
        }

        loop {
            if stats.iterations_run >= config.max_iterations {
                stats.stop_reason = StopReason::MaxIterations;
                break 'outer;
            }
            stats.iterations_run += 1;
            let attempt = attempt_step(&state, &undamped, mu, config);
            let mut record = IterationRecord {
                mu,
                cost_before: current,
                cost_after: None,
                accepted: false,
                not_positive_definite: false,
                u_divisions: 0,
                schur_multiply_adds: 0,
                cholesky_evaluate_ops: 0,
                cholesky_update_ops: 0,
            };
            match attempt {
                Attempt::NotPositiveDefinite(counts) => {
                    record.not_positive_definite = true;
                    record.u_divisions = counts.u_divisions;
                    record.schur_multiply_adds = counts.multiply_adds;
                }
                Attempt::Step {
                    next,
                    clamped,
                    step_small,
                    counts,
                    evaluate_ops,
                    update_ops,
                } => {
                    record.u_divisions = counts.u_divisions;
                    record.schur_multiply_adds = counts.multiply_adds;
                    record.cholesky_evaluate_ops = evaluate_ops;
                    record.cholesky_update_ops = update_ops;
                    if step_small {
                        stats.records.push(record);
                        stats.stop_reason = StopReason::StepTolerance;
                        observer(stats.iterations_run, &state);
                        break 'outer;
                    }
                    let next_cost = cost(&next);
                    record.cost_after = Some(next_cost);
                    if next_cost < current {
                        record.accepted = true;
                        stats.records.push(record);
                        stats.accepted_steps += 1;
                        stats.cost_trace.push(next_cost);
                        for id in clamped {
                            if !stats.clamped_features.contains(&id) {
                                stats.clamped_features.push(id);
                            }
                        }
                        state = *next;
                        current = next_cost;
                        mu = (mu * config.mu_down).max(f64::MIN_POSITIVE);
                        observer(stats.iterations_run, &state);
                        continue 'outer;
                    }
                }
            }
            stats.records.push(record);
            stats.rejected_steps += 1;
            observer(stats.iterations_run, &state);
            mu *= config.mu_up;
            if mu > MAX_DAMPING {
                if stats.accepted_steps == 0 {
                    return Err(NlsError::Divergence {
                        mu,
                        iterations: stats.iterations_run,
                    });
                }
                stats.stop_reason = StopReason::DampingLimit;
                break 'outer;
            }
        }
    }

    Ok((state, stats))
}

enum Attempt {
    NotPositiveDefinite(crate::linsolve::SchurCounts),
    Step {
        next: Box<WindowProblem>,
        clamped: Vec<usize>,
        step_small: bool,
        counts: crate::linsolve::SchurCounts,
        evaluate_ops: u64,
        update_ops: u64,
    },
}

fn attempt_step(
    state: &WindowProblem,
    undamped: &SchurBlocks,
    mu: f64,
    config: &LmConfig,
) -> Attempt {
    let blocks = undamped.damped(mu);
    let sc = schur_eliminate(&blocks).expect("feature diagonals checked before damping");
    let factor = match cholesky(&sc.s) {
        Ok(f) => f,
        Err(_) => return Attempt::NotPositiveDefinite(sc.counts),
    };
    let (dx_s, dx_f) = solve(&blocks, &factor, &sc.b);
    let step_norm = (dx_s.norm_squared() + dx_f.norm_squared()).sqrt();
    let x_norm = state_norm(state);
    let step_small = step_norm <= config.step_tol * (x_norm + config.step_tol);
    let (next, clamped) = retract(state, &dx_s, &dx_f, config.min_inv_depth);
    Attempt::Step {
        next: Box::new(next),
        clamped,
        step_small,
        counts: sc.counts,
        evaluate_ops: factor.total_evaluate_ops(),
        update_ops: factor.total_update_ops(),
    }
}

fn state_norm(window: &WindowProblem) -> f64 {
    let mut acc = 0.0;
    for k in &window.keyframes {
        acc += k.p.norm_squared() + k.v.norm_squared() + k.ba.norm_squared() + k.bg.norm_squared();
    }
    for f in &window.features {
        acc += f.inv_depth * f.inv_depth;
    }
    acc.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate, SceneConfig};

    #[test]
    fn zero_noise_truth_has_negligible_cost() {
        let scene = generate(&SceneConfig {
            seed: 2,
            ..Default::default()
        })
        .unwrap();
        assert!(cost(&scene.truth_windows[0]) < 1e-18);
    }

    #[test]
    fn prior_only_window_at_prior_mean_costs_nothing() {
        let scene = generate(&SceneConfig {
            n_keyframes: 2,
            n_features: 2,
            seed: 2,
            ..Default::default()
        })
        .unwrap();
        let mut w = scene.truth_windows[0].clone();
        w.features.clear();
        w.observations.clear();
        w.imu_factors.clear();
        w.keyframes.truncate(1);
        assert_eq!(cost(&w), 0.0);
    }

    #[test]
    fn rejects_bad_damping_multipliers() {
        let cfg = LmConfig {
            mu_up: 0.5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
