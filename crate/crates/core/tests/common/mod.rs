//! Shared finite-difference machinery.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use slidewin::factors::{imu_jacobian, imu_residual_raw, visual_jacobians, visual_residual};
use slidewin::model::{KeyframeState, WindowProblem, STATE_DIM};
use slidewin::scenegen::{derived_seeds, generate, perturb, PerturbMagnitudes, SceneConfig};

pub const STEP: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-5;

pub fn rel_err(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>) -> f64 {
    (analytic - numeric).norm() / numeric.norm().max(1e-8)
}

pub fn numeric<F>(n_in: usize, n_out: usize, f: F) -> DMatrix<f64>
where
    F: Fn(usize, f64) -> DVector<f64>,
{
    let mut j = DMatrix::zeros(n_out, n_in);
    for c in 0..n_in {
        let d = (f(c, STEP) - f(c, -STEP)) / (2.0 * STEP);
        j.set_column(c, &d);
    }
    j
}

pub fn nudged(s: &KeyframeState, k: usize, h: f64) -> KeyframeState {
    let mut dx = [0.0; STATE_DIM];
    dx[k] = h;
    s.retract(&dx)
}

/// Strongly perturbed 4-keyframe windows, so Jacobians are checked away
/// from the optimum.
pub fn fd_windows(n: usize) -> Vec<WindowProblem> {
    let mags = PerturbMagnitudes {
        position: 0.2,
        rotation: 0.1,
        velocity: 0.2,
        bias: 0.05,
        inv_depth: 0.2,
    };
    derived_seeds(7, n)
        .into_iter()
        .map(|seed| {
            let scene = generate(&SceneConfig {
                n_keyframes: 4,
                n_features: 20,
                seed,
                ..Default::default()
            })
            .unwrap();
            perturb(&scene.truth_windows[0], &mags, seed ^ 0xabc)
        })
        .collect()
}

/// Every 7th observation of each window: `(instances, worst relative error)`.
pub fn visual_fd_check(windows: &[WindowProblem]) -> (usize, f64) {
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for w in windows {
        let blocks = visual_jacobians(w);
        for b in blocks.blocks.iter().step_by(7) {
            let obs = &w.observations[b.observation];
            let residual = |win: &WindowProblem| {
                let r = visual_residual(win, obs).unwrap();
                DVector::from_column_slice(r.as_slice())
            };
            let pose = |kf: usize| {
                numeric(6, 2, |c, h| {
                    let mut win = w.clone();
                    win.keyframes[kf] = nudged(&w.keyframes[kf], c, h);
                    residual(&win)
                })
            };
            let ja = pose(b.anchor);
            let jo = pose(b.target);
            let jl = numeric(1, 2, |_, h| {
                let mut win = w.clone();
                win.features[b.feature].inv_depth += h;
                residual(&win)
            });
            let to_d = |m: &[f64], r, c| DMatrix::from_column_slice(r, c, m);
            for (a, n) in [
                (to_d(b.j_pose_anchor.as_slice(), 2, 6), ja),
                (to_d(b.j_pose_obs.as_slice(), 2, 6), jo),
                (to_d(b.j_inv_depth.as_slice(), 2, 1), jl),
            ] {
                worst = worst.max(rel_err(&a, &n));
            }
            checked += 1;
        }
    }
    (checked, worst)
}

/// Every IMU factor of each window: `(instances, worst relative error)`.
pub fn imu_fd_check(windows: &[WindowProblem]) -> (usize, f64) {
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for w in windows {
        for f in &w.imu_factors {
            let i = w.kf_index(f.kf_i).unwrap();
            let j = w.kf_index(f.kf_j).unwrap();
            let (si, sj) = (&w.keyframes[i], &w.keyframes[j]);
            let analytic = imu_jacobian(f, si, sj, &w.gravity).densify();
            let analytic = DMatrix::from_column_slice(15, 30, analytic.as_slice());
            let num = numeric(30, 15, |c, h| {
                let (a, b) = if c < STATE_DIM {
                    (nudged(si, c, h), sj.clone())
                } else {
                    (si.clone(), nudged(sj, c - STATE_DIM, h))
                };
                let r = imu_residual_raw(f, &a, &b, &w.gravity);
                DVector::from_column_slice(r.as_slice())
            });
            worst = worst.max(rel_err(&analytic, &num));
            checked += 1;
        }
    }
    (checked, worst)
}
