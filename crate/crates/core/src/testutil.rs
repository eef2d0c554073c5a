//! Shared fixtures for unit tests.

use nalgebra::{DMatrix, DVector, Matrix3, UnitQuaternion, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::linsolve::SchurBlocks;
use crate::model::{BiasJacobians, ImuFactor, KeyframeState, Matrix15, WindowProblem};
use crate::scenegen::{generate, SceneConfig};

/// Generated window with ten features per keyframe.
pub fn small_window(n_kf: usize, seed: u64) -> WindowProblem {
    generate(&SceneConfig {
        n_keyframes: n_kf,
        n_features: 10 * n_kf,
        seed,
        ..Default::default()
    })
    .expect("fixture scene")
    .windows
    .remove(0)
}

fn vec3(rng: &mut ChaCha8Rng, scale: f64) -> Vector3<f64> {
    Vector3::from_fn(|_, _| scale * (2.0 * rng.random::<f64>() - 1.0))
}

fn mat3(rng: &mut ChaCha8Rng, scale: f64) -> Matrix3<f64> {
    Matrix3::from_fn(|_, _| scale * (2.0 * rng.random::<f64>() - 1.0))
}

pub fn random_state(rng: &mut ChaCha8Rng, id: usize) -> KeyframeState {
    KeyframeState {
        id,
        p: vec3(rng, 3.0),
        q: UnitQuaternion::from_scaled_axis(vec3(rng, 1.5)),
        v: vec3(rng, 1.0),
        ba: vec3(rng, 0.1),
        bg: vec3(rng, 0.01),
    }
}

/// A random IMU factor between two random states, with gravity.
pub fn random_imu_case(rng: &mut ChaCha8Rng) -> (ImuFactor, KeyframeState, KeyframeState, Vector3<f64>) {
    let si = random_state(rng, 0);
    let sj = random_state(rng, 1);
    let mut sqrt_info = Matrix15::zeros();
    for r in 0..15 {
        sqrt_info[(r, r)] = 0.5 + rng.random::<f64>();
        for c in r + 1..15 {
            sqrt_info[(r, c)] = 0.2 * (2.0 * rng.random::<f64>() - 1.0);
        }
    }
    let factor = ImuFactor {
        kf_i: 0,
        kf_j: 1,
        dt: 0.2 + 0.5 * rng.random::<f64>(),
        dp_hat: vec3(rng, 1.0),
        dv_hat: vec3(rng, 1.0),
        dq_hat: UnitQuaternion::from_scaled_axis(vec3(rng, 0.5)),
        bias_jacobians: BiasJacobians {
            dp_dba: mat3(rng, 0.2),
            dp_dbg: mat3(rng, 0.2),
            dq_dbg: mat3(rng, 0.5),
            dv_dba: mat3(rng, 0.5),
            dv_dbg: mat3(rng, 0.2),
        },
        sqrt_info,
        lin_ba: vec3(rng, 0.1),
        lin_bg: vec3(rng, 0.01),
    };
    (factor, si, sj, Vector3::new(0.0, 0.0, -9.81))
}

pub fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| 2.0 * rng.random::<f64>() - 1.0);
    let s = &a * a.transpose() + DMatrix::identity(n, n) * n as f64;
    (&s + s.transpose()) * 0.5
}

/// Blocks of a positive definite system with diagonal feature block.
pub fn random_blocks(rng: &mut ChaCha8Rng, ns: usize, nf: usize) -> SchurBlocks {
    let u = DVector::from_fn(nf, |_, _| 0.5 + rng.random::<f64>());
    let w = DMatrix::from_fn(ns, nf, |_, _| 2.0 * rng.random::<f64>() - 1.0);
    let mut v = random_spd(rng, ns);
    for k in 0..nf {
        let col = w.column(k);
        v += col * col.transpose() / u[k];
    }
    let v = (&v + v.transpose()) * 0.5;
    SchurBlocks {
        u,
        w,
        v,
        b_f: DVector::from_fn(nf, |_, _| 2.0 * rng.random::<f64>() - 1.0),
        b_s: DVector::from_fn(ns, |_, _| 2.0 * rng.random::<f64>() - 1.0),
    }
}
