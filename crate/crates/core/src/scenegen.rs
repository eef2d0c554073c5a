//! Deterministic synthetic scenes with known ground truth.
//!
//! A scene is a continuous trajectory sampled at keyframes, a set of
//! landmarks inside an axis-aligned box, and a stream of overlapping windows
//! that slide by one keyframe. The camera always looks at the centre of the
//! landmark box.
//!
//! Random numbers come from ChaCha8 (`rand_chacha`), one independent stream
//! per purpose, with uniforms built from 53 high bits of a `u64` and normals
//! from Box–Muller. Preintegrated IMU deltas are computed exactly from the
//! true states; the simulated 100 Hz IMU stream is integrated with the
//! midpoint rule only to obtain the bias Jacobians, the covariance and the
//! measurement-noise contribution (noisy minus clean integration). At zero
//! noise every residual at ground truth therefore vanishes up to rounding.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{exp_q, log_q, skew};
use crate::model::{
    default_gravity, BiasJacobians, Feature, ImuFactor, KeyframeState, Matrix15, PriorFactor,
    VisualObservation, WindowProblem, DEFAULT_MIN_INV_DEPTH, OFF_P, OFF_THETA, STATE_DIM,
};

/// Name of the random generator recorded in stream headers.
pub const RNG_NAME: &str = "chacha8/u53-uniform/box-muller";

/// Noise floors used for weighting when the simulated noise is smaller.
pub const PIXEL_SIGMA_FLOOR: f64 = 1e-3;
pub const ACCEL_SIGMA_FLOOR: f64 = 2e-2;
pub const GYRO_SIGMA_FLOOR: f64 = 2e-3;
pub const BIAS_RW_SIGMA_FLOOR: f64 = 1e-3;

/// Half-width of the field of view on the normalized image plane.
pub const FOV_HALF_TAN: f64 = 0.8;
/// Nearest depth at which a landmark counts as visible, meters.
pub const MIN_VISIBLE_DEPTH: f64 = 0.3;
const MAX_LANDMARK_ATTEMPTS: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trajectory {
    /// Horizontal circle around the box centre with a vertical oscillation.
    Circle {
        radius: f64,
        /// Angular rate, rad/s.
        rate: f64,
        height_amplitude: f64,
    },
    /// Sum of three seeded sinusoids per axis around a start point at
    /// `standoff` meters from the box centre.
    RandomWalk { standoff: f64, amplitude: f64 },
}

impl Default for Trajectory {
    fn default() -> Self {
        Trajectory::Circle {
            radius: 6.0,
            rate: 1.0,
            height_amplitude: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for LandmarkBox {
    fn default() -> Self {
        Self {
            min: [-2.5, -2.5, -1.5],
            max: [2.5, 2.5, 1.5],
        }
    }
}

impl LandmarkBox {
    pub fn center(&self) -> Vector3<f64> {
        Vector3::new(
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImuNoise {
    /// Per-sample accelerometer noise, m/s².
    pub accel_sigma: f64,
    /// Per-sample gyroscope noise, rad/s.
    pub gyro_sigma: f64,
    /// Bias random-walk density, used for weighting only.
    pub bias_rw_sigma: f64,
}

/// Perturbation magnitudes applied to initial states.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbMagnitudes {
    /// Norm of the position offset, m.
    pub position: f64,
    /// Rotation angle, rad.
    pub rotation: f64,
    /// Norm of the velocity offset, m/s.
    pub velocity: f64,
    /// Norm of each bias offset.
    pub bias: f64,
    /// Relative inverse-depth change (uniform in `±inv_depth`).
    pub inv_depth: f64,
}

impl PerturbMagnitudes {
    pub fn is_finite(&self) -> bool {
        [self.position, self.rotation, self.velocity, self.bias, self.inv_depth]
            .iter()
            .all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    /// Keyframes per window.
    pub n_keyframes: usize,
    /// Features per window.
    pub n_features: usize,
    /// Number of windows; consecutive windows share all but one keyframe.
    pub n_windows: usize,
    pub trajectory: Trajectory,
    /// Time between keyframes, s.
    pub keyframe_interval: f64,
    /// IMU sample rate, Hz.
    pub imu_rate: f64,
    pub landmark_box: LandmarkBox,
    pub pixel_noise_sigma: f64,
    pub imu_noise: ImuNoise,
    /// Largest keyframe-index distance over which a feature is observed.
    pub co_obs_span: usize,
    pub true_accel_bias: [f64; 3],
    pub true_gyro_bias: [f64; 3],
    /// Standard deviation of the pose prior fixing the gauge of the first
    /// window.
    pub gauge_sigma: f64,
    pub perturbation: PerturbMagnitudes,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_keyframes: 11,
            n_features: 110,
            n_windows: 1,
            trajectory: Trajectory::default(),
            keyframe_interval: 0.5,
            imu_rate: 100.0,
            landmark_box: LandmarkBox::default(),
            pixel_noise_sigma: 0.0,
            imu_noise: ImuNoise::default(),
            co_obs_span: 4,
            true_accel_bias: [0.02, -0.01, 0.03],
            true_gyro_bias: [0.002, -0.001, 0.0015],
            gauge_sigma: 1e-3,
            perturbation: PerturbMagnitudes::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SceneError {
    #[error("invalid config field `{field}`: {message}")]
    InvalidConfig { field: &'static str, message: String },
    #[error("trajectory leaves the landmark visibility region near keyframe {keyframe}")]
    NotVisible { keyframe: usize },
}

fn invalid(field: &'static str, message: impl Into<String>) -> SceneError {
    SceneError::InvalidConfig {
        field,
        message: message.into(),
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.n_keyframes < 2 {
            return Err(invalid("n_keyframes", "must be at least 2"));
        }
        if self.n_features < self.n_keyframes {
            return Err(invalid(
                "n_features",
                format!(
                    "must be at least n_keyframes ({} < {})",
                    self.n_features, self.n_keyframes
                ),
            ));
        }
        if self.n_windows < 1 {
            return Err(invalid("n_windows", "must be at least 1"));
        }
        if self.co_obs_span < 1 {
            return Err(invalid("co_obs_span", "must be at least 1"));
        }
        if !(self.keyframe_interval > 0.0) {
            return Err(invalid("keyframe_interval", "must be positive"));
        }
        if !(self.imu_rate * self.keyframe_interval >= 1.0) {
            return Err(invalid("imu_rate", "needs at least one sample per keyframe interval"));
        }
        for k in 0..3 {
            if !(self.landmark_box.min[k] < self.landmark_box.max[k]) {
                return Err(invalid("landmark_box", "min must be below max on every axis"));
            }
        }
        let sigmas = [
            self.pixel_noise_sigma,
            self.imu_noise.accel_sigma,
            self.imu_noise.gyro_sigma,
            self.imu_noise.bias_rw_sigma,
        ];
        if sigmas.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(invalid("noise", "sigmas must be finite and non-negative"));
        }
        if !(self.gauge_sigma > 0.0) {
            return Err(invalid("gauge_sigma", "must be positive"));
        }
        if !self.perturbation.is_finite() {
            return Err(invalid("perturbation", "magnitudes must be finite"));
        }
        match self.trajectory {
            Trajectory::Circle { radius, rate, .. } if !(radius > 0.0) || !rate.is_finite() => {
                Err(invalid("trajectory", "circle needs a positive radius and finite rate"))
            }
            Trajectory::RandomWalk { standoff, amplitude }
                if !(standoff > 0.0) || !(amplitude >= 0.0) =>
            {
                Err(invalid("trajectory", "random walk needs positive standoff"))
            }
            _ => Ok(()),
        }
    }

    /// Total keyframes along the trajectory.
    pub fn total_keyframes(&self) -> usize {
        self.n_keyframes + self.n_windows - 1
    }
}

/// Known truth of a generated scene, keyed by global ids.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub keyframes: Vec<KeyframeState>,
    pub landmarks: BTreeMap<usize, Vector3<f64>>,
    pub inv_depths: BTreeMap<usize, f64>,
}

impl GroundTruth {
    pub fn keyframe(&self, id: usize) -> Option<&KeyframeState> {
        self.keyframes.binary_search_by_key(&id, |k| k.id).ok().map(|k| &self.keyframes[k])
    }
}

/// Output of [`generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// Windows with perturbed initial states.
    pub windows: Vec<WindowProblem>,
    pub ground_truth: GroundTruth,
    /// The same windows with every state at ground truth.
    pub truth_windows: Vec<WindowProblem>,
}

// ---------------------------------------------------------------------------
// Random numbers.

/// Purpose-specific stream ids.
#[derive(Clone, Copy)]
enum Stream {
    Trajectory = 1,
    Landmarks = 2,
    PixelNoise = 3,
    ImuNoise = 4,
    Perturb = 5,
}

fn rng_for(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = 1.0 - uniform(rng);
    let u2 = uniform(rng);
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

fn normal3(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::new(normal(rng), normal(rng), normal(rng))
}

fn unit3(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = normal3(rng);
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

// ---------------------------------------------------------------------------
// Continuous trajectory.

struct Motion {
    center: Vector3<f64>,
    kind: MotionKind,
}

enum MotionKind {
    Circle { radius: f64, rate: f64, height: f64 },
    Walk { start: Vector3<f64>, terms: Vec<[(f64, f64, f64); 3]> },
}

impl Motion {
    fn new(cfg: &SceneConfig) -> Self {
        let center = cfg.landmark_box.center();
        let kind = match cfg.trajectory {
            Trajectory::Circle {
                radius,
                rate,
                height_amplitude,
            } => MotionKind::Circle {
                radius,
                rate,
                height: height_amplitude,
            },
            Trajectory::RandomWalk {
                standoff,
                amplitude,
            } => {
                let mut rng = rng_for(cfg.seed, Stream::Trajectory);
                let heading = 2.0 * PI * uniform(&mut rng);
                let start = center + standoff * Vector3::new(heading.cos(), heading.sin(), 0.0);
                let terms = (0..3)
                    .map(|_| {
                        let mut axis = [(0.0, 0.0, 0.0); 3];
                        for t in axis.iter_mut() {
                            let a = amplitude * (0.2 + 0.8 * uniform(&mut rng)) / 3.0;
                            let f = 0.1 + 0.5 * uniform(&mut rng);
                            let phase = 2.0 * PI * uniform(&mut rng);
                            *t = (a, f, phase);
                        }
                        axis
                    })
                    .collect();
                MotionKind::Walk { start, terms }
            }
        };
        Self { center, kind }
    }

    /// Position, velocity and acceleration at time `t`.
    fn kinematics(&self, t: f64) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        match &self.kind {
            MotionKind::Circle {
                radius,
                rate,
                height,
            } => {
                let (s, c) = (rate * t).sin_cos();
                let (s2, c2) = (2.0 * rate * t).sin_cos();
                let w = *rate;
                let p = self.center + Vector3::new(radius * c, radius * s, height * s2);
                let v = Vector3::new(-radius * w * s, radius * w * c, 2.0 * w * height * c2);
                let a = Vector3::new(
                    -radius * w * w * c,
                    -radius * w * w * s,
                    -4.0 * w * w * height * s2,
                );
                (p, v, a)
            }
            MotionKind::Walk { start, terms } => {
                let mut p = *start;
                let mut v = Vector3::zeros();
                let mut a = Vector3::zeros();
                for axis_terms in terms {
                    for (k, (amp, f, phase)) in axis_terms.iter().enumerate() {
                        let arg = f * t + phase;
                        p[k] += amp * (arg.sin() - phase.sin());
                        v[k] += amp * f * arg.cos();
                        a[k] -= amp * f * f * arg.sin();
                    }
                }
                (p, v, a)
            }
        }
    }

    /// Camera looks at the box centre; x right, y down, z forward.
    fn attitude(&self, t: f64) -> UnitQuaternion<f64> {
        let (p, _, _) = self.kinematics(t);
        let forward = (self.center - p).normalize();
        let right = forward.cross(&Vector3::z()).normalize();
        let down = forward.cross(&right);
        let m = Matrix3::from_columns(&[right, down, forward]);
        UnitQuaternion::from_matrix(&m)
    }

    /// Body-frame angular velocity by central difference of the attitude.
    fn body_rate(&self, t: f64) -> Vector3<f64> {
        let h = 1e-5;
        let a = self.attitude(t - h);
        let b = self.attitude(t + h);
        log_q(&(a.inverse() * b)) / (2.0 * h)
    }
}

// ---------------------------------------------------------------------------
// IMU simulation and preintegration.

#[derive(Clone, Copy)]
struct ImuSample {
    acc: Vector3<f64>,
    gyr: Vector3<f64>,
}

#[derive(Clone)]
struct Preintegrated {
    dp: Vector3<f64>,
    dq: UnitQuaternion<f64>,
    dv: Vector3<f64>,
}

fn midpoint_integrate(
    samples: &[ImuSample],
    dt: f64,
    ba: &Vector3<f64>,
    bg: &Vector3<f64>,
) -> Preintegrated {
    let mut dp = Vector3::zeros();
    let mut dv = Vector3::zeros();
    let mut dq = UnitQuaternion::identity();
    for pair in samples.windows(2) {
        let w = 0.5 * (pair[0].gyr + pair[1].gyr) - bg;
        let q1 = dq * exp_q(&(w * dt));
        let a0 = dq * (pair[0].acc - ba);
        let a1 = q1 * (pair[1].acc - ba);
        let a = 0.5 * (a0 + a1);
        dp += dv * dt + 0.5 * a * dt * dt;
        dv += a * dt;
        dq = q1;
    }
    Preintegrated { dp, dq, dv }
}

fn bias_jacobians(
    samples: &[ImuSample],
    dt: f64,
    ba: &Vector3<f64>,
    bg: &Vector3<f64>,
) -> BiasJacobians {
    let h = 1e-6;
    let base = midpoint_integrate(samples, dt, ba, bg);
    let mut out = BiasJacobians::zeros();
    for k in 0..3 {
        let mut e = Vector3::zeros();
        e[k] = h;
        let ap = midpoint_integrate(samples, dt, &(ba + e), bg);
        let am = midpoint_integrate(samples, dt, &(ba - e), bg);
        out.dp_dba.set_column(k, &((ap.dp - am.dp) / (2.0 * h)));
        out.dv_dba.set_column(k, &((ap.dv - am.dv) / (2.0 * h)));
        let gp = midpoint_integrate(samples, dt, ba, &(bg + e));
        let gm = midpoint_integrate(samples, dt, ba, &(bg - e));
        out.dp_dbg.set_column(k, &((gp.dp - gm.dp) / (2.0 * h)));
        out.dv_dbg.set_column(k, &((gp.dv - gm.dv) / (2.0 * h)));
        let rq = log_q(&(base.dq.inverse() * gp.dq)) - log_q(&(base.dq.inverse() * gm.dq));
        out.dq_dbg.set_column(k, &(rq / (2.0 * h)));
    }
    out
}

/// First-order covariance of the preintegrated error state
/// `[δp, δθ, δv, δba, δbg]`.
fn preintegration_covariance(
    samples: &[ImuSample],
    dt: f64,
    ba: &Vector3<f64>,
    bg: &Vector3<f64>,
    noise: &ImuNoise,
) -> Matrix15 {
    let sa = noise.accel_sigma.max(ACCEL_SIGMA_FLOOR);
    let sg = noise.gyro_sigma.max(GYRO_SIGMA_FLOOR);
    let sb = noise.bias_rw_sigma.max(BIAS_RW_SIGMA_FLOOR);
    let mut cov = Matrix15::zeros();
    let mut dq = UnitQuaternion::identity();
    let i3 = Matrix3::identity();
    for pair in samples.windows(2) {
        let w = 0.5 * (pair[0].gyr + pair[1].gyr) - bg;
        let acc = 0.5 * (pair[0].acc + pair[1].acc) - ba;
        let r = dq.to_rotation_matrix().into_inner();
        let mut f = Matrix15::identity();
        f.fixed_view_mut::<3, 3>(0, 6).copy_from(&(i3 * dt));
        f.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(-0.5 * r * skew(&acc) * dt * dt));
        f.fixed_view_mut::<3, 3>(0, 9).copy_from(&(-0.5 * r * dt * dt));
        f.fixed_view_mut::<3, 3>(3, 3)
            .copy_from(&(i3 - skew(&w) * dt));
        f.fixed_view_mut::<3, 3>(3, 12).copy_from(&(-i3 * dt));
        f.fixed_view_mut::<3, 3>(6, 3).copy_from(&(-r * skew(&acc) * dt));
        f.fixed_view_mut::<3, 3>(6, 9).copy_from(&(-r * dt));
        let mut g = SMatrix::<f64, 15, 12>::zeros();
        g.fixed_view_mut::<3, 3>(0, 0).copy_from(&(0.5 * r * dt * dt));
        g.fixed_view_mut::<3, 3>(3, 3).copy_from(&(i3 * dt));
        g.fixed_view_mut::<3, 3>(6, 0).copy_from(&(r * dt));
        g.fixed_view_mut::<3, 3>(9, 6).copy_from(&(i3 * dt.sqrt()));
        g.fixed_view_mut::<3, 3>(12, 9).copy_from(&(i3 * dt.sqrt()));
        let mut q = SMatrix::<f64, 12, 12>::zeros();
        for k in 0..3 {
            q[(k, k)] = sa * sa;
            q[(3 + k, 3 + k)] = sg * sg;
            q[(6 + k, 6 + k)] = sb * sb;
            q[(9 + k, 9 + k)] = sb * sb;
        }
        cov = f * cov * f.transpose() + g * q * g.transpose();
        dq *= exp_q(&(w * dt));
    }
    0.5 * (cov + cov.transpose())
}

/// Upper-triangular `R` with `RᵀR = cov⁻¹`.
fn sqrt_information(cov: &Matrix15) -> Matrix15 {
    let info = cov
        .try_inverse()
        .expect("preintegration covariance is positive definite");
    let info = 0.5 * (info + info.transpose());
    let l = info
        .cholesky()
        .expect("information matrix is positive definite")
        .l();
    let mut r = l.transpose();
    for row in 0..15 {
        for col in 0..row {
            r[(row, col)] = 0.0;
        }
    }
    r
}

fn make_imu_factor(
    motion: &Motion,
    cfg: &SceneConfig,
    truth_i: &KeyframeState,
    truth_j: &KeyframeState,
    t0: f64,
    rng: &mut ChaCha8Rng,
) -> ImuFactor {
    let g = default_gravity();
    let dt_kf = cfg.keyframe_interval;
    let steps = (cfg.imu_rate * dt_kf).round() as usize;
    let h = dt_kf / steps as f64;
    let ba = Vector3::from(cfg.true_accel_bias);
    let bg = Vector3::from(cfg.true_gyro_bias);

    let clean: Vec<ImuSample> = (0..=steps)
        .map(|k| {
            let t = t0 + k as f64 * h;
            let (_, _, a) = motion.kinematics(t);
            let q = motion.attitude(t);
            ImuSample {
                acc: q.inverse() * (a - g) + ba,
                gyr: motion.body_rate(t) + bg,
            }
        })
        .collect();
    let noisy: Vec<ImuSample> = clean
        .iter()
        .map(|s| ImuSample {
            acc: s.acc + cfg.imu_noise.accel_sigma * normal3(rng),
            gyr: s.gyr + cfg.imu_noise.gyro_sigma * normal3(rng),
        })
        .collect();

    let int_clean = midpoint_integrate(&clean, h, &ba, &bg);
    let int_noisy = midpoint_integrate(&noisy, h, &ba, &bg);

    let qi_inv = truth_i.q.inverse();
    let dp_exact = qi_inv * (truth_j.p - truth_i.p - truth_i.v * dt_kf - 0.5 * g * dt_kf * dt_kf);
    let dv_exact = qi_inv * (truth_j.v - truth_i.v - g * dt_kf);
    let dq_exact = qi_inv * truth_j.q;

    let dp_hat = dp_exact + (int_noisy.dp - int_clean.dp);
    let dv_hat = dv_exact + (int_noisy.dv - int_clean.dv);
    let dq_hat = if cfg.imu_noise.gyro_sigma == 0.0 && cfg.imu_noise.accel_sigma == 0.0 {
        dq_exact
    } else {
        dq_exact * (int_clean.dq.inverse() * int_noisy.dq)
    };

    let cov = preintegration_covariance(&clean, h, &ba, &bg, &cfg.imu_noise);
    ImuFactor {
        kf_i: truth_i.id,
        kf_j: truth_j.id,
        dt: dt_kf,
        dp_hat,
        dv_hat,
        dq_hat,
        bias_jacobians: bias_jacobians(&clean, h, &ba, &bg),
        sqrt_info: sqrt_information(&cov),
        lin_ba: ba,
        lin_bg: bg,
    }
}

// ---------------------------------------------------------------------------
// Landmarks and observations.

fn project(state: &KeyframeState, point: &Vector3<f64>) -> Option<(Vector2<f64>, f64)> {
    let pc = state.q.inverse() * (point - state.p);
    if pc.z < MIN_VISIBLE_DEPTH {
        return None;
    }
    let uv = Vector2::new(pc.x / pc.z, pc.y / pc.z);
    if uv.x.abs() > FOV_HALF_TAN || uv.y.abs() > FOV_HALF_TAN {
        return None;
    }
    Some((uv, pc.z))
}

struct Track {
    id: usize,
    anchor: usize,
    anchor_uv: Vector2<f64>,
    inv_depth: f64,
    point: Vector3<f64>,
    /// (keyframe id, noisy uv)
    observations: Vec<(usize, Vector2<f64>)>,
}

/// Number of features anchored at global keyframe `k`. Periodic with period
/// `n_keyframes − 1` so that every window holds exactly `n_features`.
fn anchored_count(cfg: &SceneConfig, k: usize) -> usize {
    let period = cfg.n_keyframes - 1;
    let base = cfg.n_features / period;
    let extra = cfg.n_features % period;
    base + usize::from(k % period < extra)
}

fn make_tracks(cfg: &SceneConfig, truth: &[KeyframeState]) -> Result<Vec<Track>, SceneError> {
    let mut rng = rng_for(cfg.seed, Stream::Landmarks);
    let mut noise = rng_for(cfg.seed, Stream::PixelNoise);
    let total = truth.len();
    let bx = &cfg.landmark_box;
    let mut tracks = Vec::new();
    for anchor in 0..total - 1 {
        for _ in 0..anchored_count(cfg, anchor) {
            let mut found = None;
            for _ in 0..MAX_LANDMARK_ATTEMPTS {
                let point = Vector3::new(
                    bx.min[0] + (bx.max[0] - bx.min[0]) * uniform(&mut rng),
                    bx.min[1] + (bx.max[1] - bx.min[1]) * uniform(&mut rng),
                    bx.min[2] + (bx.max[2] - bx.min[2]) * uniform(&mut rng),
                );
                if let (Some(a), Some(_)) =
                    (project(&truth[anchor], &point), project(&truth[anchor + 1], &point))
                {
                    found = Some((point, a));
                    break;
                }
            }
            let (point, (anchor_uv, depth)) =
                found.ok_or(SceneError::NotVisible { keyframe: anchor })?;
            let last = (anchor + cfg.co_obs_span).min(total - 1);
            let observations = (anchor + 1..=last)
                .filter_map(|k| {
                    project(&truth[k], &point).map(|(uv, _)| {
                        let n = Vector2::new(normal(&mut noise), normal(&mut noise));
                        (k, uv + cfg.pixel_noise_sigma * n)
                    })
                })
                .collect();
            tracks.push(Track {
                id: tracks.len(),
                anchor,
                anchor_uv,
                inv_depth: 1.0 / depth,
                point,
                observations,
            });
        }
    }
    Ok(tracks)
}

fn gauge_prior(state: &KeyframeState, sigma: f64) -> PriorFactor {
    let mut h = DMatrix::zeros(STATE_DIM, STATE_DIM);
    let w = 1.0 / (sigma * sigma);
    for k in 0..3 {
        h[(OFF_P + k, OFF_P + k)] = w;
        h[(OFF_THETA + k, OFF_THETA + k)] = w;
    }
    PriorFactor::new(vec![state.clone()], h, DVector::zeros(STATE_DIM))
        .expect("gauge prior dimensions")
}

/// Generates a scene. Deterministic in the config (including its seed).
pub fn generate(cfg: &SceneConfig) -> Result<Scene, SceneError> {
    cfg.validate()?;
    let motion = Motion::new(cfg);
    let total = cfg.total_keyframes();
    let ba = Vector3::from(cfg.true_accel_bias);
    let bg = Vector3::from(cfg.true_gyro_bias);

    let truth: Vec<KeyframeState> = (0..total)
        .map(|k| {
            let t = k as f64 * cfg.keyframe_interval;
            let (p, v, _) = motion.kinematics(t);
            KeyframeState {
                id: k,
                p,
                q: motion.attitude(t),
                v,
                ba,
                bg,
            }
        })
        .collect();

    let mut imu_rng = rng_for(cfg.seed, Stream::ImuNoise);
    let imu: Vec<ImuFactor> = (0..total - 1)
        .map(|k| {
            let t0 = k as f64 * cfg.keyframe_interval;
            make_imu_factor(&motion, cfg, &truth[k], &truth[k + 1], t0, &mut imu_rng)
        })
        .collect();

    let tracks = make_tracks(cfg, &truth)?;
    let obs_sigma = cfg.pixel_noise_sigma.max(PIXEL_SIGMA_FLOOR);

    let mut truth_windows = Vec::with_capacity(cfg.n_windows);
    for w in 0..cfg.n_windows {
        let last = w + cfg.n_keyframes - 1;
        let in_window = |k: usize| (w..=last).contains(&k);
        let mut features = Vec::new();
        let mut observations = Vec::new();
        for t in tracks.iter().filter(|t| t.anchor >= w && t.anchor < last) {
            let seen: Vec<_> = t.observations.iter().filter(|(k, _)| in_window(*k)).collect();
            if seen.is_empty() {
                continue;
            }
            features.push(Feature {
                id: t.id,
                anchor_kf: t.anchor,
                anchor_uv: t.anchor_uv,
                inv_depth: t.inv_depth,
            });
            observations.extend(seen.into_iter().map(|(k, uv)| VisualObservation {
                feature_id: t.id,
                kf_id: *k,
                uv: *uv,
                sigma: obs_sigma,
            }));
        }
        truth_windows.push(WindowProblem {
            keyframes: truth[w..=last].to_vec(),
            features,
            observations,
            imu_factors: imu[w..last].to_vec(),
            prior: (w == 0).then(|| gauge_prior(&truth[0], cfg.gauge_sigma)),
            gravity: default_gravity(),
        });
    }

    let windows = truth_windows
        .iter()
        .enumerate()
        .map(|(w, tw)| perturb(tw, &cfg.perturbation, cfg.seed ^ ((w as u64) << 32)))
        .collect();

    let ground_truth = GroundTruth {
        keyframes: truth,
        landmarks: tracks.iter().map(|t| (t.id, t.point)).collect(),
        inv_depths: tracks.iter().map(|t| (t.id, t.inv_depth)).collect(),
    };
    Ok(Scene {
        windows,
        ground_truth,
        truth_windows,
    })
}

/// Perturbs every state of a window by the given magnitudes in seeded random
/// directions. Zero magnitudes return the window unchanged.
pub fn perturb(window: &WindowProblem, magnitudes: &PerturbMagnitudes, seed: u64) -> WindowProblem {
    let mut rng = rng_for(seed, Stream::Perturb);
    let mut out = window.clone();
    for kf in &mut out.keyframes {
        let dp = magnitudes.position * unit3(&mut rng);
        let dtheta = magnitudes.rotation * unit3(&mut rng);
        let dv = magnitudes.velocity * unit3(&mut rng);
        let dba = magnitudes.bias * unit3(&mut rng);
        let dbg = magnitudes.bias * unit3(&mut rng);
        if magnitudes.position != 0.0 {
            kf.p += dp;
        }
        if magnitudes.rotation != 0.0 {
            kf.q = crate::geometry::retract_q(&kf.q, &dtheta);
        }
        if magnitudes.velocity != 0.0 {
            kf.v += dv;
        }
        if magnitudes.bias != 0.0 {
            kf.ba += dba;
            kf.bg += dbg;
        }
    }
    for f in &mut out.features {
        let u = 2.0 * uniform(&mut rng) - 1.0;
        if magnitudes.inv_depth != 0.0 {
            f.inv_depth = (f.inv_depth * (1.0 + magnitudes.inv_depth * u)).max(DEFAULT_MIN_INV_DEPTH);
        }
    }
    out
}

/// Draws `n` seeds from a base seed, for repeated experiments.
pub fn derived_seeds(base: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    (0..n).map(|_| rng.random()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factors::{imu_residual, visual_residual};
    use crate::model::validate;

    fn small() -> SceneConfig {
        SceneConfig {
            n_keyframes: 3,
            n_features: 30,
            seed: 1,
            ..Default::default()
        }
    }

    #[test]
    fn zero_noise_residuals_vanish_at_truth() {
        let scene = generate(&small()).unwrap();
        let w = &scene.truth_windows[0];
        assert!(validate(w).is_empty(), "{:?}", validate(w));
        for obs in &w.observations {
            let r = visual_residual(w, obs).unwrap();
            assert!(r.amax() * obs.sigma < 1e-10, "{r}");
        }
        for f in &w.imu_factors {
            let i = w.kf_index(f.kf_i).unwrap();
            let j = w.kf_index(f.kf_j).unwrap();
            let r = imu_residual(f, &w.keyframes[i], &w.keyframes[j], &w.gravity);
            let raw = crate::factors::imu_residual_raw(f, &w.keyframes[i], &w.keyframes[j], &w.gravity);
            assert!(raw.amax() < 1e-10, "{raw}");
            assert!(r.amax() < 1e-6, "{r}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SceneConfig {
            seed: 7,
            pixel_noise_sigma: 1e-3,
            ..Default::default()
        };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
    }

    #[test]
    fn every_window_holds_configured_feature_count() {
        let cfg = SceneConfig {
            n_keyframes: 5,
            n_features: 37,
            n_windows: 6,
            seed: 3,
            ..Default::default()
        };
        let scene = generate(&cfg).unwrap();
        for w in &scene.windows {
            assert_eq!(w.features.len(), 37);
            assert!(validate(w).is_empty(), "{:?}", validate(w));
        }
    }

    #[test]
    fn observations_respect_the_span() {
        let cfg = SceneConfig {
            n_windows: 3,
            co_obs_span: 2,
            seed: 5,
            ..Default::default()
        };
        let scene = generate(&cfg).unwrap();
        for w in &scene.windows {
            let groups = w.observations_by_feature();
            for (f, g) in w.features.iter().zip(groups) {
                assert!(g.len() <= cfg.co_obs_span);
                for o in g {
                    let d = w.observations[o].kf_id - f.anchor_kf;
                    assert!(d >= 1 && d <= cfg.co_obs_span);
                }
            }
        }
    }

    #[test]
    fn rejects_too_few_features() {
        let cfg = SceneConfig {
            n_keyframes: 11,
            n_features: 5,
            ..Default::default()
        };
        assert!(matches!(
            generate(&cfg),
            Err(SceneError::InvalidConfig { field: "n_features", .. })
        ));
    }

    #[test]
    fn rejects_trajectory_outside_visibility() {
        // A camera placed inside the box with a huge box still sees points,
        // so push the box far behind a random walk that looks elsewhere.
        let cfg = SceneConfig {
            landmark_box: LandmarkBox {
                min: [-0.01, -0.01, -0.01],
                max: [0.01, 0.01, 0.01],
            },
            trajectory: Trajectory::Circle {
                radius: 0.001,
                rate: 0.2,
                height_amplitude: 0.0,
            },
            ..Default::default()
        };
        assert!(matches!(generate(&cfg), Err(SceneError::NotVisible { .. })));
    }

    #[test]
    fn random_walk_scenes_are_valid() {
        let cfg = SceneConfig {
            trajectory: Trajectory::RandomWalk {
                standoff: 6.0,
                amplitude: 1.0,
            },
            n_windows: 2,
            seed: 9,
            ..Default::default()
        };
        let scene = generate(&cfg).unwrap();
        for w in &scene.truth_windows {
            assert!(validate(w).is_empty());
            for obs in &w.observations {
                assert!(visual_residual(w, obs).unwrap().amax() * obs.sigma < 1e-10);
            }
        }
    }

    #[test]
    fn zero_perturbation_is_identity() {
        let scene = generate(&small()).unwrap();
        let w = &scene.truth_windows[0];
        assert_eq!(&perturb(w, &PerturbMagnitudes::default(), 4), w);
    }

    #[test]
    fn bias_jacobians_predict_reintegration() {
        let cfg = small();
        let motion = Motion::new(&cfg);
        let ba = Vector3::from(cfg.true_accel_bias);
        let bg = Vector3::from(cfg.true_gyro_bias);
        let h = 0.01;
        let samples: Vec<ImuSample> = (0..=50)
            .map(|k| {
                let t = k as f64 * h;
                let (_, _, a) = motion.kinematics(t);
                let q = motion.attitude(t);
                ImuSample {
                    acc: q.inverse() * (a - default_gravity()) + ba,
                    gyr: motion.body_rate(t) + bg,
                }
            })
            .collect();
        let j = bias_jacobians(&samples, h, &ba, &bg);
        let base = midpoint_integrate(&samples, h, &ba, &bg);
        let d = Vector3::new(1e-3, -2e-3, 5e-4);
        let moved = midpoint_integrate(&samples, h, &(ba + d), &(bg + d * 0.1));
        let pred = base.dp + j.dp_dba * d + j.dp_dbg * (d * 0.1);
        assert!((moved.dp - pred).amax() < 1e-7);
        let pred_v = base.dv + j.dv_dba * d + j.dv_dbg * (d * 0.1);
        assert!((moved.dv - pred_v).amax() < 1e-7);
    }
}
