//! Residuals and Jacobians of the visual, inertial and prior factors.
//!
//! Visual Jacobians are produced in three levels. The keyframe level builds
//! one rotation matrix per keyframe. The feature level lifts each feature to
//! its anchor-camera and world coordinates once. The observation level then
//! runs two phases per observation: the first consumes the feature
//! coordinates, the second applies the observing keyframe's rotation and
//! emits the final blocks. The loop nest is features outer, observations
//! inner, so a feature's coordinates stay resident across all of its
//! observations.
//!
//! The IMU Jacobian of one factor is 15×30. Only 14 of its 50 3×3 blocks are
//! dense; the remaining ones are the four signed identities of the bias rows
//! and 32 structural zeros, neither of which is ever stored.

use nalgebra::{
    DMatrix, DVector, Matrix2x3, Matrix3, Quaternion, SMatrix, UnitQuaternion, Vector2, Vector3,
};

use crate::geometry::{canonical, exp_q, q_left, q_right, right_jacobian, skew, vec_block};
use crate::model::{ImuFactor, KeyframeState, Vector15, VisualObservation, WindowProblem};

/// Default minimum depth of a point in the observing camera, meters.
pub const DEFAULT_MIN_DEPTH: f64 = 1e-6;

pub type Matrix2x6 = SMatrix<f64, 2, 6>;
pub type Matrix15x30 = SMatrix<f64, 15, 30>;

/// The transformed point fell behind (or onto) the observing camera.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("cheirality: feature {feature_id} has depth {depth:e} in keyframe {kf_id}")]
pub struct CheiralityError {
    pub feature_id: usize,
    pub kf_id: usize,
    pub depth: f64,
}

fn project_jacobian(p: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    Matrix2x3::new(iz, 0.0, -p.x * iz * iz, 0.0, iz, -p.y * iz * iz)
}

fn lookup<'a>(
    window: &'a WindowProblem,
    obs: &VisualObservation,
) -> (&'a crate::model::Feature, &'a KeyframeState, &'a KeyframeState) {
    let f = &window.features[window
        .feature_index(obs.feature_id)
        .expect("observation references unknown feature")];
    let anchor = &window.keyframes[window.kf_index(f.anchor_kf).expect("anchor outside window")];
    let target = &window.keyframes[window.kf_index(obs.kf_id).expect("keyframe outside window")];
    (f, anchor, target)
}

/// Whitened reprojection residual of one observation.
pub fn visual_residual(
    window: &WindowProblem,
    obs: &VisualObservation,
) -> Result<Vector2<f64>, CheiralityError> {
    let (f, anchor, target) = lookup(window, obs);
    let world = anchor.q * f.anchor_point() + anchor.p;
    let pc = target.q.inverse() * (world - target.p);
    if pc.z <= DEFAULT_MIN_DEPTH {
        return Err(CheiralityError {
            feature_id: obs.feature_id,
            kf_id: obs.kf_id,
            depth: pc.z,
        });
    }
    Ok((Vector2::new(pc.x / pc.z, pc.y / pc.z) - obs.uv) / obs.sigma)
}

/// Whitened blocks of one visual observation. Pose blocks are ordered
/// `[δp, δθ]` and occupy the first six columns of the keyframe state.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationJacobian {
    pub observation: usize,
    pub feature: usize,
    /// Keyframe index of the anchor.
    pub anchor: usize,
    /// Keyframe index of the observing keyframe.
    pub target: usize,
    pub j_pose_anchor: Matrix2x6,
    pub j_pose_obs: Matrix2x6,
    pub j_inv_depth: Vector2<f64>,
    pub residual: Vector2<f64>,
}

/// Number of evaluations at each level of the visual dataflow.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ReuseCounters {
    pub keyframe_level: usize,
    pub feature_level: usize,
    pub observation_level: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualJacobianBlocks {
    pub blocks: Vec<ObservationJacobian>,
    pub counters: ReuseCounters,
    pub skipped: Vec<CheiralityError>,
}

struct FeatureLevel {
    world: Vector3<f64>,
    /// ∂world/∂δθ_anchor.
    d_theta: Matrix3<f64>,
    /// ∂world/∂λ.
    d_inv_depth: Vector3<f64>,
}

/// Residuals and Jacobian blocks of every visual observation.
pub fn visual_jacobians(window: &WindowProblem) -> VisualJacobianBlocks {
    let mut counters = ReuseCounters::default();

    // Keyframe level.
    let rotations: Vec<Matrix3<f64>> = window
        .keyframes
        .iter()
        .map(|k| {
            counters.keyframe_level += 1;
            k.q.to_rotation_matrix().into_inner()
        })
        .collect();

    let groups = window.observations_by_feature();
    let mut blocks = Vec::with_capacity(window.observations.len());
    let mut skipped = Vec::new();

    for (fi, feature) in window.features.iter().enumerate() {
        // Feature level.
        let ai = window.kf_index(feature.anchor_kf).expect("anchor outside window");
        let anchor = &window.keyframes[ai];
        let ra = &rotations[ai];
        let pa = feature.anchor_point();
        let ra_pa = ra * pa;
        let fl = FeatureLevel {
            world: ra_pa + anchor.p,
            d_theta: -ra * skew(&pa),
            d_inv_depth: -ra_pa / feature.inv_depth,
        };
        counters.feature_level += 1;

        for &oi in &groups[fi] {
            let obs = &window.observations[oi];
            let ti = window.kf_index(obs.kf_id).expect("keyframe outside window");
            if ti == ai {
                continue;
            }
            counters.observation_level += 1;
            let target = &window.keyframes[ti];

            // Phase 1: feature coordinates relative to the observer.
            let rel = fl.world - target.p;

            // Phase 2: rotation into the observing camera.
            let rt = rotations[ti].transpose();
            let pc = rt * rel;
            if pc.z <= DEFAULT_MIN_DEPTH {
                skipped.push(CheiralityError {
                    feature_id: feature.id,
                    kf_id: obs.kf_id,
                    depth: pc.z,
                });
                continue;
            }
            let w = 1.0 / obs.sigma;
            let jp = project_jacobian(&pc) * w;
            let jp_rt = jp * rt;

            let mut j_anchor = Matrix2x6::zeros();
            j_anchor.fixed_view_mut::<2, 3>(0, 0).copy_from(&jp_rt);
            j_anchor
                .fixed_view_mut::<2, 3>(0, 3)
                .copy_from(&(jp_rt * fl.d_theta));
            let mut j_obs = Matrix2x6::zeros();
            j_obs.fixed_view_mut::<2, 3>(0, 0).copy_from(&(-jp_rt));
            j_obs.fixed_view_mut::<2, 3>(0, 3).copy_from(&(jp * skew(&pc)));

            blocks.push(ObservationJacobian {
                observation: oi,
                feature: fi,
                anchor: ai,
                target: ti,
                j_pose_anchor: j_anchor,
                j_pose_obs: j_obs,
                j_inv_depth: jp_rt * fl.d_inv_depth,
                residual: (Vector2::new(pc.x / pc.z, pc.y / pc.z) - obs.uv) * w,
            });
        }
    }

    VisualJacobianBlocks {
        blocks,
        counters,
        skipped,
    }
}

/// Bias-corrected preintegrated deltas `(Δp′, Δq′, Δv′)` and the rotation
/// vector used for the rotation correction.
fn corrected_deltas(
    factor: &ImuFactor,
    si: &KeyframeState,
) -> (Vector3<f64>, UnitQuaternion<f64>, Vector3<f64>, Vector3<f64>) {
    let bj = &factor.bias_jacobians;
    let dba = si.ba - factor.lin_ba;
    let dbg = si.bg - factor.lin_bg;
    let dp = factor.dp_hat + bj.dp_dba * dba + bj.dp_dbg * dbg;
    let dv = factor.dv_hat + bj.dv_dba * dba + bj.dv_dbg * dbg;
    let phi = bj.dq_dbg * dbg;
    let dq = factor.dq_hat * exp_q(&phi);
    (dp, dq, dv, phi)
}

/// Unwhitened IMU residual `[r_p, r_θ, r_v, r_ba, r_bg]`.
pub fn imu_residual_raw(
    factor: &ImuFactor,
    si: &KeyframeState,
    sj: &KeyframeState,
    gravity: &Vector3<f64>,
) -> Vector15 {
    imu_stage_two(factor, si, sj, gravity).0
}

/// IMU residual whitened by the factor's square-root information.
pub fn imu_residual(
    factor: &ImuFactor,
    si: &KeyframeState,
    sj: &KeyframeState,
    gravity: &Vector3<f64>,
) -> Vector15 {
    factor.sqrt_info * imu_residual_raw(factor, si, sj, gravity)
}

// Returns the residual together with the raw rotation error quaternion and
// the sign applied to make it canonical.
fn imu_stage_two(
    factor: &ImuFactor,
    si: &KeyframeState,
    sj: &KeyframeState,
    g: &Vector3<f64>,
) -> (Vector15, Quaternion<f64>, f64) {
    let dt = factor.dt;
    let (dp, dq, dv, _) = corrected_deltas(factor, si);
    let qi_inv = si.q.inverse();
    let e = dq.inverse().into_inner() * qi_inv.into_inner() * sj.q.into_inner();
    let sign = if e.w < 0.0 { -1.0 } else { 1.0 };
    let mut r = Vector15::zeros();
    let a = sj.p - si.p - si.v * dt - 0.5 * g * dt * dt;
    r.fixed_rows_mut::<3>(0).copy_from(&(qi_inv * a - dp));
    r.fixed_rows_mut::<3>(3).copy_from(&(2.0 * canonical(&e).imag()));
    r.fixed_rows_mut::<3>(6)
        .copy_from(&(qi_inv * (sj.v - si.v - g * dt) - dv));
    r.fixed_rows_mut::<3>(9).copy_from(&(sj.ba - si.ba));
    r.fixed_rows_mut::<3>(12).copy_from(&(sj.bg - si.bg));
    (r, e, sign)
}

/// Residual row groups of an IMU factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowGroup {
    P,
    Theta,
    V,
    Ba,
    Bg,
}

/// State column groups over the two keyframes of an IMU factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColGroup {
    Pi,
    ThetaI,
    Vi,
    BaI,
    BgI,
    Pj,
    ThetaJ,
    Vj,
    BaJ,
    BgJ,
}

impl RowGroup {
    pub const ALL: [RowGroup; 5] = [Self::P, Self::Theta, Self::V, Self::Ba, Self::Bg];
    pub fn offset(self) -> usize {
        3 * self as usize
    }
}

impl ColGroup {
    pub const ALL: [ColGroup; 10] = [
        Self::Pi,
        Self::ThetaI,
        Self::Vi,
        Self::BaI,
        Self::BgI,
        Self::Pj,
        Self::ThetaJ,
        Self::Vj,
        Self::BaJ,
        Self::BgJ,
    ];
    pub fn offset(self) -> usize {
        3 * self as usize
    }
}

/// How a 3×3 block of the IMU Jacobian is represented.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// Index into the stored dense blocks.
    Dense(usize),
    /// `sign · I`, implicit.
    Identity(i8),
    /// Structural zero, implicit.
    Zero,
}

const POSITION_COLS: [ColGroup; 6] = [
    ColGroup::Pi,
    ColGroup::ThetaI,
    ColGroup::Vi,
    ColGroup::BaI,
    ColGroup::BgI,
    ColGroup::Pj,
];
const ROTATION_COLS: [ColGroup; 3] = [ColGroup::ThetaI, ColGroup::BgI, ColGroup::ThetaJ];
const VELOCITY_COLS: [ColGroup; 5] = [
    ColGroup::ThetaI,
    ColGroup::Vi,
    ColGroup::BaI,
    ColGroup::BgI,
    ColGroup::Vj,
];

/// Number of stored dense blocks.
pub const IMU_DENSE_BLOCKS: usize = 14;
/// Number of implicit signed-identity blocks.
pub const IMU_IDENTITY_BLOCKS: usize = 4;
/// Number of implicit zero blocks.
pub const IMU_ZERO_BLOCKS: usize = 32;

/// Block-sparse IMU Jacobian. Stores the raw (unwhitened) dense blocks of the
/// three row groups that carry them, plus the raw residual.
#[derive(Debug, Clone, PartialEq)]
pub struct ImuJacobianSparse {
    pub position_rows: [Matrix3<f64>; 6],
    pub rotation_rows: [Matrix3<f64>; 3],
    pub velocity_rows: [Matrix3<f64>; 5],
    pub residual: Vector15,
}

impl ImuJacobianSparse {
    pub fn block_kind(row: RowGroup, col: ColGroup) -> BlockKind {
        let find = |cols: &[ColGroup], base: usize| {
            cols.iter()
                .position(|c| *c == col)
                .map_or(BlockKind::Zero, |k| BlockKind::Dense(base + k))
        };
        match row {
            RowGroup::P => find(&POSITION_COLS, 0),
            RowGroup::Theta => find(&ROTATION_COLS, 6),
            RowGroup::V => find(&VELOCITY_COLS, 9),
            RowGroup::Ba => match col {
                ColGroup::BaI => BlockKind::Identity(-1),
                ColGroup::BaJ => BlockKind::Identity(1),
                _ => BlockKind::Zero,
            },
            RowGroup::Bg => match col {
                ColGroup::BgI => BlockKind::Identity(-1),
                ColGroup::BgJ => BlockKind::Identity(1),
                _ => BlockKind::Zero,
            },
        }
    }

    pub fn dense_block(&self, k: usize) -> &Matrix3<f64> {
        match k {
            0..=5 => &self.position_rows[k],
            6..=8 => &self.rotation_rows[k - 6],
            9..=13 => &self.velocity_rows[k - 9],
            _ => panic!("dense block index {k} out of range"),
        }
    }

    /// Words held in storage: the dense blocks only.
    pub fn stored_words(&self) -> usize {
        IMU_DENSE_BLOCKS * 9
    }

    /// Full 15×30 raw Jacobian.
    pub fn densify(&self) -> Matrix15x30 {
        let mut j = Matrix15x30::zeros();
        for row in RowGroup::ALL {
            for col in ColGroup::ALL {
                let mut view = j.fixed_view_mut::<3, 3>(row.offset(), col.offset());
                match Self::block_kind(row, col) {
                    BlockKind::Dense(k) => view.copy_from(self.dense_block(k)),
                    BlockKind::Identity(s) => view.copy_from(&(Matrix3::identity() * s as f64)),
                    BlockKind::Zero => {}
                }
            }
        }
        j
    }
}

/// IMU residual and block-sparse Jacobian.
///
/// Stage one fills the three dense row groups (position, rotation,
/// velocity), which are mutually independent. Stage two forms the residual.
pub fn imu_jacobian(
    factor: &ImuFactor,
    si: &KeyframeState,
    sj: &KeyframeState,
    gravity: &Vector3<f64>,
) -> ImuJacobianSparse {
    let dt = factor.dt;
    let bj = &factor.bias_jacobians;
    let ri_t = si.q.to_rotation_matrix().into_inner().transpose();
    let a = sj.p - si.p - si.v * dt - 0.5 * gravity * dt * dt;
    let b = sj.v - si.v - gravity * dt;

    // Stage two is needed for the rotation error quaternion too.
    let (residual, e, sign) = imu_stage_two(factor, si, sj, gravity);
    let (_, dq, _, phi) = corrected_deltas(factor, si);

    let position_rows = [
        -ri_t,
        skew(&(ri_t * a)),
        -ri_t * dt,
        -bj.dp_dba,
        -bj.dp_dbg,
        ri_t,
    ];

    let c = si.q.inverse().into_inner() * sj.q.into_inner();
    let d_theta_i = -vec_block(&(q_left(&dq.inverse().into_inner()) * q_right(&c)));
    let d_bg_i = -vec_block(&q_right(&e)) * right_jacobian(&phi) * bj.dq_dbg;
    let d_theta_j = vec_block(&q_left(&e));
    let rotation_rows = [d_theta_i * sign, d_bg_i * sign, d_theta_j * sign];

    let velocity_rows = [skew(&(ri_t * b)), -ri_t, -bj.dv_dba, -bj.dv_dbg, ri_t];

    ImuJacobianSparse {
        position_rows,
        rotation_rows,
        velocity_rows,
        residual,
    }
}

/// Whitened linearization of one IMU factor.
#[derive(Debug, Clone, PartialEq)]
pub struct ImuLinearization {
    pub kf_i: usize,
    pub kf_j: usize,
    pub sparse: ImuJacobianSparse,
    pub jacobian: Matrix15x30,
    pub residual: Vector15,
}

/// Whitened linearization of the prior.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorLinearization {
    /// Keyframe indices in prior order.
    pub keyframes: Vec<usize>,
    pub jacobian: DMatrix<f64>,
    pub residual: DVector<f64>,
}

/// Every factor of a window evaluated at its current states.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    pub visual: VisualJacobianBlocks,
    pub imu: Vec<ImuLinearization>,
    pub prior: Option<PriorLinearization>,
}

pub fn linearize_imu(window: &WindowProblem) -> Vec<ImuLinearization> {
    window
        .imu_factors
        .iter()
        .map(|f| {
            let i = window.kf_index(f.kf_i).expect("imu factor outside window");
            let j = window.kf_index(f.kf_j).expect("imu factor outside window");
            let sparse = imu_jacobian(f, &window.keyframes[i], &window.keyframes[j], &window.gravity);
            ImuLinearization {
                kf_i: i,
                kf_j: j,
                jacobian: f.sqrt_info * sparse.densify(),
                residual: f.sqrt_info * sparse.residual,
                sparse,
            }
        })
        .collect()
}

pub fn linearize_prior(window: &WindowProblem) -> Option<PriorLinearization> {
    let prior = window.prior.as_ref()?;
    let keyframes: Vec<usize> = prior
        .state_ids
        .iter()
        .map(|id| window.kf_index(*id).expect("prior state outside window"))
        .collect();
    let states: Vec<&KeyframeState> = keyframes.iter().map(|k| &window.keyframes[*k]).collect();
    let (residual, jacobian) = prior.linearize(&states);
    Some(PriorLinearization {
        keyframes,
        jacobian,
        residual,
    })
}

pub fn linearize(window: &WindowProblem) -> Linearization {
    Linearization {
        visual: visual_jacobians(window),
        imu: linearize_imu(window),
        prior: linearize_prior(window),
    }
}
