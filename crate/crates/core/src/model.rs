//! Domain types for one sliding-window estimation problem.
//!
//! The error state of a keyframe is 15-dimensional and always laid out as
//! `[δp, δθ, δv, δba, δbg]`. Features carry a single inverse depth along the
//! ray of the keyframe that first observed them.

use std::fmt;

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, UnitQuaternion, Vector2, Vector3};

use crate::geometry::{twice_vec, vec_block, q_left};

/// Dimension of one keyframe error state.
pub const STATE_DIM: usize = 15;
/// Offset of `δp` inside a keyframe block.
pub const OFF_P: usize = 0;
/// Offset of `δθ` inside a keyframe block.
pub const OFF_THETA: usize = 3;
/// Offset of `δv` inside a keyframe block.
pub const OFF_V: usize = 6;
/// Offset of `δba` inside a keyframe block.
pub const OFF_BA: usize = 9;
/// Offset of `δbg` inside a keyframe block.
pub const OFF_BG: usize = 12;

/// Default lower bound on feature inverse depth, 1/m.
pub const DEFAULT_MIN_INV_DEPTH: f64 = 1e-4;
/// Tolerance on quaternion norms.
pub const QUAT_NORM_TOL: f64 = 1e-9;

pub type Matrix15 = SMatrix<f64, 15, 15>;
pub type Vector15 = SMatrix<f64, 15, 1>;

#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeState {
    pub id: usize,
    pub p: Vector3<f64>,
    /// World-from-body rotation.
    pub q: UnitQuaternion<f64>,
    pub v: Vector3<f64>,
    pub ba: Vector3<f64>,
    pub bg: Vector3<f64>,
}

impl KeyframeState {
    pub fn at_rest(id: usize) -> Self {
        Self {
            id,
            p: Vector3::zeros(),
            q: UnitQuaternion::identity(),
            v: Vector3::zeros(),
            ba: Vector3::zeros(),
            bg: Vector3::zeros(),
        }
    }

    /// Applies a 15-dimensional error-state increment.
    pub fn retract(&self, dx: &[f64]) -> Self {
        debug_assert_eq!(dx.len(), STATE_DIM);
        let v3 = |o: usize| Vector3::new(dx[o], dx[o + 1], dx[o + 2]);
        Self {
            id: self.id,
            p: self.p + v3(OFF_P),
            q: crate::geometry::retract_q(&self.q, &v3(OFF_THETA)),
            v: self.v + v3(OFF_V),
            ba: self.ba + v3(OFF_BA),
            bg: self.bg + v3(OFF_BG),
        }
    }

    /// Local difference `self ⊖ origin`, inverse of [`KeyframeState::retract`]
    /// to first order. The rotation part is `2·vec(origin⁻¹ ⊗ self)`.
    pub fn local_minus(&self, origin: &KeyframeState) -> Vector15 {
        let mut d = Vector15::zeros();
        d.fixed_rows_mut::<3>(OFF_P).copy_from(&(self.p - origin.p));
        let dq = origin.q.inverse().into_inner() * self.q.into_inner();
        d.fixed_rows_mut::<3>(OFF_THETA).copy_from(&twice_vec(&dq));
        d.fixed_rows_mut::<3>(OFF_V).copy_from(&(self.v - origin.v));
        d.fixed_rows_mut::<3>(OFF_BA).copy_from(&(self.ba - origin.ba));
        d.fixed_rows_mut::<3>(OFF_BG).copy_from(&(self.bg - origin.bg));
        d
    }

    /// Derivative of [`KeyframeState::local_minus`] with respect to a right
    /// perturbation of `self`. Identity except for the rotation block.
    pub fn local_minus_jacobian(&self, origin: &KeyframeState) -> Matrix15 {
        let mut j = Matrix15::identity();
        let dq = crate::geometry::canonical(
            &(origin.q.inverse().into_inner() * self.q.into_inner()),
        );
        j.fixed_view_mut::<3, 3>(OFF_THETA, OFF_THETA)
            .copy_from(&vec_block(&q_left(&dq)));
        j
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    pub id: usize,
    pub anchor_kf: usize,
    /// Normalized image coordinates in the anchor keyframe.
    pub anchor_uv: Vector2<f64>,
    pub inv_depth: f64,
}

impl Feature {
    /// Point in the anchor camera frame.
    pub fn anchor_point(&self) -> Vector3<f64> {
        Vector3::new(self.anchor_uv.x, self.anchor_uv.y, 1.0) / self.inv_depth
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualObservation {
    pub feature_id: usize,
    pub kf_id: usize,
    pub uv: Vector2<f64>,
    /// Noise standard deviation on the normalized image plane.
    pub sigma: f64,
}

/// First-order sensitivities of the preintegrated deltas to the biases.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasJacobians {
    pub dp_dba: Matrix3<f64>,
    pub dp_dbg: Matrix3<f64>,
    pub dq_dbg: Matrix3<f64>,
    pub dv_dba: Matrix3<f64>,
    pub dv_dbg: Matrix3<f64>,
}

impl BiasJacobians {
    pub fn zeros() -> Self {
        Self {
            dp_dba: Matrix3::zeros(),
            dp_dbg: Matrix3::zeros(),
            dq_dbg: Matrix3::zeros(),
            dv_dba: Matrix3::zeros(),
            dv_dbg: Matrix3::zeros(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImuFactor {
    pub kf_i: usize,
    pub kf_j: usize,
    pub dt: f64,
    pub dp_hat: Vector3<f64>,
    pub dv_hat: Vector3<f64>,
    pub dq_hat: UnitQuaternion<f64>,
    pub bias_jacobians: BiasJacobians,
    /// Upper-triangular square root of the information matrix.
    pub sqrt_info: Matrix15,
    pub lin_ba: Vector3<f64>,
    pub lin_bg: Vector3<f64>,
}

/// Errors raised while building a [`PriorFactor`].
#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum PriorError {
    #[error("prior dimension mismatch: {states} states need {expected} rows, got H {rows}x{cols} and b {b_len}")]
    Dimension {
        states: usize,
        expected: usize,
        rows: usize,
        cols: usize,
        b_len: usize,
    },
    #[error("prior covers {ids} state ids but {lin} linearization states")]
    Linearization { ids: usize, lin: usize },
}

/// Gaussian prior on a set of keyframe states in normal-equation form.
///
/// The quadratic `½·δxᵀHδx − bᵀδx` (plus a constant) is evaluated as the
/// squared norm of `r = Λ^½Vᵀ·δx − Λ^-½Vᵀ·b` over the positive eigenpairs of
/// `H`, where `δx` is the local difference from the linearization states.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorFactor {
    pub state_ids: Vec<usize>,
    pub linearization: Vec<KeyframeState>,
    pub h: DMatrix<f64>,
    pub b: DVector<f64>,
    sqrt_h: DMatrix<f64>,
    offset: DVector<f64>,
}

impl PriorFactor {
    pub fn new(
        linearization: Vec<KeyframeState>,
        h: DMatrix<f64>,
        b: DVector<f64>,
    ) -> Result<Self, PriorError> {
        let n = linearization.len() * STATE_DIM;
        if h.nrows() != n || h.ncols() != n || b.len() != n {
            return Err(PriorError::Dimension {
                states: linearization.len(),
                expected: n,
                rows: h.nrows(),
                cols: h.ncols(),
                b_len: b.len(),
            });
        }
        let state_ids = linearization.iter().map(|s| s.id).collect();
        let sym = (&h + h.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        let max_ev = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
        let floor = (max_ev * 1e-14).max(f64::MIN_POSITIVE);
        let keep: Vec<usize> = (0..n).filter(|&k| eig.eigenvalues[k] > floor).collect();
        let mut sqrt_h = DMatrix::zeros(keep.len(), n);
        let mut offset = DVector::zeros(keep.len());
        for (row, &k) in keep.iter().enumerate() {
            let lambda = eig.eigenvalues[k];
            let vk = eig.eigenvectors.column(k);
            let s = lambda.sqrt();
            for c in 0..n {
                sqrt_h[(row, c)] = s * vk[c];
            }
            offset[row] = vk.dot(&b) / s;
        }
        Ok(Self {
            state_ids,
            linearization,
            h,
            b,
            sqrt_h,
            offset,
        })
    }

    pub fn dim(&self) -> usize {
        self.state_ids.len() * STATE_DIM
    }

    /// Stacked local difference of `states` from the linearization point.
    /// `states` must be in `state_ids` order.
    pub fn delta(&self, states: &[&KeyframeState]) -> DVector<f64> {
        let mut d = DVector::zeros(self.dim());
        for (k, (s, s0)) in states.iter().zip(&self.linearization).enumerate() {
            d.fixed_rows_mut::<15>(k * STATE_DIM)
                .copy_from(&s.local_minus(s0));
        }
        d
    }

    /// Whitened residual at `states`.
    pub fn residual(&self, states: &[&KeyframeState]) -> DVector<f64> {
        &self.sqrt_h * self.delta(states) - &self.offset
    }

    /// Residual and its Jacobian with respect to right perturbations of
    /// `states`.
    pub fn linearize(&self, states: &[&KeyframeState]) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.dim();
        let mut dd = DMatrix::zeros(n, n);
        for (k, (s, s0)) in states.iter().zip(&self.linearization).enumerate() {
            dd.fixed_view_mut::<15, 15>(k * STATE_DIM, k * STATE_DIM)
                .copy_from(&s.local_minus_jacobian(s0));
        }
        (self.residual(states), &self.sqrt_h * dd)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowProblem {
    /// Ordered by id.
    pub keyframes: Vec<KeyframeState>,
    /// Ordered by id.
    pub features: Vec<Feature>,
    pub observations: Vec<VisualObservation>,
    pub imu_factors: Vec<ImuFactor>,
    pub prior: Option<PriorFactor>,
    pub gravity: Vector3<f64>,
}

pub fn default_gravity() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, -9.81)
}

impl WindowProblem {
    pub fn kf_index(&self, id: usize) -> Option<usize> {
        self.keyframes.binary_search_by_key(&id, |k| k.id).ok()
    }

    pub fn feature_index(&self, id: usize) -> Option<usize> {
        self.features.binary_search_by_key(&id, |f| f.id).ok()
    }

    /// Keyframe error-state dimension, `15 × #keyframes`.
    pub fn state_dim(&self) -> usize {
        STATE_DIM * self.keyframes.len()
    }

    /// Feature dimension, one inverse depth per feature.
    pub fn feature_dim(&self) -> usize {
        self.features.len()
    }

    /// Observation indices grouped by feature index.
    pub fn observations_by_feature(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.features.len()];
        for (k, obs) in self.observations.iter().enumerate() {
            if let Some(f) = self.feature_index(obs.feature_id) {
                groups[f].push(k);
            }
        }
        groups
    }

    /// States covered by the prior, in prior order.
    pub fn prior_states(&self) -> Option<Vec<&KeyframeState>> {
        let prior = self.prior.as_ref()?;
        prior
            .state_ids
            .iter()
            .map(|id| self.kf_index(*id).map(|k| &self.keyframes[k]))
            .collect()
    }
}

/// One broken invariant, named by entity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub entity: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.entity, self.message)
    }
}

fn violation(entity: impl Into<String>, message: impl Into<String>) -> Violation {
    Violation {
        entity: entity.into(),
        message: message.into(),
    }
}

/// Checks every structural invariant of a window with the default
/// inverse-depth floor.
pub fn validate(window: &WindowProblem) -> Vec<Violation> {
    validate_with(window, DEFAULT_MIN_INV_DEPTH)
}

pub fn validate_with(window: &WindowProblem, min_inv_depth: f64) -> Vec<Violation> {
    let mut out = Vec::new();

    if window.keyframes.is_empty() {
        out.push(violation("window", "no keyframes"));
    }
    for pair in window.keyframes.windows(2) {
        if pair[1].id <= pair[0].id {
            out.push(violation(
                format!("keyframe {}", pair[1].id),
                "keyframes not strictly ordered by id",
            ));
        }
    }
    for kf in &window.keyframes {
        if (kf.q.into_inner().norm() - 1.0).abs() > QUAT_NORM_TOL {
            out.push(violation(format!("keyframe {}", kf.id), "quaternion not unit"));
        }
        let finite = kf.p.iter().chain(kf.v.iter()).chain(kf.ba.iter()).chain(kf.bg.iter());
        if finite.into_iter().any(|x| !x.is_finite()) {
            out.push(violation(format!("keyframe {}", kf.id), "non-finite state"));
        }
    }

    for pair in window.features.windows(2) {
        if pair[1].id <= pair[0].id {
            out.push(violation(
                format!("feature {}", pair[1].id),
                "features not strictly ordered by id",
            ));
        }
    }
    for f in &window.features {
        let name = format!("feature {}", f.id);
        if !(f.inv_depth >= min_inv_depth) {
            out.push(violation(&name, "inv_depth below λ_min"));
        }
        if window.kf_index(f.anchor_kf).is_none() {
            out.push(violation(&name, "anchor keyframe outside window"));
        }
    }

    let mut non_anchor = vec![0usize; window.features.len()];
    for (k, obs) in window.observations.iter().enumerate() {
        let name = format!("observation {k}");
        if window.kf_index(obs.kf_id).is_none() {
            out.push(violation(&name, "keyframe outside window"));
        }
        if !(obs.sigma > 0.0) {
            out.push(violation(&name, "sigma not positive"));
        }
        match window.feature_index(obs.feature_id) {
            None => out.push(violation(&name, "unknown feature")),
            Some(fi) => {
                if window.features[fi].anchor_kf == obs.kf_id {
                    out.push(violation(&name, "observation in anchor keyframe"));
                } else {
                    non_anchor[fi] += 1;
                }
            }
        }
    }
    for (f, count) in window.features.iter().zip(&non_anchor) {
        if *count == 0 {
            out.push(violation(format!("feature {}", f.id), "no non-anchor observation"));
        }
    }

    let mut covered = vec![0usize; window.keyframes.len().saturating_sub(1)];
    for (k, fac) in window.imu_factors.iter().enumerate() {
        let name = format!("imu_factor {k}");
        if fac.kf_j != fac.kf_i + 1 {
            out.push(violation(&name, "keyframes not adjacent"));
            continue;
        }
        match (window.kf_index(fac.kf_i), window.kf_index(fac.kf_j)) {
            (Some(i), Some(j)) if j == i + 1 => covered[i] += 1,
            _ => out.push(violation(&name, "keyframes outside window")),
        }
        if !(fac.dt > 0.0) {
            out.push(violation(&name, "dt not positive"));
        }
        if (fac.dq_hat.into_inner().norm() - 1.0).abs() > QUAT_NORM_TOL {
            out.push(violation(&name, "dq_hat not unit"));
        }
        let s = &fac.sqrt_info;
        let upper = (0..15).all(|r| (0..r).all(|c| s[(r, c)] == 0.0));
        let pos_diag = (0..15).all(|r| s[(r, r)] > 0.0);
        if !upper || !pos_diag {
            out.push(violation(&name, "sqrt_info not upper-triangular with positive diagonal"));
        }
    }
    for (i, count) in covered.iter().enumerate() {
        if *count != 1 {
            out.push(violation(
                format!("keyframe pair {}-{}", window.keyframes[i].id, window.keyframes[i + 1].id),
                format!("expected exactly one imu_factor, found {count}"),
            ));
        }
    }

    if let Some(prior) = &window.prior {
        if prior.state_ids.iter().any(|id| window.kf_index(*id).is_none()) {
            out.push(violation("prior", "state id outside window"));
        }
        let h = &prior.h;
        let asym = (h - h.transpose()).amax();
        if asym > 1e-12 * h.amax().max(1.0) {
            out.push(violation("prior", "H_prior not symmetric"));
        }
        let trace = h.trace();
        let min_ev = ((h + h.transpose()) * 0.5)
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if h.nrows() > 0 && min_ev < -1e-9 * trace.abs() {
            out.push(violation("prior", "H_prior not positive semidefinite"));
        }
    }
    out
}
