//! Prior generation by eliminating the oldest keyframe, and compressed
//! storage of the reduced system matrix.
//!
//! The variables touched by the departing keyframe are ordered
//! `[drop features | drop state | retained states]`, giving
//!
//! ```text
//! [ M   Zᵀ ]      M = [ M₁₁  M₁₂ ]   M₁₁ diagonal (one inverse depth each)
//! [ Z   A  ]          [ M₂₁  M₂₂ ]   M₂₂ the 15×15 departing state
//! ```
//!
//! and the prior `A − Z·M⁻¹·Zᵀ` is produced in two stages with the same
//! kernels as the solver: the diagonal feature block goes through
//! [`schur_eliminate`], the 15×15 state block through [`cholesky`] and
//! triangular solves.

use nalgebra::{DMatrix, DVector};

use crate::factors::{linearize, Linearization};
use crate::linsolve::{
    assemble_tagged, cholesky, schur_eliminate, CholeskyFactor, LinsolveError, SchurBlocks,
    SchurCounts,
};
use crate::model::{KeyframeState, PriorError, PriorFactor, WindowProblem, STATE_DIM};

/// Tolerance of the eigenvalue floor, relative to the trace.
pub const CONDITIONING_TOL: f64 = 1e-9;
/// Entries below this (relative to the part's largest entry) count as zero
/// when checking a sparsity pattern.
pub const PATTERN_TOL: f64 = 1e-12;

/// Pose sub-block size (position and rotation).
pub const POSE_DIM: usize = 6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MarginalizeError {
    #[error("keyframe {0} is not in the window")]
    NotInWindow(usize),
    #[error("keyframe {departing} is not the oldest keyframe ({oldest})")]
    NotOldest { departing: usize, oldest: usize },
    #[error(transparent)]
    Linsolve(#[from] LinsolveError),
    #[error("prior conditioning: eigenvalue {min_eigenvalue:e} below -{tol:e}·trace")]
    Conditioning { min_eigenvalue: f64, tol: f64 },
    #[error(transparent)]
    Prior(#[from] PriorError),
}

/// The marginalization system in partitioned form. `Z` is stored once.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalizationPartition {
    pub drop_features: Vec<usize>,
    pub drop_state: usize,
    /// Retained keyframes at the linearization point, in window order.
    pub retained: Vec<KeyframeState>,
    /// Diagonal of `M₁₁`.
    pub m11: DVector<f64>,
    /// `M₂₁`, 15 × n_features. `M₁₂ = M₂₁ᵀ` is implicit.
    pub m21: DMatrix<f64>,
    pub m22: DMatrix<f64>,
    /// Retained × features part of `Z`.
    pub z1: DMatrix<f64>,
    /// Retained × departing-state part of `Z`.
    pub z2: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b_m1: DVector<f64>,
    pub b_m2: DVector<f64>,
    pub b_a: DVector<f64>,
}

impl MarginalizationPartition {
    pub fn n_drop(&self) -> usize {
        self.m11.len() + STATE_DIM
    }

    pub fn n_retained(&self) -> usize {
        self.a.nrows()
    }

    /// Dense `M` in `[features | state]` order.
    pub fn m_dense(&self) -> DMatrix<f64> {
        let nf = self.m11.len();
        let mut m = DMatrix::zeros(nf + STATE_DIM, nf + STATE_DIM);
        for k in 0..nf {
            m[(k, k)] = self.m11[k];
        }
        m.view_mut((nf, 0), (STATE_DIM, nf)).copy_from(&self.m21);
        m.view_mut((0, nf), (nf, STATE_DIM)).copy_from(&self.m21.transpose());
        m.view_mut((nf, nf), (STATE_DIM, STATE_DIM)).copy_from(&self.m22);
        m
    }

    /// Dense `Z` in `[features | state]` column order.
    pub fn z_dense(&self) -> DMatrix<f64> {
        let nf = self.m11.len();
        let mut z = DMatrix::zeros(self.n_retained(), nf + STATE_DIM);
        z.view_mut((0, 0), (self.n_retained(), nf)).copy_from(&self.z1);
        z.view_mut((0, nf), (self.n_retained(), STATE_DIM)).copy_from(&self.z2);
        z
    }

    /// Joint matrix and vector in partition order.
    pub fn joint(&self) -> (DMatrix<f64>, DVector<f64>) {
        let nd = self.n_drop();
        let nr = self.n_retained();
        let mut h = DMatrix::zeros(nd + nr, nd + nr);
        h.view_mut((0, 0), (nd, nd)).copy_from(&self.m_dense());
        let z = self.z_dense();
        h.view_mut((nd, 0), (nr, nd)).copy_from(&z);
        h.view_mut((0, nd), (nd, nr)).copy_from(&z.transpose());
        h.view_mut((nd, nd), (nr, nr)).copy_from(&self.a);
        let mut b = DVector::zeros(nd + nr);
        let nf = self.m11.len();
        b.rows_mut(0, nf).copy_from(&self.b_m1);
        b.rows_mut(nf, STATE_DIM).copy_from(&self.b_m2);
        b.rows_mut(nd, nr).copy_from(&self.b_a);
        (h, b)
    }
}

/// The sub-window of factors touching the departing keyframe: the prior,
/// the IMU factor leaving it, and every observation of features anchored
/// there. Observations of other features by the departing keyframe are
/// discarded.
pub fn departing_factors(
    window: &WindowProblem,
    departing_kf: usize,
) -> Result<WindowProblem, MarginalizeError> {
    if window.kf_index(departing_kf).is_none() {
        return Err(MarginalizeError::NotInWindow(departing_kf));
    }
    let oldest = window.keyframes[0].id;
    if departing_kf != oldest {
        return Err(MarginalizeError::NotOldest {
            departing: departing_kf,
            oldest,
        });
    }
    let features: Vec<_> = window
        .features
        .iter()
        .filter(|f| f.anchor_kf == departing_kf)
        .cloned()
        .collect();
    let observations = window
        .observations
        .iter()
        .filter(|o| features.iter().any(|f| f.id == o.feature_id))
        .cloned()
        .collect();
    let imu_factors = window
        .imu_factors
        .iter()
        .filter(|f| f.kf_i == departing_kf || f.kf_j == departing_kf)
        .cloned()
        .collect();
    Ok(WindowProblem {
        keyframes: window.keyframes.clone(),
        features,
        observations,
        imu_factors,
        prior: window.prior.clone(),
        gravity: window.gravity,
    })
}

/// Builds the partitioned marginalization system at the window's current
/// states.
pub fn build_partition(
    window: &WindowProblem,
    departing_kf: usize,
) -> Result<MarginalizationPartition, MarginalizeError> {
    let sub = departing_factors(window, departing_kf)?;
    let lin = linearize(&sub);
    Ok(partition_from(&sub, &lin))
}

fn partition_from(sub: &WindowProblem, lin: &Linearization) -> MarginalizationPartition {
    let blocks = assemble_tagged(sub, lin).blocks;
    let ns = sub.state_dim();
    let nr = ns - STATE_DIM;
    let nf = blocks.n_f();
    MarginalizationPartition {
        drop_features: sub.features.iter().map(|f| f.id).collect(),
        drop_state: sub.keyframes[0].id,
        retained: sub.keyframes[1..].to_vec(),
        m11: blocks.u.clone(),
        m21: blocks.w.view((0, 0), (STATE_DIM, nf)).into_owned(),
        m22: blocks.v.view((0, 0), (STATE_DIM, STATE_DIM)).into_owned(),
        z1: blocks.w.view((STATE_DIM, 0), (nr, nf)).into_owned(),
        z2: blocks.v.view((STATE_DIM, 0), (nr, STATE_DIM)).into_owned(),
        a: blocks.v.view((STATE_DIM, STATE_DIM), (nr, nr)).into_owned(),
        b_m1: blocks.b_f.clone(),
        b_m2: blocks.b_s.rows(0, STATE_DIM).into_owned(),
        b_a: blocks.b_s.rows(STATE_DIM, nr).into_owned(),
    }
}

/// Prior plus the kernel counters of both stages.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginalized {
    pub prior: PriorFactor,
    pub feature_stage: SchurCounts,
    pub state_stage: CholeskyFactor,
    /// Number of eigenvalues raised to zero by the floor.
    pub clamped_eigenvalues: usize,
}

/// Computes `H = A − Z·M⁻¹·Zᵀ` and `b = b_A − Z·M⁻¹·b_M`.
pub fn marginalize(partition: &MarginalizationPartition) -> Result<Marginalized, MarginalizeError> {
    let nf = partition.m11.len();
    let nr = partition.n_retained();
    let n1 = STATE_DIM + nr;

    // Stage 1: diagonal feature block through the solver's Schur kernel.
    let mut w = DMatrix::zeros(n1, nf);
    w.view_mut((0, 0), (STATE_DIM, nf)).copy_from(&partition.m21);
    w.view_mut((STATE_DIM, 0), (nr, nf)).copy_from(&partition.z1);
    let mut v = DMatrix::zeros(n1, n1);
    v.view_mut((0, 0), (STATE_DIM, STATE_DIM)).copy_from(&partition.m22);
    v.view_mut((STATE_DIM, 0), (nr, STATE_DIM)).copy_from(&partition.z2);
    v.view_mut((0, STATE_DIM), (STATE_DIM, nr))
        .copy_from(&partition.z2.transpose());
    v.view_mut((STATE_DIM, STATE_DIM), (nr, nr)).copy_from(&partition.a);
    let mut b_s = DVector::zeros(n1);
    b_s.rows_mut(0, STATE_DIM).copy_from(&partition.b_m2);
    b_s.rows_mut(STATE_DIM, nr).copy_from(&partition.b_a);
    let stage1 = schur_eliminate(&SchurBlocks {
        u: partition.m11.clone(),
        w,
        v,
        b_f: partition.b_m1.clone(),
        b_s,
    })?;

    // Stage 2: the departing state through the solver's Cholesky kernel.
    let m22 = stage1.s.view((0, 0), (STATE_DIM, STATE_DIM)).into_owned();
    let z2 = stage1.s.view((STATE_DIM, 0), (nr, STATE_DIM)).into_owned();
    let a = stage1.s.view((STATE_DIM, STATE_DIM), (nr, nr)).into_owned();
    let factor = cholesky(&m22)?;
    let mut y = DMatrix::zeros(STATE_DIM, nr);
    for c in 0..nr {
        let col = factor.forward(&z2.row(c).transpose());
        y.set_column(c, &col);
    }
    let yb = factor.forward(&stage1.b.rows(0, STATE_DIM).into_owned());
    let mut h = a - y.transpose() * &y;
    let b = stage1.b.rows(STATE_DIM, nr).into_owned() - y.transpose() * yb;

    h = (&h + h.transpose()) * 0.5;
    let (h, clamped) = floor_eigenvalues(h)?;
    let prior = PriorFactor::new(partition.retained.clone(), h, b)?;
    Ok(Marginalized {
        prior,
        feature_stage: stage1.counts,
        state_stage: factor,
        clamped_eigenvalues: clamped,
    })
}

/// Raises small negative eigenvalues to zero. Matrices that are already
/// positive semidefinite are returned untouched.
pub fn floor_eigenvalues(h: DMatrix<f64>) -> Result<(DMatrix<f64>, usize), MarginalizeError> {
    if h.nrows() == 0 {
        return Ok((h, 0));
    }
    let trace = h.trace().abs();
    let eig = h.clone().symmetric_eigen();
    let min = eig.eigenvalues.min();
    if min >= 0.0 {
        return Ok((h, 0));
    }
    if min < -CONDITIONING_TOL * trace {
        return Err(MarginalizeError::Conditioning {
            min_eigenvalue: min,
            tol: CONDITIONING_TOL,
        });
    }
    let clamped = eig.eigenvalues.iter().filter(|l| **l < 0.0).count();
    let mut vals = eig.eigenvalues.clone();
    vals.iter_mut().for_each(|l| *l = l.max(0.0));
    let v = &eig.eigenvectors;
    let out = v * DMatrix::from_diagonal(&vals) * v.transpose();
    Ok(((&out + out.transpose()) * 0.5, clamped))
}

/// Drops the departing keyframe, its features and IMU factor, and attaches
/// `prior` in place of the old one.
pub fn reduced_window(window: &WindowProblem, departing_kf: usize, prior: PriorFactor) -> WindowProblem {
    let features: Vec<_> = window
        .features
        .iter()
        .filter(|f| f.anchor_kf != departing_kf)
        .cloned()
        .collect();
    WindowProblem {
        keyframes: window
            .keyframes
            .iter()
            .filter(|k| k.id != departing_kf)
            .cloned()
            .collect(),
        observations: window
            .observations
            .iter()
            .filter(|o| o.kf_id != departing_kf && features.iter().any(|f| f.id == o.feature_id))
            .cloned()
            .collect(),
        features,
        imu_factors: window
            .imu_factors
            .iter()
            .filter(|f| f.kf_i != departing_kf && f.kf_j != departing_kf)
            .cloned()
            .collect(),
        prior: Some(prior),
        gravity: window.gravity,
    }
}

/// Marginalizes the oldest keyframe of a solved window.
pub fn marginalize_oldest(window: &WindowProblem) -> Result<(WindowProblem, Marginalized), MarginalizeError> {
    let departing = window.keyframes[0].id;
    let partition = build_partition(window, departing)?;
    let result = marginalize(&partition)?;
    Ok((reduced_window(window, departing, result.prior.clone()), result))
}

// ---------------------------------------------------------------------------
// Structured storage of S.

/// The reduced system matrix over keyframe states, split by the factor
/// class that produced each term.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedS {
    pub imu: DMatrix<f64>,
    /// Camera terms after eliminating the features.
    pub camera: DMatrix<f64>,
    pub prior: DMatrix<f64>,
}

impl TaggedS {
    pub fn total(&self) -> DMatrix<f64> {
        &self.imu + &self.camera + &self.prior
    }
}

/// Reduced system matrix (undamped) with its contributions kept apart.
pub fn tagged_schur(window: &WindowProblem, lin: &Linearization) -> Result<TaggedS, LinsolveError> {
    let tagged = assemble_tagged(window, lin);
    let camera = schur_eliminate(&SchurBlocks {
        v: tagged.v_camera.clone(),
        ..tagged.blocks.clone()
    })?
    .s;
    Ok(TaggedS {
        imu: tagged.v_imu,
        camera,
        prior: tagged.v_prior,
    })
}

/// Dimensions the structure is declared over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StructureMeta {
    pub n_keyframes: usize,
    pub co_obs_span: usize,
}

/// A contribution fell outside its declared structure.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{part} contribution outside its pattern at ({row}, {col}): {value:e}")]
pub struct PatternViolation {
    pub part: &'static str,
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// Words stored per section.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SectionWords {
    pub imu_diagonal: usize,
    pub imu_subdiagonal: usize,
    pub camera_diagonal: usize,
    pub camera_pairs: usize,
    pub prior: usize,
}

impl SectionWords {
    pub fn total(&self) -> usize {
        self.imu_diagonal + self.imu_subdiagonal + self.camera_diagonal + self.camera_pairs + self.prior
    }

    /// Words of the IMU and camera sections.
    pub fn structure(&self) -> usize {
        self.total() - self.prior
    }
}

/// Compressed symmetric storage of S.
///
/// IMU terms live in lower-packed 15×15 diagonal blocks and dense 15×15
/// sub-diagonal blocks. Camera terms live in lower-packed 6×6 pose diagonal
/// blocks and dense 6×6 pose blocks for each co-observing keyframe pair
/// `(j, k)`, `j < k`, stored as the `(k, j)` block. Prior terms are kept
/// lower-packed over the contiguous keyframe range they touch. Upper
/// halves are never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredS {
    pub meta: StructureMeta,
    pub imu_diagonal: Vec<Vec<f64>>,
    pub imu_subdiagonal: Vec<Vec<f64>>,
    pub camera_diagonal: Vec<Vec<f64>>,
    pub pair_list: Vec<(usize, usize)>,
    pub camera_pairs: Vec<Vec<f64>>,
    /// First keyframe index and count of the prior's support.
    pub prior_range: Option<(usize, usize)>,
    pub prior_packed: Vec<f64>,
}

fn packed_len(n: usize) -> usize {
    n * (n + 1) / 2
}

fn pack_lower(m: &DMatrix<f64>, r0: usize, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(packed_len(n));
    for r in 0..n {
        for c in 0..=r {
            out.push(m[(r0 + r, r0 + c)]);
        }
    }
    out
}

fn unpack_lower(out: &mut DMatrix<f64>, r0: usize, n: usize, words: &[f64]) {
    let mut k = 0;
    for r in 0..n {
        for c in 0..=r {
            out[(r0 + r, r0 + c)] += words[k];
            if r != c {
                out[(r0 + c, r0 + r)] += words[k];
            }
            k += 1;
        }
    }
}

fn pack_dense(m: &DMatrix<f64>, r0: usize, c0: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push(m[(r0 + r, c0 + c)]);
        }
    }
    out
}

fn unpack_dense(out: &mut DMatrix<f64>, r0: usize, c0: usize, rows: usize, cols: usize, words: &[f64]) {
    for r in 0..rows {
        for c in 0..cols {
            let w = words[r * cols + c];
            out[(r0 + r, c0 + c)] += w;
            out[(c0 + c, r0 + r)] += w;
        }
    }
}

fn check_pattern(
    part: &'static str,
    m: &DMatrix<f64>,
    allowed: impl Fn(usize, usize) -> bool,
) -> Result<(), PatternViolation> {
    let tol = PATTERN_TOL * m.amax().max(1.0);
    for c in 0..m.ncols() {
        for r in c..m.nrows() {
            let value = m[(r, c)];
            if value.abs() > tol && !allowed(r, c) {
                return Err(PatternViolation { part, row: r, col: c, value });
            }
        }
    }
    Ok(())
}

/// Compresses a tagged S. Fails if a contribution leaves its pattern.
pub fn compress(s: &TaggedS, meta: StructureMeta) -> Result<StructuredS, PatternViolation> {
    let n = meta.n_keyframes;
    let d = STATE_DIM;
    let kf = |i: usize| i / d;
    let in_pose = |i: usize| i % d < POSE_DIM;

    check_pattern("imu", &s.imu, |r, c| kf(r) - kf(c) <= 1)?;
    check_pattern("camera", &s.camera, |r, c| {
        in_pose(r) && in_pose(c) && kf(r) - kf(c) <= meta.co_obs_span
    })?;

    let imu_diagonal = (0..n).map(|k| pack_lower(&s.imu, k * d, d)).collect();
    let imu_subdiagonal = (0..n.saturating_sub(1))
        .map(|k| pack_dense(&s.imu, (k + 1) * d, k * d, d, d))
        .collect();
    let camera_diagonal = (0..n).map(|k| pack_lower(&s.camera, k * d, POSE_DIM)).collect();

    let tol = PATTERN_TOL * s.camera.amax().max(1.0);
    let mut pair_list = Vec::new();
    let mut camera_pairs = Vec::new();
    for j in 0..n {
        for k in j + 1..n.min(j + meta.co_obs_span + 1) {
            let block = s.camera.view((k * d, j * d), (POSE_DIM, POSE_DIM));
            if block.amax() > tol {
                pair_list.push((j, k));
                camera_pairs.push(pack_dense(&s.camera, k * d, j * d, POSE_DIM, POSE_DIM));
            }
        }
    }

    let ptol = PATTERN_TOL * s.prior.amax().max(1.0);
    let touched: Vec<usize> = (0..n)
        .filter(|&k| s.prior.rows(k * d, d).amax() > ptol)
        .collect();
    let (prior_range, prior_packed) = match (touched.first(), touched.last()) {
        (Some(&lo), Some(&hi)) => {
            let count = hi - lo + 1;
            (Some((lo, count)), pack_lower(&s.prior, lo * d, count * d))
        }
        _ => (None, Vec::new()),
    };

    Ok(StructuredS {
        meta,
        imu_diagonal,
        imu_subdiagonal,
        camera_diagonal,
        pair_list,
        camera_pairs,
        prior_range,
        prior_packed,
    })
}

impl StructuredS {
    pub fn words(&self) -> SectionWords {
        SectionWords {
            imu_diagonal: self.imu_diagonal.iter().map(Vec::len).sum(),
            imu_subdiagonal: self.imu_subdiagonal.iter().map(Vec::len).sum(),
            camera_diagonal: self.camera_diagonal.iter().map(Vec::len).sum(),
            camera_pairs: self.camera_pairs.iter().map(Vec::len).sum(),
            prior: self.prior_packed.len(),
        }
    }

    /// Each contribution reconstructed on its own.
    pub fn decompress_parts(&self) -> TaggedS {
        let n = self.meta.n_keyframes * STATE_DIM;
        let d = STATE_DIM;
        let mut imu = DMatrix::zeros(n, n);
        for (k, words) in self.imu_diagonal.iter().enumerate() {
            unpack_lower(&mut imu, k * d, d, words);
        }
        for (k, words) in self.imu_subdiagonal.iter().enumerate() {
            unpack_dense(&mut imu, (k + 1) * d, k * d, d, d, words);
        }
        let mut camera = DMatrix::zeros(n, n);
        for (k, words) in self.camera_diagonal.iter().enumerate() {
            unpack_lower(&mut camera, k * d, POSE_DIM, words);
        }
        for ((j, k), words) in self.pair_list.iter().zip(&self.camera_pairs) {
            unpack_dense(&mut camera, k * d, j * d, POSE_DIM, POSE_DIM, words);
        }
        let mut prior = DMatrix::zeros(n, n);
        if let Some((lo, count)) = self.prior_range {
            unpack_lower(&mut prior, lo * d, count * d, &self.prior_packed);
        }
        TaggedS { imu, camera, prior }
    }

    pub fn decompress(&self) -> DMatrix<f64> {
        self.decompress_parts().total()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nls::{lm_solve, LmConfig};
    use crate::scenegen::{generate, SceneConfig};

    fn solved_window(seed: u64) -> WindowProblem {
        let scene = generate(&SceneConfig {
            n_keyframes: 6,
            n_features: 40,
            seed,
            ..Default::default()
        })
        .unwrap();
        lm_solve(&scene.windows[0], &LmConfig::default()).unwrap().0
    }

    #[test]
    fn rejects_missing_or_non_oldest_keyframe() {
        let w = solved_window(1);
        assert!(matches!(build_partition(&w, 99), Err(MarginalizeError::NotInWindow(99))));
        assert!(matches!(
            build_partition(&w, w.keyframes[2].id),
            Err(MarginalizeError::NotOldest { .. })
        ));
    }

    #[test]
    fn no_anchored_features_leaves_state_block_only() {
        let mut w = solved_window(2);
        let oldest = w.keyframes[0].id;
        let gone: Vec<usize> = w.features.iter().filter(|f| f.anchor_kf == oldest).map(|f| f.id).collect();
        w.features.retain(|f| f.anchor_kf != oldest);
        w.observations.retain(|o| !gone.contains(&o.feature_id));
        let p = build_partition(&w, oldest).unwrap();
        assert_eq!(p.m11.len(), 0);
        assert_eq!(p.m_dense().shape(), (15, 15));
    }

    #[test]
    fn uncoupled_partition_returns_a() {
        let w = solved_window(3);
        let mut p = build_partition(&w, w.keyframes[0].id).unwrap();
        p.z1.fill(0.0);
        p.z2.fill(0.0);
        p.b_m1.fill(0.0);
        p.b_m2.fill(0.0);
        let m = marginalize(&p).unwrap();
        assert_eq!(m.prior.h, p.a);
        assert_eq!(m.prior.b, p.b_a);
    }

    #[test]
    fn single_keyframe_structure_words() {
        let mut s = DMatrix::zeros(15, 15);
        for k in 0..15 {
            s[(k, k)] = 1.0;
        }
        let tagged = TaggedS {
            imu: s.clone(),
            camera: s.clone() * 0.0,
            prior: s * 0.0,
        };
        let st = compress(&tagged, StructureMeta { n_keyframes: 1, co_obs_span: 4 }).unwrap();
        assert_eq!(st.words().structure(), 120 + 21);
    }

    #[test]
    fn camera_term_in_velocity_row_is_a_violation() {
        let n = 2 * STATE_DIM;
        let mut camera = DMatrix::zeros(n, n);
        camera[(7, 2)] = 1.0;
        let tagged = TaggedS {
            imu: DMatrix::zeros(n, n),
            camera,
            prior: DMatrix::zeros(n, n),
        };
        let err = compress(&tagged, StructureMeta { n_keyframes: 2, co_obs_span: 1 }).unwrap_err();
        assert_eq!((err.part, err.row, err.col), ("camera", 7, 2));
    }

    #[test]
    fn imu_fill_beyond_subdiagonal_is_a_violation() {
        let n = 3 * STATE_DIM;
        let mut imu = DMatrix::zeros(n, n);
        imu[(31, 1)] = 2.0;
        imu[(1, 31)] = 2.0;
        let tagged = TaggedS {
            imu,
            camera: DMatrix::zeros(n, n),
            prior: DMatrix::zeros(n, n),
        };
        assert!(compress(&tagged, StructureMeta { n_keyframes: 3, co_obs_span: 2 }).is_err());
    }
}
