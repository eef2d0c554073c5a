//! Normal equations, Schur elimination of the feature block, and the
//! column-wise Cholesky factorization of the reduced system.
//!
//! The full system is partitioned as
//!
//! ```text
//! [ U  Wᵀ ] [Δx_f]   [b_f]
//! [ W  V  ] [Δx_s] = [b_s]
//! ```
//!
//! with `U` diagonal because every feature is a single inverse depth. The
//! off-diagonal block `X` of the upper row equals `Wᵀ` and is never stored.

use nalgebra::{DMatrix, DVector};

use crate::factors::Linearization;
use crate::model::{WindowProblem, STATE_DIM};

/// Default pivot floor of the factorization.
pub const DEFAULT_PIVOT_FLOOR: f64 = 1e-12;
/// Floor applied to a state diagonal entry before Marquardt scaling, so that
/// columns with no information still get some damping.
pub const STATE_DAMPING_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LinsolveError {
    #[error("singular assembly: feature index {feature} has U = {value:e}")]
    SingularAssembly { feature: usize, value: f64 },
    #[error("matrix not positive definite at column {column} (pivot {pivot:e})")]
    NotPositiveDefinite { column: usize, pivot: f64 },
}

/// Partitioned normal equations.
#[derive(Debug, Clone, PartialEq)]
pub struct SchurBlocks {
    /// Diagonal of the feature block.
    pub u: DVector<f64>,
    /// State-by-feature coupling, `n_s × n_f`.
    pub w: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub b_f: DVector<f64>,
    pub b_s: DVector<f64>,
}

impl SchurBlocks {
    pub fn zeros(n_s: usize, n_f: usize) -> Self {
        Self {
            u: DVector::zeros(n_f),
            w: DMatrix::zeros(n_s, n_f),
            v: DMatrix::zeros(n_s, n_s),
            b_f: DVector::zeros(n_f),
            b_s: DVector::zeros(n_s),
        }
    }

    pub fn n_s(&self) -> usize {
        self.v.nrows()
    }

    pub fn n_f(&self) -> usize {
        self.u.len()
    }

    /// Marquardt damping: scales every diagonal entry by `1 + μ`.
    pub fn damped(&self, mu: f64) -> Self {
        let mut out = self.clone();
        out.u.iter_mut().for_each(|u| *u *= 1.0 + mu);
        for k in 0..out.n_s() {
            let d = out.v[(k, k)];
            out.v[(k, k)] = d + mu * d.max(STATE_DAMPING_FLOOR);
        }
        out
    }

    /// Checks that every feature diagonal is positive.
    pub fn check_features(&self) -> Result<(), LinsolveError> {
        match self.u.iter().position(|u| !(*u > 0.0)) {
            Some(feature) => Err(LinsolveError::SingularAssembly {
                feature,
                value: self.u[feature],
            }),
            None => Ok(()),
        }
    }

    /// Densifies the implicit full system, features first.
    pub fn full_system(&self) -> (DMatrix<f64>, DVector<f64>) {
        let (nf, ns) = (self.n_f(), self.n_s());
        let mut a = DMatrix::zeros(nf + ns, nf + ns);
        for f in 0..nf {
            a[(f, f)] = self.u[f];
        }
        a.view_mut((nf, 0), (ns, nf)).copy_from(&self.w);
        a.view_mut((0, nf), (nf, ns)).copy_from(&self.w.transpose());
        a.view_mut((nf, nf), (ns, ns)).copy_from(&self.v);
        let mut b = DVector::zeros(nf + ns);
        b.rows_mut(0, nf).copy_from(&self.b_f);
        b.rows_mut(nf, ns).copy_from(&self.b_s);
        (a, b)
    }
}

/// `V` split by the factor class that produced each term.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedBlocks {
    pub blocks: SchurBlocks,
    pub v_camera: DMatrix<f64>,
    pub v_imu: DMatrix<f64>,
    pub v_prior: DMatrix<f64>,
}

/// Accumulates `JᵀJ` and `−Jᵀr` of every factor, keeping the state block
/// split by factor class. No damping.
pub fn assemble_tagged(window: &WindowProblem, lin: &Linearization) -> TaggedBlocks {
    let ns = window.state_dim();
    let nf = window.feature_dim();
    let mut blocks = SchurBlocks::zeros(ns, nf);
    let mut v_camera = DMatrix::zeros(ns, ns);
    let mut v_imu = DMatrix::zeros(ns, ns);
    let mut v_prior = DMatrix::zeros(ns, ns);

    for ob in &lin.visual.blocks {
        let f = ob.feature;
        let jl = &ob.j_inv_depth;
        blocks.u[f] += jl.dot(jl);
        blocks.b_f[f] -= jl.dot(&ob.residual);
        let poses = [(ob.anchor, &ob.j_pose_anchor), (ob.target, &ob.j_pose_obs)];
        for (k, jk) in poses {
            let ok = k * STATE_DIM;
            let wcol = jk.transpose() * jl;
            for r in 0..6 {
                blocks.w[(ok + r, f)] += wcol[r];
            }
            let g = jk.transpose() * ob.residual;
            for r in 0..6 {
                blocks.b_s[ok + r] -= g[r];
            }
            for (l, jl2) in poses {
                let ol = l * STATE_DIM;
                let h = jk.transpose() * jl2;
                let mut view = v_camera.view_mut((ok, ol), (6, 6));
                view += h;
            }
        }
    }

    for imu in &lin.imu {
        let h = imu.jacobian.transpose() * imu.jacobian;
        let g = imu.jacobian.transpose() * imu.residual;
        let offs = [imu.kf_i * STATE_DIM, imu.kf_j * STATE_DIM];
        for (a, oa) in offs.iter().enumerate() {
            for (b, ob) in offs.iter().enumerate() {
                let mut view = v_imu.view_mut((*oa, *ob), (STATE_DIM, STATE_DIM));
                view += h.fixed_view::<15, 15>(a * STATE_DIM, b * STATE_DIM);
            }
            let mut bv = blocks.b_s.rows_mut(*oa, STATE_DIM);
            bv -= g.fixed_rows::<15>(a * STATE_DIM);
        }
    }

    if let Some(prior) = &lin.prior {
        let h = prior.jacobian.transpose() * &prior.jacobian;
        let g = prior.jacobian.transpose() * &prior.residual;
        for (a, ka) in prior.keyframes.iter().enumerate() {
            for (b, kb) in prior.keyframes.iter().enumerate() {
                let mut view =
                    v_prior.view_mut((ka * STATE_DIM, kb * STATE_DIM), (STATE_DIM, STATE_DIM));
                view += h.view((a * STATE_DIM, b * STATE_DIM), (STATE_DIM, STATE_DIM));
            }
            let mut bv = blocks.b_s.rows_mut(ka * STATE_DIM, STATE_DIM);
            bv -= g.rows(a * STATE_DIM, STATE_DIM);
        }
    }

    blocks.v = &v_camera + &v_imu + &v_prior;
    TaggedBlocks {
        blocks,
        v_camera,
        v_imu,
        v_prior,
    }
}

/// Damped normal equations of a linearized window.
pub fn assemble(
    window: &WindowProblem,
    lin: &Linearization,
    mu: f64,
) -> Result<SchurBlocks, LinsolveError> {
    let blocks = assemble_tagged(window, lin).blocks.damped(mu);
    blocks.check_features()?;
    Ok(blocks)
}

/// Operation counts of one Schur elimination.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SchurCounts {
    /// Elementwise inversions of `U`.
    pub u_divisions: u64,
    /// Multiply-adds of the rank-1 updates of `S` and `b′`.
    pub multiply_adds: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchurComplement {
    pub s: DMatrix<f64>,
    pub b: DVector<f64>,
    pub counts: SchurCounts,
}

/// `S = V − W·U⁻¹·Wᵀ` and `b′ = b_s − W·U⁻¹·b_f`, accumulated one feature at
/// a time as rank-1 updates, then symmetrized.
pub fn schur_eliminate(blocks: &SchurBlocks) -> Result<SchurComplement, LinsolveError> {
    blocks.check_features()?;
    let ns = blocks.n_s();
    let mut s = blocks.v.clone();
    let mut b = blocks.b_s.clone();
    let mut counts = SchurCounts::default();

    for f in 0..blocks.n_f() {
        let inv = 1.0 / blocks.u[f];
        counts.u_divisions += 1;
        let col = blocks.w.column(f);
        let scaled_bf = blocks.b_f[f] * inv;
        for c in 0..ns {
            let wc = col[c] * inv;
            if wc != 0.0 {
                let mut sc = s.column_mut(c);
                for r in 0..ns {
                    sc[r] -= col[r] * wc;
                }
            }
            b[c] -= col[c] * scaled_bf;
        }
        counts.multiply_adds += (ns * ns + ns) as u64;
    }

    let s = (&s + s.transpose()) * 0.5;
    Ok(SchurComplement { s, b, counts })
}

/// Lower-triangular factor `L` with `L·Lᵀ = S`, plus per-column operation
/// counts indexed by column.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    pub l: DMatrix<f64>,
    /// Evaluate operations at each column; `i` remaining columns cost `i`.
    pub evaluate_ops: Vec<u64>,
    /// Update operations at each column; `i` remaining columns cost `i(i−1)/2`.
    pub update_ops: Vec<u64>,
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Solves `L·y = b`.
    pub fn forward(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.dim();
        let mut y = b.clone();
        for i in 0..n {
            let mut acc = y[i];
            for k in 0..i {
                acc -= self.l[(i, k)] * y[k];
            }
            y[i] = acc / self.l[(i, i)];
        }
        y
    }

    /// Solves `Lᵀ·x = y`.
    pub fn backward(&self, y: &DVector<f64>) -> DVector<f64> {
        let n = self.dim();
        let mut x = y.clone();
        for i in (0..n).rev() {
            let mut acc = x[i];
            for k in i + 1..n {
                acc -= self.l[(k, i)] * x[k];
            }
            x[i] = acc / self.l[(i, i)];
        }
        x
    }

    /// Solves `L·Lᵀ·x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.backward(&self.forward(b))
    }

    pub fn total_evaluate_ops(&self) -> u64 {
        self.evaluate_ops.iter().sum()
    }

    pub fn total_update_ops(&self) -> u64 {
        self.update_ops.iter().sum()
    }
}

/// Right-looking column Cholesky with the default pivot floor.
pub fn cholesky(s: &DMatrix<f64>) -> Result<CholeskyFactor, LinsolveError> {
    cholesky_with_floor(s, DEFAULT_PIVOT_FLOOR)
}

/// For each column `j`, Evaluate produces column `j` of `L` from the
/// current trailing matrix (`i` operations: one square root and `i − 1`
/// divisions), and Update subtracts its outer product from the lower half of
/// the trailing submatrix (`i(i−1)/2` multiply-adds).
pub fn cholesky_with_floor(
    s: &DMatrix<f64>,
    pivot_floor: f64,
) -> Result<CholeskyFactor, LinsolveError> {
    let n = s.nrows();
    assert_eq!(n, s.ncols(), "cholesky needs a square matrix");
    // Only the lower triangle of `a` is read or written.
    let mut a = s.clone();
    let mut l = DMatrix::zeros(n, n);
    let mut evaluate_ops = Vec::with_capacity(n);
    let mut update_ops = Vec::with_capacity(n);

    for j in 0..n {
        let i = (n - j) as u64;

        // Evaluate.
        let pivot = a[(j, j)];
        if !(pivot > pivot_floor) {
            return Err(LinsolveError::NotPositiveDefinite { column: j, pivot });
        }
        let d = pivot.sqrt();
        l[(j, j)] = d;
        for k in j + 1..n {
            l[(k, j)] = a[(k, j)] / d;
        }
        evaluate_ops.push(i);

        // Update.
        let mut ops = 0u64;
        for k in j + 1..n {
            let lk = l[(k, j)];
            for m in j + 1..=k {
                a[(k, m)] -= lk * l[(m, j)];
                ops += 1;
            }
        }
        debug_assert_eq!(ops, i * (i - 1) / 2);
        update_ops.push(ops);
    }

    Ok(CholeskyFactor {
        l,
        evaluate_ops,
        update_ops,
    })
}

/// Back-substitution: `Δx_s` from the factor, then
/// `Δx_f = U⁻¹(b_f − Wᵀ·Δx_s)`.
pub fn solve(
    blocks: &SchurBlocks,
    factor: &CholeskyFactor,
    b_reduced: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let dx_s = factor.solve(b_reduced);
    let rhs = &blocks.b_f - blocks.w.tr_mul(&dx_s);
    let dx_f = rhs.component_div(&blocks.u);
    (dx_s, dx_f)
}

/// Schur elimination, factorization and back-substitution in one call.
pub fn solve_blocks(
    blocks: &SchurBlocks,
) -> Result<(DVector<f64>, DVector<f64>, SchurCounts, CholeskyFactor), LinsolveError> {
    let sc = schur_eliminate(blocks)?;
    let factor = cholesky(&sc.s)?;
    let (dx_s, dx_f) = solve(blocks, &factor, &sc.b);
    Ok((dx_s, dx_f, sc.counts, factor))
}
