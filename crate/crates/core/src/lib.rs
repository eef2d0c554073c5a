//! Sliding-window visual-inertial bundle adjustment with the solver split
//! into the kernels an accelerator would implement: Jacobian evaluation,
//! Schur elimination of diagonal inverse-depth features, column Cholesky and
//! marginalization. Alongside the numerics sit cycle, memory and power
//! models of those kernels and a runtime policy that picks iteration counts
//! and active units from the number of tracked features.
//!
//! ```
//! use slidewin::nls::{lm_solve, LmConfig};
//! use slidewin::scenegen::{generate, SceneConfig};
//!
//! let scene = generate(&SceneConfig { n_keyframes: 4, n_features: 40, ..Default::default() }).unwrap();
//! let (solved, stats) = lm_solve(&scene.windows[0], &LmConfig::default()).unwrap();
//! assert!(stats.final_cost() < 1e-12);
//! assert_eq!(solved.keyframes.len(), 4);
//! ```

// `!(x > 0.0)` style checks are meant to reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod factors;
pub mod geometry;
pub mod hwmodel;
pub mod io;
pub mod linsolve;
pub mod marginalize;
pub mod metrics;
pub mod model;
pub mod nls;
pub mod reconfig;
pub mod scenegen;

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[cfg(test)]
pub(crate) mod testutil;

// The guide's snippets run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/windows.md")]
    mod windows {}
    #[doc = include_str!("../../../book/src/solver.md")]
    mod solver {}
    #[doc = include_str!("../../../book/src/marginalization.md")]
    mod marginalization {}
    #[doc = include_str!("../../../book/src/cost-model.md")]
    mod cost_model {}
    #[doc = include_str!("../../../book/src/runtime.md")]
    mod runtime {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
