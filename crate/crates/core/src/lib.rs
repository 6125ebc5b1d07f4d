//! Numerical toolkit for stochastic control problems whose dynamics and costs
//! depend on the *path* of the control, the leading example being delayed
//! actuation `dx_t = (a_t - a_{t-tau}) dt + sigma dw_t`.
//!
//! The crate is organised around the objects such a problem needs:
//!
//! - [`path`] — càdlàg paths sampled on uniform grids and their primitive
//!   deformations (flat extension, last-value bump, concatenation).
//! - [`calculus`] — numerical functional derivatives built from those
//!   deformations, a discrete change-of-variables residual tester, and a
//!   predictability check.
//! - [`lq`] — the coupled backward system for the coefficient functions
//!   `F0..F3` of the delayed linear-quadratic value functional, the feedback
//!   law, and the HJB residual diagnostics.
//! - [`sim`] — Euler–Maruyama simulation of the delayed controlled SDE,
//!   Monte Carlo cost estimation, verification / dynamic-programming checks,
//!   and an exact quadratic-program oracle for the noiseless problem.
//! - [`game`] — the symmetric N-player delayed game: coefficient system,
//!   per-player feedback, game HJB residual, and Nash deviation tests.
//! - [`io`] — CSV/JSON persistence for paths, surfaces, and reports.
//!
//! Monte Carlo batches run data-parallel through rayon when the `parallel`
//! feature (default) is enabled; a sequential fallback is always compiled and
//! both produce bit-identical estimates for a given seed.

pub mod calculus;
pub mod error;
pub mod game;
pub mod io;
pub mod lq;
pub mod path;
pub mod report;
pub mod sim;

pub use error::{Error, Result};
pub use path::{concat_control, lambda_metric, PathPair, SampledPath};

/// Configure the global rayon pool size. No-op when the crate is built
/// without the `parallel` feature or when `n == 0` (library default).
pub fn configure_threads(n: usize) {
    #[cfg(feature = "parallel")]
    if n > 0 {
        // Ignore the error when a pool already exists: thread count is a
        // performance hint, never a correctness knob.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
}
