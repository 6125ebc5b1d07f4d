//! Coefficient system of the delayed linear-quadratic value functional.
//!
//! The value of the control problem with drift `a_t - a_{t-tau}`, running
//! cost `z²/2 + q z y + (eps/2) y²`, and terminal cost `c y²/2` is quadratic
//! in the current state and in integrals of the control history:
//!
//! ```text
//! V(t, y, Z) = F0(t) y²/2 + y ∫ F1(t,θ) z_{t+θ} dθ
//!            + ∬ F2(t,θ1,θ2) z_{t+θ1} z_{t+θ2} dθ1 dθ2 + F3(t),
//! ```
//!
//! with θ ranging over `[-tau, 0)`. The coefficients solve a coupled
//! backward system: a Riccati ODE for `F0`, transport equations with source
//! terms for `F1` and `F2` (advection speed one in each θ argument), and a
//! quadrature for `F3`, with final data at `t = T` and boundary rows at
//! `θ = -tau` tied to `F0` and `F1`.
//!
//! The solver marches backward from `T` with `Δθ = Δt`, so the transport
//! operators advect exactly one cell per step; sources are evaluated at the
//! already-known later time level (first order), and the two ODEs use an
//! explicit midpoint stage. The march is written for a general relaxation
//! factor `nu` of the feedback gain so that the symmetric N-player system of
//! [`crate::game`] (`nu = 1 - 1/N`) reuses it; the single-agent system is
//! `nu = 1`.
//!
//! Two variants of the `F1` source coefficient are runnable, selected by
//! [`CrossFactor`]: `One` carries the full gain–kernel product, `Half`
//! halves it. [`select_cross_factor`] picks the variant whose HJB residual
//! actually vanishes under grid refinement.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::path::{grid_multiple, SampledPath};

/// Scalar problem data of the delayed linear-quadratic example.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LQParams {
    /// Cross coefficient of the running cost `q z y`.
    pub q: f64,
    /// State cost coefficient `eps/2 y²`.
    pub eps: f64,
    /// Terminal cost coefficient `c y²/2`.
    pub c: f64,
    /// Horizon `T`.
    pub horizon: f64,
    /// Control delay `tau`.
    pub tau: f64,
    /// Diffusion `sigma`.
    pub sigma: f64,
}

impl LQParams {
    pub fn validate(&self) -> Result<()> {
        if self.horizon.is_nan() || self.horizon <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        if self.tau.is_nan() || self.tau <= 0.0 || self.tau > self.horizon * (1.0 + 1e-12) {
            return Err(Error::InvalidParameter(format!(
                "delay must satisfy 0 < tau <= horizon, got tau = {}",
                self.tau
            )));
        }
        if self.sigma < 0.0 {
            return Err(Error::InvalidParameter("sigma must be >= 0".into()));
        }
        if self.eps < 0.0 {
            return Err(Error::InvalidParameter("eps must be >= 0".into()));
        }
        Ok(())
    }
}

/// Shared grid of the backward march: time nodes `k·dt` on `[0, T]` and
/// delay nodes `-tau + j·dt` on `[-tau, 0]`. `dt` must divide both `tau`
/// and `T`; the delay step equals the time step so characteristics advect
/// one cell per step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverGrid {
    pub dt: f64,
    pub n_t: usize,
    pub n_theta: usize,
}

impl SolverGrid {
    pub fn new(params: &LQParams, dt: f64) -> Result<Self> {
        if dt.is_nan() || dt <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "grid step must be positive, got {dt}"
            )));
        }
        let m = grid_multiple(params.tau, dt)
            .filter(|&m| m >= 1)
            .ok_or_else(|| {
                Error::GridAlignment(format!("dt = {dt} does not divide tau = {}", params.tau))
            })?;
        let steps = grid_multiple(params.horizon, dt)
            .filter(|&s| s >= 1)
            .ok_or_else(|| {
                Error::GridAlignment(format!(
                    "dt = {dt} does not divide the horizon {}",
                    params.horizon
                ))
            })?;
        Ok(Self {
            dt,
            n_t: steps as usize + 1,
            n_theta: m as usize + 1,
        })
    }

    /// Grid with `steps_per_tau` cells across the delay window.
    pub fn with_tau_steps(params: &LQParams, steps_per_tau: usize) -> Result<Self> {
        Self::new(params, params.tau / steps_per_tau as f64)
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn theta(&self, j: usize) -> f64 {
        (j as i64 - (self.n_theta as i64 - 1)) as f64 * self.dt
    }

    /// Index of a node time, or an alignment error.
    pub fn time_index(&self, t: f64) -> Result<usize> {
        let k = grid_multiple(t, self.dt)
            .ok_or_else(|| Error::GridAlignment(format!("t = {t} is not a grid node")))?;
        if k < 0 || k as usize >= self.n_t {
            return Err(Error::InvalidParameter(format!(
                "t = {t} outside [0, {}]",
                self.time(self.n_t - 1)
            )));
        }
        Ok(k as usize)
    }
}

/// Source-term variant for the `F1` transport equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrossFactor {
    Half,
    One,
}

impl CrossFactor {
    pub fn value(self) -> f64 {
        match self {
            CrossFactor::Half => 0.5,
            CrossFactor::One => 1.0,
        }
    }
}

impl std::fmt::Display for CrossFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CrossFactor::Half => write!(f, "half"),
            CrossFactor::One => write!(f, "one"),
        }
    }
}

/// The four solved coefficient grids. `f1` is time-major `[k][j]`, `f2` is
/// `[k][j][l]` with `j, l` indexing the delay nodes.
#[derive(Debug, Clone)]
pub struct Surfaces {
    pub params: LQParams,
    pub grid: SolverGrid,
    pub cross_factor: CrossFactor,
    pub f0: Vec<f64>,
    pub f1: Vec<f64>,
    pub f2: Vec<f64>,
    pub f3: Vec<f64>,
    pub warnings: Vec<String>,
}

/// First and second state derivatives of the value functional at a point,
/// together with the time derivative taken after zeroing the current
/// control slot.
#[derive(Debug, Clone, Copy)]
pub struct ValueDerivatives {
    pub dx: f64,
    pub dxx: f64,
    pub dt_removed: f64,
}

// ---------------------------------------------------------------------------
// backward march, shared between the single-agent and the game systems
// ---------------------------------------------------------------------------

pub(crate) struct BackwardSystem {
    pub q: f64,
    pub eps: f64,
    pub c: f64,
    pub sigma: f64,
    /// Gain relaxation: 1 for the single agent, `1 - 1/N` for N players.
    pub nu: f64,
    /// Multiplier on the `F1` source coefficient.
    pub cross: f64,
}

impl BackwardSystem {
    fn gain(&self, f0: f64, f1_at_zero: f64) -> f64 {
        self.q + self.nu * (f0 + f1_at_zero)
    }

    /// Right side of the Riccati equation `F0' = ...` as a function of the
    /// gain. Reduces to `K² - eps` at `nu = 1`.
    fn riccati_rhs(&self, k_gain: f64) -> f64 {
        (2.0 / self.nu - 1.0) * k_gain * k_gain
            - 2.0 * self.q * (1.0 / self.nu - 1.0) * k_gain
            - self.eps
    }

    /// Source coefficient of the `F1` transport equation; `cross · K` at
    /// `nu = 1`.
    fn f1_source_coeff(&self, k_gain: f64) -> f64 {
        self.cross * ((2.0 - self.nu) * k_gain - self.q * (1.0 - self.nu))
    }

    /// Source coefficient of the `F2` transport equation; `1/2` at `nu = 1`.
    fn f2_source_coeff(&self) -> f64 {
        self.nu * (2.0 - self.nu) / 2.0
    }
}

pub(crate) struct SurfaceData {
    pub f0: Vec<f64>,
    pub f1: Vec<f64>,
    pub f2: Vec<f64>,
    pub f3: Vec<f64>,
}

/// March the coupled system backward from the final data. Characteristic
/// advection moves every `F1`/`F2` node one θ-cell per time step; nodes
/// whose characteristic exits through `θ = -tau` take the boundary value at
/// the exit time, and `θ = 0` is an outflow edge.
pub(crate) fn march_backward(sys: &BackwardSystem, grid: &SolverGrid) -> Result<SurfaceData> {
    let nt = grid.n_t;
    let nth = grid.n_theta;
    let m = nth - 1; // index of θ = 0
    let dt = grid.dt;

    let mut f0 = vec![0.0; nt];
    let mut f1 = vec![0.0; nt * nth];
    let mut f2 = vec![0.0; nt * nth * nth];
    let mut f3 = vec![0.0; nt];

    // final conditions; the boundary rows at θ = -tau start from the final
    // data as well, which for c ≠ 0 disagrees with the boundary tie-in.
    f0[nt - 1] = sys.c;

    let i1 = |k: usize, j: usize| k * nth + j;
    let i2 = |k: usize, j: usize, l: usize| (k * nth + j) * nth + l;

    let mut g_next = vec![0.0; nth];
    for k in (0..nt - 1).rev() {
        let k1 = k + 1;
        let k_gain_next = sys.gain(f0[k1], f1[i1(k1, m)]);
        for (j, g) in g_next.iter_mut().enumerate() {
            *g = f1[i1(k1, j)] + 2.0 * f2[i2(k1, j, m)];
        }

        // transport: pull each node from one θ-cell to the left at the
        // later level, source at that known point
        let c1 = sys.f1_source_coeff(k_gain_next);
        for j in 1..=m {
            f1[i1(k, j)] = f1[i1(k1, j - 1)] - dt * c1 * g_next[j - 1];
        }
        let c2 = sys.f2_source_coeff();
        for j in 1..=m {
            for l in 1..=m {
                f2[i2(k, j, l)] =
                    f2[i2(k1, j - 1, l - 1)] - dt * c2 * g_next[j - 1] * g_next[l - 1];
            }
        }

        // Riccati step, explicit midpoint; F1(·,0) at the midpoint is the
        // average of the two available levels
        let s1 = sys.riccati_rhs(k_gain_next);
        let f0_half = f0[k1] - 0.5 * dt * s1;
        let f1_mid0 = 0.5 * (f1[i1(k1, m)] + f1[i1(k, m)]);
        let k_gain_mid = sys.gain(f0_half, f1_mid0);
        f0[k] = f0[k1] - dt * sys.riccati_rhs(k_gain_mid);

        // F3' = -nu σ²/2 F0, midpoint via the Riccati stage value
        f3[k] = f3[k1] + dt * sys.nu * sys.sigma * sys.sigma * 0.5 * f0_half;

        // boundary rows at θ = -tau from the same-time F0 and F1
        f1[i1(k, 0)] = -f0[k];
        for l in 0..=m {
            let v = -0.5 * f1[i1(k, l)];
            f2[i2(k, 0, l)] = v;
            f2[i2(k, l, 0)] = v;
        }

        if !f0[k].is_finite()
            || f1[i1(k, 0)..i1(k, m) + 1].iter().any(|v| !v.is_finite())
            || f2[i2(k, 0, 0)..i2(k, m, m) + 1].iter().any(|v| !v.is_finite())
        {
            return Err(Error::BlowUp {
                t: grid.time(k),
                what: "backward march left the representable range (Riccati blow-up?)".into(),
            });
        }
    }

    Ok(SurfaceData { f0, f1, f2, f3 })
}

/// Solve the single-agent coefficient system on the given grid.
pub fn solve_f_system(
    params: &LQParams,
    grid: &SolverGrid,
    cross_factor: CrossFactor,
) -> Result<Surfaces> {
    params.validate()?;
    let mut warnings = Vec::new();
    if params.c != 0.0 {
        warnings.push(format!(
            "c = {} makes the final condition at t = T conflict with the boundary row \
             at theta = -tau; the final condition wins at T, the boundary applies for t < T",
            params.c
        ));
    }
    let sys = BackwardSystem {
        q: params.q,
        eps: params.eps,
        c: params.c,
        sigma: params.sigma,
        nu: 1.0,
        cross: cross_factor.value(),
    };
    let data = march_backward(&sys, grid)?;
    Ok(Surfaces {
        params: *params,
        grid: *grid,
        cross_factor,
        f0: data.f0,
        f1: data.f1,
        f2: data.f2,
        f3: data.f3,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

impl Surfaces {
    #[inline]
    pub fn f1_at(&self, k: usize, j: usize) -> f64 {
        self.f1[k * self.grid.n_theta + j]
    }

    #[inline]
    pub fn f2_at(&self, k: usize, j: usize, l: usize) -> f64 {
        self.f2[(k * self.grid.n_theta + j) * self.grid.n_theta + l]
    }

    /// Largest absolute entry across all four coefficient grids.
    pub fn max_abs(&self) -> f64 {
        self.f0
            .iter()
            .chain(&self.f1)
            .chain(&self.f2)
            .chain(&self.f3)
            .fold(0.0_f64, |a, v| a.max(v.abs()))
    }

    /// Worst violation of the `F2` index symmetry.
    pub fn symmetry_defect(&self) -> f64 {
        let nth = self.grid.n_theta;
        let mut worst = 0.0_f64;
        for k in 0..self.grid.n_t {
            for j in 0..nth {
                for l in 0..j {
                    worst = worst.max((self.f2_at(k, j, l) - self.f2_at(k, l, j)).abs());
                }
            }
        }
        worst
    }

    /// Control samples on the delay window `[t - tau, t)`: one value per
    /// left node `t - tau + j·dt`. Times before the path start read zero.
    pub fn history_window(&self, t: f64, z: &SampledPath) -> Result<Vec<f64>> {
        let m = self.grid.n_theta - 1;
        let dt = self.grid.dt;
        (0..m)
            .map(|j| z.sample_scalar(t - self.params.tau + j as f64 * dt))
            .collect()
    }

    /// The value functional at `(t, y, Z)`; θ-integrals by left-endpoint
    /// Riemann sums on the delay grid.
    pub fn value(&self, t: f64, y: f64, z: &SampledPath) -> Result<f64> {
        let k = self.grid.time_index(t)?;
        let w = self.history_window(t, z)?;
        let dt = self.grid.dt;
        let m = w.len();
        let mut lin = 0.0;
        for j in 0..m {
            lin += self.f1_at(k, j) * w[j];
        }
        let mut quad = 0.0;
        for j in 0..m {
            for l in 0..m {
                quad += self.f2_at(k, j, l) * w[j] * w[l];
            }
        }
        Ok(self.f0[k] * y * y / 2.0 + y * lin * dt + quad * dt * dt + self.f3[k])
    }

    // finite differences on the stored grids; central in the interior,
    // one-sided at the edges
    fn ddt(v: &[f64], stride: usize, k: usize, n: usize, dt: f64) -> f64 {
        if k == 0 {
            (v[stride] - v[0]) / dt
        } else if k == n - 1 {
            (v[k * stride] - v[(k - 1) * stride]) / dt
        } else {
            (v[(k + 1) * stride] - v[(k - 1) * stride]) / (2.0 * dt)
        }
    }

    pub(crate) fn f0_prime(&self, k: usize) -> f64 {
        Self::ddt(&self.f0, 1, k, self.grid.n_t, self.grid.dt)
    }

    pub(crate) fn f3_prime(&self, k: usize) -> f64 {
        Self::ddt(&self.f3, 1, k, self.grid.n_t, self.grid.dt)
    }

    /// Transport derivative `(∂t - ∂θ) F1` from the stored grid.
    pub(crate) fn f1_transport(&self, k: usize, j: usize) -> f64 {
        let nth = self.grid.n_theta;
        let dt = self.grid.dt;
        let dt_part = Self::ddt(&self.f1[j..], nth, k, self.grid.n_t, dt);
        let row = &self.f1[k * nth..(k + 1) * nth];
        let dth_part = if j == 0 {
            (row[1] - row[0]) / dt
        } else if j == nth - 1 {
            (row[j] - row[j - 1]) / dt
        } else {
            (row[j + 1] - row[j - 1]) / (2.0 * dt)
        };
        dt_part - dth_part
    }

    /// Transport derivative `(∂t - ∂θ1 - ∂θ2) F2` from the stored grid.
    pub(crate) fn f2_transport(&self, k: usize, j: usize, l: usize) -> f64 {
        let nth = self.grid.n_theta;
        let dt = self.grid.dt;
        let idx = |k: usize, j: usize, l: usize| (k * nth + j) * nth + l;
        let dt_part = Self::ddt(&self.f2[j * nth + l..], nth * nth, k, self.grid.n_t, dt);
        let d = |a: f64, b: f64, two: bool| if two { (a - b) / (2.0 * dt) } else { (a - b) / dt };
        let d1 = if j == 0 {
            d(self.f2[idx(k, 1, l)], self.f2[idx(k, 0, l)], false)
        } else if j == nth - 1 {
            d(self.f2[idx(k, j, l)], self.f2[idx(k, j - 1, l)], false)
        } else {
            d(self.f2[idx(k, j + 1, l)], self.f2[idx(k, j - 1, l)], true)
        };
        let d2 = if l == 0 {
            d(self.f2[idx(k, j, 1)], self.f2[idx(k, j, 0)], false)
        } else if l == nth - 1 {
            d(self.f2[idx(k, j, l)], self.f2[idx(k, j, l - 1)], false)
        } else {
            d(self.f2[idx(k, j, l + 1)], self.f2[idx(k, j, l - 1)], true)
        };
        dt_part - d1 - d2
    }

    /// State derivatives of the value functional and the time derivative
    /// with the current-control terms removed (current control set to zero).
    pub fn derivatives(&self, t: f64, y: f64, z: &SampledPath) -> Result<ValueDerivatives> {
        let k = self.grid.time_index(t)?;
        let w = self.history_window(t, z)?;
        let dt = self.grid.dt;
        let m = w.len();

        let mut lin = 0.0;
        for j in 0..m {
            lin += self.f1_at(k, j) * w[j];
        }
        let dx = self.f0[k] * y + lin * dt;
        let dxx = self.f0[k];

        let z_tau = w.first().copied().unwrap_or(0.0);
        let mut adv1 = 0.0;
        for j in 0..m {
            adv1 += self.f1_transport(k, j) * w[j];
        }
        let mut bnd2 = 0.0;
        for j in 0..m {
            bnd2 += self.f2_at(k, j, 0) * w[j];
        }
        let mut adv2 = 0.0;
        for j in 0..m {
            for l in 0..m {
                adv2 += self.f2_transport(k, j, l) * w[j] * w[l];
            }
        }
        let dt_removed = self.f0_prime(k) * y * y / 2.0
            + y * (-self.f1_at(k, 0) * z_tau + adv1 * dt)
            - 2.0 * z_tau * bnd2 * dt
            + adv2 * dt * dt
            + self.f3_prime(k);

        Ok(ValueDerivatives { dx, dxx, dt_removed })
    }

    /// The minimizing feedback action at `(t, y, Z)`.
    pub fn feedback_control(&self, t: f64, y: f64, z: &SampledPath) -> Result<f64> {
        let k = self.grid.time_index(t)?;
        let w = self.history_window(t, z)?;
        let dt = self.grid.dt;
        let m = w.len();
        let gain = self.f0[k] + self.f1_at(k, m) + self.params.q;
        let mut hist = 0.0;
        for j in 0..m {
            hist += (self.f1_at(k, j) + 2.0 * self.f2_at(k, j, m)) * w[j];
        }
        Ok(-gain * y - hist * dt)
    }

    /// Pointwise defect of the HJB equation at an interior node. Zero for
    /// the exact solution; first order in the grid step for the solved one.
    pub fn hjb_residual(&self, t: f64, y: f64, z: &SampledPath) -> Result<f64> {
        let k = self.grid.time_index(t)?;
        if k == 0 || k == self.grid.n_t - 1 {
            return Err(Error::InvalidParameter(format!(
                "HJB residual needs an interior time, got t = {t}"
            )));
        }
        let d = self.derivatives(t, y, z)?;
        let a = self.feedback_control(t, y, z)?;
        let z_tau = z.sample_scalar(t - self.params.tau)?;
        let p = &self.params;
        Ok(d.dt_removed + 0.5 * p.sigma * p.sigma * d.dxx - z_tau * d.dx - 0.5 * a * a
            + 0.5 * p.eps * y * y)
    }

    /// Minimize the inner expression of the modified Hamiltonian over a grid
    /// of candidate actions: the time derivative after substituting the
    /// action as the current control, plus the classical Hamiltonian terms.
    /// Returns `(min value, argmin)`.
    pub fn minimize_hamiltonian(
        &self,
        t: f64,
        y: f64,
        z: &SampledPath,
        alphas: &[f64],
    ) -> Result<(f64, f64)> {
        if alphas.is_empty() {
            return Err(Error::InvalidParameter(
                "empty action grid for the Hamiltonian minimization".into(),
            ));
        }
        let k = self.grid.time_index(t)?;
        let d = self.derivatives(t, y, z)?;
        let w = self.history_window(t, z)?;
        let dt = self.grid.dt;
        let m = w.len();
        let z_tau = w.first().copied().unwrap_or(0.0);
        // coefficient of the action inside the substituted time derivative
        let mut slot = y * self.f1_at(k, m);
        let mut bnd = 0.0;
        for j in 0..m {
            bnd += self.f2_at(k, j, m) * w[j];
        }
        slot += 2.0 * bnd * dt;
        let p = &self.params;
        let fixed = d.dt_removed + 0.5 * p.sigma * p.sigma * d.dxx - z_tau * d.dx
            + 0.5 * p.eps * y * y;
        let mut best = (f64::INFINITY, alphas[0]);
        for &a in alphas {
            let val = fixed + a * slot + a * d.dx + 0.5 * a * a + p.q * a * y;
            if val < best.0 {
                best = (val, a);
            }
        }
        Ok(best)
    }
}

// ---------------------------------------------------------------------------
// residual refinement ladder and cross-factor selection
// ---------------------------------------------------------------------------

/// One refinement level of a residual study.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LadderRow {
    pub dt: f64,
    pub max_residual: f64,
}

/// Least-squares slope of `ln(residual)` against `ln(dt)`.
pub fn loglog_slope(rows: &[LadderRow]) -> f64 {
    let n = rows.len() as f64;
    let xs: Vec<f64> = rows.iter().map(|r| r.dt.ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.max_residual.max(1e-300).ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    num / den
}

/// One randomized residual probe, drawn independently of any grid so the
/// same configuration can be evaluated across refinement levels: a time
/// fraction, a state value, and a smooth control history on the delay
/// window (a short cosine series).
#[derive(Debug, Clone)]
pub struct ResidualProbe {
    pub t_frac: f64,
    pub y: f64,
    pub z_coeffs: Vec<(f64, f64, f64)>,
}

impl ResidualProbe {
    pub fn draw(rng: &mut ChaCha8Rng) -> Self {
        let t_frac = rng.random_range(0.1..0.9);
        let y = rng.random_range(-2.0..2.0);
        let z_coeffs = (1..=3)
            .map(|k| {
                (
                    rng.random_range(-0.5..0.5),
                    k as f64,
                    rng.random_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        Self { t_frac, y, z_coeffs }
    }

    pub fn set(count: usize, seed: u64) -> Vec<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| Self::draw(&mut rng)).collect()
    }

    /// Interior grid node closest to the time fraction.
    pub fn time_on(&self, grid: &SolverGrid) -> f64 {
        let k = ((self.t_frac * (grid.n_t - 1) as f64).round() as usize)
            .clamp(1, grid.n_t - 2);
        grid.time(k)
    }

    fn z_value(&self, theta_over_tau: f64) -> f64 {
        self.z_coeffs
            .iter()
            .map(|(a, k, phi)| a * (std::f64::consts::TAU * k * theta_over_tau + phi).cos())
            .sum()
    }

    /// The control history sampled on the delay window ending at `t`.
    pub fn history_on(&self, grid: &SolverGrid, tau: f64, t: f64) -> Result<SampledPath> {
        let vals = (0..grid.n_theta)
            .map(|j| self.z_value(grid.theta(j) / tau))
            .collect();
        SampledPath::scalar(t - tau, grid.dt, vals)
    }
}

/// Max HJB residual over a fixed probe set for one solve.
pub fn max_residual_over_probes(s: &Surfaces, probes: &[ResidualProbe]) -> Result<f64> {
    let grid = &s.grid;
    let mut worst = 0.0_f64;
    for probe in probes {
        let t = probe.time_on(grid);
        let z = probe.history_on(grid, s.params.tau, t)?;
        worst = worst.max(s.hjb_residual(t, probe.y, &z)?.abs());
    }
    Ok(worst)
}

/// Residual refinement ladder for one cross-factor variant. `fractions`
/// lists the number of grid cells per delay window, e.g. `[5, 10, 20]`.
pub fn residual_ladder(
    params: &LQParams,
    cross: CrossFactor,
    fractions: &[usize],
    probes: usize,
    seed: u64,
) -> Result<(Vec<LadderRow>, f64)> {
    let probe_set = ResidualProbe::set(probes, seed);
    let mut rows = Vec::with_capacity(fractions.len());
    for &frac in fractions {
        let grid = SolverGrid::with_tau_steps(params, frac)?;
        let s = solve_f_system(params, &grid, cross)?;
        rows.push(LadderRow {
            dt: grid.dt,
            max_residual: max_residual_over_probes(&s, &probe_set)?,
        });
    }
    let slope = loglog_slope(&rows);
    Ok((rows, slope))
}

/// Outcome of the cross-factor selection procedure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossSelection {
    pub chosen: CrossFactor,
    pub half: Vec<LadderRow>,
    pub half_slope: f64,
    pub one: Vec<LadderRow>,
    pub one_slope: f64,
}

/// Solve both source variants across a refinement ladder and keep the one
/// whose residual actually converges (larger slope wins; ties break on the
/// finest-grid residual).
pub fn select_cross_factor(
    params: &LQParams,
    fractions: &[usize],
    probes: usize,
    seed: u64,
) -> Result<CrossSelection> {
    let (half, half_slope) = residual_ladder(params, CrossFactor::Half, fractions, probes, seed)?;
    let (one, one_slope) = residual_ladder(params, CrossFactor::One, fractions, probes, seed)?;
    let half_fine = half.last().map(|r| r.max_residual).unwrap_or(f64::INFINITY);
    let one_fine = one.last().map(|r| r.max_residual).unwrap_or(f64::INFINITY);
    let chosen = if (one_slope - half_slope).abs() > 0.05 {
        if one_slope > half_slope {
            CrossFactor::One
        } else {
            CrossFactor::Half
        }
    } else if one_fine <= half_fine {
        CrossFactor::One
    } else {
        CrossFactor::Half
    };
    Ok(CrossSelection {
        chosen,
        half,
        half_slope,
        one,
        one_slope,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::{delta_x, delta_xx};
    use approx::assert_abs_diff_eq;

    pub(crate) fn demo_params() -> LQParams {
        LQParams {
            q: 1.0,
            eps: 2.0,
            c: 0.0,
            horizon: 1.0,
            tau: 0.05,
            sigma: 1.0,
        }
    }

    fn solved(steps_per_tau: usize) -> Surfaces {
        let p = demo_params();
        let grid = SolverGrid::with_tau_steps(&p, steps_per_tau).unwrap();
        solve_f_system(&p, &grid, CrossFactor::One).unwrap()
    }

    fn random_history(t: f64, tau: f64, dt: f64, n: usize, seed: u64) -> SampledPath {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        SampledPath::scalar(t - tau, dt, vals).unwrap()
    }

    #[test]
    fn zero_data_gives_the_zero_fixed_point() {
        let p = LQParams {
            q: 0.0,
            eps: 0.0,
            c: 0.0,
            horizon: 1.0,
            tau: 0.2,
            sigma: 1.0,
        };
        let grid = SolverGrid::with_tau_steps(&p, 5).unwrap();
        let s = solve_f_system(&p, &grid, CrossFactor::One).unwrap();
        assert!(s.max_abs() <= 1e-12);
    }

    #[test]
    fn solve_is_finite_and_structurally_sound_on_the_reference_configuration() {
        let s = solved(10);
        assert!(s.max_abs().is_finite());
        assert!(s.warnings.is_empty());
        // final conditions exact
        let last = s.grid.n_t - 1;
        assert_eq!(s.f0[last], 0.0);
        assert_eq!(s.f3[last], 0.0);
        for j in 0..s.grid.n_theta {
            assert_eq!(s.f1_at(last, j), 0.0);
        }
        // boundary ties at every earlier node
        for k in 0..last {
            assert_eq!(s.f1_at(k, 0), -s.f0[k]);
            for j in 0..s.grid.n_theta {
                assert_eq!(s.f2_at(k, j, 0), -0.5 * s.f1_at(k, j));
                assert_eq!(s.f2_at(k, 0, j), -0.5 * s.f1_at(k, j));
            }
        }
        assert!(s.symmetry_defect() <= 1e-12);
    }

    #[test]
    fn c_nonzero_emits_a_warning_and_keeps_the_final_condition() {
        let mut p = demo_params();
        p.c = 0.7;
        let grid = SolverGrid::with_tau_steps(&p, 5).unwrap();
        let s = solve_f_system(&p, &grid, CrossFactor::One).unwrap();
        assert_eq!(s.warnings.len(), 1);
        let last = s.grid.n_t - 1;
        assert_eq!(s.f0[last], 0.7);
        assert_eq!(s.f1_at(last, 0), 0.0); // final condition wins at T
        assert_eq!(s.f1_at(last - 1, 0), -s.f0[last - 1]);
    }

    #[test]
    fn f3_matches_an_independent_quadrature_of_f0() {
        // F3(t) = (σ²/2) ∫_t^T F0; compare the marched values against a
        // trapezoid rule on the solved F0.
        let s = solved(10);
        let dt = s.grid.dt;
        let n = s.grid.n_t;
        let mut trap = vec![0.0; n];
        for k in (0..n - 1).rev() {
            trap[k] = trap[k + 1] + 0.5 * dt * (s.f0[k] + s.f0[k + 1]);
        }
        let scale = 0.5 * s.params.sigma * s.params.sigma;
        for k in 0..n {
            assert_abs_diff_eq!(s.f3[k], scale * trap[k], epsilon = 5.0 * dt * dt);
        }
    }

    #[test]
    fn value_at_the_horizon_is_the_terminal_cost() {
        let s = solved(5);
        let t = s.params.horizon;
        let z = random_history(t, s.params.tau, s.grid.dt, s.grid.n_theta, 3);
        for y in [-1.5, 0.0, 2.0] {
            assert_abs_diff_eq!(s.value(t, y, &z).unwrap(), 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn value_with_zero_history_reads_only_f0_and_f3() {
        let s = solved(5);
        let z = SampledPath::zeros(-s.params.tau, s.grid.dt, s.grid.n_theta).unwrap();
        let v = s.value(0.0, 1.0, &z).unwrap();
        assert_abs_diff_eq!(v, s.f0[0] / 2.0 + s.f3[0], epsilon = 1e-15);
    }

    #[test]
    fn zero_surfaces_evaluate_to_zero() {
        let p = LQParams {
            q: 0.0,
            eps: 0.0,
            c: 0.0,
            horizon: 1.0,
            tau: 0.25,
            sigma: 0.5,
        };
        let grid = SolverGrid::with_tau_steps(&p, 4).unwrap();
        let s = solve_f_system(&p, &grid, CrossFactor::One).unwrap();
        let z = random_history(0.5, p.tau, grid.dt, grid.n_theta, 11);
        assert_eq!(s.value(0.5, 1.3, &z).unwrap(), 0.0);
        let d = s.derivatives(0.5, 1.3, &z).unwrap();
        assert_eq!((d.dx, d.dxx, d.dt_removed), (0.0, 0.0, 0.0));
        assert_eq!(s.feedback_control(0.5, 1.3, &z).unwrap(), 0.0);
        assert_eq!(s.hjb_residual(0.5, 1.3, &z).unwrap(), 0.0);
    }

    #[test]
    fn second_state_derivative_is_f0_independent_of_the_point() {
        let s = solved(5);
        let t = 0.4;
        let k = s.grid.time_index(t).unwrap();
        for seed in 0..3 {
            let z = random_history(t, s.params.tau, s.grid.dt, s.grid.n_theta, seed);
            for y in [-2.0, 0.3] {
                let d = s.derivatives(t, y, &z).unwrap();
                assert_eq!(d.dxx, s.f0[k]);
            }
        }
    }

    #[test]
    fn state_derivatives_match_the_functional_calculus_oracle() {
        // treat V as a functional of the state path (it reads only the last
        // value) and compare against the finite-difference machinery
        let s = solved(5);
        let t = 0.5;
        let z = random_history(t, s.params.tau, s.grid.dt, s.grid.n_theta, 9);
        let f = |p: &SampledPath| s.value(t, p.last_scalar(), &z).unwrap();
        let steps = (t / s.grid.dt).round() as usize;
        let state = SampledPath::scalar(
            0.0,
            s.grid.dt,
            (0..=steps).map(|k| 0.8 + 0.001 * k as f64).collect(),
        )
        .unwrap();
        let y = state.last_scalar();
        let d = s.derivatives(t, y, &z).unwrap();
        let h = 1e-5;
        assert_abs_diff_eq!(delta_x(&f, &state, Some(h)).unwrap().value, d.dx, epsilon = 1e-8);
        assert_abs_diff_eq!(delta_xx(&f, &state, Some(h)).unwrap().value, d.dxx, epsilon = 1e-4);
    }

    #[test]
    fn removed_time_derivative_matches_a_sliding_window_difference() {
        // extend the control path by zero past t (the zeroed current slot),
        // slide the window one step, and difference V in t directly
        let s = solved(20);
        let dt = s.grid.dt;
        let t = 0.5;
        let z = random_history(t, s.params.tau, dt, s.grid.n_theta, 9);
        let y = 0.8;
        let d = s.derivatives(t, y, &z).unwrap();
        let w = s.history_window(t, &z).unwrap();
        let extended: Vec<f64> = w.iter().copied().chain([0.0, 0.0]).collect();
        let zz = SampledPath::scalar(t - s.params.tau, dt, extended).unwrap();
        let fd = (s.value(t + dt, y, &zz).unwrap() - s.value(t, y, &zz).unwrap()) / dt;
        // both sides approximate the same derivative to first order
        assert_abs_diff_eq!(fd, d.dt_removed, epsilon = 20.0 * dt);
    }

    #[test]
    fn feedback_minimizes_the_action_expression_on_a_fine_grid() {
        let s = solved(5);
        let t = 0.5;
        let z = random_history(t, s.params.tau, s.grid.dt, s.grid.n_theta, 21);
        let y = 0.7;
        let a_hat = s.feedback_control(t, y, &z).unwrap();
        let alphas: Vec<f64> = (0..=20_000).map(|i| -10.0 + i as f64 * 1e-3).collect();
        let (min_val, argmin) = s.minimize_hamiltonian(t, y, &z, &alphas).unwrap();
        assert!(
            (argmin - a_hat).abs() <= 1e-3 + 1e-12,
            "grid argmin {argmin} vs feedback {a_hat}"
        );
        // quadratic structure: the grid minimum sits within grid tolerance of
        // the value at the exact minimizer
        let (at_hat, _) = s.minimize_hamiltonian(t, y, &z, &[a_hat]).unwrap();
        assert!(min_val >= at_hat - 1e-12);
        assert!(min_val - at_hat <= 1e-6);
        // singleton grid evaluates, no minimization
        let (v1, a1) = s.minimize_hamiltonian(t, y, &z, &[2.5]).unwrap();
        assert_eq!(a1, 2.5);
        assert!(v1 >= at_hat - 1e-12);
    }

    #[test]
    fn pure_state_feedback_without_history() {
        let s = solved(5);
        let t = 0.3;
        let k = s.grid.time_index(t).unwrap();
        let m = s.grid.n_theta - 1;
        let z = SampledPath::zeros(t - s.params.tau, s.grid.dt, s.grid.n_theta).unwrap();
        let y = -1.1;
        let expect = -(s.f0[k] + s.f1_at(k, m) + s.params.q) * y;
        assert_abs_diff_eq!(s.feedback_control(t, y, &z).unwrap(), expect, epsilon = 1e-15);
    }

    #[test]
    fn residual_ladder_selects_the_full_cross_term() {
        let p = demo_params();
        let sel = select_cross_factor(&p, &[5, 10, 20], 25, 42).unwrap();
        assert_eq!(sel.chosen, CrossFactor::One);
        assert!(sel.one_slope >= 0.9, "slope {}", sel.one_slope);
        // the halved variant stalls: essentially no decay under refinement
        assert!(sel.half_slope < 0.5, "half slope {}", sel.half_slope);
    }

    #[test]
    fn hjb_residual_requires_an_interior_time() {
        let s = solved(5);
        let z = SampledPath::zeros(-s.params.tau, s.grid.dt, s.grid.n_theta).unwrap();
        assert!(s.hjb_residual(0.0, 1.0, &z).is_err());
        let z_end = SampledPath::zeros(
            s.params.horizon - s.params.tau,
            s.grid.dt,
            s.grid.n_theta,
        )
        .unwrap();
        assert!(s.hjb_residual(s.params.horizon, 1.0, &z_end).is_err());
    }

    #[test]
    fn grid_rejects_steps_that_do_not_divide_tau() {
        let p = demo_params();
        assert!(SolverGrid::new(&p, 0.03).is_err());
        assert!(SolverGrid::new(&p, 0.01).is_ok());
    }
}
