//! Monte Carlo machinery for the delayed controlled diffusion
//! `dx_t = (a_t - a_{t-tau}) dt + sigma dw_t`.
//!
//! Paths are advanced by Euler–Maruyama on a uniform grid; the running cost
//! `z²/2 + q z y + (eps/2) y²` accrues by left-endpoint sums and the
//! terminal cost is `c y²/2`. Every path owns a counter-based RNG substream
//! derived from the batch seed, and batch results are collected in path
//! order and reduced sequentially, so estimates are bit-identical for a
//! given seed no matter how many worker threads run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::lq::{LQParams, Surfaces};
use crate::path::{grid_multiple, SampledPath};
use crate::report::{CostEstimate, DominanceFlags, DppReport, PolicyEstimate, VerificationReport};

/// Batch configuration: path count, seed, simulation step, initial state,
/// and an optional control pre-history on `[-tau, 0)` (empty means zero).
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub n_paths: usize,
    pub seed: u64,
    pub dt_sim: f64,
    pub y0: f64,
    pub z_hist: Option<SampledPath>,
}

impl SimConfig {
    /// Validates against the problem data and returns
    /// `(steps to the horizon, steps across the delay window)`.
    pub fn layout(&self, params: &LQParams) -> Result<(usize, usize)> {
        if self.n_paths == 0 {
            return Err(Error::InvalidParameter("n_paths must be >= 1".into()));
        }
        let delay = grid_multiple(params.tau, self.dt_sim)
            .filter(|&m| m >= 1)
            .ok_or_else(|| {
                Error::GridAlignment(format!(
                    "dt_sim = {} does not divide tau = {}",
                    self.dt_sim, params.tau
                ))
            })?;
        let steps = grid_multiple(params.horizon, self.dt_sim)
            .filter(|&m| m >= 1)
            .ok_or_else(|| {
                Error::GridAlignment(format!(
                    "dt_sim = {} does not divide the horizon {}",
                    self.dt_sim, params.horizon
                ))
            })?;
        if let Some(h) = &self.z_hist {
            let ok = h.dim() == 1
                && h.len() == delay as usize
                && (h.t0() + params.tau).abs() <= 1e-9 * params.tau
                && (h.dt() - self.dt_sim).abs() <= 1e-12 * self.dt_sim;
            if !ok {
                return Err(Error::IncompatiblePaths(format!(
                    "control pre-history must hold {delay} scalar nodes on [-tau, 0) \
                     with step dt_sim"
                )));
            }
        }
        Ok((steps as usize, delay as usize))
    }

    /// The pre-history as a concrete path (zeros when none was given).
    pub fn history_path(&self, params: &LQParams) -> Result<SampledPath> {
        let (_, delay) = self.layout(params)?;
        match &self.z_hist {
            Some(h) => Ok(h.clone()),
            None => SampledPath::zeros(-params.tau, self.dt_sim, delay),
        }
    }
}

/// A feedback rule `(t, state history, control history) -> action`. The
/// histories passed to `action` end at the decision time, so a policy can
/// only read the past; asking for later nodes raises an error instead of
/// extrapolating.
pub trait ControlPolicy: Sync {
    fn action(&self, t: f64, states: &SampledPath, controls: &SampledPath) -> Result<f64>;
    fn label(&self) -> String;
}

pub struct ZeroPolicy;

impl ControlPolicy for ZeroPolicy {
    fn action(&self, _: f64, _: &SampledPath, _: &SampledPath) -> Result<f64> {
        Ok(0.0)
    }

    fn label(&self) -> String {
        "zero".into()
    }
}

pub struct ConstantPolicy(pub f64);

impl ControlPolicy for ConstantPolicy {
    fn action(&self, _: f64, _: &SampledPath, _: &SampledPath) -> Result<f64> {
        Ok(self.0)
    }

    fn label(&self) -> String {
        format!("constant({})", self.0)
    }
}

/// The feedback law evaluated from solved surfaces.
pub struct FeedbackPolicy<'a> {
    pub surfaces: &'a Surfaces,
}

impl ControlPolicy for FeedbackPolicy<'_> {
    fn action(&self, t: f64, states: &SampledPath, controls: &SampledPath) -> Result<f64> {
        self.surfaces.feedback_control(t, states.last_scalar(), controls)
    }

    fn label(&self) -> String {
        "feedback".into()
    }
}

/// Base policy plus a constant shift.
pub struct ShiftedPolicy<P> {
    pub base: P,
    pub shift: f64,
}

impl<P: ControlPolicy> ControlPolicy for ShiftedPolicy<P> {
    fn action(&self, t: f64, states: &SampledPath, controls: &SampledPath) -> Result<f64> {
        Ok(self.base.action(t, states, controls)? + self.shift)
    }

    fn label(&self) -> String {
        format!("{}{:+}", self.base.label(), self.shift)
    }
}

/// Base policy scaled by a constant factor.
pub struct ScaledPolicy<P> {
    pub base: P,
    pub factor: f64,
}

impl<P: ControlPolicy> ControlPolicy for ScaledPolicy<P> {
    fn action(&self, t: f64, states: &SampledPath, controls: &SampledPath) -> Result<f64> {
        Ok(self.base.action(t, states, controls)? * self.factor)
    }

    fn label(&self) -> String {
        format!("{}*{}", self.factor, self.base.label())
    }
}

/// The RNG substream of one path: same seed, distinct stream counter.
pub fn path_rng(seed: u64, path_id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path_id as u64);
    rng
}

/// Map `f` over path indices sequentially (the fallback that is always
/// compiled).
pub fn batch_sequential<F>(n: usize, f: F) -> Result<Vec<f64>>
where
    F: Fn(usize) -> Result<f64> + Sync,
{
    (0..n).map(f).collect()
}

/// Map `f` over path indices, data-parallel when the `parallel` feature is
/// enabled. Results come back in path order either way.
pub fn batch<F>(n: usize, f: F) -> Result<Vec<f64>>
where
    F: Fn(usize) -> Result<f64> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        batch_sequential(n, f)
    }
}

/// One realised trajectory: the state on `[0, k·dt]`, the control on
/// `[-tau, (k-1)·dt]`, and the running cost accrued so far.
pub struct PathRun {
    pub state: SampledPath,
    pub control: SampledPath,
    pub running_cost: f64,
}

/// Advance one path for `steps` steps under the given policy.
pub fn run_path<P: ControlPolicy + ?Sized>(
    policy: &P,
    params: &LQParams,
    cfg: &SimConfig,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PathRun> {
    let dt = cfg.dt_sim;
    let sqrt_dt = dt.sqrt();
    let mut state = SampledPath::scalar(0.0, dt, vec![cfg.y0])?;
    let mut control = cfg.history_path(params)?;
    let mut running = 0.0;
    let mut x = cfg.y0;
    for k in 0..steps {
        let t = k as f64 * dt;
        let a = policy.action(t, &state, &control)?;
        if !a.is_finite() {
            return Err(Error::BlowUp {
                t,
                what: format!("policy '{}' produced a non-finite action", policy.label()),
            });
        }
        control.push_scalar(a);
        let delayed = control.sample_scalar(t - params.tau)?;
        running += dt * (0.5 * a * a + params.q * a * x + 0.5 * params.eps * x * x);
        let noise: f64 = StandardNormal.sample(rng);
        x += (a - delayed) * dt + params.sigma * sqrt_dt * noise;
        if !x.is_finite() {
            return Err(Error::BlowUp {
                t,
                what: "state left the representable range".into(),
            });
        }
        state.push_scalar(x);
    }
    Ok(PathRun {
        state,
        control,
        running_cost: running,
    })
}

/// Per-path total costs (running plus terminal) under a policy.
pub fn simulate_costs<P: ControlPolicy + ?Sized>(
    policy: &P,
    params: &LQParams,
    cfg: &SimConfig,
) -> Result<Vec<f64>> {
    params.validate()?;
    let (steps, _) = cfg.layout(params)?;
    batch(cfg.n_paths, |i| {
        let mut rng = path_rng(cfg.seed, i);
        let run = run_path(policy, params, cfg, steps, &mut rng)?;
        let x_t = run.state.last_scalar();
        Ok(run.running_cost + 0.5 * params.c * x_t * x_t)
    })
}

/// Monte Carlo estimate of the cost functional under a policy.
pub fn simulate_cost<P: ControlPolicy + ?Sized>(
    policy: &P,
    params: &LQParams,
    cfg: &SimConfig,
) -> Result<CostEstimate> {
    Ok(CostEstimate::from_samples(&simulate_costs(policy, params, cfg)?))
}

fn dominance_flags(
    v: f64,
    optimal: &CostEstimate,
    others: &[CostEstimate],
) -> DominanceFlags {
    let value_match = (optimal.mean - v).abs() <= 3.0 * optimal.stderr;
    let dominance: Vec<bool> = others
        .iter()
        .map(|r| r.mean >= optimal.mean - 2.0 * optimal.combined_stderr(r))
        .collect();
    let strictly_worse = others
        .iter()
        .filter(|r| r.mean - optimal.mean > 3.0 * optimal.combined_stderr(r))
        .count();
    let pass = value_match && dominance.iter().all(|&d| d);
    DominanceFlags {
        value_match,
        dominance,
        strictly_worse,
        pass,
    }
}

/// Compare the feedback policy against rivals: the feedback cost must match
/// the solved value within `3·stderr` and every rival must cost at least as
/// much up to `2·combined stderr`. All policies share the seed (common
/// random numbers).
pub fn verification_check(
    s: &Surfaces,
    params: &LQParams,
    cfg: &SimConfig,
    rivals: &[&dyn ControlPolicy],
) -> Result<VerificationReport> {
    if rivals.is_empty() {
        return Err(Error::InvalidParameter(
            "verification needs at least one rival policy".into(),
        ));
    }
    let hist = cfg.history_path(params)?;
    let v = s.value(0.0, cfg.y0, &hist)?;
    let feedback = FeedbackPolicy { surfaces: s };
    let optimal = simulate_cost(&feedback, params, cfg)?;
    let mut estimates = vec![PolicyEstimate::new(feedback.label(), optimal)];
    let mut rival_ests = Vec::with_capacity(rivals.len());
    for r in rivals {
        let est = simulate_cost(*r, params, cfg)?;
        rival_ests.push(est);
        estimates.push(PolicyEstimate::new(r.label(), est));
    }
    let flags = dominance_flags(v, &optimal, &rival_ests);
    Ok(VerificationReport {
        v,
        estimates,
        flags,
        seed: cfg.seed,
        params: *params,
        grid: s.grid,
    })
}

/// The standard rival set used by the verification pipeline.
pub fn default_rivals(s: &Surfaces) -> Vec<Box<dyn ControlPolicy + '_>> {
    vec![
        Box::new(ZeroPolicy),
        Box::new(ShiftedPolicy {
            base: FeedbackPolicy { surfaces: s },
            shift: 0.5,
        }),
        Box::new(ScaledPolicy {
            base: FeedbackPolicy { surfaces: s },
            factor: 1.2,
        }),
        Box::new(ConstantPolicy(1.0)),
    ]
}

/// Nested estimate `E[V(X_u, Z_u) + ∫_0^u f]` for each bridge policy
/// steering `[0, u]`; the solved value takes over at `u`. `bridges[0]` is
/// the reference bridge the others are compared against.
pub fn dpp_check(
    s: &Surfaces,
    params: &LQParams,
    cfg: &SimConfig,
    u: f64,
    bridges: &[&dyn ControlPolicy],
) -> Result<DppReport> {
    if bridges.is_empty() {
        return Err(Error::InvalidParameter(
            "the dynamic-programming check needs at least one bridge policy".into(),
        ));
    }
    let (steps, _) = cfg.layout(params)?;
    let u_steps = grid_multiple(u, cfg.dt_sim)
        .filter(|&m| (1..=steps as i64).contains(&m))
        .ok_or_else(|| {
            Error::GridAlignment(format!(
                "u = {u} is not a node of the simulation grid inside (0, T]"
            ))
        })? as usize;
    s.grid.time_index(u)?;
    let hist = cfg.history_path(params)?;
    let v = s.value(0.0, cfg.y0, &hist)?;
    let mut ests = Vec::with_capacity(bridges.len());
    for b in bridges {
        let samples = batch(cfg.n_paths, |i| {
            let mut rng = path_rng(cfg.seed, i);
            let run = run_path(*b, params, cfg, u_steps, &mut rng)?;
            Ok(run.running_cost + s.value(u, run.state.last_scalar(), &run.control)?)
        })?;
        ests.push(CostEstimate::from_samples(&samples));
    }
    let estimates = bridges
        .iter()
        .zip(&ests)
        .map(|(b, e)| PolicyEstimate::new(b.label(), *e))
        .collect();
    let flags = dominance_flags(v, &ests[0], &ests[1..]);
    Ok(DppReport {
        v,
        u,
        estimates,
        flags,
        seed: cfg.seed,
        params: *params,
        grid: s.grid,
    })
}

/// Exact optimum of the noiseless problem: with `sigma = 0` the discrete
/// cost is a convex quadratic in the control vector (the state is an affine
/// map of the controls through the delayed-difference drift), so the normal
/// equations solve it in one shot. Returns the optimum and the minimizing
/// control path. Intended as an independent check at modest grid sizes.
pub fn deterministic_oracle(
    params: &LQParams,
    cfg: &SimConfig,
) -> Result<(f64, SampledPath)> {
    params.validate()?;
    if params.sigma != 0.0 {
        return Err(Error::InvalidParameter(
            "the quadratic-program oracle needs sigma = 0".into(),
        ));
    }
    let (n, delay) = cfg.layout(params)?;
    if n > 400 {
        return Err(Error::InvalidParameter(format!(
            "oracle limited to 400 control unknowns, grid has {n}"
        )));
    }
    let h = cfg.dt_sim;
    let hist = cfg.history_path(params)?;

    // x_i = base_i + (P a)_i with P[i][j] = h on i-delay <= j < i
    let mut base = vec![cfg.y0; n + 1];
    for i in 1..=n {
        let mut acc = 0.0;
        for j in 0..i {
            if j < delay {
                acc += hist.sample_scalar((j as f64 - delay as f64) * h)?;
            }
        }
        base[i] = cfg.y0 - h * acc;
    }
    let mut p = nalgebra::DMatrix::<f64>::zeros(n + 1, n);
    for i in 0..=n {
        for j in i.saturating_sub(delay)..i.min(n) {
            p[(i, j)] = h;
        }
    }
    let p_run = p.rows(0, n).into_owned();
    let m_t = p.row(n).transpose().into_owned();
    let base_run = nalgebra::DVector::from_column_slice(&base[..n]);

    let mut a = nalgebra::DMatrix::<f64>::identity(n, n) * h;
    a += (&p_run + p_run.transpose()) * (params.q * h);
    a += p_run.transpose() * &p_run * (params.eps * h);
    a += &m_t * m_t.transpose() * params.c;
    let b = &base_run * (params.q * h)
        + p_run.transpose() * &base_run * (params.eps * h)
        + &m_t * (params.c * base[n]);

    let alpha = a
        .lu()
        .solve(&(-b))
        .ok_or_else(|| Error::Degenerate("singular normal equations in the oracle".into()))?;

    // roll the minimizer through the dynamics to price it independently of
    // the quadratic form assembly
    let mut x = cfg.y0;
    let mut cost = 0.0;
    for i in 0..n {
        let ai = alpha[i];
        cost += h * (0.5 * ai * ai + params.q * ai * x + 0.5 * params.eps * x * x);
        let past = if i < delay {
            hist.sample_scalar((i as f64 - delay as f64) * h)?
        } else {
            alpha[i - delay]
        };
        x += (ai - past) * h;
    }
    cost += 0.5 * params.c * x * x;

    let control = SampledPath::scalar(0.0, h, alpha.iter().copied().collect())?;
    Ok((cost, control))
}
