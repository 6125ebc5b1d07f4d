//! The symmetric N-player delayed game.
//!
//! Each player `i` steers `dx^i = (a^i_t - a^i_{t-tau}) dt + sigma dw^i`
//! with an independent noise and pays
//! `(a^i)²/2 - q a^i (x̄ - x^i) + (eps/2)(x̄ - x^i)²` plus the terminal cost
//! `(c/2)(x̄_T - x^i_T)²`, so everything is driven by the deviation of a
//! player from the population mean. The value of player `i` takes the same
//! quadratic form as the single-agent problem, written in the deviation
//! variables `D = x̄ - x^i` and `W_θ = z̄_θ - z^i_θ`:
//!
//! ```text
//! V^i = E0(t) D²/2 + D ∫ E1(t,θ) W_θ dθ + ∬ E2(t,θ1,θ2) W W + E3(t).
//! ```
//!
//! Matching monomials in `(D, W)` after substituting this ansatz and the
//! equilibrium feedback into the game HJB equation yields the same
//! transport/Riccati structure as the single-agent system with every
//! feedback gain relaxed by `nu = 1 - 1/N` (a player moves the mean along
//! with itself), which is exactly the `nu`-parameterised march of
//! [`crate::lq`]. `docs/game-coefficients.md` in the repository walks
//! through the matching; the solver does not take the derivation on faith —
//! [`game_hjb_residual`] re-evaluates the equation independently, and the
//! deviation tests of [`nash_deviation_check`] probe the equilibrium by
//! simulation.
//!
//! The equilibrium feedback that comes out of the first-order condition is
//!
//! ```text
//! â^i = [q + nu (E0 + E1(t,0))] D^i + nu ∫ (E1 + 2 E2(·,0)) W^i dθ,
//! ```
//!
//! which converges to the single-agent law in the deviation variables as
//! `N → ∞` (the coefficient systems converge along with it).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lq::{
    march_backward, BackwardSystem, CrossFactor, LQParams, LadderRow, SolverGrid, Surfaces,
};
use crate::path::SampledPath;
use crate::report::{CostEstimate, DominanceFlags, NashReport, PolicyEstimate};

/// Problem data of the symmetric game: the scalar coefficients shared by
/// all players plus the player count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GameParams {
    pub n_players: usize,
    pub q: f64,
    pub eps: f64,
    pub c: f64,
    pub horizon: f64,
    pub tau: f64,
    pub sigma: f64,
}

impl GameParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_players < 2 {
            return Err(Error::InvalidParameter(
                "the game needs at least two players".into(),
            ));
        }
        self.scalar().validate()
    }

    /// The scalar problem data without the player count.
    pub fn scalar(&self) -> LQParams {
        LQParams {
            q: self.q,
            eps: self.eps,
            c: self.c,
            horizon: self.horizon,
            tau: self.tau,
            sigma: self.sigma,
        }
    }

    /// Gain relaxation `1 - 1/N`.
    pub fn nu(&self) -> f64 {
        1.0 - 1.0 / self.n_players as f64
    }
}

/// Solved game coefficients on the shared grid layout.
#[derive(Debug, Clone)]
pub struct GameSurfaces {
    pub params: GameParams,
    pub grid: SolverGrid,
    pub cross_factor: CrossFactor,
    pub e0: Vec<f64>,
    pub e1: Vec<f64>,
    pub e2: Vec<f64>,
    pub e3: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Solve the game coefficient system.
pub fn solve_e_system(
    params: &GameParams,
    grid: &SolverGrid,
    cross_factor: CrossFactor,
) -> Result<GameSurfaces> {
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
        nu: params.nu(),
        cross: cross_factor.value(),
    };
    let data = march_backward(&sys, grid)?;
    Ok(GameSurfaces {
        params: *params,
        grid: *grid,
        cross_factor,
        e0: data.f0,
        e1: data.f1,
        e2: data.f2,
        e3: data.f3,
        warnings,
    })
}

impl GameSurfaces {
    #[inline]
    pub fn e1_at(&self, k: usize, j: usize) -> f64 {
        self.e1[k * self.grid.n_theta + j]
    }

    #[inline]
    pub fn e2_at(&self, k: usize, j: usize, l: usize) -> f64 {
        self.e2[(k * self.grid.n_theta + j) * self.grid.n_theta + l]
    }

    pub fn max_abs(&self) -> f64 {
        self.e0
            .iter()
            .chain(&self.e1)
            .chain(&self.e2)
            .chain(&self.e3)
            .fold(0.0_f64, |a, v| a.max(v.abs()))
    }

    pub fn symmetry_defect(&self) -> f64 {
        let nth = self.grid.n_theta;
        let mut worst = 0.0_f64;
        for k in 0..self.grid.n_t {
            for j in 0..nth {
                for l in 0..j {
                    worst = worst.max((self.e2_at(k, j, l) - self.e2_at(k, l, j)).abs());
                }
            }
        }
        worst
    }

    /// Sup-norm gap to single-agent surfaces on the same grid.
    pub fn gap_to_single(&self, s: &Surfaces) -> Result<f64> {
        if self.grid != s.grid {
            return Err(Error::IncompatiblePaths(
                "gap comparison needs a shared grid".into(),
            ));
        }
        let sup = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .fold(0.0_f64, |acc, (x, y)| acc.max((x - y).abs()))
        };
        Ok(sup(&self.e0, &s.f0)
            .max(sup(&self.e1, &s.f1))
            .max(sup(&self.e2, &s.f2))
            .max(sup(&self.e3, &s.f3)))
    }

    /// Deviation samples `W^i(θ_j) = z̄(θ_j) - z^i(θ_j)` on the delay
    /// window, one row per player, `n_theta - 1` left nodes each.
    fn deviation_windows(&self, t: f64, controls: &[SampledPath]) -> Result<Vec<Vec<f64>>> {
        let n = controls.len();
        let m = self.grid.n_theta - 1;
        let dt = self.grid.dt;
        let mut per_player = vec![vec![0.0; m]; n];
        for j in 0..m {
            let time = t - self.params.tau + j as f64 * dt;
            let mut mean = 0.0;
            for (i, z) in controls.iter().enumerate() {
                let v = z.sample_scalar(time)?;
                per_player[i][j] = v;
                mean += v;
            }
            mean /= n as f64;
            for row in per_player.iter_mut() {
                row[j] = mean - row[j];
            }
        }
        Ok(per_player)
    }

    /// The value functional of one player at the current states and control
    /// histories.
    pub fn value(&self, player: usize, t: f64, states: &[f64], controls: &[SampledPath]) -> Result<f64> {
        self.check_shapes(player, states.len(), controls.len())?;
        let k = self.grid.time_index(t)?;
        let w = &self.deviation_windows(t, controls)?[player];
        let dev = mean(states) - states[player];
        let dt = self.grid.dt;
        let m = w.len();
        let mut lin = 0.0;
        for j in 0..m {
            lin += self.e1_at(k, j) * w[j];
        }
        let mut quad = 0.0;
        for j in 0..m {
            for l in 0..m {
                quad += self.e2_at(k, j, l) * w[j] * w[l];
            }
        }
        Ok(self.e0[k] * dev * dev / 2.0 + dev * lin * dt + quad * dt * dt + self.e3[k])
    }

    fn check_shapes(&self, player: usize, n_states: usize, n_controls: usize) -> Result<()> {
        let n = self.params.n_players;
        if player >= n {
            return Err(Error::InvalidParameter(format!(
                "player index {player} out of range for {n} players"
            )));
        }
        if n_states != n || n_controls != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: n_states.max(n_controls),
            });
        }
        Ok(())
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Equilibrium feedback actions of all players at once (the per-player
/// deviation windows share the mean computation).
pub fn equilibrium_actions(
    s: &GameSurfaces,
    t: f64,
    states: &[f64],
    controls: &[SampledPath],
) -> Result<Vec<f64>> {
    s.check_shapes(0, states.len(), controls.len())?;
    let k = s.grid.time_index(t)?;
    let nu = s.params.nu();
    let m = s.grid.n_theta - 1;
    let dt = s.grid.dt;
    let gain = s.params.q + nu * (s.e0[k] + s.e1_at(k, m));
    let windows = s.deviation_windows(t, controls)?;
    let y_bar = mean(states);
    let mut out = Vec::with_capacity(states.len());
    for (i, w) in windows.iter().enumerate() {
        let mut hist = 0.0;
        for j in 0..m {
            hist += (s.e1_at(k, j) + 2.0 * s.e2_at(k, j, m)) * w[j];
        }
        out.push(gain * (y_bar - states[i]) + nu * hist * dt);
    }
    Ok(out)
}

/// Equilibrium feedback action of a single player.
pub fn game_feedback(
    s: &GameSurfaces,
    player: usize,
    t: f64,
    states: &[f64],
    controls: &[SampledPath],
) -> Result<f64> {
    s.check_shapes(player, states.len(), controls.len())?;
    Ok(equilibrium_actions(s, t, states, controls)?[player])
}

/// Pointwise defect of the game HJB equation for one player at an interior
/// node, with every other player following the equilibrium feedback and all
/// coefficient derivatives taken from the stored grids. Zero for the exact
/// solution.
pub fn game_hjb_residual(
    s: &GameSurfaces,
    player: usize,
    t: f64,
    states: &[f64],
    controls: &[SampledPath],
) -> Result<f64> {
    s.check_shapes(player, states.len(), controls.len())?;
    let k = s.grid.time_index(t)?;
    if k == 0 || k == s.grid.n_t - 1 {
        return Err(Error::InvalidParameter(format!(
            "game HJB residual needs an interior time, got t = {t}"
        )));
    }
    let n = s.params.n_players;
    let p = &s.params;
    let dt = s.grid.dt;
    let m = s.grid.n_theta - 1;

    // view the stored grids through the single-agent stencils
    let view = Surfaces {
        params: p.scalar(),
        grid: s.grid,
        cross_factor: s.cross_factor,
        f0: s.e0.clone(),
        f1: s.e1.clone(),
        f2: s.e2.clone(),
        f3: s.e3.clone(),
        warnings: Vec::new(),
    };

    let windows = s.deviation_windows(t, controls)?;
    let w = &windows[player];
    let y_bar = mean(states);
    let dev = y_bar - states[player];
    let actions = equilibrium_actions(s, t, states, controls)?;
    let a_i = actions[player];
    let a_bar = mean(&actions);

    // time derivative of the ansatz with the current-control slot zeroed,
    // from finite differences of the stored grids
    let mut adv1 = 0.0;
    let mut bnd2 = 0.0;
    let mut adv2 = 0.0;
    for j in 0..m {
        adv1 += view.f1_transport(k, j) * w[j];
        bnd2 += s.e2_at(k, j, 0) * w[j];
        for l in 0..m {
            adv2 += view.f2_transport(k, j, l) * w[j] * w[l];
        }
    }
    let w_tau = w.first().copied().unwrap_or(0.0);
    let dt_zeroed = view.f0_prime(k) * dev * dev / 2.0
        + dev * (-s.e1_at(k, 0) * w_tau + adv1 * dt)
        - 2.0 * w_tau * bnd2 * dt
        + adv2 * dt * dt
        + view.f3_prime(k);

    // the slot terms the substitution restores: the current-control entries
    // of the time derivative evaluated at the equilibrium actions
    let mut slot_hist = 0.0;
    for j in 0..m {
        slot_hist += s.e2_at(k, j, m) * w[j];
    }
    let slot = (a_bar - a_i) * (dev * s.e1_at(k, m) + 2.0 * slot_hist * dt);

    // diffusion and drift sums over all players
    let p_grad = {
        let mut lin = 0.0;
        for j in 0..m {
            lin += s.e1_at(k, j) * w[j];
        }
        s.e0[k] * dev + lin * dt
    };
    let inv_n = 1.0 / n as f64;
    let mut diffusion = 0.0;
    let mut drift = 0.0;
    for j_pl in 0..n {
        let grad_coeff = inv_n - if j_pl == player { 1.0 } else { 0.0 };
        diffusion += 0.5 * p.sigma * p.sigma * grad_coeff * grad_coeff * s.e0[k];
        let delayed = controls[j_pl].sample_scalar(t - p.tau)?;
        drift += (actions[j_pl] - delayed) * grad_coeff * p_grad;
    }

    let cost = 0.5 * a_i * a_i - p.q * a_i * dev + 0.5 * p.eps * dev * dev;
    Ok(dt_zeroed + slot + diffusion + drift + cost)
}

/// How the probed player deviates from the equilibrium feedback.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Deviation {
    /// No deviation: play the equilibrium feedback itself.
    Equilibrium,
    Zero,
    Constant(f64),
    /// Equilibrium action plus a constant.
    Shift(f64),
    /// Equilibrium action times a constant.
    Scale(f64),
}

impl Deviation {
    pub fn label(&self) -> String {
        match self {
            Deviation::Equilibrium => "equilibrium".into(),
            Deviation::Zero => "zero".into(),
            Deviation::Constant(a) => format!("constant({a})"),
            Deviation::Shift(d) => format!("equilibrium{d:+}"),
            Deviation::Scale(f) => format!("{f}*equilibrium"),
        }
    }

    fn apply(&self, equilibrium_action: f64) -> f64 {
        match self {
            Deviation::Equilibrium => equilibrium_action,
            Deviation::Zero => 0.0,
            Deviation::Constant(a) => *a,
            Deviation::Shift(d) => equilibrium_action + d,
            Deviation::Scale(f) => equilibrium_action * f,
        }
    }
}

/// Batch configuration of a game simulation: initial states per player,
/// zero control pre-histories.
#[derive(Debug, Clone)]
pub struct GameSimConfig {
    pub n_paths: usize,
    pub seed: u64,
    pub dt_sim: f64,
    pub y0: Vec<f64>,
}

/// Simulate the N-player system with player `player` substituting the given
/// deviation for its equilibrium action; everyone else stays on the
/// feedback. Returns player `player`'s realised costs.
pub fn simulate_deviation_costs(
    s: &GameSurfaces,
    cfg: &GameSimConfig,
    player: usize,
    deviation: Deviation,
) -> Result<Vec<f64>> {
    let p = s.params;
    p.validate()?;
    let n = p.n_players;
    if cfg.y0.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: cfg.y0.len(),
        });
    }
    if player >= n {
        return Err(Error::InvalidParameter(format!(
            "player index {player} out of range"
        )));
    }
    let scalar = p.scalar();
    let probe = crate::sim::SimConfig {
        n_paths: cfg.n_paths,
        seed: cfg.seed,
        dt_sim: cfg.dt_sim,
        y0: 0.0,
        z_hist: None,
    };
    let (steps, delay) = probe.layout(&scalar)?;
    let dt = cfg.dt_sim;
    let sqrt_dt = dt.sqrt();

    crate::sim::batch(cfg.n_paths, |path_id| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(path_id as u64);
        let mut states = cfg.y0.clone();
        let mut controls: Vec<SampledPath> = (0..n)
            .map(|_| SampledPath::zeros(-p.tau, dt, delay))
            .collect::<Result<_>>()?;
        let mut cost = 0.0;
        for k in 0..steps {
            let t = k as f64 * dt;
            let mut actions = equilibrium_actions(s, t, &states, &controls)?;
            actions[player] = deviation.apply(actions[player]);
            let dev = mean(&states) - states[player];
            let a_i = actions[player];
            if !a_i.is_finite() {
                return Err(Error::BlowUp {
                    t,
                    what: format!("deviation '{}' produced a non-finite action", deviation.label()),
                });
            }
            cost += dt * (0.5 * a_i * a_i - p.q * a_i * dev + 0.5 * p.eps * dev * dev);
            for (i, z) in controls.iter_mut().enumerate() {
                z.push_scalar(actions[i]);
            }
            for i in 0..n {
                let delayed = controls[i].sample_scalar(t - p.tau)?;
                let noise: f64 = StandardNormal.sample(&mut rng);
                states[i] += (actions[i] - delayed) * dt + p.sigma * sqrt_dt * noise;
                if !states[i].is_finite() {
                    return Err(Error::BlowUp {
                        t,
                        what: format!("state of player {i} left the representable range"),
                    });
                }
            }
        }
        let dev_t = mean(&states) - states[player];
        Ok(cost + 0.5 * p.c * dev_t * dev_t)
    })
}

/// Monte Carlo Nash check: every unilateral deviation of one player must
/// cost at least the equilibrium up to statistical noise, and the
/// equilibrium cost must match the solved value of that player.
pub fn nash_deviation_check(
    s: &GameSurfaces,
    cfg: &GameSimConfig,
    player: usize,
    deviations: &[Deviation],
) -> Result<NashReport> {
    if deviations.is_empty() {
        return Err(Error::InvalidParameter(
            "the Nash check needs at least one deviation".into(),
        ));
    }
    let delay = crate::path::grid_multiple(s.params.tau, cfg.dt_sim)
        .filter(|&m| m >= 1)
        .ok_or_else(|| {
            Error::GridAlignment(format!(
                "dt_sim = {} does not divide tau = {}",
                cfg.dt_sim, s.params.tau
            ))
        })? as usize;
    let controls_zero: Vec<SampledPath> = (0..s.params.n_players)
        .map(|_| SampledPath::zeros(-s.params.tau, cfg.dt_sim, delay))
        .collect::<Result<_>>()?;
    let v = s.value(player, 0.0, &cfg.y0, &controls_zero)?;
    let eq_costs = simulate_deviation_costs(s, cfg, player, Deviation::Equilibrium)?;
    let eq = CostEstimate::from_samples(&eq_costs);
    let mut estimates = vec![PolicyEstimate::new(Deviation::Equilibrium.label(), eq)];
    let mut others = Vec::with_capacity(deviations.len());
    for d in deviations {
        let est =
            CostEstimate::from_samples(&simulate_deviation_costs(s, cfg, player, *d)?);
        others.push(est);
        estimates.push(PolicyEstimate::new(d.label(), est));
    }
    let value_match = (eq.mean - v).abs() <= 3.0 * eq.stderr;
    let dominance: Vec<bool> = others
        .iter()
        .map(|r| r.mean >= eq.mean - 2.0 * eq.combined_stderr(r))
        .collect();
    let strictly_worse = others
        .iter()
        .filter(|r| r.mean - eq.mean > 3.0 * eq.combined_stderr(r))
        .count();
    let pass = value_match && dominance.iter().all(|&d| d);
    Ok(NashReport {
        v,
        player,
        n_players: s.params.n_players,
        estimates,
        flags: DominanceFlags {
            value_match,
            dominance,
            strictly_worse,
            pass,
        },
        seed: cfg.seed,
        params: s.params.scalar(),
        grid: s.grid,
    })
}

/// A grid-independent residual probe for the game: one state value and one
/// smooth control history per player, a shared time fraction, and the
/// player whose equation is evaluated.
#[derive(Debug, Clone)]
pub struct GameResidualProbe {
    pub player: usize,
    pub members: Vec<crate::lq::ResidualProbe>,
    pub t_frac: f64,
}

impl GameResidualProbe {
    pub fn set(n_players: usize, count: usize, seed: u64) -> Vec<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let members: Vec<_> = (0..n_players)
                    .map(|_| crate::lq::ResidualProbe::draw(&mut rng))
                    .collect();
                Self {
                    player: rng.random_range(0..n_players),
                    t_frac: members[0].t_frac,
                    members,
                }
            })
            .collect()
    }
}

/// Max game HJB residual over a fixed probe set for one solve.
pub fn max_game_residual_over_probes(
    s: &GameSurfaces,
    probes: &[GameResidualProbe],
) -> Result<f64> {
    let grid = &s.grid;
    let mut worst = 0.0_f64;
    for probe in probes {
        let k = ((probe.t_frac * (grid.n_t - 1) as f64).round() as usize)
            .clamp(1, grid.n_t - 2);
        let t = grid.time(k);
        let states: Vec<f64> = probe.members.iter().map(|m| m.y).collect();
        let controls: Vec<SampledPath> = probe
            .members
            .iter()
            .map(|m| m.history_on(grid, s.params.tau, t))
            .collect::<Result<_>>()?;
        worst = worst.max(game_hjb_residual(s, probe.player, t, &states, &controls)?.abs());
    }
    Ok(worst)
}

/// Residual refinement ladder for the game system.
pub fn game_residual_ladder(
    params: &GameParams,
    cross: CrossFactor,
    fractions: &[usize],
    probes: usize,
    seed: u64,
) -> Result<(Vec<LadderRow>, f64)> {
    let probe_set = GameResidualProbe::set(params.n_players, probes, seed);
    let mut rows = Vec::with_capacity(fractions.len());
    for &frac in fractions {
        let grid = SolverGrid::with_tau_steps(&params.scalar(), frac)?;
        let s = solve_e_system(params, &grid, cross)?;
        rows.push(LadderRow {
            dt: grid.dt,
            max_residual: max_game_residual_over_probes(&s, &probe_set)?,
        });
    }
    let slope = crate::lq::loglog_slope(&rows);
    Ok((rows, slope))
}
