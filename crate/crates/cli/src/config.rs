//! JSON experiment configuration.
//!
//! Unknown keys are rejected so typos surface as config errors naming the
//! offending key, and every mode validates that the sections it needs are
//! present before any work starts.

use std::path::PathBuf;

use serde::Deserialize;

use pdc_core::game::{Deviation, GameParams};
use pdc_core::lq::{CrossFactor, LQParams, SolverGrid};
use pdc_core::path::SampledPath;
use pdc_core::sim::SimConfig;
use pdc_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrossPolicy {
    #[default]
    Auto,
    Half,
    One,
}

impl CrossPolicy {
    pub fn fixed(self) -> Option<CrossFactor> {
        match self {
            CrossPolicy::Auto => None,
            CrossPolicy::Half => Some(CrossFactor::Half),
            CrossPolicy::One => Some(CrossFactor::One),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsSection {
    pub q: f64,
    pub eps: f64,
    pub c: f64,
    pub horizon: f64,
    pub tau: f64,
    pub sigma: f64,
    #[serde(default)]
    pub n_players: Option<usize>,
}

impl ParamsSection {
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

    pub fn game(&self) -> Result<GameParams> {
        let n_players = self.n_players.ok_or_else(|| {
            Error::InvalidParameter("params.n_players is required for game mode".into())
        })?;
        Ok(GameParams {
            n_players,
            q: self.q,
            eps: self.eps,
            c: self.c,
            horizon: self.horizon,
            tau: self.tau,
            sigma: self.sigma,
        })
    }
}

/// Either an explicit step or a cell count per delay window.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default)]
    pub tau_steps: Option<usize>,
}

impl GridSection {
    pub fn build(&self, params: &LQParams) -> Result<SolverGrid> {
        match (self.dt, self.tau_steps) {
            (Some(dt), None) => SolverGrid::new(params, dt),
            (None, Some(steps)) => SolverGrid::with_tau_steps(params, steps),
            _ => Err(Error::InvalidParameter(
                "grid needs exactly one of 'dt' or 'tau_steps'".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathSpec {
    pub t0: f64,
    pub dt: f64,
    pub values: Vec<f64>,
}

impl PathSpec {
    pub fn build(&self) -> Result<SampledPath> {
        SampledPath::scalar(self.t0, self.dt, self.values.clone())
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicySpec {
    Feedback,
    Zero,
    Constant(f64),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub n_paths: usize,
    pub seed: u64,
    pub dt_sim: f64,
    #[serde(default = "default_y0")]
    pub y0: f64,
    #[serde(default)]
    pub z_hist: Option<PathSpec>,
    /// Intermediate time of the dynamic-programming check.
    #[serde(default)]
    pub u: Option<f64>,
    /// Policy priced by `simulate` mode.
    #[serde(default)]
    pub policy: Option<PolicySpec>,
    /// Dump per-path costs next to the report.
    #[serde(default)]
    pub dump_costs: bool,
}

fn default_y0() -> f64 {
    1.0
}

impl SimSection {
    pub fn build(&self, seed_override: Option<u64>) -> Result<SimConfig> {
        Ok(SimConfig {
            n_paths: self.n_paths,
            seed: seed_override.unwrap_or(self.seed),
            dt_sim: self.dt_sim,
            y0: self.y0,
            z_hist: self.z_hist.as_ref().map(|p| p.build()).transpose()?,
        })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameSection {
    #[serde(default)]
    pub player: usize,
    /// Initial states, one per player; defaults to an even spread on [-1, 1].
    #[serde(default)]
    pub y0: Option<Vec<f64>>,
    #[serde(default)]
    pub deviations: Option<Vec<Deviation>>,
    /// Player counts for the large-population comparison ladder.
    #[serde(default)]
    pub n_ladder: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergeSection {
    #[serde(default = "default_fractions")]
    pub tau_steps: Vec<usize>,
    #[serde(default = "default_probes")]
    pub probes: usize,
    #[serde(default = "default_probe_seed")]
    pub probe_seed: u64,
}

pub fn default_fractions() -> Vec<usize> {
    vec![5, 10, 20]
}

pub fn default_probes() -> usize {
    50
}

pub fn default_probe_seed() -> u64 {
    2024
}

impl Default for ConvergeSection {
    fn default() -> Self {
        Self {
            tau_steps: default_fractions(),
            probes: default_probes(),
            probe_seed: default_probe_seed(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItoSection {
    #[serde(default = "default_levels")]
    pub levels: Vec<usize>,
    #[serde(default = "default_ito_paths")]
    pub paths: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_levels() -> Vec<usize> {
    vec![64, 128, 256]
}

fn default_ito_paths() -> usize {
    100
}

impl Default for ItoSection {
    fn default() -> Self {
        Self {
            levels: default_levels(),
            paths: default_ito_paths(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Optional; when present it must agree with the subcommand.
    #[serde(default)]
    pub mode: Option<String>,
    pub params: ParamsSection,
    pub grid: GridSection,
    #[serde(default)]
    pub sim: Option<SimSection>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub cross_factor_policy: CrossPolicy,
    #[serde(default)]
    pub game: Option<GameSection>,
    #[serde(default)]
    pub converge: Option<ConvergeSection>,
    #[serde(default)]
    pub ito: Option<ItoSection>,
}

impl ExperimentConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::InvalidParameter(format!("cannot read {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_slice(&bytes)
            .map_err(|e| Error::InvalidParameter(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn check_mode(&self, subcommand: &str) -> Result<()> {
        if let Some(mode) = &self.mode {
            if mode != subcommand {
                return Err(Error::InvalidParameter(format!(
                    "config key 'mode' is '{mode}' but the subcommand is '{subcommand}'"
                )));
            }
        }
        Ok(())
    }

    pub fn sim_section(&self, mode: &str) -> Result<&SimSection> {
        self.sim.as_ref().ok_or_else(|| {
            Error::InvalidParameter(format!("config section 'sim' is required for {mode} mode"))
        })
    }
}
