//! JSON-serializable reports produced by the verification pipelines.

use serde::{Deserialize, Serialize};

use crate::lq::{LQParams, LadderRow, SolverGrid};

/// Monte Carlo mean, its standard error, and the sample count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl CostEstimate {
    /// Mean and `sample std / sqrt(n)` over an ordered sample vector. The
    /// summation order is fixed, so the result does not depend on how the
    /// samples were produced.
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
                / (n as f64 - 1.0);
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, stderr, n }
    }

    /// Standard error of a difference of two independent estimates.
    pub fn combined_stderr(&self, other: &CostEstimate) -> f64 {
        (self.stderr * self.stderr + other.stderr * other.stderr).sqrt()
    }
}

/// One labelled policy estimate inside a report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyEstimate {
    pub policy: String,
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl PolicyEstimate {
    pub fn new(policy: impl Into<String>, est: CostEstimate) -> Self {
        Self {
            policy: policy.into(),
            mean: est.mean,
            stderr: est.stderr,
            n: est.n,
        }
    }

    pub fn estimate(&self) -> CostEstimate {
        CostEstimate {
            mean: self.mean,
            stderr: self.stderr,
            n: self.n,
        }
    }
}

/// Flags of the optimal-cost comparison: the feedback cost must match the
/// solved value within its confidence band and no rival may beat it by more
/// than statistical noise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DominanceFlags {
    /// `|V - J(feedback)| <= 3·stderr`.
    pub value_match: bool,
    /// Per rival: `J(rival) >= J(feedback) - 2·combined stderr`.
    pub dominance: Vec<bool>,
    /// Rivals strictly worse by more than `3·combined stderr`.
    pub strictly_worse: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationReport {
    #[serde(rename = "V")]
    pub v: f64,
    pub estimates: Vec<PolicyEstimate>,
    pub flags: DominanceFlags,
    pub seed: u64,
    pub params: LQParams,
    pub grid: SolverGrid,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DppReport {
    #[serde(rename = "V")]
    pub v: f64,
    pub u: f64,
    pub estimates: Vec<PolicyEstimate>,
    pub flags: DominanceFlags,
    pub seed: u64,
    pub params: LQParams,
    pub grid: SolverGrid,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NashReport {
    #[serde(rename = "V")]
    pub v: f64,
    pub player: usize,
    pub n_players: usize,
    pub estimates: Vec<PolicyEstimate>,
    pub flags: DominanceFlags,
    pub seed: u64,
    pub params: LQParams,
    pub grid: SolverGrid,
}

/// Residual refinement study of one solver configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub rows: Vec<LadderRow>,
    pub slope: f64,
    pub cross_factor: String,
    pub pass: bool,
}

/// Median change-of-variables residuals of one functional across grid
/// refinements.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItoStudyRow {
    pub functional: String,
    pub dts: Vec<f64>,
    pub medians: Vec<f64>,
    pub decreasing: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItoReport {
    pub rows: Vec<ItoStudyRow>,
    pub paths_per_level: usize,
    pub seed: u64,
    pub pass: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn estimate_of_constant_samples_has_zero_stderr() {
        let e = CostEstimate::from_samples(&[2.5, 2.5, 2.5]);
        assert_eq!(e.mean, 2.5);
        assert_eq!(e.stderr, 0.0);
        assert_eq!(e.n, 3);
    }

    #[test]
    fn single_sample_estimate_is_degenerate() {
        let e = CostEstimate::from_samples(&[1.0]);
        assert_eq!(e.stderr, 0.0);
        assert_eq!(e.n, 1);
    }
}
