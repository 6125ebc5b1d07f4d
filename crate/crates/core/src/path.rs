//! Càdlàg paths sampled on uniform time grids.
//!
//! A [`SampledPath`] stores one value vector per grid node `t0 + k·dt`. The
//! value on `[t_k, t_{k+1})` is the node value at `t_k` (left-closed step
//! convention), the current value of the path is its last entry, and queries
//! at times before `t0` return the zero vector. Paths are immutable once
//! built except for the explicit `push` used by the simulator, and every
//! operation below returns a new path.

use crate::error::{Error, Result};

/// Relative tolerance used to decide whether a time sits on a grid node.
pub(crate) const GRID_TOL: f64 = 1e-9;

/// Returns `x/dt` rounded to the nearest integer if `x` is an integer
/// multiple of `dt` (up to [`GRID_TOL`]), `None` otherwise.
pub(crate) fn grid_multiple(x: f64, dt: f64) -> Option<i64> {
    if dt <= 0.0 {
        return None;
    }
    let r = x / dt;
    let k = r.round();
    if (r - k).abs() <= GRID_TOL * r.abs().max(1.0) {
        Some(k as i64)
    } else {
        None
    }
}

/// A path on the uniform grid `t0 + k·dt`, `k = 0..len`, taking values in
/// `R^dim`. Storage is flat, node-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledPath {
    t0: f64,
    dt: f64,
    dim: usize,
    data: Vec<f64>,
}

impl SampledPath {
    pub fn new(t0: f64, dt: f64, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dt.is_nan() || dt <= 0.0 || !dt.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "path step must be positive, got {dt}"
            )));
        }
        if dim == 0 {
            return Err(Error::InvalidParameter("path dimension must be >= 1".into()));
        }
        if data.is_empty() || data.len() % dim != 0 {
            return Err(Error::InvalidParameter(format!(
                "path data length {} is not a positive multiple of dim {dim}",
                data.len()
            )));
        }
        Ok(Self { t0, dt, dim, data })
    }

    /// Scalar path from a list of node values.
    pub fn scalar(t0: f64, dt: f64, values: Vec<f64>) -> Result<Self> {
        Self::new(t0, dt, 1, values)
    }

    /// Scalar path of `len` zero nodes.
    pub fn zeros(t0: f64, dt: f64, len: usize) -> Result<Self> {
        Self::new(t0, dt, 1, vec![0.0; len.max(1)])
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of grid nodes.
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        false // a valid path always has at least one node
    }

    pub fn end_time(&self) -> f64 {
        self.t0 + (self.len() - 1) as f64 * self.dt
    }

    pub fn time_at(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn node(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn last(&self) -> &[f64] {
        self.node(self.len() - 1)
    }

    /// Last value of a scalar path.
    pub fn last_scalar(&self) -> f64 {
        debug_assert_eq!(self.dim, 1);
        self.data[self.data.len() - 1]
    }

    /// Node value of a scalar path.
    pub fn scalar_at(&self, k: usize) -> f64 {
        debug_assert_eq!(self.dim, 1);
        self.data[k]
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    /// Appends one node (simulator use).
    pub fn push(&mut self, value: &[f64]) -> Result<()> {
        if value.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: value.len(),
            });
        }
        self.data.extend_from_slice(value);
        Ok(())
    }

    pub fn push_scalar(&mut self, value: f64) {
        debug_assert_eq!(self.dim, 1);
        self.data.push(value);
    }

    /// The first `len` nodes as a new path.
    pub fn prefix(&self, len: usize) -> Self {
        let len = len.clamp(1, self.len());
        Self {
            t0: self.t0,
            dt: self.dt,
            dim: self.dim,
            data: self.data[..len * self.dim].to_vec(),
        }
    }

    /// Sup of the Euclidean norm over nodes.
    pub fn sup_norm(&self) -> f64 {
        (0..self.len())
            .map(|k| {
                self.node(k)
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    }

    /// Grid index of a node time, or an alignment error.
    pub fn grid_index(&self, t: f64) -> Result<usize> {
        let k = grid_multiple(t - self.t0, self.dt).ok_or_else(|| {
            Error::GridAlignment(format!("time {t} is not on the grid (t0={}, dt={})", self.t0, self.dt))
        })?;
        if k < 0 || k as usize >= self.len() {
            return Err(Error::InsufficientHistory(format!(
                "time {t} outside [{}, {}]",
                self.t0,
                self.end_time()
            )));
        }
        Ok(k as usize)
    }

    /// Càdlàg lookup: zero before `t0`, the step value on `[t_k, t_{k+1})`.
    /// The last set value persists over the final step interval
    /// `[end, end + dt)`; querying at or past `end + dt` is an error — a
    /// path never reports values it does not yet have.
    pub fn sample(&self, t: f64, out: &mut [f64]) -> Result<()> {
        if out.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: out.len(),
            });
        }
        let u = (t - self.t0) / self.dt;
        if u < -GRID_TOL {
            out.fill(0.0);
            return Ok(());
        }
        let n = self.len() as f64;
        if u >= n - GRID_TOL {
            return Err(Error::InsufficientHistory(format!(
                "query at t = {t} past path end {}",
                self.end_time()
            )));
        }
        let k = ((u + GRID_TOL).floor() as usize).min(self.len() - 1);
        out.copy_from_slice(self.node(k));
        Ok(())
    }

    /// Scalar càdlàg lookup.
    pub fn sample_scalar(&self, t: f64) -> Result<f64> {
        let mut buf = [0.0];
        if self.dim != 1 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: self.dim,
            });
        }
        self.sample(t, &mut buf)?;
        Ok(buf[0])
    }

    /// Flat extension: append `delta/dt` copies of the last value. `delta`
    /// must be a non-negative grid multiple.
    pub fn flat_extend(&self, delta: f64) -> Result<Self> {
        if delta < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "flat extension must be non-negative, got {delta}"
            )));
        }
        let steps = grid_multiple(delta, self.dt).ok_or_else(|| {
            Error::GridAlignment(format!(
                "extension {delta} is not a multiple of dt = {}",
                self.dt
            ))
        })?;
        let mut data = self.data.clone();
        let last = self.last().to_vec();
        for _ in 0..steps {
            data.extend_from_slice(&last);
        }
        Ok(Self {
            t0: self.t0,
            dt: self.dt,
            dim: self.dim,
            data,
        })
    }

    /// Bump: add `h` to the last value, per coordinate.
    pub fn bump(&self, h: &[f64]) -> Result<Self> {
        if h.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: h.len(),
            });
        }
        let mut out = self.clone();
        let n = out.data.len();
        for (i, hi) in h.iter().enumerate() {
            out.data[n - self.dim + i] += hi;
        }
        Ok(out)
    }

    /// Scalar bump.
    pub fn bump_scalar(&self, h: f64) -> Result<Self> {
        self.bump(&[h])
    }

    /// Replace the last value by `alpha`: the bump by `alpha - last`,
    /// written as a direct assignment so the new last value is exactly
    /// `alpha`.
    pub fn substitute_last(&self, alpha: &[f64]) -> Result<Self> {
        if alpha.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: alpha.len(),
            });
        }
        let mut out = self.clone();
        let n = out.data.len();
        out.data[n - self.dim..].copy_from_slice(alpha);
        Ok(out)
    }
}

/// Distance between two paths on a shared grid: the shorter one is flat
/// extended to the longer one's end, then the sup-norm gap plus the end-time
/// gap is returned. Symmetric; zero exactly when grids and values coincide.
pub fn lambda_metric(p: &SampledPath, q: &SampledPath) -> Result<f64> {
    if grid_multiple(p.dt - q.dt, p.dt.min(q.dt)).map(|k| k != 0).unwrap_or(true)
        && (p.dt - q.dt).abs() > GRID_TOL * p.dt.max(q.dt)
    {
        return Err(Error::IncompatiblePaths(format!(
            "steps differ: {} vs {}",
            p.dt, q.dt
        )));
    }
    if (p.t0 - q.t0).abs() > GRID_TOL * p.dt {
        return Err(Error::IncompatiblePaths(format!(
            "start times differ: {} vs {}",
            p.t0, q.t0
        )));
    }
    if p.dim != q.dim {
        return Err(Error::DimensionMismatch {
            expected: p.dim,
            got: q.dim,
        });
    }
    let n = p.len().max(q.len());
    let mut sup = 0.0_f64;
    for k in 0..n {
        let a = p.node(k.min(p.len() - 1));
        let b = q.node(k.min(q.len() - 1));
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        sup = sup.max(d2.sqrt());
    }
    let time_gap = (p.len() as f64 - q.len() as f64).abs() * p.dt;
    Ok(sup + time_gap)
}

/// Splice a control path onto a history at time `t`: the result follows `z`
/// strictly before `t` and `a` from `t` on (the node at `t` takes `a`'s
/// value). `a` must start exactly at `t`; `z` must reach at least `t - dt`.
pub fn concat_control(z: &SampledPath, a: &SampledPath, t: f64) -> Result<SampledPath> {
    if (z.dt - a.dt).abs() > GRID_TOL * z.dt.max(a.dt) {
        return Err(Error::IncompatiblePaths(format!(
            "steps differ: {} vs {}",
            z.dt, a.dt
        )));
    }
    if z.dim != a.dim {
        return Err(Error::DimensionMismatch {
            expected: z.dim,
            got: a.dim,
        });
    }
    let k = grid_multiple(t - z.t0, z.dt).ok_or_else(|| {
        Error::GridAlignment(format!("splice time {t} not on the grid of the history"))
    })?;
    if k < 0 {
        return Err(Error::IncompatiblePaths(format!(
            "splice time {t} before history start {}",
            z.t0
        )));
    }
    if grid_multiple(a.t0 - t, z.dt) != Some(0) {
        return Err(Error::IncompatiblePaths(format!(
            "control starts at {} but the splice time is {t}",
            a.t0
        )));
    }
    let k = k as usize;
    // Nodes of z strictly before t; gap if z does not reach t - dt.
    if k > z.len() {
        return Err(Error::IncompatiblePaths(format!(
            "history ends at {} leaving a gap before the splice time {t}",
            z.end_time()
        )));
    }
    let mut data = Vec::with_capacity((k + a.len()) * z.dim);
    data.extend_from_slice(&z.data[..k * z.dim]);
    data.extend_from_slice(&a.data);
    SampledPath::new(if k == 0 { a.t0 } else { z.t0 }, z.dt, z.dim, data)
}

/// A state path and a control path over the same time window.
#[derive(Debug, Clone)]
pub struct PathPair {
    pub state: SampledPath,
    pub control: SampledPath,
}

impl PathPair {
    pub fn new(state: SampledPath, control: SampledPath) -> Result<Self> {
        if (state.t0 - control.t0).abs() > GRID_TOL * state.dt
            || (state.dt - control.dt).abs() > GRID_TOL * state.dt
            || state.len() != control.len()
        {
            return Err(Error::IncompatiblePaths(
                "state and control must share t0, dt, and length".into(),
            ));
        }
        Ok(Self { state, control })
    }

    pub fn end_time(&self) -> f64 {
        self.state.end_time()
    }

    /// Bump applied to the control component's last value.
    pub fn bump_control(&self, h: f64) -> Result<Self> {
        Ok(Self {
            state: self.state.clone(),
            control: self.control.bump(&vec![h; self.control.dim()])?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(values: &[f64]) -> SampledPath {
        SampledPath::scalar(0.0, 1.0, values.to_vec()).unwrap()
    }

    #[test]
    fn flat_extend_appends_copies() {
        let q = p(&[1.0, 2.0]).flat_extend(2.0).unwrap();
        assert_eq!(q.values(), &[1.0, 2.0, 2.0, 2.0]);
        assert_eq!(q.end_time(), 3.0);
    }

    #[test]
    fn flat_extend_zero_is_identity() {
        let q = p(&[5.0]).flat_extend(0.0).unwrap();
        assert_eq!(q.values(), &[5.0]);
    }

    #[test]
    fn flat_extend_rejects_off_grid_delta() {
        let q = SampledPath::scalar(0.0, 0.5, vec![0.0, 3.0]).unwrap();
        assert!(matches!(
            q.flat_extend(0.3),
            Err(Error::GridAlignment(_))
        ));
    }

    #[test]
    fn bump_changes_only_last_value() {
        let q = p(&[1.0, 2.0]).bump(&[0.5]).unwrap();
        assert_eq!(q.values(), &[1.0, 2.5]);
        let r = p(&[4.0]).bump(&[0.0]).unwrap();
        assert_eq!(r.values(), &[4.0]);
    }

    #[test]
    fn bump_is_per_coordinate() {
        let q = SampledPath::new(0.0, 1.0, 2, vec![1.0, 1.0, 2.0, 2.0]).unwrap();
        let b = q.bump(&[0.0, 1.0]).unwrap();
        assert_eq!(b.values(), &[1.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn bump_rejects_dimension_mismatch() {
        assert!(matches!(
            p(&[1.0]).bump(&[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn metric_identity_and_time_gap() {
        let a = p(&[1.0]);
        let b = p(&[1.0, 1.0]);
        assert_eq!(lambda_metric(&a, &a).unwrap(), 0.0);
        assert_eq!(lambda_metric(&a, &b).unwrap(), 1.0);
        assert_eq!(lambda_metric(&b, &a).unwrap(), 1.0);
    }

    #[test]
    fn metric_hand_evaluated_case() {
        // extend [1] to [1,1]; sup gap against [1,3] is 2, time gap 1.
        let a = p(&[1.0]);
        let b = p(&[1.0, 3.0]);
        assert_eq!(lambda_metric(&a, &b).unwrap(), 3.0);
    }

    #[test]
    fn metric_rejects_incompatible_dt() {
        let a = p(&[1.0]);
        let b = SampledPath::scalar(0.0, 0.5, vec![1.0]).unwrap();
        assert!(lambda_metric(&a, &b).is_err());
    }

    #[test]
    fn concat_takes_control_value_at_the_splice_node() {
        let z = p(&[1.0, 1.0]);
        let a = SampledPath::scalar(1.0, 1.0, vec![7.0, 7.0]).unwrap();
        let c = concat_control(&z, &a, 1.0).unwrap();
        assert_eq!(c.values(), &[1.0, 7.0, 7.0]);
        assert_eq!(c.sample_scalar(1.0).unwrap(), 7.0);
    }

    #[test]
    fn concat_at_start_returns_the_control() {
        let z = p(&[1.0, 1.0]);
        let a = p(&[7.0, 8.0]);
        let c = concat_control(&z, &a, 0.0).unwrap();
        assert_eq!(c.values(), &[7.0, 8.0]);
    }

    #[test]
    fn concat_rejects_misaligned_splice() {
        let z = p(&[2.0, 2.0, 2.0]);
        let a = SampledPath::scalar(2.5, 1.0, vec![3.0]).unwrap();
        assert!(concat_control(&z, &a, 2.5).is_err());
        let b = SampledPath::scalar(5.0, 1.0, vec![3.0]).unwrap();
        assert!(concat_control(&z, &b, 5.0).is_err()); // gap after z
    }

    #[test]
    fn substitute_last_sets_the_value() {
        let q = p(&[1.0, 2.0]).substitute_last(&[5.0]).unwrap();
        assert_eq!(q.values(), &[1.0, 5.0]);
        let r = p(&[1.0, 2.0]).substitute_last(&[2.0]).unwrap();
        assert_eq!(r.values(), &[1.0, 2.0]);
    }

    #[test]
    fn negative_time_queries_return_zero() {
        let q = SampledPath::scalar(0.0, 0.5, vec![3.0, 4.0]).unwrap();
        assert_eq!(q.sample_scalar(-1.0).unwrap(), 0.0);
        assert_eq!(q.sample_scalar(0.0).unwrap(), 3.0);
        assert_eq!(q.sample_scalar(0.49).unwrap(), 3.0);
        assert_eq!(q.sample_scalar(0.5).unwrap(), 4.0);
        // the last value is held over the final step interval, no further
        assert_eq!(q.sample_scalar(0.75).unwrap(), 4.0);
        assert!(q.sample_scalar(1.0).is_err());
        assert!(q.sample_scalar(1.2).is_err());
    }

    #[test]
    fn pair_requires_shared_grid() {
        let s = p(&[1.0, 2.0]);
        let c = p(&[0.0, 0.0, 0.0]);
        assert!(PathPair::new(s, c).is_err());
    }
}
