//! Numerical functional derivatives on sampled paths.
//!
//! For a functional `f` of a path, the time derivative is the one-sided
//! difference quotient under flat extension,
//! `(f(flat_extend(p, dt)) - f(p)) / dt`, and the space derivatives are
//! central differences under last-value bumps. These are the discrete
//! counterparts of the derivatives that enter the change-of-variables
//! formula for path functionals, which [`ito_residual`] tests directly on a
//! simulated semimartingale.

use crate::error::{Error, Result};
use crate::path::{PathPair, SampledPath};

/// A real-valued functional of a path. Evaluation must be deterministic.
pub trait PathFunctional {
    fn value(&self, p: &SampledPath) -> Result<f64>;
}

impl<F> PathFunctional for F
where
    F: Fn(&SampledPath) -> f64,
{
    fn value(&self, p: &SampledPath) -> Result<f64> {
        Ok(self(p))
    }
}

/// A real-valued functional of a (state, control) pair.
pub trait PairFunctional {
    fn value(&self, p: &PathPair) -> Result<f64>;
}

impl<F> PairFunctional for F
where
    F: Fn(&PathPair) -> f64,
{
    fn value(&self, p: &PathPair) -> Result<f64> {
        Ok(self(p))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivMethod {
    ForwardTime,
    CentralSpace,
}

/// A finite-difference derivative value together with the step it used.
#[derive(Debug, Clone, Copy)]
pub struct DerivativeEstimate {
    pub value: f64,
    pub step: f64,
    pub method: DerivMethod,
}

/// Default bump size for space derivatives: balances truncation against
/// round-off for functionals of quadratic scale.
pub fn default_space_step(p: &SampledPath) -> f64 {
    1e-4 * p.sup_norm().max(1.0)
}

/// One-sided time derivative via flat extension. `dt_step` defaults to one
/// grid step and must be a positive grid multiple.
pub fn delta_t<F: PathFunctional + ?Sized>(
    f: &F,
    p: &SampledPath,
    dt_step: Option<f64>,
) -> Result<DerivativeEstimate> {
    let step = dt_step.unwrap_or(p.dt());
    if step <= 0.0 || step.is_nan() {
        return Err(Error::InvalidParameter(format!(
            "time step must be positive, got {step}"
        )));
    }
    let extended = p.flat_extend(step)?;
    let value = (f.value(&extended)? - f.value(p)?) / step;
    Ok(DerivativeEstimate {
        value,
        step,
        method: DerivMethod::ForwardTime,
    })
}

/// Central space derivative under a last-value bump of the given coordinate.
pub fn delta_x_coord<F: PathFunctional + ?Sized>(
    f: &F,
    p: &SampledPath,
    coord: usize,
    h: Option<f64>,
) -> Result<DerivativeEstimate> {
    let h = h.unwrap_or_else(|| default_space_step(p));
    if h <= 0.0 || h.is_nan() {
        return Err(Error::InvalidParameter(format!(
            "bump size must be positive, got {h}"
        )));
    }
    let mut e = vec![0.0; p.dim()];
    e[coord] = h;
    let up = f.value(&p.bump(&e)?)?;
    e[coord] = -h;
    let down = f.value(&p.bump(&e)?)?;
    Ok(DerivativeEstimate {
        value: (up - down) / (2.0 * h),
        step: h,
        method: DerivMethod::CentralSpace,
    })
}

/// Second space derivative (three-point stencil) in one coordinate.
pub fn delta_xx_coord<F: PathFunctional + ?Sized>(
    f: &F,
    p: &SampledPath,
    coord: usize,
    h: Option<f64>,
) -> Result<DerivativeEstimate> {
    let h = h.unwrap_or_else(|| default_space_step(p));
    if h <= 0.0 || h.is_nan() {
        return Err(Error::InvalidParameter(format!(
            "bump size must be positive, got {h}"
        )));
    }
    let mut e = vec![0.0; p.dim()];
    e[coord] = h;
    let up = f.value(&p.bump(&e)?)?;
    e[coord] = -h;
    let down = f.value(&p.bump(&e)?)?;
    let mid = f.value(p)?;
    Ok(DerivativeEstimate {
        value: (up - 2.0 * mid + down) / (h * h),
        step: h,
        method: DerivMethod::CentralSpace,
    })
}

/// Richardson-extrapolated time derivative: combines the one-sided
/// quotients at `dt_step` and `2·dt_step` to cancel the leading error term.
/// The plain quotient is the defining object; this is a convenience for
/// studies that want the extra order.
pub fn delta_t_richardson<F: PathFunctional + ?Sized>(
    f: &F,
    p: &SampledPath,
    dt_step: Option<f64>,
) -> Result<DerivativeEstimate> {
    let step = dt_step.unwrap_or(p.dt());
    let fine = delta_t(f, p, Some(step))?;
    let coarse = delta_t(f, p, Some(2.0 * step))?;
    Ok(DerivativeEstimate {
        value: 2.0 * fine.value - coarse.value,
        step,
        method: DerivMethod::ForwardTime,
    })
}

/// Space derivative of a scalar-path functional.
pub fn delta_x<F: PathFunctional + ?Sized>(
    f: &F,
    p: &SampledPath,
    h: Option<f64>,
) -> Result<DerivativeEstimate> {
    delta_x_coord(f, p, 0, h)
}

/// Second space derivative of a scalar-path functional.
pub fn delta_xx<F: PathFunctional + ?Sized>(
    f: &F,
    p: &SampledPath,
    h: Option<f64>,
) -> Result<DerivativeEstimate> {
    delta_xx_coord(f, p, 0, h)
}

/// Gradient under last-value bumps, one entry per coordinate.
pub fn delta_x_grad<F: PathFunctional + ?Sized>(
    f: &F,
    p: &SampledPath,
    h: Option<f64>,
) -> Result<Vec<DerivativeEstimate>> {
    (0..p.dim()).map(|i| delta_x_coord(f, p, i, h)).collect()
}

/// Discrete defect of the change-of-variables formula along a scalar sample
/// path `x` with quadratic-variation accumulation `qv` on the same grid:
///
/// `f(X_T) - f(X_0) - Σ Δt f·dt - Σ Δx f·dx - ½ Σ Δxx f·d⟨x⟩`,
///
/// with all derivatives evaluated numerically on path prefixes (left
/// endpoints). Zero up to discretisation error for smooth functionals.
pub fn ito_residual<F: PathFunctional + ?Sized>(
    f: &F,
    x: &SampledPath,
    qv: &SampledPath,
) -> Result<f64> {
    if x.dim() != 1 || qv.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: x.dim().max(qv.dim()),
        });
    }
    if x.len() != qv.len()
        || (x.t0() - qv.t0()).abs() > 1e-12
        || (x.dt() - qv.dt()).abs() > 1e-12 * x.dt()
    {
        return Err(Error::IncompatiblePaths(
            "sample path and quadratic variation must share the grid".into(),
        ));
    }
    let n = x.len();
    let dt = x.dt();
    let mut sum = 0.0;
    for k in 0..n - 1 {
        let prefix = x.prefix(k + 1);
        let dx = x.scalar_at(k + 1) - x.scalar_at(k);
        let dq = qv.scalar_at(k + 1) - qv.scalar_at(k);
        let dtf = delta_t(f, &prefix, None)?.value;
        let dxf = delta_x(f, &prefix, None)?.value;
        let dxxf = delta_xx(f, &prefix, None)?.value;
        sum += dtf * dt + dxf * dx + 0.5 * dxxf * dq;
    }
    Ok(f.value(x)? - f.value(&x.prefix(1))? - sum)
}

/// True when bumping the control component's last value by every `h` leaves
/// `f` unchanged to tolerance (relative `1e-8` or absolute `1e-10`,
/// whichever is larger): the functional does not see the current control.
pub fn predictability_check<F: PairFunctional + ?Sized>(
    f: &F,
    p: &PathPair,
    h_set: &[f64],
) -> Result<bool> {
    if h_set.is_empty() || h_set.contains(&0.0) {
        return Err(Error::InvalidParameter(
            "predictability check needs a non-empty set of non-zero bumps".into(),
        ));
    }
    let base = f.value(p)?;
    let tol = (1e-8 * base.abs()).max(1e-10);
    for &h in h_set {
        let bumped = f.value(&p.bump_control(h)?)?;
        if (bumped - base).abs() > tol {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Left-endpoint running integral of a scalar path over `[t0, end)`: the
/// final node is excluded, so a last-value bump leaves the value unchanged
/// and the functional is exactly predictable on the grid.
pub fn running_integral(p: &SampledPath) -> f64 {
    let n = p.len();
    (0..n - 1).map(|k| p.scalar_at(k)).sum::<f64>() * p.dt()
}

/// Median change-of-variables residuals of three reference functionals
/// (`y²`, `∫y`, `y·∫y`) on simulated unit-horizon Brownian paths across
/// grid refinement levels (`levels` lists steps per horizon). The
/// quadratic variation handed to the residual is the process one, `t`, so
/// the quadratic functional exercises the realised-versus-model gap.
/// Residuals at rounding level (below `1e-13`) count as converged: the
/// purely linear `∫y` functional telescopes exactly on the grid, so its
/// residual is rounding noise at every level.
pub fn ito_refinement_study(
    levels: &[usize],
    paths: usize,
    seed: u64,
) -> Result<crate::report::ItoReport> {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    if levels.len() < 2 || paths == 0 {
        return Err(Error::InvalidParameter(
            "the refinement study needs at least two levels and one path".into(),
        ));
    }
    let floor = 1e-13;
    let functionals: [(&str, fn(&SampledPath) -> f64); 3] = [
        ("square", |p| p.last_scalar() * p.last_scalar()),
        ("integral", running_integral),
        ("mixed", |p| p.last_scalar() * running_integral(p)),
    ];
    let mut rows = Vec::new();
    for (name, f) in functionals {
        let mut dts = Vec::new();
        let mut medians = Vec::new();
        for &n in levels {
            let dt = 1.0 / n as f64;
            let mut res: Vec<f64> = (0..paths)
                .map(|path_id| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(path_id as u64);
                    let mut x = vec![0.0_f64];
                    for _ in 0..n {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        x.push(x.last().unwrap() + dt.sqrt() * z);
                    }
                    let qv: Vec<f64> = (0..=n).map(|k| k as f64 * dt).collect();
                    let xp = SampledPath::scalar(0.0, dt, x)?;
                    let qvp = SampledPath::scalar(0.0, dt, qv)?;
                    Ok(ito_residual(&f, &xp, &qvp)?.abs())
                })
                .collect::<Result<_>>()?;
            res.sort_by(f64::total_cmp);
            let mid = res.len() / 2;
            let median = if res.len() % 2 == 0 {
                0.5 * (res[mid - 1] + res[mid])
            } else {
                res[mid]
            };
            dts.push(dt);
            medians.push(median);
        }
        let decreasing = medians.windows(2).all(|w| w[1] < w[0] || w[1] < floor);
        rows.push(crate::report::ItoStudyRow {
            functional: name.into(),
            dts,
            medians,
            decreasing,
        });
    }
    let pass = rows.iter().all(|r| r.decreasing);
    Ok(crate::report::ItoReport {
        rows,
        paths_per_level: paths,
        seed,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn ramp(n: usize, dt: f64) -> SampledPath {
        SampledPath::scalar(0.0, dt, (0..n).map(|k| k as f64 * dt).collect()).unwrap()
    }

    fn last(p: &SampledPath) -> f64 {
        p.last_scalar()
    }

    fn elapsed(p: &SampledPath) -> f64 {
        p.end_time() - p.t0()
    }

    #[test]
    fn time_derivative_of_last_value_is_zero() {
        let p = ramp(11, 0.1);
        assert_eq!(delta_t(&last, &p, None).unwrap().value, 0.0);
    }

    #[test]
    fn time_derivative_of_clock_is_one() {
        let p = ramp(11, 0.1);
        assert_abs_diff_eq!(delta_t(&elapsed, &p, None).unwrap().value, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn time_derivative_of_running_integral_is_the_last_value() {
        // path ends at 3: the flat extension accrues 3·dt of integral.
        let p = SampledPath::scalar(0.0, 0.05, vec![1.0, 2.0, 3.0]).unwrap();
        assert_abs_diff_eq!(
            delta_t(&running_integral, &p, None).unwrap().value,
            3.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn space_derivatives_of_linear_and_quadratic_functionals() {
        let p = SampledPath::scalar(0.0, 0.1, vec![0.3, -0.4, 1.7]).unwrap();
        assert_abs_diff_eq!(delta_x(&last, &p, None).unwrap().value, 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(delta_xx(&last, &p, None).unwrap().value, 0.0, epsilon = 1e-6);
        let sq = |p: &SampledPath| p.last_scalar() * p.last_scalar();
        assert_abs_diff_eq!(delta_x(&sq, &p, None).unwrap().value, 2.0 * 1.7, epsilon = 1e-9);
        assert_abs_diff_eq!(delta_xx(&sq, &p, None).unwrap().value, 2.0, epsilon = 1e-6);
    }

    #[test]
    fn running_integral_ignores_last_value_bumps() {
        let p = SampledPath::scalar(0.0, 0.1, vec![1.0, 2.0, 3.0]).unwrap();
        assert_abs_diff_eq!(
            delta_x(&running_integral, &p, None).unwrap().value,
            0.0,
            epsilon = 1e-14
        );
    }

    #[test]
    fn cylindrical_derivatives_converge_to_classical_ones() {
        // f(Y_t) = phi(t, y_t) with phi = t·sin(y) + y^3: compare against
        // analytic partials as the steps shrink.
        let phi = |t: f64, y: f64| t * y.sin() + y * y * y;
        let f = move |p: &SampledPath| phi(elapsed(p), p.last_scalar());
        let p = SampledPath::scalar(0.0, 0.01, (0..51).map(|k| 0.4 + 0.01 * k as f64).collect())
            .unwrap();
        let t = elapsed(&p);
        let y = p.last_scalar();
        // phi is linear in t, so the one-sided quotient is exact
        assert_abs_diff_eq!(delta_t(&f, &p, None).unwrap().value, y.sin(), epsilon = 1e-9);
        let mut prev_err = f64::INFINITY;
        for h in [1e-2, 1e-3, 1e-4] {
            let est = delta_x(&f, &p, Some(h)).unwrap().value;
            let err = (est - (t * y.cos() + 3.0 * y * y)).abs();
            assert!(err < prev_err || err < 1e-10);
            prev_err = err;
        }
        let dxx = delta_xx(&f, &p, Some(1e-4)).unwrap().value;
        assert_abs_diff_eq!(dxx, -t * y.sin() + 6.0 * y, epsilon = 1e-4);
    }

    fn brownian(seed: u64, n_steps: usize, dt: f64) -> (SampledPath, SampledPath) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = vec![0.0_f64];
        for _ in 0..n_steps {
            let z: f64 = StandardNormal.sample(&mut rng);
            x.push(x.last().unwrap() + dt.sqrt() * z);
        }
        let qv: Vec<f64> = (0..=n_steps).map(|k| k as f64 * dt).collect();
        (
            SampledPath::scalar(0.0, dt, x).unwrap(),
            SampledPath::scalar(0.0, dt, qv).unwrap(),
        )
    }

    #[test]
    fn ito_residual_of_last_value_telescopes_to_zero() {
        let (x, qv) = brownian(7, 64, 1.0 / 64.0);
        assert_abs_diff_eq!(ito_residual(&last, &x, &qv).unwrap(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn ito_residual_shrinks_under_refinement_for_smooth_functionals() {
        // median over seeded Brownian paths, three refinement levels
        let sq = |p: &SampledPath| p.last_scalar() * p.last_scalar();
        let mixed = |p: &SampledPath| p.last_scalar() * running_integral(p);
        for f in [&sq as &dyn PathFunctional, &mixed] {
            let mut medians = Vec::new();
            for level in 0..3 {
                let n = 32 << level;
                let mut res: Vec<f64> = (0..40)
                    .map(|seed| {
                        let (x, qv) = brownian(seed, n, 1.0 / n as f64);
                        ito_residual(f, &x, &qv).unwrap().abs()
                    })
                    .collect();
                res.sort_by(f64::total_cmp);
                medians.push(res[res.len() / 2]);
            }
            assert!(
                medians[1] < medians[0] && medians[2] < medians[1],
                "medians not decreasing: {medians:?}"
            );
        }
    }

    #[test]
    fn ito_residual_rejects_mismatched_grids() {
        let (x, _) = brownian(1, 8, 0.125);
        let qv = SampledPath::scalar(0.0, 0.125, vec![0.0; 4]).unwrap();
        assert!(ito_residual(&last, &x, &qv).is_err());
    }

    #[test]
    fn predictability_of_control_blind_and_control_reading_functionals() {
        let state = SampledPath::scalar(0.0, 0.1, vec![1.0, 2.0, 3.0]).unwrap();
        let control = SampledPath::scalar(0.0, 0.1, vec![0.5, -0.5, 0.25]).unwrap();
        let pair = PathPair::new(state, control).unwrap();
        let hs = [0.1, -0.3, 1.0];
        // reads the control only strictly before the end
        let before_end = |p: &PathPair| running_integral(&p.control);
        assert!(predictability_check(&before_end, &pair, &hs).unwrap());
        // reads the current control
        let current = |p: &PathPair| p.control.last_scalar();
        assert!(!predictability_check(&current, &pair, &hs).unwrap());
        let constant = |_: &PathPair| 42.0;
        assert!(predictability_check(&constant, &pair, &hs).unwrap());
    }

    #[test]
    fn richardson_extrapolation_improves_a_curved_clock_functional() {
        // f = t², nonlinear in the extension length: the plain quotient has
        // an O(dt) defect, the extrapolated one cancels it
        let f = |p: &SampledPath| elapsed(p) * elapsed(p);
        let p = ramp(11, 0.1);
        let t = elapsed(&p);
        let plain = (delta_t(&f, &p, None).unwrap().value - 2.0 * t).abs();
        let extrap = (delta_t_richardson(&f, &p, None).unwrap().value - 2.0 * t).abs();
        assert!(extrap < 1e-12 && plain > 1e-3, "plain {plain}, extrapolated {extrap}");
    }

    #[test]
    fn vector_paths_get_a_gradient_per_coordinate() {
        let p = SampledPath::new(0.0, 0.5, 2, vec![1.0, 2.0, 0.5, -1.0]).unwrap();
        // f = u·v of the last value
        let f = |p: &SampledPath| {
            let last = p.last();
            last[0] * last[1]
        };
        let grad = delta_x_grad(&f, &p, Some(1e-6)).unwrap();
        assert_abs_diff_eq!(grad[0].value, -1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(grad[1].value, 0.5, epsilon = 1e-8);
    }

    #[test]
    fn refinement_study_reports_every_reference_functional() {
        let report = ito_refinement_study(&[16, 32, 64], 30, 1).unwrap();
        assert_eq!(report.rows.len(), 3);
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn predictability_rejects_empty_or_zero_bumps() {
        let state = SampledPath::scalar(0.0, 0.1, vec![1.0]).unwrap();
        let control = SampledPath::scalar(0.0, 0.1, vec![0.0]).unwrap();
        let pair = PathPair::new(state, control).unwrap();
        let constant = |_: &PathPair| 0.0;
        assert!(predictability_check(&constant, &pair, &[]).is_err());
        assert!(predictability_check(&constant, &pair, &[0.0]).is_err());
    }
}
