//! Central finite-difference gradient checking.
//!
//! The oracle is deliberately independent of the tape: callers hand over a
//! plain `f(&[f64]) -> f64` closure and the analytic gradient, and this
//! module recomputes each partial derivative as (f(x+h·eᵢ) − f(x−h·eᵢ))/2h.
//! Agreement is judged coordinate-wise by relative error with an absolute
//! floor so that near-zero gradients do not divide by noise.

/// Parameters of a finite-difference comparison.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step h.
    pub step: f64,
    /// Maximum allowed |analytic − numeric| / max(|analytic|, |numeric|, floor).
    pub rel_tol: f64,
    /// Coordinates where both gradients are below this magnitude pass
    /// outright, and it is the denominator floor above.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            rel_tol: 1e-5,
            abs_floor: 1e-8,
        }
    }
}

/// Outcome of one gradient comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub n_coords: usize,
    pub max_rel_err: f64,
    pub worst_coord: Option<usize>,
    pub passed: bool,
}

/// Compare `analytic` against central differences of `f` at `x`.
///
/// `f` must be deterministic and free of side effects; it is evaluated
/// 2·len(x) times at perturbed points.
pub fn check_grad<F>(
    mut f: F,
    x: &[f64],
    analytic: &[f64],
    cfg: &GradCheckConfig,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(
        x.len(),
        analytic.len(),
        "gradient length must match input length"
    );
    let mut probe = x.to_vec();
    let mut max_rel_err = 0.0_f64;
    let mut worst_coord = None;
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + cfg.step;
        let fp = f(&probe);
        probe[i] = orig - cfg.step;
        let fm = f(&probe);
        probe[i] = orig;
        let numeric = (fp - fm) / (2.0 * cfg.step);
        let a = analytic[i];
        if a.abs() < cfg.abs_floor && numeric.abs() < cfg.abs_floor {
            continue;
        }
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.abs_floor);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_coord = Some(i);
        }
    }
    GradCheckReport {
        n_coords: x.len(),
        max_rel_err,
        worst_coord,
        passed: max_rel_err <= cfg.rel_tol,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_agrees() {
        // f(x) = Σ xᵢ², ∇f = 2x
        let x = [0.5, -1.25, 3.0];
        let grad = [1.0, -2.5, 6.0];
        let report = check_grad(
            |v| v.iter().map(|t| t * t).sum(),
            &x,
            &grad,
            &GradCheckConfig::default(),
        );
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let x = [1.0, 2.0];
        let wrong = [2.0, 3.9]; // true gradient is [2, 4]
        let report = check_grad(
            |v| v.iter().map(|t| t * t).sum(),
            &x,
            &wrong,
            &GradCheckConfig::default(),
        );
        assert!(!report.passed);
        assert_eq!(report.worst_coord, Some(1));
    }
}
