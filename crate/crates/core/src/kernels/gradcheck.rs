//! Central finite-difference gradient checking.

use serde::Serialize;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-4;
/// Maximum accepted relative error.
pub const REL_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so gradients that are zero (or
/// nearly so) on both sides compare by absolute difference.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: FD_STEP,
            rel_tolerance: REL_TOLERANCE,
        }
    }
}

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn central_difference(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize, step: f64) -> f64 {
    let mut xp = x.to_vec();
    xp[i] += step;
    let fp = f(&xp);
    xp[i] = x[i] - step;
    let fm = f(&xp);
    (fp - fm) / (2.0 * step)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    /// Probes compared.
    pub probes: usize,
    /// Probes rejected because the perturbation crossed a non-smooth point.
    pub skipped: usize,
    pub failures: usize,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn new(name: &str) -> Self {
        GradCheckReport {
            name: name.to_string(),
            probes: 0,
            skipped: 0,
            failures: 0,
            max_rel_error: 0.0,
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.probes > 0
    }

    /// Compares `analytic[i]` with a central difference of `f` at `x` for
    /// each probe index. `smooth(x, i)` may veto a probe whose perturbation
    /// straddles a kink.
    pub fn probe(
        &mut self,
        f: &dyn Fn(&[f64]) -> f64,
        x: &[f64],
        analytic: &[f64],
        indices: &[usize],
        smooth: &dyn Fn(&[f64], usize) -> bool,
        cfg: GradCheckConfig,
    ) {
        for &i in indices {
            if !smooth(x, i) {
                self.skipped += 1;
                continue;
            }
            let numeric = central_difference(f, x, i, cfg.step);
            let err = relative_error(analytic[i], numeric);
            self.probes += 1;
            self.max_rel_error = self.max_rel_error.max(err);
            if err > cfg.rel_tolerance || !err.is_finite() {
                self.failures += 1;
            }
        }
    }

    /// Folds another report for the same operation into this one.
    pub fn merge(&mut self, other: &GradCheckReport) {
        self.probes += other.probes;
        self.skipped += other.skipped;
        self.failures += other.failures;
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
    }
}
