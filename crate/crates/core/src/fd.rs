//! Finite-difference oracle for analytic gradients.

use alloc::vec::Vec;

use crate::array::DenseArray;
use crate::error::{Error, Result};

/// Added to relative-error denominators.
pub const REL_EPSILON: f64 = 1e-12;

/// Coordinates whose analytic and numeric values differ by no more than this
/// count as exact. Central differences of an `O(1)` function at `h = 1e-5`
/// carry roughly `1e-11` of rounding noise, which would otherwise dominate the
/// relative error of gradients that are zero by symmetry.
pub const ABS_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FdMode {
    #[default]
    Central,
    Forward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    /// Worst relative error over all coordinates.
    pub max_rel_error: f64,
    /// `(parameter, flat index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

impl FdReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = libm::fabs(analytic - numeric);
    if diff <= ABS_FLOOR {
        return 0.0;
    }
    diff / (libm::fabs(analytic) + libm::fabs(numeric) + REL_EPSILON)
}

/// Perturbs every coordinate of `params` by `±h` and compares the difference
/// quotient of `f` against `analytic` (same shapes as `params`).
pub fn finite_difference_check<F>(
    mut f: F,
    params: &[DenseArray],
    analytic: &[DenseArray],
    h: f64,
    mode: FdMode,
) -> Result<FdReport>
where
    F: FnMut(&[DenseArray]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Config(alloc::format!("step h must be positive, got {h}")));
    }
    if params.len() != analytic.len()
        || params.iter().zip(analytic).any(|(p, a)| p.shape() != a.shape())
    {
        return Err(Error::Usage("analytic gradients must match parameter shapes".into()));
    }
    let mut eval = |p: &[DenseArray]| -> Result<f64> {
        let v = f(p)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Evaluation(alloc::format!("function returned {v}")))
        }
    };
    let mut work: Vec<DenseArray> = params.to_vec();
    let base = match mode {
        FdMode::Forward => eval(&work)?,
        FdMode::Central => 0.0,
    };
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    for p in 0..work.len() {
        for k in 0..work[p].len() {
            let orig = work[p].values()[k];
            work[p].values_mut()[k] = orig + h;
            let plus = eval(&work)?;
            let numeric = match mode {
                FdMode::Central => {
                    work[p].values_mut()[k] = orig - h;
                    let minus = eval(&work)?;
                    (plus - minus) / (2.0 * h)
                }
                FdMode::Forward => (plus - base) / h,
            };
            work[p].values_mut()[k] = orig;
            let a = analytic[p].values()[k];
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.coordinates == 1 {
                report.max_rel_error = err;
                report.worst = (p, k);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
