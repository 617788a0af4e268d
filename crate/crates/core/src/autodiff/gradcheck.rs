//! Central finite-difference check of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A coordinate whose one-sided slopes disagree by more than this fraction is
/// treated as sitting on a kink (for example relu at 0) and is excluded.
const KINK_RATIO: f64 = 0.1;
const KINK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error over checked, non-excluded coordinates.
    pub max_rel_error: f64,
    /// Coordinates that were checked, in order.
    pub coordinates: Vec<usize>,
    /// Relative error per entry of `coordinates` (0 for excluded ones).
    pub per_coordinate_errors: Vec<f64>,
    /// Coordinates skipped as nondifferentiable points.
    pub excluded: Vec<usize>,
    pub tolerance: f64,
    pub passed: bool,
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the tape gradient of `loss_fn` at `theta` against central
/// differences on every coordinate. The step for coordinate `i` is
/// `h * max(1, |theta_i|)`.
pub fn finite_diff_check<F>(loss_fn: F, theta: &[f64], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..theta.len()).collect();
    finite_diff_check_coords(loss_fn, theta, &coords, h, tol)
}

/// Like [`finite_diff_check`] but only on the listed coordinates.
pub fn finite_diff_check_coords<F>(
    mut loss_fn: F,
    theta: &[f64],
    coords: &[usize],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!("step must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let x = tape.var(Tensor::vector(theta.to_vec()));
    let loss = loss_fn(&mut tape, x)?;
    let f0 = tape.scalar(loss);
    if !f0.is_finite() {
        return Err(Error::Numeric(format!("loss is {f0} at the check point")));
    }
    let mut grads = tape.backward(loss)?;
    let analytic = grads.take(&tape, x);

    let mut eval = |point: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::vector(point.to_vec()));
        let loss = loss_fn(&mut tape, x)?;
        let v = tape.scalar(loss);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numeric(format!("loss is {v} during finite differences")))
        }
    };

    let mut point = theta.to_vec();
    let mut errors = Vec::with_capacity(coords.len());
    let mut excluded = Vec::new();
    let mut max_rel_error = 0.0f64;
    for &i in coords {
        let step = h * theta[i].abs().max(1.0);
        point[i] = theta[i] + step;
        let plus = eval(&point)?;
        point[i] = theta[i] - step;
        let minus = eval(&point)?;
        point[i] = theta[i];

        let forward = (plus - f0) / step;
        let backward = (f0 - minus) / step;
        let jump = (forward - backward).abs();
        if jump > KINK_FLOOR && jump > KINK_RATIO * forward.abs().max(backward.abs()) {
            excluded.push(i);
            errors.push(0.0);
            continue;
        }
        let numeric = (plus - minus) / (2.0 * step);
        let err = relative_error(analytic[i], numeric);
        max_rel_error = max_rel_error.max(err);
        errors.push(err);
    }
    Ok(GradCheckReport {
        max_rel_error,
        coordinates: coords.to_vec(),
        per_coordinate_errors: errors,
        excluded,
        tolerance: tol,
        passed: max_rel_error <= tol,
    })
}
