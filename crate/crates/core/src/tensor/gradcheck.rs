use super::{Fault, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for [`relative_error`]. Central differences at
/// `eps = 1e-5` carry roughly 1e-11 of absolute rounding noise, so a purely
/// relative measure is meaningless for components near that level; below
/// the floor the measure becomes an absolute error scaled by 1e6.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Symmetric relative error `|a - n| / max(|a| + |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares the tape gradient of a scalar function against central finite
/// differences and returns the largest per-coordinate relative error.
///
/// `f` receives the point as a leaf on a fresh tape and must return a
/// scalar on that same tape.
pub fn gradient_check<F>(f: F, point: &Tensor, epsilon: f64) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    gradient_check_with_fault(f, point, epsilon, None)
}

/// [`gradient_check`] with an optional deliberate backward-rule fault on the
/// analytic pass.
pub fn gradient_check_with_fault<F>(
    f: F,
    point: &Tensor,
    epsilon: f64,
    fault: Option<Fault>,
) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::Contract(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let tape = fault.map_or_else(Tape::new, Tape::with_fault);
    let x = tape.leaf(point.clone());
    let out = f(x)?;
    let analytic = tape.backward(out)?.wrt(x);

    let eval = |p: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let x = tape.leaf(p);
        Ok(f(x)?.item())
    };
    let mut worst: f64 = 0.0;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += epsilon;
        let mut minus = point.clone();
        minus.data_mut()[i] -= epsilon;
        let central = (eval(plus)? - eval(minus)?) / (2.0 * epsilon);
        worst = worst.max(relative_error(analytic.data()[i], central));
    }
    Ok(worst)
}
