use super::{Tape, TapeError, Var};
use crate::tensor::{Real, Tensor};

/// `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of a scalar function against central finite
/// differences at every coordinate of `x` and returns the worst relative
/// error. `f` receives a fresh tape and the input handle.
pub fn grad_check<T, E, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<f64, E>
where
    T: Real,
    E: From<TapeError>,
    F: Fn(&mut Tape<T>, Var) -> Result<Var, E>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_coords(f, x, eps, &coords)
}

/// [`grad_check`] restricted to the listed coordinates.
pub fn grad_check_coords<T, E, F>(f: F, x: &Tensor<T>, eps: f64, coords: &[usize]) -> Result<f64, E>
where
    T: Real,
    E: From<TapeError>,
    F: Fn(&mut Tape<T>, Var) -> Result<Var, E>,
{
    let mut tape = Tape::new();
    let input = tape.var(x.clone());
    let out = f(&mut tape, input)?;
    let value = tape.value(out).item().as_f64();
    if !value.is_finite() {
        return Err(TapeError::NonFinite { value, coord: None }.into());
    }
    let analytic = tape.backward(out)?.wrt(input);

    let eval = |shifted: Tensor<T>, coord: usize| -> Result<f64, E> {
        let mut tape = Tape::new();
        let input = tape.constant(shifted);
        let out = f(&mut tape, input)?;
        let value = tape.value(out).item().as_f64();
        if value.is_finite() {
            Ok(value)
        } else {
            Err(TapeError::NonFinite { value, coord: Some(coord) }.into())
        }
    };

    let mut worst = 0.0f64;
    for &c in coords {
        let base = x.data()[c].as_f64();
        let mut plus = x.clone();
        plus.data_mut()[c] = T::of(base + eps);
        let mut minus = x.clone();
        minus.data_mut()[c] = T::of(base - eps);
        let numeric = (eval(plus, c)? - eval(minus, c)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[c].as_f64(), numeric));
    }
    Ok(worst)
}
