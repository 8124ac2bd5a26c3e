//! Dense tensors with reverse-mode differentiation, covering the primitives the
//! imputation model needs, plus Adam and parameter checkpoints.

mod adam;
mod params;
mod tape;
mod tensor;

pub use adam::{Adam, BETA1, BETA2, EPSILON};
pub use params::{Param, ParamSet};
pub use tape::{huber_value, softmax, Gradients, KeyLists, Tape, Var};
pub use tensor::Tensor;

/// Relative error used by gradient checks: `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central finite difference of `f` with respect to entry `k` of `x`.
pub fn central_difference<F>(x: &mut [f64], k: usize, h: f64, mut f: F) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let orig = x[k];
    x[k] = orig + h;
    let up = f(x);
    x[k] = orig - h;
    let down = f(x);
    x[k] = orig;
    (up - down) / (2.0 * h)
}
