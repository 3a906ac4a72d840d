//! Central finite differences, used as an independent oracle in tests.

use ndarray::Array2;

use super::mlp::MlpParams;
use crate::error::{Error, Result};

/// `(f(x + h e_i) − f(x − h e_i)) / 2h` for every coordinate of `point`.
pub fn central_difference<F>(mut f: F, point: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!("step must be > 0, got {h}")));
    }
    let mut x = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(&x);
        x[i] = orig - h;
        let down = f(&x);
        x[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Finite-difference gradient of `Σ outputs·weights` with respect to every parameter.
pub fn param_gradient_fd(
    params: &MlpParams,
    batch: &Array2<f64>,
    output_weights: &Array2<f64>,
    h: f64,
) -> Result<Vec<f64>> {
    let mut work = params.clone();
    central_difference(
        |theta| {
            work.set_from_vec(theta).expect("length preserved");
            let y = work.predict(batch).expect("shape checked");
            (&y * output_weights).sum()
        },
        &params.to_vec(),
        h,
    )
}

/// Finite-difference input gradient of a scalar network at one input row.
pub fn input_gradient_fd(params: &MlpParams, row: &[f64], h: f64) -> Result<Vec<f64>> {
    let d = row.len();
    central_difference(
        |x| {
            let b = Array2::from_shape_vec((1, d), x.to_vec()).expect("row shape");
            params.predict(&b).expect("shape checked")[[0, 0]]
        },
        row,
        h,
    )
}
