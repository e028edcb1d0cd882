//! Central-difference gradient checking.

use super::{Tape, TapePosition, Tensor};
use crate::error::{Error, Result};

/// Builds a scalar from the leaf standing in for `x`.
pub trait ScalarFn<'a>: FnMut(&mut Tape<'a>, TapePosition) -> Result<TapePosition> {}
impl<'a, F: FnMut(&mut Tape<'a>, TapePosition) -> Result<TapePosition>> ScalarFn<'a> for F {}

fn eval_at<'a>(f: &mut impl ScalarFn<'a>, shape: &[usize], data: Vec<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(shape.to_vec(), data)?);
    let y = f(&mut tape, x)?;
    let v = tape.value(y);
    if v.len() != 1 {
        return Err(Error::Contract(format!("scalar function returned {} values", v.len())));
    }
    if !v[0].is_finite() {
        return Err(Error::Numeric(format!("function value {} is not finite", v[0])));
    }
    Ok(v[0])
}

/// Max over all coordinates of `|analytic - central| / (|analytic| + |central| + 1e-12)`.
pub fn finite_diff_check<'a>(f: impl ScalarFn<'a>, x: &Tensor, h: f64) -> Result<f64> {
    let coords: Vec<usize> = (0..x.numel()).collect();
    finite_diff_check_coords(f, x, h, &coords)
}

/// As [`finite_diff_check`], restricted to the listed flat coordinates.
pub fn finite_diff_check_coords<'a>(mut f: impl ScalarFn<'a>, x: &Tensor, h: f64, coords: &[usize]) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::Contract(format!("step size must be positive, got {h}")));
    }
    let analytic = {
        let mut tape = Tape::new();
        let leaf = tape.leaf(Tensor::new(x.shape().to_vec(), x.data().to_vec())?.with_grad());
        let y = f(&mut tape, leaf)?;
        if !tape.value(y)[0].is_finite() {
            return Err(Error::Numeric("function value is not finite".into()));
        }
        tape.backward(y)?;
        tape.take_grad(leaf).unwrap_or_else(|| vec![0.0; x.numel()])
    };
    let mut worst: f64 = 0.0;
    for &i in coords {
        if i >= x.numel() {
            return Err(Error::Range(format!("coordinate {i} outside {} values", x.numel())));
        }
        let mut plus = x.data().to_vec();
        plus[i] += h;
        let mut minus = x.data().to_vec();
        minus[i] -= h;
        let fp = eval_at(&mut f, x.shape(), plus)?;
        let fm = eval_at(&mut f, x.shape(), minus)?;
        let central = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - central).abs() / (a.abs() + central.abs() + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}
