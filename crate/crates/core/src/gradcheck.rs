//! Central finite differences, the independent oracle for every analytic
//! gradient in the crate.

use crate::error::{Error, Result};
use crate::tensor::NdArray;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every coordinate of `point`.
pub fn finite_diff(
    mut f: impl FnMut(&NdArray) -> f64,
    point: &NdArray,
    step: f64,
) -> Result<NdArray> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid(format!("finite_diff step must be > 0, got {step}")));
    }
    if !point.all_finite() {
        return Err(Error::NonFinite("finite_diff point".into()));
    }
    let mut x = point.clone();
    let mut out = NdArray::zeros(point.shape());
    for i in 0..point.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + step;
        let fp = f(&x);
        x.data_mut()[i] = orig - step;
        let fm = f(&x);
        x.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!(
                "finite_diff: f is non-finite near coordinate {i}"
            )));
        }
        out.data_mut()[i] = (fp - fm) / (2.0 * step);
    }
    Ok(out)
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
///
/// The floor keeps near-zero gradients from producing meaningless ratios.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let g = finite_diff(|x| x.data()[0] * x.data()[0], &NdArray::scalar(3.0), 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_is_zero() {
        let p = NdArray::vector(vec![1.0, -2.0, 0.5]);
        let g = finite_diff(|_| 4.2, &p, 1e-5).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_non_finite_and_bad_step() {
        let p = NdArray::scalar(1.0);
        assert!(finite_diff(|_| f64::NAN, &p, 1e-5).is_err());
        assert!(finite_diff(|x| x.data()[0], &p, 0.0).is_err());
    }
}
