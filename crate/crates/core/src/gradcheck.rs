//! Central finite-difference check of tape gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn evaluate<F>(f: &F, point: Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point);
    let y = f(&mut tape, x)?;
    let v = tape.value(y);
    if v.numel() != 1 {
        return Err(Error::NonScalarOutput(v.shape().to_vec()));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::Divergence(format!("function value {v} at probe point")));
    }
    Ok(v)
}

/// Maximum over coordinates of `|a - n| / (|a| + |n| + 1e-12)` between the
/// tape gradient `a` and the central difference `n` with step `h`.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step h must be positive, got {h}")));
    }
    let (analytic, numeric) = gradients(&f, point, h)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs() + 1e-12))
        .fold(0.0, f64::max))
}

/// Analytic and central-difference gradients of `f` at `point`.
pub fn gradients<F>(f: &F, point: &Tensor, h: f64) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&mut tape, x)?;
    if !tape.value(y).all_finite() {
        return Err(Error::Divergence("function value at the base point".into()));
    }
    let analytic = tape.backward(y)?.wrt(x).into_data();

    let mut numeric = Vec::with_capacity(point.numel());
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        numeric.push((evaluate(f, plus)? - evaluate(f, minus)?) / (2.0 * h));
    }
    Ok((analytic, numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squared_norm_is_exact() {
        let point = Tensor::vector(vec![0.3, -1.2, 2.5, 0.01]);
        let err = grad_check(
            |t, x| {
                let n = t.l2_norm(x)?;
                t.square(n)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let point = Tensor::vector(vec![1.0, 2.0]);
        let err = grad_check(|t, _| Ok(t.scalar(4.0)), &point, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_probe_is_reported() {
        let point = Tensor::vector(vec![1e-6]);
        let res = grad_check(
            |t, x| {
                let l = t.log(x)?;
                t.sum(l)
            },
            &point,
            1e-5,
        );
        assert!(res.is_err());
    }

    #[test]
    fn rejects_non_positive_step() {
        assert!(grad_check(|t, x| t.sum(x), &Tensor::vector(vec![1.0]), 0.0).is_err());
    }
}
