//! Central-difference gradient oracle.

use super::tape::{Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn evaluate<T: Scalar, F>(f: &F, x: &Tensor<T>) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.constant(x)?;
    let y = f(&mut tape, xv)?;
    Ok(tape.value(y).iter().map(|v| v.as_f64()).collect())
}

/// Full Jacobian `[out × in]` from the tape, one backward pass per output.
pub fn tape_jacobian<T: Scalar, F>(f: &F, x: &Tensor<T>) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut probe = Tape::new();
    let pv = probe.constant(x)?;
    let py = f(&mut probe, pv)?;
    let out_len = probe.value(py).len();
    let mut rows = Vec::with_capacity(out_len);
    for j in 0..out_len {
        let mut tape = Tape::new();
        let xv = tape.param(x)?;
        let y = f(&mut tape, xv)?;
        let mut seed = vec![T::zero(); out_len];
        seed[j] = T::one();
        tape.backward_with_seed(y, &seed)?;
        rows.push(match tape.grad(xv) {
            Some(g) => g.iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; x.len()],
        });
    }
    Ok(rows)
}

/// Jacobian `[out × in]` by sixth-order central differences
/// `(45 d(h) − 9 d(2h) + d(3h)) / 60h` with `d(s) = f(x+s) − f(x−s)`.
pub fn central_jacobian<T: Scalar, F>(f: &F, x: &Tensor<T>, h: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    if !(1e-6..=1e-2).contains(&h) {
        return Err(Error::Contract(format!("step h={h} outside [1e-6, 1e-2]")));
    }
    let base = evaluate(f, x)?;
    let again = evaluate(f, x)?;
    if base.iter().zip(&again).any(|(a, b)| a.to_bits() != b.to_bits()) {
        return Err(Error::Contract(
            "function is not deterministic: repeated evaluation differs".into(),
        ));
    }
    let mut jac = vec![vec![0.0; x.len()]; base.len()];
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        let mut at = |offset: f64| {
            probe.data_mut()[i] = T::from_f64(orig.as_f64() + offset);
            let y = evaluate(f, &probe);
            probe.data_mut()[i] = orig;
            y
        };
        let (p1, m1, p2, m2, p3, m3) =
            (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?, at(3.0 * h)?, at(-3.0 * h)?);
        for (j, row) in jac.iter_mut().enumerate() {
            let d1 = p1[j] - m1[j];
            let d2 = p2[j] - m2[j];
            let d3 = p3[j] - m3[j];
            row[i] = (45.0 * d1 - 9.0 * d2 + d3) / (60.0 * h);
        }
    }
    Ok(jac)
}

fn max_relative_error(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(&x, &y)| relative_error(x, y))
        .fold(0.0, f64::max)
}

/// Compares the tape gradient of `f` at `x` with central differences in the
/// same precision and returns the maximum relative error over all Jacobian
/// entries.
pub fn finite_diff_check<T: Scalar, F>(f: F, x: &Tensor<T>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let numeric = central_jacobian(&f, x, h)?;
    let analytic = tape_jacobian(&f, x)?;
    Ok(max_relative_error(&analytic, &numeric))
}

/// Checks a low-precision tape gradient against central differences taken in
/// 64-bit arithmetic. `f_low` and `f_high` must build the same function.
pub fn finite_diff_check_with_oracle<T: Scalar, F, G>(
    f_low: F,
    f_high: G,
    x: &Tensor<T>,
    h: f64,
) -> Result<f64>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
    G: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let numeric = central_jacobian(&f_high, &x.cast::<f64>(), h)?;
    let analytic = tape_jacobian(&f_low, x)?;
    Ok(max_relative_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn identity_has_zero_error() {
        let x = Tensor::<f64>::from_f64(&[4], &[0.3, -1.2, 2.0, 0.0]).unwrap();
        let err = finite_diff_check(|_, v| Ok(v), &x, 1e-4).unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn step_outside_range_is_rejected() {
        let x = Tensor::<f64>::scalar(1.0);
        assert!(finite_diff_check(|_, v| Ok(v), &x, 0.1).is_err());
        assert!(finite_diff_check(|_, v| Ok(v), &x, 1e-7).is_err());
    }

    #[test]
    fn nondeterminism_is_detected() {
        let calls = Cell::new(0u32);
        let x = Tensor::<f64>::scalar(1.0);
        let r = finite_diff_check(
            |tape, v| {
                calls.set(calls.get() + 1);
                tape.scale(v, 1.0 + calls.get() as f64)
            },
            &x,
            1e-4,
        );
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
