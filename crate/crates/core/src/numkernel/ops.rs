//! Plain-tensor entry points. Each builds a throwaway tape so values match
//! the differentiable path exactly.

use super::tape::Tape;
use super::tensor::{Scalar, Tensor};
use crate::error::Result;

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.ensure_finite("matmul")?;
    b.ensure_finite("matmul")?;
    let mut t = Tape::new();
    let (av, bv) = (t.constant(a)?, t.constant(b)?);
    let c = t.matmul(av, bv)?;
    Ok(t.tensor(c))
}

pub fn softmax_lastdim<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.ensure_finite("softmax")?;
    let mut t = Tape::new();
    let xv = t.constant(x)?;
    let y = t.softmax_lastdim(xv)?;
    Ok(t.tensor(y))
}

pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    x.ensure_finite("layer_norm")?;
    let mut t = Tape::new();
    let (xv, g, b) = (t.constant(x)?, t.constant(gamma)?, t.constant(beta)?);
    let y = t.layer_norm(xv, g, b, eps)?;
    Ok(t.tensor(y))
}

pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, target: usize) -> Result<T> {
    logits.ensure_finite("cross_entropy")?;
    let mut t = Tape::new();
    let l = t.constant(logits)?;
    let y = t.cross_entropy(l, target)?;
    Ok(t.value(y)[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn matmul_identity_and_scalar() {
        let i2 = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&i2, &m).unwrap().data(), m.data());
        let a = Tensor::<f64>::from_f64(&[1, 1], &[2.0]).unwrap();
        let b = Tensor::<f64>::from_f64(&[1, 1], &[3.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_errors() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension { .. })));
        let nan = Tensor::<f32>::new(&[3, 1], vec![1.0, f32::NAN, 0.0]).unwrap();
        assert!(matches!(matmul(&a, &nan), Err(Error::Numeric { .. })));
    }

    #[test]
    fn softmax_examples() {
        let y = softmax_lastdim(&Tensor::<f64>::zeros(&[3])).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = softmax_lastdim(&Tensor::<f64>::from_f64(&[2], &[0.0, 3f64.ln()]).unwrap()).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-15);
        assert!((y.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::<f64>::full(&[3], 1.0);
        let zeros = Tensor::<f64>::zeros(&[3]);
        let y = layer_norm(&ones, &ones, &zeros, 1e-5).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);

        let x = Tensor::<f64>::from_f64(&[2], &[0.0, 2.0]).unwrap();
        let g = Tensor::<f64>::full(&[2], 1.0);
        let b = Tensor::<f64>::zeros(&[2]);
        let y = layer_norm(&x, &g, &b, 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);
        assert!(layer_norm(&x, &g, &b, 0.0).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let confident = Tensor::<f64>::from_f64(&[4], &[100.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(cross_entropy(&confident, 0).unwrap() < 1e-40);
        let uniform = Tensor::<f64>::zeros(&[4]);
        assert!((cross_entropy(&uniform, 2).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!(matches!(cross_entropy(&uniform, 4), Err(Error::Index(_))));
    }
}
