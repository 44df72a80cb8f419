use crate::error::{Error, Result};
use crate::numkernel::{Scalar, Tape, Var};

/// Sum of per-annotator cross-entropies over observed labels. Missing labels
/// contribute nothing. A single pooled logits row is scored against every
/// observed label.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[Option<usize>]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 {
        return Err(Error::dim("total_loss", format!("logits must be a matrix, got {shape:?}")));
    }
    let (rows, classes) = (shape[0], shape[1]);
    if rows != 1 && rows != labels.len() {
        return Err(Error::dim(
            "total_loss",
            format!("{rows} logits rows for {} annotators", labels.len()),
        ));
    }
    let mut terms = Vec::new();
    for (k, label) in labels.iter().enumerate() {
        let Some(y) = *label else { continue };
        if y >= classes {
            return Err(Error::Index(format!("label {y} for annotator {k} with {classes} classes")));
        }
        let row = if rows == 1 { logits } else { tape.slice_rows(logits, k, 1)? };
        terms.push(tape.cross_entropy(row, y)?);
    }
    match terms.len() {
        0 => Err(Error::EmptyLoss),
        1 => Ok(terms[0]),
        _ => tape.add_all(&terms),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::{cross_entropy, Tensor};

    fn loss_of(logits: &Tensor<f64>, labels: &[Option<usize>]) -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(logits)?;
        let l = total_loss(&mut tape, v, labels)?;
        Ok(tape.value(l)[0])
    }

    #[test]
    fn uniform_logits_sum_log_c() {
        let t = Tensor::zeros(&[2, 4]);
        let l = loss_of(&t, &[Some(0), Some(3)]).unwrap();
        assert!((l - 2.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn masked_annotator_contributes_nothing() {
        let t = Tensor::from_f64(&[2, 3], &[1.0, -0.5, 0.2, 3.0, 0.0, -1.0]).unwrap();
        let single = Tensor::<f64>::from_f64(&[1, 3], &[1.0, -0.5, 0.2]).unwrap();
        let l = loss_of(&t, &[Some(2), None]).unwrap();
        assert_eq!(l, cross_entropy(&single, 2).unwrap());

        let mut tape = Tape::new();
        let v = tape.leaf(&t.clone().with_grad()).unwrap();
        let loss = total_loss(&mut tape, v, &[Some(2), None]).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(v).unwrap()[3..].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn three_annotators_equal_independent_sum() {
        let vals = [0.3, -1.2, 2.0, 0.5, 0.1, -0.7, 1.1, 1.1, -2.0];
        let t = Tensor::from_f64(&[3, 3], &vals).unwrap();
        let labels = [Some(1), Some(0), Some(2)];
        let expect: f64 = (0..3)
            .map(|k| {
                let row = Tensor::<f64>::from_f64(&[1, 3], &vals[k * 3..k * 3 + 3]).unwrap();
                cross_entropy(&row, labels[k].unwrap()).unwrap()
            })
            .sum();
        assert!((loss_of(&t, &labels).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let t = Tensor::<f64>::zeros(&[2, 4]);
        assert!(matches!(loss_of(&t, &[None, None]), Err(Error::EmptyLoss)));
        assert!(matches!(loss_of(&t, &[Some(4), None]), Err(Error::Index(_))));
        assert!(loss_of(&t, &[Some(0), None, None]).is_err());
    }

    #[test]
    fn pooled_row_scores_every_label() {
        let t = Tensor::from_f64(&[1, 2], &[0.0, 1.0]).unwrap();
        let l = loss_of(&t, &[Some(0), None, Some(1)]).unwrap();
        let e = cross_entropy(&t, 0).unwrap() + cross_entropy(&t, 1).unwrap();
        assert!((l - e).abs() < 1e-12);
    }
}
