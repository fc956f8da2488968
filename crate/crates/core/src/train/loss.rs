use crate::autodiff::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn check_labels(batch: usize, classes: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::Shape(format!("{} labels for a batch of {batch}", labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!("label {l} outside 0..{classes}")));
    }
    Ok(())
}

/// Row-wise softmax of `[B, K]` logits in `f64`, with max subtraction.
fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<(usize, usize, Vec<f64>, Vec<f64>)> {
    let (b, k) = logits.dims2()?;
    let mut probs = Vec::with_capacity(b * k);
    let mut log_norm = Vec::with_capacity(b);
    for row in logits.data().chunks_exact(k) {
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
        probs.extend(row.iter().map(|v| (v.as_f64() - max).exp() / z));
        log_norm.push(max + z.ln());
    }
    Ok((b, k, probs, log_norm))
}

/// Mean over the batch of `−log softmax(logits)[label]`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let (b, k, _, log_norm) = softmax_rows(logits)?;
    check_labels(b, k, labels)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| log_norm[i] - logits.data()[i * k + l].as_f64())
        .sum();
    Ok(total / b as f64)
}

/// Number of rows whose arg-max (first on ties) differs from the label.
pub fn count_errors<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<usize> {
    let (b, k) = logits.dims2()?;
    check_labels(b, k, labels)?;
    Ok(logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |best, (j, v)| if *v > row[best] { j } else { best });
            best != l
        })
        .count())
}

struct CrossEntropyFn {
    probs: Vec<f64>,
    labels: Vec<usize>,
}

impl<T: Scalar> Backward<T> for CrossEntropyFn {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let shape = inputs[0].shape();
        let (b, k) = (shape[0], shape[1]);
        let scale = grad.data()[0].as_f64() / b as f64;
        let mut d: Vec<f64> = self.probs.clone();
        for (i, &l) in self.labels.iter().enumerate() {
            d[i * k + l] -= 1.0;
        }
        let data = d.into_iter().map(|v| T::from_f64(v * scale)).collect();
        vec![Some(Tensor::from_parts(shape.to_vec(), data))]
    }
}

impl<T: Scalar> Tape<T> {
    /// Recorded [`softmax_cross_entropy`]; a rank-0 loss.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let loss = softmax_cross_entropy(lv, labels)?;
        let (_, _, probs, _) = softmax_rows(lv)?;
        let op = CrossEntropyFn {
            probs,
            labels: labels.to_vec(),
        };
        Ok(self.record(op, &[logits], Tensor::scalar(T::from_f64(loss))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_tape_fn, FdOptions};

    #[test]
    fn loss_examples() {
        let uniform = Tensor::<f64>::zeros(&[3, 10]);
        let l = softmax_cross_entropy(&uniform, &[0, 4, 9]).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-15);

        let mut v = vec![0.0; 10];
        v[2] = 30.0;
        let confident = Tensor::<f64>::from_f64(&[1, 10], &v).unwrap();
        assert!(softmax_cross_entropy(&confident, &[2]).unwrap() < 1e-12);

        let two = Tensor::<f64>::from_f64(&[1, 2], &[1.0, 2.0]).unwrap();
        let l = softmax_cross_entropy(&two, &[1]).unwrap();
        assert!((l - (1.0 + (-1f64).exp()).ln()).abs() < 1e-15);
        assert!((l - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn large_logits_stay_finite() {
        let t = Tensor::<f32>::from_f64(&[1, 3], &[1000.0, -1000.0, 999.0]).unwrap();
        let l = softmax_cross_entropy(&t, &[0]).unwrap();
        assert!((l - (1.0 + (-1f64).exp()).ln()).abs() < 1e-6);
    }

    #[test]
    fn invalid_labels() {
        let t = Tensor::<f64>::zeros(&[2, 3]);
        assert!(softmax_cross_entropy(&t, &[0, 3]).is_err());
        assert!(softmax_cross_entropy(&t, &[0]).is_err());
    }

    #[test]
    fn error_counting() {
        let t = Tensor::<f64>::from_f64(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 0.5, 0.5]).unwrap();
        assert_eq!(count_errors(&t, &[0, 0, 0]).unwrap(), 1);
        assert_eq!(count_errors(&t, &[1, 1, 1]).unwrap(), 2);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let logits = Tensor::<f64>::from_fn(&[4, 5], |i| ((i * 13) % 7) as f64 * 0.4 - 1.0);
        let build = |tape: &mut Tape<f64>, v: &[Var]| tape.cross_entropy(v[0], &[0, 3, 4, 1]);
        let report = check_tape_fn(&build, &["logits"], &[logits], FdOptions::default()).unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
