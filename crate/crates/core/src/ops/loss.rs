use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Row-wise softmax of `(N, K)` logits.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.rank() != 2 {
        return Err(Error::shape(format!(
            "softmax expects (N, K), got {:?}",
            logits.shape()
        )));
    }
    let k = logits.shape()[1];
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        row.iter_mut().for_each(|v| *v = *v / total);
    }
    Ok(out)
}

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to the logits.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    let probs = softmax(logits)?;
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(Error::shape(format!(
            "{} labels for {n} rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("label {bad} outside {k} classes")));
    }
    let scale = T::one() / T::from_usize(n);
    let mut loss = T::zero();
    let mut grad = probs.clone();
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits.data()[i * k..(i + 1) * k];
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let lse = row
            .iter()
            .fold(T::zero(), |acc, &v| acc + (v - max).exp())
            .ln()
            + max;
        loss = loss + (lse - row[label]);
        let g = &mut grad.data_mut()[i * k..(i + 1) * k];
        g[label] = g[label] - T::one();
        g.iter_mut().for_each(|v| *v = *v * scale);
    }
    Ok((loss * scale, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Tensor::<f64>::zeros(vec![2, 5]);
        let (loss, grad) = softmax_cross_entropy(&logits, &[0, 3]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
        assert!((grad.get(&[0, 0]).unwrap() - (0.2 - 1.0) / 2.0).abs() < 1e-12);
        assert!((grad.sum()).abs() < 1e-12);
    }

    #[test]
    fn rejects_out_of_range_label() {
        assert!(softmax_cross_entropy(&Tensor::<f32>::zeros(vec![1, 3]), &[3]).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p =
            softmax(&Tensor::new(vec![2, 3], vec![1000.0f32, 0.0, -5.0, 1.0, 2.0, 3.0]).unwrap())
                .unwrap();
        for row in p.data().chunks(3) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }
}
