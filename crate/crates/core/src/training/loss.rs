use crate::error::{Error, Result};
use crate::numerics::ops::log_sum_exp;
use crate::scalar::Scalar;

/// Mean of `logsumexp(z) − z[label]` over the batch.
pub fn cross_entropy_loss<T: Scalar>(logits: &[Vec<T>], labels: &[usize]) -> Result<T> {
    if logits.is_empty() {
        return Err(Error::dim("cross-entropy over an empty batch"));
    }
    if logits.len() != labels.len() {
        return Err(Error::dim(format!(
            "{} logit rows for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let mut total = T::zero();
    for (row, &label) in logits.iter().zip(labels) {
        if label >= row.len() {
            return Err(Error::Label {
                label,
                classes: row.len(),
            });
        }
        total += log_sum_exp(row) - row[label];
    }
    Ok(total / T::of(logits.len() as f64))
}
