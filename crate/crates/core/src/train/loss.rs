use crate::tensor::Scalar;

/// Mean softmax cross-entropy of row-major `logits [B,Q]` against `labels`,
/// stabilized by max subtraction. Returns the loss and the softmax rows.
pub fn softmax_cross_entropy<T: Scalar>(logits: &[T], labels: &[usize], q: usize) -> (T, Vec<T>) {
    let mut probs = vec![T::zero(); logits.len()];
    let mut total = T::zero();
    for (b, &label) in labels.iter().enumerate() {
        let row = &logits[b * q..(b + 1) * q];
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&v| (v - m).exp()).sum();
        let lz = z.ln();
        for (j, &v) in row.iter().enumerate() {
            probs[b * q + j] = (v - m).exp() / z;
        }
        total += lz - (row[label] - m);
    }
    (total / T::of(labels.len().max(1) as f64), probs)
}
