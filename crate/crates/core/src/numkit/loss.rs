use super::Matrix;
use crate::error::{Error, Result};

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Mean cross-entropy over rows and its gradient `(softmax − onehot)/n`.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (n, c) = logits.shape();
    if labels.len() != n {
        return Err(Error::Dimension {
            op: "softmax_cross_entropy",
            left: logits.shape(),
            right: (labels.len(), 1),
        });
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::validation(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    if n == 0 {
        return Ok((0.0, Matrix::zeros(0, c)));
    }
    let mut grad = softmax(logits);
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        let g = grad.row_mut(r);
        g[y] -= 1.0;
        for v in g.iter_mut() {
            *v *= inv_n;
        }
    }
    Ok((loss * inv_n, grad))
}

/// Mean over all entries of `(pred − target)²`, with gradients for both arguments.
pub fn mse(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix, Matrix)> {
    if pred.shape() != target.shape() {
        return Err(Error::Dimension {
            op: "mse",
            left: pred.shape(),
            right: target.shape(),
        });
    }
    let count = pred.data().len();
    if count == 0 {
        return Ok((0.0, pred.clone(), target.clone()));
    }
    let diff = pred.sub(target)?;
    let loss = diff.sum_sq() / count as f64;
    let grad_pred = diff.scale(2.0 / count as f64);
    let grad_target = grad_pred.scale(-1.0);
    Ok((loss, grad_pred, grad_target))
}
