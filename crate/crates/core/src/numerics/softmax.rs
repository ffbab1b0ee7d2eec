use super::Matrix;
use crate::error::{Error, Result};

/// Row-wise softmax, optionally restricted to the positions where `allow_mask` is 1.
///
/// Masked-out positions are exactly zero. A row with no admissible position
/// becomes the one-hot vector at its own diagonal index, which keeps every
/// row stochastic for isolated nodes.
pub fn row_softmax(logits: &Matrix, allow_mask: Option<&Matrix>) -> Result<Matrix> {
    logits.ensure_finite("row_softmax logits")?;
    if let Some(mask) = allow_mask {
        if mask.shape() != logits.shape() {
            return Err(Error::Dimension(format!(
                "softmax mask {:?} vs logits {:?}",
                mask.shape(),
                logits.shape()
            )));
        }
        if mask.as_slice().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::Contract("softmax mask entries must be 0 or 1".into()));
        }
    }
    let (rows, cols) = logits.shape();
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let allowed = |c: usize| allow_mask.is_none_or(|m| m[(r, c)] == 1.0);
        let max = (0..cols)
            .filter(|&c| allowed(c))
            .map(|c| logits[(r, c)])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            if r >= cols {
                return Err(Error::Contract(format!(
                    "fully masked row {r} has no diagonal entry in {cols} columns"
                )));
            }
            out[(r, r)] = 1.0;
            continue;
        }
        let mut total = 0.0;
        for c in (0..cols).filter(|&c| allowed(c)) {
            let e = (logits[(r, c)] - max).exp();
            out[(r, c)] = e;
            total += e;
        }
        for x in out.row_mut(r) {
            *x /= total;
        }
    }
    Ok(out)
}

/// Vector-Jacobian product of `row_softmax` given its output.
///
/// Masked entries and one-hot fallback rows are constant in the logits, and
/// the formula below already yields zero for both.
pub fn row_softmax_backward(output: &Matrix, grad_output: &Matrix) -> Result<Matrix> {
    if output.shape() != grad_output.shape() {
        return Err(Error::Dimension("softmax backward shape".into()));
    }
    let (rows, cols) = output.shape();
    let mut grad = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let y = output.row(r);
        let dy = grad_output.row(r);
        let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
        for c in 0..cols {
            grad[(r, c)] = y[c] * (dy[c] - dot);
        }
    }
    // One-hot fallback rows: y * (dy - y.dy) is already 0 there.
    Ok(grad)
}
