use super::Matrix;
use crate::error::{Error, Result};

/// Pivots smaller than this in magnitude are treated as singular.
pub const PIVOT_THRESHOLD: f64 = 1e-12;

/// Solves `A X = B` by Gaussian elimination with partial pivoting.
pub fn solve_linear_system(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::Dimension(format!("solve: A is {:?}, not square", a.shape())));
    }
    if b.rows() != a.rows() {
        return Err(Error::Dimension(format!(
            "solve: B has {} rows, A has {}",
            b.rows(),
            a.rows()
        )));
    }
    a.ensure_finite("solve A")?;
    b.ensure_finite("solve B")?;
    let n = a.rows();
    let m = b.cols();
    let mut lu = a.clone();
    let mut x = b.clone();
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| lu[(i, col)].abs().total_cmp(&lu[(j, col)].abs()))
            .expect("non-empty range");
        let pivot = lu[(pivot_row, col)];
        if pivot.abs() < PIVOT_THRESHOLD {
            return Err(Error::Singular(format!(
                "pivot {pivot:e} in column {col} below {PIVOT_THRESHOLD:e}"
            )));
        }
        if pivot_row != col {
            swap_rows(&mut lu, pivot_row, col);
            swap_rows(&mut x, pivot_row, col);
        }
        for r in col + 1..n {
            let factor = lu[(r, col)] / pivot;
            if factor == 0.0 {
                continue;
            }
            for c in col..n {
                lu[(r, c)] -= factor * lu[(col, c)];
            }
            for c in 0..m {
                x[(r, c)] -= factor * x[(col, c)];
            }
        }
    }
    for col in (0..n).rev() {
        let pivot = lu[(col, col)];
        for c in 0..m {
            let mut acc = x[(col, c)];
            for k in col + 1..n {
                acc -= lu[(col, k)] * x[(k, c)];
            }
            x[(col, c)] = acc / pivot;
        }
    }
    x.ensure_finite("solve result")?;
    Ok(x)
}

fn swap_rows(m: &mut Matrix, a: usize, b: usize) {
    for c in 0..m.cols() {
        let tmp = m[(a, c)];
        m[(a, c)] = m[(b, c)];
        m[(b, c)] = tmp;
    }
}
