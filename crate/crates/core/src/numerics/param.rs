use super::Matrix;
use crate::error::{Error, Result};

/// A trainable weight with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    pub fn zero_grad(&mut self) {
        self.grad.as_mut_slice().fill(0.0);
    }

    pub fn accumulate(&mut self, grad: &Matrix) -> Result<()> {
        if grad.shape() != self.value.shape() {
            return Err(Error::Dimension(format!(
                "gradient {:?} for parameter {} of shape {:?}",
                grad.shape(),
                self.name,
                self.value.shape()
            )));
        }
        self.grad.add_assign(grad)
    }

    /// Plain SGD step: `value -= lr * grad`.
    pub fn sgd_step(&mut self, lr: f64) {
        let grad = self.grad.clone();
        self.value
            .axpy(-lr, &grad)
            .expect("gradient shape equals value shape");
    }
}
