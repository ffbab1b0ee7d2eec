//! Reverse-mode differentiation over dense matrices.
//!
//! Every differentiable operation in the crate is written against [`Tape`],
//! so the forward value and its analytic vector-Jacobian product come from
//! the same code path.

use super::softmax::{row_softmax, row_softmax_backward};
use super::{Matrix, Parameter};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Hadamard(Var, Var),
    MulConst(Var, Matrix),
    Transpose(Var),
    Softmax(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    Relu(Var),
    LeakyRelu(Var, f64),
    AddRowBroadcast(Var, Var),
    PairSum(Var, Var),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    SumAll(Var),
    InvSqrt(Var, f64),
    BceWithLogits(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Matrix>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, p: &Parameter) -> Var {
        self.leaf(p.value.clone())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(v, Op::Hadamard(a, b)))
    }

    /// Elementwise product with a constant matrix.
    pub fn mul_const(&mut self, a: Var, c: &Matrix) -> Result<Var> {
        let v = self.value(a).hadamard(c)?;
        Ok(self.push(v, Op::MulConst(a, c.clone())))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn row_softmax(&mut self, a: Var, allow_mask: Option<&Matrix>) -> Result<Var> {
        let v = row_softmax(self.value(a), allow_mask)?;
        Ok(self.push(v, Op::Softmax(a)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).slice_cols(start, len)?;
        Ok(self.push(v, Op::SliceCols(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Matrix::concat_cols(&mats)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).slice_rows(start, len)?;
        Ok(self.push(v, Op::SliceRows(a, start)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Matrix::concat_rows(&mats)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    /// `a` (n x c) plus the single row `b` (1 x c) added to every row.
    pub fn add_row_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if self.shape(b) != (1, cols) {
            return Err(Error::Dimension(format!(
                "row broadcast of {:?} onto {:?}",
                self.shape(b),
                (rows, cols)
            )));
        }
        let bias = self.value(b).clone();
        let v = Matrix::from_fn(rows, cols, |r, c| self.value(a)[(r, c)] + bias[(0, c)]);
        Ok(self.push(v, Op::AddRowBroadcast(a, b)))
    }

    /// Column vectors `f` (n x 1) and `g` (m x 1) to the n x m matrix `f_i + g_j`.
    pub fn pair_sum(&mut self, f: Var, g: Var) -> Result<Var> {
        let (n, fc) = self.shape(f);
        let (m, gc) = self.shape(g);
        if fc != 1 || gc != 1 {
            return Err(Error::Dimension("pair_sum expects column vectors".into()));
        }
        let v = Matrix::from_fn(n, m, |i, j| self.value(f)[(i, 0)] + self.value(g)[(j, 0)]);
        Ok(self.push(v, Op::PairSum(f, g)))
    }

    /// Output row `i` is row `indices[i]` of `table`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(bad) = indices.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::LookupMsg(format!(
                "row {bad} out of range for table with {} rows",
                t.rows()
            )));
        }
        if indices.is_empty() {
            return Err(Error::Dimension("gather of zero rows".into()));
        }
        let v = t.permute_rows(indices);
        Ok(self.push(v, Op::GatherRows(table, indices.to_vec())))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_rows();
        self.push(v, Op::MeanRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Matrix::filled(1, 1, self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    /// Elementwise `1 / sqrt(x + eps)`.
    pub fn inv_sqrt(&mut self, a: Var, eps: f64) -> Result<Var> {
        let v = self.value(a).map(|x| 1.0 / (x + eps).sqrt());
        v.ensure_finite("inv_sqrt")?;
        Ok(self.push(v, Op::InvSqrt(a, eps)))
    }

    /// Binary cross-entropy of a 1x1 logit against `label` in {0, 1}.
    pub fn bce_with_logits(&mut self, z: Var, label: f64) -> Result<Var> {
        if self.shape(z) != (1, 1) {
            return Err(Error::Dimension("bce expects a 1x1 logit".into()));
        }
        let x = self.value(z)[(0, 0)];
        // log(1 + e^x) - label * x, evaluated stably
        let loss = x.max(0.0) + (-x.abs()).exp().ln_1p() - label * x;
        Ok(self.push(Matrix::filled(1, 1, loss), Op::BceWithLogits(z, label)))
    }

    /// Back-propagates from the 1x1 `root`; afterwards [`Tape::grad`] holds
    /// d root / d v for every recorded value.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.shape(root) != (1, 1) {
            return Err(Error::Dimension("backward root must be 1x1".into()));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut send = |v: Var, d: Matrix| -> Result<()> {
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&d),
                    slot @ None => {
                        *slot = Some(d);
                        Ok(())
                    }
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    send(*a, g.matmul(&bv.transpose())?)?;
                    send(*b, av.transpose().matmul(&g)?)?;
                }
                Op::Add(a, b) => {
                    send(*a, g.clone())?;
                    send(*b, g.clone())?;
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone())?;
                    send(*b, g.scale(-1.0))?;
                }
                Op::Scale(a, s) => send(*a, g.scale(*s))?,
                Op::Hadamard(a, b) => {
                    send(*a, g.hadamard(&self.nodes[b.0].value)?)?;
                    send(*b, g.hadamard(&self.nodes[a.0].value)?)?;
                }
                Op::MulConst(a, c) => send(*a, g.hadamard(c)?)?,
                Op::Transpose(a) => send(*a, g.transpose())?,
                Op::Softmax(a) => send(*a, row_softmax_backward(&node.value, &g)?)?,
                Op::SliceCols(a, start) => {
                    let (rows, cols) = self.nodes[a.0].value.shape();
                    let width = g.cols();
                    let d = Matrix::from_fn(rows, cols, |r, c| {
                        if c >= *start && c < start + width {
                            g[(r, c - start)]
                        } else {
                            0.0
                        }
                    });
                    send(*a, d)?;
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.nodes[p.0].value.cols();
                        send(*p, g.slice_cols(offset, w)?)?;
                        offset += w;
                    }
                }
                Op::SliceRows(a, start) => {
                    let (rows, cols) = self.nodes[a.0].value.shape();
                    let height = g.rows();
                    let d = Matrix::from_fn(rows, cols, |r, c| {
                        if r >= *start && r < start + height {
                            g[(r - start, c)]
                        } else {
                            0.0
                        }
                    });
                    send(*a, d)?;
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let h = self.nodes[p.0].value.rows();
                        send(*p, g.slice_rows(offset, h)?)?;
                        offset += h;
                    }
                }
                Op::Relu(a) => {
                    let d = self.nodes[a.0]
                        .value
                        .zip_with(&g, "relu", |x, dy| if x > 0.0 { dy } else { 0.0 })?;
                    send(*a, d)?;
                }
                Op::LeakyRelu(a, slope) => {
                    let d = self.nodes[a.0]
                        .value
                        .zip_with(&g, "leaky_relu", |x, dy| if x > 0.0 { dy } else { slope * dy })?;
                    send(*a, d)?;
                }
                Op::AddRowBroadcast(a, b) => {
                    send(*a, g.clone())?;
                    send(*b, g.mean_rows().scale(g.rows() as f64))?;
                }
                Op::PairSum(f, gv) => {
                    let row_sums = Matrix::new(g.rows(), 1, g.row_sums())?;
                    let col_sums = g.transpose();
                    let col_sums = Matrix::new(g.cols(), 1, col_sums.row_sums())?;
                    send(*f, row_sums)?;
                    send(*gv, col_sums)?;
                }
                Op::GatherRows(table, indices) => {
                    let (rows, cols) = self.nodes[table.0].value.shape();
                    let mut d = Matrix::zeros(rows, cols);
                    for (out_row, &src) in indices.iter().enumerate() {
                        for c in 0..cols {
                            d[(src, c)] += g[(out_row, c)];
                        }
                    }
                    send(*table, d)?;
                }
                Op::MeanRows(a) => {
                    let rows = self.nodes[a.0].value.rows();
                    let d = Matrix::from_fn(rows, g.cols(), |_, c| g[(0, c)] / rows as f64);
                    send(*a, d)?;
                }
                Op::SumAll(a) => {
                    let (rows, cols) = self.nodes[a.0].value.shape();
                    send(*a, Matrix::filled(rows, cols, g[(0, 0)]))?;
                }
                Op::InvSqrt(a, eps) => {
                    let d = self.nodes[a.0]
                        .value
                        .zip_with(&g, "inv_sqrt", |x, dy| -0.5 * dy * (x + eps).powf(-1.5))?;
                    send(*a, d)?;
                }
                Op::BceWithLogits(z, label) => {
                    let x = self.nodes[z.0].value[(0, 0)];
                    let sigmoid = 1.0 / (1.0 + (-x).exp());
                    send(*z, Matrix::filled(1, 1, g[(0, 0)] * (sigmoid - label)))?;
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last `backward` root with respect to `v`; zero if `v`
    /// did not influence the root.
    pub fn grad(&self, v: Var) -> Matrix {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shape(v);
                Matrix::zeros(r, c)
            }
        }
    }
}

/// Runs `build` with each parameter bound to a tape leaf, back-propagates
/// from its scalar output, and returns the value with one gradient per
/// parameter.
pub fn value_and_grad<F>(params: &[Parameter], build: F) -> Result<(f64, Vec<Matrix>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let root = build(&mut tape, &vars)?;
    let value = tape.value(root)[(0, 0)];
    if !value.is_finite() {
        return Err(Error::Numeric(format!("objective evaluated to {value}")));
    }
    tape.backward(root)?;
    Ok((value, vars.iter().map(|v| tape.grad(*v)).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_gradient_by_hand() {
        // f = sum(A B); df/dA = 1 B^T, df/dB = A^T 1
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        let mut tape = Tape::new();
        let va = tape.leaf(a);
        let vb = tape.leaf(b);
        let p = tape.matmul(va, vb).unwrap();
        let s = tape.sum_all(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(va).to_rows(), vec![vec![5.0, 6.0], vec![5.0, 6.0]]);
        assert_eq!(tape.grad(vb).to_rows(), vec![vec![4.0], vec![6.0]]);
    }

    #[test]
    fn reused_value_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::filled(1, 1, 3.0));
        let sq = tape.hadamard(x, x).unwrap();
        let s = tape.sum_all(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x)[(0, 0)], 6.0);
    }

    #[test]
    fn unused_leaf_has_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::filled(2, 2, 1.0));
        let y = tape.leaf(Matrix::filled(1, 1, 1.0));
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x), Matrix::zeros(2, 2));
    }

    #[test]
    fn bce_is_stable_for_large_logits() {
        let mut tape = Tape::new();
        let z = tape.leaf(Matrix::filled(1, 1, 800.0));
        let l = tape.bce_with_logits(z, 1.0).unwrap();
        assert!(tape.value(l)[(0, 0)].abs() < 1e-12);
        let z = tape.leaf(Matrix::filled(1, 1, -800.0));
        let l = tape.bce_with_logits(z, 1.0).unwrap();
        assert!((tape.value(l)[(0, 0)] - 800.0).abs() < 1e-9);
    }

    #[test]
    fn gather_out_of_range() {
        let mut tape = Tape::new();
        let t = tape.leaf(Matrix::zeros(2, 3));
        assert!(matches!(tape.gather_rows(t, &[0, 2]), Err(Error::LookupMsg(_))));
    }
}
