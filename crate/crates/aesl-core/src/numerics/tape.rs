//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! Nodes are appended in program order, so node ids are already a topological
//! order of the computation graph. The backward pass walks ids in reverse,
//! which guarantees every node's gradient is complete before it is propagated
//! to its inputs.

use crate::error::{AeslError, Result};
use crate::numerics::matrix::{row_norm, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    /// a: NxC plus a 1xC bias broadcast over rows.
    AddRowBroadcast(NodeId, NodeId),
    /// a scaled by a 1x1 node.
    ScaleByScalarNode(NodeId, NodeId),
    ScaleConst(NodeId, f64),
    AddConst(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Ln(NodeId),
    Arctanh(NodeId),
    Clamp(NodeId, f64, f64),
    CenterRows(NodeId),
    NormalizeRows(NodeId),
    /// A * A^T of an NxD input.
    Gram(NodeId),
    SumAll(NodeId),
    SliceRow(NodeId, usize),
    SliceRows(NodeId, usize, usize),
    /// z: NxD gated entrywise by a 1xD row broadcast over rows.
    RowGate(NodeId, NodeId),
    ConcatCols(Vec<NodeId>),
}

struct Node {
    op: Op,
    value: Matrix,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradient accumulators produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a node, with absent gradients materialized as zeros.
    pub fn get_or_zeros(&self, id: NodeId, like: &Matrix) -> Matrix {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Matrix::zeros(like.rows(), like.cols()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Records an input. Leaves carry no history; gradients accumulate on
    /// them so callers can read parameter gradients after `backward`.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(Op::Hadamard(a, b), value))
    }

    pub fn add_row_broadcast(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let value = self.value(a).add_row_broadcast(self.value(bias))?;
        Ok(self.push(Op::AddRowBroadcast(a, bias), value))
    }

    /// Multiplies every entry of `a` by the value of a 1x1 node.
    pub fn scale_by_scalar_node(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let factor = self.value(s).item()?;
        let value = self.value(a).scale(factor);
        Ok(self.push(Op::ScaleByScalarNode(a, s), value))
    }

    pub fn scale_const(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.value(a).scale(factor);
        self.push(Op::ScaleConst(a, factor), value)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).map(|v| v + c);
        self.push(Op::AddConst(a), value)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(Op::Relu(a), value)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), value)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::ln);
        self.push(Op::Ln(a), value)
    }

    pub fn arctanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::atanh);
        self.push(Op::Arctanh(a), value)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let value = self.value(a).map(|v| v.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), value)
    }

    pub fn center_rows(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).center_rows();
        self.push(Op::CenterRows(a), value)
    }

    /// Rows scaled to unit norm. Errors naming the first zero-norm row.
    pub fn normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).normalize_rows(ZERO_NORM_GUARD)?;
        Ok(self.push(Op::NormalizeRows(a), value))
    }

    pub fn gram(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let value = v.matmul(&v.transpose())?;
        Ok(self.push(Op::Gram(a), value))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(Op::SumAll(a), value)
    }

    pub fn slice_row(&mut self, a: NodeId, row: usize) -> Result<NodeId> {
        let v = self.value(a);
        if row >= v.rows() {
            return Err(AeslError::invalid(format!(
                "slice_row: row {row} out of range for {}x{}",
                v.rows(),
                v.cols()
            )));
        }
        let value = Matrix::from_vec(1, v.cols(), v.row(row).to_vec())?;
        Ok(self.push(Op::SliceRow(a, row), value))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(a);
        if start + len > v.rows() {
            return Err(AeslError::invalid(format!(
                "slice_rows: range {start}..{} out of bounds for {} rows",
                start + len,
                v.rows()
            )));
        }
        let value = v.select_rows(&(start..start + len).collect::<Vec<_>>());
        Ok(self.push(Op::SliceRows(a, start, len), value))
    }

    /// Entrywise product of an NxD matrix with a 1xD row broadcast down rows.
    pub fn row_gate(&mut self, z: NodeId, gate: NodeId) -> Result<NodeId> {
        let zv = self.value(z);
        let gv = self.value(gate);
        if gv.rows() != 1 || gv.cols() != zv.cols() {
            return Err(AeslError::ShapeMismatch {
                op: "row_gate",
                left_rows: zv.rows(),
                left_cols: zv.cols(),
                right_rows: gv.rows(),
                right_cols: gv.cols(),
            });
        }
        let mut value = zv.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            for (x, g) in row.iter_mut().zip(gv.as_slice()) {
                *x *= g;
            }
        }
        Ok(self.push(Op::RowGate(z, gate), value))
    }

    /// Concatenates Nx1 columns into an NxK matrix.
    pub fn concat_cols(&mut self, cols: &[NodeId]) -> Result<NodeId> {
        if cols.is_empty() {
            return Err(AeslError::invalid("concat_cols: no columns"));
        }
        let n = self.value(cols[0]).rows();
        for &c in cols {
            let v = self.value(c);
            if v.cols() != 1 || v.rows() != n {
                return Err(AeslError::ShapeMismatch {
                    op: "concat_cols",
                    left_rows: n,
                    left_cols: 1,
                    right_rows: v.rows(),
                    right_cols: v.cols(),
                });
            }
        }
        let mut value = Matrix::zeros(n, cols.len());
        for (j, &c) in cols.iter().enumerate() {
            let col = self.value(c);
            for r in 0..n {
                value.set(r, j, col.get(r, 0));
            }
        }
        Ok(self.push(Op::ConcatCols(cols.to_vec()), value))
    }

    /// Accumulates d(loss)/d(node) for every node reachable from `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.shape() != (1, 1) {
            return Err(AeslError::NonScalarLoss {
                rows: loss_value.rows(),
                cols: loss_value.cols(),
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let grad = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &grad, &mut grads)?;
            grads[idx] = Some(grad);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, grad: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let accum = |grads: &mut [Option<Matrix>], id: NodeId, delta: Matrix| -> Result<()> {
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&delta)?,
                slot @ None => *slot = Some(delta),
            }
            Ok(())
        };

        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = grad.matmul(&self.value(*b).transpose())?;
                let db = self.value(*a).transpose().matmul(grad)?;
                accum(grads, *a, da)?;
                accum(grads, *b, db)?;
            }
            Op::Add(a, b) => {
                accum(grads, *a, grad.clone())?;
                accum(grads, *b, grad.clone())?;
            }
            Op::Sub(a, b) => {
                accum(grads, *a, grad.clone())?;
                accum(grads, *b, grad.scale(-1.0))?;
            }
            Op::Hadamard(a, b) => {
                accum(grads, *a, grad.hadamard(self.value(*b))?)?;
                accum(grads, *b, grad.hadamard(self.value(*a))?)?;
            }
            Op::AddRowBroadcast(a, bias) => {
                accum(grads, *a, grad.clone())?;
                accum(grads, *bias, grad.column_sums())?;
            }
            Op::ScaleByScalarNode(a, s) => {
                let factor = self.value(*s).item()?;
                accum(grads, *a, grad.scale(factor))?;
                let ds = grad.hadamard(self.value(*a))?.sum();
                accum(grads, *s, Matrix::scalar(ds))?;
            }
            Op::ScaleConst(a, factor) => {
                accum(grads, *a, grad.scale(*factor))?;
            }
            Op::AddConst(a) => {
                accum(grads, *a, grad.clone())?;
            }
            Op::Relu(a) => {
                let input = self.value(*a);
                let mut delta = grad.clone();
                for (d, &x) in delta.as_mut_slice().iter_mut().zip(input.as_slice()) {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                }
                accum(grads, *a, delta)?;
            }
            Op::Sigmoid(a) => {
                let out = &self.nodes[idx].value;
                let mut delta = grad.clone();
                for (d, &y) in delta.as_mut_slice().iter_mut().zip(out.as_slice()) {
                    *d *= y * (1.0 - y);
                }
                accum(grads, *a, delta)?;
            }
            Op::Ln(a) => {
                let input = self.value(*a);
                let mut delta = grad.clone();
                for (d, &x) in delta.as_mut_slice().iter_mut().zip(input.as_slice()) {
                    *d /= x;
                }
                accum(grads, *a, delta)?;
            }
            Op::Arctanh(a) => {
                let input = self.value(*a);
                let mut delta = grad.clone();
                for (d, &x) in delta.as_mut_slice().iter_mut().zip(input.as_slice()) {
                    *d /= 1.0 - x * x;
                }
                accum(grads, *a, delta)?;
            }
            Op::Clamp(a, lo, hi) => {
                let input = self.value(*a);
                let mut delta = grad.clone();
                for (d, &x) in delta.as_mut_slice().iter_mut().zip(input.as_slice()) {
                    if x < *lo || x > *hi {
                        *d = 0.0;
                    }
                }
                accum(grads, *a, delta)?;
            }
            Op::CenterRows(a) => {
                // The centering projector I - (1/n) 1 1^T is symmetric, so
                // the adjoint is centering applied to the gradient.
                accum(grads, *a, grad.center_rows())?;
            }
            Op::NormalizeRows(a) => {
                let input = self.value(*a);
                let output = &self.nodes[idx].value;
                let mut delta = Matrix::zeros(input.rows(), input.cols());
                for r in 0..input.rows() {
                    let norm = row_norm(input.row(r));
                    let y = output.row(r);
                    let g = grad.row(r);
                    let mut dot = 0.0;
                    for (gy, yy) in g.iter().zip(y) {
                        dot += gy * yy;
                    }
                    let out_row = delta.row_mut(r);
                    for ((o, gy), yy) in out_row.iter_mut().zip(g).zip(y) {
                        *o = (gy - dot * yy) / norm;
                    }
                }
                accum(grads, *a, delta)?;
            }
            Op::Gram(a) => {
                let input = self.value(*a);
                let delta = grad.add(&grad.transpose())?.matmul(input)?;
                accum(grads, *a, delta)?;
            }
            Op::SumAll(a) => {
                let input = self.value(*a);
                let g = grad.item()?;
                accum(grads, *a, Matrix::filled(input.rows(), input.cols(), g))?;
            }
            Op::SliceRow(a, row) => {
                let input = self.value(*a);
                let mut delta = Matrix::zeros(input.rows(), input.cols());
                delta.row_mut(*row).copy_from_slice(grad.row(0));
                accum(grads, *a, delta)?;
            }
            Op::SliceRows(a, start, len) => {
                let input = self.value(*a);
                let mut delta = Matrix::zeros(input.rows(), input.cols());
                for r in 0..*len {
                    delta.row_mut(start + r).copy_from_slice(grad.row(r));
                }
                accum(grads, *a, delta)?;
            }
            Op::RowGate(z, gate) => {
                let zv = self.value(*z);
                let gv = self.value(*gate);
                let mut dz = grad.clone();
                for r in 0..dz.rows() {
                    let row = dz.row_mut(r);
                    for (d, g) in row.iter_mut().zip(gv.as_slice()) {
                        *d *= g;
                    }
                }
                let gz = grad.hadamard(zv)?;
                accum(grads, *z, dz)?;
                accum(grads, *gate, gz.column_sums())?;
            }
            Op::ConcatCols(cols) => {
                for (j, &c) in cols.iter().enumerate() {
                    let mut delta = Matrix::zeros(grad.rows(), 1);
                    for r in 0..grad.rows() {
                        delta.set(r, 0, grad.get(r, j));
                    }
                    accum(grads, c, delta)?;
                }
            }
        }
        Ok(())
    }
}

/// Norm threshold below which row normalization refuses to divide.
pub const ZERO_NORM_GUARD: f64 = 1e-12;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_gradient() {
        // loss = x^T x at x = [1, 2] has gradient [2, 4]
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let sq = tape.hadamard(x, x).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut tape = Tape::new();
        let w = tape.leaf(Matrix::scalar(0.0));
        let s = tape.sigmoid(w);
        let loss = tape.sum_all(s);
        let grads = tape.backward(loss).unwrap();
        assert!((grads.get(w).unwrap().item().unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::zeros(2, 2));
        let y = tape.relu(x);
        assert!(matches!(
            tape.backward(y),
            Err(AeslError::NonScalarLoss { rows: 2, cols: 2 })
        ));
    }

    #[test]
    fn normalize_rows_zero_norm_names_row() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap(),
        );
        match tape.normalize_rows(x) {
            Err(AeslError::ZeroCenteredNorm { row }) => assert_eq!(row, 1),
            other => panic!("expected zero-norm error, got {other:?}"),
        }
    }

    /// Random composite graphs match central finite differences.
    #[test]
    fn random_graph_matches_finite_differences() {
        for seed in 0..6 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a0 = Matrix::standard_normal(4, 3, &mut rng);
            let b0 = Matrix::standard_normal(3, 5, &mut rng);
            let c0 = Matrix::standard_normal(1, 5, &mut rng);
            let params = vec![a0, b0, c0];
            let build = |p: &[Matrix], tape: &mut Tape| -> NodeId {
                let a = tape.leaf(p[0].clone());
                let b = tape.leaf(p[1].clone());
                let c = tape.leaf(p[2].clone());
                let prod = tape.matmul(a, b).unwrap();
                let shifted = tape.add_row_broadcast(prod, c).unwrap();
                let act = tape.sigmoid(shifted);
                let centered = tape.center_rows(act);
                let scaled = tape.scale_const(centered, 1.7);
                let sq = tape.hadamard(scaled, scaled).unwrap();
                tape.sum_all(sq)
            };
            finite_diff_check(&params, build, 1e-6, 1e-4);
        }
    }

    #[test]
    fn rsm_style_graph_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let z0 = Matrix::standard_normal(5, 3, &mut rng);
        let params = vec![z0];
        let build = |p: &[Matrix], tape: &mut Tape| -> NodeId {
            let z = tape.leaf(p[0].clone());
            let centered = tape.center_rows(z);
            let normed = tape.normalize_rows(centered).unwrap();
            let cos = tape.gram(normed).unwrap();
            let clamped = tape.clamp(cos, -1.0 + 1e-6, 1.0 - 1e-6);
            let warped = tape.arctanh(clamped);
            let sq = tape.hadamard(warped, warped).unwrap();
            tape.sum_all(sq)
        };
        finite_diff_check(&params, build, 1e-6, 1e-4);
    }

    #[test]
    fn per_label_graph_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z0 = Matrix::standard_normal(4, 3, &mut rng);
        let alpha0 = Matrix::standard_normal(2, 3, &mut rng);
        let eps0 = Matrix::scalar(0.3);
        let params = vec![z0, alpha0, eps0];
        let build = |p: &[Matrix], tape: &mut Tape| -> NodeId {
            let z = tape.leaf(p[0].clone());
            let alpha = tape.leaf(p[1].clone());
            let eps = tape.leaf(p[2].clone());
            let mut cols = Vec::new();
            for k in 0..2 {
                let row = tape.slice_row(alpha, k).unwrap();
                let gated = tape.row_gate(z, row).unwrap();
                let scaled = tape.scale_by_scalar_node(gated, eps).unwrap();
                let act = tape.relu(scaled);
                let ones = tape.leaf(Matrix::filled(3, 1, 1.0));
                let col = tape.matmul(act, ones).unwrap();
                cols.push(col);
            }
            let joined = tape.concat_cols(&cols).unwrap();
            let sig = tape.sigmoid(joined);
            tape.sum_all(sig)
        };
        finite_diff_check(&params, build, 1e-6, 1e-4);
    }
}
