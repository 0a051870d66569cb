//! Tape-based reverse-mode differentiation over dense vector values.
//!
//! Nodes are appended in evaluation order, so the tape is always
//! topologically sorted. Every node stores its forward value eagerly; a
//! backward pass walks the tape once in reverse and accumulates adjoints of
//! parameter leaves into a [`GradientVector`].

use std::ops::Range;

use super::{order_independent_sum, GradientVector};
use crate::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Param { offset: usize },
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MatVec {
        matrix: NodeId,
        vector: NodeId,
        rows: usize,
        cols: usize,
    },
    LeakyRelu(NodeId, f64),
    Clamp(NodeId, f64, f64),
    Softmax(NodeId),
    Log(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Component(NodeId, usize),
    Aggregate(Vec<NodeId>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Vec<f64>,
}

/// Records a computation over a flat parameter vector.
///
/// Parameter leaves reference index ranges of `params`; their adjoints are
/// scattered back to those indices by [`Tape::backward`].
#[derive(Debug)]
pub struct Tape<'p> {
    params: &'p [f64],
    branch_slices: Vec<Range<usize>>,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [f64], branch_slices: Vec<Range<usize>>) -> Self {
        Self {
            params,
            branch_slices,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> Result<&[f64]> {
        self.nodes
            .get(id)
            .map(|n| n.value.as_slice())
            .ok_or(Error::UnknownNode(id))
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    fn val(&self, id: NodeId) -> Result<&[f64]> {
        self.value(id)
    }

    fn same_len(&self, a: NodeId, b: NodeId) -> Result<(&[f64], &[f64])> {
        let (va, vb) = (self.val(a)?, self.val(b)?);
        if va.len() != vb.len() {
            return Err(Error::Shape(format!(
                "operands of length {} and {}",
                va.len(),
                vb.len()
            )));
        }
        Ok((va, vb))
    }

    /// Leaf bound to `params[offset..offset + len]`.
    pub fn param(&mut self, offset: usize, len: usize) -> Result<NodeId> {
        let end = offset
            .checked_add(len)
            .filter(|&e| e <= self.params.len())
            .ok_or_else(|| {
                Error::Shape(format!(
                    "parameter range {offset}..{} exceeds {}",
                    offset + len,
                    self.params.len()
                ))
            })?;
        let value = self.params[offset..end].to_vec();
        Ok(self.push(Op::Param { offset }, value))
    }

    pub fn constant(&mut self, values: Vec<f64>) -> NodeId {
        self.push(Op::Constant, values)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = self.same_len(a, b)?;
        let value = va.iter().zip(vb).map(|(x, y)| x + y).collect();
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = self.same_len(a, b)?;
        let value = va.iter().zip(vb).map(|(x, y)| x - y).collect();
        Ok(self.push(Op::Sub(a, b), value))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = self.same_len(a, b)?;
        let value = va.iter().zip(vb).map(|(x, y)| x * y).collect();
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let value = self.val(a)?.iter().map(|x| x * factor).collect();
        Ok(self.push(Op::Scale(a, factor), value))
    }

    /// `matrix` holds a row-major `rows × cols` matrix.
    pub fn matvec(
        &mut self,
        matrix: NodeId,
        rows: usize,
        cols: usize,
        vector: NodeId,
    ) -> Result<NodeId> {
        let (m, v) = (self.val(matrix)?, self.val(vector)?);
        if m.len() != rows * cols || v.len() != cols {
            return Err(Error::Shape(format!(
                "matvec of {} entries as {rows}x{cols} with a vector of length {}",
                m.len(),
                v.len()
            )));
        }
        let value = m
            .chunks_exact(cols)
            .map(|row| row.iter().zip(v).map(|(w, x)| w * x).sum())
            .collect();
        Ok(self.push(
            Op::MatVec {
                matrix,
                vector,
                rows,
                cols,
            },
            value,
        ))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        let value = self
            .val(a)?
            .iter()
            .map(|&z| leaky_relu(z, slope))
            .collect();
        Ok(self.push(Op::LeakyRelu(a, slope), value))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if !(lo <= hi) {
            return Err(Error::InvalidArgument(format!("clamp bounds {lo} > {hi}")));
        }
        let value = self.val(a)?.iter().map(|z| z.clamp(lo, hi)).collect();
        Ok(self.push(Op::Clamp(a, lo, hi), value))
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let value = softmax(self.val(a)?);
        Ok(self.push(Op::Softmax(a), value))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.val(a)?.iter().map(|z| z.ln()).collect();
        Ok(self.push(Op::Log(a), value))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.val(a)?.iter().map(|z| z * z).collect();
        Ok(self.push(Op::Square(a), value))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.val(a)?.iter().sum();
        Ok(self.push(Op::Sum(a), vec![s]))
    }

    /// Scalar node selecting coordinate `index` of `a`.
    pub fn component(&mut self, a: NodeId, index: usize) -> Result<NodeId> {
        let va = self.val(a)?;
        let v = *va.get(index).ok_or_else(|| {
            Error::Shape(format!("component {index} of a length-{} node", va.len()))
        })?;
        Ok(self.push(Op::Component(a, index), vec![v]))
    }

    /// Elementwise sum of equally shaped nodes, independent of their order.
    pub fn aggregate(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::InvalidArgument("aggregate of no nodes".into()))?;
        let width = self.val(first)?.len();
        let mut column = Vec::with_capacity(inputs.len());
        let mut value = Vec::with_capacity(width);
        for i in 0..width {
            column.clear();
            for &id in inputs {
                let v = self.val(id)?;
                if v.len() != width {
                    return Err(Error::Shape("aggregate of unequal lengths".into()));
                }
                column.push(v[i]);
            }
            value.push(order_independent_sum(&mut column));
        }
        Ok(self.push(Op::Aggregate(inputs.to_vec()), value))
    }

    /// Exact gradient of the scalar node `root` w.r.t. every parameter.
    pub fn backward(&self, root: NodeId) -> Result<GradientVector> {
        let root_node = self.nodes.get(root).ok_or(Error::UnknownNode(root))?;
        if root_node.value.len() != 1 {
            return Err(Error::NonScalarRoot);
        }
        let mut grad = vec![0.0; self.params.len()];
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        adj[root] = Some(vec![1.0]);

        for id in (0..=root).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Param { offset } => {
                    for (dst, gi) in grad[*offset..*offset + g.len()].iter_mut().zip(&g) {
                        *dst += gi;
                    }
                }
                Op::Constant => {}
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.iter().copied());
                    accumulate(&mut adj, *b, g.iter().copied());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *a, g.iter().copied());
                    accumulate(&mut adj, *b, g.iter().map(|x| -x));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    accumulate(&mut adj, *a, g.iter().zip(vb).map(|(g, y)| g * y));
                    accumulate(&mut adj, *b, g.iter().zip(va).map(|(g, x)| g * x));
                }
                Op::Scale(a, c) => accumulate(&mut adj, *a, g.iter().map(|x| x * c)),
                Op::MatVec {
                    matrix,
                    vector,
                    rows,
                    cols,
                } => {
                    let m = &self.nodes[*matrix].value;
                    let v = &self.nodes[*vector].value;
                    let gm = (0..rows * cols).map(|idx| g[idx / cols] * v[idx % cols]);
                    accumulate(&mut adj, *matrix, gm);
                    let gv = (0..*cols).map(|j| (0..*rows).map(|i| m[i * cols + j] * g[i]).sum());
                    accumulate(&mut adj, *vector, gv);
                }
                Op::LeakyRelu(a, slope) => {
                    let va = &self.nodes[*a].value;
                    let ga = g
                        .iter()
                        .zip(va)
                        .map(|(g, &z)| g * leaky_relu_derivative(z, *slope));
                    accumulate(&mut adj, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let va = &self.nodes[*a].value;
                    let ga = g
                        .iter()
                        .zip(va)
                        .map(|(g, &z)| g * clamp_derivative(z, *lo, *hi));
                    accumulate(&mut adj, *a, ga);
                }
                Op::Softmax(a) => {
                    let s = &node.value;
                    let dot: f64 = g.iter().zip(s).map(|(g, s)| g * s).sum();
                    accumulate(&mut adj, *a, g.iter().zip(s).map(|(g, s)| s * (g - dot)));
                }
                Op::Log(a) => {
                    let va = &self.nodes[*a].value;
                    accumulate(&mut adj, *a, g.iter().zip(va).map(|(g, x)| g / x));
                }
                Op::Square(a) => {
                    let va = &self.nodes[*a].value;
                    accumulate(&mut adj, *a, g.iter().zip(va).map(|(g, x)| 2.0 * x * g));
                }
                Op::Sum(a) => {
                    let n = self.nodes[*a].value.len();
                    accumulate(&mut adj, *a, std::iter::repeat_n(g[0], n));
                }
                Op::Component(a, index) => {
                    let n = self.nodes[*a].value.len();
                    accumulate(
                        &mut adj,
                        *a,
                        (0..n).map(|i| if i == *index { g[0] } else { 0.0 }),
                    );
                }
                Op::Aggregate(inputs) => {
                    for &input in inputs {
                        accumulate(&mut adj, input, g.iter().copied());
                    }
                }
            }
        }

        GradientVector::new(grad, self.branch_slices.clone())
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], id: NodeId, contrib: impl Iterator<Item = f64>) {
    match &mut adj[id] {
        Some(existing) => {
            for (dst, c) in existing.iter_mut().zip(contrib) {
                *dst += c;
            }
        }
        slot @ None => *slot = Some(contrib.collect()),
    }
}

#[inline]
pub fn leaky_relu(z: f64, slope: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        slope * z
    }
}

#[inline]
pub fn leaky_relu_derivative(z: f64, slope: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        slope
    }
}

/// Clamp subgradient: the boundary points count as inside.
#[inline]
pub fn clamp_derivative(z: f64, lo: f64, hi: f64) -> f64 {
    if (lo..=hi).contains(&z) {
        1.0
    } else {
        0.0
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn square_of_leaf() {
        let params = [3.0];
        let mut tape = Tape::new(&params, vec![0..1]);
        let w = tape.param(0, 1).unwrap();
        let y = tape.square(w).unwrap();
        let root = tape.sum(y).unwrap();
        let g = tape.backward(root).unwrap();
        assert_eq!(g.entries(), &[6.0]);
    }

    #[test]
    fn leaky_negative_side() {
        let params = [-2.0];
        let mut tape = Tape::new(&params, vec![0..1]);
        let w = tape.param(0, 1).unwrap();
        let one = tape.constant(vec![1.0]);
        let zero = tape.constant(vec![0.0]);
        let wx = tape.mul(w, one).unwrap();
        let z = tape.add(wx, zero).unwrap();
        let y = tape.leaky_relu(z, 0.01).unwrap();
        let root = tape.sum(y).unwrap();
        let g = tape.backward(root).unwrap();
        assert_eq!(g.entries(), &[0.01]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let params = [1.0, 2.0];
        let mut tape = Tape::new(&params, vec![0..2]);
        let w = tape.param(0, 2).unwrap();
        let err = tape.backward(w).unwrap_err();
        assert_eq!(err.to_string(), "gradient root must be scalar");
    }

    #[test]
    fn clamp_boundary_counts_as_inside() {
        assert_eq!(clamp_derivative(1.0, -1.0, 1.0), 1.0);
        assert_eq!(clamp_derivative(-1.0, -1.0, 1.0), 1.0);
        assert_eq!(clamp_derivative(1.0 + 1e-12, -1.0, 1.0), 0.0);
        assert_eq!(clamp_derivative(0.3, -1.0, 1.0), 1.0);

        let params = [1.0, 3.0, -0.5];
        let mut tape = Tape::new(&params, vec![0..3]);
        let w = tape.param(0, 3).unwrap();
        let c = tape.clamp(w, -1.0, 1.0).unwrap();
        assert_eq!(tape.value(c).unwrap(), &[1.0, 1.0, -0.5]);
        let root = tape.sum(c).unwrap();
        let g = tape.backward(root).unwrap();
        assert_eq!(g.entries(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn backward_leaves_values_untouched() {
        let params = [0.3, -0.7];
        let mut tape = Tape::new(&params, vec![0..2]);
        let w = tape.param(0, 2).unwrap();
        let s = tape.softmax(w).unwrap();
        let root = tape.sum(s).unwrap();
        let before: Vec<Vec<f64>> = (0..tape.len())
            .map(|i| tape.value(i).unwrap().to_vec())
            .collect();
        tape.backward(root).unwrap();
        let after: Vec<Vec<f64>> = (0..tape.len())
            .map(|i| tape.value(i).unwrap().to_vec())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn matvec_gradient_by_hand() {
        // y = sum(W x), dW_ij = x_j, dx_j = sum_i W_ij
        let params = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.5, -1.0, 2.0];
        let mut tape = Tape::new(&params, vec![0..9]);
        let w = tape.param(0, 6).unwrap();
        let x = tape.param(6, 3).unwrap();
        let y = tape.matvec(w, 2, 3, x).unwrap();
        assert_eq!(tape.value(y).unwrap(), &[4.5, 9.0]);
        let root = tape.sum(y).unwrap();
        let g = tape.backward(root).unwrap();
        assert_eq!(
            g.entries(),
            &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0, 5.0, 7.0, 9.0]
        );
    }

    #[test]
    fn softmax_log_cross_entropy_gradient() {
        // d/dz [-sum p log softmax(z)] = softmax(z) - p
        let params = [0.2, -0.4, 1.1];
        let p = vec![0.2, 0.3, 0.5];
        let mut tape = Tape::new(&params, vec![0..3]);
        let z = tape.param(0, 3).unwrap();
        let s = tape.softmax(z).unwrap();
        let l = tape.log(s).unwrap();
        let pc = tape.constant(p.clone());
        let pl = tape.mul(pc, l).unwrap();
        let total = tape.sum(pl).unwrap();
        let root = tape.scale(total, -1.0).unwrap();
        let g = tape.backward(root).unwrap();
        let s = softmax(&params);
        for i in 0..3 {
            assert_relative_eq!(g.entries()[i], s[i] - p[i], epsilon = 1e-15);
        }
    }

    #[test]
    fn shape_errors() {
        let params = [1.0, 2.0, 3.0];
        let mut tape = Tape::new(&params, vec![0..3]);
        let a = tape.param(0, 2).unwrap();
        let b = tape.param(2, 1).unwrap();
        assert!(matches!(tape.add(a, b), Err(Error::Shape(_))));
        assert!(matches!(tape.param(2, 5), Err(Error::Shape(_))));
        assert!(matches!(tape.matvec(a, 2, 2, b), Err(Error::Shape(_))));
        assert!(matches!(tape.component(a, 2), Err(Error::Shape(_))));
    }

    #[test]
    fn aggregate_ignores_input_order() {
        let params = [1e16, 1.0, -1e16, 3.0];
        let mut tape = Tape::new(&params, vec![0..4]);
        let leaves: Vec<_> = (0..4).map(|i| tape.param(i, 1).unwrap()).collect();
        let fwd = tape.aggregate(&leaves).unwrap();
        let rev: Vec<_> = leaves.iter().rev().copied().collect();
        let bwd = tape.aggregate(&rev).unwrap();
        assert_eq!(
            tape.value(fwd).unwrap()[0].to_bits(),
            tape.value(bwd).unwrap()[0].to_bits()
        );
    }
}
