//! Reverse-mode automatic differentiation on a per-step compute tape.
//!
//! All training math runs in 64-bit floats. A [`Tape`] owns every
//! intermediate value of one forward/backward cycle; [`Var`] handles are
//! plain indices into it. Parameters live outside the tape (see
//! [`Tensor`]) and are leased in as leaf nodes at the start of each step.
//!
//! A tape is confined to a single thread and supports exactly one
//! backward pass; building a fresh tape per training step replaces any
//! zero-grad bookkeeping.

mod conv;
pub mod gradcheck;
mod kernels;
mod nn;
pub mod loss;
pub mod optim;

use crate::error::{Error, Result};

/// Log inputs are clamped to this floor before taking the logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Smoothing constant for soft-Dice denominators and numerators.
pub const DICE_EPS: f64 = 1e-5;

/// A dense tensor living outside any tape: parameters, buffers, volumes.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if numel(&shape) != values.len() {
            return Err(Error::BadShape {
                op: "Tensor::new",
                msg: format!("{} values for shape", values.len()),
                shape,
            });
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            values: vec![0.0; n],
        }
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Backward closure: (all node values, gradient of this op's output,
/// all node gradients to accumulate into).
type BackwardFn = Box<dyn Fn(&[Vec<f64>], &[f64], &mut [Vec<f64>])>;

struct Record {
    out: usize,
    backward: BackwardFn,
}

/// Recorded compute graph for one forward/backward cycle.
pub struct Tape {
    shapes: Vec<Vec<usize>>,
    requires: Vec<bool>,
    values: Vec<Vec<f64>>,
    grads: Vec<Vec<f64>>,
    records: Vec<Record>,
    spent: bool,
    conv_calls: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            shapes: Vec::new(),
            requires: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            records: Vec::new(),
            spent: false,
            conv_calls: 0,
        }
    }

    /// Create a leaf node. Gradient starts all-zero.
    pub fn leaf(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if numel(&shape) != values.len() {
            return Err(Error::BadShape {
                op: "leaf",
                msg: format!("{} values for shape", values.len()),
                shape,
            });
        }
        Ok(self.push_node(shape, values, requires_grad))
    }

    /// Leaf that never carries gradient.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        self.leaf(shape, values, false)
    }

    pub fn constant_tensor(&mut self, t: &Tensor) -> Var {
        self.push_node(t.shape.clone(), t.values.clone(), false)
    }

    /// Leaf copied from an external tensor, tracked for gradients.
    pub fn lease(&mut self, t: &Tensor) -> Var {
        self.push_node(t.shape.clone(), t.values.clone(), true)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push_node(vec![], vec![v], false)
    }

    pub(crate) fn push_node(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), values.len());
        let id = self.shapes.len();
        self.grads.push(vec![0.0; values.len()]);
        self.shapes.push(shape);
        self.values.push(values);
        self.requires.push(requires_grad);
        Var(id)
    }

    pub(crate) fn push_record(&mut self, out: Var, backward: BackwardFn) {
        self.records.push(Record {
            out: out.0,
            backward,
        });
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.shapes[v.0]
    }

    pub fn values(&self, v: Var) -> &[f64] {
        &self.values[v.0]
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.grads[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    pub fn numel_of(&self, v: Var) -> usize {
        self.values[v.0].len()
    }

    /// Scalar value of a single-element node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.values[v.0].len(), 1);
        self.values[v.0][0]
    }

    /// Number of recorded differentiable operations so far.
    pub fn op_count(&self) -> usize {
        self.records.len()
    }

    /// How many conv3d invocations this tape has seen; lets tests pin
    /// down that one forward pass runs the encoder exactly once.
    pub fn conv_call_count(&self) -> usize {
        self.conv_calls
    }

    pub(crate) fn note_conv_call(&mut self) {
        self.conv_calls += 1;
    }

    pub fn node_count(&self) -> usize {
        self.shapes.len()
    }

    /// Detached copy of a node's values: same numbers, no gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let shape = self.shapes[v.0].clone();
        let values = self.values[v.0].clone();
        self.push_node(shape, values, false)
    }

    /// Run the backward pass from a scalar root. Consumes the tape's
    /// single backward allowance.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.spent {
            return Err(Error::TapeConsumed);
        }
        if self.values[root.0].len() != 1 {
            return Err(Error::NonScalarRoot {
                shape: self.shapes[root.0].clone(),
            });
        }
        self.spent = true;
        self.grads[root.0][0] = 1.0;
        for rec in self.records.iter().rev() {
            let out_grad = std::mem::take(&mut self.grads[rec.out]);
            (rec.backward)(&self.values, &out_grad, &mut self.grads);
            self.grads[rec.out] = out_grad;
        }
        Ok(())
    }
}

/// Argmax over axis 1 of a rank >= 2 node, lowest index wins ties.
/// Returns one class id per (outer, inner) position in row-major order.
pub fn argmax_axis1(shape: &[usize], values: &[f64]) -> Vec<usize> {
    assert!(shape.len() >= 2, "argmax_axis1 needs rank >= 2");
    let outer = shape[0];
    let k = shape[1];
    let inner: usize = shape[2..].iter().product();
    let mut out = vec![0usize; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let mut best = 0usize;
            let mut best_v = values[o * k * inner + i];
            for c in 1..k {
                let v = values[(o * k + c) * inner + i];
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            out[o * inner + i] = best;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_gradient_zero_initialized() {
        let mut t = Tape::new();
        let x = t.leaf(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0], true).unwrap();
        assert!(t.grad(x).iter().all(|&g| g == 0.0));
        assert_eq!(t.shape(x), &[2, 2]);
    }

    #[test]
    fn leaf_rejects_wrong_value_count() {
        let mut t = Tape::new();
        assert!(t.leaf(vec![2, 2], vec![1.0], true).is_err());
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut t = Tape::new();
        let x = t.leaf(vec![2], vec![1.0, 2.0], true).unwrap();
        match t.backward(x) {
            Err(Error::NonScalarRoot { shape }) => assert_eq!(shape, vec![2]),
            other => panic!("expected NonScalarRoot, got {other:?}"),
        }
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut t = Tape::new();
        let x = t.leaf(vec![], vec![3.0], true).unwrap();
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x)[0], 6.0);
        assert!(matches!(t.backward(y), Err(Error::TapeConsumed)));
    }

    #[test]
    fn argmax_lowest_index_tie_break() {
        let v = argmax_axis1(&[1, 2], &[0.5, 0.5]);
        assert_eq!(v, vec![0]);
        let v = argmax_axis1(&[1, 3, 2], &[0.1, 0.9, 0.7, 0.9, 0.2, 0.1]);
        // voxel 0: channels [0.1, 0.7, 0.2] -> 1; voxel 1: [0.9, 0.9, 0.1] -> 0
        assert_eq!(v, vec![1, 0]);
    }
}
