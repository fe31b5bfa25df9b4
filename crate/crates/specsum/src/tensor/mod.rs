//! Minimal dense-tensor core with reverse-mode automatic differentiation.
//!
//! Tensors are row-major `f64` buffers with an optional gradient buffer.
//! Operations recorded on a [`Tape`] can be replayed in reverse by
//! [`Tape::backward`] to populate gradients for every reachable tensor
//! that requires them. The tape is define-by-run: each training step
//! builds a fresh tape, so the set of recorded losses can change per run.

pub mod ops;

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};

struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

/// Shared handle to a dense tensor. Cloning is cheap (reference count).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

impl Tensor {
    /// Build a tensor from a shape and row-major data.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::usage(format!(
                "from_vec: data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape: shape.to_vec(),
                data,
                grad: None,
                requires_grad: false,
            })),
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; numel]).expect("zeros: consistent by construction")
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![value; numel]).expect("full: consistent by construction")
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(&[], vec![value]).expect("scalar: consistent by construction")
    }

    /// Uniform random tensor in `[lo, hi)` drawn from the given RNG.
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl rand::Rng) -> Tensor {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::from_vec(shape, data).expect("rand_uniform: consistent by construction")
    }

    /// Mark this tensor as a leaf that should receive gradients.
    pub fn with_grad(self) -> Tensor {
        self.inner.borrow_mut().requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.inner.borrow().shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.inner.borrow().shape[1]
    }

    pub fn is_scalar(&self) -> bool {
        self.inner.borrow().shape.is_empty()
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        let inner = self.inner.borrow();
        debug_assert_eq!(inner.data.len(), 1, "item() on non-scalar tensor");
        inner.data[0]
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Borrow the raw data. Panics if a mutable borrow is live.
    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |i| i.data.as_slice())
    }

    /// Element at `(row, col)` of a 2-D tensor.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        let inner = self.inner.borrow();
        inner.data[row * inner.shape[1] + col]
    }

    /// Copy of the gradient buffer, if one has been populated.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Detached copy: same values, no gradient requirement, no tape history.
    pub fn detach(&self) -> Tensor {
        let inner = self.inner.borrow();
        Tensor::from_vec(&inner.shape, inner.data.clone()).expect("detach preserves shape")
    }

    /// Mutate the raw data in place (optimizer updates).
    pub fn apply_data<F: FnOnce(&mut [f64])>(&self, f: F) {
        f(&mut self.inner.borrow_mut().data);
    }

    /// Perturb a single element (finite-difference probes).
    pub fn nudge(&self, index: usize, delta: f64) {
        self.inner.borrow_mut().data[index] += delta;
    }

    fn accumulate_grad(&self, contribution: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        let n = inner.data.len();
        let grad = inner.grad.get_or_insert_with(|| vec![0.0; n]);
        for (g, c) in grad.iter_mut().zip(contribution) {
            *g += c;
        }
    }

    fn grad_clone(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .field("data", &inner.data)
            .finish()
    }
}

/// One recorded primitive: a closure that reads the output gradient and
/// accumulates into the input gradients.
struct Node {
    backward: Box<dyn Fn()>,
}

/// Ordered record of primitive operations.
///
/// Replaying the record in reverse yields gradients for all recorded
/// inputs. A tape is consumed by one backward pass and must be reset
/// (or dropped) before the next step.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
    recording: bool,
}

impl Tape {
    /// A recording tape for training steps.
    pub fn new() -> Tape {
        Tape {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
            recording: true,
        }
    }

    /// A non-recording tape for inference; backward is an error.
    pub fn inference() -> Tape {
        Tape {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded primitives.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Clear all recorded operations and re-arm the tape.
    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
        self.consumed.set(false);
    }

    pub(crate) fn record(&self, output: &Tensor, backward: impl Fn() + 'static) {
        if self.recording && output.requires_grad() {
            self.nodes.borrow_mut().push(Node {
                backward: Box::new(backward),
            });
        }
    }

    /// Reverse pass from a scalar root: populates `grad` for every
    /// reachable tensor with `requires_grad`. Deterministic given the
    /// recording order.
    pub fn backward(&self, root: &Tensor) -> Result<()> {
        if !self.recording {
            return Err(Error::usage("backward on a non-recording tape"));
        }
        if self.consumed.get() {
            return Err(Error::usage(
                "backward called twice without tape reset",
            ));
        }
        if !root.is_scalar() {
            return Err(Error::usage(format!(
                "backward root must be scalar, got shape {:?}",
                root.shape()
            )));
        }
        if !root.requires_grad() {
            return Err(Error::usage(
                "backward root does not require gradients (not on tape)",
            ));
        }
        self.consumed.set(true);
        root.accumulate_grad(&[1.0]);
        let nodes = self.nodes.borrow();
        for node in nodes.iter().rev() {
            (node.backward)();
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

#[cfg(test)]
mod tests {
    use super::ops;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn from_vec_rejects_length_mismatch() {
        assert!(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn scalar_has_empty_shape_and_one_element() {
        let s = Tensor::scalar(3.5);
        assert!(s.is_scalar());
        assert_eq!(s.numel(), 1);
        assert_eq!(s.item(), 3.5);
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let tape = Tape::new();
        let x = Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0])
            .unwrap()
            .with_grad();
        let s = ops::sum(&tape, &x).unwrap();
        tape.backward(&s).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let tape = Tape::new();
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().with_grad();
        let y = ops::scale(&tape, &x, 2.0);
        let err = tape.backward(&y).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn second_backward_without_reset_is_an_error() {
        let tape = Tape::new();
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().with_grad();
        let s = ops::sum(&tape, &x).unwrap();
        tape.backward(&s).unwrap();
        let err = tape.backward(&s).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
        tape.reset();
        assert!(tape.is_empty());
    }

    #[test]
    fn backward_through_gram_matches_manual_gradient() {
        // root = ||x^T y||_F^2 with x, y column vectors: grad_x = 2 (x.y) y.
        let tape = Tape::new();
        let x = Tensor::from_vec(&[3, 1], vec![1.0, 2.0, -1.0])
            .unwrap()
            .with_grad();
        let y = Tensor::from_vec(&[3, 1], vec![0.5, -1.0, 2.0])
            .unwrap()
            .with_grad();
        let xt = ops::transpose(&tape, &x);
        let gram = ops::matmul(&tape, &xt, &y).unwrap();
        let loss = ops::frobenius_sq(&tape, &gram);
        tape.backward(&loss).unwrap();
        let dot = 1.0 * 0.5 + 2.0 * (-1.0) + (-1.0) * 2.0;
        let gx = x.grad().unwrap();
        for (i, yv) in [0.5, -1.0, 2.0].iter().enumerate() {
            assert!((gx[i] - 2.0 * dot * yv).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let tape = Tape::new();
            let a = Tensor::rand_uniform(&[4, 3], -1.0, 1.0, &mut rng).with_grad();
            let b = Tensor::rand_uniform(&[3, 5], -1.0, 1.0, &mut rng).with_grad();
            let c = ops::matmul(&tape, &a, &b).unwrap();
            let g = ops::gelu(&tape, &c);
            let loss = ops::frobenius_sq(&tape, &g);
            tape.backward(&loss).unwrap();
            (a.grad().unwrap(), b.grad().unwrap())
        };
        let (ga1, gb1) = run();
        let (ga2, gb2) = run();
        // Bit-identical, not approximately equal.
        assert_eq!(ga1, ga2);
        assert_eq!(gb1, gb2);
    }

    #[test]
    fn detached_tensors_do_not_join_the_graph() {
        let tape = Tape::new();
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().with_grad();
        let d = x.detach();
        assert!(!d.requires_grad());
        let s = ops::sum(&tape, &d).unwrap();
        assert!(tape.backward(&s).is_err());
    }
}
