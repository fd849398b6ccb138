//! Dense tensors with reverse-mode autodiff.
//!
//! A `Tensor` is a reference-counted node in a dynamically recorded
//! computation graph. Leaves hold data (and a gradient buffer when
//! `requires_grad`); interior nodes additionally record the `Op` that
//! produced them. `backward` walks the graph once in reverse topological
//! order and accumulates gradients into every reachable `requires_grad`
//! leaf. Data is f64, row major. Only 1-D/2-D shapes flow through ops;
//! conv kernels are 3-D leaves.

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::ops::Op;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// True when new ops are being recorded on the graph (thread-local).
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Runs `f` with graph recording disabled; used by evaluation and benches.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|c| c.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|c| c.replace(false)));
    f()
}

pub(crate) struct TensorInner {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: RefCell<Vec<f64>>,
    pub(crate) grad: RefCell<Option<Vec<f64>>>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Option<Op>,
}

pub struct Tensor {
    pub(crate) inner: Rc<TensorInner>,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor(id={}, shape={:?})", self.inner.id, self.inner.shape)
    }
}

impl Tensor {
    fn leaf(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        let grad = if requires_grad { Some(vec![0.0; data.len()]) } else { None };
        Tensor {
            inner: Rc::new(TensorInner {
                id: fresh_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(grad),
                requires_grad,
                op: None,
            }),
        }
    }

    /// Constant leaf from raw data; errors when `data.len() != prod(shape)`.
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::Shape(format!(
                "from_vec: data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                n
            )));
        }
        Ok(Tensor::leaf(data, shape.to_vec(), false))
    }

    /// Trainable leaf; gradient buffer starts at zero.
    pub fn param_from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::from_vec(data, shape)?;
        Ok(t.requires_grad())
    }

    /// Copy of self as a trainable leaf.
    pub fn requires_grad(&self) -> Tensor {
        Tensor::leaf(self.to_vec(), self.inner.shape.clone(), true)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::leaf(vec![0.0; n], shape.to_vec(), false)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::leaf(vec![1.0; n], shape.to_vec(), false)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::leaf(vec![value; n], shape.to_vec(), false)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::leaf(vec![value], vec![1], false)
    }

    /// Standard normal samples.
    pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Tensor::leaf(data, shape.to_vec(), false)
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::leaf(data, shape.to_vec(), false)
    }

    /// Interior node; degrades to a constant leaf when recording is off or
    /// no input is tracked.
    pub(crate) fn node(data: Vec<f64>, shape: Vec<usize>, op: Op) -> Tensor {
        let tracked = grad_enabled() && op.inputs().iter().any(|t| t.needs_grad());
        if !tracked {
            return Tensor::leaf(data, shape, false);
        }
        Tensor {
            inner: Rc::new(TensorInner {
                id: fresh_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: false,
                op: Some(op),
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    /// Rows of a 2-D tensor (or length of a 1-D one).
    pub fn rows(&self) -> usize {
        self.inner.shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.inner.shape[1]
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// In-place overwrite of the raw data; the optimizer's update path.
    pub fn set_data(&self, data: &[f64]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), data.len(), "set_data: length mismatch");
        d.copy_from_slice(data);
    }

    pub fn get_elem(&self, idx: usize) -> f64 {
        self.inner.data.borrow()[idx]
    }

    pub fn set_elem(&self, idx: usize, v: f64) {
        self.inner.data.borrow_mut()[idx] = v;
    }

    /// Scalar extraction; errors on non-scalar tensors.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Shape(format!(
                "item: expected scalar, got shape {:?}",
                self.inner.shape
            )));
        }
        Ok(self.inner.data.borrow()[0])
    }

    pub fn is_requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub(crate) fn needs_grad(&self) -> bool {
        self.inner.requires_grad || self.inner.op.is_some()
    }

    /// Accumulated gradient of a `requires_grad` leaf (zeros until a
    /// backward pass reaches it).
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        if let Some(g) = self.inner.grad.borrow_mut().as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Copy detached from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.to_vec(), self.inner.shape.clone(), false)
    }

    fn op_inputs(&self) -> Vec<Tensor> {
        match &self.inner.op {
            Some(op) => op.inputs().into_iter().cloned().collect(),
            None => Vec::new(),
        }
    }

    /// Reverse-mode sweep from a scalar. Gradients accumulate (`+=`) into
    /// every reachable `requires_grad` leaf; unreachable leaves keep their
    /// (zero-initialized) buffers untouched.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.inner.shape
            )));
        }

        // Post-order DFS, iterative: parents come after all their inputs.
        let mut topo: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.inner.id);
        while let Some((t, i)) = stack.pop() {
            let inputs = t.op_inputs();
            if i < inputs.len() {
                stack.push((t, i + 1));
                let child = inputs[i].clone();
                if child.needs_grad() && visited.insert(child.inner.id) {
                    stack.push((child, 0));
                }
            } else {
                topo.push(t);
            }
        }

        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.inner.id, vec![1.0]);

        for t in topo.iter().rev() {
            if let Some(op) = &t.inner.op {
                let g = match grads.get(&t.inner.id) {
                    Some(g) => g.clone(),
                    None => continue,
                };
                crate::ops::apply_vjp(op, t, &g, &mut grads)?;
            }
        }

        for t in &topo {
            if t.inner.requires_grad {
                if let Some(g) = grads.get(&t.inner.id) {
                    let mut slot = t.inner.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(buf) => buf.iter_mut().zip(g).for_each(|(b, v)| *b += v),
                        None => *slot = Some(g.clone()),
                    }
                }
            }
        }
        Ok(())
    }
}

/// Adds `delta` into the gradient accumulator for tensor `id`.
pub(crate) fn accumulate(grads: &mut HashMap<u64, Vec<f64>>, t: &Tensor, delta: &[f64]) {
    if !t.needs_grad() {
        return;
    }
    match grads.get_mut(&t.inner.id) {
        Some(buf) => buf.iter_mut().zip(delta).for_each(|(b, v)| *b += v),
        None => {
            grads.insert(t.inner.id, delta.to_vec());
        }
    }
}
