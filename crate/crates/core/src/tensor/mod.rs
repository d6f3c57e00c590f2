//! Dense rank-≤4 tensors with reverse-mode automatic differentiation.
//!
//! Layout is row-major (batch, channel, height, width). Tensors are immutable
//! after creation except for the gradient accumulator, so clones are cheap
//! (`Arc`) and values can be shared across threads. Every operation that
//! participates in differentiation records a backward closure on the output;
//! [`Tensor::backward`] walks the recorded graph once in reverse topological
//! order and accumulates gradients on `requires_grad` leaves.

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

mod gradcheck;
pub mod ops;

pub use gradcheck::{finite_diff_grad, max_rel_error, rel_error};

/// Storage dtype marker. f32 is the training/inference default; f64 is used
/// by gradient checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

/// Scalar element type a tensor can hold.
pub trait Element:
    num_traits::Float + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const DTYPE: DType;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;
    fn from_f64(v: f64) -> f64 {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Run `f` with graph recording disabled on this thread (inference paths).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Context handed to a backward closure.
pub(crate) struct BackwardArgs<'a, E: Element> {
    pub parents: &'a [Tensor<E>],
    pub output_data: &'a [E],
    pub grad: &'a [E],
}

impl<E: Element> BackwardArgs<'_, E> {
    /// Whether parent `i` can use a gradient (saves work for constants).
    pub fn needs(&self, i: usize) -> bool {
        self.parents[i].is_tracked()
    }
}

type BackwardFn<E> = Box<dyn Fn(&BackwardArgs<'_, E>) -> Vec<Option<Vec<E>>> + Send + Sync>;

pub(crate) struct Node<E: Element> {
    parents: Vec<Tensor<E>>,
    backward: BackwardFn<E>,
}

struct TensorInner<E: Element> {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<E>>>,
    node: Option<Node<E>>,
}

/// Dense numeric array of rank 1..=4 with optional gradient state.
pub struct Tensor<E: Element = f32> {
    inner: Arc<TensorInner<E>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor { inner: Arc::clone(&self.inner) }
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("tracked", &self.is_tracked())
            .finish()
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::invalid("tensor", format!("rank must be 1..=4, got {}", shape.len())));
    }
    if shape.contains(&0) {
        return Err(Error::invalid("tensor", format!("zero extent in shape {shape:?}")));
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::shape(
            "tensor",
            format!("shape {shape:?} holds {numel} values, data has {len}"),
        ));
    }
    Ok(())
}

impl<E: Element> Tensor<E> {
    fn new_inner(
        data: Vec<E>,
        shape: Vec<usize>,
        requires_grad: bool,
        node: Option<Node<E>>,
    ) -> Self {
        Tensor {
            inner: Arc::new(TensorInner {
                id: NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: Arc::new(data),
                requires_grad,
                grad: Mutex::new(None),
                node,
            }),
        }
    }

    /// Leaf tensor that does not require gradients (inputs, constants).
    pub fn from_vec(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::new_inner(data, shape.to_vec(), false, None))
    }

    /// Leaf parameter: gradients accumulate here across backward calls.
    pub fn param(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::new_inner(data, shape.to_vec(), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let numel = shape.iter().product();
        Self::from_vec(vec![E::zero(); numel], shape)
    }

    pub fn full(shape: &[usize], value: E) -> Result<Self> {
        let numel = shape.iter().product();
        Self::from_vec(vec![value; numel], shape)
    }

    pub fn scalar(value: E) -> Self {
        Self::from_vec(vec![value], &[1]).expect("scalar")
    }

    /// Non-leaf output of an operation. Records a node when recording is
    /// enabled and at least one parent is connected to the graph.
    pub(crate) fn from_op(
        data: Vec<E>,
        shape: Vec<usize>,
        parents: Vec<Tensor<E>>,
        backward: BackwardFn<E>,
    ) -> Self {
        let track = grad_enabled() && parents.iter().any(|p| p.is_tracked());
        let node = if track { Some(Node { parents, backward }) } else { None };
        Self::new_inner(data, shape, false, node)
    }

    /// Same storage viewed under a new shape. Shares data, no copy.
    pub(crate) fn view_as(&self, shape: Vec<usize>, parents: Vec<Tensor<E>>, backward: BackwardFn<E>) -> Self {
        let track = grad_enabled() && parents.iter().any(|p| p.is_tracked());
        let node = if track { Some(Node { parents, backward }) } else { None };
        Tensor {
            inner: Arc::new(TensorInner {
                id: NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: Arc::clone(&self.inner.data),
                requires_grad: false,
                grad: Mutex::new(None),
                node,
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn data(&self) -> &[E] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Connected to the backward graph (parameter or derived from one).
    pub fn is_tracked(&self) -> bool {
        self.inner.requires_grad || self.inner.node.is_some()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<E> {
        if self.numel() != 1 {
            return Err(Error::invalid("item", format!("tensor has {} elements", self.numel())));
        }
        Ok(self.inner.data[0])
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.lock().expect("grad lock").clone()
    }

    /// Clear the accumulated gradient.
    pub fn zero_grad(&self) {
        *self.inner.grad.lock().expect("grad lock") = None;
    }

    fn accumulate_grad(&self, add: &[E]) {
        let mut slot = self.inner.grad.lock().expect("grad lock");
        match slot.as_mut() {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(add) {
                    *a = *a + *b;
                }
            }
            None => *slot = Some(add.to_vec()),
        }
    }

    /// Reverse-mode differentiation from a scalar loss. Populates the grad
    /// accumulator of every reachable `requires_grad` leaf; repeated calls
    /// accumulate until [`Tensor::zero_grad`] is called.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Autodiff(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if self.inner.node.is_none() && !self.inner.requires_grad {
            return Err(Error::Autodiff(
                "loss is detached: no recorded operations reach a parameter".into(),
            ));
        }

        // Iterative DFS postorder: producers precede consumers in `order`.
        let mut order: Vec<Tensor<E>> = Vec::new();
        let mut visited: HashMap<u64, ()> = HashMap::new();
        let mut stack: Vec<(Tensor<E>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id(), ());
        while let Some((t, pi)) = stack.pop() {
            let n_parents = t.inner.node.as_ref().map_or(0, |n| n.parents.len());
            if pi < n_parents {
                stack.push((t.clone(), pi + 1));
                let p = t.inner.node.as_ref().unwrap().parents[pi].clone();
                if p.is_tracked() && visited.insert(p.id(), ()).is_none() {
                    stack.push((p, 0));
                }
            } else {
                order.push(t);
            }
        }

        // Scratch gradients per tensor id; leaves flush into their persistent
        // accumulator at the end so that repeated backward calls stay exact.
        let mut grads: HashMap<u64, Vec<E>> = HashMap::new();
        grads.insert(self.id(), vec![E::one()]);

        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else { continue };
            match &t.inner.node {
                Some(node) => {
                    let args = BackwardArgs {
                        parents: &node.parents,
                        output_data: &t.inner.data,
                        grad: &g,
                    };
                    let parent_grads = (node.backward)(&args);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (p, pg) in node.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.is_tracked() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel());
                        match grads.get_mut(&p.id()) {
                            Some(acc) => {
                                for (a, b) in acc.iter_mut().zip(&pg) {
                                    *a = *a + *b;
                                }
                            }
                            None => {
                                grads.insert(p.id(), pg);
                            }
                        }
                    }
                }
                None => {
                    if t.inner.requires_grad {
                        t.accumulate_grad(&g);
                    }
                }
            }
        }
        Ok(())
    }

    /// Detached copy: same values, fresh untracked leaf.
    pub fn detach(&self) -> Tensor<E> {
        Tensor::from_vec(self.data().to_vec(), self.shape()).expect("detach")
    }

    /// Cast elementwise through f64 (used by the f64 gradient-check mode).
    pub fn cast<T: Element>(&self) -> Tensor<T> {
        let data = self.data().iter().map(|&v| T::from_f64(v.to_f64())).collect();
        let t = Tensor::from_vec(data, self.shape()).expect("cast");
        if self.requires_grad() {
            Tensor::param(t.data().to_vec(), t.shape()).expect("cast")
        } else {
            t
        }
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_invariant() {
        assert!(Tensor::<f32>::from_vec(vec![1.0, 2.0], &[3]).is_err());
        assert!(Tensor::<f32>::from_vec(vec![1.0, 2.0], &[2]).is_ok());
        assert!(Tensor::<f32>::from_vec(vec![], &[0]).is_err());
        assert!(Tensor::<f32>::from_vec(vec![1.0; 16], &[1, 2, 2, 2, 2]).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0, 3.0, 4.0], &[4]).unwrap();
        let s = x.sum_all().unwrap();
        s.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        let s = x.sum_all().unwrap();
        s.backward().unwrap();
        s.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
        x.zero_grad();
        s.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        assert!(x.backward().is_err() || x.numel() == 1);
        let c = Tensor::<f64>::scalar(3.0);
        assert!(matches!(c.backward(), Err(Error::Autodiff(_))));
    }

    #[test]
    fn shared_subexpression_gets_summed_gradient() {
        // loss = sum(x + x) => dloss/dx = 2
        let x = Tensor::<f64>::param(vec![1.0, -2.0], &[2]).unwrap();
        let y = x.add(&x).unwrap();
        let s = y.sum_all().unwrap();
        s.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn no_grad_suppresses_recording() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = no_grad(|| x.add(&x).unwrap());
        assert!(!y.is_tracked());
    }

    #[test]
    fn forward_is_deterministic() {
        let x = Tensor::<f32>::from_vec(vec![0.3, -1.7, 2.2], &[3]).unwrap();
        let a = x.gelu().unwrap();
        let b = x.gelu().unwrap();
        assert_eq!(a.data(), b.data());
    }
}
