use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use super::Scalar;
use crate::error::{EivenError, Result};

thread_local! {
    static NO_GRAD: Cell<usize> = const { Cell::new(0) };
}

/// Runs `f` without recording any operations, e.g. for inference.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Reset;
    impl Drop for Reset {
        fn drop(&mut self) {
            NO_GRAD.with(|c| c.set(c.get() - 1));
        }
    }
    NO_GRAD.with(|c| c.set(c.get() + 1));
    let _reset = Reset;
    f()
}

type BackwardFn<T> = Box<dyn Fn(&[T], &[Tensor<T>])>;

struct Op<T: Scalar> {
    name: &'static str,
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    Constant,
    Trainable,
    Frozen,
    Computed,
}

struct Node<T: Scalar> {
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    role: Role,
    /// True when a gradient must flow through this node.
    tracked: bool,
    op: Option<Op<T>>,
}

/// Dense row-major array that records the operations producing it.
///
/// Cloning is cheap and shares storage. Leaves are either constants,
/// trainable parameters, or frozen parameters; frozen and constant leaves
/// never allocate a gradient.
pub struct Tensor<T: Scalar = f32>(Rc<Node<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("role", &self.0.role)
            .field("op", &self.0.op.as_ref().map(|op| op.name))
            .finish()
    }
}

fn check_len(shape: &[usize], len: usize) -> Result<()> {
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(EivenError::Shape(format!(
            "shape {shape:?} holds {numel} elements but {len} values were given"
        )));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    fn leaf(data: Vec<T>, shape: &[usize], role: Role) -> Result<Self> {
        check_len(shape, data.len())?;
        Ok(Tensor(Rc::new(Node {
            shape: shape.to_vec(),
            data: RefCell::new(data),
            grad: RefCell::new(None),
            role,
            tracked: role == Role::Trainable,
            op: None,
        })))
    }

    /// Input data that takes no part in differentiation.
    pub fn constant(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, Role::Constant)
    }

    /// Leaf that accumulates a gradient and may be updated by an optimizer.
    pub fn parameter(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, Role::Trainable)
    }

    /// Leaf whose values are fixed for the lifetime of the model.
    pub fn frozen(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, Role::Frozen)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::constant(vec![T::zero(); n], shape).expect("length matches shape")
    }

    pub fn scalar(v: T) -> Self {
        Self::constant(vec![v], &[]).expect("scalar")
    }

    /// Output of a recorded operation. The backward closure is kept only
    /// when some parent needs a gradient.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        name: &'static str,
        parents: Vec<Tensor<T>>,
        backward: impl Fn(&[T], &[Tensor<T>]) + 'static,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let tracked = NO_GRAD.with(|c| c.get() == 0) && parents.iter().any(Tensor::tracked);
        let op = tracked.then(|| Op {
            name,
            parents,
            backward: Box::new(backward),
        });
        Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            role: Role::Computed,
            tracked,
            op,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    /// Number of rows when viewed as a matrix over the last dimension.
    pub fn rows(&self) -> usize {
        match self.0.shape.split_last() {
            Some((_, lead)) => lead.iter().product(),
            None => 1,
        }
    }

    /// Size of the last dimension (1 for scalars).
    pub fn cols(&self) -> usize {
        self.0.shape.last().copied().unwrap_or(1)
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.borrow().clone()
    }

    pub fn item(&self) -> T {
        self.0.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn requires_grad(&self) -> bool {
        self.0.role == Role::Trainable
    }

    pub fn is_frozen(&self) -> bool {
        self.0.role == Role::Frozen
    }

    pub(crate) fn tracked(&self) -> bool {
        self.0.tracked
    }

    /// Overwrite the values of a trainable or constant leaf.
    pub fn assign(&self, values: &[T]) -> Result<()> {
        if self.is_frozen() {
            return Err(EivenError::Frozen(format!("{self:?}")));
        }
        let mut data = self.0.data.borrow_mut();
        if data.len() != values.len() {
            return Err(EivenError::Shape(format!(
                "cannot assign {} values to tensor of shape {:?}",
                values.len(),
                self.0.shape
            )));
        }
        data.copy_from_slice(values);
        Ok(())
    }

    /// Mutable access for optimizers. Refuses frozen tensors.
    pub(crate) fn data_mut(&self) -> Result<RefMut<'_, Vec<T>>> {
        if self.is_frozen() {
            return Err(EivenError::Frozen(format!("{self:?}")));
        }
        Ok(self.0.data.borrow_mut())
    }

    /// Add `g` into this tensor's gradient buffer, allocating it on first use.
    pub(crate) fn accumulate(&self, f: impl FnOnce(&mut [T])) {
        if !self.0.tracked {
            return;
        }
        let mut grad = self.0.grad.borrow_mut();
        let buf = grad.get_or_insert_with(|| vec![T::zero(); self.numel()]);
        f(buf);
    }

    /// Copy of the current values as a constant with no history.
    pub fn detach(&self) -> Tensor<T> {
        Tensor::constant(self.to_vec(), self.shape()).expect("same shape")
    }

    /// Same values viewed under a different shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        check_len(shape, self.numel())?;
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            "reshape",
            vec![self.clone()],
            |g, parents| parents[0].accumulate(|acc| add_into(acc, g)),
        ))
    }

    /// Reverse-mode sweep from a scalar.
    ///
    /// Every node reachable through tracked edges is visited exactly once,
    /// children before parents. Gradients of intermediate nodes are released
    /// once propagated; leaf gradients accumulate across calls until
    /// [`Tensor::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(EivenError::Rank(self.shape().to_vec()));
        }
        if !self.tracked() {
            return Ok(());
        }
        let order = self.topological_order();
        self.accumulate(|g| g[0] += T::one());
        for node in order.iter().rev() {
            let Some(op) = node.0.op.as_ref() else { continue };
            let grad = node.0.grad.borrow_mut().take();
            if let Some(grad) = grad {
                (op.backward)(&grad, &op.parents);
            }
        }
        Ok(())
    }

    /// Post-order over tracked nodes: parents always precede their children.
    fn topological_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Node<T>> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !seen.insert(Rc::as_ptr(&node.0)) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(op) = node.0.op.as_ref() {
                for p in op.parents.iter().filter(|p| p.tracked()) {
                    if !seen.contains(&Rc::as_ptr(&p.0)) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }

    pub fn same_storage(&self, other: &Tensor<T>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }
}

impl Tensor<f32> {
    /// Lossless widening, used to run gradient checks in double precision.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data().iter().map(|&v| v as f64).collect()
    }
}

#[inline]
pub(crate) fn add_into<T: Scalar>(acc: &mut [T], g: &[T]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}
