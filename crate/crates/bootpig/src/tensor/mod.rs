//! Dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Tensors are row-major, immutable value carriers. Differentiable ops record
//! a backward closure on a per-thread tape; [`Tensor::backward`] replays the
//! tape in exact reverse execution order and populates gradients on every
//! reachable leaf created with `requires_grad`.

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};

pub mod gradcheck;
pub mod ops;


/// Scalar element type the engine is generic over. Training and inference run
/// in `f32`; gradient checking instantiates the same ops at `f64`.
pub trait Element:
    num_traits::Float
    + num_traits::NumAssign
    + Copy
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + 'static
{
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// C[m x n] = alpha * A[m x k] . B[k x n] + beta * C, with explicit
    /// row/column strides so transposed views need no copies.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

impl Element for f32 {
    const DTYPE: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }
}

impl Element for f64 {
    const DTYPE: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }
}

thread_local! {
    static NEXT_NODE_ID: Cell<u64> = const { Cell::new(1) };
}

fn next_node_id() -> u64 {
    NEXT_NODE_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// One entry on the gradient tape. Node ids are strictly increasing in
/// execution order within a thread, so sorting reachable nodes by descending
/// id replays the tape backward in exact reverse execution order.
pub(crate) struct Node<E: Element> {
    pub(crate) id: u64,
    pub(crate) len: usize,
    pub(crate) parents: Vec<Rc<Node<E>>>,
    pub(crate) grad: RefCell<Option<Vec<E>>>,
    pub(crate) back: Option<Box<dyn Fn(&[E])>>,
}

/// Accumulate a gradient contribution into `node` (if it participates in the
/// tape). The closure receives the zero-initialized or previously accumulated
/// buffer and must add its contribution in place.
pub(crate) fn accum<E: Element>(node: &Option<Rc<Node<E>>>, add: impl FnOnce(&mut [E])) {
    if let Some(n) = node {
        let mut slot = n.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![E::zero(); n.len]);
        add(buf);
    }
}

/// Dense n-dimensional tensor, row-major.
#[derive(Clone)]
pub struct Tensor<E: Element = f32> {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Arc<Vec<E>>,
    pub(crate) node: Option<Rc<Node<E>>>,
}

impl<E: Element> Tensor<E> {
    /// Leaf tensor. With `requires_grad` it participates in the tape and
    /// receives a gradient after `backward`.
    pub fn leaf(data: Vec<E>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        check_dims(&data, shape, "leaf")?;
        let node = if requires_grad {
            Some(Rc::new(Node {
                id: next_node_id(),
                len: data.len(),
                parents: Vec::new(),
                grad: RefCell::new(None),
                back: None,
            }))
        } else {
            None
        };
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node,
        })
    }

    /// Constant tensor outside the tape.
    pub fn from_vec(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, false)
    }

    pub fn from_shared(data: Arc<Vec<E>>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::shape(
                "leaf",
                format!("data length {} does not match shape {:?}", data.len(), shape),
            ));
        }
        let node = if requires_grad {
            Some(Rc::new(Node {
                id: next_node_id(),
                len: data.len(),
                parents: Vec::new(),
                grad: RefCell::new(None),
                back: None,
            }))
        } else {
            None
        };
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            node,
        })
    }

    pub fn scalar(v: E) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![v]),
            node: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![E::zero(); n]),
            node: None,
        }
    }

    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<E>,
        parents: Vec<Rc<Node<E>>>,
        back: Box<dyn Fn(&[E])>,
    ) -> Result<Self> {
        check_finite(&data, op)?;
        let len = data.len();
        let node = Some(Rc::new(Node {
            id: next_node_id(),
            len,
            parents,
            grad: RefCell::new(None),
            back: Some(back),
        }));
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            node,
        })
    }

    pub(crate) fn from_op_nograd(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<E>,
    ) -> Result<Self> {
        check_finite(&data, op)?;
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn shared_data(&self) -> Arc<Vec<E>> {
        self.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Accumulated gradient, if this tensor is on the tape and backward has
    /// reached it.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.node.as_ref().and_then(|n| n.grad.borrow().clone())
    }

    /// Detach from the tape: same data, no gradient participation.
    pub fn detach(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    /// Reverse-mode sweep from a scalar loss. Visits recorded ops in exact
    /// reverse execution order; gradients accumulate additively across uses.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape),
            ));
        }
        let root = self.node.as_ref().ok_or_else(|| {
            Error::shape("backward", "loss does not participate in the gradient tape")
        })?;

        *root.grad.borrow_mut() = Some(vec![E::one()]);

        // Collect every reachable tape entry, then replay newest-first.
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![root.clone()];
        let mut nodes: Vec<Rc<Node<E>>> = Vec::new();
        while let Some(n) = stack.pop() {
            if !seen.insert(n.id) {
                continue;
            }
            for p in &n.parents {
                stack.push(p.clone());
            }
            nodes.push(n);
        }
        nodes.sort_by(|a, b| b.id.cmp(&a.id));

        for n in &nodes {
            if let Some(back) = &n.back {
                let g = n.grad.borrow().clone();
                if let Some(g) = g {
                    back(&g);
                }
            }
        }
        Ok(())
    }
}

impl<E: Element> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor<{}>(shape={:?}, grad={})",
            E::DTYPE,
            self.shape,
            self.node.is_some()
        )
    }
}

pub(crate) fn check_finite<E: Element>(data: &[E], op: &'static str) -> Result<()> {
    for (i, v) in data.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::numerics(
                op,
                format!("non-finite value {v} at flat index {i}"),
            ));
        }
    }
    Ok(())
}

fn check_dims<E: Element>(data: &[E], shape: &[usize], op: &'static str) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::shape(op, format!("zero extent in shape {shape:?}")));
    }
    if data.len() != shape.iter().product::<usize>() {
        return Err(Error::shape(
            op,
            format!("data length {} does not match shape {:?}", data.len(), shape),
        ));
    }
    Ok(())
}
