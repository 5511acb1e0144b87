//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable row-major buffer plus shape. Differentiable
//! ops record themselves on a [`Tape`]; calling [`Tensor::backward`] on a
//! scalar loss walks the tape in reverse and populates gradients for every
//! recorded node, leaves included.
//!
//! Training runs in `f32`; gradient-check suites instantiate the same ops
//! over `f64`.

mod ops;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Scalar element type the engine is generic over.
pub trait Element:
    num_traits::Float
    + num_traits::NumAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn erf(self) -> Self;
    /// Matrix product C += A·B on row-major slices.
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]);

    /// Matrix product C += A·B with explicit (row, col) strides for A and B;
    /// C is row-major. Lets backward read transposed operands in place.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
    );
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn erf(self) -> Self {
        libm::erff(self)
    }
    fn gemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
        debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                1.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        c: &mut [f32],
    ) {
        debug_assert!(c.len() >= m * n);
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                1.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
        debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                1.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        c: &mut [f64],
    ) {
        debug_assert!(c.len() >= m * n);
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                1.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

/// Values handed to a backward rule.
pub struct BackwardArgs<'a, E: Element> {
    /// Gradient of the loss w.r.t. this op's output.
    pub out_grad: &'a [E],
    /// The op's forward output.
    pub output: &'a [E],
    /// The op's forward inputs, in recording order.
    pub inputs: Vec<&'a [E]>,
}

type BackwardFn<E> = Box<dyn Fn(&BackwardArgs<'_, E>) -> Vec<Option<Vec<E>>>>;

struct OpRecord<E: Element> {
    inputs: Vec<InputRef<E>>,
    output: Rc<Vec<E>>,
    func: BackwardFn<E>,
    /// Identity gradient (reshape): backward forwards the incoming gradient
    /// to the single input without invoking `func` or copying.
    passthrough: bool,
}

struct InputRef<E: Element> {
    data: Rc<Vec<E>>,
    node: Option<usize>,
}

struct Node<E: Element> {
    grad: Option<Vec<E>>,
    op: Option<OpRecord<E>>,
    len: usize,
}

struct TapeInner<E: Element> {
    nodes: Vec<Node<E>>,
    consumed: bool,
}

/// Ordered record of differentiable ops; one backward sweep per forward graph.
pub struct Tape<E: Element> {
    inner: Rc<RefCell<TapeInner<E>>>,
}

impl<E: Element> Clone for Tape<E> {
    fn clone(&self) -> Self {
        Tape { inner: self.inner.clone() }
    }
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        crate::tune_allocator();
        Tape { inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new(), consumed: false })) }
    }

    fn same_tape(&self, other: &Tape<E>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Register a leaf variable that will receive a gradient from backward.
    pub fn var(&self, data: Vec<E>, shape: &[usize]) -> Result<Tensor<E>> {
        check_shape("var", &data, shape)?;
        let data = Rc::new(data);
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { grad: None, op: None, len: data.len() });
        Ok(Tensor { shape: shape.to_vec(), data, node: Some((self.clone(), id)) })
    }

    /// Number of recorded nodes (leaves plus ops).
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_shape<E: Element>(op: &'static str, data: &[E], shape: &[usize]) -> Result<()> {
    let numel: usize = shape.iter().product();
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::shape(op, format!("zero-sized dimension in {shape:?}")));
    }
    if numel != data.len() {
        return Err(Error::shape(
            op,
            format!("shape {:?} needs {} elements, buffer has {}", shape, numel, data.len()),
        ));
    }
    Ok(())
}

fn check_finite<E: Element>(op: &'static str, data: &[E]) -> Result<()> {
    // x*0 is 0 for finite x and NaN for inf/NaN, so the sum of x*0 is NaN
    // exactly when a non-finite value is present; unlike an early-exit
    // `all(is_finite)` scan this reduction vectorizes.
    let mut acc = [E::zero(); 8];
    let mut chunks = data.chunks_exact(8);
    for c in &mut chunks {
        for i in 0..8 {
            acc[i] += c[i] * E::zero();
        }
    }
    let mut tail = E::zero();
    for &v in chunks.remainder() {
        tail += v * E::zero();
    }
    let total = acc.iter().copied().sum::<E>() + tail;
    if total.is_nan() {
        Err(Error::NonFinite { op })
    } else {
        Ok(())
    }
}

/// Dense n-dimensional array, immutable after creation.
pub struct Tensor<E: Element = f32> {
    shape: Vec<usize>,
    data: Rc<Vec<E>>,
    node: Option<(Tape<E>, usize)>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.clone(), node: self.node.clone() }
    }
}

impl<E: Element> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.node.is_some())
            .finish()
    }
}

impl<E: Element> Tensor<E> {
    /// Constant tensor not tracked by any tape.
    pub fn from_vec(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        check_shape("from_vec", &data, shape)?;
        Ok(Tensor { shape: shape.to_vec(), data: Rc::new(data), node: None })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        Self::from_vec(vec![E::zero(); n], shape)
    }

    pub fn full(shape: &[usize], value: E) -> Result<Self> {
        let n: usize = shape.iter().product();
        Self::from_vec(vec![value; n], shape)
    }

    pub fn scalar(value: E) -> Self {
        Tensor { shape: vec![1], data: Rc::new(vec![value]), node: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.data.as_ref().clone()
    }

    pub(crate) fn data_rc(&self) -> Rc<Vec<E>> {
        self.data.clone()
    }

    /// Extract the single value of a one-element tensor.
    pub fn item(&self) -> Result<E> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor with {} elements",
                self.numel()
            )));
        }
        Ok(self.data[0])
    }

    /// Whether this tensor participates in a tape.
    pub fn on_tape(&self) -> bool {
        self.node.is_some()
    }

    /// Drop tape participation; the values are kept.
    pub fn detach(&self) -> Tensor<E> {
        Tensor { shape: self.shape.clone(), data: self.data.clone(), node: None }
    }

    /// Gradient populated by backward, if any.
    pub fn grad(&self) -> Option<Vec<E>> {
        let (tape, id) = self.node.as_ref()?;
        tape.inner.borrow().nodes[*id].grad.clone()
    }

    /// Reverse sweep from a scalar loss. Populates grads on every leaf the
    /// loss depends on; gradients across fan-out accumulate by summation.
    /// Intermediate gradients are freed as soon as they are consumed. A tape
    /// supports exactly one backward sweep.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape
            )));
        }
        let (tape, loss_id) = self
            .node
            .as_ref()
            .ok_or_else(|| Error::Tape("backward on a tensor with no tape".into()))?;
        let mut inner = tape.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::Tape("backward already run on this tape".into()));
        }
        inner.consumed = true;

        let mut grads: Vec<Option<Vec<E>>> = (0..inner.nodes.len()).map(|_| None).collect();
        grads[*loss_id] = Some(vec![E::one()]);

        for i in (0..=*loss_id).rev() {
            let Some(g) = grads[i].take() else { continue };
            let Some(rec) = &inner.nodes[i].op else {
                inner.nodes[i].grad = Some(g);
                continue;
            };
            if rec.passthrough {
                if let Some(pid) = rec.inputs[0].node {
                    match &mut grads[pid] {
                        Some(acc) => {
                            for (a, v) in acc.iter_mut().zip(&g) {
                                *a += *v;
                            }
                        }
                        slot => *slot = Some(g),
                    }
                }
                continue;
            }
            let args = BackwardArgs {
                out_grad: &g,
                output: &rec.output,
                inputs: rec.inputs.iter().map(|inp| inp.data.as_slice()).collect(),
            };
            let contribs = (rec.func)(&args);
            debug_assert_eq!(contribs.len(), rec.inputs.len());
            for (inp, contrib) in rec.inputs.iter().zip(contribs) {
                let (Some(pid), Some(c)) = (inp.node, contrib) else { continue };
                match &mut grads[pid] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&c) {
                            *a += *v;
                        }
                    }
                    slot => {
                        debug_assert_eq!(c.len(), inner.nodes[pid].len);
                        *slot = Some(c);
                    }
                }
            }
        }
        Ok(())
    }

    /// Record an op result. If no input is on a tape the result is a plain
    /// constant; mixing tapes is an error.
    pub(crate) fn record(
        op: &'static str,
        inputs: &[&Tensor<E>],
        shape: Vec<usize>,
        out: Vec<E>,
        backward: impl Fn(&BackwardArgs<'_, E>) -> Vec<Option<Vec<E>>> + 'static,
    ) -> Result<Tensor<E>> {
        check_finite(op, &out)?;
        Self::record_rc(op, inputs, shape, Rc::new(out), false, backward)
    }

    /// Like [`Tensor::record`] but the output shares an existing buffer, so no
    /// copy is made and the finiteness scan is skipped (the buffer was already
    /// checked when it was produced). Used by pure-view ops such as reshape;
    /// `passthrough` marks the gradient as identity so backward can forward it
    /// without calling the rule.
    pub(crate) fn record_rc(
        op: &'static str,
        inputs: &[&Tensor<E>],
        shape: Vec<usize>,
        data: Rc<Vec<E>>,
        passthrough: bool,
        backward: impl Fn(&BackwardArgs<'_, E>) -> Vec<Option<Vec<E>>> + 'static,
    ) -> Result<Tensor<E>> {
        check_shape(op, &data, &shape)?;
        let mut tape: Option<Tape<E>> = None;
        for t in inputs {
            if let Some((tp, _)) = &t.node {
                match &tape {
                    None => tape = Some(tp.clone()),
                    Some(existing) if existing.same_tape(tp) => {}
                    Some(_) => {
                        return Err(Error::Tape(format!("{op}: inputs from different tapes")))
                    }
                }
            }
        }
        let node = match tape {
            None => None,
            Some(tp) => {
                let refs: Vec<InputRef<E>> = inputs
                    .iter()
                    .map(|t| InputRef {
                        data: t.data.clone(),
                        node: t.node.as_ref().map(|(_, id)| *id),
                    })
                    .collect();
                let mut inner = tp.inner.borrow_mut();
                let id = inner.nodes.len();
                inner.nodes.push(Node {
                    grad: None,
                    op: Some(OpRecord {
                        inputs: refs,
                        output: data.clone(),
                        func: Box::new(backward),
                        passthrough,
                    }),
                    len: data.len(),
                });
                drop(inner);
                Some((tp, id))
            }
        };
        Ok(Tensor { shape, data, node })
    }
}
