//! Dense n-dimensional tensors.
//!
//! A [`Tensor`] is a cheaply clonable handle to a contiguous scalar buffer plus
//! shape metadata. Values are immutable once produced by an operation; the two
//! sanctioned exceptions are gradient accumulation during [`Tape::backward`]
//! (interior `grad` slot) and in-place parameter updates by the optimizer
//! between training steps.
//!
//! [`Tape::backward`]: crate::tape::Tape::backward

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use rand::RngCore;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn next_tensor_id() -> u64 {
    thread_local! {
        static COUNTER: Cell<u64> = const { Cell::new(1) };
    }
    COUNTER.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

struct TensorInner<S: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<S>>,
    grad: RefCell<Option<Vec<S>>>,
    requires_grad: bool,
    /// Set when this tensor was produced by a recorded op or requires grad,
    /// so downstream ops know to keep recording.
    tracked: Cell<bool>,
    /// Id of the tape that produced this tensor, if any.
    origin_tape: Cell<Option<u64>>,
}

pub struct Tensor<S: Scalar = f32> {
    inner: Rc<TensorInner<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::InvalidShape {
                op: "Tensor::from_vec",
                shape,
                msg: format!("shape requires {numel} elements, data has {}", data.len()),
            });
        }
        Ok(Self::new_raw(shape, data, false))
    }

    pub(crate) fn new_raw(shape: Vec<usize>, data: Vec<S>, requires_grad: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(TensorInner {
                id: next_tensor_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                tracked: Cell::new(requires_grad),
                origin_tape: Cell::new(None),
            }),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new_raw(shape, vec![S::ZERO; n], false)
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let n = shape.iter().product();
        Self::new_raw(shape, vec![value; n], false)
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::full(shape, S::ONE)
    }

    pub fn scalar(value: S) -> Self {
        Self::new_raw(vec![1], vec![value], false)
    }

    /// Standard-normal samples via Box-Muller on the raw 64-bit stream, so the
    /// generated values depend only on the RNG state, not on library internals.
    pub fn randn(shape: Vec<usize>, rng: &mut impl RngCore) -> Self {
        let n = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let (a, b) = normal_pair(rng);
            data.push(S::from_f64(a));
            if data.len() < n {
                data.push(S::from_f64(b));
            }
        }
        Self::new_raw(shape, data, false)
    }

    /// Marks this tensor as a trainable parameter.
    pub fn requires_grad(self) -> Self {
        let inner = TensorInner {
            id: self.inner.id,
            shape: self.inner.shape.clone(),
            data: RefCell::new(self.data().to_vec()),
            grad: RefCell::new(None),
            requires_grad: true,
            tracked: Cell::new(true),
            origin_tape: Cell::new(None),
        };
        Tensor {
            inner: Rc::new(inner),
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

    pub fn data(&self) -> Ref<'_, Vec<S>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.inner.data.borrow().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().iter().map(|v| v.to_f64()).collect()
    }

    pub fn item(&self) -> S {
        debug_assert_eq!(self.numel(), 1);
        self.inner.data.borrow()[0]
    }

    pub fn is_requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub(crate) fn is_tracked(&self) -> bool {
        self.inner.tracked.get()
    }

    pub(crate) fn mark_tape_output(&self, tape_id: u64) {
        self.inner.tracked.set(true);
        self.inner.origin_tape.set(Some(tape_id));
    }

    pub(crate) fn origin_tape(&self) -> Option<u64> {
        self.inner.origin_tape.get()
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.inner.grad.borrow().clone()
    }

    pub fn grad_or_zeros(&self) -> Vec<S> {
        self.inner
            .grad
            .borrow()
            .clone()
            .unwrap_or_else(|| vec![S::ZERO; self.numel()])
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, delta: &[S]) {
        debug_assert_eq!(delta.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += *di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// In-place data update; reserved for the optimizer between steps.
    pub(crate) fn update_data(&self, f: impl FnOnce(&mut [S])) {
        f(&mut self.inner.data.borrow_mut());
    }

    /// Replaces the stored values, keeping shape. Used by checkpoint loading.
    pub fn set_data(&self, values: &[S]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::InvalidShape {
                op: "Tensor::set_data",
                shape: self.inner.shape.clone(),
                msg: format!("expected {} values, got {}", self.numel(), values.len()),
            });
        }
        self.inner.data.borrow_mut().copy_from_slice(values);
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite_scalar())
    }

    /// Plain (off-tape) elementwise map producing a constant tensor.
    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        let data = self.data().iter().map(|&v| f(v)).collect();
        Tensor::new_raw(self.inner.shape.clone(), data, false)
    }

    /// Row `i` of the leading axis as a standalone constant tensor.
    pub fn index_axis0(&self, i: usize) -> Tensor<S> {
        let shape = &self.inner.shape;
        assert!(!shape.is_empty() && i < shape[0], "index_axis0 out of range");
        let stride: usize = shape[1..].iter().product();
        let data = self.data()[i * stride..(i + 1) * stride].to_vec();
        Tensor::new_raw(shape[1..].to_vec(), data, false)
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor<S>]) -> Result<Tensor<S>> {
        let first = parts.first().ok_or_else(|| {
            Error::invalid("Tensor::stack", "need at least one tensor")
        })?;
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            if p.shape() != first.shape() {
                return Err(Error::ShapeMismatch {
                    op: "Tensor::stack",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            data.extend_from_slice(&p.data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(first.shape());
        Ok(Tensor::new_raw(shape, data, false))
    }

    /// Reinterpretation with identical element count, off-tape.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor<S>> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::InvalidShape {
                op: "Tensor::reshaped",
                shape,
                msg: format!("element count must stay {}", self.numel()),
            });
        }
        Ok(Tensor::new_raw(shape, self.to_vec(), false))
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data().iter().map(|v| T::from_f64(v.to_f64())).collect();
        Tensor::new_raw(self.inner.shape.clone(), data, false)
    }
}

/// One Box-Muller draw: two independent standard-normal samples.
pub fn normal_pair(rng: &mut impl RngCore) -> (f64, f64) {
    // u1 in (0, 1]: guard against ln(0).
    let u1 = ((rng.next_u64() >> 11) as f64 + 1.0) / (1u64 << 53) as f64;
    let u2 = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = 2.0 * std::f64::consts::PI * u2;
    (r * theta.cos(), r * theta.sin())
}

/// Relative L2 distance `|a - b| / max(|b|, floor)`, the standard comparison
/// metric for tensor-valued identities.
pub fn rel_l2_error<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (x, y) in a.data().iter().zip(b.data().iter()) {
        let d = x.to_f64() - y.to_f64();
        num += d * d;
        den += y.to_f64() * y.to_f64();
    }
    (num / den.max(1e-300)).sqrt()
}

/// Largest elementwise absolute difference.
pub fn max_abs_diff<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| (x.to_f64() - y.to_f64()).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn from_vec_checks_element_count() {
        let err = Tensor::<f32>::from_vec(vec![2, 3], vec![1.0; 5]).unwrap_err();
        assert!(matches!(err, Error::InvalidShape { .. }));
    }

    #[test]
    fn grad_accumulates_additively() {
        let t = Tensor::<f32>::zeros(vec![3]).requires_grad();
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        assert_eq!(t.grad().unwrap(), vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn randn_is_deterministic_per_seed() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::<f32>::randn(vec![16], &mut r1);
        let b = Tensor::<f32>::randn(vec![16], &mut r2);
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn stack_and_index_roundtrip() {
        let a = Tensor::<f32>::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f32>::from_vec(vec![2], vec![3.0, 4.0]).unwrap();
        let s = Tensor::stack(&[a, b]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.index_axis0(1).to_vec(), vec![3.0, 4.0]);
    }
}
