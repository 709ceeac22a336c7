use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use rand::Rng;

/// Scalar type the tensor machinery is generic over.
///
/// `f32` is the training dtype; `f64` backs finite-difference gradient
/// checks. Only these two are implemented.
pub trait Element:
    Copy
    + PartialOrd
    + fmt::Debug
    + Send
    + Sync
    + 'static
    + std::ops::Neg<Output = Self>
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn abs(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn is_finite(self) -> bool;
    fn max(self, other: Self) -> Self;
    fn min(self, other: Self) -> Self;

    /// GEMM on row-major slices: `c = alpha * a@b + beta * c`.
    ///
    /// # Safety
    /// Caller guarantees `a` is m*k, `b` is k*n and `c` is m*n.
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        b: *const Self,
        beta: Self,
        c: *mut Self,
    );
}

macro_rules! impl_element {
    ($t:ty, $gemm:path) => {
        impl Element for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline(always)]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline(always)]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline(always)]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline(always)]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline(always)]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline(always)]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline(always)]
            fn powi(self, n: i32) -> Self {
                <$t>::powi(self, n)
            }
            #[inline(always)]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline(always)]
            fn max(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
            #[inline(always)]
            fn min(self, other: Self) -> Self {
                <$t>::min(self, other)
            }

            unsafe fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: *const Self,
                b: *const Self,
                beta: Self,
                c: *mut Self,
            ) {
                $gemm(
                    m, k, n, alpha, a, k as isize, 1, b, n as isize, 1, beta, c, n as isize, 1,
                )
            }
        }
    };
}

impl_element!(f32, matrixmultiply::sgemm);
impl_element!(f64, matrixmultiply::dgemm);

type BackwardFn<T> = Box<dyn Fn(&[T])>;

struct Node<T: Element> {
    parents: Vec<Tensor<T>>,
    /// Receives the gradient of the loss w.r.t. this tensor and accumulates
    /// into the parents' `grad` buffers.
    backward: BackwardFn<T>,
}

pub(crate) struct Inner<T: Element> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    node: Option<Node<T>>,
}

/// Dense N-dimensional float array with optional gradient tracking.
///
/// Cloning is cheap (reference-counted). Values are immutable once created;
/// the only sanctioned mutation is an optimizer update on leaf parameters.
pub struct Tensor<T: Element = f32> {
    inner: Rc<RefCell<Inner<T>>>,
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        write!(
            f,
            "Tensor{:?}{}",
            inner.shape,
            if inner.requires_grad { " (grad)" } else { "" }
        )
    }
}

impl<T: Element> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape,
                data,
                requires_grad: false,
                grad: None,
                node: None,
            })),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![T::ZERO; n])
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![value; n])
    }

    pub fn scalar(value: T) -> Self {
        Tensor::from_vec(vec![1], vec![value])
    }

    /// Gaussian-initialized tensor, mean 0 and the given standard deviation.
    pub fn randn<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        // Box-Muller on the uniform stream keeps the generator portable.
        while data.len() < n {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen::<f64>();
            let r = (-2.0 * u1.ln()).sqrt();
            let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
            data.push(T::from_f64(r * c * std));
            if data.len() < n {
                data.push(T::from_f64(r * s * std));
            }
        }
        Tensor::from_vec(shape, data)
    }

    pub fn requires_grad(self) -> Self {
        self.inner.borrow_mut().requires_grad = true;
        self
    }

    pub fn is_tracked(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Borrow of the underlying values.
    pub fn data(&self) -> Ref<'_, [T]> {
        Ref::map(self.inner.borrow(), |inner| inner.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.borrow().data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "item() on non-scalar {:?}", inner.shape);
        inner.data[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Copy of the values with graph history dropped.
    pub fn detach(&self) -> Tensor<T> {
        let inner = self.inner.borrow();
        Tensor::from_vec(inner.shape.clone(), inner.data.clone())
    }

    /// In-place update of a leaf tensor; used by the optimizer.
    ///
    /// Panics if this tensor was produced by an op: results are immutable.
    pub(crate) fn apply_update(&self, f: impl Fn(usize, T) -> T) {
        let mut inner = self.inner.borrow_mut();
        assert!(inner.node.is_none(), "cannot mutate a non-leaf tensor");
        for (i, v) in inner.data.iter_mut().enumerate() {
            *v = f(i, *v);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.inner.borrow().data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn make_result(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Tensor<T> {
        let tracked = parents.iter().any(|p| p.is_tracked());
        let out = Tensor::from_vec(shape, data);
        if tracked {
            let mut inner = out.inner.borrow_mut();
            inner.requires_grad = true;
            inner.node = Some(Node { parents, backward });
        }
        out
    }

    pub(crate) fn accumulate_grad(&self, delta: &[T]) {
        let mut inner = self.inner.borrow_mut();
        if !inner.requires_grad {
            return;
        }
        let n = inner.data.len();
        debug_assert_eq!(delta.len(), n);
        let grad = inner.grad.get_or_insert_with(|| vec![T::ZERO; n]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += *d;
        }
    }

    fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    /// Reverse-mode gradient propagation from a scalar output.
    ///
    /// Accumulates into `grad` of every tensor in the graph that requires
    /// gradients; call [`Tensor::zero_grad`] on parameters between steps.
    pub fn backward(&self) {
        assert_eq!(self.len(), 1, "backward() expects a scalar output");
        let order = self.topo_order();
        self.accumulate_grad(&[T::ONE]);
        for tensor in order.into_iter().rev() {
            let grad = {
                let inner = tensor.inner.borrow();
                if inner.node.is_none() {
                    continue;
                }
                match &inner.grad {
                    Some(g) => g.clone(),
                    // Dead branch: nothing downstream touched this node.
                    None => continue,
                }
            };
            let inner = tensor.inner.borrow();
            if let Some(node) = &inner.node {
                (node.backward)(&grad);
            }
        }
    }

    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        // Iterative DFS; graphs from long training loops overflow the stack
        // with naive recursion.
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        seen.insert(self.ptr_id());
        while let Some((tensor, child_idx)) = stack.pop() {
            let next_child = {
                let inner = tensor.inner.borrow();
                inner.node.as_ref().and_then(|node| {
                    node.parents
                        .iter()
                        .enumerate()
                        .skip(child_idx)
                        .find(|(_, p)| !seen.contains(&p.ptr_id()))
                        .map(|(i, p)| (i, p.clone()))
                })
            };
            match next_child {
                Some((i, parent)) => {
                    seen.insert(parent.ptr_id());
                    stack.push((tensor, i + 1));
                    stack.push((parent, 0));
                }
                None => order.push(tensor),
            }
        }
        order
    }
}

impl Tensor<f32> {
    pub fn to_f64(&self) -> Tensor<f64> {
        let inner = self.inner.borrow();
        Tensor::from_vec(
            inner.shape.clone(),
            inner.data.iter().map(|&v| v as f64).collect(),
        )
    }
}

impl Tensor<f64> {
    pub fn to_f32(&self) -> Tensor<f32> {
        let inner = self.inner.borrow();
        Tensor::from_vec(
            inner.shape.clone(),
            inner.data.iter().map(|&v| v as f32).collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn shape_data_length_invariant() {
        let t = Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 6]);
        assert_eq!(t.shape(), vec![2, 3]);
        assert_eq!(t.len(), 6);
    }

    #[test]
    #[should_panic(expected = "does not match data length")]
    fn mismatched_shape_panics() {
        let _ = Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 5]);
    }

    #[test]
    fn randn_is_deterministic_per_seed() {
        let mut a = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut b = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let ta = Tensor::<f32>::randn(vec![32], 1.0, &mut a);
        let tb = Tensor::<f32>::randn(vec![32], 1.0, &mut b);
        assert_eq!(ta.to_vec(), tb.to_vec());
    }

    #[test]
    fn grad_matches_shape_when_present() {
        let t = Tensor::<f32>::from_vec(vec![3], vec![1.0, 2.0, 3.0]).requires_grad();
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        assert_eq!(t.grad().unwrap().len(), t.len());
    }
}
