//! Dense tensors and the reverse-mode tape that differentiates them.
//!
//! The tape supports exactly the primitives the change-detection network
//! needs: convolution, resampling, channel-wise normalization and
//! reductions, a handful of elementwise maps and fused BCE-with-logits.
//! Every primitive carries a hand-written backward rule, and
//! [`finite_diff_check`] validates each of them numerically.

mod gradcheck;
mod graph;
pub mod io;
mod linalg;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

use crate::error::{Error, Result};

pub use gradcheck::{finite_diff_check, finite_diff_check_coords, finite_diff_check_with_fault, max_rel_error};
pub use graph::{sigmoid, softplus, BackwardFault, Graph, UpsampleMode, Var};

/// Floating-point element type of a tensor: `f64` for gradient checks,
/// `f32` for training throughput.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Default + Send + Sync + 'static
{
    /// Row-major GEMM `c = a·b + beta·c` with arbitrary strides.
    ///
    /// # Safety
    /// The pointers and strides must describe valid, non-overlapping
    /// `m×k`, `k×n` and `m×n` matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("real converts to f64")
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Dense row-major N-dimensional array with an optional gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor, rejecting zero extents, length mismatches and
    /// non-finite entries.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::dim("tensor", format!("extents must be positive, got {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} holds {numel} values but {} were given", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; numel])
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..numel).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<T>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() on a tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.contains(&0) {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    /// `(N, C, H, W)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::dim(
                "dims4",
                format!("expected rank 4 (N,C,H,W), got shape {:?}", self.shape),
            )),
        }
    }

    /// Converts element type; values are rounded when narrowing.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        )
    }

    /// Copy of sample `index` along the leading axis, keeping rank.
    pub fn select_batch(&self, index: usize) -> Result<Self> {
        let n = self.shape[0];
        if index >= n {
            return Err(Error::dim(
                "select_batch",
                format!("index {index} out of range for batch {n}"),
            ));
        }
        let stride = self.numel() / n;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Ok(Self::from_parts(
            shape,
            self.data[index * stride..(index + 1) * stride].to_vec(),
        ))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::dim("stack", "no tensors to stack"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::dim(
                    "stack",
                    format!("shape {:?} differs from {:?}", t.shape, first.shape),
                ));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self::from_parts(shape, data))
    }

    /// Nearest-neighbour downsampling of a rank-4 tensor: output pixel
    /// `(y, x)` takes input pixel `(y·factor, x·factor)`. Not differentiable.
    pub fn downsample_nearest(&self, factor: usize) -> Result<Self> {
        let (n, c, h, w) = self.dims4()?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::param(
                "downsample_nearest",
                format!("factor {factor} does not divide {h}x{w}"),
            ));
        }
        let (ho, wo) = (h / factor, w / factor);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for plane in self.data.chunks_exact(h * w) {
            for y in 0..ho {
                let row = &plane[y * factor * w..];
                out.extend((0..wo).map(|x| row[x * factor]));
            }
        }
        Ok(Self::from_parts(vec![n, c, ho, wo], out))
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::dim(
                "max_abs_diff",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    /// Exact equality of shape and the bit patterns of every element.
    pub fn bit_eq(&self, other: &Tensor<T>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

pub(crate) fn ensure_finite<T: Real>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}
