//! A small reverse-mode tensor engine.
//!
//! Values are dense `N x C x H x W` arrays. Every forward operator records a
//! node on a [`Tape`]; [`Tape::backward`] walks the tape in reverse and returns
//! the gradients of all parameters that were read during the forward pass.
//!
//! The engine is generic over [`Real`] so the same network code runs in `f32`
//! for training and in `f64` inside the finite-difference checker.

mod gradcheck;
mod ops;
mod optim;
mod params;
mod tape;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ParamCheck};
pub use ops::{Activation, ScanOrder};
pub use optim::{cosine_lr, AdamW, AdamWConfig, LrSchedule, OptimizerState};
pub use params::{Init, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{shape_err, Result};

/// Scalar type the engine computes in.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    fn from_f64c(v: f64) -> Self;
    fn erf(self) -> Self;

    /// `c = alpha * a * b + beta * c` for row-major `a: m x k`, `b: k x n`.
    /// Strides are (row, col) element strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );
}

impl Real for f32 {
    #[inline]
    fn from_f64c(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        (rsa, csa): (usize, usize),
        b: &[f32],
        (rsb, csb): (usize, usize),
        beta: f32,
        c: &mut [f32],
        (rsc, csc): (usize, usize),
    ) {
        if m == 0 || n == 0 {
            return;
        }
        check_gemm_extent(m, k, a.len(), rsa, csa);
        check_gemm_extent(k, n, b.len(), rsb, csb);
        check_gemm_extent(m, n, c.len(), rsc, csc);
        // SAFETY: extents checked above; matrixmultiply only touches
        // elements inside the described views.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                beta,
                c.as_mut_ptr(),
                rsc as isize,
                csc as isize,
            );
        }
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64c(v: f64) -> Self {
        v
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        (rsa, csa): (usize, usize),
        b: &[f64],
        (rsb, csb): (usize, usize),
        beta: f64,
        c: &mut [f64],
        (rsc, csc): (usize, usize),
    ) {
        if m == 0 || n == 0 {
            return;
        }
        check_gemm_extent(m, k, a.len(), rsa, csa);
        check_gemm_extent(k, n, b.len(), rsb, csb);
        check_gemm_extent(m, n, c.len(), rsc, csc);
        // SAFETY: see the f32 impl.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                beta,
                c.as_mut_ptr(),
                rsc as isize,
                csc as isize,
            );
        }
    }
}

fn check_gemm_extent(rows: usize, cols: usize, len: usize, rs: usize, cs: usize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) * rs + (cols - 1) * cs;
    assert!(last < len, "gemm view out of bounds ({last} >= {len})");
}

/// `(batch, channels, height, width)`.
pub type Shape = [usize; 4];

/// Dense row-major NCHW array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(shape_err!(
                "shape {:?} needs {} values, got {}",
                shape,
                len,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: Shape, v: T) -> Self {
        Self {
            shape,
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: [1, 1, 1, 1],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for a in 0..n {
            for b in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f([a, b, y, x]));
                    }
                }
            }
        }
        Self { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.shape[0]
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.shape[3]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, [a, b, y, x]: [usize; 4]) -> usize {
        let [_, c, h, w] = self.shape;
        ((a * c + b) * h + y) * w + x
    }

    #[inline]
    pub fn at(&self, idx: [usize; 4]) -> T {
        self.data[self.index(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: [usize; 4], v: T) {
        let i = self.index(idx);
        self.data[i] = v;
    }

    /// Reinterpret with a new shape of the same element count.
    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// One batch item as a `1 x C x H x W` tensor.
    pub fn batch_item(&self, i: usize) -> Self {
        let [_, c, h, w] = self.shape;
        let len = c * h * w;
        Self {
            shape: [1, c, h, w],
            data: self.data[i * len..(i + 1) * len].to_vec(),
        }
    }

    /// Stack `1 x C x H x W` (or larger batch) tensors along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| shape_err!("cannot stack zero tensors"))?;
        let [_, c, h, w] = first.shape;
        let mut n = 0;
        let mut data = Vec::new();
        for t in items {
            if t.shape[1..] != [c, h, w] {
                return Err(shape_err!("stack: {:?} vs {:?}", t.shape, first.shape));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Self {
            shape: [n, c, h, w],
            data,
        })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64c(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().to_f64().unwrap_or(f64::NAN))
            .fold(0.0, f64::max)
    }
}
