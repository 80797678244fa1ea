//! A small volumetric neural-network engine.
//!
//! Layers expose explicit `forward` / `backward` pairs; networks built on top
//! keep whatever intermediate tensors their backward pass needs. Everything is
//! generic over [`Real`] so the same layer code runs in `f32` for training and
//! in `f64` for finite-difference gradient checks.
//!
//! Tensors are dense, row-major, five-dimensional: `[batch, channel, z, y, x]`.

mod act;
mod conv;
mod dense;
mod norm;
mod optim;

pub use act::{
    dropout_mask, leaky_relu, leaky_relu_backward, relu, relu_backward, sigmoid, tanh,
    tanh_backward,
};
pub use conv::{Conv3d, ConvGeom, ConvTranspose3d};
pub use dense::Linear;
pub use norm::{BatchNorm3d, BatchNormCache};
pub use optim::{Adam, AdamConfig, Sgd};

use num_traits::{Float, FromPrimitive, NumAssign};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fmt::Debug;
use std::iter::Sum;

/// Floating-point element type usable by the engine.
pub trait Real:
    Float + FromPrimitive + NumAssign + Default + Debug + Send + Sync + Sum + 'static
{
    /// Raw strided matrix multiply `C = alpha * A * B + beta * C`.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing `m×k`, `k×n`
    /// and `m×n` matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
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

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal fits the float type")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// `C (m×n) = alpha · op(A) · op(B) + beta · C` on contiguous row-major storage.
///
/// `trans_a` means `A` is stored `k×m`; `trans_b` means `B` is stored `n×k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k, "gemm: A too small");
    assert!(b.len() >= k * n, "gemm: B too small");
    assert!(c.len() >= m * n, "gemm: C too small");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: sizes checked above; slices do not alias because `c` is `&mut`.
    unsafe {
        T::gemm_raw(
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
            n as isize,
            1,
        )
    }
}

/// Dense 5-D tensor `[batch, channel, z, y, x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 5],
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: [usize; 5]) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: [usize; 5], value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 5], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 5] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    /// Voxels per channel.
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.plane()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.sample_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(a: &Self, b: &Self) -> Self {
        assert_eq!(a.shape[0], b.shape[0], "concat: batch mismatch");
        assert_eq!(a.spatial(), b.spatial(), "concat: spatial mismatch");
        let mut shape = a.shape;
        shape[1] += b.shape[1];
        let mut data = Vec::with_capacity(shape.iter().product());
        for n in 0..a.batch() {
            data.extend_from_slice(a.sample(n));
            data.extend_from_slice(b.sample(n));
        }
        Self { shape, data }
    }

    /// Inverse of [`Tensor::concat_channels`]: split off the first `c` channels.
    pub fn split_channels(&self, c: usize) -> (Self, Self) {
        assert!(c <= self.channels());
        let plane = self.plane();
        let mut sa = self.shape;
        sa[1] = c;
        let mut sb = self.shape;
        sb[1] = self.channels() - c;
        let mut a = Vec::with_capacity(sa.iter().product());
        let mut b = Vec::with_capacity(sb.iter().product());
        for n in 0..self.batch() {
            let s = self.sample(n);
            a.extend_from_slice(&s[..c * plane]);
            b.extend_from_slice(&s[c * plane..]);
        }
        (Self::from_vec(sa, a), Self::from_vec(sb, b))
    }

    /// Stack single-sample tensors into a batch.
    pub fn stack(items: &[Self]) -> Self {
        assert!(!items.is_empty(), "stack of zero tensors");
        let mut shape = items[0].shape;
        let mut data = Vec::with_capacity(shape.iter().product::<usize>() * items.len());
        for t in items {
            assert_eq!(t.shape[1..], shape[1..], "stack: shape mismatch");
            data.extend_from_slice(&t.data);
        }
        shape[0] = items.iter().map(|t| t.shape[0]).sum();
        Self { shape, data }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A trainable parameter block with its accumulated gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param<T> {
    pub value: Vec<T>,
    #[serde(skip)]
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Vec<T>) -> Self {
        let grad = vec![T::zero(); value.len()];
        Self { value, grad }
    }

    pub fn zeros(len: usize) -> Self {
        Self::new(vec![T::zero(); len])
    }

    pub fn normal(len: usize, std: f64, rng: &mut impl Rng) -> Self {
        Self::new(
            (0..len)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    T::lit(z * std)
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        if self.grad.len() != self.value.len() {
            self.grad = vec![T::zero(); self.value.len()];
        } else {
            self.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }
}

/// Weight initialisation scheme for convolution and dense layers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Zero-mean normal with a fixed standard deviation (DCGAN/pix2pix style).
    Normal(f64),
    /// He-normal scaled by fan-in.
    He,
}

impl Init {
    pub(crate) fn std(self, fan_in: usize) -> f64 {
        match self {
            Init::Normal(s) => s,
            Init::He => (2.0 / fan_in.max(1) as f64).sqrt(),
        }
    }
}

/// Anything holding trainable parameters in a fixed, stable order.
pub trait Parameterized<T: Real> {
    fn params(&self) -> Vec<&Param<T>>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;

    /// Non-trainable state (e.g. batch-norm running statistics) in a fixed order.
    fn buffers(&self) -> Vec<&Vec<T>> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Vec<T>> {
        Vec::new()
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Flatten parameters followed by buffers into one vector.
    fn export_state(&self) -> Vec<T> {
        let mut out = Vec::new();
        for p in self.params() {
            out.extend_from_slice(&p.value);
        }
        for b in self.buffers() {
            out.extend_from_slice(b);
        }
        out
    }

    /// Restore from [`Parameterized::export_state`] output.
    fn import_state(&mut self, state: &[T]) -> crate::Result<()> {
        let expected: usize = self.params().iter().map(|p| p.len()).sum::<usize>()
            + self.buffers().iter().map(|b| b.len()).sum::<usize>();
        if state.len() != expected {
            return Err(crate::Error::Consistency(format!(
                "state has {} values, network expects {expected}",
                state.len()
            )));
        }
        let mut offset = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.value.copy_from_slice(&state[offset..offset + n]);
            offset += n;
        }
        for b in self.buffers_mut() {
            let n = b.len();
            b.copy_from_slice(&state[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

/// Convert a network state between float types (checkpoints are stored as f32).
pub fn cast_state<A: Real, B: Real>(state: &[A]) -> Vec<B> {
    state.iter().map(|&v| B::lit(v.to_f64_lossy())).collect()
}
