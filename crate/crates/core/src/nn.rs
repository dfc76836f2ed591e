//! Minimal differentiable building blocks: named parameters, channels-last
//! 3D convolution via im2col + GEMM, dense layers and ReLU.
//!
//! Every layer exposes an explicit `forward` that returns what its
//! `backward` needs, and `backward` accumulates into parameter gradients.
//! Everything is generic over [`Real`] so the same code runs in `f32` for
//! training and `f64` for finite-difference gradient checks.

use std::fmt::Debug;

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Floating-point scalar with a matching GEMM kernel.
pub trait Real: Float + Default + Debug + Send + Sync + std::iter::Sum + std::ops::AddAssign + 'static {
    /// `c = alpha * a·b + beta * c` with explicit row/column strides.
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

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

macro_rules! impl_real {
    ($t:ty, $kernel:path) => {
        impl Real for $t {
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
                if m == 0 || n == 0 {
                    return;
                }
                let span = |r: usize, cc: usize, rs: isize, cs: isize| {
                    if r == 0 || cc == 0 {
                        0
                    } else {
                        (r as isize - 1) * rs + (cc as isize - 1) * cs + 1
                    }
                };
                assert!(a.len() as isize >= span(m, k, rsa, csa), "gemm: lhs too short");
                assert!(b.len() as isize >= span(k, n, rsb, csb), "gemm: rhs too short");
                assert!(c.len() as isize >= span(m, n, rsc, csc), "gemm: output too short");
                // SAFETY: bounds checked above; strides are non-negative by construction.
                unsafe {
                    $kernel(
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
                    );
                }
            }

            fn from_f64(x: f64) -> Self {
                x as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Row-major `a[m×k] · b[k×n]` accumulated into `c` with weight `beta`.
pub fn matmul<R: Real>(m: usize, k: usize, n: usize, a: &[R], b: &[R], beta: R, c: &mut [R]) {
    R::gemm(m, k, n, R::one(), a, k as isize, 1, b, n as isize, 1, beta, c, n as isize, 1);
}

/// `c[k×n] += aᵀ · b` for row-major `a: m×k` and `b: m×n`.
pub fn matmul_at_b<R: Real>(m: usize, k: usize, n: usize, a: &[R], b: &[R], c: &mut [R]) {
    R::gemm(k, m, n, R::one(), a, 1, k as isize, b, n as isize, 1, R::one(), c, n as isize, 1);
}

/// `c[m×k] = a[m×n] · bᵀ` for `b: k×n`.
pub fn matmul_a_bt<R: Real>(m: usize, n: usize, k: usize, a: &[R], b: &[R], c: &mut [R]) {
    R::gemm(m, n, k, R::one(), a, n as isize, 1, b, 1, n as isize, R::zero(), c, k as isize, 1);
}

/// A named parameter tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<R> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<R>,
    pub grad: Vec<R>,
    /// Whether weight decay applies (false for biases).
    pub decay: bool,
}

impl<R: Real> Param<R> {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>, decay: bool) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            value: vec![R::zero(); n],
            grad: vec![R::zero(); n],
            decay,
        }
    }

    /// Gaussian init with standard deviation `std`.
    pub fn normal<G: Rng + ?Sized>(name: impl Into<String>, shape: Vec<usize>, std: f64, rng: &mut G) -> Self {
        let mut p = Self::zeros(name, shape, true);
        for v in &mut p.value {
            let z: f64 = StandardNormal.sample(rng);
            *v = R::from_f64(z * std);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = R::zero());
    }

    pub fn cast<S: Real>(&self) -> Param<S> {
        Param {
            name: self.name.clone(),
            shape: self.shape.clone(),
            value: self.value.iter().map(|v| S::from_f64(v.as_f64())).collect(),
            grad: self.grad.iter().map(|v| S::from_f64(v.as_f64())).collect(),
            decay: self.decay,
        }
    }
}

/// Channels-last activation volume `T × H × W × C`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<R> {
    pub dims: [usize; 4],
    pub data: Vec<R>,
}

impl<R: Real> Volume<R> {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![R::zero(); dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<R>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), data.len(), "volume size mismatch");
        Self { dims, data }
    }

    pub fn t(&self) -> usize {
        self.dims[0]
    }

    pub fn h(&self) -> usize {
        self.dims[1]
    }

    pub fn w(&self) -> usize {
        self.dims[2]
    }

    pub fn c(&self) -> usize {
        self.dims[3]
    }

    #[inline]
    pub fn index(&self, t: usize, y: usize, x: usize, c: usize) -> usize {
        ((t * self.dims[1] + y) * self.dims[2] + x) * self.dims[3] + c
    }

    pub fn at(&self, t: usize, y: usize, x: usize, c: usize) -> R {
        self.data[self.index(t, y, x, c)]
    }
}

pub fn relu_inplace<R: Real>(v: &mut [R]) {
    for x in v {
        if *x < R::zero() {
            *x = R::zero();
        }
    }
}

/// Zero the gradient wherever the ReLU output was zero.
pub fn relu_backward_inplace<R: Real>(output: &[R], grad: &mut [R]) {
    for (g, o) in grad.iter_mut().zip(output) {
        if *o <= R::zero() {
            *g = R::zero();
        }
    }
}

/// 3D convolution on channels-last volumes.
///
/// Weight layout is `[kt, kh, kw, c_in, c_out]`, i.e. a row-major
/// `(kt·kh·kw·c_in) × c_out` matrix matching the im2col row layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d<R> {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub weight: Param<R>,
    pub bias: Param<R>,
}

impl<R: Real> Conv3d<R> {
    /// He-normal initialised convolution with "same"-style padding.
    pub fn new<G: Rng + ?Sized>(
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        gain: f64,
        rng: &mut G,
    ) -> Self {
        let fan_in = kernel.iter().product::<usize>() * c_in;
        let std = gain * (2.0 / fan_in as f64).sqrt();
        let mut bias = Param::zeros(format!("{name}.bias"), vec![c_out], false);
        bias.decay = false;
        Self {
            c_in,
            c_out,
            kernel,
            stride,
            pad: [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2],
            weight: Param::normal(
                format!("{name}.weight"),
                vec![kernel[0], kernel[1], kernel[2], c_in, c_out],
                std,
                rng,
            ),
            bias,
        }
    }

    pub fn output_dims(&self, input: [usize; 4]) -> [usize; 4] {
        let o = |i: usize, a: usize| (input[i] + 2 * self.pad[a] - self.kernel[a]) / self.stride[a] + 1;
        [o(0, 0), o(1, 1), o(2, 2), self.c_out]
    }

    fn patch_len(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.c_in
    }

    /// Lower the input into a `positions × (k·c_in)` matrix.
    fn im2col(&self, x: &Volume<R>, out_dims: [usize; 4]) -> Vec<R> {
        let [ot, oh, ow, _] = out_dims;
        let cin = self.c_in;
        let kl = self.patch_len();
        let mut cols = vec![R::zero(); ot * oh * ow * kl];
        let mut row = 0;
        for t in 0..ot {
            for y in 0..oh {
                for xo in 0..ow {
                    let base = row * kl;
                    let mut k = 0;
                    for kt in 0..self.kernel[0] {
                        let it = (t * self.stride[0] + kt) as isize - self.pad[0] as isize;
                        for ky in 0..self.kernel[1] {
                            let iy = (y * self.stride[1] + ky) as isize - self.pad[1] as isize;
                            for kx in 0..self.kernel[2] {
                                let ix = (xo * self.stride[2] + kx) as isize - self.pad[2] as isize;
                                if it >= 0
                                    && iy >= 0
                                    && ix >= 0
                                    && (it as usize) < x.dims[0]
                                    && (iy as usize) < x.dims[1]
                                    && (ix as usize) < x.dims[2]
                                {
                                    let src = x.index(it as usize, iy as usize, ix as usize, 0);
                                    cols[base + k * cin..base + (k + 1) * cin]
                                        .copy_from_slice(&x.data[src..src + cin]);
                                }
                                k += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[R], out_dims: [usize; 4], in_dims: [usize; 4]) -> Volume<R> {
        let [ot, oh, ow, _] = out_dims;
        let cin = self.c_in;
        let kl = self.patch_len();
        let mut dx = Volume::zeros(in_dims);
        let mut row = 0;
        for t in 0..ot {
            for y in 0..oh {
                for xo in 0..ow {
                    let base = row * kl;
                    let mut k = 0;
                    for kt in 0..self.kernel[0] {
                        let it = (t * self.stride[0] + kt) as isize - self.pad[0] as isize;
                        for ky in 0..self.kernel[1] {
                            let iy = (y * self.stride[1] + ky) as isize - self.pad[1] as isize;
                            for kx in 0..self.kernel[2] {
                                let ix = (xo * self.stride[2] + kx) as isize - self.pad[2] as isize;
                                if it >= 0
                                    && iy >= 0
                                    && ix >= 0
                                    && (it as usize) < in_dims[0]
                                    && (iy as usize) < in_dims[1]
                                    && (ix as usize) < in_dims[2]
                                {
                                    let dst = dx.index(it as usize, iy as usize, ix as usize, 0);
                                    let src = &cols[base + k * cin..base + (k + 1) * cin];
                                    for (d, s) in dx.data[dst..dst + cin].iter_mut().zip(src) {
                                        *d += *s;
                                    }
                                }
                                k += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &Volume<R>) -> Volume<R> {
        assert_eq!(x.c(), self.c_in, "conv input channels");
        let od = self.output_dims(x.dims);
        let positions = od[0] * od[1] * od[2];
        let cols = self.im2col(x, od);
        let mut out = Vec::with_capacity(positions * self.c_out);
        for _ in 0..positions {
            out.extend_from_slice(&self.bias.value);
        }
        matmul(positions, self.patch_len(), self.c_out, &cols, &self.weight.value, R::one(), &mut out);
        Volume::from_vec(od, out)
    }

    /// Accumulate parameter gradients; returns the input gradient when
    /// `need_input_grad` is set.
    pub fn backward(&mut self, x: &Volume<R>, grad_out: &Volume<R>, need_input_grad: bool) -> Option<Volume<R>> {
        let od = grad_out.dims;
        let positions = od[0] * od[1] * od[2];
        let kl = self.patch_len();
        let cols = self.im2col(x, od);
        matmul_at_b(positions, kl, self.c_out, &cols, &grad_out.data, &mut self.weight.grad);
        for row in grad_out.data.chunks_exact(self.c_out) {
            for (g, v) in self.bias.grad.iter_mut().zip(row) {
                *g += *v;
            }
        }
        if !need_input_grad {
            return None;
        }
        let mut dcols = cols;
        matmul_a_bt(positions, self.c_out, kl, &grad_out.data, &self.weight.value, &mut dcols);
        Some(self.col2im(&dcols, od, x.dims))
    }

    pub fn params_mut(&mut self) -> [&mut Param<R>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param<R>; 2] {
        [&self.weight, &self.bias]
    }
}

/// Fully connected layer, weight stored as `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<R> {
    pub n_in: usize,
    pub n_out: usize,
    pub weight: Param<R>,
    pub bias: Param<R>,
}

impl<R: Real> Linear<R> {
    pub fn new<G: Rng + ?Sized>(name: &str, n_in: usize, n_out: usize, std: f64, rng: &mut G) -> Self {
        Self {
            n_in,
            n_out,
            weight: Param::normal(format!("{name}.weight"), vec![n_in, n_out], std, rng),
            bias: Param::zeros(format!("{name}.bias"), vec![n_out], false),
        }
    }

    pub fn zeros(name: &str, n_in: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_out,
            weight: Param::zeros(format!("{name}.weight"), vec![n_in, n_out], true),
            bias: Param::zeros(format!("{name}.bias"), vec![n_out], false),
        }
    }

    /// Rows of `x` are samples.
    pub fn forward(&self, x: &[R], rows: usize) -> Vec<R> {
        assert_eq!(x.len(), rows * self.n_in, "linear input size");
        let mut out = Vec::with_capacity(rows * self.n_out);
        for _ in 0..rows {
            out.extend_from_slice(&self.bias.value);
        }
        matmul(rows, self.n_in, self.n_out, x, &self.weight.value, R::one(), &mut out);
        out
    }

    pub fn backward(&mut self, x: &[R], grad_out: &[R], rows: usize) -> Vec<R> {
        matmul_at_b(rows, self.n_in, self.n_out, x, grad_out, &mut self.weight.grad);
        for row in grad_out.chunks_exact(self.n_out) {
            for (g, v) in self.bias.grad.iter_mut().zip(row) {
                *g += *v;
            }
        }
        let mut dx = vec![R::zero(); rows * self.n_in];
        matmul_a_bt(rows, self.n_out, self.n_in, grad_out, &self.weight.value, &mut dx);
        dx
    }

    pub fn params_mut(&mut self) -> [&mut Param<R>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param<R>; 2] {
        [&self.weight, &self.bias]
    }
}
