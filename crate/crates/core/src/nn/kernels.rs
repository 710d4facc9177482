//! Per-sample layer kernels, generic over the scalar type so that the same
//! code runs the f32 inference/training path and the f64 gradient check.
//!
//! Layouts: activations are `[channels][rows][cols]`, conv weights are
//! `[out][in][ky][kx]`, fc weights are `[out][in]`.

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

pub trait Real: Float + AddAssign + SubAssign + MulAssign + Default + Debug + Send + Sync + 'static {
    fn from_f32(v: f32) -> Self;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = a * b + beta * c` on row-major matrices, `a` is `m x k`, `b` is
    /// `k x n`. `trans_a`/`trans_b` reinterpret the stored buffer as the
    /// transpose (stored `k x m` / `n x k`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    );
}

fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // logical (rows x cols); stored either row-major as is, or as the transpose
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            #[inline]
            fn from_f32(v: f32) -> Self {
                v as $t
            }
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(m, k, trans_a);
                let (rsb, csb) = strides(k, n, trans_b);
                // SAFETY: bounds asserted above; strides describe buffers of
                // exactly m*k, k*n and m*n elements.
                unsafe {
                    $gemm(
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
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        self.kernel / 2
    }
    pub fn patch(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
    pub fn plane(&self) -> usize {
        self.rows * self.cols
    }
}

/// Unrolls same-padded patches into a `[in*k*k][rows*cols]` matrix.
pub fn im2col<T: Real>(g: &ConvGeom, input: &[T], cols: &mut Vec<T>) {
    let (k, pad, h, w) = (g.kernel, g.pad() as isize, g.rows, g.cols);
    let plane = g.plane();
    cols.clear();
    cols.resize(g.patch() * plane, T::zero());
    for ci in 0..g.in_channels {
        let src = &input[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = ((w as isize - dx).min(w as isize)).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        continue;
                    }
                    let sy = sy as usize;
                    let s = (sy * w) as isize + x0 as isize + dx;
                    let s = s as usize;
                    dst[y * w + x0..y * w + x1].copy_from_slice(&src[s..s + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
pub fn col2im<T: Real>(g: &ConvGeom, cols: &[T], grad_input: &mut [T]) {
    let (k, pad, h, w) = (g.kernel, g.pad() as isize, g.rows, g.cols);
    let plane = g.plane();
    grad_input.iter_mut().for_each(|v| *v = T::zero());
    for ci in 0..g.in_channels {
        let dst = &mut grad_input[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = ((w as isize - dx).min(w as isize)).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        continue;
                    }
                    let base = (sy as usize * w) as isize + dx;
                    for x in x0..x1 {
                        dst[(base + x as isize) as usize] += src[y * w + x];
                    }
                }
            }
        }
    }
}

/// Pre-activation conv output; `cols` receives the unrolled input for reuse
/// in the backward pass.
pub fn conv_forward<T: Real>(g: &ConvGeom, weights: &[T], bias: &[T], input: &[T], cols: &mut Vec<T>) -> Vec<T> {
    im2col(g, input, cols);
    let plane = g.plane();
    let mut out = vec![T::zero(); g.out_channels * plane];
    for (co, chunk) in out.chunks_mut(plane).enumerate() {
        chunk.iter_mut().for_each(|v| *v = bias[co]);
    }
    T::gemm(
        g.out_channels,
        g.patch(),
        plane,
        weights,
        false,
        cols,
        false,
        T::one(),
        &mut out,
    );
    out
}

/// Given `grad_out` w.r.t. the pre-activation output, writes weight and bias
/// gradients (overwriting) and returns the input gradient when requested.
pub fn conv_backward<T: Real>(
    g: &ConvGeom,
    weights: &[T],
    cols: &[T],
    grad_out: &[T],
    grad_w: &mut [T],
    grad_b: &mut [T],
    want_input: bool,
) -> Option<Vec<T>> {
    let plane = g.plane();
    T::gemm(
        g.out_channels,
        plane,
        g.patch(),
        grad_out,
        false,
        cols,
        true,
        T::zero(),
        grad_w,
    );
    for (co, chunk) in grad_out.chunks(plane).enumerate() {
        grad_b[co] = chunk.iter().fold(T::zero(), |a, &v| a + v);
    }
    if !want_input {
        return None;
    }
    let mut grad_cols = vec![T::zero(); g.patch() * plane];
    T::gemm(
        g.patch(),
        g.out_channels,
        plane,
        weights,
        true,
        grad_out,
        false,
        T::zero(),
        &mut grad_cols,
    );
    let mut grad_in = vec![T::zero(); g.in_channels * plane];
    col2im(g, &grad_cols, &mut grad_in);
    Some(grad_in)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
}

impl PoolGeom {
    pub fn out_rows(&self) -> usize {
        self.rows.div_ceil(2)
    }
    pub fn out_cols(&self) -> usize {
        self.cols.div_ceil(2)
    }
    pub fn out_len(&self) -> usize {
        self.channels * self.out_rows() * self.out_cols()
    }
}

/// 2x2 stride-2 max pooling in ceil mode (partial windows at the border).
/// Returns the output and the flat input index selected for each output.
pub fn pool_forward<T: Real>(g: &PoolGeom, input: &[T]) -> (Vec<T>, Vec<u32>) {
    let (h, w) = (g.rows, g.cols);
    let (oh, ow) = (g.out_rows(), g.out_cols());
    let mut out = Vec::with_capacity(g.out_len());
    let mut arg = Vec::with_capacity(g.out_len());
    for c in 0..g.channels {
        let base = c * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for y in 2 * oy..(2 * oy + 2).min(h) {
                    for x in 2 * ox..(2 * ox + 2).min(w) {
                        let i = base + y * w + x;
                        if input[i] > input[best] {
                            best = i;
                        }
                    }
                }
                out.push(input[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub fn pool_backward<T: Real>(g: &PoolGeom, arg: &[u32], grad_out: &[T]) -> Vec<T> {
    let mut grad_in = vec![T::zero(); g.channels * g.rows * g.cols];
    for (&i, &d) in arg.iter().zip(grad_out) {
        grad_in[i as usize] += d;
    }
    grad_in
}

pub fn fc_forward<T: Real>(in_size: usize, out_size: usize, weights: &[T], bias: &[T], input: &[T]) -> Vec<T> {
    let mut out = bias.to_vec();
    T::gemm(out_size, in_size, 1, weights, false, input, false, T::one(), &mut out);
    out
}

#[allow(clippy::too_many_arguments)]
pub fn fc_backward<T: Real>(
    in_size: usize,
    out_size: usize,
    weights: &[T],
    input: &[T],
    grad_out: &[T],
    grad_w: &mut [T],
    grad_b: &mut [T],
    want_input: bool,
) -> Option<Vec<T>> {
    T::gemm(out_size, 1, in_size, grad_out, false, input, false, T::zero(), grad_w);
    grad_b.copy_from_slice(grad_out);
    if !want_input {
        return None;
    }
    let mut grad_in = vec![T::zero(); in_size];
    T::gemm(
        in_size,
        out_size,
        1,
        weights,
        true,
        grad_out,
        false,
        T::zero(),
        &mut grad_in,
    );
    Some(grad_in)
}

pub fn relu_in_place<T: Real>(v: &mut [T]) {
    for x in v {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

pub fn softmax_in_place<T: Real>(v: &mut [T]) {
    let max = v.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = 0.0f64;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += x.as_f64();
    }
    let inv = T::from_f64(1.0 / sum);
    for x in v.iter_mut() {
        *x *= inv;
    }
}
