//! Convolution and transposed-convolution kernels with hand-written backward
//! passes, built on im2col + GEMM.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type the network can run in.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + AddAssign + Sum + Debug + Send + Sync + 'static
{
    /// Row-major `C = alpha * op(A) * op(B) + beta * C` with `op(A)` of shape
    /// `m x k` and `op(B)` of shape `k x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        n: usize,
        k: usize,
        alpha: Self,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    );
}

fn strides(trans_a: bool, trans_b: bool, m: usize, n: usize, k: usize) -> [isize; 6] {
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    [rsa as isize, csa as isize, rsb as isize, csb as isize, n as isize, 1]
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                trans_a: bool,
                trans_b: bool,
                m: usize,
                n: usize,
                k: usize,
                alpha: Self,
                a: &[Self],
                b: &[Self],
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let [rsa, csa, rsb, csb, rsc, csc] = strides(trans_a, trans_b, m, n, k);
                // SAFETY: slice lengths were checked above against the
                // extents implied by (m, n, k) and the chosen strides.
                unsafe {
                    $gemm(
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
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    /// Strided convolution, weight shape `[cout, cin, k, k]`.
    Conv,
    /// Transposed convolution, weight shape `[cin, cout, k, k]`.
    Transposed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

impl Activation {
    pub(crate) fn apply<T: Real>(self, v: &mut [T]) {
        match self {
            Activation::Identity => {}
            Activation::Relu => v.iter_mut().for_each(|x| *x = x.max(T::zero())),
            Activation::Sigmoid => v
                .iter_mut()
                .for_each(|x| *x = T::one() / (T::one() + (-*x).exp())),
        }
    }

    /// Turns a gradient w.r.t. the activation output into one w.r.t. its input,
    /// given the stored activation output.
    pub(crate) fn backprop<T: Real>(self, out: &[T], grad: &mut [T]) {
        match self {
            Activation::Identity => {}
            Activation::Relu => grad.iter_mut().zip(out).for_each(|(g, &y)| {
                if y <= T::zero() {
                    *g = T::zero();
                }
            }),
            Activation::Sigmoid => grad
                .iter_mut()
                .zip(out)
                .for_each(|(g, &y)| *g = *g * y * (T::one() - y)),
        }
    }
}

/// Geometry of a square-kernel convolution mapping a "wide" grid to a
/// "narrow" one. A transposed convolution runs the same geometry backwards.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    channels: usize,
    wide_h: usize,
    wide_w: usize,
    narrow_h: usize,
    narrow_w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.narrow_h * self.narrow_w
    }

    #[inline]
    fn source(&self, out: usize, tap: usize) -> Option<usize> {
        let pos = (out * self.stride + tap) as isize - self.pad as isize;
        (pos >= 0).then_some(pos as usize)
    }

    fn im2col<T: Real>(&self, wide: &[T], cols: &mut [T]) {
        let n = self.col_cols();
        for c in 0..self.channels {
            let plane = &wide[c * self.wide_h * self.wide_w..(c + 1) * self.wide_h * self.wide_w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..self.narrow_h {
                        let iy = self.source(oy, ky).filter(|&y| y < self.wide_h);
                        let line = &mut dst[oy * self.narrow_w..(oy + 1) * self.narrow_w];
                        match iy {
                            None => line.fill(T::zero()),
                            Some(iy) => {
                                for (ox, v) in line.iter_mut().enumerate() {
                                    *v = match self.source(ox, kx).filter(|&x| x < self.wide_w) {
                                        Some(ix) => plane[iy * self.wide_w + ix],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds columns back onto the wide grid (adjoint of `im2col`).
    fn col2im<T: Real>(&self, cols: &[T], wide: &mut [T]) {
        let n = self.col_cols();
        for c in 0..self.channels {
            let plane = &mut wide[c * self.wide_h * self.wide_w..(c + 1) * self.wide_h * self.wide_w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..self.narrow_h {
                        let Some(iy) = self.source(oy, ky).filter(|&y| y < self.wide_h) else {
                            continue;
                        };
                        for ox in 0..self.narrow_w {
                            if let Some(ix) = self.source(ox, kx).filter(|&x| x < self.wide_w) {
                                plane[iy * self.wide_w + ix] += src[oy * self.narrow_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// One convolutional layer with its parameters and output activation.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    pub kind: ConvKind,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub activation: Activation,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Values kept from the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct LayerCache<T> {
    in_h: usize,
    in_w: usize,
    /// im2col of the input for `Conv`, the raw input for `Transposed`.
    saved: Vec<T>,
    pub(crate) out: Vec<T>,
    pub(crate) out_h: usize,
    pub(crate) out_w: usize,
}

impl<T: Real> ConvLayer<T> {
    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            ConvKind::Conv => vec![self.cout, self.cin, self.k, self.k],
            ConvKind::Transposed => vec![self.cin, self.cout, self.k, self.k],
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        match self.kind {
            ConvKind::Conv => (
                (h + 2 * self.pad - self.k) / self.stride + 1,
                (w + 2 * self.pad - self.k) / self.stride + 1,
            ),
            ConvKind::Transposed => (
                (h - 1) * self.stride + self.k - 2 * self.pad,
                (w - 1) * self.stride + self.k - 2 * self.pad,
            ),
        }
    }

    fn geometry(&self, in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Geometry {
        match self.kind {
            ConvKind::Conv => Geometry {
                channels: self.cin,
                wide_h: in_h,
                wide_w: in_w,
                narrow_h: out_h,
                narrow_w: out_w,
                k: self.k,
                stride: self.stride,
                pad: self.pad,
            },
            ConvKind::Transposed => Geometry {
                channels: self.cout,
                wide_h: out_h,
                wide_w: out_w,
                narrow_h: in_h,
                narrow_w: in_w,
                k: self.k,
                stride: self.stride,
                pad: self.pad,
            },
        }
    }

    pub(crate) fn forward(&self, input: &[T], in_h: usize, in_w: usize) -> LayerCache<T> {
        debug_assert_eq!(input.len(), self.cin * in_h * in_w);
        let (out_h, out_w) = self.output_size(in_h, in_w);
        let g = self.geometry(in_h, in_w, out_h, out_w);
        let mut out = vec![T::zero(); self.cout * out_h * out_w];
        let saved = match self.kind {
            ConvKind::Conv => {
                let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
                g.im2col(input, &mut cols);
                T::gemm(
                    false,
                    false,
                    self.cout,
                    g.col_cols(),
                    g.col_rows(),
                    T::one(),
                    &self.weight,
                    &cols,
                    T::zero(),
                    &mut out,
                );
                cols
            }
            ConvKind::Transposed => {
                let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
                T::gemm(
                    true,
                    false,
                    g.col_rows(),
                    g.col_cols(),
                    self.cin,
                    T::one(),
                    &self.weight,
                    input,
                    T::zero(),
                    &mut cols,
                );
                g.col2im(&cols, &mut out);
                input.to_vec()
            }
        };
        let plane = out_h * out_w;
        for (o, &b) in self.bias.iter().enumerate() {
            out[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v += b);
        }
        self.activation.apply(&mut out);
        LayerCache {
            in_h,
            in_w,
            saved,
            out,
            out_h,
            out_w,
        }
    }

    /// Backward pass. `grad_out` is the gradient w.r.t. this layer's
    /// (post-activation) output; it is consumed in place. Parameter gradients
    /// are accumulated into `gw`/`gb`. Returns the input gradient if requested.
    pub(crate) fn backward(
        &self,
        cache: &LayerCache<T>,
        grad_out: &mut [T],
        gw: &mut [T],
        gb: &mut [T],
        want_input_grad: bool,
    ) -> Option<Vec<T>> {
        self.activation.backprop(&cache.out, grad_out);
        let plane = cache.out_h * cache.out_w;
        for (o, b) in gb.iter_mut().enumerate() {
            *b += grad_out[o * plane..(o + 1) * plane].iter().copied().sum();
        }
        let g = self.geometry(cache.in_h, cache.in_w, cache.out_h, cache.out_w);
        match self.kind {
            ConvKind::Conv => {
                let cols = &cache.saved;
                // dW[cout, rows] += dY[cout, n] * cols[rows, n]^T
                T::gemm(
                    false,
                    true,
                    self.cout,
                    g.col_rows(),
                    g.col_cols(),
                    T::one(),
                    grad_out,
                    cols,
                    T::one(),
                    gw,
                );
                want_input_grad.then(|| {
                    let mut dcols = vec![T::zero(); g.col_rows() * g.col_cols()];
                    T::gemm(
                        true,
                        false,
                        g.col_rows(),
                        g.col_cols(),
                        self.cout,
                        T::one(),
                        &self.weight,
                        grad_out,
                        T::zero(),
                        &mut dcols,
                    );
                    let mut din = vec![T::zero(); self.cin * cache.in_h * cache.in_w];
                    g.col2im(&dcols, &mut din);
                    din
                })
            }
            ConvKind::Transposed => {
                let input = &cache.saved;
                let mut dcols = vec![T::zero(); g.col_rows() * g.col_cols()];
                g.im2col(grad_out, &mut dcols);
                // dW[cin, rows] += X[cin, n] * dcols[rows, n]^T
                T::gemm(
                    false,
                    true,
                    self.cin,
                    g.col_rows(),
                    g.col_cols(),
                    T::one(),
                    input,
                    &dcols,
                    T::one(),
                    gw,
                );
                want_input_grad.then(|| {
                    let mut din = vec![T::zero(); self.cin * cache.in_h * cache.in_w];
                    T::gemm(
                        false,
                        false,
                        self.cin,
                        g.col_cols(),
                        g.col_rows(),
                        T::one(),
                        &self.weight,
                        &dcols,
                        T::zero(),
                        &mut din,
                    );
                    din
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(kind: ConvKind, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> ConvLayer<f64> {
        let wlen = cin * cout * k * k;
        ConvLayer {
            kind,
            cin,
            cout,
            k,
            stride,
            pad,
            activation: Activation::Identity,
            weight: (0..wlen).map(|i| ((i * 7 % 11) as f64 - 5.0) / 10.0).collect(),
            bias: (0..cout).map(|o| o as f64 * 0.1).collect(),
        }
    }

    /// Direct nested-loop convolution.
    fn naive_conv(l: &ConvLayer<f64>, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (oh, ow) = l.output_size(h, w);
        let mut out = vec![0.0; l.cout * oh * ow];
        for o in 0..l.cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = l.bias[o];
                    for c in 0..l.cin {
                        for ky in 0..l.k {
                            for kx in 0..l.k {
                                let iy = (oy * l.stride + ky) as isize - l.pad as isize;
                                let ix = (ox * l.stride + kx) as isize - l.pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += l.weight[((o * l.cin + c) * l.k + ky) * l.k + kx]
                                    * x[(c * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    /// Direct scatter form of the transposed convolution.
    fn naive_conv_t(l: &ConvLayer<f64>, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (oh, ow) = l.output_size(h, w);
        let mut out = vec![0.0; l.cout * oh * ow];
        for o in 0..l.cout {
            out[o * oh * ow..(o + 1) * oh * ow].fill(l.bias[o]);
        }
        for c in 0..l.cin {
            for iy in 0..h {
                for ix in 0..w {
                    for o in 0..l.cout {
                        for ky in 0..l.k {
                            for kx in 0..l.k {
                                let oy = (iy * l.stride + ky) as isize - l.pad as isize;
                                let ox = (ix * l.stride + kx) as isize - l.pad as isize;
                                if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                    continue;
                                }
                                out[(o * oh + oy as usize) * ow + ox as usize] += l.weight
                                    [((c * l.cout + o) * l.k + ky) * l.k + kx]
                                    * x[(c * h + iy) * w + ix];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn input(len: usize) -> Vec<f64> {
        (0..len).map(|i| ((i * 13 % 17) as f64) / 17.0).collect()
    }

    #[test]
    fn strided_conv_matches_direct_loops() {
        let l = layer(ConvKind::Conv, 3, 4, 4, 2, 1);
        let x = input(3 * 8 * 6);
        let got = l.forward(&x, 8, 6);
        assert_eq!((got.out_h, got.out_w), (4, 3));
        let want = naive_conv(&l, &x, 8, 6);
        for (a, b) in got.out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_conv_matches_direct_scatter() {
        let l = layer(ConvKind::Transposed, 3, 2, 4, 2, 1);
        let x = input(3 * 4 * 5);
        let got = l.forward(&x, 4, 5);
        assert_eq!((got.out_h, got.out_w), (8, 10));
        let want = naive_conv_t(&l, &x, 4, 5);
        for (a, b) in got.out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <dY, J dX> == <J^T dY, dX> for the linear (bias-free) part.
        for kind in [ConvKind::Conv, ConvKind::Transposed] {
            let mut l = layer(kind, 2, 3, 4, 2, 1);
            l.bias.iter_mut().for_each(|b| *b = 0.0);
            let (h, w) = (6, 4);
            let x = input(2 * h * w);
            let fwd = l.forward(&x, h, w);
            let dy: Vec<f64> = (0..fwd.out.len()).map(|i| ((i * 5 % 7) as f64) - 3.0).collect();
            let lhs: f64 = dy.iter().zip(&fwd.out).map(|(a, b)| a * b).sum();
            let mut gw = vec![0.0; l.weight.len()];
            let mut gb = vec![0.0; l.bias.len()];
            let mut g = dy.clone();
            let dx = l.backward(&fwd, &mut g, &mut gw, &mut gb, true).unwrap();
            let rhs: f64 = dx.iter().zip(&x).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9, "{kind:?}: {lhs} vs {rhs}");
            // Output is linear in the weights too.
            let rhs_w: f64 = gw.iter().zip(&l.weight).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs_w).abs() < 1e-9, "{kind:?}: {lhs} vs {rhs_w}");
        }
    }
}
