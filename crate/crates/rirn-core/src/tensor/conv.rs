//! 2-D convolution kernels: im2col + GEMM forward, and the matching
//! input/weight/bias gradient passes.
//!
//! Layout conventions: input (n, ci, h, w), weight (co, ci, kh, kw),
//! bias (1, co, 1, 1), output (n, co, oh, ow). Padding is zero-fill.
//! All loops run in a fixed order so results are bit-reproducible.

use super::{Elem, Shape, Tensor};

/// Reusable im2col/col2im buffer. One per tape; a tape is single-threaded.
pub struct Scratch<E> {
    cols: Vec<E>,
}

impl<E: Elem> Scratch<E> {
    pub fn new() -> Self {
        Scratch { cols: Vec::new() }
    }

    fn cols(&mut self, len: usize) -> &mut [E] {
        if self.cols.len() < len {
            self.cols.resize(len, E::zero());
        }
        &mut self.cols[..len]
    }
}

/// Output spatial size: floor((dim + 2*pad - k) / stride) + 1, if positive.
pub fn out_dim(dim: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = dim + 2 * padding;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Gather input patches into a (ci*kh*kw) x (oh*ow) column matrix.
///
/// Row r = (ci*kh + ky)*kw + kx holds, for every output pixel, the input
/// value under kernel tap (ky, kx) of channel ci, with zeros where the tap
/// falls in the padding.
#[allow(clippy::too_many_arguments)]
fn im2col<E: Elem>(
    input: &[E], // one batch item, (ci, h, w)
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    cols: &mut [E],
) {
    let m = oh * ow;
    for c in 0..ci {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * m;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(E::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if stride == 1 {
                        // ix = ox + kx - padding; valid ox range is a single span.
                        let ox0 = padding.saturating_sub(kx);
                        let ox1 = (w + padding - kx).min(ow);
                        dst[..ox0.min(ow)].fill(E::zero());
                        if ox0 < ox1 {
                            let ix0 = ox0 + kx - padding;
                            dst[ox0..ox1].copy_from_slice(&src_row[ix0..ix0 + (ox1 - ox0)]);
                        }
                        if ox1 < ow {
                            dst[ox1..].fill(E::zero());
                        }
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            *d = if ix >= 0 && (ix as usize) < w {
                                src_row[ix as usize]
                            } else {
                                E::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add a column matrix back onto an input-shaped gradient buffer.
#[allow(clippy::too_many_arguments)]
fn col2im_add<E: Elem>(
    cols: &[E],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    out: &mut [E], // one batch item, (ci, h, w)
) {
    let m = oh * ow;
    for c in 0..ci {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * m;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * ow..row + (oy + 1) * ow];
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dst_row[ix as usize] = dst_row[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

pub fn forward<E: Elem>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: &Tensor<E>,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    scratch: &mut Scratch<E>,
) -> Tensor<E> {
    let Shape { n, c: ci, h, w } = input.shape();
    let co = weight.shape().n;
    let (kh, kw) = (weight.shape().h, weight.shape().w);
    let k = ci * kh * kw;
    let m = oh * ow;

    let mut out = Tensor::zeros(Shape::new(n, co, oh, ow));
    let cols = scratch.cols(k * m);
    for b in 0..n {
        let item = &input.data()[b * ci * h * w..(b + 1) * ci * h * w];
        im2col(item, ci, h, w, kh, kw, stride, padding, oh, ow, cols);
        let dst = &mut out.data_mut()[b * co * m..(b + 1) * co * m];
        unsafe {
            E::gemm(
                co,
                k,
                m,
                E::one(),
                weight.data().as_ptr(),
                k as isize,
                1,
                cols.as_ptr(),
                m as isize,
                1,
                E::zero(),
                dst.as_mut_ptr(),
                m as isize,
                1,
            );
        }
        for c in 0..co {
            let bv = bias.data()[c];
            if bv != E::zero() {
                for v in &mut dst[c * m..(c + 1) * m] {
                    *v = *v + bv;
                }
            }
        }
    }
    out
}

/// Gradients of the convolution. Any of the three outputs may be skipped.
#[allow(clippy::too_many_arguments)]
pub fn backward<E: Elem>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    stride: usize,
    padding: usize,
    grad_out: &Tensor<E>,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
    scratch: &mut Scratch<E>,
) -> (Option<Tensor<E>>, Option<Tensor<E>>, Option<Tensor<E>>) {
    let Shape { n, c: ci, h, w } = input.shape();
    let co = weight.shape().n;
    let (kh, kw) = (weight.shape().h, weight.shape().w);
    let (oh, ow) = (grad_out.shape().h, grad_out.shape().w);
    let k = ci * kh * kw;
    let m = oh * ow;

    let grad_bias = need_bias.then(|| {
        let mut gb = Tensor::zeros(Shape::new(1, co, 1, 1));
        for b in 0..n {
            for c in 0..co {
                let plane = &grad_out.data()[(b * co + c) * m..(b * co + c + 1) * m];
                let mut acc = E::zero();
                for &g in plane {
                    acc = acc + g;
                }
                gb.data_mut()[c] = gb.data_mut()[c] + acc;
            }
        }
        gb
    });

    let mut grad_weight = need_weight.then(|| Tensor::zeros(weight.shape()));
    let mut grad_input = need_input.then(|| Tensor::zeros(input.shape()));

    if !need_weight && !need_input {
        return (grad_input, grad_weight, grad_bias);
    }

    let cols = scratch.cols(k * m);
    for b in 0..n {
        let go = &grad_out.data()[b * co * m..(b + 1) * co * m];
        if let Some(gw) = grad_weight.as_mut() {
            // dW(co,k) += dOut(co,m) * cols(k,m)^T
            let item = &input.data()[b * ci * h * w..(b + 1) * ci * h * w];
            im2col(item, ci, h, w, kh, kw, stride, padding, oh, ow, cols);
            unsafe {
                E::gemm(
                    co,
                    m,
                    k,
                    E::one(),
                    go.as_ptr(),
                    m as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    m as isize,
                    E::one(),
                    gw.data_mut().as_mut_ptr(),
                    k as isize,
                    1,
                );
            }
        }
        if let Some(gi) = grad_input.as_mut() {
            // cols(k,m) = W(co,k)^T * dOut(co,m), then scatter back.
            unsafe {
                E::gemm(
                    k,
                    co,
                    m,
                    E::one(),
                    weight.data().as_ptr(),
                    1,
                    k as isize,
                    go.as_ptr(),
                    m as isize,
                    1,
                    E::zero(),
                    cols.as_mut_ptr(),
                    m as isize,
                    1,
                );
            }
            let dst = &mut gi.data_mut()[b * ci * h * w..(b + 1) * ci * h * w];
            col2im_add(cols, ci, h, w, kh, kw, stride, padding, oh, ow, dst);
        }
    }

    (grad_input, grad_weight, grad_bias)
}
