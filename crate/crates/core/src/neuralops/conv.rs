//! 3D cross-correlation by im2col + GEMM.

use super::tensor::{matmul, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeometry {
    pub fn rows(&self) -> usize {
        self.c_in * self.kernel.iter().product::<usize>()
    }

    pub fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    pub fn in_len(&self) -> usize {
        self.input.iter().product()
    }
}

/// Valid output range along one axis for kernel offset `k`: output positions
/// `o` whose input index `o + k - pad` falls in `[0, n)`.
#[inline]
fn valid_range(n: usize, out: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (n + pad).saturating_sub(k).min(out);
    (lo, hi.max(lo))
}

/// Unfolds one sample (`c_in x D x H x W`) into a `rows x out_len` matrix.
pub(crate) fn im2col<T: Scalar>(g: &ConvGeometry, input: &[T], cols: &mut [T]) {
    let [d, h, w] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [pd, ph, pw] = g.pad;
    let [od, oh, ow] = g.output;
    let p = g.out_len();
    for c in 0..g.c_in {
        let src = &input[c * d * h * w..(c + 1) * d * h * w];
        for kz in 0..kd {
            let (z_lo, z_hi) = valid_range(d, od, kz, pd);
            for ky in 0..kh {
                let (y_lo, y_hi) = valid_range(h, oh, ky, ph);
                for kx in 0..kw {
                    let (x_lo, x_hi) = valid_range(w, ow, kx, pw);
                    let row = ((c * kd + kz) * kh + ky) * kw + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    dst.fill(T::zero());
                    for oz in z_lo..z_hi {
                        let iz = oz + kz - pd;
                        for oy in y_lo..y_hi {
                            let iy = oy + ky - ph;
                            let s = (iz * h + iy) * w + x_lo + kx - pw;
                            let o = (oz * oh + oy) * ow;
                            dst[o + x_lo..o + x_hi].copy_from_slice(&src[s..s + (x_hi - x_lo)]);
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds a column matrix into one sample.
pub(crate) fn col2im_add<T: Scalar>(g: &ConvGeometry, cols: &[T], input_grad: &mut [T]) {
    let [d, h, w] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [pd, ph, pw] = g.pad;
    let [od, oh, ow] = g.output;
    let p = g.out_len();
    for c in 0..g.c_in {
        let dst = &mut input_grad[c * d * h * w..(c + 1) * d * h * w];
        for kz in 0..kd {
            let (z_lo, z_hi) = valid_range(d, od, kz, pd);
            for ky in 0..kh {
                let (y_lo, y_hi) = valid_range(h, oh, ky, ph);
                for kx in 0..kw {
                    let (x_lo, x_hi) = valid_range(w, ow, kx, pw);
                    let row = ((c * kd + kz) * kh + ky) * kw + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oz in z_lo..z_hi {
                        let iz = oz + kz - pd;
                        for oy in y_lo..y_hi {
                            let iy = oy + ky - ph;
                            let s = (iz * h + iy) * w + x_lo + kx - pw;
                            let o = (oz * oh + oy) * ow;
                            for (acc, &v) in dst[s..s + (x_hi - x_lo)].iter_mut().zip(&src[o + x_lo..o + x_hi]) {
                                *acc += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Scalar>(g: &ConvGeometry, batch: usize, input: &[T], kernel: &[T], bias: &[T]) -> Vec<T> {
    let (k, p) = (g.rows(), g.out_len());
    let mut out = vec![T::zero(); batch * g.c_out * p];
    let mut cols = vec![T::zero(); k * p];
    for n in 0..batch {
        im2col(g, &input[n * g.c_in * g.in_len()..(n + 1) * g.c_in * g.in_len()], &mut cols);
        let dst = &mut out[n * g.c_out * p..(n + 1) * g.c_out * p];
        matmul(g.c_out, k, p, kernel, false, &cols, false, dst, false);
        for (co, row) in dst.chunks_exact_mut(p).enumerate() {
            let b = bias[co];
            row.iter_mut().for_each(|v| *v += b);
        }
    }
    out
}

/// Gradients of a convolution. `None` slots are skipped.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Scalar>(
    g: &ConvGeometry,
    batch: usize,
    input: &[T],
    kernel: &[T],
    out_grad: &[T],
    mut input_grad: Option<&mut [T]>,
    mut kernel_grad: Option<&mut [T]>,
    mut bias_grad: Option<&mut [T]>,
) {
    let (k, p) = (g.rows(), g.out_len());
    let in_stride = g.c_in * g.in_len();
    let mut cols = vec![T::zero(); k * p];
    for n in 0..batch {
        let dy = &out_grad[n * g.c_out * p..(n + 1) * g.c_out * p];
        if let Some(bg) = bias_grad.as_deref_mut() {
            for (co, row) in dy.chunks_exact(p).enumerate() {
                let s: f64 = row.iter().map(|v| v.as_f64()).sum();
                bg[co] += T::from_f64(s);
            }
        }
        if let Some(kg) = kernel_grad.as_deref_mut() {
            im2col(g, &input[n * in_stride..(n + 1) * in_stride], &mut cols);
            // dW (c_out x k) += dY (c_out x p) * cols^T (p x k)
            matmul(g.c_out, p, k, dy, false, &cols, true, kg, true);
        }
        if let Some(ig) = input_grad.as_deref_mut() {
            // dCols (k x p) = W^T (k x c_out) * dY (c_out x p)
            matmul(k, g.c_out, p, kernel, true, dy, false, &mut cols, false);
            col2im_add(g, &cols, &mut ig[n * in_stride..(n + 1) * in_stride]);
        }
    }
}
