//! 2-D cross-correlation lowered onto a matrix multiply.
//!
//! Each image is unfolded into a `(Cin*k*k, OH*OW)` patch matrix, which
//! keeps the working set small enough to stay in cache.

use super::{check_axis, Shape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn patch_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn in_image(&self) -> usize {
        self.cin * self.h * self.w
    }
}

fn geometry<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Geometry> {
    const OP: &str = "conv2d";
    let [n, cin, h, w] = x.nchw(OP)?;
    let [cout, wcin, kh, kw] = weight.nchw(OP)?;
    check_axis(OP, "input channels", cin, wcin)?;
    if kh != kw || kh % 2 == 0 {
        return Err(Error::InvalidShape {
            op: OP,
            msg: format!("kernel must be square with odd size, got {kh}x{kw}"),
        });
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d: stride must be at least 1".into()));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::InvalidShape {
            op: OP,
            msg: format!("padded input {}x{} smaller than kernel {kh}", h + 2 * pad, w + 2 * pad),
        });
    }
    Ok(Geometry {
        n,
        cin,
        h,
        w,
        cout,
        k: kh,
        stride,
        pad,
        oh: (h + 2 * pad - kh) / stride + 1,
        ow: (w + 2 * pad - kw) / stride + 1,
    })
}

/// Input column `iw` for output column `ow`, or `None` when it lands in the padding.
#[inline]
fn source(o: usize, offset: usize, g: &Geometry, extent: usize) -> Option<usize> {
    (o * g.stride + offset).checked_sub(g.pad).filter(|&i| i < extent)
}

/// Output positions `lo..hi` whose tap at `offset` lands inside `extent`.
#[inline]
fn valid_range(offset: usize, g: &Geometry, extent: usize, outputs: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(offset).div_ceil(g.stride).min(outputs);
    // Largest o with o * stride + offset - pad < extent.
    let hi = if extent + g.pad > offset {
        ((extent + g.pad - offset - 1) / g.stride + 1).min(outputs)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Unfolds one (Cin,H,W) image into `out`, a (Cin*k*k, OH*OW) patch matrix.
fn im2col<T: Scalar>(x: &[T], g: &Geometry, out: &mut [T]) {
    let ohw = g.out_plane();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..][..g.h * g.w];
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = (ci * g.k + kh) * g.k + kw;
                let dst = &mut out[row * ohw..(row + 1) * ohw];
                let (lo, hi) = valid_range(kw, g, g.w, g.ow);
                for oh in 0..g.oh {
                    let line = &mut dst[oh * g.ow..(oh + 1) * g.ow];
                    let Some(ih) = source(oh, kh, g, g.h) else {
                        line.fill(T::zero());
                        continue;
                    };
                    let src = &plane[ih * g.w..(ih + 1) * g.w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if lo == hi {
                        continue;
                    }
                    if g.stride == 1 {
                        let start = lo + kw - g.pad;
                        line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (ow, d) in line.iter_mut().enumerate().take(hi).skip(lo) {
                            *d = src[ow * g.stride + kw - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a patch matrix back onto one image.
fn col2im<T: Scalar>(cols: &[T], g: &Geometry, out: &mut [T]) {
    let ohw = g.out_plane();
    for ci in 0..g.cin {
        let plane = &mut out[ci * g.h * g.w..][..g.h * g.w];
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = (ci * g.k + kh) * g.k + kw;
                let src = &cols[row * ohw..(row + 1) * ohw];
                let (lo, hi) = valid_range(kw, g, g.w, g.ow);
                for oh in 0..g.oh {
                    let Some(ih) = source(oh, kh, g, g.h) else { continue };
                    if lo == hi {
                        continue;
                    }
                    let dst = &mut plane[ih * g.w..(ih + 1) * g.w];
                    let line = &src[oh * g.ow..(oh + 1) * g.ow];
                    if g.stride == 1 {
                        let start = lo + kw - g.pad;
                        for (d, &v) in dst[start..start + hi - lo].iter_mut().zip(&line[lo..hi]) {
                            *d += v;
                        }
                    } else {
                        for (ow, &v) in line.iter().enumerate().take(hi).skip(lo) {
                            dst[ow * g.stride + kw - g.pad] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Standard cross-correlation of `x` (N,Cin,H,W) with `weight` (Cout,Cin,k,k).
///
/// Output extent per spatial axis is `(H + 2*pad - k) / stride + 1`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = geometry(x, weight, stride, pad)?;
    if let Some(b) = bias {
        check_axis("conv2d", "bias", g.cout, b.numel())?;
    }
    let (kdim, ohw) = (g.patch_rows(), g.out_plane());
    let mut cols = vec![T::zero(); kdim * ohw];
    let mut out = vec![T::zero(); g.n * g.cout * ohw];
    for (img, dst) in x.data().chunks_exact(g.in_image()).zip(out.chunks_exact_mut(g.cout * ohw)) {
        im2col(img, &g, &mut cols);
        T::gemm(
            g.cout,
            kdim,
            ohw,
            T::one(),
            weight.data(),
            kdim as isize,
            1,
            &cols,
            ohw as isize,
            1,
            T::zero(),
            dst,
            ohw as isize,
            1,
        );
        if let Some(b) = bias {
            for (plane, &bv) in dst.chunks_exact_mut(ohw).zip(b.data()) {
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(Tensor::from_parts(Shape(vec![g.n, g.cout, g.oh, g.ow]), out))
}

pub struct Conv2dGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Conv2dGrads<T>> {
    let g = geometry(x, weight, stride, pad)?;
    let [gn, gc, gh, gw] = grad.nchw("conv2d_backward")?;
    check_axis("conv2d_backward", "batch", g.n, gn)?;
    check_axis("conv2d_backward", "channels", g.cout, gc)?;
    check_axis("conv2d_backward", "height", g.oh, gh)?;
    check_axis("conv2d_backward", "width", g.ow, gw)?;

    let (kdim, ohw) = (g.patch_rows(), g.out_plane());
    let mut bias = vec![T::zero(); g.cout];
    let mut gweight = vec![T::zero(); g.cout * kdim];
    let mut ginput = vec![T::zero(); x.numel()];
    let mut cols = vec![T::zero(); kdim * ohw];
    let mut gcols = vec![T::zero(); kdim * ohw];
    for ((img, gout), gin) in x
        .data()
        .chunks_exact(g.in_image())
        .zip(grad.data().chunks_exact(g.cout * ohw))
        .zip(ginput.chunks_exact_mut(g.in_image()))
    {
        for (b, plane) in bias.iter_mut().zip(gout.chunks_exact(ohw)) {
            *b += plane.iter().copied().sum::<T>();
        }
        im2col(img, &g, &mut cols);
        // dW += G (Cout,OHW) * cols^T (OHW,Cin*k*k)
        T::gemm(
            g.cout,
            ohw,
            kdim,
            T::one(),
            gout,
            ohw as isize,
            1,
            &cols,
            1,
            ohw as isize,
            T::one(),
            &mut gweight,
            kdim as isize,
            1,
        );
        // dcols = W^T (Cin*k*k,Cout) * G (Cout,OHW)
        T::gemm(
            kdim,
            g.cout,
            ohw,
            T::one(),
            weight.data(),
            1,
            kdim as isize,
            gout,
            ohw as isize,
            1,
            T::zero(),
            &mut gcols,
            ohw as isize,
            1,
        );
        col2im(&gcols, &g, gin);
    }

    Ok(Conv2dGrads {
        input: Tensor::from_parts(x.shape().clone(), ginput),
        weight: Tensor::from_parts(weight.shape().clone(), gweight),
        bias: Tensor::from_parts(Shape(vec![g.cout]), bias),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_is_passthrough() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 4, 4], |i| (i as f64 * 0.37).sin());
        let w = Tensor::from_fn(&[3, 3, 1, 1], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn zero_kernel_yields_bias() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 3, 3], |i| i as f64);
        let w = Tensor::zeros(&[1, 2, 3, 3]);
        let b = Tensor::scalar(0.5);
        let y = conv2d(&x, &w, Some(&b), 1, 1).unwrap();
        assert_eq!(y.dims(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn output_extent_formula() {
        let x = Tensor::<f32>::zeros(&[1, 1, 7, 7]);
        let w = Tensor::<f32>::zeros(&[2, 1, 3, 3]);
        assert_eq!(conv2d(&x, &w, None, 2, 1).unwrap().dims(), &[1, 2, 4, 4]);
        assert_eq!(conv2d(&x, &w, None, 1, 0).unwrap().dims(), &[1, 2, 5, 5]);
    }

    #[test]
    fn invalid_geometry_is_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        assert!(conv2d(&x, &Tensor::zeros(&[1, 1, 2, 2]), None, 1, 0).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 1, 3, 3]), None, 1, 0).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 1, 3, 3]), None, 0, 1).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 1, 1]), None, 1, 0).is_err());
    }
}
