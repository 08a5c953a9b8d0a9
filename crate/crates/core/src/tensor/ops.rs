use super::{check_axis, check_same_shape, Shape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Concatenates two NCHW tensors along the channel axis.
pub fn concat_channels<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    const OP: &str = "concat_channels";
    let [n, c1, h, w] = x.nchw(OP)?;
    let [n2, c2, h2, w2] = y.nchw(OP)?;
    check_axis(OP, "batch", n, n2)?;
    check_axis(OP, "height", h, h2)?;
    check_axis(OP, "width", w, w2)?;
    let plane = h * w;
    let mut data = Vec::with_capacity(n * (c1 + c2) * plane);
    for b in 0..n {
        data.extend_from_slice(&x.data()[b * c1 * plane..(b + 1) * c1 * plane]);
        data.extend_from_slice(&y.data()[b * c2 * plane..(b + 1) * c2 * plane]);
    }
    Ok(Tensor::from_parts(Shape(vec![n, c1 + c2, h, w]), data))
}

/// Channels `start..start + len` of an NCHW tensor.
pub fn slice_channels<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    const OP: &str = "slice_channels";
    let [n, c, h, w] = x.nchw(OP)?;
    if len == 0 || start + len > c {
        return Err(Error::InvalidShape {
            op: OP,
            msg: format!("channel range {start}..{} outside 0..{c}", start + len),
        });
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * len * plane);
    for b in 0..n {
        let base = (b * c + start) * plane;
        data.extend_from_slice(&x.data()[base..base + len * plane]);
    }
    Ok(Tensor::from_parts(Shape(vec![n, len, h, w]), data))
}

/// Softmax over all spatial positions of a single-channel map, independently
/// for each batch item. Uses max subtraction.
pub fn spatial_softmax<T: Scalar>(m: &Tensor<T>) -> Result<Tensor<T>> {
    const OP: &str = "spatial_softmax";
    let [_, c, h, w] = m.nchw(OP)?;
    check_axis(OP, "channels", 1, c)?;
    let plane = h * w;
    let mut out = Vec::with_capacity(m.numel());
    for item in m.data().chunks_exact(plane) {
        let max = item.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        // An f64 normalizer keeps f32 maps summing to 1 within a few ulp.
        let mut total = 0.0f64;
        for &v in item {
            let e = (v - max).exp();
            total += e.to_f64_lossy();
            out.push(e);
        }
        let total = T::lit(total);
        for e in &mut out[start..] {
            *e /= total;
        }
    }
    Ok(Tensor::from_parts(m.shape().clone(), out))
}

/// Adjoint of [`spatial_softmax`] given its output `s` and upstream gradient.
pub fn spatial_softmax_backward<T: Scalar>(s: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape("spatial_softmax_backward", s, grad)?;
    let [_, _, h, w] = s.nchw("spatial_softmax_backward")?;
    let plane = h * w;
    let mut out = Vec::with_capacity(s.numel());
    for (sp, gp) in s.data().chunks_exact(plane).zip(grad.data().chunks_exact(plane)) {
        let dot: T = sp.iter().zip(gp).map(|(&a, &b)| a * b).sum();
        out.extend(sp.iter().zip(gp).map(|(&a, &b)| a * (b - dot)));
    }
    Ok(Tensor::from_parts(s.shape().clone(), out))
}

/// Multiplies every channel of `x` by the single-channel spatial map `s`.
pub fn broadcast_gate<T: Scalar>(x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    const OP: &str = "broadcast_gate";
    let [n, c, h, w] = x.nchw(OP)?;
    let [ns, cs, hs, ws] = s.nchw(OP)?;
    check_axis(OP, "batch", n, ns)?;
    check_axis(OP, "channels", 1, cs)?;
    check_axis(OP, "height", h, hs)?;
    check_axis(OP, "width", w, ws)?;
    let plane = h * w;
    let mut out = Vec::with_capacity(x.numel());
    for b in 0..n {
        let gate = &s.data()[b * plane..(b + 1) * plane];
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            let xs = &x.data()[base..base + plane];
            out.extend(xs.iter().zip(gate).map(|(&v, &g)| g * v));
        }
    }
    Ok(Tensor::from_parts(x.shape().clone(), out))
}

fn zip_same<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    check_same_shape(op, a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::from_parts(a.shape().clone(), data))
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_same("add", a, b, |x, y| x + y)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_same("mul", a, b, |x, y| x * y)
}

pub fn scale<T: Scalar>(a: &Tensor<T>, factor: T) -> Tensor<T> {
    a.map(|v| v * factor)
}

pub fn relu<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    a.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// 2x2 average pooling with stride 2; a trailing odd row/column is dropped.
pub fn avgpool2x2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    const OP: &str = "avgpool2x2";
    let [n, c, h, w] = x.nchw(OP)?;
    if h < 2 || w < 2 {
        return Err(Error::InvalidShape {
            op: OP,
            msg: format!("spatial extent {h}x{w} is smaller than the 2x2 window"),
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks_exact(h * w) {
        for i in 0..oh {
            let r0 = &plane[2 * i * w..];
            let r1 = &plane[(2 * i + 1) * w..];
            for j in 0..ow {
                out.push((r0[2 * j] + r0[2 * j + 1] + r1[2 * j] + r1[2 * j + 1]) * quarter);
            }
        }
    }
    Ok(Tensor::from_parts(Shape(vec![n, c, oh, ow]), out))
}

/// Adjoint of [`avgpool2x2`]; `input_dims` is the forward input's NCHW shape.
pub fn avgpool2x2_backward<T: Scalar>(grad: &Tensor<T>, input_dims: &[usize]) -> Result<Tensor<T>> {
    let [n, c, h, w] = <[usize; 4]>::try_from(input_dims).map_err(|_| Error::InvalidShape {
        op: "avgpool2x2_backward",
        msg: "input shape must be NCHW".into(),
    })?;
    let (oh, ow) = (h / 2, w / 2);
    check_axis("avgpool2x2_backward", "elements", n * c * oh * ow, grad.numel())?;
    let quarter = T::lit(0.25);
    let mut out = vec![T::zero(); n * c * h * w];
    for (p, gp) in grad.data().chunks_exact(oh * ow).enumerate() {
        let plane = &mut out[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let g = gp[i * ow + j] * quarter;
                plane[2 * i * w + 2 * j] = g;
                plane[2 * i * w + 2 * j + 1] = g;
                plane[(2 * i + 1) * w + 2 * j] = g;
                plane[(2 * i + 1) * w + 2 * j + 1] = g;
            }
        }
    }
    Ok(Tensor::from_parts(Shape(input_dims.to_vec()), out))
}

/// Mean over H and W: (N,C,H,W) -> (N,C).
pub fn global_avgpool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.nchw("global_avgpool")?;
    let inv = T::one() / T::lit((h * w) as f64);
    let data = x
        .data()
        .chunks_exact(h * w)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Ok(Tensor::from_parts(Shape(vec![n, c]), data))
}

pub fn global_avgpool_backward<T: Scalar>(
    grad: &Tensor<T>,
    input_dims: &[usize],
) -> Result<Tensor<T>> {
    let [n, c, h, w] = <[usize; 4]>::try_from(input_dims).map_err(|_| Error::InvalidShape {
        op: "global_avgpool_backward",
        msg: "input shape must be NCHW".into(),
    })?;
    check_axis("global_avgpool_backward", "elements", n * c, grad.numel())?;
    let inv = T::one() / T::lit((h * w) as f64);
    let mut out = Vec::with_capacity(n * c * h * w);
    for &g in grad.data() {
        out.extend(std::iter::repeat_n(g * inv, h * w));
    }
    Ok(Tensor::from_parts(Shape(input_dims.to_vec()), out))
}

/// Nearest-neighbour 2x upsampling: each pixel becomes a 2x2 block.
pub fn upsample_nearest_2x<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.nchw("upsample_nearest_2x")?;
    let ow = 2 * w;
    let mut out = Vec::with_capacity(x.numel() * 4);
    for plane in x.data().chunks_exact(h * w) {
        for row in plane.chunks_exact(w) {
            let start = out.len();
            for &v in row {
                out.push(v);
                out.push(v);
            }
            out.extend_from_within(start..start + ow);
        }
    }
    Ok(Tensor::from_parts(Shape(vec![n, c, 2 * h, ow]), out))
}

pub fn upsample_nearest_2x_backward<T: Scalar>(grad: &Tensor<T>) -> Result<Tensor<T>> {
    const OP: &str = "upsample_nearest_2x_backward";
    let [n, c, h2, w2] = grad.nchw(OP)?;
    if h2 % 2 != 0 || w2 % 2 != 0 {
        return Err(Error::InvalidShape {
            op: OP,
            msg: "gradient spatial extents must be even".into(),
        });
    }
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = vec![T::zero(); n * c * h * w];
    for (p, gp) in grad.data().chunks_exact(h2 * w2).enumerate() {
        for i in 0..h2 {
            for j in 0..w2 {
                out[p * h * w + (i / 2) * w + j / 2] += gp[i * w2 + j];
            }
        }
    }
    Ok(Tensor::from_parts(Shape(vec![n, c, h, w]), out))
}

/// Linear layer: `x` (N,In) times `w` (Out,In) transposed, plus optional bias (Out).
pub fn matvec<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    const OP: &str = "matvec";
    let (n, inp) = as_matrix(OP, x)?;
    let (out, inp_w) = as_matrix(OP, w)?;
    check_axis(OP, "input features", inp, inp_w)?;
    let mut data = match b {
        Some(b) => {
            check_axis(OP, "bias", out, b.numel())?;
            b.data().repeat(n)
        }
        None => vec![T::zero(); n * out],
    };
    let beta = if b.is_some() { T::one() } else { T::zero() };
    T::gemm(
        n,
        inp,
        out,
        T::one(),
        x.data(),
        inp as isize,
        1,
        w.data(),
        1,
        inp as isize,
        beta,
        &mut data,
        out as isize,
        1,
    );
    Ok(Tensor::from_parts(Shape(vec![n, out]), data))
}

pub(crate) fn as_matrix<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match *t.dims() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::InvalidShape {
            op,
            msg: format!("expected a matrix, got shape {}", t.shape()),
        }),
    }
}

/// Index of the largest value along axis 1, for every other position.
///
/// Accepts (N,C) or (N,C,H,W); the result has N or N*H*W entries.
/// Ties go to the lowest channel.
pub fn argmax_channel<T: Scalar>(x: &Tensor<T>) -> Result<Vec<usize>> {
    let (n, c, plane) = match *x.dims() {
        [n, c] => (n, c, 1),
        [n, c, h, w] => (n, c, h * w),
        _ => {
            return Err(Error::InvalidShape {
                op: "argmax_channel",
                msg: format!("expected rank 2 or 4, got shape {}", x.shape()),
            })
        }
    };
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        for p in 0..plane {
            let mut best = 0;
            let mut best_v = x.data()[b * c * plane + p];
            for ch in 1..c {
                let v = x.data()[(b * c + ch) * plane + p];
                if v > best_v {
                    best = ch;
                    best_v = v;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}
