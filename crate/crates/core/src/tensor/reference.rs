//! Naive scalar-loop versions of the forward kernels.
//!
//! Every function here is written directly from the index formula, in f64,
//! with no shared helpers from the optimized kernels. They exist to be
//! compared against: the tests and the acceptance harness check the fast
//! paths element by element against these.

use super::Tensor;
use crate::scalar::Scalar;

fn dims4<T: Scalar>(t: &Tensor<T>) -> [usize; 4] {
    let d = t.dims();
    assert_eq!(d.len(), 4, "reference kernels take NCHW tensors");
    [d[0], d[1], d[2], d[3]]
}

fn at<T: Scalar>(t: &Tensor<T>, n: usize, c: usize, i: usize, j: usize) -> f64 {
    t.at4(n, c, i, j).to_f64_lossy()
}

fn build(dims: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(dims, data).expect("reference shape")
}

/// Direct six-loop cross-correlation with zero padding.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, stride: usize, pad: usize) -> Tensor<f64> {
    let [n, cin, h, wd] = dims4(x);
    let [cout, _, k, _] = dims4(w);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Vec::with_capacity(n * cout * oh * ow);
    for img in 0..n {
        for co in 0..cout {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[co].to_f64_lossy());
                    for ci in 0..cin {
                        for u in 0..k {
                            for v in 0..k {
                                let ii = (oi * stride + u) as isize - pad as isize;
                                let jj = (oj * stride + v) as isize - pad as isize;
                                if ii < 0 || jj < 0 || ii >= h as isize || jj >= wd as isize {
                                    continue;
                                }
                                acc += at(w, co, ci, u, v) * at(x, img, ci, ii as usize, jj as usize);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    build(&[n, cout, oh, ow], out)
}

/// `exp(m) / sum(exp(m))` over the H*W positions of each image.
pub fn spatial_softmax<T: Scalar>(m: &Tensor<T>) -> Tensor<f64> {
    let [n, c, h, w] = dims4(m);
    assert_eq!(c, 1);
    let mut out = Vec::with_capacity(n * h * w);
    for img in 0..n {
        let mut peak = f64::NEG_INFINITY;
        for i in 0..h {
            for j in 0..w {
                peak = peak.max(at(m, img, 0, i, j));
            }
        }
        let mut total = 0.0;
        for i in 0..h {
            for j in 0..w {
                total += (at(m, img, 0, i, j) - peak).exp();
            }
        }
        for i in 0..h {
            for j in 0..w {
                out.push((at(m, img, 0, i, j) - peak).exp() / total);
            }
        }
    }
    build(&[n, 1, h, w], out)
}

/// `out[n,c,i,j] = x[n,c,i,j] * s[n,0,i,j]`.
pub fn broadcast_gate<T: Scalar>(x: &Tensor<T>, s: &Tensor<T>) -> Tensor<f64> {
    let [n, c, h, w] = dims4(x);
    let mut out = Vec::with_capacity(x.numel());
    for img in 0..n {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out.push(at(x, img, ch, i, j) * at(s, img, 0, i, j));
                }
            }
        }
    }
    build(&[n, c, h, w], out)
}

/// Channel `c` comes from `x` when `c < C1`, otherwise from `y`.
pub fn concat_channels<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Tensor<f64> {
    let [n, c1, h, w] = dims4(x);
    let [_, c2, _, _] = dims4(y);
    let mut out = Vec::with_capacity(n * (c1 + c2) * h * w);
    for img in 0..n {
        for ch in 0..c1 + c2 {
            for i in 0..h {
                for j in 0..w {
                    out.push(if ch < c1 {
                        at(x, img, ch, i, j)
                    } else {
                        at(y, img, ch - c1, i, j)
                    });
                }
            }
        }
    }
    build(&[n, c1 + c2, h, w], out)
}

/// Selector connection computed pixel by pixel. `w_x = None` gives the
/// direct form `[S.x, y]`, `Some(a)` the residual form `[a*S.x + x, y]`.
pub fn connect<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, w_g: &[f64], b_g: f64, w_x: Option<f64>) -> Tensor<f64> {
    let [n, c1, h, w] = dims4(x);
    let [_, c2, _, _] = dims4(y);
    let mut out = Vec::with_capacity(n * (c1 + c2) * h * w);
    for img in 0..n {
        let mut logits = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let mut m = b_g;
                for (ch, &g) in w_g.iter().enumerate().take(c2) {
                    m += g * at(y, img, ch, i, j);
                }
                logits[i * w + j] = m;
            }
        }
        let peak = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = logits.iter().map(|m| (m - peak).exp()).sum();
        let s: Vec<f64> = logits.iter().map(|m| (m - peak).exp() / total).collect();
        for ch in 0..c1 {
            for i in 0..h {
                for j in 0..w {
                    let xv = at(x, img, ch, i, j);
                    let gated = s[i * w + j] * xv;
                    out.push(match w_x {
                        None => gated,
                        Some(a) => a * gated + xv,
                    });
                }
            }
        }
        for ch in 0..c2 {
            for i in 0..h {
                for j in 0..w {
                    out.push(at(y, img, ch, i, j));
                }
            }
        }
    }
    build(&[n, c1 + c2, h, w], out)
}

pub fn avgpool2x2<T: Scalar>(x: &Tensor<T>) -> Tensor<f64> {
    let [n, c, h, w] = dims4(x);
    let mut out = Vec::new();
    for img in 0..n {
        for ch in 0..c {
            for i in 0..h / 2 {
                for j in 0..w / 2 {
                    let mut acc = 0.0;
                    for (u, v) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        acc += at(x, img, ch, 2 * i + u, 2 * j + v);
                    }
                    out.push(acc / 4.0);
                }
            }
        }
    }
    build(&[n, c, h / 2, w / 2], out)
}

pub fn global_avgpool<T: Scalar>(x: &Tensor<T>) -> Tensor<f64> {
    let [n, c, h, w] = dims4(x);
    let mut out = Vec::new();
    for img in 0..n {
        for ch in 0..c {
            let mut acc = 0.0;
            for i in 0..h {
                for j in 0..w {
                    acc += at(x, img, ch, i, j);
                }
            }
            out.push(acc / (h * w) as f64);
        }
    }
    build(&[n, c], out)
}

pub fn upsample2x<T: Scalar>(x: &Tensor<T>) -> Tensor<f64> {
    let [n, c, h, w] = dims4(x);
    let mut out = Vec::new();
    for img in 0..n {
        for ch in 0..c {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    out.push(at(x, img, ch, i / 2, j / 2));
                }
            }
        }
    }
    build(&[n, c, 2 * h, 2 * w], out)
}

/// `out[n,o] = b[o] + sum_i w[o,i] * x[n,i]` for `x` (N,I) and `w` (O,I).
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Tensor<f64> {
    let (n, inputs) = (x.dims()[0], x.dims()[1]);
    let outputs = w.dims()[0];
    let mut out = Vec::new();
    for r in 0..n {
        for o in 0..outputs {
            let mut acc = b.map_or(0.0, |b| b.data()[o].to_f64_lossy());
            for i in 0..inputs {
                acc += w.data()[o * inputs + i].to_f64_lossy() * x.data()[r * inputs + i].to_f64_lossy();
            }
            out.push(acc);
        }
    }
    build(&[n, outputs], out)
}

/// Largest `|a - oracle|` divided by `max(1, max |oracle|)`.
pub fn scaled_error<T: Scalar>(actual: &Tensor<T>, oracle: &Tensor<f64>) -> f64 {
    assert_eq!(actual.dims(), oracle.dims(), "shape mismatch against oracle");
    let scale = oracle.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let diff = actual
        .data()
        .iter()
        .zip(oracle.data())
        .fold(0.0f64, |m, (a, o)| m.max((a.to_f64_lossy() - o).abs()));
    diff / scale
}
