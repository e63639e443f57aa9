//! Differentiable layer primitives built on [`Var`].
//!
//! Image tensors use the `[batch, channels, height, width]` layout.

use std::rc::Rc;

use crate::autodiff::{cached_index, IndexKey, Var, NONE};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

/// `x [b, in] * w [out, in]^T + bias [out]`.
pub fn linear(x: &Var, w: &Var, bias: &Var) -> Var {
    let b = x.shape()[0];
    x.matmul(&w.transpose()).add(&bias.broadcast_rows(b))
}

/// Geometry of a 2-D convolution over square feature maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_size(&self, in_size: usize) -> usize {
        (in_size + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn transposed_out_size(&self, in_size: usize) -> usize {
        (in_size - 1) * self.stride + self.kernel - 2 * self.pad
    }

    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }
}

/// im2col gather indices: rows `(n, oy, ox)`, columns `(c, ky, kx)`.
fn im2col_index(g: ConvGeom, n: usize, h: usize) -> Rc<Vec<usize>> {
    let key = IndexKey::Custom(
        "im2col",
        vec![g.in_ch, g.kernel, g.stride, g.pad, n, h],
    );
    cached_index(key, || {
        let o = g.out_size(h);
        let k = g.kernel;
        let mut idx = Vec::with_capacity(n * o * o * g.patch_len());
        for b in 0..n {
            for oy in 0..o {
                for ox in 0..o {
                    for c in 0..g.in_ch {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= h as isize {
                                    idx.push(NONE);
                                } else {
                                    idx.push(((b * g.in_ch + c) * h + iy as usize) * h + ix as usize);
                                }
                            }
                        }
                    }
                }
            }
        }
        idx
    })
}

/// Permutation `[n*s*s, c] (row-major) -> [n, c, s, s]`.
fn rows_to_nchw_index(n: usize, c: usize, s: usize) -> Rc<Vec<usize>> {
    cached_index(IndexKey::Custom("rows_to_nchw", vec![n, c, s]), || {
        let mut idx = Vec::with_capacity(n * c * s * s);
        for b in 0..n {
            for ch in 0..c {
                for p in 0..s * s {
                    idx.push((b * s * s + p) * c + ch);
                }
            }
        }
        idx
    })
}

/// Permutation `[n, c, s, s] -> [n*s*s, c]`.
fn nchw_to_rows_index(n: usize, c: usize, s: usize) -> Rc<Vec<usize>> {
    cached_index(IndexKey::Custom("nchw_to_rows", vec![n, c, s]), || {
        let mut idx = Vec::with_capacity(n * c * s * s);
        for b in 0..n {
            for p in 0..s * s {
                for ch in 0..c {
                    idx.push((b * c + ch) * s * s + p);
                }
            }
        }
        idx
    })
}

pub fn nchw_to_rows(x: &Var) -> Var {
    let [n, c, h, w] = shape4(x.shape());
    assert_eq!(h, w);
    x.gather(nchw_to_rows_index(n, c, h), &[n * h * w, c])
}

pub fn rows_to_nchw(x: &Var, n: usize, s: usize) -> Var {
    let c = x.shape()[1];
    x.gather(rows_to_nchw_index(n, c, s), &[n, c, s, s])
}

fn shape4(shape: &[usize]) -> [usize; 4] {
    assert_eq!(shape.len(), 4, "expected NCHW tensor, got {shape:?}");
    [shape[0], shape[1], shape[2], shape[3]]
}

/// 2-D convolution. `w` is `[out_ch, in_ch * k * k]`, `bias` is `[out_ch]`.
pub fn conv2d(x: &Var, w: &Var, bias: &Var, g: ConvGeom) -> Var {
    let [n, c, h, _] = shape4(x.shape());
    assert_eq!(c, g.in_ch, "conv input channels");
    let o = g.out_size(h);
    let cols = x.gather(im2col_index(g, n, h), &[n * o * o, g.patch_len()]);
    let rows = linear(&cols, w, bias);
    rows_to_nchw(&rows, n, o)
}

/// Transposed 2-D convolution (fractionally strided), the adjoint of
/// [`conv2d`] with the same geometry read in reverse. `w` is
/// `[in_ch, out_ch * k * k]`, `bias` is `[out_ch]`.
pub fn conv_transpose2d(x: &Var, w: &Var, bias: &Var, g: ConvGeom) -> Var {
    let [n, c, h, _] = shape4(x.shape());
    assert_eq!(c, g.in_ch, "transposed conv input channels");
    let o = g.transposed_out_size(h);
    let rows = nchw_to_rows(x);
    let cols = rows.matmul(w);
    // col2im: the scatter adjoint of an im2col over the *output* map
    let adj = ConvGeom {
        in_ch: g.out_ch,
        out_ch: g.in_ch,
        ..g
    };
    debug_assert_eq!(adj.out_size(o), h);
    let idx = im2col_index(adj, n, o);
    let out = cols.scatter_add(idx, &[n, g.out_ch, o, o]);
    let b = bias
        .broadcast_rows(n * o * o)
        .gather(rows_to_nchw_index(n, g.out_ch, o), &[n, g.out_ch, o, o]);
    out.add(&b)
}

/// Batch statistics of a `[rows, features]` matrix, per feature.
pub struct BatchMoments {
    pub mean: Tensor,
    pub var: Tensor,
}

/// Batch normalization over rows of `[r, f]` without affine terms.
///
/// In training mode normalizes with the (biased) batch statistics and
/// returns them; in inference mode uses the supplied running statistics.
pub fn batch_norm_rows(x: &Var, running: Option<(&Tensor, &Tensor)>) -> (Var, Option<BatchMoments>) {
    let [r, f] = [x.shape()[0], x.shape()[1]];
    match running {
        Some((mean, var)) => {
            let m = Var::constant(mean.clone()).broadcast_rows(r);
            let inv = Var::constant(var.map(|v| 1.0 / (v + NORM_EPS).sqrt())).broadcast_rows(r);
            (x.sub(&m).mul(&inv), None)
        }
        None => {
            let mean = x.sum_rows().scale(1.0 / r as f64);
            let centered = x.sub(&mean.broadcast_rows(r));
            let var = centered.square().sum_rows().scale(1.0 / r as f64);
            let std = var.add_scalar(NORM_EPS).sqrt();
            let y = centered.div(&std.broadcast_rows(r));
            let moments = BatchMoments {
                mean: mean.value().clone(),
                var: var.value().clone(),
            };
            debug_assert_eq!(moments.mean.len(), f);
            (y, Some(moments))
        }
    }
}

/// Batch normalization of an NCHW map, per channel.
pub fn batch_norm_nchw(x: &Var, running: Option<(&Tensor, &Tensor)>) -> (Var, Option<BatchMoments>) {
    let [n, _, s, _] = shape4(x.shape());
    let rows = nchw_to_rows(x);
    let (y, m) = batch_norm_rows(&rows, running);
    (rows_to_nchw(&y, n, s), m)
}

/// Per-sample layer normalization over all non-batch dimensions.
pub fn layer_norm(x: &Var) -> Var {
    let shape = x.shape().to_vec();
    let b = shape[0];
    let w: usize = shape[1..].iter().product();
    let flat = x.reshape(&[b, w]);
    let mean = flat.sum_cols().scale(1.0 / w as f64);
    let centered = flat.sub(&mean.broadcast_cols(w));
    let var = centered.square().sum_cols().scale(1.0 / w as f64);
    let std = var.add_scalar(NORM_EPS).sqrt();
    centered.div(&std.broadcast_cols(w)).reshape(&shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad;

    fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, g: ConvGeom) -> Tensor {
        let [n, c, h, _] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let o = g.out_size(h);
        let k = g.kernel;
        let mut out = vec![0.0; n * g.out_ch * o * o];
        for bi in 0..n {
            for oc in 0..g.out_ch {
                for oy in 0..o {
                    for ox in 0..o {
                        let mut acc = b.data()[oc];
                        for ic in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < h {
                                        let xv = x.data()[((bi * c + ic) * h + iy as usize) * h + ix as usize];
                                        let wv = w.data()[oc * c * k * k + (ic * k + ky) * k + kx];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        out[((bi * g.out_ch + oc) * o + oy) * o + ox] = acc;
                    }
                }
            }
        }
        Tensor::new(vec![n, g.out_ch, o, o], out)
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) * scale).collect())
    }

    #[test]
    fn conv_matches_direct_loop() {
        let g = ConvGeom { in_ch: 2, out_ch: 3, kernel: 4, stride: 2, pad: 1 };
        let x = ramp(&[2, 2, 6, 6], 0.1);
        let w = ramp(&[3, 2 * 16], 0.05);
        let b = Tensor::new(vec![3], vec![0.1, -0.2, 0.3]);
        let y = conv2d(&Var::constant(x.clone()), &Var::constant(w.clone()), &Var::constant(b.clone()), g);
        let want = naive_conv(&x, &w, &b, g);
        for (a, e) in y.value().data().iter().zip(want.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> with zero bias and shared weights.
        let g = ConvGeom { in_ch: 2, out_ch: 3, kernel: 4, stride: 2, pad: 1 };
        let x = ramp(&[1, 2, 8, 8], 0.1);
        let w = ramp(&[3, 2 * 16], 0.07);
        let y = ramp(&[1, 3, 4, 4], 0.3);
        let cx = conv2d(&Var::constant(x.clone()), &Var::constant(w.clone()), &Var::constant(Tensor::zeros(&[3])), g);
        let lhs: f64 = cx.value().data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let gt = ConvGeom { in_ch: 3, out_ch: 2, ..g };
        // convT weight layout [in_ch=3, out_ch*k*k] is exactly the conv weight.
        let ty = conv_transpose2d(&Var::constant(y), &Var::constant(w), &Var::constant(Tensor::zeros(&[2])), gt);
        assert_eq!(ty.shape(), &[1, 2, 8, 8]);
        let rhs: f64 = ty.value().data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn norm_layers_gradcheck() {
        let x0 = ramp(&[3, 2, 2, 2], 0.2).map(|v| v + 0.01);
        let probe = ramp(&[3, 2, 2, 2], 1.0);
        let f = |x: &Var| {
            let (bn, _) = batch_norm_nchw(x, None);
            layer_norm(&bn.tanh()).mul_const(&probe).sum()
        };
        let x = Var::param(x0.clone());
        let g = grad(&f(&x), std::slice::from_ref(&x), false)[0].value().clone();
        let h = 1e-6;
        for i in 0..x0.len() {
            let mut p = x0.clone().into_vec();
            p[i] += h;
            let mut m = x0.clone().into_vec();
            m[i] -= h;
            let fp = f(&Var::constant(Tensor::new(x0.shape().to_vec(), p))).item();
            let fm = f(&Var::constant(Tensor::new(x0.shape().to_vec(), m))).item();
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-5 * (1.0 + fd.abs()), "{i}: {fd} vs {}", g.data()[i]);
        }
    }
}
