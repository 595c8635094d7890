//! Direct 2-D cross-correlation kernels over N×C×H×W buffers.
//!
//! Every output element accumulates `bias + Σ_c Σ_kh Σ_kw w·x` in exactly
//! that order, so results agree bit-for-bit with a naive six-loop reference.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        bias: Option<&[usize]>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        const OP: &str = "conv2d";
        let [n, c_in, h, w] = input[..] else {
            return shape_err(OP, format!("input must be N×C×H×W, got {input:?}"));
        };
        let [c_out, wc, kh, kw] = weight[..] else {
            return shape_err(OP, format!("weight must be O×C×k×k, got {weight:?}"));
        };
        if wc != c_in {
            return shape_err(
                OP,
                format!("weight channel dimension {wc} != input channel dimension {c_in}"),
            );
        }
        if kh != kw {
            return shape_err(OP, format!("kernel must be square, got {kh}×{kw}"));
        }
        if let Some(b) = bias {
            if b != [c_out] {
                return shape_err(OP, format!("bias shape {b:?} != [{c_out}]"));
            }
        }
        if stride == 0 {
            return shape_err(OP, "stride must be positive");
        }
        let out_dim = |extent: usize, name: &str| -> Result<usize> {
            let padded = extent + 2 * pad;
            if padded < kh {
                return shape_err(
                    OP,
                    format!("{name}: kernel {kh} exceeds padded extent {extent} + 2·{pad}"),
                );
            }
            Ok((padded - kh) / stride + 1)
        };
        let h_out = out_dim(h, "height")?;
        let w_out = out_dim(w, "width")?;
        Ok(ConvGeometry {
            n,
            c_in,
            h,
            w,
            c_out,
            k: kh,
            stride,
            pad,
            h_out,
            w_out,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.c_out, self.h_out, self.w_out]
    }

    /// Output index range along one axis whose input tap `o·s + kk − pad`
    /// lands inside `[0, extent)`.
    #[inline]
    fn valid_range(&self, kk: usize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.stride;
        // smallest o with o·s + kk ≥ pad
        let lo = if kk >= self.pad {
            0
        } else {
            (self.pad - kk).div_ceil(s)
        };
        // largest o with o·s + kk − pad ≤ extent − 1
        let hi = if kk < extent + self.pad {
            ((extent - 1 + self.pad - kk) / s + 1).min(out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// Multiply-accumulate count of the forward pass.
    pub fn flops(&self) -> u64 {
        (self.n * self.c_out * self.h_out * self.w_out * self.c_in * self.k * self.k) as u64
    }
}

pub fn conv2d_forward(
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeometry,
) -> Vec<f64> {
    let plane_in = g.h * g.w;
    let plane_out = g.h_out * g.w_out;
    let mut out = vec![0.0; g.n * g.c_out * plane_out];
    for n in 0..g.n {
        for o in 0..g.c_out {
            let dst = &mut out[(n * g.c_out + o) * plane_out..][..plane_out];
            if let Some(b) = bias {
                dst.fill(b[o]);
            }
            for c in 0..g.c_in {
                let src = &input[(n * g.c_in + c) * plane_in..][..plane_in];
                let wk = &weight[(o * g.c_in + c) * g.k * g.k..][..g.k * g.k];
                for kh in 0..g.k {
                    let (oh0, oh1) = g.valid_range(kh, g.h, g.h_out);
                    for kw in 0..g.k {
                        let wv = wk[kh * g.k + kw];
                        let (ow0, ow1) = g.valid_range(kw, g.w, g.w_out);
                        for oh in oh0..oh1 {
                            let ih = oh * g.stride + kh - g.pad;
                            let row_out = &mut dst[oh * g.w_out..][..g.w_out];
                            let row_in = &src[ih * g.w..][..g.w];
                            if g.stride == 1 {
                                let off = kw as isize - g.pad as isize;
                                let ins = &row_in[(ow0 as isize + off) as usize..(ow1 as isize + off) as usize];
                                for (d, &x) in row_out[ow0..ow1].iter_mut().zip(ins) {
                                    *d += wv * x;
                                }
                            } else {
                                for ow in ow0..ow1 {
                                    row_out[ow] += wv * row_in[ow * g.stride + kw - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient w.r.t. the input.
pub fn conv2d_backward_input(grad_out: &[f64], weight: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let plane_in = g.h * g.w;
    let plane_out = g.h_out * g.w_out;
    let mut gin = vec![0.0; g.n * g.c_in * plane_in];
    for n in 0..g.n {
        for o in 0..g.c_out {
            let go = &grad_out[(n * g.c_out + o) * plane_out..][..plane_out];
            for c in 0..g.c_in {
                let dst = &mut gin[(n * g.c_in + c) * plane_in..][..plane_in];
                let wk = &weight[(o * g.c_in + c) * g.k * g.k..][..g.k * g.k];
                for kh in 0..g.k {
                    let (oh0, oh1) = g.valid_range(kh, g.h, g.h_out);
                    for kw in 0..g.k {
                        let wv = wk[kh * g.k + kw];
                        let (ow0, ow1) = g.valid_range(kw, g.w, g.w_out);
                        for oh in oh0..oh1 {
                            let ih = oh * g.stride + kh - g.pad;
                            let row_go = &go[oh * g.w_out..][..g.w_out];
                            let row_in = &mut dst[ih * g.w..][..g.w];
                            if g.stride == 1 {
                                let off = kw as isize - g.pad as isize;
                                let ins = &mut row_in[(ow0 as isize + off) as usize..(ow1 as isize + off) as usize];
                                for (d, &gv) in ins.iter_mut().zip(&row_go[ow0..ow1]) {
                                    *d += wv * gv;
                                }
                            } else {
                                for ow in ow0..ow1 {
                                    row_in[ow * g.stride + kw - g.pad] += wv * row_go[ow];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gin
}

/// Gradients w.r.t. weight and bias.
pub fn conv2d_backward_params(
    grad_out: &[f64],
    input: &[f64],
    g: &ConvGeometry,
) -> (Vec<f64>, Vec<f64>) {
    let plane_in = g.h * g.w;
    let plane_out = g.h_out * g.w_out;
    let mut gw = vec![0.0; g.c_out * g.c_in * g.k * g.k];
    let mut gb = vec![0.0; g.c_out];
    for n in 0..g.n {
        for o in 0..g.c_out {
            let go = &grad_out[(n * g.c_out + o) * plane_out..][..plane_out];
            gb[o] += go.iter().sum::<f64>();
            for c in 0..g.c_in {
                let src = &input[(n * g.c_in + c) * plane_in..][..plane_in];
                let wk = &mut gw[(o * g.c_in + c) * g.k * g.k..][..g.k * g.k];
                for kh in 0..g.k {
                    let (oh0, oh1) = g.valid_range(kh, g.h, g.h_out);
                    for kw in 0..g.k {
                        let (ow0, ow1) = g.valid_range(kw, g.w, g.w_out);
                        let mut acc = 0.0;
                        for oh in oh0..oh1 {
                            let ih = oh * g.stride + kh - g.pad;
                            let row_go = &go[oh * g.w_out..][..g.w_out];
                            let row_in = &src[ih * g.w..][..g.w];
                            if g.stride == 1 {
                                let off = kw as isize - g.pad as isize;
                                let ins = &row_in[(ow0 as isize + off) as usize..(ow1 as isize + off) as usize];
                                acc += ins
                                    .iter()
                                    .zip(&row_go[ow0..ow1])
                                    .map(|(x, g)| x * g)
                                    .sum::<f64>();
                            } else {
                                for ow in ow0..ow1 {
                                    acc += row_in[ow * g.stride + kw - g.pad] * row_go[ow];
                                }
                            }
                        }
                        wk[kh * g.k + kw] += acc;
                    }
                }
            }
        }
    }
    (gw, gb)
}

/// Value-level convolution.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(
        input.shape(),
        weight.shape(),
        bias.map(|b| b.shape()),
        stride,
        pad,
    )?;
    let out = conv2d_forward(input.data(), weight.data(), bias.map(|b| b.data()), &g);
    Ok(Tensor::from_parts(g.out_shape().to_vec(), out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(input: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, c, h, w) = input.dims4().unwrap();
        let (o, _, k, _) = weight.dims4().unwrap();
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros([n, o, ho, wo]);
        for ni in 0..n {
            for oi in 0..o {
                for y in 0..ho {
                    for x in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (y * stride + ky) as isize - pad as isize;
                                    let ix = (x * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += weight.at4(oi, ci, ky, kx)
                                            * input.at4(ni, ci, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        out.data_mut()[((ni * o + oi) * ho + y) * wo + x] = acc;
                    }
                }
            }
        }
        out
    }

    fn lcg(seed: u64) -> impl FnMut(usize) -> f64 {
        let mut s = seed;
        move |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        }
    }

    #[test]
    fn scalar_scaling() {
        let x = Tensor::full([1, 1, 3, 3], 1.0);
        let w = Tensor::full([1, 1, 1, 1], 2.0);
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn full_window_sum() {
        let x = Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::full([1, 1, 2, 2], 1.0);
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn strided_padded_matches_naive_exactly() {
        let x = Tensor::from_fn([2, 3, 8, 8], lcg(1));
        let w = Tensor::from_fn([4, 3, 3, 3], lcg(2));
        let y = conv2d(&x, &w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 4, 4, 4]);
        assert_eq!(y, naive(&x, &w, 2, 1));
    }

    #[test]
    fn many_geometries_match_naive() {
        for (k, s, p, h) in [(1, 1, 0, 5), (3, 1, 1, 7), (7, 1, 3, 8), (3, 2, 0, 9), (2, 2, 0, 6)] {
            let x = Tensor::from_fn([1, 2, h, h], lcg(h as u64));
            let w = Tensor::from_fn([3, 2, k, k], lcg(k as u64 + 10));
            assert_eq!(conv2d(&x, &w, None, s, p).unwrap(), naive(&x, &w, s, p), "k={k} s={s} p={p}");
        }
    }

    #[test]
    fn shape_errors_name_dimension() {
        let x = Tensor::zeros([1, 2, 4, 4]);
        let w = Tensor::zeros([1, 3, 3, 3]);
        let err = conv2d(&x, &w, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("channel"), "{err}");
        let w = Tensor::zeros([1, 2, 5, 5]);
        let err = conv2d(&x, &w, None, 1, 0).unwrap_err().to_string();
        assert!(err.contains("height"), "{err}");
    }
}
