//! Radix-2 decimation-in-time FFT over the trailing two axes of N×C×H×W
//! tensors.
//!
//! Forward transforms are unnormalized; inverse transforms carry the
//! `1/(H·W)` factor. Spatial extents that are not powers of two are
//! zero-padded up to the next power of two on the forward transform.

use std::f64::consts::PI;

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Frequency-domain planes: real and imaginary parts share one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexGrid {
    pub real: Tensor,
    pub imag: Tensor,
}

impl ComplexGrid {
    pub fn new(real: Tensor, imag: Tensor) -> Result<Self> {
        if real.shape() != imag.shape() {
            return shape_err(
                "complex_grid",
                format!("real shape {:?} != imag shape {:?}", real.shape(), imag.shape()),
            );
        }
        Ok(ComplexGrid { real, imag })
    }

    pub fn shape(&self) -> &[usize] {
        self.real.shape()
    }

    /// Σ |X|² over every bin.
    pub fn energy(&self) -> f64 {
        self.real
            .data()
            .iter()
            .zip(self.imag.data())
            .map(|(r, i)| r * r + i * i)
            .sum()
    }
}

pub fn padded_extent(n: usize) -> usize {
    n.next_power_of_two()
}

/// In-place 1-D transform of `len = re.len()` (a power of two) with element
/// stride `stride` starting at `offset`.
fn fft_1d(re: &mut [f64], im: &mut [f64], offset: usize, stride: usize, len: usize, twiddles: &[(f64, f64)], inverse: bool) {
    if len <= 1 {
        return;
    }
    let at = |i: usize| offset + i * stride;
    // bit reversal
    let bits = len.trailing_zeros();
    for i in 0..len {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            re.swap(at(i), at(j));
            im.swap(at(i), at(j));
        }
    }
    let mut half = 1;
    while half < len {
        let step = len / (2 * half);
        for start in (0..len).step_by(2 * half) {
            for k in 0..half {
                let (c, s) = twiddles[k * step];
                let s = if inverse { -s } else { s };
                let (a, b) = (at(start + k), at(start + k + half));
                // w = c − i·s  (forward: exp(−2πik/len))
                let tr = re[b] * c + im[b] * s;
                let ti = im[b] * c - re[b] * s;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
        half *= 2;
    }
}

/// `(cos, sin)` of `2πk/len` for `k < len/2`.
fn twiddle_table(len: usize) -> Vec<(f64, f64)> {
    (0..len / 2)
        .map(|k| {
            let a = 2.0 * PI * k as f64 / len as f64;
            (a.cos(), a.sin())
        })
        .collect()
}

/// Transforms `planes` consecutive H×W planes in place. Both extents must be
/// powers of two.
pub(crate) fn fft2_planes(re: &mut [f64], im: &mut [f64], h: usize, w: usize, inverse: bool) {
    debug_assert!(h.is_power_of_two() && w.is_power_of_two());
    let plane = h * w;
    let tw_row = twiddle_table(w);
    let tw_col = twiddle_table(h);
    for p in 0..re.len() / plane {
        let base = p * plane;
        for r in 0..h {
            fft_1d(re, im, base + r * w, 1, w, &tw_row, inverse);
        }
        for c in 0..w {
            fft_1d(re, im, base + c, w, h, &tw_col, inverse);
        }
    }
    if inverse {
        let scale = 1.0 / plane as f64;
        re.iter_mut().chain(im.iter_mut()).for_each(|v| *v *= scale);
    }
}

/// Copies N×C×H×W into a zero-filled N×C×P×Q buffer.
pub(crate) fn pad_planes(src: &[f64], planes: usize, h: usize, w: usize, ph: usize, pw: usize) -> Vec<f64> {
    if (h, w) == (ph, pw) {
        return src.to_vec();
    }
    let mut out = vec![0.0; planes * ph * pw];
    for p in 0..planes {
        for r in 0..h {
            out[p * ph * pw + r * pw..][..w].copy_from_slice(&src[p * h * w + r * w..][..w]);
        }
    }
    out
}

/// Inverse of [`pad_planes`]: keeps the top-left H×W corner of each plane.
pub(crate) fn crop_planes(src: &[f64], planes: usize, ph: usize, pw: usize, h: usize, w: usize) -> Vec<f64> {
    if (h, w) == (ph, pw) {
        return src.to_vec();
    }
    let mut out = Vec::with_capacity(planes * h * w);
    for p in 0..planes {
        for r in 0..h {
            out.extend_from_slice(&src[p * ph * pw + r * pw..][..w]);
        }
    }
    out
}

/// Forward 2-D DFT of every (n, c) plane of a real tensor, zero-padded to
/// power-of-two extents.
pub fn fft2(input: &Tensor) -> Result<ComplexGrid> {
    let Some((n, c, h, w)) = input.dims4() else {
        return shape_err("fft2", format!("expected N×C×H×W, got {:?}", input.shape()));
    };
    let (ph, pw) = (padded_extent(h), padded_extent(w));
    let mut re = pad_planes(input.data(), n * c, h, w, ph, pw);
    let mut im = vec![0.0; re.len()];
    fft2_planes(&mut re, &mut im, ph, pw, false);
    let shape = vec![n, c, ph, pw];
    Ok(ComplexGrid {
        real: Tensor::from_parts(shape.clone(), re),
        imag: Tensor::from_parts(shape, im),
    })
}

/// Complex-to-complex transform of a grid whose extents are powers of two.
pub fn transform(grid: &ComplexGrid, inverse: bool) -> Result<ComplexGrid> {
    let op = if inverse { "ifft2" } else { "fft2" };
    if grid.real.shape() != grid.imag.shape() {
        return shape_err(
            op,
            format!(
                "real shape {:?} != imag shape {:?}",
                grid.real.shape(),
                grid.imag.shape()
            ),
        );
    }
    let Some((_, _, h, w)) = grid.real.dims4() else {
        return shape_err(op, format!("expected N×C×H×W, got {:?}", grid.shape()));
    };
    if !h.is_power_of_two() || !w.is_power_of_two() {
        return shape_err(op, format!("spectrum extents {h}×{w} must be powers of two"));
    }
    let mut re = grid.real.data().to_vec();
    let mut im = grid.imag.data().to_vec();
    fft2_planes(&mut re, &mut im, h, w, inverse);
    let shape = grid.shape().to_vec();
    Ok(ComplexGrid {
        real: Tensor::from_parts(shape.clone(), re),
        imag: Tensor::from_parts(shape, im),
    })
}

pub fn ifft2(grid: &ComplexGrid) -> Result<ComplexGrid> {
    transform(grid, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dft_direct(x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
        let mut re = vec![0.0; h * w];
        let mut im = vec![0.0; h * w];
        for u in 0..h {
            for v in 0..w {
                for y in 0..h {
                    for z in 0..w {
                        let a = -2.0 * PI * ((u * y) as f64 / h as f64 + (v * z) as f64 / w as f64);
                        re[u * w + v] += x[y * w + z] * a.cos();
                        im[u * w + v] += x[y * w + z] * a.sin();
                    }
                }
            }
        }
        (re, im)
    }

    #[test]
    fn constant_plane_is_dc_only() {
        let x = Tensor::full([1, 1, 4, 8], 3.0);
        let g = fft2(&x).unwrap();
        assert!((g.real.data()[0] - 3.0 * 32.0).abs() < 1e-12);
        for i in 1..32 {
            assert!(g.real.data()[i].abs() < 1e-12 && g.imag.data()[i].abs() < 1e-12);
        }
    }

    #[test]
    fn impulse_is_flat() {
        let mut x = Tensor::zeros([1, 1, 4, 4]);
        x.data_mut()[0] = 1.0;
        let g = fft2(&x).unwrap();
        assert!(g.real.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert!(g.imag.data().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn matches_direct_dft_rectangular() {
        let x = Tensor::from_fn([1, 1, 4, 8], |i| ((i * 7919) % 13) as f64 - 6.0);
        let g = fft2(&x).unwrap();
        let (re, im) = dft_direct(x.data(), 4, 8);
        for i in 0..32 {
            assert!((g.real.data()[i] - re[i]).abs() < 1e-10);
            assert!((g.imag.data()[i] - im[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn non_power_of_two_is_padded() {
        let x = Tensor::full([1, 2, 3, 5], 1.0);
        let g = fft2(&x).unwrap();
        assert_eq!(g.shape(), &[1, 2, 4, 8]);
        let back = ifft2(&g).unwrap();
        let cropped = crop_planes(back.real.data(), 2, 4, 8, 3, 5);
        assert!(cropped.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn mismatched_grid_rejected() {
        let g = ComplexGrid {
            real: Tensor::zeros([1, 1, 4, 4]),
            imag: Tensor::zeros([1, 1, 4, 2]),
        };
        assert!(ifft2(&g).is_err());
        assert!(ComplexGrid::new(Tensor::zeros([1, 1, 4, 4]), Tensor::zeros([1, 1, 2, 4])).is_err());
    }
}
