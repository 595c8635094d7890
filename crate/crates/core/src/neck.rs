//! Multi-scale neck components: space-to-depth downsampling followed by a
//! convolution, and the median/frequency feature fusion block (global
//! average/max/median pooling gate, dual-path frequency channel attention,
//! per-bin frequency spatial attention).

use crate::error::{Result, TensorError};
use crate::fft::padded_extent;
use crate::padf::{channel_gate, GATE_REDUCTION};
use crate::param_tree;
use crate::params::{kaiming_uniform, UniformSource};
use crate::pool::PoolKind;
use crate::tape::{ComplexVar, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SPDCConvParams<T = Tensor> {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[C_out, 4·C, 3, 3]`, stride 1, pad 1
    pub post_conv: T,
}

param_tree!(SPDCConvParams {
    leaves: [post_conv],
    optional: [],
    nested: [],
    plain: [in_channels, out_channels],
});

impl SPDCConvParams {
    pub fn new(in_channels: usize, post_conv: Tensor) -> Result<Self> {
        match post_conv.shape() {
            &[o, c4, 3, 3] if c4 == 4 * in_channels => Ok(SPDCConvParams {
                in_channels,
                out_channels: o,
                post_conv,
            }),
            s => Err(TensorError::Invalid(format!(
                "spdcconv: post conv must be [C_out, {}, 3, 3], got {s:?}",
                4 * in_channels
            ))),
        }
    }

    pub fn init(in_channels: usize, out_channels: usize, rng: UniformSource<'_>) -> Self {
        SPDCConvParams {
            in_channels,
            out_channels,
            post_conv: kaiming_uniform([out_channels, 4 * in_channels, 3, 3], rng),
        }
    }
}

/// `[N,C,H,W] → [N,4C,H/2,W/2]`; lossless.
pub fn space_to_depth(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.space_to_depth(x)
}

pub fn spdcconv_forward(tape: &mut Tape, x: Var, p: &SPDCConvParams<Var>) -> Result<Var> {
    match tape.shape(x) {
        &[_, c, _, _] if c == p.in_channels => {}
        s => {
            return Err(TensorError::Invalid(format!(
                "spdcconv: expected {} input channels, got shape {s:?}",
                p.in_channels
            )))
        }
    }
    let s = tape.space_to_depth(x)?;
    tape.conv2d(s, p.post_conv, None, 1, 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MFFFParams<T = Tensor> {
    pub channels: usize,
    /// Spatial extent the frequency weights were sized for.
    pub height: usize,
    pub width: usize,
    pub pool_reduce_w: T,
    pub pool_reduce_b: T,
    pub pool_expand_w: T,
    pub pool_expand_b: T,
    /// 1×1 convolutions around the frequency transform, `[C, C, 1, 1]`
    pub dcam_pre: T,
    pub dcam_post: T,
    /// Per-channel scales of the real and imaginary parts, `[1, C, 1, 1]`
    pub dcam_a_re: T,
    pub dcam_a_im: T,
    pub dcam_b_re: T,
    pub dcam_b_im: T,
    /// Per-bin weights on the padded spectrum, `[1, 1, H_f, W_f]`
    pub fsam_freq: T,
    pub fsam_pre: T,
}

param_tree!(MFFFParams {
    leaves: [
        pool_reduce_w, pool_reduce_b, pool_expand_w, pool_expand_b,
        dcam_pre, dcam_post, dcam_a_re, dcam_a_im, dcam_b_re, dcam_b_im,
        fsam_freq, fsam_pre,
    ],
    optional: [],
    nested: [],
    plain: [channels, height, width],
});

impl MFFFParams {
    /// Identity-leaning init: frequency paths pass the spectrum unchanged,
    /// `dcam_post` is zero (the channel-attention branch starts as identity),
    /// per-bin weights start flat at 1.
    pub fn init(channels: usize, height: usize, width: usize, rng: UniformSource<'_>) -> Result<Self> {
        let hidden = channels / GATE_REDUCTION;
        if hidden == 0 {
            return Err(TensorError::Invalid(format!(
                "mfff: reduction {GATE_REDUCTION} leaves zero hidden channels for C = {channels}"
            )));
        }
        let c = channels;
        let (hf, wf) = (padded_extent(height), padded_extent(width));
        Ok(MFFFParams {
            channels,
            height,
            width,
            pool_reduce_w: kaiming_uniform([hidden, c, 1, 1], rng),
            pool_reduce_b: Tensor::zeros([hidden]),
            pool_expand_w: kaiming_uniform([c, hidden, 1, 1], rng),
            pool_expand_b: Tensor::zeros([c]),
            dcam_pre: kaiming_uniform([c, c, 1, 1], rng),
            dcam_post: Tensor::zeros([c, c, 1, 1]),
            dcam_a_re: Tensor::full([1, c, 1, 1], 1.0),
            dcam_a_im: Tensor::full([1, c, 1, 1], 1.0),
            dcam_b_re: Tensor::full([1, c, 1, 1], 1.0),
            dcam_b_im: Tensor::full([1, c, 1, 1], 1.0),
            fsam_freq: Tensor::full([1, 1, hf, wf], 1.0),
            fsam_pre: kaiming_uniform([c, c, 1, 1], rng),
        })
    }

    /// Fills every tensor from a uniform source in `[-scale, scale)`, for
    /// tests that need generic (non-identity) parameters.
    pub fn randomized(channels: usize, height: usize, width: usize, scale: f64, rng: UniformSource<'_>) -> Result<Self> {
        let base = Self::init(channels, height, width, rng)?;
        Ok(base.map("", &mut |_, t: &Tensor| {
            Tensor::from_fn(t.shape().to_vec(), |_| (2.0 * rng() - 1.0) * scale)
        }))
    }
}

use crate::params::ParamTree;

/// Per-channel pooling gate: `σ(mlp(avg(x) + max(x) + median(x)))`,
/// `[N, C, 1, 1]`.
pub fn mfff_pool_branch(tape: &mut Tape, x: Var, p: &MFFFParams<Var>) -> Result<Var> {
    let avg = tape.global_pool(x, PoolKind::Average)?;
    let max = tape.global_pool(x, PoolKind::Max)?;
    let med = tape.global_pool(x, PoolKind::Median)?;
    let s = tape.add(avg, max)?;
    let s = tape.add(s, med)?;
    channel_gate(tape, s, p.pool_reduce_w, p.pool_reduce_b, p.pool_expand_w, p.pool_expand_b)
}

/// Output of a frequency branch plus the largest imaginary magnitude that
/// was discarded after the inverse transform.
#[derive(Debug, Clone, Copy)]
pub struct FrequencyOutput {
    pub output: Var,
    pub imag_residue: f64,
}

fn scale_parts(tape: &mut Tape, z: ComplexVar, re_w: Var, im_w: Var) -> Result<ComplexVar> {
    Ok(ComplexVar {
        real: tape.mul(z.real, re_w)?,
        imag: tape.mul(z.imag, im_w)?,
    })
}

/// Inverse transform, drop the imaginary part, crop padding.
fn back_to_space(tape: &mut Tape, z: ComplexVar, h: usize, w: usize) -> Result<(Var, f64)> {
    let y = tape.ifft2(z)?;
    let residue = tape.value(y.imag).max_abs();
    let real = tape.crop(y.real, h, w)?;
    Ok((real, residue))
}

fn spatial_dims(tape: &Tape, x: Var, op: &str) -> Result<(usize, usize)> {
    match tape.shape(x) {
        &[_, _, h, w] => Ok((h, w)),
        s => Err(TensorError::Invalid(format!("{op}: expected N×C×H×W, got {s:?}"))),
    }
}

pub fn dcam_forward_detailed(tape: &mut Tape, x: Var, p: &MFFFParams<Var>) -> Result<FrequencyOutput> {
    let (h, w) = spatial_dims(tape, x, "dcam")?;
    let pre = tape.conv2d(x, p.dcam_pre, None, 1, 0)?;
    let z = tape.fft2(pre)?;
    let a = scale_parts(tape, z, p.dcam_a_re, p.dcam_a_im)?;
    let b = scale_parts(tape, z, p.dcam_b_re, p.dcam_b_im)?;
    let re = tape.add(a.real, b.real)?;
    let im = tape.add(a.imag, b.imag)?;
    let combined = ComplexVar {
        real: tape.scale(re, 0.5)?,
        imag: tape.scale(im, 0.5)?,
    };
    let (spatial, imag_residue) = back_to_space(tape, combined, h, w)?;
    let post = tape.conv2d(spatial, p.dcam_post, None, 1, 0)?;
    Ok(FrequencyOutput {
        output: tape.add(x, post)?,
        imag_residue,
    })
}

/// `x + post(IFFT(½(W_a ⊙ Z + W_b ⊙ Z)))`, `Z = FFT(pre(x))`.
pub fn dcam_forward(tape: &mut Tape, x: Var, p: &MFFFParams<Var>) -> Result<Var> {
    dcam_forward_detailed(tape, x, p).map(|o| o.output)
}

pub fn fsam_forward_detailed(tape: &mut Tape, x: Var, p: &MFFFParams<Var>) -> Result<FrequencyOutput> {
    let (h, w) = spatial_dims(tape, x, "fsam")?;
    let pre = tape.conv2d(x, p.fsam_pre, None, 1, 0)?;
    let z = tape.fft2(pre)?;
    let zs = tape.shape(z.real).to_vec();
    let fs = tape.shape(p.fsam_freq).to_vec();
    if fs != [1, 1, zs[2], zs[3]] {
        return Err(TensorError::Invalid(format!(
            "fsam: frequency weights {fs:?} do not match spectrum {}×{}",
            zs[2], zs[3]
        )));
    }
    let weights = tape.symmetrize_bins(p.fsam_freq)?;
    let weighted = scale_parts(tape, z, weights, weights)?;
    let (spatial, imag_residue) = back_to_space(tape, weighted, h, w)?;
    Ok(FrequencyOutput {
        output: tape.add(x, spatial)?,
        imag_residue,
    })
}

/// `x + IFFT(W ⊙ FFT(pre(x)))` with per-bin weights shared across channels.
pub fn fsam_forward(tape: &mut Tape, x: Var, p: &MFFFParams<Var>) -> Result<Var> {
    fsam_forward_detailed(tape, x, p).map(|o| o.output)
}

/// `fsam(dcam(x)) ⊙ pool_gate(x)`.
pub fn mfff_forward(tape: &mut Tape, x: Var, p: &MFFFParams<Var>) -> Result<Var> {
    let gate = mfff_pool_branch(tape, x, p)?;
    let f = dcam_forward(tape, x, p)?;
    let f = fsam_forward(tape, f, p)?;
    tape.mul(f, gate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::bind;
    use crate::tensor::Precision;

    fn rng(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed.wrapping_mul(0x9E3779B97F4A7C15) | 1;
        move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64
        }
    }

    fn rand_input(shape: [usize; 4], seed: u64) -> Tensor {
        let mut r = rng(seed);
        Tensor::from_fn(shape.to_vec(), |_| 2.0 * r() - 1.0)
    }

    fn identity_1x1(c: usize) -> Tensor {
        Tensor::from_fn([c, c, 1, 1], |i| if i / c == i % c { 1.0 } else { 0.0 })
    }

    #[test]
    fn spd_fixture() {
        let mut t = Tape::new(Precision::Double);
        let x = t.constant(Tensor::from_fn([1, 1, 4, 4], |i| i as f64));
        let y = space_to_depth(&mut t, x).unwrap();
        assert_eq!(t.shape(y), &[1, 4, 2, 2]);
        assert_eq!(
            t.value(y).data(),
            &[0., 2., 8., 10., 4., 6., 12., 14., 1., 3., 9., 11., 5., 7., 13., 15.]
        );
    }

    #[test]
    fn spd_odd_rejected() {
        let mut t = Tape::new(Precision::Double);
        let x = t.constant(Tensor::zeros([1, 1, 3, 4]));
        assert!(space_to_depth(&mut t, x).is_err());
    }

    #[test]
    fn spdc_shapes_and_one_hot_kernel() {
        let mut r = rng(5);
        for hw in [8, 16, 32] {
            let p = SPDCConvParams::init(2, 3, &mut r);
            let mut t = Tape::new(Precision::Double);
            let x = t.constant(rand_input([1, 2, hw, hw], hw as u64));
            let pb = bind(&p, &mut t);
            let y = spdcconv_forward(&mut t, x, &pb).unwrap();
            assert_eq!(t.shape(y), &[1, 3, hw / 2, hw / 2]);
        }
        // 4C→4C kernel with a one at the centre tap of its own channel
        let c = 2;
        let k = Tensor::from_fn([4 * c, 4 * c, 3, 3], |i| {
            let (o, rest) = (i / (4 * c * 9), i % (4 * c * 9));
            let (ci, tap) = (rest / 9, rest % 9);
            if o == ci && tap == 4 { 1.0 } else { 0.0 }
        });
        let p = SPDCConvParams::new(c, k).unwrap();
        let mut t = Tape::new(Precision::Double);
        let x = t.constant(rand_input([2, c, 8, 8], 9));
        let pb = bind(&p, &mut t);
        let y = spdcconv_forward(&mut t, x, &pb).unwrap();
        let raw = t.space_to_depth(x).unwrap();
        assert_eq!(t.value(y), t.value(raw));
    }

    #[test]
    fn pool_gate_constant_plane_and_permutation() {
        let mut r = rng(11);
        let p = MFFFParams::randomized(4, 4, 4, 0.5, &mut r).unwrap();
        let mut t = Tape::new(Precision::Double);
        let pb = bind(&p, &mut t);
        // constant planes: gate = σ(mlp(3v))
        let xv = Tensor::from_fn([1, 4, 4, 4], |i| (i / 16) as f64 * 0.3 - 0.4);
        let x = t.constant(xv);
        let g = mfff_pool_branch(&mut t, x, &pb).unwrap();
        let tripled = t.constant(Tensor::from_fn([1, 4, 1, 1], |c| 3.0 * (c as f64 * 0.3 - 0.4)));
        let expect = channel_gate(&mut t, tripled, pb.pool_reduce_w, pb.pool_reduce_b, pb.pool_expand_w, pb.pool_expand_b).unwrap();
        assert!(t.value(g).max_abs_diff(t.value(expect)) < 1e-15);
        assert!(t.value(g).data().iter().all(|&v| v > 0.0 && v < 1.0));

        // permuting pixels inside each plane leaves the gate unchanged
        let xv = rand_input([2, 4, 4, 4], 12);
        let perm: Vec<usize> = (0..16).map(|i| (i * 7 + 3) % 16).collect();
        let mut pv = xv.clone();
        for plane in 0..8 {
            for (j, &src) in perm.iter().enumerate() {
                pv.data_mut()[plane * 16 + j] = xv.data()[plane * 16 + src];
            }
        }
        let a = t.constant(xv);
        let b = t.constant(pv);
        let ga = mfff_pool_branch(&mut t, a, &pb).unwrap();
        let gb = mfff_pool_branch(&mut t, b, &pb).unwrap();
        assert!(t.value(ga).max_abs_diff(t.value(gb)) < 1e-15);
    }

    #[test]
    fn dcam_identity_spectrum_and_zero_post() {
        let mut r = rng(13);
        let mut p = MFFFParams::randomized(4, 8, 8, 0.5, &mut r).unwrap();
        for w in [&mut p.dcam_a_re, &mut p.dcam_a_im, &mut p.dcam_b_re, &mut p.dcam_b_im] {
            *w = Tensor::full([1, 4, 1, 1], 1.0);
        }
        let mut t = Tape::new(Precision::Double);
        let pb = bind(&p, &mut t);
        let x = t.constant(rand_input([1, 4, 8, 8], 14));
        let y = dcam_forward_detailed(&mut t, x, &pb).unwrap();
        let pre = t.conv2d(x, pb.dcam_pre, None, 1, 0).unwrap();
        let post = t.conv2d(pre, pb.dcam_post, None, 1, 0).unwrap();
        let expect = t.add(x, post).unwrap();
        assert!(t.value(y.output).max_abs_diff(t.value(expect)) < 1e-12);
        assert!(y.imag_residue < 1e-10);

        p.dcam_post = Tensor::zeros([4, 4, 1, 1]);
        let mut t = Tape::new(Precision::Double);
        let pb = bind(&p, &mut t);
        let x = t.constant(rand_input([1, 4, 8, 8], 15));
        let y = dcam_forward(&mut t, x, &pb).unwrap();
        assert_eq!(t.value(y), t.value(x));
    }

    #[test]
    fn fsam_flat_weights_double_input() {
        let mut r = rng(17);
        let mut p = MFFFParams::init(4, 8, 8, &mut r).unwrap();
        p.fsam_pre = identity_1x1(4);
        let mut t = Tape::new(Precision::Double);
        let pb = bind(&p, &mut t);
        let xv = rand_input([2, 4, 8, 8], 18);
        let x = t.constant(xv.clone());
        let y = fsam_forward(&mut t, x, &pb).unwrap();
        assert!(t.value(y).max_abs_diff(&xv.map(|v| 2.0 * v)) < 1e-12);
    }

    #[test]
    fn fsam_dc_only_adds_plane_mean() {
        let mut r = rng(19);
        let mut p = MFFFParams::init(3 * 4, 4, 4, &mut r).unwrap();
        p.fsam_freq = Tensor::from_fn([1, 1, 4, 4], |i| if i == 0 { 1.0 } else { 0.0 });
        let mut t = Tape::new(Precision::Double);
        let pb = bind(&p, &mut t);
        let xv = rand_input([1, 12, 4, 4], 20);
        let x = t.constant(xv.clone());
        let y = fsam_forward(&mut t, x, &pb).unwrap();
        let pre = t.conv2d(x, pb.fsam_pre, None, 1, 0).unwrap();
        let prev = t.value(pre).clone();
        for c in 0..12 {
            let mean: f64 = prev.data()[c * 16..][..16].iter().sum::<f64>() / 16.0;
            for i in 0..16 {
                let got = t.value(y).data()[c * 16 + i] - xv.data()[c * 16 + i];
                assert!((got - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frequency_outputs_are_real() {
        let mut r = rng(21);
        let p = MFFFParams::randomized(4, 8, 8, 1.0, &mut r).unwrap();
        for precision in [Precision::Double, Precision::Single] {
            let mut t = Tape::new(precision);
            let pb = bind(&p, &mut t);
            let x = t.constant(rand_input([2, 4, 8, 8], 22));
            let d = dcam_forward_detailed(&mut t, x, &pb).unwrap();
            let f = fsam_forward_detailed(&mut t, x, &pb).unwrap();
            let tol = if precision == Precision::Double { 1e-10 } else { 1e-5 };
            assert!(d.imag_residue < tol, "{precision:?} dcam {}", d.imag_residue);
            assert!(f.imag_residue < tol, "{precision:?} fsam {}", f.imag_residue);
        }
    }

    #[test]
    fn mfff_shapes_and_saturated_gate() {
        let mut r = rng(23);
        for c in [8, 16] {
            for hw in [8, 16] {
                let p = MFFFParams::init(c, hw, hw, &mut r).unwrap();
                let mut t = Tape::new(Precision::Single);
                let pb = bind(&p, &mut t);
                let x = t.constant(rand_input([1, c, hw, hw], 24));
                let y = mfff_forward(&mut t, x, &pb).unwrap();
                assert_eq!(t.shape(y), t.shape(x));
            }
        }
        let mut p = MFFFParams::init(8, 8, 8, &mut r).unwrap();
        p.pool_expand_b = Tensor::full([8], 40.0);
        p.pool_expand_w = Tensor::zeros([8, 2, 1, 1]);
        let mut t = Tape::new(Precision::Double);
        let pb = bind(&p, &mut t);
        let x = t.constant(rand_input([1, 8, 8, 8], 25));
        let y = mfff_forward(&mut t, x, &pb).unwrap();
        let d = dcam_forward(&mut t, x, &pb).unwrap();
        let f = fsam_forward(&mut t, d, &pb).unwrap();
        assert!(t.value(y).max_abs_diff(t.value(f)) < 1e-12);
    }
}
