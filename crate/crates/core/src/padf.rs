//! Partially-aware detail focus block: partial convolution followed by
//! partial channel attention and partial spatial attention, with a residual
//! skip around the stack.

use crate::conv::ConvGeometry;
use crate::error::{Result, TensorError};
use crate::param_tree;
use crate::params::{kaiming_uniform, UniformSource};
use crate::pool::PoolKind;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default fraction of channels the partial convolution touches.
pub const DEFAULT_PARTIAL_RATIO: f64 = 0.25;
/// Channel-gate reduction factor ρ.
pub const GATE_REDUCTION: usize = 4;
pub const SPATIAL_GATE_KERNEL: usize = 7;

/// `C_conv = round(r·C)`, at least 1.
pub fn conv_channels(channels: usize, ratio: f64) -> usize {
    ((ratio * channels as f64).round() as usize).max(1)
}

/// Partial convolution: a 3×3 convolution over the first `channels_conv`
/// channels; the remaining channels are passed through.
#[derive(Debug, Clone, PartialEq)]
pub struct PConvParams<T = Tensor> {
    pub channels_total: usize,
    pub channels_conv: usize,
    /// `[C_conv, C_conv, 3, 3]`
    pub kernel: T,
}

param_tree!(PConvParams {
    leaves: [kernel],
    optional: [],
    nested: [],
    plain: [channels_total, channels_conv],
});

impl PConvParams {
    pub fn new(kernel: Tensor, channels_total: usize) -> Result<Self> {
        let channels_conv = kernel.shape()[0];
        if kernel.shape() != [channels_conv, channels_conv, 3, 3] {
            return Err(TensorError::Invalid(format!(
                "pconv kernel must be [C_conv, C_conv, 3, 3], got {:?}",
                kernel.shape()
            )));
        }
        if channels_conv > channels_total {
            return Err(TensorError::Invalid(format!(
                "pconv: C_conv = {channels_conv} exceeds C = {channels_total}"
            )));
        }
        Ok(PConvParams {
            channels_total,
            channels_conv,
            kernel,
        })
    }

    pub fn zeros(channels: usize, ratio: f64) -> Self {
        let cc = conv_channels(channels, ratio);
        PConvParams {
            channels_total: channels,
            channels_conv: cc,
            kernel: Tensor::zeros([cc, cc, 3, 3]),
        }
    }

    pub fn init(channels: usize, ratio: f64, rng: UniformSource<'_>) -> Self {
        let cc = conv_channels(channels, ratio);
        PConvParams {
            channels_total: channels,
            channels_conv: cc,
            kernel: kaiming_uniform([cc, cc, 3, 3], rng),
        }
    }

    pub fn partial_ratio(&self) -> f64 {
        self.channels_conv as f64 / self.channels_total as f64
    }
}

impl<T> PConvParams<T> {
    /// Multiply-accumulates of the convolution path on an `n×C×h×w` input.
    pub fn flops(&self, n: usize, h: usize, w: usize) -> u64 {
        let cc = self.channels_conv;
        ConvGeometry::new(&[n, cc, h, w], &[cc, cc, 3, 3], None, 1, 1)
            .map(|g| g.flops())
            .unwrap_or(0)
    }
}

/// 3×3 convolution gated by a squeeze–excite channel attention.
#[derive(Debug, Clone, PartialEq)]
pub struct PATChannelParams<T = Tensor> {
    /// `[C, C, 3, 3]`
    pub conv3: T,
    /// `[C/ρ, C, 1, 1]`
    pub reduce_w: T,
    pub reduce_b: T,
    /// `[C, C/ρ, 1, 1]`
    pub expand_w: T,
    pub expand_b: T,
}

param_tree!(PATChannelParams {
    leaves: [conv3, reduce_w, reduce_b, expand_w, expand_b],
    optional: [],
    nested: [],
    plain: [],
});

fn gate_hidden(channels: usize) -> Result<usize> {
    let hidden = channels / GATE_REDUCTION;
    if hidden == 0 {
        return Err(TensorError::Invalid(format!(
            "channel gate: reduction {GATE_REDUCTION} leaves zero hidden channels for C = {channels}"
        )));
    }
    Ok(hidden)
}

impl PATChannelParams {
    pub fn zeros(channels: usize) -> Result<Self> {
        let h = gate_hidden(channels)?;
        Ok(PATChannelParams {
            conv3: Tensor::zeros([channels, channels, 3, 3]),
            reduce_w: Tensor::zeros([h, channels, 1, 1]),
            reduce_b: Tensor::zeros([h]),
            expand_w: Tensor::zeros([channels, h, 1, 1]),
            expand_b: Tensor::zeros([channels]),
        })
    }

    pub fn init(channels: usize, rng: UniformSource<'_>) -> Result<Self> {
        let h = gate_hidden(channels)?;
        Ok(PATChannelParams {
            conv3: kaiming_uniform([channels, channels, 3, 3], rng),
            reduce_w: kaiming_uniform([h, channels, 1, 1], rng),
            reduce_b: Tensor::zeros([h]),
            expand_w: kaiming_uniform([channels, h, 1, 1], rng),
            expand_b: Tensor::zeros([channels]),
        })
    }
}

/// 1×1 convolution gated by a spatial attention map built from the
/// per-pixel channel mean and max.
#[derive(Debug, Clone, PartialEq)]
pub struct PATSpatialParams<T = Tensor> {
    /// `[C, C, 1, 1]`
    pub conv1: T,
    /// `[1, 2, 7, 7]`
    pub gate_w: T,
    /// `[1]`
    pub gate_b: T,
}

param_tree!(PATSpatialParams {
    leaves: [conv1, gate_w, gate_b],
    optional: [],
    nested: [],
    plain: [],
});

impl PATSpatialParams {
    pub fn zeros(channels: usize) -> Self {
        let k = SPATIAL_GATE_KERNEL;
        PATSpatialParams {
            conv1: Tensor::zeros([channels, channels, 1, 1]),
            gate_w: Tensor::zeros([1, 2, k, k]),
            gate_b: Tensor::zeros([1]),
        }
    }

    /// The output projection starts at zero so a residual PADF block is the
    /// identity at init.
    pub fn init(channels: usize, rng: UniformSource<'_>) -> Self {
        let k = SPATIAL_GATE_KERNEL;
        PATSpatialParams {
            conv1: Tensor::zeros([channels, channels, 1, 1]),
            gate_w: kaiming_uniform([1, 2, k, k], rng),
            gate_b: Tensor::zeros([1]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PADFBlockParams<T = Tensor> {
    pub pconv: PConvParams<T>,
    pub pat_ch: PATChannelParams<T>,
    pub pat_sp: PATSpatialParams<T>,
    pub residual: bool,
}

param_tree!(PADFBlockParams {
    leaves: [],
    optional: [],
    nested: [pconv, pat_ch, pat_sp],
    plain: [residual],
});

impl PADFBlockParams {
    pub fn zeros(channels: usize) -> Result<Self> {
        Ok(PADFBlockParams {
            pconv: PConvParams::zeros(channels, DEFAULT_PARTIAL_RATIO),
            pat_ch: PATChannelParams::zeros(channels)?,
            pat_sp: PATSpatialParams::zeros(channels),
            residual: true,
        })
    }

    pub fn init(channels: usize, rng: UniformSource<'_>) -> Result<Self> {
        Ok(PADFBlockParams {
            pconv: PConvParams::init(channels, DEFAULT_PARTIAL_RATIO, rng),
            pat_ch: PATChannelParams::init(channels, rng)?,
            pat_sp: PATSpatialParams::init(channels, rng),
            residual: true,
        })
    }
}

fn channels_of(tape: &Tape, x: Var, op: &str) -> Result<usize> {
    match tape.shape(x) {
        [_, c, _, _] => Ok(*c),
        s => Err(TensorError::Invalid(format!("{op}: expected N×C×H×W input, got {s:?}"))),
    }
}

pub fn pconv_forward(tape: &mut Tape, x: Var, p: &PConvParams<Var>) -> Result<Var> {
    let c = channels_of(tape, x, "pconv")?;
    if c != p.channels_total {
        return Err(TensorError::Invalid(format!(
            "pconv: input has {c} channels, params expect {}",
            p.channels_total
        )));
    }
    if p.channels_conv == 0 || p.channels_conv > c {
        return Err(TensorError::Invalid(format!(
            "pconv: C_conv = {} invalid for C = {c}",
            p.channels_conv
        )));
    }
    if p.channels_conv == c {
        return tape.conv2d(x, p.kernel, None, 1, 1);
    }
    let head = tape.slice_channels(x, 0, p.channels_conv)?;
    let head = tape.conv2d(head, p.kernel, None, 1, 1)?;
    let tail = tape.slice_channels(x, p.channels_conv, c)?;
    tape.concat_channels(&[head, tail])
}

/// Squeeze–excite gate `σ(expand(relu(reduce(pool(x)))))` of shape `[N,C,1,1]`.
pub(crate) fn channel_gate(
    tape: &mut Tape,
    pooled: Var,
    reduce_w: Var,
    reduce_b: Var,
    expand_w: Var,
    expand_b: Var,
) -> Result<Var> {
    let h = tape.conv2d(pooled, reduce_w, Some(reduce_b), 1, 0)?;
    let h = tape.relu(h)?;
    let g = tape.conv2d(h, expand_w, Some(expand_b), 1, 0)?;
    tape.sigmoid(g)
}

pub fn pat_ch_forward(tape: &mut Tape, x: Var, p: &PATChannelParams<Var>) -> Result<Var> {
    let y = tape.conv2d(x, p.conv3, None, 1, 1)?;
    let pooled = tape.global_pool(x, PoolKind::Average)?;
    let gate = channel_gate(tape, pooled, p.reduce_w, p.reduce_b, p.expand_w, p.expand_b)?;
    tape.mul(y, gate)
}

/// Spatial gate map `σ(conv7×7([mean_c(x), max_c(x)]) + b)`, `[N,1,H,W]`.
pub fn spatial_gate(tape: &mut Tape, x: Var, p: &PATSpatialParams<Var>) -> Result<Var> {
    let mean = tape.channel_mean(x)?;
    let max = tape.channel_max(x)?;
    let stacked = tape.concat_channels(&[mean, max])?;
    let g = tape.conv2d(stacked, p.gate_w, Some(p.gate_b), 1, SPATIAL_GATE_KERNEL / 2)?;
    tape.sigmoid(g)
}

pub fn pat_sp_forward(tape: &mut Tape, x: Var, p: &PATSpatialParams<Var>) -> Result<Var> {
    let y = tape.conv2d(x, p.conv1, None, 1, 0)?;
    let gate = spatial_gate(tape, x, p)?;
    tape.mul(y, gate)
}

pub fn padf_forward(tape: &mut Tape, x: Var, p: &PADFBlockParams<Var>) -> Result<Var> {
    let y = pconv_forward(tape, x, &p.pconv)?;
    let y = pat_ch_forward(tape, y, &p.pat_ch)?;
    let y = pat_sp_forward(tape, y, &p.pat_sp)?;
    if p.residual {
        tape.add(x, y)
    } else {
        Ok(y)
    }
}
