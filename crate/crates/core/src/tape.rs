//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] owns every tensor produced during a forward pass. Ops append
//! nodes whose inputs always precede them, so [`Tape::backward`] is a single
//! reverse sweep. One tape per worker; a tape is never shared across threads
//! while recording.

use std::cell::Cell;
use std::sync::atomic::{AtomicU32, Ordering};

use crate::boxes::{self, BBox, BoxLossKind, FocalerParams};
use crate::conv::{self, ConvGeometry};
use crate::error::{shape_err, Result, TensorError};
use crate::fft;
use crate::pool::{self, PoolKind};
use crate::tensor::{Precision, Tensor};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    tape: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.id
    }
}

/// Tape-side view of a frequency-domain grid.
#[derive(Debug, Clone, Copy)]
pub struct ComplexVar {
    pub real: Var,
    pub imag: Var,
}

/// Identifies an op's backward rule. Used for diagnostics and for the
/// mutation hook that the gradient-check suite is validated against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    AvgPool,
    MaxPool,
    MedianPool,
    Fft2,
    Ifft2,
    ComplexPart,
    ComplexPack,
    Add,
    Sub,
    Mul,
    Sigmoid,
    Relu,
    Exp,
    Scale,
    AddScalar,
    Sum,
    Mean,
    Concat,
    Slice,
    ChannelMean,
    ChannelMax,
    Crop,
    SymmetrizeBins,
    SpaceToDepth,
    DepthToSpace,
    GatherCells,
    DecodeBoxes,
    BoxLoss,
    BceLogits,
}

impl OpKind {
    /// Every op that carries a backward rule.
    pub const DIFFERENTIABLE: [OpKind; 30] = [
        OpKind::Conv2d,
        OpKind::AvgPool,
        OpKind::MaxPool,
        OpKind::MedianPool,
        OpKind::Fft2,
        OpKind::Ifft2,
        OpKind::ComplexPart,
        OpKind::ComplexPack,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Sigmoid,
        OpKind::Relu,
        OpKind::Exp,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::ChannelMean,
        OpKind::ChannelMax,
        OpKind::Crop,
        OpKind::SymmetrizeBins,
        OpKind::SpaceToDepth,
        OpKind::DepthToSpace,
        OpKind::GatherCells,
        OpKind::DecodeBoxes,
        OpKind::BoxLoss,
        OpKind::BceLogits,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::AvgPool => "global_avg_pool",
            OpKind::MaxPool => "global_max_pool",
            OpKind::MedianPool => "global_median_pool",
            OpKind::Fft2 => "fft2",
            OpKind::Ifft2 => "ifft2",
            OpKind::ComplexPart => "complex_part",
            OpKind::ComplexPack => "complex_pack",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::Exp => "exp",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Concat => "concat_channels",
            OpKind::Slice => "slice_channels",
            OpKind::ChannelMean => "channel_mean",
            OpKind::ChannelMax => "channel_max",
            OpKind::Crop => "crop",
            OpKind::SymmetrizeBins => "symmetrize_bins",
            OpKind::SpaceToDepth => "space_to_depth",
            OpKind::DepthToSpace => "depth_to_space",
            OpKind::GatherCells => "gather_cells",
            OpKind::DecodeBoxes => "decode_boxes",
            OpKind::BoxLoss => "box_loss",
            OpKind::BceLogits => "bce_with_logits",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::DIFFERENTIABLE.into_iter().find(|k| k.name() == name)
    }
}

thread_local! {
    static MUTATED_RULE: Cell<Option<OpKind>> = const { Cell::new(None) };
}

/// Deliberately corrupts one backward rule on the current thread (its input
/// gradients are scaled by 1.5). Exists so the gradient-check suite can be
/// shown to catch a broken rule; pass `None` to restore.
pub fn set_backward_mutation(kind: Option<OpKind>) {
    MUTATED_RULE.with(|m| m.set(kind));
}

pub fn backward_mutation() -> Option<OpKind> {
    MUTATED_RULE.with(|m| m.get())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    Pool {
        x: Var,
        kind: PoolKind,
        sel: Vec<[usize; 2]>,
    },
    Fft2 {
        x: Var,
        h: usize,
        w: usize,
    },
    Ifft2 {
        z: Var,
    },
    ComplexPart {
        z: Var,
        imag: bool,
    },
    ComplexPack {
        re: Var,
        im: Var,
    },
    Binary {
        a: Var,
        b: Var,
        kind: BinaryKind,
    },
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        from: usize,
    },
    ChannelMean(Var),
    ChannelMax {
        x: Var,
        sel: Vec<usize>,
    },
    Crop(Var),
    SymmetrizeBins(Var),
    SpaceToDepth(Var),
    DepthToSpace(Var),
    GatherCells {
        x: Var,
        c0: usize,
        cells: Vec<[usize; 3]>,
    },
    DecodeBoxes {
        raw: Var,
        stride: f64,
    },
    BoxLoss {
        pred: Var,
        row_grads: Vec<[f64; 4]>,
    },
    BceLogits {
        logits: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Pool { kind, .. } => match kind {
                PoolKind::Average => OpKind::AvgPool,
                PoolKind::Max => OpKind::MaxPool,
                PoolKind::Median => OpKind::MedianPool,
            },
            Op::Fft2 { .. } => OpKind::Fft2,
            Op::Ifft2 { .. } => OpKind::Ifft2,
            Op::ComplexPart { .. } => OpKind::ComplexPart,
            Op::ComplexPack { .. } => OpKind::ComplexPack,
            Op::Binary { kind, .. } => match kind {
                BinaryKind::Add => OpKind::Add,
                BinaryKind::Sub => OpKind::Sub,
                BinaryKind::Mul => OpKind::Mul,
            },
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Relu(_) => OpKind::Relu,
            Op::Exp(_) => OpKind::Exp,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(_) => OpKind::AddScalar,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Concat(_) => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::ChannelMean(_) => OpKind::ChannelMean,
            Op::ChannelMax { .. } => OpKind::ChannelMax,
            Op::Crop(_) => OpKind::Crop,
            Op::SymmetrizeBins(_) => OpKind::SymmetrizeBins,
            Op::SpaceToDepth(_) => OpKind::SpaceToDepth,
            Op::DepthToSpace(_) => OpKind::DepthToSpace,
            Op::GatherCells { .. } => OpKind::GatherCells,
            Op::DecodeBoxes { .. } => OpKind::DecodeBoxes,
            Op::BoxLoss { .. } => OpKind::BoxLoss,
            Op::BceLogits { .. } => OpKind::BceLogits,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Pool { x, .. }
            | Op::Fft2 { x, .. }
            | Op::Slice { x, .. }
            | Op::ChannelMax { x, .. }
            | Op::GatherCells { x, .. } => vec![*x],
            Op::Ifft2 { z } | Op::ComplexPart { z, .. } => vec![*z],
            Op::ComplexPack { re, im } => vec![*re, *im],
            Op::Binary { a, b, .. } => vec![*a, *b],
            Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::ChannelMean(a)
            | Op::Crop(a)
            | Op::SymmetrizeBins(a)
            | Op::SpaceToDepth(a)
            | Op::DepthToSpace(a) => vec![*a],
            Op::Concat(parts) => parts.clone(),
            Op::DecodeBoxes { raw, .. } => vec![*raw],
            Op::BoxLoss { pred, .. } => vec![*pred],
            Op::BceLogits { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    id: u32,
    precision: Precision,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            precision,
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(TensorError::Detached(v.id));
        }
        Ok(&self.nodes[v.id])
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.check(v).expect("var from another tape");
        &self.nodes[v.id].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, mut value: Tensor, op: Op) -> Result<Var> {
        let kind = op.kind();
        self.precision.round_all(value.data_mut());
        if cfg!(debug_assertions) {
            if let Some(index) = value.data().iter().position(|v| !v.is_finite()) {
                return Err(TensorError::NonFiniteOutput {
                    op: kind.name(),
                    index,
                });
            }
        }
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.id].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            id: self.nodes.len() - 1,
            tape: self.id,
        })
    }

    fn leaf(&mut self, mut value: Tensor, requires_grad: bool) -> Var {
        self.precision.round_all(value.data_mut());
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            id: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    /// Records a tensor that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Records a tensor that is held fixed.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// First node (in recording order) holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op.kind().name()))
    }

    // ---- ops ------------------------------------------------------------

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.check(x)?.value.shape().to_vec();
        let ws = self.check(w)?.value.shape().to_vec();
        let bs = match b {
            Some(b) => Some(self.check(b)?.value.shape().to_vec()),
            None => None,
        };
        let geom = ConvGeometry::new(&xs, &ws, bs.as_deref(), stride, pad)?;
        let out = conv::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        self.push(
            Tensor::from_parts(geom.out_shape().to_vec(), out),
            Op::Conv2d { x, w, b, geom },
        )
    }

    pub fn global_pool(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let (out, sel) = pool::global_pool_with_indices(&self.check(x)?.value, kind)?;
        self.push(out, Op::Pool { x, kind, sel })
    }

    /// Forward 2-D DFT per (n, c) plane, zero-padded to power-of-two extents.
    pub fn fft2(&mut self, x: Var) -> Result<ComplexVar> {
        let grid = fft::fft2(&self.check(x)?.value)?;
        let (h, w) = {
            let s = self.shape(x);
            (s[2], s[3])
        };
        let packed = pack(&grid.real, &grid.imag);
        let z = self.push(packed, Op::Fft2 { x, h, w })?;
        self.unpack(z)
    }

    /// Inverse 2-D DFT with `1/(H·W)` normalization.
    pub fn ifft2(&mut self, grid: ComplexVar) -> Result<ComplexVar> {
        let z = self.complex_pack(grid)?;
        let zs = self.value(z);
        let (re, im) = unpack_values(zs);
        let out = fft::ifft2(&fft::ComplexGrid::new(re, im)?)?;
        let packed = pack(&out.real, &out.imag);
        let y = self.push(packed, Op::Ifft2 { z })?;
        self.unpack(y)
    }

    fn complex_pack(&mut self, grid: ComplexVar) -> Result<Var> {
        let re = &self.check(grid.real)?.value;
        let im = &self.check(grid.imag)?.value;
        if re.shape() != im.shape() {
            return shape_err(
                "complex_pack",
                format!("real shape {:?} != imag shape {:?}", re.shape(), im.shape()),
            );
        }
        let packed = pack(re, im);
        self.push(
            packed,
            Op::ComplexPack {
                re: grid.real,
                im: grid.imag,
            },
        )
    }

    fn unpack(&mut self, z: Var) -> Result<ComplexVar> {
        let (re, im) = unpack_values(self.value(z));
        let real = self.push(re, Op::ComplexPart { z, imag: false })?;
        let imag = self.push(im, Op::ComplexPart { z, imag: true })?;
        Ok(ComplexVar { real, imag })
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let av = &self.check(a)?.value;
        let bv = &self.check(b)?.value;
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        };
        let bc = Broadcast::new(av.shape(), bv.shape(), name)?;
        let (ad, bd) = (av.data(), bv.data());
        let mut out = vec![0.0; bc.len()];
        bc.for_each(|o, ia, ib| {
            out[o] = match kind {
                BinaryKind::Add => ad[ia] + bd[ib],
                BinaryKind::Sub => ad[ia] - bd[ib],
                BinaryKind::Mul => ad[ia] * bd[ib],
            }
        });
        self.push(Tensor::from_parts(bc.out.clone(), out), Op::Binary { a, b, kind })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    /// Elementwise product; an operand with extent 1 along an axis is
    /// broadcast along it.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.check(a)?.value.map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.check(a)?.value.map(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.check(a)?.value.map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.check(a)?.value.map(|v| v * factor);
        self.push(out, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Result<Var> {
        let out = self.check(a)?.value.map(|v| v + offset);
        self.push(out, Op::AddScalar(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.check(a)?.value.sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = &self.check(a)?.value;
        let s = v.sum() / v.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Concatenates N×Cᵢ×H×W parts along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        const OP: &str = "concat_channels";
        let Some(&first) = parts.first() else {
            return shape_err(OP, "empty part list");
        };
        let Some((n, _, h, w)) = self.check(first)?.value.dims4() else {
            return shape_err(OP, "parts must be N×C×H×W");
        };
        let mut cs = Vec::with_capacity(parts.len());
        for (i, &p) in parts.iter().enumerate() {
            match self.check(p)?.value.dims4() {
                Some((pn, pc, ph, pw)) if (pn, ph, pw) == (n, h, w) => cs.push(pc),
                _ => {
                    return shape_err(
                        OP,
                        format!(
                            "part {i} has shape {:?}, expected [{n}, *, {h}, {w}]",
                            self.shape(p)
                        ),
                    )
                }
            }
        }
        let c_total: usize = cs.iter().sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(n * c_total * plane);
        for ni in 0..n {
            for (&p, &c) in parts.iter().zip(&cs) {
                out.extend_from_slice(&self.value(p).data()[ni * c * plane..][..c * plane]);
            }
        }
        self.push(
            Tensor::from_parts(vec![n, c_total, h, w], out),
            Op::Concat(parts.to_vec()),
        )
    }

    /// Channels `[from, to)`.
    pub fn slice_channels(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        let Some((n, c, h, w)) = self.check(x)?.value.dims4() else {
            return shape_err("slice_channels", "input must be N×C×H×W");
        };
        if from >= to || to > c {
            return shape_err(
                "slice_channels",
                format!("range {from}..{to} out of bounds for {c} channels"),
            );
        }
        let plane = h * w;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * (to - from) * plane);
        for ni in 0..n {
            out.extend_from_slice(&src[(ni * c + from) * plane..(ni * c + to) * plane]);
        }
        self.push(
            Tensor::from_parts(vec![n, to - from, h, w], out),
            Op::Slice { x, from },
        )
    }

    /// Per-pixel mean over channels, `[N, 1, H, W]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let Some((n, c, h, w)) = self.check(x)?.value.dims4() else {
            return shape_err("channel_mean", "input must be N×C×H×W");
        };
        let plane = h * w;
        let src = self.value(x).data();
        let mut out = vec![0.0; n * plane];
        for ni in 0..n {
            let dst = &mut out[ni * plane..][..plane];
            for ci in 0..c {
                for (d, s) in dst.iter_mut().zip(&src[(ni * c + ci) * plane..][..plane]) {
                    *d += s;
                }
            }
            dst.iter_mut().for_each(|d| *d /= c as f64);
        }
        self.push(Tensor::from_parts(vec![n, 1, h, w], out), Op::ChannelMean(x))
    }

    /// Per-pixel max over channels, `[N, 1, H, W]`; the gradient goes to the
    /// lowest channel index attaining the max.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let Some((n, c, h, w)) = self.check(x)?.value.dims4() else {
            return shape_err("channel_max", "input must be N×C×H×W");
        };
        let plane = h * w;
        let src = self.value(x).data();
        let mut out = vec![0.0; n * plane];
        let mut sel = vec![0usize; n * plane];
        for ni in 0..n {
            for p in 0..plane {
                let mut best = 0;
                let mut bv = src[ni * c * plane + p];
                for ci in 1..c {
                    let v = src[(ni * c + ci) * plane + p];
                    if v > bv {
                        bv = v;
                        best = ci;
                    }
                }
                out[ni * plane + p] = bv;
                sel[ni * plane + p] = best;
            }
        }
        self.push(
            Tensor::from_parts(vec![n, 1, h, w], out),
            Op::ChannelMax { x, sel },
        )
    }

    /// Keeps the top-left `h × w` corner of every plane.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let Some((n, c, ph, pw)) = self.check(x)?.value.dims4() else {
            return shape_err("crop", "input must be N×C×H×W");
        };
        if h == 0 || w == 0 || h > ph || w > pw {
            return shape_err("crop", format!("cannot crop {ph}×{pw} to {h}×{w}"));
        }
        let out = fft::crop_planes(self.value(x).data(), n * c, ph, pw, h, w);
        self.push(Tensor::from_parts(vec![n, c, h, w], out), Op::Crop(x))
    }

    /// `½(W[u, v] + W[−u, −v])` per plane, indices taken modulo the plane
    /// size. Weights with this symmetry keep the spectrum of a real signal
    /// Hermitian, so the inverse transform stays real.
    pub fn symmetrize_bins(&mut self, x: Var) -> Result<Var> {
        let v = &self.check(x)?.value;
        let Some((n, c, h, w)) = v.dims4() else {
            return shape_err("symmetrize_bins", "input must be N×C×H×W");
        };
        let src = v.data();
        let mut out = vec![0.0; src.len()];
        for p in 0..n * c {
            let base = p * h * w;
            for u in 0..h {
                for q in 0..w {
                    let m = base + ((h - u) % h) * w + (w - q) % w;
                    out[base + u * w + q] = 0.5 * (src[base + u * w + q] + src[m]);
                }
            }
        }
        self.push(Tensor::from_parts(vec![n, c, h, w], out), Op::SymmetrizeBins(x))
    }

    /// Space-to-depth: `[N,C,H,W] → [N,4C,H/2,W/2]`, slices ordered
    /// (even row, even col), (odd row, even col), (even row, odd col),
    /// (odd row, odd col).
    pub fn space_to_depth(&mut self, x: Var) -> Result<Var> {
        let out = space_to_depth_values(&self.check(x)?.value)?;
        self.push(out, Op::SpaceToDepth(x))
    }

    pub fn depth_to_space(&mut self, x: Var) -> Result<Var> {
        let out = depth_to_space_values(&self.check(x)?.value)?;
        self.push(out, Op::DepthToSpace(x))
    }

    /// Gathers channels `[c0, c1)` at the given `(n, y, x)` cells into an
    /// `[M, c1 − c0]` matrix.
    pub fn gather_cells(&mut self, x: Var, c0: usize, c1: usize, cells: &[[usize; 3]]) -> Result<Var> {
        const OP: &str = "gather_cells";
        let Some((n, c, h, w)) = self.check(x)?.value.dims4() else {
            return shape_err(OP, "input must be N×C×H×W");
        };
        if cells.is_empty() || c0 >= c1 || c1 > c {
            return shape_err(OP, format!("bad gather: {} cells, channels {c0}..{c1} of {c}", cells.len()));
        }
        if let Some(bad) = cells.iter().find(|&&[ni, y, xx]| ni >= n || y >= h || xx >= w) {
            return shape_err(OP, format!("cell {bad:?} outside [{n}, {h}, {w}]"));
        }
        let src = self.value(x).data();
        let k = c1 - c0;
        let mut out = Vec::with_capacity(cells.len() * k);
        for &[ni, y, xx] in cells {
            for ci in c0..c1 {
                out.push(src[((ni * c + ci) * h + y) * w + xx]);
            }
        }
        self.push(
            Tensor::from_parts(vec![cells.len(), k], out),
            Op::GatherCells {
                x,
                c0,
                cells: cells.to_vec(),
            },
        )
    }

    /// Turns `[M, 4]` raw offsets `(tx, ty, tw, th)` into corner-form boxes:
    /// centre `anchor_centre + stride·t`, extent `anchor_size·exp(clamp(t, ±6))`.
    pub fn decode_boxes(
        &mut self,
        raw: Var,
        centers: &[[f64; 2]],
        stride: f64,
        anchor_size: f64,
    ) -> Result<Var> {
        let rv = &self.check(raw)?.value;
        if rv.shape() != [centers.len(), 4] {
            return shape_err(
                "decode_boxes",
                format!("raw shape {:?} != [{}, 4]", rv.shape(), centers.len()),
            );
        }
        let mut out = Vec::with_capacity(rv.len());
        for (row, c) in rv.data().chunks_exact(4).zip(centers) {
            let cx = c[0] + stride * row[0];
            let cy = c[1] + stride * row[1];
            let w = anchor_size * row[2].clamp(-DECODE_CLAMP, DECODE_CLAMP).exp();
            let h = anchor_size * row[3].clamp(-DECODE_CLAMP, DECODE_CLAMP).exp();
            out.extend([cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]);
        }
        self.push(
            Tensor::from_parts(vec![centers.len(), 4], out),
            Op::DecodeBoxes { raw, stride },
        )
    }

    /// Mean box-regression loss over `M` (prediction, target) pairs.
    pub fn box_loss(
        &mut self,
        pred: Var,
        targets: &[BBox],
        kind: BoxLossKind,
        params: FocalerParams,
    ) -> Result<Var> {
        let pv = &self.check(pred)?.value;
        if targets.is_empty() {
            return shape_err("box_loss", "no box pairs (M = 0)");
        }
        if pv.shape() != [targets.len(), 4] {
            return shape_err(
                "box_loss",
                format!("pred shape {:?} != [{}, 4]", pv.shape(), targets.len()),
            );
        }
        let m = targets.len() as f64;
        let mut total = 0.0;
        let mut row_grads = Vec::with_capacity(targets.len());
        for (row, gt) in pv.data().chunks_exact(4).zip(targets) {
            let (loss, grad) = boxes::loss_and_grad(kind, [row[0], row[1], row[2], row[3]], gt, params)
                .map_err(|e| TensorError::Invalid(format!("box_loss: {e}")))?;
            total += loss;
            row_grads.push(grad);
        }
        self.push(Tensor::scalar(total / m), Op::BoxLoss { pred, row_grads })
    }

    /// `Σ wᵢ · BCE(σ(logitᵢ), targetᵢ)` computed in the numerically stable
    /// logit form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
        let lv = &self.check(logits)?.value;
        if targets.len() != lv.len() || weights.len() != lv.len() {
            return shape_err(
                "bce_with_logits",
                format!(
                    "{} logits, {} targets, {} weights",
                    lv.len(),
                    targets.len(),
                    weights.len()
                ),
            );
        }
        let total: f64 = lv
            .data()
            .iter()
            .zip(targets)
            .zip(weights)
            .map(|((&l, &t), &w)| w * (l.max(0.0) - l * t + (-l.abs()).exp().ln_1p()))
            .sum();
        self.push(
            Tensor::scalar(total),
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
        )
    }

    // ---- backward ---------------------------------------------------------

    /// Populates gradients of `root` w.r.t. every recorded node.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rn = self.check(root)?;
        if rn.value.len() != 1 {
            return Err(TensorError::NonScalarRoot(rn.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.id] = Some(vec![1.0]);
        let mutated = backward_mutation();
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad && !matches!(node.op, Op::Leaf) {
                let mut contribs = self.node_backward(id, &g);
                if mutated == Some(node.op.kind()) {
                    for (_, c) in contribs.iter_mut() {
                        c.iter_mut().for_each(|v| *v *= 1.5);
                    }
                }
                for (input, c) in contribs {
                    if !self.nodes[input.id].requires_grad {
                        continue;
                    }
                    match &mut grads[input.id] {
                        Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(c),
                    }
                }
            }
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward root w.r.t. `v`; `None` when `v` did not
    /// influence the root or no backward pass has run.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.check(v).ok()?;
        let g = self.grads.get(v.id)?.as_ref()?;
        let mut t = Tensor::from_parts(self.nodes[v.id].value.shape().to_vec(), g.clone());
        self.precision.round_all(t.data_mut());
        Some(t)
    }

    /// Gradient, or zeros when `v` received none.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .unwrap_or_else(|| Tensor::zeros(self.value(v).shape().to_vec()))
    }

    fn node_backward(&self, id: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[id];
        let val = |v: Var| self.nodes[v.id].value.data();
        let needs = |v: Var| self.nodes[v.id].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, geom } => {
                let mut out = Vec::new();
                if needs(*x) {
                    out.push((*x, conv::conv2d_backward_input(g, val(*w), geom)));
                }
                if needs(*w) || b.is_some_and(needs) {
                    let (gw, gb) = conv::conv2d_backward_params(g, val(*x), geom);
                    out.push((*w, gw));
                    if let Some(b) = b {
                        out.push((*b, gb));
                    }
                }
                out
            }
            Op::Pool { x, kind, sel } => {
                let xs = &self.nodes[x.id].value;
                let plane = xs.shape()[2] * xs.shape()[3];
                let mut gx = vec![0.0; xs.len()];
                for (p, (&gp, s)) in g.iter().zip(sel).enumerate() {
                    let dst = &mut gx[p * plane..][..plane];
                    match kind {
                        PoolKind::Average => {
                            let v = gp / plane as f64;
                            dst.iter_mut().for_each(|d| *d = v);
                        }
                        PoolKind::Max => dst[s[0]] += gp,
                        PoolKind::Median => {
                            if s[0] == s[1] {
                                dst[s[0]] += gp;
                            } else {
                                dst[s[0]] += 0.5 * gp;
                                dst[s[1]] += 0.5 * gp;
                            }
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::Fft2 { x, h, w } => {
                // adjoint of the unnormalized DFT is its conjugate transpose,
                // i.e. (P·Q)·IDFT; only the real part reaches a real input.
                let (mut re, mut im) = split(g);
                let s = node.value.shape();
                let (ph, pw) = (s[2], s[3]);
                fft::fft2_planes(&mut re, &mut im, ph, pw, true);
                let scale = (ph * pw) as f64;
                re.iter_mut().for_each(|v| *v *= scale);
                let planes = s[0] * s[1];
                vec![(*x, fft::crop_planes(&re, planes, ph, pw, *h, *w))]
            }
            Op::Ifft2 { z } => {
                // adjoint of IDFT is DFT/(P·Q)
                let (mut re, mut im) = split(g);
                let s = node.value.shape();
                let (ph, pw) = (s[2], s[3]);
                fft::fft2_planes(&mut re, &mut im, ph, pw, false);
                let scale = 1.0 / (ph * pw) as f64;
                re.iter_mut().chain(im.iter_mut()).for_each(|v| *v *= scale);
                vec![(*z, interleave(&re, &im))]
            }
            Op::ComplexPart { z, imag } => {
                let mut gz = vec![0.0; g.len() * 2];
                let off = usize::from(*imag);
                for (i, &gv) in g.iter().enumerate() {
                    gz[2 * i + off] = gv;
                }
                vec![(*z, gz)]
            }
            Op::ComplexPack { re, im } => {
                let (gr, gi) = split(g);
                vec![(*re, gr), (*im, gi)]
            }
            Op::Binary { a, b, kind } => {
                let (av, bv) = (&self.nodes[a.id].value, &self.nodes[b.id].value);
                let bc = Broadcast::new(av.shape(), bv.shape(), "binary").expect("checked in forward");
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                let (ad, bd) = (av.data(), bv.data());
                bc.for_each(|o, ia, ib| match kind {
                    BinaryKind::Add => {
                        ga[ia] += g[o];
                        gb[ib] += g[o];
                    }
                    BinaryKind::Sub => {
                        ga[ia] += g[o];
                        gb[ib] -= g[o];
                    }
                    BinaryKind::Mul => {
                        ga[ia] += g[o] * bd[ib];
                        gb[ib] += g[o] * ad[ia];
                    }
                });
                vec![(*a, ga), (*b, gb)]
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                vec![(*a, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect())]
            }
            Op::Relu(a) => vec![(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            )],
            Op::Exp(a) => vec![(*a, g.iter().zip(node.value.data()).map(|(g, y)| g * y).collect())],
            Op::Scale(a, f) => vec![(*a, g.iter().map(|g| g * f).collect())],
            Op::AddScalar(a) => vec![(*a, g.to_vec())],
            Op::Sum(a) => vec![(*a, vec![g[0]; self.nodes[a.id].value.len()])],
            Op::Mean(a) => {
                let n = self.nodes[a.id].value.len();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::Concat(parts) => {
                let (n, _, h, w) = node.value.dims4().expect("rank 4");
                let plane = h * w;
                let mut out: Vec<(Var, Vec<f64>)> = parts
                    .iter()
                    .map(|&p| (p, Vec::with_capacity(self.nodes[p.id].value.len())))
                    .collect();
                let mut off = 0;
                for _ in 0..n {
                    for (p, buf) in out.iter_mut() {
                        let len = self.nodes[p.id].value.shape()[1] * plane;
                        buf.extend_from_slice(&g[off..off + len]);
                        off += len;
                    }
                }
                out
            }
            Op::Slice { x, from } => {
                let (n, c, h, w) = self.nodes[x.id].value.dims4().expect("rank 4");
                let k = node.value.shape()[1];
                let plane = h * w;
                let mut gx = vec![0.0; n * c * plane];
                for ni in 0..n {
                    gx[(ni * c + from) * plane..][..k * plane]
                        .copy_from_slice(&g[ni * k * plane..][..k * plane]);
                }
                vec![(*x, gx)]
            }
            Op::ChannelMean(x) => {
                let (n, c, h, w) = self.nodes[x.id].value.dims4().expect("rank 4");
                let plane = h * w;
                let mut gx = vec![0.0; n * c * plane];
                for ni in 0..n {
                    for ci in 0..c {
                        for p in 0..plane {
                            gx[(ni * c + ci) * plane + p] = g[ni * plane + p] / c as f64;
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::ChannelMax { x, sel } => {
                let (n, c, h, w) = self.nodes[x.id].value.dims4().expect("rank 4");
                let plane = h * w;
                let mut gx = vec![0.0; n * c * plane];
                for ni in 0..n {
                    for p in 0..plane {
                        gx[(ni * c + sel[ni * plane + p]) * plane + p] += g[ni * plane + p];
                    }
                }
                vec![(*x, gx)]
            }
            Op::Crop(x) => {
                let (n, c, ph, pw) = self.nodes[x.id].value.dims4().expect("rank 4");
                let (_, _, h, w) = node.value.dims4().expect("rank 4");
                vec![(*x, fft::pad_planes(g, n * c, h, w, ph, pw))]
            }
            Op::SymmetrizeBins(x) => {
                let (n, c, h, w) = node.value.dims4().expect("rank 4");
                let mut gx = vec![0.0; g.len()];
                for p in 0..n * c {
                    let base = p * h * w;
                    for u in 0..h {
                        for q in 0..w {
                            let m = base + ((h - u) % h) * w + (w - q) % w;
                            gx[base + u * w + q] += 0.5 * g[base + u * w + q];
                            gx[m] += 0.5 * g[base + u * w + q];
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::SpaceToDepth(x) => {
                let gt = Tensor::from_parts(node.value.shape().to_vec(), g.to_vec());
                vec![(*x, depth_to_space_values(&gt).expect("valid").into_data())]
            }
            Op::DepthToSpace(x) => {
                let gt = Tensor::from_parts(node.value.shape().to_vec(), g.to_vec());
                vec![(*x, space_to_depth_values(&gt).expect("valid").into_data())]
            }
            Op::GatherCells { x, c0, cells } => {
                let (_, c, h, w) = self.nodes[x.id].value.dims4().expect("rank 4");
                let k = node.value.shape()[1];
                let mut gx = vec![0.0; self.nodes[x.id].value.len()];
                for (row, &[ni, y, xx]) in cells.iter().enumerate() {
                    for j in 0..k {
                        gx[((ni * c + c0 + j) * h + y) * w + xx] += g[row * k + j];
                    }
                }
                vec![(*x, gx)]
            }
            Op::DecodeBoxes { raw, stride } => {
                let rv = val(*raw);
                let out = node.value.data();
                let mut gr = vec![0.0; rv.len()];
                for i in 0..rv.len() / 4 {
                    let (r, o, gg) = (&rv[4 * i..4 * i + 4], &out[4 * i..4 * i + 4], &g[4 * i..4 * i + 4]);
                    // x1 = cx − w/2, x2 = cx + w/2
                    gr[4 * i] = stride * (gg[0] + gg[2]);
                    gr[4 * i + 1] = stride * (gg[1] + gg[3]);
                    let w = o[2] - o[0];
                    let h = o[3] - o[1];
                    if r[2].abs() < DECODE_CLAMP {
                        gr[4 * i + 2] = 0.5 * w * (gg[2] - gg[0]);
                    }
                    if r[3].abs() < DECODE_CLAMP {
                        gr[4 * i + 3] = 0.5 * h * (gg[3] - gg[1]);
                    }
                }
                vec![(*raw, gr)]
            }
            Op::BoxLoss { pred, row_grads } => {
                let scale = g[0] / row_grads.len() as f64;
                vec![(
                    *pred,
                    row_grads.iter().flatten().map(|d| d * scale).collect(),
                )]
            }
            Op::BceLogits {
                logits,
                targets,
                weights,
            } => vec![(
                *logits,
                val(*logits)
                    .iter()
                    .zip(targets)
                    .zip(weights)
                    .map(|((&l, &t), &w)| g[0] * w * (sigmoid(l) - t))
                    .collect(),
            )],
        }
    }
}

const DECODE_CLAMP: f64 = 6.0;

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn pack(re: &Tensor, im: &Tensor) -> Tensor {
    let mut shape = re.shape().to_vec();
    shape.push(2);
    Tensor::from_parts(shape, interleave(re.data(), im.data()))
}

fn interleave(re: &[f64], im: &[f64]) -> Vec<f64> {
    re.iter().zip(im).flat_map(|(&r, &i)| [r, i]).collect()
}

fn split(z: &[f64]) -> (Vec<f64>, Vec<f64>) {
    z.chunks_exact(2).map(|c| (c[0], c[1])).unzip()
}

fn unpack_values(z: &Tensor) -> (Tensor, Tensor) {
    let shape = z.shape()[..z.rank() - 1].to_vec();
    let (re, im) = split(z.data());
    (Tensor::from_parts(shape.clone(), re), Tensor::from_parts(shape, im))
}

/// Value-level space-to-depth (see [`Tape::space_to_depth`]).
pub fn space_to_depth_values(x: &Tensor) -> Result<Tensor> {
    let Some((n, c, h, w)) = x.dims4() else {
        return shape_err("space_to_depth", format!("expected N×C×H×W, got {:?}", x.shape()));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return shape_err("space_to_depth", format!("spatial extents {h}×{w} must be even"));
    }
    let (h2, w2) = (h / 2, w / 2);
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    for ni in 0..n {
        for (dy, dx) in SPD_OFFSETS {
            for ci in 0..c {
                let plane = &src[(ni * c + ci) * h * w..][..h * w];
                for y in 0..h2 {
                    for xx in 0..w2 {
                        out.push(plane[(2 * y + dy) * w + 2 * xx + dx]);
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, 4 * c, h2, w2], out))
}

/// Row/column offsets of the four slices, in output channel-group order.
pub const SPD_OFFSETS: [(usize, usize); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];

/// Inverse of [`space_to_depth_values`].
pub fn depth_to_space_values(x: &Tensor) -> Result<Tensor> {
    let Some((n, c4, h2, w2)) = x.dims4() else {
        return shape_err("depth_to_space", format!("expected N×C×H×W, got {:?}", x.shape()));
    };
    if c4 % 4 != 0 {
        return shape_err("depth_to_space", format!("channel count {c4} not divisible by 4"));
    }
    let c = c4 / 4;
    let (h, w) = (2 * h2, 2 * w2);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for ni in 0..n {
        for (gi, (dy, dx)) in SPD_OFFSETS.into_iter().enumerate() {
            for ci in 0..c {
                let plane = &src[(ni * c4 + gi * c + ci) * h2 * w2..][..h2 * w2];
                let dst = (ni * c + ci) * h * w;
                for y in 0..h2 {
                    for xx in 0..w2 {
                        out[dst + (2 * y + dy) * w + 2 * xx + dx] = plane[y * w2 + xx];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, h, w], out))
}

/// Index mapping for a binary op where either operand may have extent 1
/// along any axis of equal rank.
struct Broadcast {
    out: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
    same: bool,
}

impl Broadcast {
    fn new(a: &[usize], b: &[usize], op: &'static str) -> Result<Self> {
        if a == b {
            return Ok(Broadcast {
                out: a.to_vec(),
                a_strides: vec![],
                b_strides: vec![],
                same: true,
            });
        }
        if a.len() != b.len() {
            return shape_err(op, format!("rank mismatch {a:?} vs {b:?}"));
        }
        let mut out = Vec::with_capacity(a.len());
        for (i, (&da, &db)) in a.iter().zip(b).enumerate() {
            if da != db && da != 1 && db != 1 {
                return shape_err(op, format!("axis {i}: {da} vs {db} cannot broadcast ({a:?} vs {b:?})"));
            }
            out.push(da.max(db));
        }
        let strides = |s: &[usize]| {
            let mut st = vec![0; s.len()];
            let mut acc = 1;
            for i in (0..s.len()).rev() {
                st[i] = if s[i] == 1 { 0 } else { acc };
                acc *= s[i];
            }
            st
        };
        Ok(Broadcast {
            a_strides: strides(a),
            b_strides: strides(b),
            out,
            same: false,
        })
    }

    fn len(&self) -> usize {
        self.out.iter().product()
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let total = self.len();
        if self.same {
            for i in 0..total {
                f(i, i, i);
            }
            return;
        }
        let rank = self.out.len();
        let inner = self.out[rank - 1];
        let (sa, sb) = (self.a_strides[rank - 1], self.b_strides[rank - 1]);
        let mut idx = vec![0usize; rank];
        let (mut ia, mut ib) = (0usize, 0usize);
        let mut o = 0;
        while o < total {
            for k in 0..inner {
                f(o + k, ia + k * sa, ib + k * sb);
            }
            o += inner;
            // advance the outer odometer
            let mut d = rank - 1;
            while d > 0 {
                d -= 1;
                idx[d] += 1;
                ia += self.a_strides[d];
                ib += self.b_strides[d];
                if idx[d] < self.out[d] {
                    break;
                }
                ia -= self.a_strides[d] * idx[d];
                ib -= self.b_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
    }
}
