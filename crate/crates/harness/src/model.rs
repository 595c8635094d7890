//! The toy dense detector: stem, two detail-focus blocks, a space-to-depth
//! downsample, the frequency-fusion block and a 1×1 head on the H/2 grid.

use smalldet_core::neck::{mfff_forward, spdcconv_forward, MFFFParams, SPDCConvParams};
use smalldet_core::padf::{padf_forward, pconv_forward, PADFBlockParams};
use smalldet_core::param_tree;
use smalldet_core::params::{bind_frozen, kaiming_uniform, ParamTree, UniformSource};
use smalldet_core::pool::PoolKind;
use smalldet_core::{BBox, BoxLossKind, FocalerParams, Precision, Tape, Tensor, Var};

use crate::config::ModelConfig;
use crate::dataset::Dataset;
use crate::error::Result;

/// Grid cell side in input pixels.
pub const STRIDE: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModelParams<T = Tensor> {
    pub config: ModelConfig,
    pub stem_w: T,
    pub stem_b: T,
    pub padf1: PADFBlockParams<T>,
    pub padf2: PADFBlockParams<T>,
    pub spdc: SPDCConvParams<T>,
    pub mfff: MFFFParams<T>,
    pub head_w: T,
    pub head_b: T,
}

param_tree!(ToyModelParams {
    leaves: [stem_w, stem_b, head_w, head_b],
    optional: [],
    nested: [padf1, padf2, spdc, mfff],
    plain: [config],
});

impl ToyModelParams {
    pub fn init(config: ModelConfig, rng: UniformSource<'_>) -> Result<Self> {
        let (c0, c1) = (config.c0, config.c1);
        let g = config.grid();
        Ok(ToyModelParams {
            config,
            stem_w: kaiming_uniform([c0, 1, 3, 3], rng),
            stem_b: Tensor::zeros([c0]),
            padf1: PADFBlockParams::init(c0, rng)?,
            padf2: PADFBlockParams::init(c0, rng)?,
            spdc: SPDCConvParams::init(c0, c1, rng),
            mfff: MFFFParams::init(c1, g, g, rng)?,
            head_w: kaiming_uniform([config.head_channels(), c1, 1, 1], rng),
            head_b: Tensor::zeros([config.head_channels()]),
        })
    }

    /// Negates the reduce row of every squeeze–excite hidden unit whose
    /// pre-activation is ≤ 0 for every image of `x`; with a zero reduce bias
    /// the flipped unit is active on those images. Gates are probed in
    /// forward order so later probes see earlier flips. Returns the number
    /// of rows flipped.
    pub fn revive_gates(&mut self, x: &Tensor, precision: Precision) -> Result<usize> {
        let mut flipped = 0;
        for gate in 0..3 {
            let mut tape = Tape::new(precision);
            let b = bind_frozen(self, &mut tape);
            let xv = tape.constant(x.clone());
            let h = tape.conv2d(xv, b.stem_w, Some(b.stem_b), 1, 1)?;
            let h = tape.relu(h)?;
            let (pooled, reduce_w, reduce_b) = match gate {
                0 => {
                    let y = pconv_forward(&mut tape, h, &b.padf1.pconv)?;
                    (tape.global_pool(y, PoolKind::Average)?, b.padf1.pat_ch.reduce_w, b.padf1.pat_ch.reduce_b)
                }
                1 => {
                    let h = padf_forward(&mut tape, h, &b.padf1)?;
                    let y = pconv_forward(&mut tape, h, &b.padf2.pconv)?;
                    (tape.global_pool(y, PoolKind::Average)?, b.padf2.pat_ch.reduce_w, b.padf2.pat_ch.reduce_b)
                }
                _ => {
                    let h = padf_forward(&mut tape, h, &b.padf1)?;
                    let h = padf_forward(&mut tape, h, &b.padf2)?;
                    let h = spdcconv_forward(&mut tape, h, &b.spdc)?;
                    let h = tape.relu(h)?;
                    let mut s = tape.global_pool(h, PoolKind::Average)?;
                    for kind in [PoolKind::Max, PoolKind::Median] {
                        let p = tape.global_pool(h, kind)?;
                        s = tape.add(s, p)?;
                    }
                    (s, b.mfff.pool_reduce_w, b.mfff.pool_reduce_b)
                }
            };
            let pre = tape.conv2d(pooled, reduce_w, Some(reduce_b), 1, 0)?;
            let pre = tape.value(pre);
            let (n, hidden) = (pre.shape()[0], pre.shape()[1]);
            let rows = match gate {
                0 => &mut self.padf1.pat_ch.reduce_w,
                1 => &mut self.padf2.pat_ch.reduce_w,
                _ => &mut self.mfff.pool_reduce_w,
            };
            let width = rows.len() / hidden;
            for j in 0..hidden {
                if (0..n).all(|i| pre.data()[i * hidden + j] <= 0.0) {
                    for v in &mut rows.data_mut()[j * width..(j + 1) * width] {
                        *v = -*v;
                    }
                    flipped += 1;
                }
            }
        }
        Ok(flipped)
    }

    /// Leaves in traversal order.
    pub fn tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit(&mut |t| out.push(t.clone()));
        out
    }

    /// Same structure with leaves replaced, in traversal order.
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Self {
        let mut it = tensors.into_iter();
        let p = self.map("", &mut |_, _| it.next().expect("one tensor per leaf"));
        assert!(it.next().is_none(), "more tensors than leaves");
        p
    }
}

/// `[N, 1, H, W]` → `[N, 4 + K + 1, H/2, W/2]`: box offsets, class logits,
/// objectness logit.
pub fn forward(tape: &mut Tape, x: Var, p: &ToyModelParams<Var>) -> Result<Var> {
    let h = tape.conv2d(x, p.stem_w, Some(p.stem_b), 1, 1)?;
    let h = tape.relu(h)?;
    let h = padf_forward(tape, h, &p.padf1)?;
    let h = padf_forward(tape, h, &p.padf2)?;
    let h = spdcconv_forward(tape, h, &p.spdc)?;
    let h = tape.relu(h)?;
    let h = mfff_forward(tape, h, &p.mfff)?;
    Ok(tape.conv2d(h, p.head_w, Some(p.head_b), 1, 0)?)
}

/// Centre of grid cell `(gy, gx)` in pixel coordinates.
pub fn cell_center(gy: usize, gx: usize) -> [f64; 2] {
    [
        STRIDE as f64 * (gx as f64 + 0.5),
        STRIDE as f64 * (gy as f64 + 0.5),
    ]
}

/// One positive cell: the cell containing an object's centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Positive {
    /// `(n, gy, gx)` within the batch.
    pub cell: [usize; 3],
    pub class_id: usize,
    pub bbox: BBox,
}

pub fn assign_positives(data: &Dataset, indices: &[usize], grid: usize) -> Vec<Positive> {
    let mut out = Vec::new();
    for (n, &i) in indices.iter().enumerate() {
        for o in &data.samples[i].objects {
            let bbox = BBox::from_array(o.bbox).expect("annotation boxes are valid");
            let (cx, cy) = bbox.center();
            let gx = ((cx / STRIDE as f64) as usize).min(grid - 1);
            let gy = ((cy / STRIDE as f64) as usize).min(grid - 1);
            out.push(Positive {
                cell: [n, gy, gx],
                class_id: o.class_id,
                bbox,
            });
        }
    }
    out
}

/// Loss settings shared by training and loss-only evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossSpec {
    pub kind: BoxLossKind,
    pub focaler: FocalerParams,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub objectness: f64,
    pub class: f64,
    pub bbox: f64,
}

/// Objectness BCE (positives and negatives each averaged), class BCE over
/// positive cells and the selected box loss over positive cells.
pub fn detection_loss(
    tape: &mut Tape,
    out: Var,
    positives: &[Positive],
    config: &ModelConfig,
    loss: LossSpec,
) -> Result<(Var, LossParts)> {
    let k = config.num_classes;
    let [n, _, g, _] = *tape.shape(out) else {
        unreachable!("head output is rank 4")
    };
    let m = positives.len();
    let total = n * g * g;
    let mut obj_t = vec![0.0; total];
    for p in positives {
        let [ni, y, x] = p.cell;
        obj_t[(ni * g + y) * g + x] = 1.0;
    }
    // two objects can share a cell only in hand-built data
    let n_pos = obj_t.iter().filter(|&&t| t == 1.0).count();
    let n_neg = total - n_pos;
    let obj_w: Vec<f64> = obj_t
        .iter()
        .map(|&t| {
            if t == 1.0 {
                1.0 / n_pos as f64
            } else {
                1.0 / n_neg.max(1) as f64
            }
        })
        .collect();
    let obj_logits = tape.slice_channels(out, 4 + k, 5 + k)?;
    let obj = tape.bce_with_logits(obj_logits, &obj_t, &obj_w)?;

    let cells: Vec<[usize; 3]> = positives.iter().map(|p| p.cell).collect();
    let cls_logits = tape.gather_cells(out, 4, 4 + k, &cells)?;
    let mut cls_t = vec![0.0; m * k];
    for (i, p) in positives.iter().enumerate() {
        cls_t[i * k + p.class_id] = 1.0;
    }
    let cls = tape.bce_with_logits(cls_logits, &cls_t, &vec![1.0 / m as f64; m * k])?;

    let raw = tape.gather_cells(out, 0, 4, &cells)?;
    let centers: Vec<[f64; 2]> = cells.iter().map(|&[_, y, x]| cell_center(y, x)).collect();
    let boxes = tape.decode_boxes(raw, &centers, STRIDE as f64, config.anchor)?;
    let targets: Vec<BBox> = positives.iter().map(|p| p.bbox).collect();
    let bbox = tape.box_loss(boxes, &targets, loss.kind, loss.focaler)?;

    let parts = LossParts {
        objectness: tape.value(obj).data()[0],
        class: tape.value(cls).data()[0],
        bbox: tape.value(bbox).data()[0],
    };
    let s = tape.add(obj, cls)?;
    Ok((tape.add(s, bbox)?, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;
    use smalldet_core::params::bind;
    use smalldet_core::Precision;

    fn small() -> ToyModelParams {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
        let cfg = ModelConfig::new(2, 32);
        ToyModelParams::init(cfg, &mut || rng.random::<f64>()).unwrap()
    }

    #[test]
    fn head_shape() {
        let p = small();
        let mut t = Tape::new(Precision::Double);
        let b = bind(&p, &mut t);
        let x = t.constant(Tensor::full([2, 1, 32, 32], 0.1));
        let y = forward(&mut t, x, &b).unwrap();
        assert_eq!(t.shape(y), &[2, 7, 16, 16]);
    }

    #[test]
    fn tensors_round_trip() {
        let p = small();
        let q = p.with_tensors(p.tensors());
        assert_eq!(p, q);
        let names: Vec<String> = p.named("").into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "stem_w");
        assert!(names.iter().any(|n| n == "padf1.pconv.kernel"));
        assert!(names.iter().any(|n| n == "mfff.fsam_freq"));
    }

    #[test]
    fn revived_gates_stay_revived() {
        let mut p = small();
        let x = Tensor::new([2, 1, 32, 32], (0..2048).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        p.revive_gates(&x, Precision::Double).unwrap();
        assert_eq!(p.revive_gates(&x, Precision::Double).unwrap(), 0);
    }

    #[test]
    fn centre_cell_assignment() {
        assert_eq!(cell_center(0, 0), [1.0, 1.0]);
        assert_eq!(cell_center(3, 5), [11.0, 7.0]);
    }
}
