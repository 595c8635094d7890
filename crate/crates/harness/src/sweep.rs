//! Box-loss values along a one-parameter family of box pairs.

use std::path::Path;

use serde::Serialize;
use smalldet_core::boxes::{focaler_iou_loss, focaler_map, focaler_siou_loss, iou, siou_loss};
use smalldet_core::{BBox, FocalerParams};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub iou: f64,
    pub focaler: f64,
    pub focaler_iou: f64,
    pub siou: f64,
    pub focaler_siou: f64,
}

/// Unit square target and a copy shifted right by `t = (1 − r)/(1 + r)`,
/// which has IoU `r`, for `r` on an even grid of `steps + 1` points in
/// `[0, 1]`. Columns are computed from the realized IoU.
pub fn sweep(params: FocalerParams, steps: usize) -> Result<Vec<SweepRow>> {
    let gt = BBox::new(0.0, 0.0, 1.0, 1.0)?;
    (0..=steps)
        .map(|i| {
            let r = i as f64 / steps as f64;
            let t = (1.0 - r) / (1.0 + r);
            let pred = gt.translated(t, 0.0)?;
            let v = iou(&pred, &gt);
            Ok(SweepRow {
                iou: v,
                focaler: focaler_map(v, params),
                focaler_iou: focaler_iou_loss(&pred, &gt, params),
                siou: siou_loss(&pred, &gt)?.0,
                focaler_siou: focaler_siou_loss(&pred, &gt, params)?,
            })
        })
        .collect()
}

pub fn write_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let io = |e: csv::Error| HarnessError::format(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn realized_iou_tracks_grid() {
        let rows = sweep(FocalerParams::default(), 100).unwrap();
        assert_eq!(rows.len(), 101);
        for (i, r) in rows.iter().enumerate() {
            assert!((r.iou - i as f64 / 100.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_interval_copies_iou() {
        let p = FocalerParams::new(0.0, 1.0).unwrap();
        for r in sweep(p, 50).unwrap() {
            assert_eq!(r.focaler, r.iou);
            assert_eq!(r.focaler_siou, r.siou);
        }
    }
}
