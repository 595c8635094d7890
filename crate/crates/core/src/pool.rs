//! Global spatial pooling over each (n, c) plane.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolKind {
    Average,
    Max,
    Median,
}

impl PoolKind {
    pub fn name(self) -> &'static str {
        match self {
            PoolKind::Average => "global_avg_pool",
            PoolKind::Max => "global_max_pool",
            PoolKind::Median => "global_median_pool",
        }
    }
}

/// Median of a plane together with the order-statistic positions it was
/// read from. Even counts average the two middle statistics.
///
/// Ties are ordered by position (stable sort), so the selected indices are
/// deterministic.
pub fn plane_median(plane: &[f64]) -> (f64, [usize; 2], usize) {
    let mut idx: Vec<usize> = (0..plane.len()).collect();
    idx.sort_by(|&a, &b| plane[a].total_cmp(&plane[b]));
    let n = plane.len();
    if n % 2 == 1 {
        let i = idx[n / 2];
        (plane[i], [i, i], 1)
    } else {
        let (a, b) = (idx[n / 2 - 1], idx[n / 2]);
        ((plane[a] + plane[b]) * 0.5, [a, b], 2)
    }
}

/// First position of the maximum in row-major order.
pub fn plane_argmax(plane: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in plane.iter().enumerate().skip(1) {
        if v > plane[best] {
            best = i;
        }
    }
    best
}

/// Pools every plane. Returns the `[N, C, 1, 1]` values and, for max and
/// median, the per-plane contributing indices used by the backward pass.
pub fn global_pool_with_indices(
    input: &Tensor,
    kind: PoolKind,
) -> Result<(Tensor, Vec<[usize; 2]>)> {
    let Some((n, c, h, w)) = input.dims4() else {
        return shape_err(kind.name(), format!("expected N×C×H×W, got {:?}", input.shape()));
    };
    let plane = h * w;
    if plane == 0 {
        return shape_err(kind.name(), "empty spatial plane");
    }
    let mut out = Vec::with_capacity(n * c);
    let mut sel = Vec::with_capacity(n * c);
    for p in input.data().chunks_exact(plane) {
        match kind {
            PoolKind::Average => {
                out.push(p.iter().sum::<f64>() / plane as f64);
                sel.push([0, 0]);
            }
            PoolKind::Max => {
                let i = plane_argmax(p);
                out.push(p[i]);
                sel.push([i, i]);
            }
            PoolKind::Median => {
                let (m, s, _) = plane_median(p);
                out.push(m);
                sel.push(s);
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, 1, 1], out), sel))
}

pub fn global_pool(input: &Tensor, kind: PoolKind) -> Result<Tensor> {
    global_pool_with_indices(input, kind).map(|(t, _)| t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane(v: &[f64]) -> Tensor {
        Tensor::new([1, 1, 1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn four_values() {
        let x = plane(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(global_pool(&x, PoolKind::Median).unwrap().data(), &[2.5]);
        assert_eq!(global_pool(&x, PoolKind::Average).unwrap().data(), &[2.5]);
        assert_eq!(global_pool(&x, PoolKind::Max).unwrap().data(), &[4.0]);
    }

    #[test]
    fn constant_plane() {
        let x = Tensor::full([1, 1, 3, 3], 7.0);
        for k in [PoolKind::Average, PoolKind::Max, PoolKind::Median] {
            assert_eq!(global_pool(&x, k).unwrap().data(), &[7.0]);
        }
    }

    #[test]
    fn odd_median() {
        assert_eq!(global_pool(&plane(&[5.0, 1.0, 9.0]), PoolKind::Median).unwrap().data(), &[5.0]);
    }

    #[test]
    fn first_max_wins() {
        assert_eq!(plane_argmax(&[1.0, 3.0, 2.0, 3.0]), 1);
    }

    #[test]
    fn rejects_non_rank4() {
        let x = Tensor::zeros([4]);
        assert!(global_pool(&x, PoolKind::Max).is_err());
    }
}
