//! Pyramid-level assignment and multi-level RoI-Align.

use seascn_tensor::kernels::RoiPlan;
use seascn_tensor::{Graph, Scalar, Tensor, Var};

use crate::error::{Error, Result};
use crate::fpn::{level_stride, PyramidVars};
use crate::geometry::BBox;

/// `clamp(floor(4 + log2(sqrt(w * h) / 224)), 2, 5)`.
pub fn assign_level(b: &BBox) -> usize {
    let s = (b.w * b.h).max(0.0).sqrt();
    if s <= 0.0 {
        return 2;
    }
    let k = (4.0 + (s / 224.0).log2()).floor();
    k.clamp(2.0, 5.0) as usize
}

fn check_box(b: &BBox) -> Result<()> {
    if !(b.w > 0.0 && b.h > 0.0) || !b.is_finite() {
        return Err(Error::DegenerateBox { w: b.w, h: b.h });
    }
    Ok(())
}

/// RoI-Align of a single `[1, c, h, w]` feature map, outside any graph.
pub fn roi_align<T: Scalar>(feature: &Tensor<T>, b: &BBox, stride: usize, out: usize, sampling: usize) -> Result<Tensor<T>> {
    check_box(b)?;
    let (_, _, h, w) = feature.dims4()?;
    let plan = RoiPlan::new(&[b.to_roi()], h, w, stride as f64, out, sampling);
    Ok(plan.forward(feature))
}

/// Pools every box from its assigned pyramid level into `[n, c, out, out]`,
/// in input order.
pub fn multi_level_roi_align<T: Scalar>(
    g: &mut Graph<T>,
    pyramid: &PyramidVars,
    boxes: &[BBox],
    out: usize,
    sampling: usize,
) -> Result<Var> {
    for b in boxes {
        check_box(b)?;
    }
    let c = g.shape(pyramid.level(2))[1];
    if boxes.is_empty() {
        return Ok(g.constant(Tensor::zeros(&[0, c, out, out])));
    }
    let levels: Vec<usize> = boxes.iter().map(assign_level).collect();
    let mut parts = Vec::new();
    let mut order = Vec::with_capacity(boxes.len());
    for level in 2..=5 {
        let idx: Vec<usize> = (0..boxes.len()).filter(|&i| levels[i] == level).collect();
        if idx.is_empty() {
            continue;
        }
        let rois: Vec<_> = idx.iter().map(|&i| boxes[i].to_roi()).collect();
        let pooled = g.roi_align(pyramid.level(level), &rois, level_stride(level) as f64, out, sampling);
        parts.push(g.reshape(pooled, &[1, idx.len() * c, out, out]));
        order.extend(idx);
    }
    let n = boxes.len();
    let cat = if parts.len() == 1 {
        parts[0]
    } else {
        g.concat_channels(&parts)
    };
    let stacked = g.reshape(cat, &[n, c, out, out]);
    if order.iter().enumerate().all(|(i, &o)| i == o) {
        return Ok(stacked);
    }
    // row `order[k]` of the output is row `k` of `stacked`
    let mut src_row = vec![0; n];
    for (k, &o) in order.iter().enumerate() {
        src_row[o] = k;
    }
    let block = c * out * out;
    let idx: Vec<usize> = src_row.iter().flat_map(|&s| (0..block).map(move |j| s * block + j)).collect();
    Ok(g.gather(stacked, idx, &[n, c, out, out]))
}
