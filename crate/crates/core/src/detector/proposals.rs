//! Proposal sources: jittered ground truth, or a light single-anchor RPN.

use rand::seq::index::sample;
use rand::Rng;
use seascn_tensor::{kernels, Graph, Scalar, Tensor, Var};

use crate::config::{ProposalConfig, ProposalMode};
use crate::error::Result;
use crate::fpn::{level_stride, PyramidVars};
use crate::geometry::{iou_box, BBox};
use crate::nn::Conv;
use crate::params::{Bound, Init, ParamStore};
use crate::supervision::{decode_deltas, encode_deltas};

use super::postprocess::nms_boxes;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub score: f64,
    pub source: ProposalMode,
}

/// Clips to the image and widens sub-pixel sides to one pixel.
pub fn sanitize_box(b: &BBox, width: usize, height: usize) -> BBox {
    let (wf, hf) = (width as f64, height as f64);
    let mut c = b.clip(wf, hf);
    if c.w < 1.0 {
        c.x = c.x.min(wf - 1.0);
        c.w = 1.0;
    }
    if c.h < 1.0 {
        c.y = c.y.min(hf - 1.0);
        c.h = 1.0;
    }
    c
}

fn symmetric<R: Rng>(rng: &mut R, amp: f64) -> f64 {
    if amp > 0.0 {
        rng.random_range(-amp..=amp)
    } else {
        0.0
    }
}

/// `per_gt` jittered copies of every ground-truth box (uniform center shift
/// up to `center_jitter` of each side, uniform relative size change up to
/// `size_jitter`) followed by `background` uniformly placed boxes.
pub fn gt_jitter_proposals<R: Rng>(
    gts: &[BBox],
    cfg: &ProposalConfig,
    height: usize,
    width: usize,
    rng: &mut R,
) -> Vec<Proposal> {
    let mut out = Vec::with_capacity(gts.len() * cfg.per_gt + cfg.background);
    for gt in gts {
        let (cx, cy) = gt.center();
        for _ in 0..cfg.per_gt {
            let nx = cx + symmetric(rng, cfg.center_jitter) * gt.w;
            let ny = cy + symmetric(rng, cfg.center_jitter) * gt.h;
            let nw = gt.w * (1.0 + symmetric(rng, cfg.size_jitter));
            let nh = gt.h * (1.0 + symmetric(rng, cfg.size_jitter));
            let b = BBox::new(nx - 0.5 * nw, ny - 0.5 * nh, nw, nh);
            out.push(Proposal {
                bbox: sanitize_box(&b, width, height),
                score: 1.0,
                source: ProposalMode::GtJitter,
            });
        }
    }
    let short = height.min(width) as f64;
    for _ in 0..cfg.background {
        let w = rng.random_range(0.05..0.5) * short;
        let h = rng.random_range(0.05..0.5) * short;
        let x = rng.random_range(0.0..(width as f64 - w));
        let y = rng.random_range(0.0..(height as f64 - h));
        out.push(Proposal {
            bbox: BBox::new(x, y, w, h),
            score: 0.0,
            source: ProposalMode::GtJitter,
        });
    }
    out
}

/// Levels the light RPN runs on.
pub const RPN_LEVELS: [usize; 3] = [3, 4, 5];

/// One square anchor per cell, centered on the cell, of side `scale * stride`.
pub fn anchors(level: usize, h: usize, w: usize, scale: f64) -> Vec<BBox> {
    let s = level_stride(level) as f64;
    let side = scale * s;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (cx, cy) = ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s);
            out.push(BBox::new(cx - 0.5 * side, cy - 0.5 * side, side, side));
        }
    }
    out
}

/// Graph outputs of [`RpnLite::forward`], all levels flattened in level then
/// row-major cell order.
#[derive(Clone, Debug)]
pub struct RpnOutputs {
    /// `[1, n, 1, 1]` objectness logits.
    pub objectness: Var,
    /// `[1, 4n, 1, 1]`; anchor `a` at level block `(off, hw)` has delta `k`
    /// at `4 * off + k * hw + (a - off)`.
    pub deltas: Var,
    pub anchors: Vec<BBox>,
    /// `(first anchor index, cells)` per level.
    pub blocks: Vec<(usize, usize)>,
}

impl RpnOutputs {
    fn delta_index(&self, a: usize, k: usize) -> usize {
        let &(off, hw) = self
            .blocks
            .iter()
            .find(|&&(off, hw)| a >= off && a < off + hw)
            .expect("anchor in some block");
        4 * off + k * hw + (a - off)
    }
}

/// Shared 3x3 conv with objectness and box-delta 1x1 outputs over P3..P5.
#[derive(Clone, Debug)]
pub struct RpnLite {
    conv: Conv,
    objectness: Conv,
    deltas: Conv,
    anchor_scale: f64,
}

impl RpnLite {
    pub fn new(channels: usize, anchor_scale: f64) -> Self {
        Self {
            conv: Conv::new("rpn.conv", channels, channels, 3, 1),
            objectness: Conv::new("rpn.objectness", channels, 1, 1, 1),
            deltas: Conv::new("rpn.deltas", channels, 4, 1, 1),
            anchor_scale,
        }
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.conv.init(store, rng, Init::He);
        self.objectness.init(store, rng, Init::Normal(0.01));
        self.deltas.init(store, rng, Init::Normal(0.001));
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, pyramid: &PyramidVars) -> RpnOutputs {
        let mut objs = Vec::new();
        let mut dels = Vec::new();
        let mut all_anchors = Vec::new();
        let mut blocks = Vec::new();
        for level in RPN_LEVELS {
            let x = pyramid.level(level);
            let (_, _, h, w) = g.value(x).dims4().expect("rank 4");
            let hid = self.conv.forward_relu(g, p, x);
            let o = self.objectness.forward(g, p, hid);
            let d = self.deltas.forward(g, p, hid);
            objs.push(g.reshape(o, &[1, h * w, 1, 1]));
            dels.push(g.reshape(d, &[1, 4 * h * w, 1, 1]));
            blocks.push((all_anchors.len(), h * w));
            all_anchors.extend(anchors(level, h, w, self.anchor_scale));
        }
        RpnOutputs {
            objectness: g.concat_channels(&objs),
            deltas: g.concat_channels(&dels),
            anchors: all_anchors,
            blocks,
        }
    }

    /// Decoded, clipped boxes: top 2000 by objectness, NMS, then top `top_k`.
    pub fn propose<T: Scalar>(
        &self,
        g: &Graph<T>,
        out: &RpnOutputs,
        cfg: &ProposalConfig,
        height: usize,
        width: usize,
    ) -> Vec<Proposal> {
        let obj = g.value(out.objectness).data();
        let del = g.value(out.deltas).data();
        let scores: Vec<f64> = obj.iter().map(|&z| kernels::sigmoid(z).as_f64()).collect();
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        order.truncate(2000);
        let mut boxes = Vec::with_capacity(order.len());
        let mut kept_scores = Vec::with_capacity(order.len());
        for &a in &order {
            let d = [0, 1, 2, 3].map(|k| del[out.delta_index(a, k)].as_f64());
            let b = decode_deltas(&out.anchors[a], &d);
            if !b.is_finite() {
                continue;
            }
            boxes.push(sanitize_box(&b, width, height));
            kept_scores.push(scores[a]);
        }
        let mut keep = nms_boxes(&boxes, &kept_scores, cfg.rpn_nms);
        keep.truncate(cfg.rpn_top_k);
        keep.into_iter()
            .map(|i| Proposal {
                bbox: boxes[i],
                score: kept_scores[i],
                source: ProposalMode::RpnLite,
            })
            .collect()
    }

    /// Objectness BCE over up to 256 sampled anchors (at most half positive)
    /// plus smooth-L1 on positive anchor deltas, normalized by the sample
    /// count. Positives: IoU >= 0.5 with some gt, or the best anchor of a gt;
    /// negatives: IoU < 0.3.
    pub fn loss<T: Scalar, R: Rng>(&self, g: &mut Graph<T>, out: &RpnOutputs, gts: &[BBox], rng: &mut R) -> Result<Var> {
        let n = out.anchors.len();
        let mut best = vec![(0.0f64, usize::MAX); n];
        let mut gt_best = vec![(0.0f64, usize::MAX); gts.len()];
        for (a, anc) in out.anchors.iter().enumerate() {
            for (j, gt) in gts.iter().enumerate() {
                let v = iou_box(anc, gt);
                if v > best[a].0 {
                    best[a] = (v, j);
                }
                if v > gt_best[j].0 {
                    gt_best[j] = (v, a);
                }
            }
        }
        let mut pos: Vec<usize> = (0..n).filter(|&a| best[a].0 >= 0.5).collect();
        for (j, &(v, a)) in gt_best.iter().enumerate() {
            if v > 0.0 && !pos.contains(&a) {
                pos.push(a);
                best[a] = (v, j);
            }
        }
        pos.sort_unstable();
        let neg: Vec<usize> = (0..n).filter(|&a| best[a].0 < 0.3 && !pos.contains(&a)).collect();
        let n_pos = pos.len().min(128);
        let pos: Vec<usize> = sample(rng, pos.len(), n_pos).into_iter().map(|i| pos[i]).collect();
        let n_neg = neg.len().min(256 - n_pos);
        let neg: Vec<usize> = sample(rng, neg.len(), n_neg).into_iter().map(|i| neg[i]).collect();
        let total = pos.len() + neg.len();
        if total == 0 {
            return Ok(g.constant(Tensor::scalar(T::zero())));
        }
        let idx: Vec<usize> = pos.iter().chain(&neg).copied().collect();
        let logits = g.gather(out.objectness, idx, &[total]);
        let labels = Tensor::from_fn(&[total], |i| if i < pos.len() { T::one() } else { T::zero() });
        let cls = g.bce_with_logits(logits, &labels);
        if pos.is_empty() {
            return Ok(cls);
        }
        let mut didx = Vec::with_capacity(4 * pos.len());
        let mut dtgt = Vec::with_capacity(4 * pos.len());
        for &a in &pos {
            let t = encode_deltas(&out.anchors[a], &gts[best[a].1]);
            for (k, &tk) in t.iter().enumerate() {
                didx.push(out.delta_index(a, k));
                dtgt.push(T::lit(tk));
            }
        }
        let d = g.gather(out.deltas, didx, &[4 * pos.len()]);
        let tgt = Tensor::from_vec(&[4 * pos.len()], dtgt)?;
        let reg = g.smooth_l1(d, &tgt, T::one());
        let reg = g.scale(reg, T::lit(1.0 / total as f64));
        Ok(g.add(cls, reg))
    }
}
