//! Non-maximum suppression, top-k selection and mask pasting.

use crate::geometry::{iou_box, BBox};
use crate::mask::BinaryMask;

/// A scored, classified box before mask prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub bbox: BBox,
    pub score: f64,
    pub class_id: usize,
}

/// Indices sorted by descending score; ties keep input order.
fn by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Class-agnostic greedy NMS. Returns kept indices by descending score.
pub fn nms_boxes(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for i in by_score(scores) {
        if kept.iter().all(|&k| iou_box(&boxes[k], &boxes[i]) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}

/// Class-wise greedy NMS: a box is suppressed only by a kept box of the same
/// class with IoU above the threshold. Returns kept indices by descending score.
pub fn nms(cands: &[Candidate], iou_threshold: f64) -> Vec<usize> {
    let scores: Vec<f64> = cands.iter().map(|c| c.score).collect();
    let mut kept: Vec<usize> = Vec::new();
    for i in by_score(&scores) {
        let c = &cands[i];
        let clash = kept.iter().any(|&k| {
            let o = &cands[k];
            o.class_id == c.class_id && iou_box(&o.bbox, &c.bbox) > iou_threshold
        });
        if !clash {
            kept.push(i);
        }
    }
    kept
}

/// NMS then the `max_dets` highest-scoring survivors.
pub fn select_detections(cands: &[Candidate], iou_threshold: f64, max_dets: usize) -> Vec<Candidate> {
    let mut kept = nms(cands, iou_threshold);
    kept.truncate(max_dets);
    kept.into_iter().map(|i| cands[i]).collect()
}

/// Resamples a `side x side` probability map onto the image pixels whose
/// centers fall inside `bbox`, bilinearly with half-pixel centers, and keeps
/// pixels at or above `threshold`. Pixels outside the box stay zero.
pub fn paste_mask(probs: &[f64], side: usize, bbox: &BBox, height: usize, width: usize, threshold: f64) -> BinaryMask {
    assert_eq!(probs.len(), side * side, "paste_mask: probability map size");
    let mut out = BinaryMask::zeros(height, width);
    if !(bbox.w > 0.0 && bbox.h > 0.0) {
        return out;
    }
    let x_lo = (bbox.x - 0.5).ceil().max(0.0) as usize;
    let y_lo = (bbox.y - 0.5).ceil().max(0.0) as usize;
    let x_hi = ((bbox.x1() - 0.5).ceil().max(0.0) as usize).min(width);
    let y_hi = ((bbox.y1() - 0.5).ceil().max(0.0) as usize).min(height);
    let s = side as f64;
    let sample = |v: f64, u: f64| -> f64 {
        let v = v.clamp(0.0, s - 1.0);
        let u = u.clamp(0.0, s - 1.0);
        let (v0, u0) = (v.floor() as usize, u.floor() as usize);
        let (v1, u1) = ((v0 + 1).min(side - 1), (u0 + 1).min(side - 1));
        let (lv, lu) = (v - v0 as f64, u - u0 as f64);
        probs[v0 * side + u0] * (1.0 - lv) * (1.0 - lu)
            + probs[v0 * side + u1] * (1.0 - lv) * lu
            + probs[v1 * side + u0] * lv * (1.0 - lu)
            + probs[v1 * side + u1] * lv * lu
    };
    for y in y_lo..y_hi {
        let v = (y as f64 + 0.5 - bbox.y) / bbox.h * s - 0.5;
        for x in x_lo..x_hi {
            let u = (x as f64 + 0.5 - bbox.x) / bbox.w * s - 0.5;
            if sample(v, u) >= threshold {
                out.set(y, x, true);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(x: f64, w: f64, score: f64, class_id: usize) -> Candidate {
        Candidate {
            bbox: BBox::new(x, 0.0, w, 10.0),
            score,
            class_id,
        }
    }

    #[test]
    fn identical_boxes_keep_the_best() {
        let c = [cand(0.0, 10.0, 0.8, 1), cand(0.0, 10.0, 0.9, 1)];
        assert_eq!(nms(&c, 0.5), vec![1]);
    }

    #[test]
    fn different_classes_do_not_suppress() {
        let c = [cand(0.0, 10.0, 0.8, 1), cand(0.0, 10.0, 0.9, 2)];
        assert_eq!(nms(&c, 0.5), vec![1, 0]);
    }

    #[test]
    fn disjoint_boxes_all_kept() {
        let c: Vec<_> = (0..5).map(|i| cand(20.0 * i as f64, 10.0, 0.1 * i as f64, 1)).collect();
        assert_eq!(nms(&c, 0.5), vec![4, 3, 2, 1, 0]);
    }

    /// Greedy suppression defined over explicit IoU tables.
    fn greedy_oracle(iou: &[Vec<f64>], thr: f64) -> Vec<usize> {
        // inputs already ordered by descending score
        let mut kept = Vec::new();
        for i in 0..iou.len() {
            if kept.iter().all(|&k: &usize| iou[k][i] <= thr) {
                kept.push(i);
            }
        }
        kept
    }

    #[test]
    fn chain_keeps_ends() {
        // unit-height strips: a=[0,10], b=[2.5,12.5], c=[5,15]
        // iou(a,b)=7.5/12.5=0.6, iou(b,c)=0.6, iou(a,c)=5/15=1/3
        let c = [cand(0.0, 10.0, 0.9, 1), cand(2.5, 10.0, 0.8, 1), cand(5.0, 10.0, 0.7, 1)];
        let iou: Vec<Vec<f64>> = c
            .iter()
            .map(|a| c.iter().map(|b| iou_box(&a.bbox, &b.bbox)).collect())
            .collect();
        assert!((iou[0][1] - 0.6).abs() < 1e-12 && (iou[1][2] - 0.6).abs() < 1e-12);
        assert_eq!(nms(&c, 0.5), greedy_oracle(&iou, 0.5));
        assert_eq!(nms(&c, 0.5), vec![0, 2]);
    }

    #[test]
    fn top_k_truncates() {
        let c: Vec<_> = (0..1200).map(|i| cand(20.0 * i as f64, 10.0, 0.5 + i as f64 * 1e-4, 1)).collect();
        let d = select_detections(&c, 0.5, 1000);
        assert_eq!(d.len(), 1000);
        assert!(d.windows(2).all(|w| w[0].score >= w[1].score));
        assert_eq!(d[0].score, c[1199].score);
    }

    #[test]
    fn pasted_mask_stays_inside_box() {
        let probs = vec![1.0; 28 * 28];
        let b = BBox::new(10.3, 5.7, 20.4, 11.2);
        let m = paste_mask(&probs, 28, &b, 40, 50, 0.5);
        for y in 0..40 {
            for x in 0..50 {
                let inside = (x as f64 + 0.5) >= b.x && (x as f64 + 0.5) < b.x1() && (y as f64 + 0.5) >= b.y && (y as f64 + 0.5) < b.y1();
                assert_eq!(m.get(y, x), inside, "({y},{x})");
            }
        }
    }

    #[test]
    fn pasted_left_half() {
        let probs: Vec<f64> = (0..784).map(|i| if i % 28 < 14 { 1.0 } else { 0.0 }).collect();
        let m = paste_mask(&probs, 28, &BBox::new(0.0, 0.0, 56.0, 28.0), 28, 56, 0.5);
        for x in 0..56 {
            assert_eq!(m.get(3, x), x < 28);
        }
    }
}
