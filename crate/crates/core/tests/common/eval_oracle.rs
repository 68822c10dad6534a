//! Brute-force COCO-style evaluator for tiny cases, written directly from the
//! matching and interpolation rules without the production data layout.

use rand::Rng;
use seascn::dataio::Category;
use seascn::eval::{AreaRange, EvalConfig, EvalReport, GroundTruth, ImageEval, MetricSet, Prediction};
use seascn::{BBox, BinaryMask};

fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let iy = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    let inter = ix.max(0.0) * iy.max(0.0);
    let union = a.w * a.h + b.w * b.h - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &q) in a.data().iter().zip(b.data()) {
        inter += usize::from(p != 0 && q != 0);
        union += usize::from(p != 0 || q != 0);
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Interpolated precision at recall `r`: the best precision of any ranked
/// prefix reaching that recall, 0 if none does.
fn interpolated_ap(ranked: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut points = Vec::new();
    let mut tp = 0usize;
    for (i, &t) in ranked.iter().enumerate() {
        tp += usize::from(t);
        points.push((tp as f64 / num_gt as f64, tp as f64 / (i + 1) as f64));
    }
    let mut sum = 0.0;
    for r in 0..101 {
        let thr = r as f64 / 100.0;
        let best = points
            .iter()
            .filter(|(rec, _)| *rec >= thr)
            .map(|&(_, p)| p)
            .fold(None, |m: Option<f64>, p| Some(m.map_or(p, |m| m.max(p))));
        sum += best.unwrap_or(0.0);
    }
    Some(sum / 101.0)
}

/// AP of one (family, class, range, threshold) cell.
fn cell_ap(images: &[ImageEval], class_id: usize, mask: bool, range: &AreaRange, thr: f64, max_dets: usize) -> Option<f64> {
    let mut scored: Vec<(f64, bool)> = Vec::new();
    let mut num_gt = 0;
    for im in images {
        let mut order: Vec<usize> = (0..im.dets.len()).collect();
        order.sort_by(|&a, &b| im.dets[b].score.total_cmp(&im.dets[a].score));
        let kept: Vec<&Prediction> = order
            .into_iter()
            .take(max_dets)
            .map(|i| &im.dets[i])
            .filter(|d| d.class_id == class_id)
            .collect();
        let gts: Vec<&GroundTruth> = im.gts.iter().filter(|g| g.class_id == class_id).collect();
        let ignored: Vec<bool> = gts.iter().map(|g| !range.contains(g.mask.area() as f64)).collect();
        num_gt += ignored.iter().filter(|&&i| !i).count();
        let mut used = vec![false; gts.len()];
        for d in kept {
            // rank candidates: non-ignored first, then IoU, then lower index
            let mut cands: Vec<(bool, f64, usize)> = gts
                .iter()
                .enumerate()
                .filter(|&(j, _)| !used[j])
                .map(|(j, g)| {
                    let iou = if mask {
                        mask_iou(&d.mask, &g.mask)
                    } else {
                        box_iou(&d.bbox, &g.bbox)
                    };
                    (ignored[j], iou, j)
                })
                .filter(|&(_, iou, _)| iou >= thr)
                .collect();
            cands.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.total_cmp(&a.1)).then(a.2.cmp(&b.2)));
            match cands.first() {
                Some(&(ign, _, j)) => {
                    used[j] = true;
                    if !ign {
                        scored.push((d.score, true));
                    }
                }
                None => {
                    let area = if mask { d.mask.area() as f64 } else { d.bbox.w * d.bbox.h };
                    if range.contains(area) {
                        scored.push((d.score, false));
                    }
                }
            }
        }
    }
    let mut idx: Vec<usize> = (0..scored.len()).collect();
    idx.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0));
    let ranked: Vec<bool> = idx.into_iter().map(|i| scored[i].1).collect();
    interpolated_ap(&ranked, num_gt)
}

fn summary(images: &[ImageEval], cats: &[Category], cfg: &EvalConfig, mask: bool, range: &AreaRange, thrs: &[f64]) -> Option<f64> {
    let mut per_t = Vec::new();
    for &t in thrs {
        let vals: Vec<f64> = cats
            .iter()
            .filter_map(|c| cell_ap(images, c.id, mask, range, t, cfg.max_dets))
            .collect();
        if vals.is_empty() {
            return None;
        }
        per_t.push(vals.iter().sum::<f64>() / vals.len() as f64);
    }
    Some(per_t.iter().sum::<f64>() / per_t.len() as f64)
}

fn metric_set(images: &[ImageEval], cats: &[Category], cfg: &EvalConfig, mask: bool) -> MetricSet {
    let t = &cfg.iou_thresholds;
    let r = &cfg.area_ranges;
    MetricSet {
        ap: summary(images, cats, cfg, mask, &r[0], t),
        ap50: summary(images, cats, cfg, mask, &r[0], &[0.5]),
        ap75: summary(images, cats, cfg, mask, &r[0], &[0.75]),
        ap_s: summary(images, cats, cfg, mask, &r[1], t),
        ap_m: summary(images, cats, cfg, mask, &r[2], t),
        ap_l: summary(images, cats, cfg, mask, &r[3], t),
    }
}

/// Summary metrics for both families; per-class rows are left to the caller.
pub fn brute_force(images: &[ImageEval], cats: &[Category], cfg: &EvalConfig) -> (MetricSet, MetricSet) {
    (metric_set(images, cats, cfg, false), metric_set(images, cats, cfg, true))
}

pub fn same_summaries(report: &EvalReport, oracle: &(MetricSet, MetricSet)) -> bool {
    report.bbox == oracle.0 && report.segm == oracle.1
}

const FRAME: usize = 12;

fn random_rect_mask<R: Rng>(rng: &mut R) -> BinaryMask {
    let x0 = rng.random_range(0..FRAME - 1);
    let y0 = rng.random_range(0..FRAME - 1);
    let x1 = rng.random_range(x0 + 1..=FRAME);
    let y1 = rng.random_range(y0 + 1..=FRAME);
    let mut m = BinaryMask::rect(FRAME, FRAME, x0, y0, x1, y1);
    // knock out a few pixels so mask and box IoU differ
    for _ in 0..rng.random_range(0..4) {
        m.set(rng.random_range(y0..y1), rng.random_range(x0..x1), false);
    }
    if m.area() == 0 {
        m.set(y0, x0, true);
    }
    m
}

/// Area ranges scaled to the 12x12 frame so every range sees traffic.
pub fn micro_config<R: Rng>(rng: &mut R) -> EvalConfig {
    let mut cfg = EvalConfig::default();
    cfg.area_ranges[1] = AreaRange {
        name: "small",
        lo: 4.0,
        hi: 16.0,
    };
    cfg.area_ranges[2] = AreaRange {
        name: "medium",
        lo: 16.0,
        hi: 49.0,
    };
    cfg.area_ranges[3] = AreaRange {
        name: "large",
        lo: 49.0,
        hi: f64::INFINITY,
    };
    cfg.max_dets = [2, 3, 100, 1000][rng.random_range(0..4)];
    cfg
}

/// At most 5 detections and 3 ground truths over one or two images and two
/// classes. Detections either perturb a gt or land at random; scores are
/// quantized so ties occur.
pub fn micro_case<R: Rng>(rng: &mut R) -> (Vec<ImageEval>, Vec<Category>, EvalConfig) {
    let cats = vec![
        Category {
            id: 1,
            name: "a".into(),
        },
        Category {
            id: 2,
            name: "b".into(),
        },
    ];
    let n_images = rng.random_range(1..=2);
    let mut gts_left = rng.random_range(0..=3usize);
    let mut dets_left = rng.random_range(0..=5usize);
    let mut images = Vec::new();
    for i in 0..n_images {
        let last = i + 1 == n_images;
        let ng = if last { gts_left } else { rng.random_range(0..=gts_left) };
        let nd = if last { dets_left } else { rng.random_range(0..=dets_left) };
        gts_left -= ng;
        dets_left -= nd;
        let gts: Vec<GroundTruth> = (0..ng)
            .map(|_| {
                let mask = random_rect_mask(rng);
                GroundTruth {
                    class_id: rng.random_range(1..=2),
                    bbox: mask.bbox().unwrap(),
                    mask,
                }
            })
            .collect();
        let dets = (0..nd)
            .map(|_| {
                let score = f64::from(rng.random_range(1..=8u32)) / 8.0;
                if !gts.is_empty() && rng.random_bool(0.6) {
                    let g = &gts[rng.random_range(0..gts.len())];
                    let mut mask = g.mask.clone();
                    let b = g.bbox;
                    let dx = rng.random_range(-2i32..=2) as f64;
                    let dw = rng.random_range(-1i32..=2) as f64;
                    for _ in 0..rng.random_range(0..6) {
                        let y = rng.random_range(0..FRAME);
                        let x = rng.random_range(0..FRAME);
                        mask.set(y, x, !mask.get(y, x));
                    }
                    let class_id = if rng.random_bool(0.8) { g.class_id } else { 3 - g.class_id };
                    Prediction {
                        class_id,
                        score,
                        bbox: BBox::new(b.x + dx, b.y, (b.w + dw).max(1.0), b.h),
                        mask,
                    }
                } else {
                    let mask = random_rect_mask(rng);
                    Prediction {
                        class_id: rng.random_range(1..=2),
                        score,
                        bbox: mask.bbox().unwrap(),
                        mask,
                    }
                }
            })
            .collect();
        images.push(ImageEval { gts, dets });
    }
    (images, cats, micro_config(rng))
}
