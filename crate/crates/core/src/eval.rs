//! COCO-style AP for boxes and masks with remote-sensing area ranges and a
//! 1000-detection per-image budget.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataio::{Category, DatasetManifest, RleMask};
use crate::error::{Error, Result};
use crate::geometry::{iou_box, BBox};
use crate::mask::BinaryMask;

pub const RECALL_POINTS: usize = 101;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AreaRange {
    pub name: &'static str,
    /// Inclusive lower bound in px².
    pub lo: f64,
    /// Exclusive upper bound in px².
    pub hi: f64,
}

impl AreaRange {
    pub fn contains(&self, area: f64) -> bool {
        area >= self.lo && area < self.hi
    }
}

pub const AREA_ALL: AreaRange = AreaRange {
    name: "all",
    lo: 0.0,
    hi: f64::INFINITY,
};
pub const AREA_SMALL: AreaRange = AreaRange {
    name: "small",
    lo: 10.0 * 10.0,
    hi: 144.0 * 144.0,
};
pub const AREA_MEDIUM: AreaRange = AreaRange {
    name: "medium",
    lo: 144.0 * 144.0,
    hi: 512.0 * 512.0,
};
pub const AREA_LARGE: AreaRange = AreaRange {
    name: "large",
    lo: 512.0 * 512.0,
    hi: f64::INFINITY,
};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub max_dets: usize,
    /// all, small, medium, large
    pub area_ranges: [AreaRange; 4],
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
            max_dets: 1000,
            area_ranges: [AREA_ALL, AREA_SMALL, AREA_MEDIUM, AREA_LARGE],
        }
    }
}

impl EvalConfig {
    pub fn with_max_dets(max_dets: usize) -> Self {
        Self {
            max_dets,
            ..Self::default()
        }
    }

    fn threshold_index(&self, t: f64) -> Option<usize> {
        self.iou_thresholds.iter().position(|&v| (v - t).abs() < 1e-9)
    }
}

/// Intersection over union of two same-frame masks; 0 when both are empty.
pub fn iou_mask(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::SizeMismatch {
            what: "mask IoU",
            expected: (a.height(), a.width()),
            actual: (b.height(), b.width()),
        });
    }
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

pub fn iou_rle(a: &RleMask, b: &RleMask) -> Result<f64> {
    iou_mask(&a.decode()?, &b.decode()?)
}

/// Outcome of one detection at one IoU threshold.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchFlag {
    Tp,
    Fp,
    /// Matched an ignored ground truth, or unmatched and outside the area
    /// range: excluded from precision and recall.
    Ignored,
}

/// Greedy matching of detections (already in descending score order) to
/// ground truths. `ious[d][g]`; a detection takes the still-unmatched,
/// non-ignored gt of highest IoU `>= threshold` (lowest index on ties),
/// falling back to an ignored gt under the same rule. Unmatched detections
/// flagged in `det_outside` are ignored rather than false.
pub fn match_detections(ious: &[Vec<f64>], gt_ignore: &[bool], det_outside: &[bool], threshold: f64) -> Vec<MatchFlag> {
    let mut taken = vec![false; gt_ignore.len()];
    let mut out = Vec::with_capacity(ious.len());
    for (d, row) in ious.iter().enumerate() {
        let pick = |want_ignored: bool| {
            let mut best: Option<(usize, f64)> = None;
            for (g, &v) in row.iter().enumerate() {
                if taken[g] || gt_ignore[g] != want_ignored || v < threshold {
                    continue;
                }
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            best.map(|(g, _)| g)
        };
        let flag = if let Some(g) = pick(false) {
            taken[g] = true;
            MatchFlag::Tp
        } else if let Some(g) = pick(true) {
            taken[g] = true;
            MatchFlag::Ignored
        } else if det_outside[d] {
            MatchFlag::Ignored
        } else {
            MatchFlag::Fp
        };
        out.push(flag);
    }
    out
}

/// 101-point interpolated AP. `flags` pairs scores with TP (true) / FP
/// (false); ties in score keep input order. `None` when `num_gt` is 0.
pub fn average_precision(flags: &[(f64, bool)], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..flags.len()).collect();
    order.sort_by(|&a, &b| flags[b].0.total_cmp(&flags[a].0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    for i in order {
        if flags[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for r in 0..RECALL_POINTS {
        let thr = r as f64 / (RECALL_POINTS - 1) as f64;
        let k = recall.partition_point(|&v| v < thr);
        if k < precision.len() {
            sum += precision[k];
        }
    }
    Some(sum / RECALL_POINTS as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub class_id: usize,
    pub bbox: BBox,
    pub mask: BinaryMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
    pub mask: BinaryMask,
}

/// Ground truths and predictions of one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageEval {
    pub gts: Vec<GroundTruth>,
    pub dets: Vec<Prediction>,
}

/// One line of a results file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub image_id: u64,
    pub category_id: usize,
    pub score: f64,
    pub bbox: BBox,
    pub segmentation: RleMask,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_s: Option<f64>,
    pub ap_m: Option<f64>,
    pub ap_l: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub name: String,
    pub ap_box: Option<f64>,
    pub ap_mask: Option<f64>,
}

/// `None` marks a metric with no ground truth in its range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bbox: MetricSet,
    pub segm: MetricSet,
    pub per_class: Vec<ClassAp>,
    pub max_dets: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Family {
    Box,
    Mask,
}

fn mask_iou_fast(a: &BinaryMask, a_area: usize, a_box: Option<BBox>, b: &BinaryMask, b_area: usize, b_box: Option<BBox>) -> f64 {
    let inter = match (a_box, b_box) {
        (Some(p), Some(q)) => {
            let x0 = p.x.max(q.x) as usize;
            let y0 = p.y.max(q.y) as usize;
            let x1 = p.x1().min(q.x1()) as usize;
            let y1 = p.y1().min(q.y1()) as usize;
            let mut n = 0;
            for y in y0..y1.max(y0) {
                for x in x0..x1.max(x0) {
                    n += usize::from(a.get(y, x) && b.get(y, x));
                }
            }
            n
        }
        _ => 0,
    };
    let union = a_area + b_area - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Per (family, class, area range, threshold): scored TP/FP flags and the
/// count of non-ignored gts.
struct Accumulator {
    flags: Vec<Vec<(f64, bool)>>,
    npig: Vec<usize>,
}

/// Evaluates images whose class ids index into `categories`.
pub fn evaluate_images(images: &[ImageEval], categories: &[Category], cfg: &EvalConfig) -> Result<EvalReport> {
    let nt = cfg.iou_thresholds.len();
    let na = cfg.area_ranges.len();
    let nk = categories.len();
    let class_index: HashMap<usize, usize> = categories.iter().enumerate().map(|(i, c)| (c.id, i)).collect();
    // flags index: ((family * nk + k) * na + a) * nt + t ; npig: (family * nk + k) * na + a
    let mut acc = Accumulator {
        flags: vec![Vec::new(); 2 * nk * na * nt],
        npig: vec![0; 2 * nk * na],
    };
    for im in images {
        for g in &im.gts {
            if !class_index.contains_key(&g.class_id) {
                return Err(Error::InvalidClass(g.class_id));
            }
        }
        let frame = im.gts.first().map(|g| (g.mask.height(), g.mask.width()));
        for d in &im.dets {
            if !class_index.contains_key(&d.class_id) {
                return Err(Error::UnknownClass(d.class_id as u64));
            }
            let size = (d.mask.height(), d.mask.width());
            if let Some(f) = frame.filter(|&f| f != size) {
                return Err(Error::SizeMismatch {
                    what: "detection mask",
                    expected: f,
                    actual: size,
                });
            }
        }
        let mut order: Vec<usize> = (0..im.dets.len()).collect();
        order.sort_by(|&a, &b| im.dets[b].score.total_cmp(&im.dets[a].score));
        order.truncate(cfg.max_dets);
        let det_info: Vec<(usize, Option<BBox>)> = im.dets.iter().map(|d| (d.mask.area(), d.mask.bbox())).collect();
        let gt_info: Vec<(usize, Option<BBox>)> = im.gts.iter().map(|g| (g.mask.area(), g.mask.bbox())).collect();
        for (k, cat) in categories.iter().enumerate() {
            let dets: Vec<usize> = order.iter().copied().filter(|&d| im.dets[d].class_id == cat.id).collect();
            let gts: Vec<usize> = (0..im.gts.len()).filter(|&g| im.gts[g].class_id == cat.id).collect();
            if dets.is_empty() && gts.is_empty() {
                continue;
            }
            for (fi, fam) in [Family::Box, Family::Mask].into_iter().enumerate() {
                let ious: Vec<Vec<f64>> = dets
                    .iter()
                    .map(|&d| {
                        gts.iter()
                            .map(|&g| match fam {
                                Family::Box => iou_box(&im.dets[d].bbox, &im.gts[g].bbox),
                                Family::Mask => mask_iou_fast(
                                    &im.dets[d].mask,
                                    det_info[d].0,
                                    det_info[d].1,
                                    &im.gts[g].mask,
                                    gt_info[g].0,
                                    gt_info[g].1,
                                ),
                            })
                            .collect()
                    })
                    .collect();
                for (a, range) in cfg.area_ranges.iter().enumerate() {
                    let gt_ignore: Vec<bool> = gts.iter().map(|&g| !range.contains(gt_info[g].0 as f64)).collect();
                    let det_outside: Vec<bool> = dets
                        .iter()
                        .map(|&d| {
                            let area = match fam {
                                Family::Box => im.dets[d].bbox.area(),
                                Family::Mask => det_info[d].0 as f64,
                            };
                            !range.contains(area)
                        })
                        .collect();
                    let base = (fi * nk + k) * na + a;
                    acc.npig[base] += gt_ignore.iter().filter(|&&i| !i).count();
                    for (t, &thr) in cfg.iou_thresholds.iter().enumerate() {
                        let flags = match_detections(&ious, &gt_ignore, &det_outside, thr);
                        let slot = &mut acc.flags[base * nt + t];
                        for (&d, f) in dets.iter().zip(flags) {
                            match f {
                                MatchFlag::Tp => slot.push((im.dets[d].score, true)),
                                MatchFlag::Fp => slot.push((im.dets[d].score, false)),
                                MatchFlag::Ignored => {}
                            }
                        }
                    }
                }
            }
        }
    }
    let ap = |fi: usize, k: usize, a: usize, t: usize| -> Option<f64> {
        let base = (fi * nk + k) * na + a;
        average_precision(&acc.flags[base * nt + t], acc.npig[base])
    };
    // mean over thresholds of the class-mean AP
    let summarize = |fi: usize, a: usize, ts: &[usize]| -> Option<f64> {
        let mut per_t = Vec::with_capacity(ts.len());
        for &t in ts {
            let vals: Vec<f64> = (0..nk).filter_map(|k| ap(fi, k, a, t)).collect();
            if vals.is_empty() {
                return None;
            }
            per_t.push(vals.iter().sum::<f64>() / vals.len() as f64);
        }
        (!per_t.is_empty()).then(|| per_t.iter().sum::<f64>() / per_t.len() as f64)
    };
    let all_t: Vec<usize> = (0..nt).collect();
    let fixed = |v: f64| cfg.threshold_index(v).map(|i| vec![i]).unwrap_or_default();
    let metric_set = |fi: usize| MetricSet {
        ap: summarize(fi, 0, &all_t),
        ap50: summarize(fi, 0, &fixed(0.5)),
        ap75: summarize(fi, 0, &fixed(0.75)),
        ap_s: summarize(fi, 1, &all_t),
        ap_m: summarize(fi, 2, &all_t),
        ap_l: summarize(fi, 3, &all_t),
    };
    let class_ap = |fi: usize, k: usize| -> Option<f64> {
        let v: Vec<f64> = all_t.iter().filter_map(|&t| ap(fi, k, 0, t)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Ok(EvalReport {
        bbox: metric_set(0),
        segm: metric_set(1),
        per_class: categories
            .iter()
            .enumerate()
            .map(|(k, c)| ClassAp {
                class_id: c.id,
                name: c.name.clone(),
                ap_box: class_ap(0, k),
                ap_mask: class_ap(1, k),
            })
            .collect(),
        max_dets: cfg.max_dets,
    })
}

/// Evaluates a results file against a manifest.
pub fn evaluate(results: &[ResultRecord], manifest: &DatasetManifest, cfg: &EvalConfig) -> Result<EvalReport> {
    let known: std::collections::HashSet<usize> = manifest.categories.iter().map(|c| c.id).collect();
    let mut slot: HashMap<u64, usize> = HashMap::new();
    let mut images = Vec::with_capacity(manifest.images.len());
    for (i, rec) in manifest.images.iter().enumerate() {
        slot.insert(rec.id, i);
        let gts = manifest
            .instances(rec.id)?
            .into_iter()
            .map(|a| GroundTruth {
                class_id: a.class_id,
                bbox: a.bbox,
                mask: a.mask,
            })
            .collect();
        images.push(ImageEval { gts, dets: Vec::new() });
    }
    for r in results {
        if !known.contains(&r.category_id) {
            return Err(Error::UnknownClass(r.category_id as u64));
        }
        let &i = slot
            .get(&r.image_id)
            .ok_or_else(|| Error::Manifest(format!("result refers to unknown image {}", r.image_id)))?;
        let rec = &manifest.images[i];
        if r.segmentation.size != [rec.height, rec.width] {
            return Err(Error::SizeMismatch {
                what: "result mask",
                expected: (rec.height, rec.width),
                actual: (r.segmentation.size[0], r.segmentation.size[1]),
            });
        }
        images[i].dets.push(Prediction {
            class_id: r.category_id,
            score: r.score,
            bbox: r.bbox,
            mask: r.segmentation.decode()?,
        });
    }
    evaluate_images(&images, &manifest.categories, cfg)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "   -  ".to_string(), |v| format!("{:6.3}", v))
}

impl EvalReport {
    /// Fixed-width text table of both families and the per-class breakdown.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "maxDets = {}", self.max_dets);
        let _ = writeln!(s, "family    AP    AP50   AP75   APs    APm    APl");
        for (name, m) in [("box ", &self.bbox), ("mask", &self.segm)] {
            let _ = writeln!(
                s,
                "{name}   {} {} {} {} {} {}",
                cell(m.ap),
                cell(m.ap50),
                cell(m.ap75),
                cell(m.ap_s),
                cell(m.ap_m),
                cell(m.ap_l)
            );
        }
        let _ = writeln!(s, "\nclass            AP^b   AP^m");
        for c in &self.per_class {
            let _ = writeln!(s, "{:3} {:<12} {} {}", c.class_id, c.name, cell(c.ap_box), cell(c.ap_mask));
        }
        s
    }
}
