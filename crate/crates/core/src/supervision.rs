//! Ground-truth transforms: instance annotations to the semantic map, per-RoI
//! multi-scale mask targets, and box-head targets.

use seascn_tensor::{Scalar, Tensor};

use crate::error::{Error, Result};
use crate::geometry::{iou_box, BBox};
use crate::mask::BinaryMask;

/// One labeled object.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceAnnotation {
    pub class_id: usize,
    pub mask: BinaryMask,
    pub bbox: BBox,
    pub area: usize,
}

impl InstanceAnnotation {
    /// Derives box and area from the mask; `None` for an empty mask.
    pub fn from_mask(class_id: usize, mask: BinaryMask) -> Option<Self> {
        let bbox = mask.bbox()?;
        let area = mask.area();
        Some(Self {
            class_id,
            mask,
            bbox,
            area,
        })
    }
}

/// Per-pixel class map; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemanticLabelMap {
    height: usize,
    width: usize,
    labels: Vec<u16>,
}

impl SemanticLabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Option<Self> {
        (labels.len() == height * width).then_some(Self { height, width, labels })
    }

    pub fn background(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u16 {
        self.labels[y * self.width + x]
    }

    /// Nearest-neighbour resampling with half-pixel centers; labels stay integral.
    pub fn resize_nearest(&self, oh: usize, ow: usize) -> SemanticLabelMap {
        let mut labels = Vec::with_capacity(oh * ow);
        for y in 0..oh {
            let sy = (((y as f64 + 0.5) * self.height as f64 / oh as f64) as usize).min(self.height - 1);
            for x in 0..ow {
                let sx = (((x as f64 + 0.5) * self.width as f64 / ow as f64) as usize).min(self.width - 1);
                labels.push(self.get(sy, sx));
            }
        }
        SemanticLabelMap {
            height: oh,
            width: ow,
            labels,
        }
    }
}

/// Paints instances in decreasing-area order so smaller objects win overlaps.
/// Ties are broken on class id and mask content, which makes the result
/// independent of the input order.
pub fn instances_to_semantic_map(
    annotations: &[InstanceAnnotation],
    height: usize,
    width: usize,
) -> Result<SemanticLabelMap> {
    for a in annotations {
        if (a.mask.height(), a.mask.width()) != (height, width) {
            return Err(Error::SizeMismatch {
                what: "instance mask",
                expected: (height, width),
                actual: (a.mask.height(), a.mask.width()),
            });
        }
        if a.class_id == 0 || a.class_id > u16::MAX as usize {
            return Err(Error::InvalidClass(a.class_id));
        }
    }
    let mut order: Vec<&InstanceAnnotation> = annotations.iter().collect();
    order.sort_by(|a, b| {
        b.area
            .cmp(&a.area)
            .then(a.class_id.cmp(&b.class_id))
            .then_with(|| a.mask.data().cmp(b.mask.data()))
    });
    let mut map = SemanticLabelMap::background(height, width);
    for a in order {
        for (l, &m) in map.labels.iter_mut().zip(a.mask.data()) {
            if m != 0 {
                *l = a.class_id as u16;
            }
        }
    }
    Ok(map)
}

/// Binary mask targets of one RoI at the three trident scales.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSupervisionSet {
    pub m7: BinaryMask,
    pub m14: BinaryMask,
    pub m28: BinaryMask,
}

impl MaskSupervisionSet {
    /// The target at path `i` (0: 7x7, 1: 14x14, 2: 28x28).
    pub fn path(&self, i: usize) -> &BinaryMask {
        match i {
            0 => &self.m7,
            1 => &self.m14,
            _ => &self.m28,
        }
    }
}

/// Stacks one path's targets of several RoIs into `[n, 1, s, s]`.
pub fn stack_targets<T: Scalar>(sets: &[MaskSupervisionSet], path: usize) -> Tensor<T> {
    let s = [7, 14, 28][path];
    let mut data = Vec::with_capacity(sets.len() * s * s);
    for m in sets {
        data.extend(m.path(path).data().iter().map(|&v| T::lit(f64::from(v))));
    }
    Tensor::from_vec(&[sets.len(), 1, s, s], data).expect("target shape")
}

fn sample_mask(mask: &BinaryMask, y: f64, x: f64) -> f64 {
    let at = |yy: isize, xx: isize| -> f64 {
        if yy < 0 || xx < 0 || yy as usize >= mask.height() || xx as usize >= mask.width() {
            0.0
        } else {
            f64::from(u8::from(mask.get(yy as usize, xx as usize)))
        }
    };
    let (y0, x0) = (y.floor(), x.floor());
    let (ly, lx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    at(y0, x0) * (1.0 - ly) * (1.0 - lx)
        + at(y0, x0 + 1) * (1.0 - ly) * lx
        + at(y0 + 1, x0) * ly * (1.0 - lx)
        + at(y0 + 1, x0 + 1) * ly * lx
}

fn pool_threshold(m: &BinaryMask) -> BinaryMask {
    let (h, w) = (m.height() / 2, m.width() / 2);
    BinaryMask::from_fn(h, w, |y, x| {
        let s = [(0, 0), (0, 1), (1, 0), (1, 1)]
            .iter()
            .filter(|(dy, dx)| m.get(2 * y + dy, 2 * x + dx))
            .count();
        s * 2 >= 4
    })
}

/// Crops the instance mask to the proposal, bilinearly resamples it to 28x28
/// and binarizes at 0.5; 14x14 and 7x7 come from 2x2 averaging of the next
/// finer target, binarized at 0.5.
pub fn roi_mask_targets(instance: &InstanceAnnotation, proposal: &BBox) -> Result<MaskSupervisionSet> {
    if !(proposal.w >= 1.0 && proposal.h >= 1.0) {
        return Err(Error::DegenerateBox {
            w: proposal.w,
            h: proposal.h,
        });
    }
    let m28 = BinaryMask::from_fn(28, 28, |i, j| {
        let y = proposal.y + (i as f64 + 0.5) * proposal.h / 28.0 - 0.5;
        let x = proposal.x + (j as f64 + 0.5) * proposal.w / 28.0 - 0.5;
        sample_mask(&instance.mask, y, x) >= 0.5
    });
    let m14 = pool_threshold(&m28);
    let m7 = pool_threshold(&m14);
    Ok(MaskSupervisionSet { m7, m14, m28 })
}

/// Standard center/size box-regression parameterization.
pub fn encode_deltas(proposal: &BBox, gt: &BBox) -> [f64; 4] {
    let (px, py) = proposal.center();
    let (gx, gy) = gt.center();
    [
        (gx - px) / proposal.w,
        (gy - py) / proposal.h,
        (gt.w / proposal.w).ln(),
        (gt.h / proposal.h).ln(),
    ]
}

/// Inverse of [`encode_deltas`]; size deltas are clamped to avoid overflow.
pub fn decode_deltas(proposal: &BBox, d: &[f64; 4]) -> BBox {
    let clamp = (1000.0f64 / 16.0).ln();
    let (px, py) = proposal.center();
    let cx = px + d[0] * proposal.w;
    let cy = py + d[1] * proposal.h;
    let w = proposal.w * d[2].min(clamp).exp();
    let h = proposal.h * d[3].min(clamp).exp();
    BBox::new(cx - 0.5 * w, cy - 0.5 * h, w, h)
}

/// Assignment of one proposal for the box head.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionTarget {
    /// 0 for background, else the matched class id.
    pub label: usize,
    pub deltas: [f64; 4],
    pub matched: Option<usize>,
}

/// Labels each proposal with the class of its highest-IoU ground truth when
/// that IoU reaches `iou_fg`, else background.
pub fn detection_targets(proposals: &[BBox], gts: &[InstanceAnnotation], iou_fg: f64) -> Vec<DetectionTarget> {
    proposals
        .iter()
        .map(|p| {
            let best = gts
                .iter()
                .enumerate()
                .map(|(i, g)| (i, iou_box(p, &g.bbox)))
                .fold(None::<(usize, f64)>, |acc, (i, v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((i, v)),
                });
            match best {
                Some((i, v)) if v >= iou_fg => DetectionTarget {
                    label: gts[i].class_id,
                    deltas: encode_deltas(p, &gts[i].bbox),
                    matched: Some(i),
                },
                _ => DetectionTarget {
                    label: 0,
                    deltas: [0.0; 4],
                    matched: None,
                },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect_instance(class_id: usize, h: usize, w: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> InstanceAnnotation {
        InstanceAnnotation::from_mask(class_id, BinaryMask::rect(h, w, x0, y0, x1, y1)).unwrap()
    }

    #[test]
    fn empty_annotations_give_background() {
        let m = instances_to_semantic_map(&[], 5, 7).unwrap();
        assert!(m.labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn single_instance_paints_its_class() {
        let a = rect_instance(3, 8, 8, 2, 2, 5, 6);
        let m = instances_to_semantic_map(std::slice::from_ref(&a), 8, 8).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(m.get(y, x), if a.mask.get(y, x) { 3 } else { 0 });
            }
        }
    }

    #[test]
    fn smaller_instance_wins_overlap() {
        // areas 100 and 9
        let big = rect_instance(1, 20, 20, 0, 0, 10, 10);
        let small = rect_instance(2, 20, 20, 8, 8, 11, 11);
        // paint-order oracle: big first, then small, over explicit pixel sets
        let mut want = vec![0u16; 400];
        for (cls, inst) in [(1u16, &big), (2u16, &small)] {
            for y in 0..20 {
                for x in 0..20 {
                    if inst.mask.get(y, x) {
                        want[y * 20 + x] = cls;
                    }
                }
            }
        }
        for anns in [vec![big.clone(), small.clone()], vec![small, big]] {
            let m = instances_to_semantic_map(&anns, 20, 20).unwrap();
            assert_eq!(m.labels(), &want[..]);
            assert_eq!(m.get(9, 9), 2);
        }
    }

    #[test]
    fn semantic_map_rejects_size_mismatch() {
        let a = rect_instance(1, 8, 8, 0, 0, 2, 2);
        assert!(instances_to_semantic_map(&[a], 8, 9).is_err());
    }

    #[test]
    fn nearest_downsample_keeps_labels_integral() {
        let m = SemanticLabelMap::new(4, 4, (0..16).map(|v| v as u16).collect()).unwrap();
        let d = m.resize_nearest(2, 2);
        assert_eq!(d.labels(), &[5, 7, 13, 15]);
    }

    #[test]
    fn fully_covered_proposal_gives_all_ones() {
        let a = rect_instance(1, 64, 64, 10, 10, 50, 40);
        let t = roi_mask_targets(&a, &a.bbox).unwrap();
        for m in [&t.m7, &t.m14, &t.m28] {
            assert_eq!(m.area(), m.height() * m.width());
        }
        let inner = roi_mask_targets(&a, &BBox::new(20.0, 15.0, 9.5, 13.2)).unwrap();
        assert_eq!(inner.m28.area(), 784);
    }

    #[test]
    fn disjoint_proposal_gives_all_zeros() {
        let a = rect_instance(1, 64, 64, 0, 0, 10, 10);
        let t = roi_mask_targets(&a, &BBox::new(30.0, 30.0, 20.0, 20.0)).unwrap();
        assert_eq!(t.m7.area() + t.m14.area() + t.m28.area(), 0);
    }

    #[test]
    fn half_covered_proposal_splits_columns() {
        for w in [10usize, 28, 56, 40] {
            let a = rect_instance(1, 64, 64, 4, 3, 4 + w / 2, 3 + 20);
            let t = roi_mask_targets(&a, &BBox::new(4.0, 3.0, w as f64, 20.0)).unwrap();
            for y in 0..28 {
                for x in 0..28 {
                    assert_eq!(t.m28.get(y, x), x < 14, "w={w} ({y},{x})");
                }
            }
            // 2x2 mean of a step pattern, binarized at 0.5
            for y in 0..14 {
                for x in 0..14 {
                    assert_eq!(t.m14.get(y, x), x < 7);
                }
            }
            for y in 0..7 {
                for x in 0..7 {
                    let ones = [2 * x, 2 * x + 1].iter().filter(|&&c| c < 7).count();
                    assert_eq!(t.m7.get(y, x), ones * 2 >= 2, "x={x}");
                }
            }
        }
    }

    #[test]
    fn degenerate_proposal_is_rejected() {
        let a = rect_instance(1, 16, 16, 0, 0, 4, 4);
        assert!(matches!(
            roi_mask_targets(&a, &BBox::new(0.0, 0.0, 0.5, 4.0)),
            Err(Error::DegenerateBox { .. })
        ));
    }

    #[test]
    fn detection_targets_identity_disjoint_and_partial() {
        let g = rect_instance(4, 100, 100, 10, 10, 30, 40);
        let t = detection_targets(&[g.bbox], std::slice::from_ref(&g), 0.5);
        assert_eq!(t[0].label, 4);
        assert_eq!(t[0].deltas, [0.0; 4]);
        let t = detection_targets(&[BBox::new(60.0, 60.0, 10.0, 10.0)], std::slice::from_ref(&g), 0.5);
        assert_eq!(t[0].label, 0);
        assert_eq!(t[0].matched, None);

        // gt (10,10,20,30) area 600; proposal (10,10,20,20) area 400 inside: IoU = 400/600
        let p = BBox::new(10.0, 10.0, 20.0, 20.0);
        let t = detection_targets(&[p], std::slice::from_ref(&g), 0.5);
        assert_eq!(t[0].label, 4);
        // direct formula: centers (20,20) vs (20,25)
        let want = [0.0, 5.0 / 20.0, (20.0f64 / 20.0).ln(), (30.0f64 / 20.0).ln()];
        for (a, b) in t[0].deltas.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        let back = decode_deltas(&p, &t[0].deltas);
        assert!((back.x - 10.0).abs() < 1e-9 && (back.h - 30.0).abs() < 1e-9);
    }
}
