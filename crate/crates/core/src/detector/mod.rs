//! The assembled two-stage detector: backbone, pyramid, semantic attention,
//! proposals, box head and mask branch, with the joint loss and inference.

pub mod head;
pub mod postprocess;
pub mod proposals;
pub mod roi;
pub mod train;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seascn_tensor::{kernels, Graph, Scalar, Tensor, Var};

use crate::config::{ModelConfig, ProposalConfig, ProposalMode, TrainConfig};
use crate::error::{Error, Result};
use crate::fpn::{Backbone, FeaturePyramid, Fpn, ImageTensor, PyramidVars};
use crate::geometry::BBox;
use crate::mask::BinaryMask;
use crate::params::{Bound, ParamStore};
use crate::scmb::{select_class_channel, MaskHead, Scmb};
use crate::sea::{SeaModule, SeaOutput};
use crate::supervision::{
    decode_deltas, detection_targets, instances_to_semantic_map, roi_mask_targets, DetectionTarget, InstanceAnnotation,
    MaskSupervisionSet, SemanticLabelMap,
};

use head::{detection_loss, BoxHead};
use postprocess::{paste_mask, select_detections, Candidate};
use proposals::{gt_jitter_proposals, sanitize_box, Proposal, RpnLite};
use roi::multi_level_roi_align;

pub use train::{train_step, Sgd};

/// Side of the RoI features fed to the mask branch.
pub const MASK_ROI_SIZE: usize = 14;
/// Bilinear samples per RoI-Align bin along each axis.
pub const ROI_SAMPLING: usize = 2;
/// Foreground IoU for box-head assignment.
pub const FG_IOU: f64 = 0.5;
/// RoIs per mask-branch batch at inference.
const MASK_CHUNK: usize = 64;

/// One detected instance.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionResult {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
    /// Full-image mask, zero outside `bbox`.
    pub mask: BinaryMask,
}

/// Weighted loss components of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointLossReport {
    pub l_detection: f64,
    pub l_segmentation: f64,
    pub l_scmb: f64,
    pub l_total: f64,
    pub weights: [f64; 3],
}

/// `alpha[0] * l_detection + alpha[1] * l_segmentation + alpha[2] * l_scmb`.
pub fn joint_loss(l_detection: f64, l_segmentation: f64, l_scmb: f64, alpha: [f64; 3]) -> Result<JointLossReport> {
    for (what, v) in [
        ("l_detection", l_detection),
        ("l_segmentation", l_segmentation),
        ("l_scmb", l_scmb),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: what.into(),
                value: v,
            });
        }
    }
    Ok(JointLossReport {
        l_detection,
        l_segmentation,
        l_scmb,
        l_total: alpha[0] * l_detection + alpha[1] * l_segmentation + alpha[2] * l_scmb,
        weights: alpha,
    })
}

/// A training image with its annotations and derived semantic map.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub image: ImageTensor<T>,
    pub annotations: Vec<InstanceAnnotation>,
    pub semantic: SemanticLabelMap,
}

impl<T: Scalar> Sample<T> {
    pub fn new(image: ImageTensor<T>, annotations: Vec<InstanceAnnotation>) -> Result<Self> {
        let semantic = instances_to_semantic_map(&annotations, image.height(), image.width())?;
        Ok(Self {
            image,
            annotations,
            semantic,
        })
    }
}

/// Mask branch variant selected by `scmb.enabled`.
#[derive(Clone, Debug)]
pub enum MaskBranch {
    Baseline(MaskHead),
    Trident(Scmb),
}

impl MaskBranch {
    /// Per-class mask logits `[n, C, 28, 28]` and, for the trident head, its
    /// intermediate handles.
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, roi: Var) -> Result<(Var, Option<crate::scmb::ScmbVars>)> {
        match self {
            MaskBranch::Baseline(h) => Ok((h.forward(g, p, roi), None)),
            MaskBranch::Trident(s) => {
                let v = s.forward(g, p, roi)?;
                Ok((v.mask_logits, Some(v)))
            }
        }
    }
}

/// Graph handles of the loss components.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub detection: Var,
    pub segmentation: Var,
    pub mask: Var,
    pub total: Var,
}

/// Pyramid before and after semantic attention plus the branch outputs.
#[derive(Clone, Debug)]
pub struct SeaMaps<T> {
    pub before: FeaturePyramid<T>,
    pub after: FeaturePyramid<T>,
    /// F^SEA, `[1, channels, h, w]`.
    pub attention: Option<Tensor<T>>,
    /// Per-pixel class probabilities `[1, C + 1, h, w]`.
    pub probabilities: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct Detector<T> {
    config: ModelConfig,
    backbone: Backbone,
    fpn: Fpn,
    sea: SeaModule,
    mask: MaskBranch,
    box_head: BoxHead,
    rpn: Option<RpnLite>,
    params: ParamStore<T>,
}

impl<T: Scalar> Detector<T> {
    /// Builds the modules and draws initial weights from `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config.fpn.channels;
        let k = config.num_classes;
        let backbone = Backbone::new(&config.backbone);
        let fpn = Fpn::new(&config.fpn, config.backbone.stage_widths);
        let sea = SeaModule::new(&config.sea, c, k);
        let mask = if config.scmb.enabled {
            MaskBranch::Trident(Scmb::new(&config.scmb, c, k))
        } else {
            MaskBranch::Baseline(MaskHead::new(c, k))
        };
        let box_head = BoxHead::new(c, config.head.box_roi_size, config.head.hidden, k);
        let rpn = (config.proposal_mode == ProposalMode::RpnLite).then(|| RpnLite::new(c, config.rpn_anchor_scale));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        backbone.init(&mut params, &mut rng);
        fpn.init(&mut params, &mut rng);
        sea.init(&mut params, &mut rng);
        match &mask {
            MaskBranch::Baseline(h) => h.init(&mut params, &mut rng),
            MaskBranch::Trident(s) => s.init(&mut params, &mut rng),
        }
        box_head.init(&mut params, &mut rng);
        if let Some(r) = &rpn {
            r.init(&mut params, &mut rng);
        }
        Ok(Self {
            config: config.clone(),
            backbone,
            fpn,
            sea,
            mask,
            box_head,
            rpn,
            params,
        })
    }

    /// Uses `params` in place of fresh weights; names and shapes must match
    /// the architecture exactly.
    pub fn with_params(config: &ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let mut d = Self::new(config, 0)?;
        for (name, t) in d.params.iter() {
            match params.get(name) {
                None => return Err(Error::MissingParam(name.clone())),
                Some(p) if p.shape() != t.shape() => {
                    return Err(Error::Corrupt(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = params.names().find(|n| !d.params.contains(n)) {
            return Err(Error::Corrupt(format!("unexpected parameter {extra}")));
        }
        d.params = params;
        Ok(d)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn sea(&self) -> &SeaModule {
        &self.sea
    }

    pub fn mask_branch(&self) -> &MaskBranch {
        &self.mask
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Backbone, pyramid and semantic attention.
    pub fn features(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        image: &ImageTensor<T>,
        semantic: Option<&SemanticLabelMap>,
    ) -> Result<(PyramidVars, SeaOutput)> {
        let x = g.constant(image.tensor().clone());
        let stages = self.backbone.forward(g, p, x)?;
        let pyr = self.fpn.forward(g, p, stages)?;
        let sea = self.sea.forward(g, p, &pyr, semantic)?;
        Ok((pyr, sea))
    }

    /// Training proposals: ground-truth boxes plus the configured source.
    fn training_proposals<R: Rng>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        pyramid: &PyramidVars,
        sample_: &Sample<T>,
        cfg: &ProposalConfig,
        rng: &mut R,
    ) -> Result<(Vec<BBox>, Option<Var>)> {
        let (h, w) = (sample_.image.height(), sample_.image.width());
        let gts: Vec<BBox> = sample_.annotations.iter().map(|a| a.bbox).collect();
        let mut boxes = gts.clone();
        let mut rpn_loss = None;
        match &self.rpn {
            None => boxes.extend(gt_jitter_proposals(&gts, cfg, h, w, rng).into_iter().map(|p| p.bbox)),
            Some(rpn) => {
                let out = rpn.forward(g, p, pyramid);
                boxes.extend(rpn.propose(g, &out, cfg, h, w).into_iter().map(|p| p.bbox));
                rpn_loss = Some(rpn.loss(g, &out, &gts, rng)?);
            }
        }
        Ok((boxes, rpn_loss))
    }

    /// Builds the joint loss of one sample on `g`.
    pub fn loss_graph<R: Rng>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        sample_: &Sample<T>,
        proposals_cfg: &ProposalConfig,
        train: &TrainConfig,
        rng: &mut R,
    ) -> Result<LossVars> {
        let (_, sea) = self.features(g, p, &sample_.image, Some(&sample_.semantic))?;
        let pyr = sea.pyramid;
        let (candidates, rpn_loss) = self.training_proposals(g, p, &pyr, sample_, proposals_cfg, rng)?;
        let (rois, targets) = sample_rois(
            &candidates,
            &sample_.annotations,
            train.rois_per_image,
            train.fg_fraction,
            rng,
        );
        let box_feat = multi_level_roi_align(g, &pyr, &rois, self.config.head.box_roi_size, ROI_SAMPLING)?;
        let (cls, deltas) = self.box_head.forward(g, p, box_feat)?;
        let mut detection = detection_loss(g, cls, deltas, &targets)?;
        if let Some(r) = rpn_loss {
            detection = g.add(detection, r);
        }
        let segmentation = match sea.loss {
            Some(l) => l,
            None => g.constant(Tensor::scalar(T::zero())),
        };
        let mask = self.mask_loss(g, p, &pyr, &rois, &targets, &sample_.annotations)?;
        let a = train.loss_weights;
        let terms = [
            g.scale(detection, T::lit(a[0])),
            g.scale(segmentation, T::lit(a[1])),
            g.scale(mask, T::lit(a[2])),
        ];
        let total = g.add_n(&terms);
        Ok(LossVars {
            detection,
            segmentation,
            mask,
            total,
        })
    }

    fn mask_loss(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        pyr: &PyramidVars,
        rois: &[BBox],
        targets: &[DetectionTarget],
        annotations: &[InstanceAnnotation],
    ) -> Result<Var> {
        let pos: Vec<usize> = (0..rois.len()).filter(|&i| targets[i].label > 0).collect();
        if pos.is_empty() {
            return Ok(g.constant(Tensor::scalar(T::zero())));
        }
        let boxes: Vec<BBox> = pos.iter().map(|&i| rois[i]).collect();
        let classes: Vec<usize> = pos.iter().map(|&i| targets[i].label).collect();
        let sets: Vec<MaskSupervisionSet> = pos
            .iter()
            .map(|&i| roi_mask_targets(&annotations[targets[i].matched.expect("foreground is matched")], &rois[i]))
            .collect::<Result<_>>()?;
        let feat = multi_level_roi_align(g, pyr, &boxes, MASK_ROI_SIZE, ROI_SAMPLING)?;
        match &self.mask {
            MaskBranch::Baseline(h) => {
                let logits = h.forward(g, p, feat);
                let picked = select_class_channel(g, logits, &classes, self.config.num_classes)?;
                let t = crate::supervision::stack_targets::<T>(&sets, 2);
                Ok(g.bce_with_logits(picked, &t))
            }
            MaskBranch::Trident(s) => {
                let out = s.forward(g, p, feat)?;
                Ok(s.loss(g, &out, &sets, &classes)?.total)
            }
        }
    }

    /// Proposals for inference. Jittered-ground-truth mode needs `gts`.
    pub fn inference_proposals(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        pyramid: &PyramidVars,
        height: usize,
        width: usize,
        gts: Option<&[InstanceAnnotation]>,
        cfg: &ProposalConfig,
        seed: u64,
    ) -> Result<Vec<Proposal>> {
        match &self.rpn {
            None => {
                let gts = gts.ok_or(Error::MissingGroundTruth)?;
                let boxes: Vec<BBox> = gts.iter().map(|a| a.bbox).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Ok(gt_jitter_proposals(&boxes, cfg, height, width, &mut rng))
            }
            Some(rpn) => {
                let out = rpn.forward(g, p, pyramid);
                Ok(rpn.propose(g, &out, cfg, height, width))
            }
        }
    }

    /// Full inference on one image.
    pub fn infer(
        &self,
        image: &ImageTensor<T>,
        gts: Option<&[InstanceAnnotation]>,
        proposals_cfg: &ProposalConfig,
        infer: &crate::config::InferConfig,
        seed: u64,
    ) -> Result<Vec<DetectionResult>> {
        let (h, w) = (image.height(), image.width());
        let mut g = Graph::inference();
        let p = self.params.bind(&mut g);
        let (_, sea) = self.features(&mut g, &p, image, None)?;
        let pyr = sea.pyramid;
        let props = self.inference_proposals(&mut g, &p, &pyr, h, w, gts, proposals_cfg, seed)?;
        if props.is_empty() {
            return Ok(Vec::new());
        }
        let boxes: Vec<BBox> = props.iter().map(|p| p.bbox).collect();
        let feat = multi_level_roi_align(&mut g, &pyr, &boxes, self.config.head.box_roi_size, ROI_SAMPLING)?;
        let (cls, deltas) = self.box_head.forward(&mut g, &p, feat)?;
        let probs = kernels::softmax_axis1(g.value(cls));
        let k = self.config.num_classes;
        let dv = g.value(deltas).data();
        let mut cands = Vec::new();
        for (i, prop) in props.iter().enumerate() {
            for c in 1..=k {
                let score = probs.data()[i * (k + 1) + c].as_f64();
                if score <= infer.score_floor {
                    continue;
                }
                let off = i * 4 * k + (c - 1) * 4;
                let d = [0, 1, 2, 3].map(|j| dv[off + j].as_f64());
                let b = decode_deltas(&prop.bbox, &d);
                if !b.is_finite() {
                    continue;
                }
                cands.push(Candidate {
                    bbox: sanitize_box(&b, w, h),
                    score,
                    class_id: c,
                });
            }
        }
        let dets = select_detections(&cands, infer.nms, infer.max_dets);
        let mut results = Vec::with_capacity(dets.len());
        for chunk in dets.chunks(MASK_CHUNK) {
            let boxes: Vec<BBox> = chunk.iter().map(|d| d.bbox).collect();
            let classes: Vec<usize> = chunk.iter().map(|d| d.class_id).collect();
            let feat = multi_level_roi_align(&mut g, &pyr, &boxes, MASK_ROI_SIZE, ROI_SAMPLING)?;
            let (logits, _) = self.mask.forward(&mut g, &p, feat)?;
            let picked = select_class_channel(&mut g, logits, &classes, k)?;
            let lv = g.value(picked).data();
            for (r, d) in chunk.iter().enumerate() {
                let probs: Vec<f64> = lv[r * 784..(r + 1) * 784]
                    .iter()
                    .map(|&z| kernels::sigmoid(z).as_f64())
                    .collect();
                results.push(DetectionResult {
                    bbox: d.bbox,
                    class_id: d.class_id,
                    score: d.score,
                    mask: paste_mask(&probs, 28, &d.bbox, h, w, infer.mask_threshold),
                });
            }
        }
        Ok(results)
    }

    /// Pyramid before and after attention with the branch outputs.
    pub fn sea_maps(&self, image: &ImageTensor<T>) -> Result<SeaMaps<T>> {
        let mut g = Graph::inference();
        let p = self.params.bind(&mut g);
        let (raw, sea) = self.features(&mut g, &p, image, None)?;
        Ok(SeaMaps {
            before: FeaturePyramid::from_graph(&g, &raw),
            after: FeaturePyramid::from_graph(&g, &sea.pyramid),
            attention: sea.branch.as_ref().map(|b| g.value(b.attention).clone()),
            probabilities: sea.branch.as_ref().map(|b| b.probabilities(&g)),
        })
    }
}

/// Labels candidates against the ground truth and samples up to `per_image`
/// of them with at most `fg_fraction` foreground. Foreground comes first.
pub fn sample_rois<R: Rng>(
    candidates: &[BBox],
    gts: &[InstanceAnnotation],
    per_image: usize,
    fg_fraction: f64,
    rng: &mut R,
) -> (Vec<BBox>, Vec<DetectionTarget>) {
    let targets = detection_targets(candidates, gts, FG_IOU);
    let fg: Vec<usize> = (0..candidates.len()).filter(|&i| targets[i].label > 0).collect();
    let bg: Vec<usize> = (0..candidates.len()).filter(|&i| targets[i].label == 0).collect();
    let n_fg = fg.len().min((per_image as f64 * fg_fraction).round() as usize);
    let n_bg = bg.len().min(per_image - n_fg);
    let mut pick: Vec<usize> = sample(rng, fg.len(), n_fg).into_iter().map(|i| fg[i]).collect();
    pick.sort_unstable();
    let mut pick_bg: Vec<usize> = sample(rng, bg.len(), n_bg).into_iter().map(|i| bg[i]).collect();
    pick_bg.sort_unstable();
    pick.extend(pick_bg);
    (
        pick.iter().map(|&i| candidates[i]).collect(),
        pick.iter().map(|&i| targets[i].clone()).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn joint_loss_examples() {
        assert_eq!(joint_loss(1.0, 2.0, 3.0, [1.0; 3]).unwrap().l_total, 6.0);
        assert_eq!(joint_loss(0.7, 2.5, 9.0, [0.0; 3]).unwrap().l_total, 0.0);
        let r = joint_loss(0.3, 0.2, 0.1, [2.0, 1.0, 1.0]).unwrap();
        assert_eq!(r.l_total, 2.0 * 0.3 + 0.2 + 0.1);
        assert!(matches!(
            joint_loss(f64::NAN, 0.0, 0.0, [1.0; 3]),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn roi_sampling_respects_fraction() {
        use rand::SeedableRng;
        let gt = InstanceAnnotation::from_mask(1, BinaryMask::rect(64, 64, 10, 10, 30, 30)).unwrap();
        let mut cands = vec![gt.bbox; 40];
        cands.extend((0..60).map(|i| BBox::new(40.0, i as f64 * 0.5, 10.0, 10.0)));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (rois, t) = sample_rois(&cands, std::slice::from_ref(&gt), 64, 0.25, &mut rng);
        assert_eq!(rois.len(), 64);
        assert_eq!(t.iter().filter(|t| t.label > 0).count(), 16);
        assert!(t[..16].iter().all(|t| t.label == 1));
    }
}
