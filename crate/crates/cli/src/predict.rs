//! Inference over a dataset and scoring against its manifest.

use anyhow::Result;
use seascn::config::ProposalMode;
use seascn::dataio::{rle_encode, Dataset, RgbImage};
use seascn::eval::{evaluate, EvalConfig, EvalReport, ResultRecord};
use seascn::{DetectionResult, Detector, InstanceAnnotation, RunConfig, Scalar};

use crate::prep;

/// Detections on one image in its own frame. Jittered-ground-truth proposal
/// mode draws its proposals from `gts`.
pub fn detect<T: Scalar>(
    det: &Detector<T>,
    img: &RgbImage,
    gts: &[InstanceAnnotation],
    cfg: &RunConfig,
    seed: u64,
) -> Result<Vec<DetectionResult>> {
    let image = prep::image_tensor::<T>(img)?;
    let padded = prep::pad_annotations(gts, img.height, img.width);
    let gts = (det.config().proposal_mode == ProposalMode::GtJitter).then_some(padded.as_slice());
    let found = det.infer(&image, gts, &cfg.proposals, &cfg.infer, seed)?;
    let (h, w) = (img.height, img.width);
    Ok(found
        .into_iter()
        .map(|d| DetectionResult {
            bbox: d.bbox.clip(w as f64, h as f64),
            mask: d.mask.crop(0, 0, w, h),
            ..d
        })
        .filter(|d| d.bbox.area() > 0.0)
        .collect())
}

/// Results records for every image of `data`.
pub fn predict<T: Scalar>(det: &Detector<T>, data: &Dataset, cfg: &RunConfig) -> Result<Vec<ResultRecord>> {
    let mut out = Vec::new();
    for (rec, img) in data.manifest.images.iter().zip(&data.images) {
        let gts = data.manifest.instances(rec.id)?;
        for d in detect(det, img, &gts, cfg, cfg.seed ^ rec.id)? {
            out.push(ResultRecord {
                image_id: rec.id,
                category_id: d.class_id,
                score: d.score,
                bbox: d.bbox,
                segmentation: rle_encode(&d.mask),
            });
        }
    }
    Ok(out)
}

pub fn eval_config(cfg: &RunConfig) -> EvalConfig {
    EvalConfig::with_max_dets(cfg.eval.max_dets)
}

pub fn evaluate_detector<T: Scalar>(det: &Detector<T>, data: &Dataset, cfg: &RunConfig) -> Result<EvalReport> {
    let results = predict(det, data, cfg)?;
    Ok(evaluate(&results, &data.manifest, &eval_config(cfg))?)
}
