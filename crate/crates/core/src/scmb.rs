//! Mask branches. [`Scmb`] is the trident head: a shared FCN feeds 7x7,
//! 14x14 and 28x28 paths, each with its own supervised guidance prediction,
//! and the paths are fused into per-class 28x28 mask logits. [`MaskHead`] is
//! the single-scale baseline (FCN, 2x2 deconvolution, per-class 1x1).
//!
//! With the branch set `{14}` the trident head fuses through the baseline's
//! deconvolution structure under the same parameter names, so the two heads
//! compute the same masks from the same weights.

use rand::Rng;
use seascn_tensor::{kernels, Graph, Scalar, Tensor, Var};

use crate::config::{BranchSet, FusionMode, ScmbConfig};
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvStack};
use crate::params::{init_tensor, Bound, Init, ParamStore};
use crate::supervision::{stack_targets, MaskSupervisionSet};

/// Side lengths of the three paths.
pub const PATH_SIZES: [usize; 3] = [7, 14, 28];

const FCN_PREFIX: &str = "mask.fcn";
const DECONV: &str = "mask.deconv";
const BASE_PREDICTOR: &str = "mask.predictor";

#[derive(Clone, Debug)]
struct Deconv {
    ci: usize,
    co: usize,
}

impl Deconv {
    fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        store.insert(
            format!("{DECONV}.weight"),
            init_tensor(rng, &[self.ci, self.co, 2, 2], self.ci, Init::He),
        );
        store.insert(format!("{DECONV}.bias"), Tensor::zeros(&[self.co]));
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let w = p.get(&format!("{DECONV}.weight"));
        let b = p.get(&format!("{DECONV}.bias"));
        let y = g.conv_transpose2x2(x, w, b);
        g.relu(y)
    }
}

/// Single-scale baseline mask head.
#[derive(Clone, Debug)]
pub struct MaskHead {
    fcn: ConvStack,
    deconv: Deconv,
    predictor: Conv,
}

impl MaskHead {
    pub fn new(roi_channels: usize, num_classes: usize) -> Self {
        Self {
            fcn: ConvStack::new(FCN_PREFIX, roi_channels, roi_channels, 4),
            deconv: Deconv {
                ci: roi_channels,
                co: roi_channels,
            },
            predictor: Conv::new(BASE_PREDICTOR, roi_channels, num_classes, 1, 1),
        }
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.fcn.init(store, rng);
        self.deconv.init(store, rng);
        self.predictor.init(store, rng, Init::Normal(0.001));
    }

    /// `[n, c, 14, 14]` RoI features to `[n, C, 28, 28]` mask logits.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, roi: Var) -> Var {
        let x = self.fcn.forward(g, p, roi);
        let up = self.deconv.forward(g, p, x);
        self.predictor.forward(g, p, up)
    }
}

/// Graph handles produced by [`Scmb::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ScmbVars {
    /// Trident features at 7, 14, 28, each with half the RoI channels.
    pub features: [Var; 3],
    /// Guidance logits `[n, 1, s, s]` per path.
    pub guidance: [Var; 3],
    /// Per-class fused logits `[n, C, 28, 28]`.
    pub mask_logits: Var,
}

/// Loss terms of the trident head.
#[derive(Clone, Copy, Debug)]
pub struct ScmbLossVars {
    pub scg: Var,
    pub fusion: Var,
    pub total: Var,
}

#[derive(Clone, Debug)]
pub struct Scmb {
    cfg: ScmbConfig,
    roi_channels: usize,
    num_classes: usize,
    fcn: ConvStack,
    reduce: [Conv; 3],
    guide: [Conv; 3],
    fuse: ConvStack,
    predictor: Conv,
    deconv: Deconv,
    base_predictor: Conv,
}

impl Scmb {
    pub fn new(cfg: &ScmbConfig, roi_channels: usize, num_classes: usize) -> Self {
        let half = roi_channels / 2;
        let fused_in = match cfg.fusion {
            FusionMode::Concate => half * cfg.branches.len(),
            FusionMode::Multiply => half,
        };
        Self {
            cfg: cfg.clone(),
            roi_channels,
            num_classes,
            fcn: ConvStack::new(FCN_PREFIX, roi_channels, roi_channels, 4),
            reduce: [1, 2, 3].map(|i| Conv::new(format!("scmb.reduce.{i}"), roi_channels, half, 1, 1)),
            guide: [1, 2, 3].map(|i| Conv::new(format!("scmb.guide.{i}"), half, 1, 1, 1)),
            fuse: ConvStack::new("scmb.fuse", fused_in, cfg.channels, 4),
            predictor: Conv::new("scmb.predictor", cfg.channels, num_classes, 1, 1),
            deconv: Deconv {
                ci: roi_channels,
                co: roi_channels,
            },
            base_predictor: Conv::new(BASE_PREDICTOR, roi_channels, num_classes, 1, 1),
        }
    }

    pub fn config(&self) -> &ScmbConfig {
        &self.cfg
    }

    fn single_branch(&self) -> bool {
        self.cfg.branches == BranchSet::S14
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.fcn.init(store, rng);
        for c in &self.reduce {
            c.init(store, rng, Init::He);
        }
        for c in &self.guide {
            c.init(store, rng, Init::Normal(0.01));
        }
        if self.single_branch() {
            self.deconv.init(store, rng);
            self.base_predictor.init(store, rng, Init::Normal(0.001));
        } else {
            self.fuse.init(store, rng);
            self.predictor.init(store, rng, Init::Normal(0.001));
        }
    }

    /// Names of the 1x1 channel-halving convolution of path `i` (0..3).
    pub fn reduce_param_names(&self, i: usize) -> [String; 2] {
        [self.reduce[i].weight_name(), self.reduce[i].bias_name()]
    }

    pub fn predictor_param_names(&self) -> [String; 2] {
        let p = if self.single_branch() {
            &self.base_predictor
        } else {
            &self.predictor
        };
        [p.weight_name(), p.bias_name()]
    }

    pub fn guide_param_names(&self, i: usize) -> [String; 2] {
        [self.guide[i].weight_name(), self.guide[i].bias_name()]
    }

    /// Shared FCN plus the three resized, channel-halved paths.
    pub fn trident<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, roi: Var) -> Result<(Var, [Var; 3])> {
        let (_, c, h, w) = g.value(roi).dims4()?;
        if c != self.roi_channels {
            return Err(Error::ChannelMismatch {
                what: "RoI feature".into(),
                expected: self.roi_channels,
                actual: c,
            });
        }
        if (h, w) != (14, 14) {
            return Err(Error::SizeMismatch {
                what: "RoI feature",
                expected: (14, 14),
                actual: (h, w),
            });
        }
        let x = self.fcn.forward(g, p, roi);
        let down = g.avg_pool(x, 2);
        let up = g.resize_bilinear(x, 28, 28);
        let f1 = self.reduce[0].forward(g, p, down);
        let f2 = self.reduce[1].forward(g, p, x);
        let f3 = self.reduce[2].forward(g, p, up);
        Ok((x, [f1, f2, f3]))
    }

    /// Guidance logits per path; sigmoid gives the predictions.
    pub fn guidance<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, features: &[Var; 3]) -> [Var; 3] {
        [0, 1, 2].map(|i| self.guide[i].forward(g, p, features[i]))
    }

    /// Fuses the paths in the branch set into per-class 28x28 logits.
    pub fn fusion<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, trunk: Var, features: &[Var; 3]) -> Var {
        if self.single_branch() {
            let up = self.deconv.forward(g, p, trunk);
            return self.base_predictor.forward(g, p, up);
        }
        let used = self.cfg.branches.paths();
        let mut maps = Vec::with_capacity(3);
        for i in 0..3 {
            if used[i] {
                maps.push(g.resize_bilinear(features[i], 28, 28));
            }
        }
        let fused = match self.cfg.fusion {
            FusionMode::Concate => g.concat_channels(&maps),
            FusionMode::Multiply => {
                let mut acc = maps[0];
                for &m in &maps[1..] {
                    acc = g.mul(acc, m);
                }
                acc
            }
        };
        let x = self.fuse.forward(g, p, fused);
        self.predictor.forward(g, p, x)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, roi: Var) -> Result<ScmbVars> {
        let (trunk, features) = self.trident(g, p, roi)?;
        let guidance = self.guidance(g, p, &features);
        let mask_logits = self.fusion(g, p, trunk, &features);
        Ok(ScmbVars {
            features,
            guidance,
            mask_logits,
        })
    }

    /// Guidance plus fusion loss, averaged over the RoIs given. `classes`
    /// holds each RoI's ground-truth class (1..=C).
    pub fn loss<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        out: &ScmbVars,
        targets: &[MaskSupervisionSet],
        classes: &[usize],
    ) -> Result<ScmbLossVars> {
        let n = g.shape(out.mask_logits)[0];
        if targets.len() != n || classes.len() != n {
            return Err(Error::SizeMismatch {
                what: "mask targets",
                expected: (n, n),
                actual: (targets.len(), classes.len()),
            });
        }
        let used = self.cfg.branches.paths();
        let mut terms = Vec::with_capacity(3);
        for i in 0..3 {
            if used[i] {
                let t = stack_targets::<T>(targets, i);
                terms.push(g.bce_with_logits(out.guidance[i], &t));
            }
        }
        let scg = g.add_n(&terms);
        let picked = select_class_channel(g, out.mask_logits, classes, self.num_classes)?;
        let t28 = stack_targets::<T>(targets, 2);
        let fusion = g.bce_with_logits(picked, &t28);
        let total = g.add(scg, fusion);
        Ok(ScmbLossVars { scg, fusion, total })
    }
}

/// Picks channel `classes[r] - 1` of each RoI from `[n, C, h, w]` logits.
pub fn select_class_channel<T: Scalar>(g: &mut Graph<T>, logits: Var, classes: &[usize], num_classes: usize) -> Result<Var> {
    let (n, c, h, w) = g.value(logits).dims4()?;
    let plane = h * w;
    let mut idx = Vec::with_capacity(n * plane);
    for (r, &k) in classes.iter().enumerate() {
        if k == 0 || k > num_classes.min(c) {
            return Err(Error::InvalidClass(k));
        }
        let base = (r * c + k - 1) * plane;
        idx.extend(base..base + plane);
    }
    Ok(g.gather(logits, idx, &[n, 1, h, w]))
}

/// Guidance predictions (probabilities) of one RoI.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidancePredictions<T> {
    pub p1: Tensor<T>,
    pub p2: Tensor<T>,
    pub p3: Tensor<T>,
}

impl<T: Scalar> GuidancePredictions<T> {
    /// Sigmoid of guidance logits of RoI `r`.
    pub fn from_logits(g: &Graph<T>, vars: &ScmbVars, r: usize) -> Self {
        let pick = |v: Var| {
            let t = g.value(v);
            let s = t.shape()[2];
            let data = t.data()[r * s * s..(r + 1) * s * s].iter().map(|&z| kernels::sigmoid(z)).collect();
            Tensor::from_vec(&[s, s], data).expect("shape")
        };
        Self {
            p1: pick(vars.guidance[0]),
            p2: pick(vars.guidance[1]),
            p3: pick(vars.guidance[2]),
        }
    }

    pub fn path(&self, i: usize) -> &Tensor<T> {
        match i {
            0 => &self.p1,
            1 => &self.p2,
            _ => &self.p3,
        }
    }
}

/// Mean binary cross-entropy between probabilities and a binary target.
/// Probabilities are clamped away from 0 and 1 by 1e-15.
pub fn bce_mean<T: Scalar>(pred: &[T], target: &[u8]) -> f64 {
    let eps = 1e-15;
    let total: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let p = p.as_f64().clamp(eps, 1.0 - eps);
            if t != 0 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    total / pred.len() as f64
}

fn check_size<T: Scalar>(pred: &Tensor<T>, side: usize) -> Result<()> {
    let s = pred.shape();
    if s.len() != 2 || s[0] != side || s[1] != side {
        return Err(Error::SizeMismatch {
            what: "guidance prediction",
            expected: (side, side),
            actual: (s[0], s.get(1).copied().unwrap_or(1)),
        });
    }
    Ok(())
}

/// Sum over the paths in `branches` of the mean BCE of each guidance map.
pub fn scg_loss<T: Scalar>(preds: &GuidancePredictions<T>, targets: &MaskSupervisionSet, branches: BranchSet) -> Result<f64> {
    let mut total = 0.0;
    for (i, used) in branches.paths().into_iter().enumerate() {
        if used {
            check_size(preds.path(i), PATH_SIZES[i])?;
            total += bce_mean(preds.path(i).data(), targets.path(i).data());
        }
    }
    Ok(total)
}

/// Guidance loss plus the BCE of the ground-truth class channel of
/// `fusion_logits [C, 28, 28]` against the 28x28 target.
pub fn scmb_loss<T: Scalar>(
    fusion_logits: &Tensor<T>,
    preds: &GuidancePredictions<T>,
    targets: &MaskSupervisionSet,
    gt_class: usize,
    branches: BranchSet,
) -> Result<f64> {
    let s = fusion_logits.shape();
    if s.len() != 3 || s[1] != 28 || s[2] != 28 {
        return Err(Error::SizeMismatch {
            what: "fusion logits",
            expected: (28, 28),
            actual: (s.get(1).copied().unwrap_or(0), s.get(2).copied().unwrap_or(0)),
        });
    }
    if gt_class == 0 || gt_class > s[0] {
        return Err(Error::InvalidClass(gt_class));
    }
    let plane = &fusion_logits.data()[(gt_class - 1) * 784..gt_class * 784];
    let probs: Vec<T> = plane.iter().map(|&z| kernels::sigmoid(z)).collect();
    Ok(scg_loss(preds, targets, branches)? + bce_mean(&probs, targets.m28.data()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::BinaryMask;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn half_preds(v: f64) -> GuidancePredictions<f64> {
        GuidancePredictions {
            p1: Tensor::full(&[7, 7], v),
            p2: Tensor::full(&[14, 14], v),
            p3: Tensor::full(&[28, 28], v),
        }
    }

    fn random_targets(rng: &mut ChaCha8Rng) -> MaskSupervisionSet {
        let mut m = |s: usize| BinaryMask::from_fn(s, s, |_, _| rng.random_bool(0.5));
        MaskSupervisionSet {
            m7: m(7),
            m14: m(14),
            m28: m(28),
        }
    }

    #[test]
    fn bce_at_half_is_ln2_per_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = random_targets(&mut rng);
        let l = scg_loss(&half_preds(0.5), &t, BranchSet::S7_14_28).unwrap();
        assert!((l - 3.0 * 2f64.ln()).abs() < 1e-9);
        let l2 = scg_loss(&half_preds(0.5), &t, BranchSet::S14_28).unwrap();
        assert!((l2 - 2.0 * 2f64.ln()).abs() < 1e-12);
        let logits = Tensor::zeros(&[3, 28, 28]);
        let total = scmb_loss(&logits, &half_preds(0.5), &t, 2, BranchSet::S7_14_28).unwrap();
        assert!((total - 4.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn near_perfect_predictions_have_small_loss() {
        let eps: f64 = 1e-4;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_targets(&mut rng);
        let clamp = |m: &BinaryMask| {
            Tensor::from_vec(
                &[m.height(), m.width()],
                m.data().iter().map(|&v| if v != 0 { 1.0 - eps } else { eps }).collect(),
            )
            .unwrap()
        };
        let preds = GuidancePredictions {
            p1: clamp(&t.m7),
            p2: clamp(&t.m14),
            p3: clamp(&t.m28),
        };
        let scg = scg_loss(&preds, &t, BranchSet::S7_14_28).unwrap();
        assert!(scg < 1e-3);
        assert!((scg - 3.0 * -(1.0 - eps).ln()).abs() < 1e-12);
        // logit of 1 - eps for positive pixels, of eps for negatives
        let z = ((1.0 - eps) / eps).ln();
        let logits = Tensor::from_vec(
            &[1, 28, 28],
            t.m28.data().iter().map(|&v| if v != 0 { z } else { -z }).collect(),
        )
        .unwrap();
        assert!(scmb_loss(&logits, &preds, &t, 1, BranchSet::S7_14_28).unwrap() < 4e-3);
    }

    #[test]
    fn bce_matches_per_pixel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pred: Vec<f64> = (0..49).map(|_| rng.random_range(0.01..0.99)).collect();
        let target: Vec<u8> = (0..49).map(|_| u8::from(rng.random_bool(0.4))).collect();
        let mut oracle = 0.0;
        for i in 0..49 {
            let t = f64::from(target[i]);
            oracle += -(t * pred[i].ln() + (1.0 - t) * (1.0 - pred[i]).ln());
        }
        oracle /= 49.0;
        let got = bce_mean(&pred, &target);
        assert!(((got - oracle) / oracle).abs() < 1e-10);
    }

    #[test]
    fn scmb_loss_rejects_bad_class() {
        let t = random_targets(&mut ChaCha8Rng::seed_from_u64(3));
        let logits = Tensor::<f64>::zeros(&[2, 28, 28]);
        for bad in [0, 3] {
            assert!(matches!(
                scmb_loss(&logits, &half_preds(0.5), &t, bad, BranchSet::S7_14_28),
                Err(Error::InvalidClass(_))
            ));
        }
    }

    fn build(cfg: &ScmbConfig, seed: u64) -> (Scmb, ParamStore<f64>) {
        let m = Scmb::new(cfg, 4, 3);
        let mut s = ParamStore::new();
        m.init(&mut s, &mut ChaCha8Rng::seed_from_u64(seed));
        (m, s)
    }

    fn small_cfg(branches: BranchSet, fusion: FusionMode) -> ScmbConfig {
        ScmbConfig {
            enabled: true,
            branches,
            fusion,
            channels: 6,
        }
    }

    #[test]
    fn trident_and_fusion_shapes() {
        for branches in [BranchSet::S7_14, BranchSet::S14_28, BranchSet::S7_14_28, BranchSet::S14] {
            for fusion in [FusionMode::Concate, FusionMode::Multiply] {
                let (m, s) = build(&small_cfg(branches, fusion), 4);
                let mut g = Graph::new();
                let p = s.bind(&mut g);
                let roi = g.constant(Tensor::from_fn(&[2, 4, 14, 14], |i| (i as f64 * 0.37).sin()));
                let out = m.forward(&mut g, &p, roi).unwrap();
                for (i, &side) in PATH_SIZES.iter().enumerate() {
                    assert_eq!(g.shape(out.features[i]), &[2, 2, side, side]);
                    assert_eq!(g.shape(out.guidance[i]), &[2, 1, side, side]);
                }
                assert_eq!(g.shape(out.mask_logits), &[2, 3, 28, 28]);
            }
        }
    }

    #[test]
    fn zero_reduce_weights_give_bias_constants() {
        let (m, mut s) = build(&small_cfg(BranchSet::S7_14_28, FusionMode::Concate), 5);
        for i in 0..3 {
            let [w, b] = m.reduce_param_names(i);
            s.get_mut(&w).unwrap().data_mut().fill(0.0);
            s.get_mut(&b).unwrap().data_mut().copy_from_slice(&[0.5, -1.5]);
        }
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let roi = g.constant(Tensor::from_fn(&[1, 4, 14, 14], |i| i as f64 * 0.01));
        let out = m.forward(&mut g, &p, roi).unwrap();
        for f in out.features {
            let t = g.value(f);
            let plane = t.shape()[2] * t.shape()[3];
            assert!(t.data()[..plane].iter().all(|&v| v == 0.5));
            assert!(t.data()[plane..].iter().all(|&v| v == -1.5));
        }
    }

    #[test]
    fn zero_guidance_and_predictor_give_half() {
        let (m, mut s) = build(&small_cfg(BranchSet::S7_14_28, FusionMode::Concate), 6);
        let mut names: Vec<String> = (0..3).flat_map(|i| m.guide_param_names(i)).collect();
        names.extend(m.predictor_param_names());
        for n in names {
            s.get_mut(&n).unwrap().data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let roi = g.constant(Tensor::from_fn(&[1, 4, 14, 14], |i| (i as f64).cos()));
        let out = m.forward(&mut g, &p, roi).unwrap();
        let preds = GuidancePredictions::from_logits(&g, &out, 0);
        for i in 0..3 {
            assert!(preds.path(i).data().iter().all(|&v| v == 0.5));
        }
        assert!(g.value(out.mask_logits).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn graph_loss_matches_value_loss() {
        let cfg = small_cfg(BranchSet::S7_14_28, FusionMode::Concate);
        let (m, s) = build(&cfg, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let targets = vec![random_targets(&mut rng), random_targets(&mut rng)];
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let roi = g.constant(Tensor::from_fn(&[2, 4, 14, 14], |i| (i as f64 * 0.11).sin()));
        let out = m.forward(&mut g, &p, roi).unwrap();
        let l = m.loss(&mut g, &out, &targets, &[2, 3]).unwrap();
        let graph_total = g.value(l.total).item();
        let logits = g.value(out.mask_logits);
        let mut want = 0.0;
        for (r, (t, cls)) in targets.iter().zip([2, 3]).enumerate() {
            let one = Tensor::from_vec(&[3, 28, 28], logits.data()[r * 3 * 784..(r + 1) * 3 * 784].to_vec()).unwrap();
            let preds = GuidancePredictions::from_logits(&g, &out, r);
            want += scmb_loss(&one, &preds, t, cls, cfg.branches).unwrap();
        }
        want /= 2.0;
        assert!((graph_total - want).abs() < 1e-10 * want.max(1.0));
    }
}
