//! Semantic attention over the pyramid: rescale every level to one uniform
//! scale and average, enrich the average with a supervised segmentation
//! branch whose attention stream reweights it, and add the result back to
//! every level.

use rand::Rng;
use seascn_tensor::{kernels, Graph, Scalar, Tensor, Var};

use crate::config::{FusionMode, SeaConfig};
use crate::error::{Error, Result};
use crate::fpn::{FeaturePyramid, PyramidVars, LEVELS};
use crate::nn::{Conv, ConvStack};
use crate::params::{Bound, Init, ParamStore};
use crate::supervision::SemanticLabelMap;

/// Resizes `x` from pyramid level `from` to the size of level `to`: average
/// pooling when shrinking, bilinear interpolation when enlarging.
pub fn resize_level<T: Scalar>(g: &mut Graph<T>, x: Var, from: usize, to: usize) -> Var {
    let (_, _, h, w) = g.value(x).dims4().expect("rank 4");
    if from < to {
        g.avg_pool(x, 1 << (to - from))
    } else if from > to {
        let f = 1 << (from - to);
        g.resize_bilinear(x, h * f, w * f)
    } else {
        x
    }
}

/// Mean of all five levels resized to `uniform_level`.
pub fn rescale_pyramid<T: Scalar>(g: &mut Graph<T>, pyramid: &PyramidVars, uniform_level: usize) -> Var {
    let resized: Vec<Var> = LEVELS
        .iter()
        .map(|&l| resize_level(g, pyramid.level(l), l, uniform_level))
        .collect();
    let s = g.add_n(&resized);
    g.scale(s, T::lit(1.0 / LEVELS.len() as f64))
}

/// Tensor-level [`rescale_pyramid`].
pub fn rescale_pyramid_tensor<T: Scalar>(pyramid: &FeaturePyramid<T>, uniform_level: usize) -> Tensor<T> {
    let mut g = Graph::inference();
    let vars = pyramid.to_graph(&mut g, false);
    let out = rescale_pyramid(&mut g, &vars, uniform_level);
    g.value(out).clone()
}

/// Adds `enriched` (at `uniform_level`) back onto every level.
pub fn integrate<T: Scalar>(g: &mut Graph<T>, pyramid: &PyramidVars, enriched: Var, uniform_level: usize) -> PyramidVars {
    let mut levels = pyramid.levels;
    for (slot, &l) in levels.iter_mut().zip(LEVELS.iter()) {
        let r = resize_level(g, enriched, uniform_level, l);
        *slot = g.add(r, *slot);
    }
    PyramidVars { levels }
}

/// Intermediate tensors of the enrichment branch.
#[derive(Clone, Debug)]
pub struct SeaBranchVars {
    /// F^I: output of the four 3x3 convolutions.
    pub intermediate: Var,
    /// F^SEA: attention stream.
    pub attention: Var,
    /// Raw per-pixel class scores, `C + 1` channels.
    pub logits: Var,
    /// F^SE: the reweighted scale-normalized map.
    pub enriched: Var,
}

impl SeaBranchVars {
    /// Per-pixel softmax of the logits.
    pub fn probabilities<T: Scalar>(&self, g: &Graph<T>) -> Tensor<T> {
        kernels::softmax_axis1(g.value(self.logits))
    }
}

/// Result of [`SeaModule::forward`].
#[derive(Clone, Debug)]
pub struct SeaOutput {
    pub pyramid: PyramidVars,
    /// Absent when the module is disabled.
    pub branch: Option<SeaBranchVars>,
    /// Present iff a target was supplied to an enabled module.
    pub loss: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct SeaModule {
    cfg: SeaConfig,
    channels: usize,
    num_classes: usize,
    trunk: ConvStack,
    attention: Conv,
    predict: Conv,
    reduce: Conv,
}

impl SeaModule {
    pub fn new(cfg: &SeaConfig, channels: usize, num_classes: usize) -> Self {
        Self {
            cfg: cfg.clone(),
            channels,
            num_classes,
            trunk: ConvStack::new("sea.enrich", channels, channels, 4),
            attention: Conv::new("sea.attention", channels, channels, 1, 1),
            predict: Conv::new("sea.predict", channels, num_classes + 1, 1, 1),
            reduce: Conv::new("sea.reduce", 2 * channels, channels, 1, 1),
        }
    }

    pub fn config(&self) -> &SeaConfig {
        &self.cfg
    }

    /// Registers parameters; a disabled module owns none.
    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        if !self.cfg.enabled {
            return;
        }
        self.trunk.init(store, rng);
        self.attention.init(store, rng, Init::Normal(0.01));
        self.predict.init(store, rng, Init::Normal(0.01));
        if self.cfg.fusion == FusionMode::Concate {
            self.reduce.init(store, rng, Init::Normal(0.01));
        }
    }

    /// Names of the attention-stream parameters.
    pub fn attention_param_names(&self) -> [String; 2] {
        [self.attention.weight_name(), self.attention.bias_name()]
    }

    pub fn enrich<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, pnorm: Var) -> Result<SeaBranchVars> {
        let c = g.shape(pnorm)[1];
        if c != self.channels {
            return Err(Error::ChannelMismatch {
                what: "scale-normalized map".into(),
                expected: self.channels,
                actual: c,
            });
        }
        for conv in self.trunk.layers.iter().chain([&self.attention, &self.predict]) {
            let w = p.try_get(&conv.weight_name())?;
            let got = g.shape(w)[..2].to_vec();
            if got != [conv.co, conv.ci] {
                return Err(Error::ChannelMismatch {
                    what: conv.weight_name(),
                    expected: conv.co,
                    actual: got[0],
                });
            }
        }
        let intermediate = self.trunk.forward(g, p, pnorm);
        let attention = self.attention.forward(g, p, intermediate);
        let logits = self.predict.forward(g, p, intermediate);
        let enriched = match self.cfg.fusion {
            FusionMode::Multiply => g.mul(pnorm, attention),
            FusionMode::Concate => {
                let cat = g.concat_channels(&[pnorm, attention]);
                self.reduce.forward(g, p, cat)
            }
        };
        Ok(SeaBranchVars {
            intermediate,
            attention,
            logits,
            enriched,
        })
    }

    /// Rescale, enrich, integrate. The target may be at any resolution; it is
    /// resampled to the uniform scale by nearest-neighbour label sampling.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        pyramid: &PyramidVars,
        target: Option<&SemanticLabelMap>,
    ) -> Result<SeaOutput> {
        if !self.cfg.enabled {
            return Ok(SeaOutput {
                pyramid: *pyramid,
                branch: None,
                loss: None,
            });
        }
        let level = self.cfg.uniform_level;
        let pnorm = rescale_pyramid(g, pyramid, level);
        let branch = self.enrich(g, p, pnorm)?;
        let out = integrate(g, pyramid, branch.enriched, level);
        let loss = match target {
            Some(t) => {
                let (_, _, h, w) = g.value(branch.logits).dims4()?;
                let t = if (t.height(), t.width()) == (h, w) {
                    t.clone()
                } else {
                    t.resize_nearest(h, w)
                };
                Some(segmentation_loss_var(g, branch.logits, &t, self.num_classes)?)
            }
            None => None,
        };
        Ok(SeaOutput {
            pyramid: out,
            branch: Some(branch),
            loss,
        })
    }
}

fn check_labels(target: &SemanticLabelMap, num_classes: usize) -> Result<()> {
    match target.labels().iter().find(|&&l| usize::from(l) > num_classes) {
        Some(&l) => Err(Error::LabelOutOfRange {
            label: usize::from(l),
            max: num_classes,
        }),
        None => Ok(()),
    }
}

/// Mean per-pixel cross-entropy of the softmax of `logits [1, C+1, h, w]`.
pub fn segmentation_loss_var<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    target: &SemanticLabelMap,
    num_classes: usize,
) -> Result<Var> {
    let (_, k, h, w) = g.value(logits).dims4()?;
    if (target.height(), target.width()) != (h, w) {
        return Err(Error::SizeMismatch {
            what: "semantic target",
            expected: (h, w),
            actual: (target.height(), target.width()),
        });
    }
    check_labels(target, num_classes.min(k - 1))?;
    let labels: Vec<usize> = target.labels().iter().map(|&l| usize::from(l)).collect();
    Ok(g.softmax_cross_entropy(logits, &labels))
}

/// Mean negative log probability of the true class, from probabilities
/// `[1, C+1, h, w]`.
pub fn segmentation_loss<T: Scalar>(probabilities: &Tensor<T>, target: &SemanticLabelMap) -> Result<f64> {
    let (_, k, h, w) = probabilities.dims4()?;
    if (target.height(), target.width()) != (h, w) {
        return Err(Error::SizeMismatch {
            what: "semantic target",
            expected: (h, w),
            actual: (target.height(), target.width()),
        });
    }
    check_labels(target, k - 1)?;
    let plane = h * w;
    let total: f64 = target
        .labels()
        .iter()
        .enumerate()
        .map(|(p, &l)| -probabilities.data()[usize::from(l) * plane + p].as_f64().ln())
        .sum();
    Ok(total / plane as f64)
}
