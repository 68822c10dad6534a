//! Plain convolutional backbone and the feature pyramid on top of it.

use rand::Rng;
use seascn_tensor::{Graph, Scalar, Tensor, Var};

use crate::config::{BackboneConfig, FpnConfig};
use crate::error::{Error, Result};
use crate::nn::Conv;
use crate::params::{Bound, Init, ParamStore};

/// Pyramid level indices, finest first.
pub const LEVELS: [usize; 5] = [2, 3, 4, 5, 6];

pub fn level_stride(level: usize) -> usize {
    1 << level
}

/// RGB image in `[1, 3, h, w]` layout with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor<T> {
    data: Tensor<T>,
}

impl<T: Scalar> ImageTensor<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        let (n, c, h, w) = data.dims4()?;
        if n != 1 || c != 3 {
            return Err(Error::ChannelMismatch {
                what: "image tensor".into(),
                expected: 3,
                actual: c,
            });
        }
        check_dims(h, w)?;
        if !data.is_finite() {
            return Err(Error::NonFinite {
                what: "image pixel".into(),
                value: f64::NAN,
            });
        }
        Ok(Self { data })
    }

    /// From interleaved 8-bit RGB rows.
    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        check_dims(height, width)?;
        if rgb.len() != height * width * 3 {
            return Err(Error::SizeMismatch {
                what: "rgb buffer",
                expected: (height * width * 3, 1),
                actual: (rgb.len(), 1),
            });
        }
        let plane = height * width;
        let inv = T::lit(1.0 / 255.0);
        let data = Tensor::from_fn(&[1, 3, height, width], |i| {
            let (c, p) = (i / plane, i % plane);
            T::lit(f64::from(rgb[p * 3 + c])) * inv
        });
        Ok(Self { data })
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }
}

fn check_dims(h: usize, w: usize) -> Result<()> {
    if h < 64 || w < 64 {
        return Err(Error::ImageDims {
            height: h,
            width: w,
            reason: "sides must be at least 64",
        });
    }
    if h % 64 != 0 || w % 64 != 0 {
        return Err(Error::ImageDims {
            height: h,
            width: w,
            reason: "sides must be divisible by 64",
        });
    }
    Ok(())
}

/// Graph handles of P2..P6.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PyramidVars {
    pub levels: [Var; 5],
}

impl PyramidVars {
    /// Handle of level `level` (2..=6).
    pub fn level(&self, level: usize) -> Var {
        self.levels[level - 2]
    }
}

/// Materialized P2..P6, each `[1, channels, h / 2^i, w / 2^i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T> {
    levels: Vec<Tensor<T>>,
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn new(levels: Vec<Tensor<T>>) -> Result<Self> {
        if levels.len() != 5 {
            return Err(Error::SizeMismatch {
                what: "pyramid level count",
                expected: (5, 1),
                actual: (levels.len(), 1),
            });
        }
        let (_, c0, h2, w2) = levels[0].dims4()?;
        for (i, t) in levels.iter().enumerate() {
            let (n, c, h, w) = t.dims4()?;
            if n != 1 || c != c0 {
                return Err(Error::ChannelMismatch {
                    what: format!("pyramid level P{}", i + 2),
                    expected: c0,
                    actual: c,
                });
            }
            let want = (h2 >> i, w2 >> i);
            if (h, w) != want || h == 0 || w == 0 {
                return Err(Error::SizeMismatch {
                    what: "pyramid level size",
                    expected: want,
                    actual: (h, w),
                });
            }
            if !t.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("pyramid level P{}", i + 2),
                    value: f64::NAN,
                });
            }
        }
        Ok(Self { levels })
    }

    pub fn from_graph(g: &Graph<T>, p: &PyramidVars) -> Self {
        Self {
            levels: p.levels.iter().map(|&v| g.value(v).clone()).collect(),
        }
    }

    /// Inserts the levels as graph leaves.
    pub fn to_graph(&self, g: &mut Graph<T>, trainable: bool) -> PyramidVars {
        let mut vars = Vec::with_capacity(5);
        for t in &self.levels {
            vars.push(if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            });
        }
        PyramidVars {
            levels: vars.try_into().expect("five levels"),
        }
    }

    pub fn level(&self, level: usize) -> &Tensor<T> {
        &self.levels[level - 2]
    }

    pub fn levels(&self) -> &[Tensor<T>] {
        &self.levels
    }

    pub fn channels(&self) -> usize {
        self.levels[0].shape()[1]
    }

    /// Spatial size of `level`.
    pub fn size(&self, level: usize) -> (usize, usize) {
        let s = self.level(level).shape();
        (s[2], s[3])
    }
}

/// Stem (3x3, stride 2) then four stages of a stride-2 3x3 conv followed by a
/// stride-1 3x3 conv, all ReLU. Stage outputs C2..C5 sit at strides 4..32.
#[derive(Clone, Debug)]
pub struct Backbone {
    stem: Conv,
    stages: Vec<[Conv; 2]>,
    widths: [usize; 4],
}

impl Backbone {
    pub fn new(cfg: &BackboneConfig) -> Self {
        let w = cfg.stage_widths;
        let stem_width = (w[0] / 2).max(1);
        let mut prev = stem_width;
        let stages = (0..4)
            .map(|i| {
                let s = [
                    Conv::new(format!("backbone.stage{}.down", i + 2), prev, w[i], 3, 2),
                    Conv::new(format!("backbone.stage{}.conv", i + 2), w[i], w[i], 3, 1),
                ];
                prev = w[i];
                s
            })
            .collect();
        Self {
            stem: Conv::new("backbone.stem", 3, stem_width, 3, 2),
            stages,
            widths: w,
        }
    }

    pub fn widths(&self) -> [usize; 4] {
        self.widths
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.stem.init(store, rng, Init::He);
        for [a, b] in &self.stages {
            a.init(store, rng, Init::He);
            b.init(store, rng, Init::He);
        }
    }

    /// Returns C2..C5.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, image: Var) -> Result<[Var; 4]> {
        let (_, c, h, w) = g.value(image).dims4()?;
        if c != 3 {
            return Err(Error::ChannelMismatch {
                what: "backbone input".into(),
                expected: 3,
                actual: c,
            });
        }
        check_dims(h, w)?;
        let mut x = self.stem.forward_relu(g, p, image);
        let mut out = Vec::with_capacity(4);
        for [down, conv] in &self.stages {
            x = down.forward_relu(g, p, x);
            x = conv.forward_relu(g, p, x);
            out.push(x);
        }
        Ok(out.try_into().expect("four stages"))
    }
}

/// Lateral 1x1 projections, nearest-neighbour top-down merge, 3x3 smoothing,
/// and P6 as the stride-2 subsample of P5.
#[derive(Clone, Debug)]
pub struct Fpn {
    lateral: Vec<Conv>,
    smooth: Vec<Conv>,
    channels: usize,
}

impl Fpn {
    pub fn new(cfg: &FpnConfig, stage_widths: [usize; 4]) -> Self {
        let c = cfg.channels;
        Self {
            lateral: (0..4)
                .map(|i| Conv::new(format!("fpn.lateral{}", i + 2), stage_widths[i], c, 1, 1))
                .collect(),
            smooth: (0..4)
                .map(|i| Conv::new(format!("fpn.smooth{}", i + 2), c, c, 3, 1))
                .collect(),
            channels: c,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        for l in self.lateral.iter().chain(&self.smooth) {
            l.init(store, rng, Init::He);
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, stages: [Var; 4]) -> Result<PyramidVars> {
        for (i, (&s, l)) in stages.iter().zip(&self.lateral).enumerate() {
            let c = g.shape(s)[1];
            if c != l.ci {
                return Err(Error::ChannelMismatch {
                    what: format!("fpn lateral for C{}", i + 2),
                    expected: l.ci,
                    actual: c,
                });
            }
            let w = g.shape(p.get(&l.weight_name()))[1];
            if w != l.ci {
                return Err(Error::ChannelMismatch {
                    what: format!("fpn lateral{} weight", i + 2),
                    expected: l.ci,
                    actual: w,
                });
            }
        }
        let mut merged: Vec<Var> = Vec::with_capacity(4);
        let mut top: Option<Var> = None;
        for i in (0..4).rev() {
            let lat = self.lateral[i].forward(g, p, stages[i]);
            let m = match top {
                Some(t) => {
                    let up = g.upsample_nearest(t, 2);
                    g.add(lat, up)
                }
                None => lat,
            };
            top = Some(m);
            merged.push(m);
        }
        merged.reverse();
        let mut levels = Vec::with_capacity(5);
        for (m, s) in merged.into_iter().zip(&self.smooth) {
            levels.push(s.forward(g, p, m));
        }
        let p6 = g.subsample(levels[3], 2);
        levels.push(p6);
        Ok(PyramidVars {
            levels: levels.try_into().expect("five levels"),
        })
    }
}
