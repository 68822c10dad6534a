//! Figure panels: input, semantic prediction, attention heat map, per-level
//! feature means before and after attention, and predicted instances.

use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use seascn::dataio::RgbImage;
use seascn::fpn::level_stride;
use seascn::{Detector, FeaturePyramid, InstanceAnnotation, RunConfig, Scalar, Tensor};

use crate::predict::detect;
use crate::prep;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Panel {
    Input,
    /// Per-pixel argmax of the segmentation branch.
    Semantic,
    /// Channel mean of the attention stream.
    Attention,
    /// Channel mean of P2..P6 side by side, before attention.
    Before,
    /// The same after attention, on the same color scale as `Before`.
    After,
    Instances,
}

impl Panel {
    pub const ALL: [Panel; 6] = [
        Panel::Input,
        Panel::Semantic,
        Panel::Attention,
        Panel::Before,
        Panel::After,
        Panel::Instances,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Panel::Input => "input",
            Panel::Semantic => "semantic",
            Panel::Attention => "attention",
            Panel::Before => "levels_before",
            Panel::After => "levels_after",
            Panel::Instances => "instances",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s || p.name().trim_start_matches("levels_") == s)
            .ok_or_else(|| anyhow::anyhow!("unknown panel {s:?}"))
    }

    fn needs_attention(self) -> bool {
        matches!(self, Panel::Semantic | Panel::Attention)
    }
}

const PALETTE: [[u8; 3]; 8] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
];

fn class_color(c: usize) -> [u8; 3] {
    if c == 0 {
        PALETTE[0]
    } else {
        PALETTE[1 + (c - 1) % (PALETTE.len() - 1)]
    }
}

/// Black to red to yellow to white.
fn heat(t: f64) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let ch = |v: f64| (255.0 * v.clamp(0.0, 1.0)).round() as u8;
    [ch(3.0 * t), ch(3.0 * t - 1.0), ch(3.0 * t - 2.0)]
}

/// Channel mean of a `[1, c, h, w]` tensor.
fn channel_mean<T: Scalar>(t: &Tensor<T>) -> (usize, usize, Vec<f64>) {
    let (_, c, h, w) = t.dims4().expect("rank 4");
    let mut out = vec![0.0; h * w];
    for ch in 0..c {
        for (o, v) in out.iter_mut().zip(&t.data()[ch * h * w..(ch + 1) * h * w]) {
            *o += v.as_f64();
        }
    }
    out.iter_mut().for_each(|v| *v /= c as f64);
    (h, w, out)
}

fn range(vals: impl IntoIterator<Item = f64>) -> (f64, f64) {
    vals.into_iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Nearest upsampling of a `gh x gw` grid at `stride` onto `height x width`.
fn paint(height: usize, width: usize, stride: usize, gw: usize, gh: usize, f: impl Fn(usize) -> [u8; 3]) -> RgbImage {
    let mut img = RgbImage::new(height, width);
    for y in 0..height {
        for x in 0..width {
            let (gy, gx) = ((y / stride).min(gh - 1), (x / stride).min(gw - 1));
            img.put(y, x, f(gy * gw + gx));
        }
    }
    img
}

fn level_strip<T: Scalar>(p: &FeaturePyramid<T>, height: usize, width: usize, scales: &[(f64, f64)]) -> RgbImage {
    let mut strip = RgbImage::new(height, width * 5);
    for (i, level) in (2..=6).enumerate() {
        let (gh, gw, mean) = channel_mean(p.level(level));
        let (lo, hi) = scales[i];
        let span = if hi > lo { hi - lo } else { 1.0 };
        let tile = paint(height, width, level_stride(level), gw, gh, |k| heat((mean[k] - lo) / span));
        for y in 0..height {
            for x in 0..width {
                strip.put(y, i * width + x, tile.pixel(y, x));
            }
        }
    }
    strip
}

fn instances(img: &RgbImage, dets: &[seascn::DetectionResult]) -> RgbImage {
    let mut out = img.clone();
    for d in dets {
        let c = class_color(d.class_id);
        for y in 0..img.height {
            for x in 0..img.width {
                if d.mask.get(y, x) {
                    let p = out.pixel(y, x);
                    out.put(y, x, [0, 1, 2].map(|k| ((u16::from(p[k]) + u16::from(c[k])) / 2) as u8));
                }
            }
        }
        let b = d.bbox;
        let (x0, y0) = (b.x.max(0.0) as usize, b.y.max(0.0) as usize);
        let x1 = (b.x1().ceil() as usize).min(img.width).saturating_sub(1);
        let y1 = (b.y1().ceil() as usize).min(img.height).saturating_sub(1);
        for x in x0..=x1.max(x0) {
            out.put(y0, x, c);
            out.put(y1, x, c);
        }
        for y in y0..=y1.max(y0) {
            out.put(y, x0, c);
            out.put(y, x1, c);
        }
    }
    out
}

/// Renders the requested panels in order. Panels of the attention branch
/// are an error when the model has it disabled.
pub fn render<T: Scalar>(
    det: &Detector<T>,
    img: &RgbImage,
    gts: &[InstanceAnnotation],
    cfg: &RunConfig,
    panels: &[Panel],
    seed: u64,
) -> Result<Vec<(Panel, RgbImage)>> {
    let sea_on = det.config().sea.enabled;
    if let Some(p) = panels.iter().find(|p| p.needs_attention() && !sea_on) {
        bail!("panel {} needs the attention module, which this model disables", p.name());
    }
    let (h, w) = (img.height, img.width);
    let maps = det.sea_maps(&prep::image_tensor::<T>(img)?)?;
    let level_scales: Vec<(f64, f64)> = (2..=6)
        .map(|l| {
            let (_, _, a) = channel_mean(maps.before.level(l));
            let (_, _, b) = channel_mean(maps.after.level(l));
            range(a.into_iter().chain(b))
        })
        .collect();
    let uniform = level_stride(det.config().sea.uniform_level);
    let mut out = Vec::with_capacity(panels.len());
    for &panel in panels {
        let rendered = match panel {
            Panel::Input => img.clone(),
            Panel::Semantic => {
                let probs = maps.probabilities.as_ref().expect("attention enabled");
                let (_, k, gh, gw) = probs.dims4()?;
                let argmax: Vec<usize> = (0..gh * gw)
                    .map(|i| {
                        (0..k)
                            .max_by(|&a, &b| probs.data()[a * gh * gw + i].as_f64().total_cmp(&probs.data()[b * gh * gw + i].as_f64()))
                            .unwrap_or(0)
                    })
                    .collect();
                paint(h, w, uniform, gw, gh, |i| class_color(argmax[i]))
            }
            Panel::Attention => {
                let (gh, gw, mean) = channel_mean(maps.attention.as_ref().expect("attention enabled"));
                let (lo, hi) = range(mean.iter().copied());
                let span = if hi > lo { hi - lo } else { 1.0 };
                paint(h, w, uniform, gw, gh, |i| heat((mean[i] - lo) / span))
            }
            Panel::Before => level_strip(&maps.before, h, w, &level_scales),
            Panel::After => level_strip(&maps.after, h, w, &level_scales),
            Panel::Instances => instances(img, &detect(det, img, gts, cfg, seed)?),
        };
        out.push((panel, rendered));
    }
    Ok(out)
}

/// Writes `<name>.png` per panel; returns the paths in order.
pub fn write_panels(dir: &Path, panels: &[(Panel, RgbImage)]) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::with_capacity(panels.len());
    for (p, img) in panels {
        let path = dir.join(format!("{}.png", p.name()));
        img.save_png(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Every panel the model can produce.
pub fn available_panels(det_sea_enabled: bool) -> Vec<Panel> {
    Panel::ALL
        .into_iter()
        .filter(|p| det_sea_enabled || !p.needs_attention())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heat_ramp_endpoints() {
        assert_eq!(heat(0.0), [0, 0, 0]);
        assert_eq!(heat(1.0), [255, 255, 255]);
        assert_eq!(heat(f64::NAN), [0, 0, 0]);
    }

    #[test]
    fn panel_names_parse() {
        for p in Panel::ALL {
            assert_eq!(Panel::parse(p.name()).unwrap(), p);
        }
        assert_eq!(Panel::parse("before").unwrap(), Panel::Before);
        assert!(Panel::parse("nope").is_err());
        assert_eq!(available_panels(false).len(), 4);
    }
}
