//! Procedural dataset: textured background, unlabeled clutter in the class
//! colors, and labeled shapes whose sizes span a wide scale range.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::config::{ShapeKind, SynthConfig};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::supervision::InstanceAnnotation;

use super::image::RgbImage;
use super::manifest::{AnnotationRecord, Category, DatasetManifest, ImageRecord, PlacementShortfall};

/// Base colors per class index; classes beyond the table reuse it with a
/// channel rotation.
const PALETTE: [[f64; 3]; 4] = [[205.0, 70.0, 55.0], [60.0, 165.0, 80.0], [65.0, 95.0, 205.0], [215.0, 185.0, 50.0]];
const NOISE_CELL: f64 = 32.0;
const CLUTTER_AREA: f64 = 128.0 * 128.0;

pub struct SynthDataset {
    pub manifest: DatasetManifest,
    /// Parallel to `manifest.images`.
    pub images: Vec<RgbImage>,
}

fn validate(cfg: &SynthConfig) -> Result<()> {
    let [lo, hi] = cfg.scale_range;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(Error::config("synth.scale_range", format!("need 0 < min <= max <= 1, got {lo}..{hi}")));
    }
    if cfg.classes.is_empty() {
        return Err(Error::config("synth.classes", "at least one shape class"));
    }
    if cfg.height == 0 || cfg.width == 0 {
        return Err(Error::config("synth.height/width", "must be positive"));
    }
    if cfg.min_instances > cfg.max_instances {
        return Err(Error::config("synth.min_instances", "exceeds max_instances"));
    }
    if !(cfg.clutter_density >= 0.0 && cfg.texture_amplitude >= 0.0) {
        return Err(Error::config("synth.clutter_density", "densities must be non-negative"));
    }
    Ok(())
}

fn class_color(class_index: usize) -> [f64; 3] {
    let c = PALETTE[class_index % PALETTE.len()];
    let r = (class_index / PALETTE.len()) % 3;
    [c[r % 3], c[(r + 1) % 3], c[(r + 2) % 3]]
}

fn jitter_color<R: Rng>(base: [f64; 3], rng: &mut R, amount: f64) -> [u8; 3] {
    base.map(|v| (v + rng.random_range(-amount..=amount)).round().clamp(0.0, 255.0) as u8)
}

/// Lattice noise with smoothstep interpolation, roughly in [-1, 1].
struct ValueNoise {
    cols: usize,
    values: Vec<f64>,
    cell: f64,
}

impl ValueNoise {
    fn new<R: Rng>(h: usize, w: usize, cell: f64, rng: &mut R) -> Self {
        let rows = (h as f64 / cell).ceil() as usize + 2;
        let cols = (w as f64 / cell).ceil() as usize + 2;
        let values = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Self { cols, values, cell }
    }

    fn at(&self, y: usize, x: usize) -> f64 {
        let fy = y as f64 / self.cell;
        let fx = x as f64 / self.cell;
        let (r, c) = (fy as usize, fx as usize);
        let s = |t: f64| t * t * (3.0 - 2.0 * t);
        let (ty, tx) = (s(fy - r as f64), s(fx - c as f64));
        let v = |r: usize, c: usize| self.values[r * self.cols + c];
        let top = v(r, c) * (1.0 - tx) + v(r, c + 1) * tx;
        let bot = v(r + 1, c) * (1.0 - tx) + v(r + 1, c + 1) * tx;
        top * (1.0 - ty) + bot * ty
    }
}

fn background<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> RgbImage {
    let (h, w) = (cfg.height, cfg.width);
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(95.0..150.0));
    if cfg.texture_amplitude == 0.0 {
        return RgbImage::filled(h, w, base.map(|v| v.round() as u8));
    }
    let coarse = ValueNoise::new(h, w, NOISE_CELL, rng);
    let fine = ValueNoise::new(h, w, NOISE_CELL / 4.0, rng);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.7..1.3));
    let amp = cfg.texture_amplitude * 255.0;
    let mut im = RgbImage::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let n = 0.7 * coarse.at(y, x) + 0.3 * fine.at(y, x);
            let px = std::array::from_fn(|k| (base[k] + amp * n * tint[k]).round().clamp(0.0, 255.0) as u8);
            im.put(y, x, px);
        }
    }
    im
}

/// Pixels of one shape as `(y, x)` pairs, clipped to the frame.
type Pixels = Vec<(usize, usize)>;

fn raster(h: usize, w: usize, x0: f64, y0: f64, x1: f64, y1: f64, inside: impl Fn(f64, f64) -> bool) -> Pixels {
    let ys = (y0.floor().max(0.0) as usize)..(y1.ceil().max(0.0) as usize).min(h);
    let xs = (x0.floor().max(0.0) as usize)..(x1.ceil().max(0.0) as usize).min(w);
    let mut out = Vec::new();
    for y in ys {
        for x in xs.clone() {
            if inside(y as f64 + 0.5, x as f64 + 0.5) {
                out.push((y, x));
            }
        }
    }
    out
}

/// Extent `(width, height)` and rasterizer for a labeled archetype of side `s`.
fn archetype<R: Rng>(kind: ShapeKind, s: f64, rng: &mut R) -> (f64, f64, Box<dyn Fn(usize, usize, f64, f64) -> Pixels>) {
    match kind {
        ShapeKind::Disc => (
            s,
            s,
            Box::new(move |h, w, cx, cy| {
                let r2 = (s / 2.0) * (s / 2.0);
                raster(h, w, cx - s / 2.0, cy - s / 2.0, cx + s / 2.0, cy + s / 2.0, |y, x| {
                    (y - cy).powi(2) + (x - cx).powi(2) <= r2
                })
            }),
        ),
        ShapeKind::Ring => {
            let outer = s / 2.0;
            let inner = (0.55 * outer).min(outer - 2.0).max(0.0);
            (
                s,
                s,
                Box::new(move |h, w, cx, cy| {
                    raster(h, w, cx - outer, cy - outer, cx + outer, cy + outer, |y, x| {
                        let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                        d2 <= outer * outer && d2 > inner * inner
                    })
                }),
            )
        }
        ShapeKind::Rectangle | ShapeKind::Bar => {
            let short = if kind == ShapeKind::Bar {
                (s * rng.random_range(0.12..0.22)).max(2.0)
            } else {
                s * rng.random_range(0.55..0.95)
            };
            let (ew, eh) = if rng.random_bool(0.5) { (s, short) } else { (short, s) };
            (
                ew,
                eh,
                Box::new(move |h, w, cx, cy| {
                    raster(h, w, cx - ew / 2.0, cy - eh / 2.0, cx + ew / 2.0, cy + eh / 2.0, |_, _| true)
                }),
            )
        }
    }
}

/// Unlabeled distractor: a triangle, thin line or small cross.
fn clutter<R: Rng>(h: usize, w: usize, short: f64, rng: &mut R) -> Pixels {
    let s = short * rng.random_range(0.03..0.2);
    let cx = rng.random_range(0.0..w as f64);
    let cy = rng.random_range(0.0..h as f64);
    match rng.random_range(0..3) {
        0 => {
            let p: [(f64, f64); 3] = std::array::from_fn(|_| {
                (cx + rng.random_range(-s..s), cy + rng.random_range(-s..s))
            });
            let edge = |a: (f64, f64), b: (f64, f64), x: f64, y: f64| (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
            raster(h, w, cx - s, cy - s, cx + s, cy + s, |y, x| {
                let e = [edge(p[0], p[1], x, y), edge(p[1], p[2], x, y), edge(p[2], p[0], x, y)];
                e.iter().all(|&v| v >= 0.0) || e.iter().all(|&v| v <= 0.0)
            })
        }
        1 => {
            let t = rng.random_range(0.0..std::f64::consts::PI);
            let (dx, dy) = (t.cos(), t.sin());
            let len = 2.0 * s;
            let half = rng.random_range(0.5..1.5);
            raster(h, w, cx - len, cy - len, cx + len, cy + len, |y, x| {
                let (rx, ry) = (x - cx, y - cy);
                (rx * dx + ry * dy).abs() <= len && (rx * dy - ry * dx).abs() <= half
            })
        }
        _ => {
            let arm = (s * 0.2).max(1.0);
            raster(h, w, cx - s, cy - s, cx + s, cy + s, |y, x| {
                (x - cx).abs() <= arm || (y - cy).abs() <= arm
            })
        }
    }
}

/// Generates `cfg.num_images` images with exact instance masks. Output is a
/// pure function of `(cfg, seed)`.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<SynthDataset> {
    validate(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.height, cfg.width);
    let short = h.min(w) as f64;
    let (ln_lo, ln_hi) = (cfg.scale_range[0].ln(), cfg.scale_range[1].ln());
    let clutter_count = Poisson::new(cfg.clutter_density * (h * w) as f64 / CLUTTER_AREA).ok();
    let mut manifest = DatasetManifest {
        categories: cfg
            .classes
            .iter()
            .enumerate()
            .map(|(i, k)| Category {
                id: i + 1,
                name: k.name().to_string(),
            })
            .collect(),
        ..Default::default()
    };
    let mut images = Vec::with_capacity(cfg.num_images);
    let mut next_ann = 1u64;
    for idx in 0..cfg.num_images {
        let image_id = idx as u64 + 1;
        let mut im = background(cfg, &mut rng);
        let n_clutter = clutter_count.as_ref().map_or(0, |d| d.sample(&mut rng) as usize);
        for _ in 0..n_clutter {
            let color = jitter_color(class_color(rng.random_range(0..cfg.classes.len())), &mut rng, 25.0);
            for (y, x) in clutter(h, w, short, &mut rng) {
                im.put(y, x, color);
            }
        }
        let requested = rng.random_range(cfg.min_instances..=cfg.max_instances);
        // instances keep a one-pixel gap so their masks stay exact
        let mut occupied = BinaryMask::zeros(h, w);
        let mut placed = 0;
        for _ in 0..requested {
            let ci = rng.random_range(0..cfg.classes.len());
            let side = (rng.random_range(ln_lo..=ln_hi).exp() * short).clamp(3.0, short);
            let (ew, eh, draw) = archetype(cfg.classes[ci], side, &mut rng);
            let mut pixels = None;
            for _ in 0..=cfg.max_retries {
                let cx = ew / 2.0 + rng.random::<f64>() * (w as f64 - ew).max(0.0);
                let cy = eh / 2.0 + rng.random::<f64>() * (h as f64 - eh).max(0.0);
                let px = draw(h, w, cx, cy);
                if px.len() >= super::tile::MIN_CLIPPED_AREA && px.iter().all(|&(y, x)| !occupied.get(y, x)) {
                    pixels = Some(px);
                    break;
                }
            }
            let Some(px) = pixels else { continue };
            let color = jitter_color(class_color(ci), &mut rng, 20.0);
            let mut mask = BinaryMask::zeros(h, w);
            for &(y, x) in &px {
                im.put(y, x, color);
                mask.set(y, x, true);
                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                    for xx in x.saturating_sub(1)..(x + 2).min(w) {
                        occupied.set(yy, xx, true);
                    }
                }
            }
            let inst = InstanceAnnotation::from_mask(ci + 1, mask).expect("non-empty placement");
            manifest.annotations.push(AnnotationRecord::from_instance(next_ann, image_id, &inst));
            next_ann += 1;
            placed += 1;
        }
        if placed < requested {
            manifest.shortfalls.push(PlacementShortfall {
                image_id,
                requested,
                placed,
            });
        }
        manifest.images.push(ImageRecord {
            id: image_id,
            file_name: format!("images/{image_id:05}.png"),
            height: h,
            width: w,
        });
        images.push(im);
    }
    Ok(SynthDataset { manifest, images })
}
