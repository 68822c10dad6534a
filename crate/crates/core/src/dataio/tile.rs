//! Overlapping fixed-size patches over a large image.

use crate::config::TileConfig;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::supervision::InstanceAnnotation;

use super::image::RgbImage;

/// Clipped instances smaller than this many pixels are dropped.
pub const MIN_CLIPPED_AREA: usize = 10;

/// Patch origins along one axis: multiples of `stride`, with the last one
/// clamped to `dim - patch`. A dimension no larger than the patch gets the
/// single origin 0.
pub fn tile_origins(dim: usize, patch: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 {
        return Err(Error::config("tile.stride", "must be positive"));
    }
    if patch == 0 {
        return Err(Error::config("tile.patch", "must be positive"));
    }
    if dim <= patch {
        return Ok(vec![0]);
    }
    let last = dim - patch;
    let mut out: Vec<usize> = (0..).map(|i| i * stride).take_while(|&o| o < last).collect();
    out.push(last);
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Tile {
    /// `(x, y)` of the patch's top-left corner in the source image.
    pub origin: (usize, usize),
    pub image: RgbImage,
    pub annotations: Vec<InstanceAnnotation>,
}

/// Cuts `image` into `cfg.patch`-sided tiles. Annotations are clipped to each
/// tile with their boxes recomputed; clipped instances under
/// [`MIN_CLIPPED_AREA`] pixels are dropped, and tiles left without instances
/// are dropped unless `keep_empty`. Images smaller than a patch are an error
/// unless `pad`, in which case the tile is zero-padded.
pub fn tile(image: &RgbImage, annotations: &[InstanceAnnotation], cfg: &TileConfig) -> Result<Vec<Tile>> {
    let (h, w) = (image.height, image.width);
    if (h < cfg.patch || w < cfg.patch) && !cfg.pad {
        return Err(Error::ImageDims {
            height: h,
            width: w,
            reason: "smaller than the tile patch (enable padding)",
        });
    }
    for a in annotations {
        if a.mask.height() != h || a.mask.width() != w {
            return Err(Error::SizeMismatch {
                what: "annotation mask",
                expected: (h, w),
                actual: (a.mask.height(), a.mask.width()),
            });
        }
    }
    let ys = tile_origins(h, cfg.patch, cfg.stride)?;
    let xs = tile_origins(w, cfg.patch, cfg.stride)?;
    let p = cfg.patch;
    let mut out = Vec::with_capacity(ys.len() * xs.len());
    for &y0 in &ys {
        for &x0 in &xs {
            let anns: Vec<InstanceAnnotation> = annotations
                .iter()
                .filter_map(|a| {
                    let m = BinaryMask::from_fn(p, p, |y, x| y0 + y < h && x0 + x < w && a.mask.get(y0 + y, x0 + x));
                    if m.area() < MIN_CLIPPED_AREA {
                        return None;
                    }
                    InstanceAnnotation::from_mask(a.class_id, m)
                })
                .collect();
            if anns.is_empty() && !cfg.keep_empty {
                continue;
            }
            out.push(Tile {
                origin: (x0, y0),
                image: image.crop(x0, y0, p, p),
                annotations: anns,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(patch: usize, stride: usize) -> TileConfig {
        TileConfig {
            patch,
            stride,
            keep_empty: true,
            pad: false,
        }
    }

    #[test]
    fn exact_fit_is_one_tile() {
        let t = tile(&RgbImage::new(800, 800), &[], &cfg(800, 200)).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].origin, (0, 0));
    }

    #[test]
    fn thousand_square() {
        assert_eq!(tile_origins(1000, 800, 200).unwrap(), vec![0, 200]);
        let t = tile(&RgbImage::new(1000, 1000), &[], &cfg(800, 200)).unwrap();
        let origins: Vec<_> = t.iter().map(|t| t.origin).collect();
        assert_eq!(origins, vec![(0, 0), (200, 0), (0, 200), (200, 200)]);
    }

    /// Enumerates every multiple of the stride that fits, then adds the
    /// flush-right origin if it is missing.
    fn origin_oracle(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
        if dim <= patch {
            return vec![0];
        }
        let mut v = Vec::new();
        let mut o = 0;
        while o + patch <= dim {
            v.push(o);
            o += stride;
        }
        if *v.last().unwrap() != dim - patch {
            v.push(dim - patch);
        }
        v
    }

    #[test]
    fn origins_match_oracle_and_cover() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let patch = rng.random_range(1..300);
            let stride = rng.random_range(1..=patch);
            let dim = rng.random_range(patch..patch * 4 + 10);
            let o = tile_origins(dim, patch, stride).unwrap();
            assert_eq!(o, origin_oracle(dim, patch, stride), "dim {dim} patch {patch} stride {stride}");
            let mut covered = vec![false; dim];
            for &s in &o {
                assert!(s + patch <= dim);
                covered[s..s + patch].iter_mut().for_each(|c| *c = true);
            }
            assert!(covered.iter().all(|&c| c));
        }
    }

    #[test]
    fn zero_stride_rejected() {
        assert!(tile_origins(100, 10, 0).is_err());
        assert!(tile(&RgbImage::new(20, 20), &[], &cfg(10, 0)).is_err());
    }

    #[test]
    fn small_image_needs_padding() {
        let im = RgbImage::filled(20, 30, [1, 2, 3]);
        assert!(tile(&im, &[], &cfg(32, 8)).is_err());
        let mut c = cfg(32, 8);
        c.pad = true;
        let t = tile(&im, &[], &c).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!((t[0].image.height, t[0].image.width), (32, 32));
        assert_eq!(t[0].image.pixel(25, 5), [0, 0, 0]);
    }

    #[test]
    fn clipping_rules() {
        let (h, w) = (100, 100);
        let inside = InstanceAnnotation::from_mask(1, BinaryMask::rect(h, w, 5, 5, 20, 15)).unwrap();
        // 5x3 strip straddling x = 60
        let sliver = InstanceAnnotation::from_mask(2, BinaryMask::rect(h, w, 57, 70, 62, 73)).unwrap();
        let t = tile(&RgbImage::new(h, w), &[inside.clone(), sliver], &cfg(60, 40)).unwrap();
        assert_eq!(t.len(), 4);
        let top_left = &t[0];
        assert_eq!(top_left.annotations.len(), 1);
        assert_eq!(top_left.annotations[0].area, inside.area);
        let bottom_left = &t[2];
        assert_eq!(bottom_left.origin, (0, 40));
        // sliver columns 57..60 are 3 wide x 3 tall = 9 < 10 px: dropped
        assert!(bottom_left.annotations.is_empty());
        let bottom_right = &t[3];
        assert_eq!(bottom_right.annotations.len(), 1);
        assert_eq!(bottom_right.annotations[0].area, 15);
        assert_eq!(
            bottom_right.annotations[0].bbox,
            crate::geometry::BBox::new(17.0, 30.0, 5.0, 3.0)
        );
    }
}
