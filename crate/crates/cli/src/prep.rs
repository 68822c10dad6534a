//! Turning stored images and annotations into network inputs.

use seascn::dataio::{Dataset, RgbImage};
use seascn::{BinaryMask, ImageTensor, InstanceAnnotation, Sample, Scalar};

/// Network inputs must be a multiple of this on both sides.
pub const SIZE_MULTIPLE: usize = 64;

/// Smallest multiple of 64 that is at least `n` (and at least 64).
pub fn padded_len(n: usize) -> usize {
    n.max(1).div_ceil(SIZE_MULTIPLE) * SIZE_MULTIPLE
}

/// Zero-pads on the bottom and right to network-compatible dimensions.
pub fn image_tensor<T: Scalar>(img: &RgbImage) -> seascn::Result<ImageTensor<T>> {
    let (ph, pw) = (padded_len(img.height), padded_len(img.width));
    if (ph, pw) == (img.height, img.width) {
        return ImageTensor::from_rgb8(ph, pw, &img.data);
    }
    ImageTensor::from_rgb8(ph, pw, &img.crop(0, 0, ph, pw).data)
}

/// Annotations re-framed to the padded size.
pub fn pad_annotations(anns: &[InstanceAnnotation], height: usize, width: usize) -> Vec<InstanceAnnotation> {
    let (ph, pw) = (padded_len(height), padded_len(width));
    anns.iter()
        .map(|a| InstanceAnnotation {
            mask: a.mask.crop(0, 0, pw, ph),
            ..a.clone()
        })
        .collect()
}

pub fn sample<T: Scalar>(img: &RgbImage, anns: &[InstanceAnnotation]) -> seascn::Result<Sample<T>> {
    Sample::new(image_tensor(img)?, pad_annotations(anns, img.height, img.width))
}

/// One training sample per image, in manifest order.
pub fn samples<T: Scalar>(data: &Dataset) -> seascn::Result<Vec<Sample<T>>> {
    data.manifest
        .images
        .iter()
        .zip(&data.images)
        .map(|(rec, img)| sample(img, &data.manifest.instances(rec.id)?))
        .collect()
}

/// Resizes so the shorter side becomes `short`: bilinear for pixels, nearest
/// for masks. Instances that vanish are dropped.
pub fn rescale(img: &RgbImage, anns: &[InstanceAnnotation], short: usize) -> (RgbImage, Vec<InstanceAnnotation>) {
    let s = short as f64 / img.height.min(img.width) as f64;
    let oh = ((img.height as f64 * s).round() as usize).max(1);
    let ow = ((img.width as f64 * s).round() as usize).max(1);
    let (sy, sx) = (img.height as f64 / oh as f64, img.width as f64 / ow as f64);
    let mut out = RgbImage::new(oh, ow);
    for y in 0..oh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f64);
        let (y0, ly) = (fy.floor() as usize, fy.fract());
        let y1 = (y0 + 1).min(img.height - 1);
        for x in 0..ow {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f64);
            let (x0, lx) = (fx.floor() as usize, fx.fract());
            let x1 = (x0 + 1).min(img.width - 1);
            let (a, b, c, d) = (img.pixel(y0, x0), img.pixel(y0, x1), img.pixel(y1, x0), img.pixel(y1, x1));
            let px = [0, 1, 2].map(|k| {
                let top = f64::from(a[k]) * (1.0 - lx) + f64::from(b[k]) * lx;
                let bot = f64::from(c[k]) * (1.0 - lx) + f64::from(d[k]) * lx;
                (top * (1.0 - ly) + bot * ly).round().clamp(0.0, 255.0) as u8
            });
            out.put(y, x, px);
        }
    }
    let near = |o: usize, scale: f64, n: usize| (((o as f64 + 0.5) * scale) as usize).min(n - 1);
    let anns = anns
        .iter()
        .filter_map(|a| {
            let m = BinaryMask::from_fn(oh, ow, |y, x| a.mask.get(near(y, sy, img.height), near(x, sx, img.width)));
            InstanceAnnotation::from_mask(a.class_id, m)
        })
        .collect();
    (out, anns)
}
