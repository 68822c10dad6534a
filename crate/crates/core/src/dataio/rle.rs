//! Run-length mask encoding in COCO's uncompressed layout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::mask::BinaryMask;

/// Alternating 0-run / 1-run lengths over the mask in column-major order,
/// always starting with a (possibly empty) 0-run. `size` is `[height, width]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub size: [usize; 2],
    pub counts: Vec<u64>,
}

impl RleMask {
    pub fn height(&self) -> usize {
        self.size[0]
    }

    pub fn width(&self) -> usize {
        self.size[1]
    }

    /// Foreground pixel count; no decoding needed.
    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).sum()
    }

    pub fn decode(&self) -> Result<BinaryMask> {
        rle_decode(self)
    }

    /// Tight box of the foreground, from the runs.
    pub fn bbox(&self) -> Option<BBox> {
        let h = self.height() as u64;
        if h == 0 {
            return None;
        }
        let (mut x0, mut y0, mut x1, mut y1) = (u64::MAX, u64::MAX, 0, 0);
        let mut pos = 0u64;
        for (i, &c) in self.counts.iter().enumerate() {
            if i % 2 == 1 && c > 0 {
                let (a, b) = (pos, pos + c - 1);
                let (ca, cb) = (a / h, b / h);
                x0 = x0.min(ca);
                x1 = x1.max(cb + 1);
                if ca == cb {
                    y0 = y0.min(a % h);
                    y1 = y1.max(b % h + 1);
                } else {
                    // wraps past a column end: touches both the top and bottom rows
                    y0 = 0;
                    y1 = h;
                }
            }
            pos += c;
        }
        (x0 != u64::MAX).then(|| BBox::from_corners(x0 as f64, y0 as f64, x1 as f64, y1 as f64))
    }
}

pub fn rle_encode(mask: &BinaryMask) -> RleMask {
    let (h, w) = (mask.height(), mask.width());
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u64;
    for x in 0..w {
        for y in 0..h {
            let v = mask.get(y, x);
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    RleMask { size: [h, w], counts }
}

pub fn rle_decode(rle: &RleMask) -> Result<BinaryMask> {
    let (h, w) = (rle.height(), rle.width());
    let total: u64 = rle.counts.iter().sum();
    if total != (h * w) as u64 {
        return Err(Error::RleCounts {
            expected: h * w,
            actual: total as usize,
        });
    }
    let mut mask = BinaryMask::zeros(h, w);
    let mut pos = 0usize;
    for (i, &c) in rle.counts.iter().enumerate() {
        let c = c as usize;
        if i % 2 == 1 {
            for p in pos..pos + c {
                mask.set(p % h, p / h, true);
            }
        }
        pos += c;
    }
    Ok(mask)
}
