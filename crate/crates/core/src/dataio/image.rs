//! 8-bit RGB images and PNG persistence.

use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved row-major RGB8 pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width * 3],
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        Self {
            height,
            width,
            data: rgb.repeat(height * width),
        }
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Sub-image `[x0, x0 + w) x [y0, y0 + h)`; pixels beyond the source are black.
    pub fn crop(&self, x0: usize, y0: usize, h: usize, w: usize) -> Self {
        let mut out = Self::new(h, w);
        for y in 0..h.min(self.height.saturating_sub(y0)) {
            let cols = w.min(self.width.saturating_sub(x0));
            let src = ((y0 + y) * self.width + x0) * 3;
            out.data[y * w * 3..(y * w + cols) * 3].copy_from_slice(&self.data[src..src + cols * 3]);
        }
        out
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let png_err = |msg: String| Error::Png {
            path: path.to_path_buf(),
            msg,
        };
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(|e| png_err(e.to_string()))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| png_err("image too large".into()))?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf).map_err(|e| png_err(e.to_string()))?;
        let (h, w) = (info.height as usize, info.width as usize);
        buf.truncate(info.buffer_size());
        let data = match info.color_type {
            png::ColorType::Rgb => buf,
            png::ColorType::Rgba => buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            png::ColorType::Grayscale => buf.iter().flat_map(|&v| [v, v, v]).collect(),
            png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
            png::ColorType::Indexed => return Err(png_err("unexpanded palette".into())),
        };
        Ok(Self {
            height: h,
            width: w,
            data,
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        {
            let mut enc = png::Encoder::new(BufWriter::new(&mut bytes), self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let png_err = |e: png::EncodingError| Error::Png {
                path: path.to_path_buf(),
                msg: e.to_string(),
            };
            let mut w = enc.write_header().map_err(png_err)?;
            w.write_image_data(&self.data).map_err(png_err)?;
        }
        super::write_atomic(path, &bytes)
    }
}
