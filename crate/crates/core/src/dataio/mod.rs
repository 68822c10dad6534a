//! Persistence: masks, manifests, images, tiling, synthetic data and
//! checkpoints.

mod checkpoint;
mod image;
mod manifest;
mod rle;
mod synth;
mod tile;

use std::io::Write;
use std::path::{Path, PathBuf};

pub use checkpoint::{
    checkpoint_from_bytes, checkpoint_load, checkpoint_save, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_TRAILER,
    CHECKPOINT_VERSION,
};
pub use image::RgbImage;
pub use manifest::{AnnotationRecord, Category, DatasetManifest, ImageRecord, PlacementShortfall};
pub use rle::{rle_decode, rle_encode, RleMask};
pub use synth::{synth_generate, SynthDataset};
pub use tile::{tile, tile_origins, Tile, MIN_CLIPPED_AREA};

use crate::error::{Error, Result};

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()
    };
    if let Err(e) = write() {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(&tmp, e));
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// A manifest together with its decoded images, parallel to `manifest.images`.
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<RgbImage>,
}

impl Dataset {
    /// Loads the manifest and every image it lists; file names resolve
    /// relative to the manifest's directory.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let mut images = Vec::with_capacity(manifest.images.len());
        for rec in &manifest.images {
            let im = RgbImage::load_png(&root.join(&rec.file_name))?;
            if (im.height, im.width) != (rec.height, rec.width) {
                return Err(Error::SizeMismatch {
                    what: "image file vs manifest",
                    expected: (rec.height, rec.width),
                    actual: (im.height, im.width),
                });
            }
            images.push(im);
        }
        Ok(Self { manifest, images })
    }

    /// Writes images under `dir` at their manifest paths and the manifest as
    /// `dir/manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        for (rec, im) in self.manifest.images.iter().zip(&self.images) {
            im.save_png(&dir.join(&rec.file_name))?;
        }
        let path = dir.join("manifest.json");
        self.manifest.save(&path)?;
        Ok(path)
    }
}

impl From<SynthDataset> for Dataset {
    fn from(d: SynthDataset) -> Self {
        Self {
            manifest: d.manifest,
            images: d.images,
        }
    }
}
