//! Library side of the `seascn` command: everything the subcommands do,
//! callable without a process boundary.

pub mod ablate;
pub mod predict;
pub mod prep;
pub mod train;
pub mod viz;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use seascn::config::TileConfig;
use seascn::dataio::{write_atomic, AnnotationRecord, Dataset, DatasetManifest, ImageRecord};
use seascn::RunConfig;

pub const CONFIG_SNAPSHOT: &str = "config.toml";

/// Writes the resolved config next to a command's outputs.
pub fn write_config_snapshot(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let path = dir.join(CONFIG_SNAPSHOT);
    write_atomic(&path, cfg.to_toml_string().as_bytes()).with_context(|| format!("writing {}", path.display()))
}

/// Instance counts per class and a log2 histogram of instance areas.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetStats {
    pub images: usize,
    pub instances: usize,
    /// `(category name, count)` in category order.
    pub per_class: Vec<(String, usize)>,
    /// `floor(log2(area))` to count.
    pub area_log2: BTreeMap<u32, usize>,
}

impl DatasetStats {
    pub fn of(manifest: &DatasetManifest) -> Self {
        let per_class = manifest
            .categories
            .iter()
            .map(|c| {
                let n = manifest.annotations.iter().filter(|a| a.category_id == c.id).count();
                (c.name.clone(), n)
            })
            .collect();
        let mut area_log2 = BTreeMap::new();
        for a in &manifest.annotations {
            *area_log2.entry(a.area.max(1).ilog2()).or_insert(0) += 1;
        }
        Self {
            images: manifest.images.len(),
            instances: manifest.annotations.len(),
            per_class,
            area_log2,
        }
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "images: {}  instances: {}", self.images, self.instances);
        for (name, n) in &self.per_class {
            let _ = writeln!(s, "  {name:<12} {n}");
        }
        if !self.area_log2.is_empty() {
            let _ = writeln!(s, "area histogram (px^2):");
            let peak = self.area_log2.values().copied().max().unwrap_or(1);
            for (&b, &n) in &self.area_log2 {
                let bar = "#".repeat((40 * n).div_ceil(peak));
                let _ = writeln!(s, "  [{:>7}, {:>7}) {n:>5} {bar}", 1u64 << b, 1u64 << (b + 1));
            }
        }
        s
    }
}

/// Outcome of tiling a whole dataset.
pub struct TiledDataset {
    pub dataset: Dataset,
    /// Surviving patches per source image, in manifest order.
    pub patches_per_image: Vec<usize>,
}

/// Tiles every image; patches become images named after their source id and
/// origin.
pub fn tile_dataset(data: &Dataset, cfg: &TileConfig) -> Result<TiledDataset> {
    let mut manifest = DatasetManifest {
        categories: data.manifest.categories.clone(),
        ..DatasetManifest::default()
    };
    let mut images = Vec::new();
    let mut patches_per_image = Vec::with_capacity(data.images.len());
    for (rec, img) in data.manifest.images.iter().zip(&data.images) {
        let anns = data.manifest.instances(rec.id)?;
        let tiles = seascn::dataio::tile(img, &anns, cfg).with_context(|| format!("tiling image {}", rec.id))?;
        patches_per_image.push(tiles.len());
        for t in tiles {
            let id = manifest.images.len() as u64 + 1;
            manifest.images.push(ImageRecord {
                id,
                file_name: format!("images/{:05}_x{}_y{}.png", rec.id, t.origin.0, t.origin.1),
                height: t.image.height,
                width: t.image.width,
            });
            for a in &t.annotations {
                let aid = manifest.annotations.len() as u64 + 1;
                manifest.annotations.push(AnnotationRecord::from_instance(aid, id, a));
            }
            images.push(t.image);
        }
    }
    Ok(TiledDataset {
        dataset: Dataset { manifest, images },
        patches_per_image,
    })
}
