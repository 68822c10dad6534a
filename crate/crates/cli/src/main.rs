use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use seascn::config::SynthConfig;
use seascn::dataio::{checkpoint_load, synth_generate, write_atomic, Dataset};
use seascn::eval::{evaluate, ResultRecord};
use seascn::{Detector, RunConfig};

use seascn_cli::ablate::{self, Cell};
use seascn_cli::predict::{eval_config, evaluate_detector};
use seascn_cli::train::{train, Flow, LogRow, TrainOutput};
use seascn_cli::viz::{self, Panel};
use seascn_cli::{tile_dataset, write_config_snapshot, DatasetStats};

#[derive(Parser)]
#[command(name = "seascn", version, about = "Instance segmentation with semantic attention and a multi-scale mask branch")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: out/<command>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Config override `key=value`, applied after the file; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth,
    /// Cut a dataset into overlapping patches.
    Tile {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        patch: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        keep_empty: bool,
    },
    /// Train a detector; synthesizes data from the config when --data is absent.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Module switches such as `sea=off,scmb=off`.
        #[arg(long)]
        ablate: Option<String>,
    },
    /// Score a checkpoint, or a results file, against a manifest.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "results_file")]
        checkpoint: Option<PathBuf>,
        /// JSON array of result records; skips inference.
        #[arg(long)]
        results_file: Option<PathBuf>,
    },
    /// Train and evaluate a grid of configurations.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// Held-out synthetic images when --eval-data is absent.
        #[arg(long, default_value_t = 50)]
        eval_images: usize,
        /// Extra cell `name:key=value,...`; replaces the default grid.
        #[arg(long)]
        cell: Vec<String>,
        /// Add a sweep: `uniform` or `fusion`.
        #[arg(long)]
        sweep: Vec<String>,
    },
    /// Render figure panels for one image.
    Viz {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest holding the image (gives ground truth for proposals).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, requires = "data")]
        image_id: Option<u64>,
        /// A bare PNG instead of a manifest image.
        #[arg(long, conflicts_with = "data")]
        image: Option<PathBuf>,
        /// Comma-separated panel names; default is every available panel.
        #[arg(long)]
        panels: Option<String>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Tile { .. } => "tile",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::Viz { .. } => "viz",
        }
    }
}

fn resolve_config(g: &Global, extra: &[String]) -> Result<RunConfig> {
    let mut overrides = g.overrides.clone();
    if let Some(s) = g.seed {
        overrides.push(format!("seed={s}"));
    }
    overrides.extend_from_slice(extra);
    Ok(RunConfig::load(g.config.as_deref(), &overrides)?)
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn synth_dataset(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    Ok(synth_generate(cfg, seed)?.into())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = synth_dataset(&cfg.synth, cfg.seed)?;
    write_config_snapshot(out, cfg)?;
    let manifest = data.save(out)?;
    print!("{}", DatasetStats::of(&data.manifest).render());
    if !data.manifest.shortfalls.is_empty() {
        println!("placement shortfalls: {}", data.manifest.shortfalls.len());
    }
    println!("wrote {}", manifest.display());
    Ok(())
}

fn cmd_tile(cfg: &RunConfig, out: &Path, data: &Path) -> Result<()> {
    let src = load_dataset(data)?;
    let tiled = tile_dataset(&src, &cfg.tile)?;
    write_config_snapshot(out, cfg)?;
    let manifest = tiled.dataset.save(out)?;
    println!(
        "patch {} stride {}: {} images -> {} patches, {} -> {} instances",
        cfg.tile.patch,
        cfg.tile.stride,
        src.images.len(),
        tiled.dataset.images.len(),
        src.manifest.annotations.len(),
        tiled.dataset.manifest.annotations.len()
    );
    for (rec, n) in src.manifest.images.iter().zip(&tiled.patches_per_image) {
        println!("  image {} ({}x{}): {n} patches", rec.id, rec.width, rec.height);
    }
    println!("wrote {}", manifest.display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig, out: &Path, data: Option<&Path>) -> Result<()> {
    let data = match data {
        Some(p) => load_dataset(p)?,
        None => synth_dataset(&cfg.synth, cfg.seed)?,
    };
    write_config_snapshot(out, cfg)?;
    let target = TrainOutput { dir: out };
    let every = (cfg.train.steps / 20).max(1);
    let outcome = train::<f32>(cfg, &data, Some(&target), |_, row: &LogRow| {
        if row.step % every == 0 || row.step + 1 == cfg.train.steps {
            println!("{}", row.line());
        }
        Ok(Flow::Continue)
    })?;
    println!("{} steps; log {}", outcome.steps, target.log_path().display());
    println!("final checkpoint {}", target.final_path().display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, out: &Path, data: &Path, checkpoint: Option<&Path>, results: Option<&Path>) -> Result<()> {
    let ds = load_dataset(data)?;
    let report = match (results, checkpoint) {
        (Some(r), _) => {
            let text = std::fs::read_to_string(r).with_context(|| format!("reading {}", r.display()))?;
            let records: Vec<ResultRecord> = serde_json::from_str(&text).context("parsing results file")?;
            evaluate(&records, &ds.manifest, &eval_config(cfg))?
        }
        (None, Some(c)) => {
            let model = cfg.model(ds.manifest.num_classes());
            let ckpt = checkpoint_load::<f32>(c, Some(&model))
                .with_context(|| format!("loading {} (pass the training run's config.toml via --config)", c.display()))?;
            let det = Detector::with_params(&ckpt.config, ckpt.params)?;
            evaluate_detector(&det, &ds, cfg)?
        }
        (None, None) => bail!("either --checkpoint or --results-file is required"),
    };
    write_config_snapshot(out, cfg)?;
    write_json(&out.join("report.json"), &report)?;
    let table = report.to_table();
    write_atomic(&out.join("report.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

fn cmd_ablate(
    cfg: &RunConfig,
    out: &Path,
    data: Option<&Path>,
    eval_data: Option<&Path>,
    eval_images: usize,
    cells: &[String],
    sweeps: &[String],
) -> Result<()> {
    let train_data = match data {
        Some(p) => load_dataset(p)?,
        None => synth_dataset(&cfg.synth, cfg.seed)?,
    };
    let eval_data = match eval_data {
        Some(p) => load_dataset(p)?,
        None => {
            let held_out = SynthConfig {
                num_images: eval_images,
                ..cfg.synth.clone()
            };
            synth_dataset(&held_out, cfg.seed.wrapping_add(1))?
        }
    };
    let mut grid: Vec<Cell> = if cells.is_empty() {
        ablate::default_grid()
    } else {
        cells.iter().map(|c| Cell::parse(c)).collect::<Result<_>>()?
    };
    for s in sweeps {
        match s.as_str() {
            "uniform" => grid.extend(ablate::uniform_sweep()),
            "fusion" => grid.extend(ablate::fusion_sweep()),
            other => bail!("unknown sweep {other:?} (uniform, fusion)"),
        }
    }
    write_config_snapshot(out, cfg)?;
    let rows = ablate::run_grid(cfg, &grid, &train_data, &eval_data, Some(out), |m| println!("{m}"))?;
    write_json(&out.join("ablation.json"), &rows)?;
    let mut table = ablate::table(&rows);
    if let Some([sea, scmb, both]) = ablate::grid_deltas(&rows) {
        table.push_str(&format!("delta AP^m vs baseline: SEA {sea:+.1}  SCMB {scmb:+.1}  both {both:+.1}\n"));
    }
    write_atomic(&out.join("ablation.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

fn cmd_viz(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: &Path,
    data: Option<&Path>,
    image_id: Option<u64>,
    image: Option<&Path>,
    panels: Option<&str>,
) -> Result<()> {
    let ckpt = checkpoint_load::<f32>(checkpoint, None)?;
    let det = Detector::with_params(&ckpt.config, ckpt.params)?;
    let (img, gts, seed) = match (data, image) {
        (Some(d), _) => {
            let ds = load_dataset(d)?;
            let id = image_id.unwrap_or_else(|| ds.manifest.images.first().map_or(0, |r| r.id));
            let idx = ds
                .manifest
                .images
                .iter()
                .position(|r| r.id == id)
                .with_context(|| format!("no image {id} in {}", d.display()))?;
            (ds.images[idx].clone(), ds.manifest.instances(id)?, cfg.seed ^ id)
        }
        (None, Some(p)) => (seascn::dataio::RgbImage::load_png(p)?, Vec::new(), cfg.seed),
        (None, None) => bail!("give --data (optionally with --image-id) or --image"),
    };
    let panels: Vec<Panel> = match panels {
        Some(list) => list.split(',').map(|s| Panel::parse(s.trim())).collect::<Result<_>>()?,
        None => viz::available_panels(det.config().sea.enabled),
    };
    let rendered = viz::render(&det, &img, &gts, cfg, &panels, seed)?;
    write_config_snapshot(out, cfg)?;
    for p in viz::write_panels(out, &rendered)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let extra: Vec<String> = match &cli.command {
        Command::Train { ablate: Some(a), .. } => a.split(',').map(|s| ablate::expand_switch(s.trim())).collect(),
        Command::Tile { patch, stride, keep_empty, .. } => {
            let mut v = Vec::new();
            if let Some(p) = patch {
                v.push(format!("tile.patch={p}"));
            }
            if let Some(s) = stride {
                v.push(format!("tile.stride={s}"));
            }
            if *keep_empty {
                v.push("tile.keep_empty=true".into());
            }
            v
        }
        _ => Vec::new(),
    };
    let cfg = resolve_config(&cli.global, &extra)?;
    let out = cli
        .global
        .out
        .clone()
        .unwrap_or_else(|| Path::new("out").join(cli.command.name()));
    std::fs::create_dir_all(&out).with_context(|| format!("creating output directory {}", out.display()))?;
    match &cli.command {
        Command::Synth => cmd_synth(&cfg, &out),
        Command::Tile { data, .. } => cmd_tile(&cfg, &out, data),
        Command::Train { data, .. } => cmd_train(&cfg, &out, data.as_deref()),
        Command::Eval {
            data,
            checkpoint,
            results_file,
        } => cmd_eval(&cfg, &out, data, checkpoint.as_deref(), results_file.as_deref()),
        Command::Ablate {
            data,
            eval_data,
            eval_images,
            cell,
            sweep,
        } => cmd_ablate(&cfg, &out, data.as_deref(), eval_data.as_deref(), *eval_images, cell, sweep),
        Command::Viz {
            checkpoint,
            data,
            image_id,
            image,
            panels,
        } => cmd_viz(&cfg, &out, checkpoint, data.as_deref(), *image_id, image.as_deref(), panels.as_deref()),
    }
}
