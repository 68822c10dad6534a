use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use seascn::dataio::{checkpoint_load, rle_encode, synth_generate, Dataset};
use seascn::eval::ResultRecord;
use seascn::{Detector, RunConfig};
use seascn_cli::ablate::{self, Cell};
use seascn_cli::train::{train, Flow};
use seascn_cli::viz::{self, Panel};
use seascn_cli::{tile_dataset, CONFIG_SNAPSHOT};
use tempfile::TempDir;

const TINY: &str = r#"
seed = 3

[backbone]
stage_widths = [8, 8, 16, 16]

[fpn]
channels = 8

[scmb]
channels = 8

[head]
hidden = 16

[proposals]
per_gt = 2
background = 2

[train]
steps = 3
checkpoint_every = 2
rois_per_image = 8

[synth]
num_images = 3
height = 64
width = 64
classes = ["disc", "rectangle"]
scale_range = [0.2, 0.6]
min_instances = 1
max_instances = 2
"#;

struct Run {
    dir: TempDir,
    config: PathBuf,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("tiny.toml");
        fs::write(&config, TINY).unwrap();
        Self { dir, config }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn seascn(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_seascn"))
            .current_dir(self.dir.path())
            .arg("--config")
            .arg(&self.config)
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.seascn(args);
        assert!(
            out.status.success(),
            "seascn {args:?} failed:\n{}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn err(&self, args: &[&str]) -> String {
        let out = self.seascn(args);
        assert!(!out.status.success(), "seascn {args:?} should fail");
        String::from_utf8(out.stderr).unwrap()
    }

    fn cfg(&self) -> RunConfig {
        RunConfig::load(Some(&self.config), &[]).unwrap()
    }
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let r = Run::new();
    r.ok(&["synth", "--out", "a"]);
    r.ok(&["synth", "--out", "b"]);
    let (a, b) = (tree(&r.path("a")), tree(&r.path("b")));
    assert!(a.iter().any(|(p, _)| p.ends_with("manifest.json")));
    assert!(a.iter().any(|(p, _)| p.ends_with(CONFIG_SNAPSHOT)));
    assert_eq!(a, b);
    r.ok(&["synth", "--out", "c", "--seed", "4"]);
    assert_ne!(a, tree(&r.path("c")));
}

#[test]
fn synth_with_zero_images_writes_an_empty_manifest() {
    let r = Run::new();
    r.ok(&["synth", "--out", "z", "--set", "synth.num_images=0"]);
    let ds = Dataset::load(&r.path("z/manifest.json")).unwrap();
    assert!(ds.images.is_empty());
    assert!(ds.manifest.annotations.is_empty());
}

#[test]
fn bad_scale_range_names_the_key() {
    let r = Run::new();
    let err = r.err(&["synth", "--out", "x", "--set", "synth.scale_range=[0.9, 0.1]"]);
    assert!(err.contains("synth.scale_range"), "{err}");
}

#[test]
fn tiling_counts_patches() {
    let mut cfg = RunConfig::default();
    cfg.synth.num_images = 1;
    cfg.synth.max_instances = 2;
    for (side, patches) in [(800, 1), (1000, 4)] {
        cfg.synth.height = side;
        cfg.synth.width = side;
        let data: Dataset = synth_generate(&cfg.synth, 1).unwrap().into();
        let tiled = tile_dataset(&data, &cfg.tile).unwrap();
        assert_eq!(tiled.patches_per_image, vec![patches], "{side}x{side}");
        assert!(tiled.dataset.images.iter().all(|i| i.height == 800 && i.width == 800));
    }
}

#[test]
fn tile_rejects_zero_stride() {
    let r = Run::new();
    r.ok(&["synth", "--out", "d"]);
    let err = r.err(&["tile", "--data", "d/manifest.json", "--stride", "0", "--out", "t"]);
    assert!(err.contains("stride"), "{err}");
    let out = r.ok(&["tile", "--data", "d/manifest.json", "--patch", "32", "--stride", "32", "--keep-empty", "--out", "t"]);
    assert!(out.contains("3 images -> 12 patches"), "{out}");
    assert!(r.path("t/manifest.json").exists());
    assert!(r.path("t").join(CONFIG_SNAPSHOT).exists());
}

#[test]
fn zero_learning_rate_keeps_initial_weights() {
    let r = Run::new();
    let cfg = r.cfg().with_overrides(&["train.lr=0".into()]).unwrap();
    let data: Dataset = synth_generate(&cfg.synth, cfg.seed).unwrap().into();
    let model = cfg.model(data.manifest.num_classes());
    let init = Detector::<f64>::new(&model, cfg.seed).unwrap();
    let outcome = train::<f64>(&cfg, &data, None, |_, _| Ok(Flow::Continue)).unwrap();
    assert_eq!(outcome.steps, 3);
    assert_eq!(outcome.detector.params(), init.params());
}

#[test]
fn training_is_reproducible_and_leaves_artifacts() {
    let r = Run::new();
    r.ok(&["train", "--out", "a"]);
    r.ok(&["train", "--out", "b"]);
    let log = |d: &str| fs::read_to_string(r.path(d).join("loss.tsv")).unwrap();
    assert_eq!(log("a"), log("b"));
    let lines: Vec<_> = log("a").lines().map(String::from).collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("step\tlr\t"));
    for f in ["final.ckpt", "checkpoints/step_000002.ckpt", CONFIG_SNAPSHOT] {
        assert!(r.path("a").join(f).exists(), "{f}");
    }
    assert_eq!(fs::read(r.path("a/final.ckpt")).unwrap(), fs::read(r.path("b/final.ckpt")).unwrap());
}

#[test]
fn ablate_switch_reaches_the_saved_config() {
    let r = Run::new();
    r.ok(&["train", "--out", "off", "--ablate", "sea=off,scmb=off", "--set", "train.steps=1"]);
    let saved = RunConfig::load(Some(&r.path("off").join(CONFIG_SNAPSHOT)), &[]).unwrap();
    assert!(!saved.sea.enabled && !saved.scmb.enabled);
    let ckpt = checkpoint_load::<f32>(&r.path("off/final.ckpt"), None).unwrap();
    assert!(!ckpt.config.sea.enabled && !ckpt.config.scmb.enabled);
}

#[test]
fn eval_of_an_empty_manifest_reports_undefined() {
    let r = Run::new();
    r.ok(&["synth", "--out", "z", "--set", "synth.num_images=0"]);
    fs::write(r.path("none.json"), "[]").unwrap();
    r.ok(&["eval", "--data", "z/manifest.json", "--results-file", "none.json", "--out", "e"]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(r.path("e/report.json")).unwrap()).unwrap();
    assert!(report["segm"]["ap"].is_null());
    assert!(report["bbox"]["ap50"].is_null());
}

#[test]
fn eval_of_perfect_results_is_one() {
    let r = Run::new();
    r.ok(&["synth", "--out", "d"]);
    let ds = Dataset::load(&r.path("d/manifest.json")).unwrap();
    let records: Vec<ResultRecord> = ds
        .manifest
        .images
        .iter()
        .flat_map(|img| ds.manifest.instances(img.id).unwrap().into_iter().map(move |a| (img.id, a)))
        .map(|(image_id, a)| ResultRecord {
            image_id,
            category_id: a.class_id,
            score: 1.0,
            bbox: a.bbox,
            segmentation: rle_encode(&a.mask),
        })
        .collect();
    fs::write(r.path("gt.json"), serde_json::to_string(&records).unwrap()).unwrap();
    let table = r.ok(&["eval", "--data", "d/manifest.json", "--results-file", "gt.json", "--out", "e"]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(r.path("e/report.json")).unwrap()).unwrap();
    assert_eq!(report["segm"]["ap"].as_f64(), Some(1.0), "{table}");
    assert_eq!(report["bbox"]["ap"].as_f64(), Some(1.0));
}

#[test]
fn eval_of_a_checkpoint_is_deterministic_and_checks_the_architecture() {
    let r = Run::new();
    r.ok(&["synth", "--out", "d"]);
    r.ok(&["train", "--data", "d/manifest.json", "--out", "t", "--set", "train.steps=1"]);
    r.ok(&["eval", "--data", "d/manifest.json", "--checkpoint", "t/final.ckpt", "--out", "e1"]);
    r.ok(&["eval", "--data", "d/manifest.json", "--checkpoint", "t/final.ckpt", "--out", "e2"]);
    assert_eq!(tree(&r.path("e1")), tree(&r.path("e2")));
    let err = r.err(&[
        "eval",
        "--data",
        "d/manifest.json",
        "--checkpoint",
        "t/final.ckpt",
        "--out",
        "e3",
        "--set",
        "fpn.channels=16",
    ]);
    assert!(err.contains("hash"), "{err}");
}

#[test]
fn ablation_rows_carry_config_hashes() {
    let r = Run::new();
    let cfg = r.cfg().with_overrides(&["train.steps=1".into()]).unwrap();
    let data: Dataset = synth_generate(&cfg.synth, cfg.seed).unwrap().into();
    let cells = [Cell::parse("only:sea=off").unwrap()];
    let rows = ablate::run_grid(&cfg, &cells, &data, &data, Some(r.dir.path()), |_| {}).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].cell, "only");
    assert!(!rows[0].sea && rows[0].scmb);
    assert_eq!(rows[0].config_hash, cfg.with_overrides(&cells[0].overrides).unwrap().model(2).hash());
    assert!(r.path("cell_00").join(CONFIG_SNAPSHOT).exists());
    assert!(ablate::table(&rows).contains(&rows[0].config_hash[..12]));
}

#[test]
fn ablate_command_writes_a_table() {
    let r = Run::new();
    let out = r.ok(&[
        "ablate",
        "--cell",
        "a:sea=off",
        "--cell",
        "b:sea=on",
        "--eval-images",
        "1",
        "--set",
        "train.steps=1",
        "--out",
        "ab",
    ]);
    assert!(out.contains("config"), "{out}");
    let rows: Vec<ablate::AblationRow> = serde_json::from_slice(&fs::read(r.path("ab/ablation.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 2);
    assert_ne!(rows[0].config_hash, rows[1].config_hash);
    assert!(r.path("ab").join(CONFIG_SNAPSHOT).exists());
}

#[test]
fn viz_writes_the_requested_panels_deterministically() {
    let r = Run::new();
    r.ok(&["synth", "--out", "d"]);
    r.ok(&["train", "--data", "d/manifest.json", "--out", "t", "--set", "train.steps=1"]);
    let args = |out: &'static str| {
        [
            "viz",
            "--checkpoint",
            "t/final.ckpt",
            "--data",
            "d/manifest.json",
            "--image-id",
            "2",
            "--panels",
            "input,attention,instances",
            "--out",
            out,
        ]
    };
    r.ok(&args("v1"));
    r.ok(&args("v2"));
    let files = tree(&r.path("v1"));
    assert_eq!(files.len(), 4);
    assert_eq!(files, tree(&r.path("v2")));
}

#[test]
fn disabled_attention_renders_identical_level_panels() {
    let r = Run::new();
    let cfg = r.cfg().with_overrides(&["sea.enabled=false".into()]).unwrap();
    let data: Dataset = synth_generate(&cfg.synth, cfg.seed).unwrap().into();
    let det = Detector::<f32>::new(&cfg.model(2), 5).unwrap();
    let gts = data.manifest.instances(1).unwrap();
    let panels = viz::available_panels(false);
    let out = viz::render(&det, &data.images[0], &gts, &cfg, &panels, 0).unwrap();
    assert_eq!(out.len(), panels.len());
    let get = |p: Panel| &out.iter().find(|(q, _)| *q == p).unwrap().1;
    assert_eq!(get(Panel::Before), get(Panel::After));
    assert!(viz::render(&det, &data.images[0], &gts, &cfg, &[Panel::Attention], 0).is_err());
}
