//! Run configuration: one section per subsystem, dotted keys (`sea.enabled`)
//! addressable from files and `key=value` overrides. Unknown keys are errors.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum FusionMode {
    Multiply,
    Concate,
}

/// Which trident paths take part in supervision and fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BranchSpec", into = "String")]
pub enum BranchSet {
    /// Native 14x14 path only (single-scale degeneration).
    S14,
    S7_14,
    S14_28,
    S7_14_28,
}

impl BranchSet {
    /// Membership flags for the 7, 14 and 28 paths.
    pub fn paths(self) -> [bool; 3] {
        match self {
            BranchSet::S14 => [false, true, false],
            BranchSet::S7_14 => [true, true, false],
            BranchSet::S14_28 => [false, true, true],
            BranchSet::S7_14_28 => [true, true, true],
        }
    }

    pub fn len(self) -> usize {
        self.paths().iter().filter(|&&p| p).count()
    }

    pub fn is_empty(self) -> bool {
        false
    }
}

impl TryFrom<String> for BranchSet {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        let mut sizes: Vec<u32> = s
            .split(|c| c == ',' || c == '+')
            .map(|p| p.trim().parse::<u32>().map_err(|_| format!("bad branch size {p:?}")))
            .collect::<Result<_, _>>()?;
        sizes.sort_unstable();
        sizes.dedup();
        match sizes[..] {
            [14] => Ok(BranchSet::S14),
            [7, 14] => Ok(BranchSet::S7_14),
            [14, 28] => Ok(BranchSet::S14_28),
            [7, 14, 28] => Ok(BranchSet::S7_14_28),
            _ => Err(format!("branch set {s:?} must contain 14 and be drawn from 7,14,28")),
        }
    }
}

/// A lone path size reads as a TOML integer, so both forms are accepted.
#[derive(Deserialize)]
#[serde(untagged)]
enum BranchSpec {
    Text(String),
    Size(u32),
}

impl TryFrom<BranchSpec> for BranchSet {
    type Error = String;

    fn try_from(spec: BranchSpec) -> Result<Self, String> {
        match spec {
            BranchSpec::Text(s) => s.try_into(),
            BranchSpec::Size(n) => n.to_string().try_into(),
        }
    }
}

impl From<BranchSet> for String {
    fn from(b: BranchSet) -> String {
        b.to_string()
    }
}

impl fmt::Display for BranchSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BranchSet::S14 => "14",
            BranchSet::S7_14 => "7,14",
            BranchSet::S14_28 => "14,28",
            BranchSet::S7_14_28 => "7,14,28",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub stage_widths: [usize; 4],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_widths: [32, 64, 128, 256],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FpnConfig {
    pub channels: usize,
}

impl Default for FpnConfig {
    fn default() -> Self {
        Self { channels: 256 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeaConfig {
    pub enabled: bool,
    pub uniform_level: usize,
    pub fusion: FusionMode,
}

impl Default for SeaConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            uniform_level: 3,
            fusion: FusionMode::Multiply,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScmbConfig {
    pub enabled: bool,
    pub branches: BranchSet,
    pub fusion: FusionMode,
    /// Filter count of the shared trunk and the fusion convolutions.
    pub channels: usize,
}

impl Default for ScmbConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            branches: BranchSet::S7_14_28,
            fusion: FusionMode::Concate,
            channels: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// Foreground class count; taken from the dataset when unset.
    pub num_classes: Option<usize>,
    pub hidden: usize,
    pub box_roi_size: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            num_classes: None,
            hidden: 1024,
            box_roi_size: 7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ProposalMode {
    GtJitter,
    RpnLite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProposalConfig {
    pub mode: ProposalMode,
    /// Jittered copies per ground-truth box.
    pub per_gt: usize,
    /// Uniformly random background boxes per image.
    pub background: usize,
    /// Max center shift as a fraction of the box side.
    pub center_jitter: f64,
    /// Max relative change of each side.
    pub size_jitter: f64,
    pub rpn_top_k: usize,
    pub rpn_nms: f64,
    /// Anchor side as a multiple of the level stride.
    pub rpn_anchor_scale: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            mode: ProposalMode::GtJitter,
            per_gt: 4,
            background: 8,
            center_jitter: 0.1,
            size_jitter: 0.1,
            rpn_top_k: 300,
            rpn_nms: 0.7,
            rpn_anchor_scale: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub steps: usize,
    /// Steps at which the learning rate is multiplied by `lr_gamma`.
    pub lr_milestones: Vec<usize>,
    pub lr_gamma: f64,
    /// Weights of the detection, segmentation and mask-branch losses.
    pub loss_weights: [f64; 3],
    pub rois_per_image: usize,
    pub fg_fraction: f64,
    pub checkpoint_every: usize,
    /// Short-side sizes for multi-scale training; empty disables it.
    pub multiscale: Vec<usize>,
    /// Global gradient-norm clip; 0 disables.
    pub clip_grad_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            momentum: 0.9,
            weight_decay: 1e-4,
            steps: 1000,
            lr_milestones: Vec::new(),
            lr_gamma: 0.1,
            loss_weights: [1.0, 1.0, 1.0],
            rois_per_image: 64,
            fg_fraction: 0.25,
            checkpoint_every: 500,
            multiscale: Vec::new(),
            clip_grad_norm: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        let drops = self.lr_milestones.iter().filter(|&&m| step >= m).count();
        self.lr * self.lr_gamma.powi(drops as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub nms: f64,
    pub mask_threshold: f64,
    pub max_dets: usize,
    pub score_floor: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            nms: 0.5,
            mask_threshold: 0.5,
            max_dets: 1000,
            score_floor: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disc,
    Rectangle,
    Bar,
    Ring,
}

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Disc => "disc",
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Bar => "bar",
            ShapeKind::Ring => "ring",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_images: usize,
    pub height: usize,
    pub width: usize,
    pub classes: Vec<ShapeKind>,
    /// Min/max object side as a fraction of the shorter image side.
    pub scale_range: [f64; 2],
    pub min_instances: usize,
    pub max_instances: usize,
    /// Expected distractor shapes per 128x128 pixels.
    pub clutter_density: f64,
    pub texture_amplitude: f64,
    pub max_retries: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_images: 100,
            height: 256,
            width: 256,
            classes: vec![ShapeKind::Disc, ShapeKind::Rectangle, ShapeKind::Bar, ShapeKind::Ring],
            scale_range: [0.05, 0.8],
            min_instances: 1,
            max_instances: 6,
            clutter_density: 2.0,
            texture_amplitude: 0.15,
            max_retries: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TileConfig {
    pub patch: usize,
    pub stride: usize,
    pub keep_empty: bool,
    /// Zero-pad images smaller than a patch instead of rejecting them.
    pub pad: bool,
}

impl Default for TileConfig {
    fn default() -> Self {
        Self {
            patch: 800,
            stride: 200,
            keep_empty: false,
            pad: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub max_dets: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { max_dets: 1000 }
    }
}

/// Every configurable key of every subsystem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub fpn: FpnConfig,
    pub sea: SeaConfig,
    pub scmb: ScmbConfig,
    pub head: HeadConfig,
    pub proposals: ProposalConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub synth: SynthConfig,
    pub tile: TileConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            backbone: BackboneConfig::default(),
            fpn: FpnConfig::default(),
            sea: SeaConfig::default(),
            scmb: ScmbConfig::default(),
            head: HeadConfig::default(),
            proposals: ProposalConfig::default(),
            train: TrainConfig::default(),
            infer: InferConfig::default(),
            synth: SynthConfig::default(),
            tile: TileConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

/// The subset of [`RunConfig`] that fixes parameter shapes and the forward graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub backbone: BackboneConfig,
    pub fpn: FpnConfig,
    pub sea: SeaConfig,
    pub scmb: ScmbConfig,
    pub head: HeadConfig,
    pub proposal_mode: ProposalMode,
    pub rpn_anchor_scale: f64,
}

impl ModelConfig {
    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::config("head.num_classes", "must be at least 1"));
        }
        if self.backbone.stage_widths.contains(&0) {
            return Err(Error::config("backbone.stage_widths", "widths must be positive"));
        }
        if self.fpn.channels == 0 {
            return Err(Error::config("fpn.channels", "must be positive"));
        }
        if !(3..=6).contains(&self.sea.uniform_level) {
            return Err(Error::config(
                "sea.uniform_level",
                format!("{} not in 3..=6 (level 2 is not supported)", self.sea.uniform_level),
            ));
        }
        if self.scmb.channels < 2 || self.scmb.channels % 2 != 0 {
            return Err(Error::config("scmb.channels", "must be even and at least 2"));
        }
        if self.head.hidden == 0 || self.head.box_roi_size == 0 {
            return Err(Error::config("head", "hidden and box_roi_size must be positive"));
        }
        Ok(())
    }
}

impl RunConfig {
    /// Reads an optional TOML file, applies `key=value` overrides in order,
    /// and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::config(p.display().to_string(), e.to_string()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// This config with further `key=value` overrides applied, validated.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::Table::try_from(self).map_err(|e| Error::config("config", e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to toml")
    }

    /// Model view with the class count resolved.
    pub fn model(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            num_classes: self.head.num_classes.unwrap_or(num_classes),
            backbone: self.backbone.clone(),
            fpn: self.fpn.clone(),
            sea: self.sea.clone(),
            scmb: self.scmb.clone(),
            head: HeadConfig {
                num_classes: None,
                ..self.head.clone()
            },
            proposal_mode: self.proposals.mode,
            rpn_anchor_scale: self.proposals.rpn_anchor_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model(self.head.num_classes.unwrap_or(1)).validate()?;
        let t = &self.train;
        if !(t.lr >= 0.0 && t.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return Err(Error::config("train.momentum", "must be in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&t.fg_fraction) {
            return Err(Error::config("train.fg_fraction", "must be in [0, 1]"));
        }
        if t.rois_per_image == 0 {
            return Err(Error::config("train.rois_per_image", "must be positive"));
        }
        if t.multiscale.iter().any(|&s| s < 64 || s % 64 != 0) {
            return Err(Error::config("train.multiscale", "sizes must be positive multiples of 64"));
        }
        let i = &self.infer;
        if !(0.0..=1.0).contains(&i.nms) || !(0.0..=1.0).contains(&i.mask_threshold) {
            return Err(Error::config("infer", "nms and mask_threshold must be in [0, 1]"));
        }
        let s = &self.synth;
        let [lo, hi] = s.scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::config(
                "synth.scale_range",
                format!("[{lo}, {hi}] must satisfy 0 < min <= max <= 1"),
            ));
        }
        if s.classes.is_empty() {
            return Err(Error::config("synth.classes", "at least one shape class"));
        }
        if s.min_instances > s.max_instances {
            return Err(Error::config("synth.min_instances", "exceeds synth.max_instances"));
        }
        if s.height < 64 || s.width < 64 || s.height % 64 != 0 || s.width % 64 != 0 {
            return Err(Error::config("synth.height", "image sides must be positive multiples of 64"));
        }
        if self.tile.stride == 0 {
            return Err(Error::config("tile.stride", "must be positive"));
        }
        if self.tile.patch == 0 {
            return Err(Error::config("tile.patch", "must be positive"));
        }
        Ok(())
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must look like key=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = parse_value(raw);
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::config(key, "empty key"))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("{p} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
