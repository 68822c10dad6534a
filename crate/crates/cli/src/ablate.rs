//! Ablation grids: each cell is a set of config overrides trained and
//! evaluated on the same data.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use seascn::dataio::Dataset;
use seascn::eval::MetricSet;
use seascn::RunConfig;

use crate::predict::evaluate_detector;
use crate::train::{train, Flow, TrainOutput};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub name: String,
    pub overrides: Vec<String>,
}

impl Cell {
    pub fn new(name: &str, overrides: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            overrides: overrides.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Parses `name:key=value,key=value`; the name defaults to the override list.
    pub fn parse(spec: &str) -> Result<Self> {
        let (name, rest) = match spec.split_once(':') {
            Some((n, r)) if !n.contains('=') => (n.to_string(), r),
            _ => (spec.to_string(), spec),
        };
        let overrides: Vec<String> = rest
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(expand_switch)
            .collect();
        anyhow::ensure!(overrides.iter().all(|o| o.contains('=')), "bad cell spec {spec:?}");
        Ok(Self { name, overrides })
    }
}

/// `sea=off` style shorthands to full keys.
pub fn expand_switch(s: &str) -> String {
    match s {
        "sea=off" => "sea.enabled=false".into(),
        "sea=on" => "sea.enabled=true".into(),
        "scmb=off" => "scmb.enabled=false".into(),
        "scmb=on" => "scmb.enabled=true".into(),
        other => other.to_string(),
    }
}

/// {SEA off/on} x {SCMB off/on}, baseline first.
pub fn default_grid() -> Vec<Cell> {
    vec![
        Cell::new("baseline", &["sea.enabled=false", "scmb.enabled=false"]),
        Cell::new("+SEA", &["sea.enabled=true", "scmb.enabled=false"]),
        Cell::new("+SCMB", &["sea.enabled=false", "scmb.enabled=true"]),
        Cell::new("+SEA+SCMB", &["sea.enabled=true", "scmb.enabled=true"]),
    ]
}

/// Uniform scale of the attention module over levels 3..=6.
pub fn uniform_sweep() -> Vec<Cell> {
    (3..=6)
        .map(|l| Cell {
            name: format!("uniform=P{l}"),
            overrides: vec!["sea.enabled=true".into(), format!("sea.uniform_level={l}")],
        })
        .collect()
}

/// Fusion mode of each module.
pub fn fusion_sweep() -> Vec<Cell> {
    vec![
        Cell::new("sea MULTIPLY", &["sea.enabled=true", "sea.fusion=MULTIPLY"]),
        Cell::new("sea CONCATE", &["sea.enabled=true", "sea.fusion=CONCATE"]),
        Cell::new("scmb MULTIPLY", &["scmb.enabled=true", "scmb.fusion=MULTIPLY"]),
        Cell::new("scmb CONCATE", &["scmb.enabled=true", "scmb.fusion=CONCATE"]),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: String,
    pub sea: bool,
    pub scmb: bool,
    pub overrides: Vec<String>,
    /// Hash of the resolved model architecture.
    pub config_hash: String,
    pub bbox: MetricSet,
    pub segm: MetricSet,
    pub final_loss: Option<f64>,
}

/// Trains and evaluates every cell on the same data. With `out`, each cell
/// gets its own directory holding its resolved config, loss log and
/// checkpoints.
pub fn run_grid(
    base: &RunConfig,
    cells: &[Cell],
    train_data: &Dataset,
    eval_data: &Dataset,
    out: Option<&Path>,
    mut progress: impl FnMut(&str),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(cells.len());
    for (i, cell) in cells.iter().enumerate() {
        let cfg = base
            .with_overrides(&cell.overrides)
            .with_context(|| format!("cell {:?}", cell.name))?;
        let model = cfg.model(train_data.manifest.num_classes());
        progress(&format!("[{}/{}] {} ({})", i + 1, cells.len(), cell.name, &model.hash()[..12]));
        let dir = out.map(|o| o.join(format!("cell_{i:02}")));
        if let Some(d) = &dir {
            crate::write_config_snapshot(d, &cfg)?;
        }
        let target = dir.as_deref().map(|d| TrainOutput { dir: d });
        let outcome = train::<f32>(&cfg, train_data, target.as_ref(), |_, _| Ok(Flow::Continue))?;
        let report = evaluate_detector(&outcome.detector, eval_data, &cfg)?;
        rows.push(AblationRow {
            cell: cell.name.clone(),
            sea: cfg.sea.enabled,
            scmb: cfg.scmb.enabled,
            overrides: cell.overrides.clone(),
            config_hash: model.hash(),
            bbox: report.bbox,
            segm: report.segm,
            final_loss: outcome.log.last().map(|r| r.loss.l_total),
        });
    }
    Ok(rows)
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.1}", 100.0 * v))
}

/// One row per cell with SEA/SCMB marks, mask and box AP, and the hash.
pub fn table(rows: &[AblationRow]) -> String {
    const METRICS: [&str; 9] = ["AP^m", "AP50", "AP75", "APs", "APm", "APl", "AP^b", "AP50", "AP75"];
    let mut s = String::new();
    let _ = write!(s, "{:<16} {:>3} {:>4} ", "cell", "SEA", "SCMB");
    for (i, m) in METRICS.iter().enumerate() {
        let _ = write!(s, "{}{m:>6}", if i == 6 { " |" } else { "" });
    }
    let _ = writeln!(s, " | config");
    for r in rows {
        let mark = |b: bool| if b { "x" } else { "" };
        let (m, b) = (&r.segm, &r.bbox);
        let _ = write!(s, "{:<16} {:>3} {:>4} ", r.cell, mark(r.sea), mark(r.scmb));
        let vals = [m.ap, m.ap50, m.ap75, m.ap_s, m.ap_m, m.ap_l, b.ap, b.ap50, b.ap75];
        for (i, v) in vals.into_iter().enumerate() {
            let _ = write!(s, "{}{:>6}", if i == 6 { " |" } else { "" }, pct(v));
        }
        let _ = writeln!(s, " | {}", &r.config_hash[..12]);
    }
    s
}

/// AP^m differences of the three module cells against the baseline cell of
/// a default grid, in AP points.
pub fn grid_deltas(rows: &[AblationRow]) -> Option<[f64; 3]> {
    let find = |sea: bool, scmb: bool| rows.iter().find(|r| r.sea == sea && r.scmb == scmb)?.segm.ap;
    let base = find(false, false)?;
    Some([
        100.0 * (find(true, false)? - base),
        100.0 * (find(false, true)? - base),
        100.0 * (find(true, true)? - base),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_specs() {
        let c = Cell::parse("mine:sea=off,scmb.branches=14").unwrap();
        assert_eq!(c.name, "mine");
        assert_eq!(c.overrides, vec!["sea.enabled=false", "scmb.branches=14"]);
        let c = Cell::parse("sea.uniform_level=4").unwrap();
        assert_eq!(c.name, "sea.uniform_level=4");
        assert!(Cell::parse("oops").is_err());
    }

    #[test]
    fn grid_shapes() {
        assert_eq!(default_grid().len(), 4);
        assert_eq!(uniform_sweep().len(), 4);
        let base = RunConfig::default();
        for c in default_grid().iter().chain(&uniform_sweep()).chain(&fusion_sweep()) {
            base.with_overrides(&c.overrides).unwrap();
        }
    }

    #[test]
    fn table_columns_line_up() {
        let metrics = MetricSet {
            ap: Some(0.127),
            ap50: Some(0.37),
            ap75: None,
            ap_s: Some(0.124),
            ap_m: Some(1.0),
            ap_l: None,
        };
        let row = AblationRow {
            cell: "+SEA".into(),
            sea: true,
            scmb: false,
            overrides: Vec::new(),
            config_hash: "0123456789abcdef".into(),
            bbox: metrics.clone(),
            segm: metrics,
            final_loss: None,
        };
        let t = table(&[row]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0].find('|'), lines[1].find('|'), "{t}");
        assert_eq!(lines[0].rfind('|'), lines[1].rfind('|'), "{t}");
        assert!(lines[1].contains("  12.7  37.0     -"));
    }
}
