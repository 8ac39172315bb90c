//! CSV outputs.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use mlb_seg_core::metrics::MetricsSummary;

use crate::error::{BootError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Baseline,
    Fixed,
    Mlb,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Baseline, Phase::Fixed, Phase::Mlb];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Baseline => "baseline",
            Phase::Fixed => "fixed",
            Phase::Mlb => "mlb",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Phase {
    type Err = BootError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| BootError::Invalid(format!("unknown phase `{s}`")))
    }
}

/// Training losses and eval metrics after `epoch` completed epochs of a
/// phase. Epoch 0 is the phase's starting point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRow {
    pub phase: Phase,
    pub epoch: usize,
    /// Mean cross-entropy for the baseline, mean total loss otherwise.
    pub train_loss: f64,
    pub bootstrap_loss: f64,
    pub aug_loss: f64,
    pub st_loss: f64,
    pub eval: MetricsSummary,
}

const METRIC_HEADER: [&str; 7] = ["dice", "jaccard", "hd", "hd95", "asd", "cases", "degenerate"];

fn metric_fields(m: &MetricsSummary) -> [String; 7] {
    [
        m.dice.to_string(),
        m.jaccard.to_string(),
        m.hd.to_string(),
        m.hd95.to_string(),
        m.asd.to_string(),
        m.cases.to_string(),
        m.degenerate.to_string(),
    ]
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    Ok(csv::Writer::from_path(path)?)
}

pub fn write_report(path: &Path, rows: &[EpochRow]) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["phase", "epoch", "train_loss", "bootstrap_loss", "aug_loss", "st_loss"];
    header.extend(METRIC_HEADER);
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.phase.to_string(),
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.bootstrap_loss.to_string(),
            r.aug_loss.to_string(),
            r.st_loss.to_string(),
        ];
        rec.extend(metric_fields(&r.eval));
        w.write_record(&rec)?;
    }
    w.flush().map_err(crate::error::io_err(path))
}

/// Eval metrics of the final and of the best (by Dice) snapshot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinalReport {
    pub phase: Phase,
    pub final_epoch: usize,
    pub final_eval: MetricsSummary,
    pub best_epoch: usize,
    pub best_eval: MetricsSummary,
}

pub fn write_final(path: &Path, f: &FinalReport) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["snapshot", "phase", "epoch"];
    header.extend(METRIC_HEADER);
    w.write_record(&header)?;
    for (name, epoch, m) in [
        ("final", f.final_epoch, &f.final_eval),
        ("best", f.best_epoch, &f.best_eval),
    ] {
        let mut rec = vec![name.to_string(), f.phase.to_string(), epoch.to_string()];
        rec.extend(metric_fields(m));
        w.write_record(&rec)?;
    }
    w.flush().map_err(crate::error::io_err(path))
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// One ablation configuration's results over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub seeds: Vec<u64>,
    pub finals: Vec<MetricsSummary>,
}

pub fn write_ablation(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "row",
        "config",
        "seeds",
        "dice_mean",
        "dice_std",
        "jaccard_mean",
        "jaccard_std",
        "hd_mean",
        "hd_std",
        "hd95_mean",
        "hd95_std",
        "asd_mean",
        "asd_std",
    ])?;
    for (i, r) in rows.iter().enumerate() {
        let seeds = r.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";");
        let mut rec = vec![(i + 1).to_string(), r.name.clone(), seeds];
        let getters: [fn(&MetricsSummary) -> f64; 5] = [|m| m.dice, |m| m.jaccard, |m| m.hd, |m| m.hd95, |m| m.asd];
        for g in getters {
            let (m, s) = mean_std(&r.finals.iter().map(g).collect::<Vec<_>>());
            rec.push(m.to_string());
            rec.push(s.to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(crate::error::io_err(path))
}

pub fn write_ablation_runs(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["config", "seed"];
    header.extend(METRIC_HEADER);
    w.write_record(&header)?;
    for r in rows {
        for (seed, m) in r.seeds.iter().zip(&r.finals) {
            let mut rec = vec![r.name.clone(), seed.to_string()];
            rec.extend(metric_fields(m));
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(crate::error::io_err(path))
}
