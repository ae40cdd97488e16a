//! The four-arm component ablation: baseline, block-wise loss only,
//! modulator only, and the full block, each over several seeds.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::Serialize;

use crate::backbone::{Model, ModelConfig};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::fbnet::{BlockVariant, Stage};
use crate::train::{evaluate, train, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Baseline,
    /// Auxiliary head on the stage features, no sensors.
    BwbceOnly,
    /// Sensors without the auxiliary loss.
    DfmOnly,
    Fbnet,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Baseline, Arm::BwbceOnly, Arm::DfmOnly, Arm::Fbnet];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::BwbceOnly => "bwbce_only",
            Arm::DfmOnly => "dfm_only",
            Arm::Fbnet => "fbnet",
        }
    }

    /// Rewrites a model config for this arm. Non-baseline arms keep the
    /// configured injection stages (res5 when none are configured).
    pub fn configure(self, model: &mut ModelConfig) {
        if self == Arm::Baseline {
            model.inject.clear();
            return;
        }
        if model.inject.is_empty() {
            model.inject = vec![Stage::Res5];
        }
        model.variant = match self {
            Arm::BwbceOnly => BlockVariant::AuxOnly,
            Arm::DfmOnly => BlockVariant::ModulatorOnly,
            _ => BlockVariant::Full,
        };
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown arm {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub seed: u64,
    pub miou: f64,
    pub f_miou: f64,
    pub final_loss: f64,
}

/// Trains one arm from `base` with `seed` and evaluates it on `val`.
pub fn run_arm(arm: Arm, seed: u64, base: &TrainConfig, train_set: &[Sample], val: &[Sample]) -> Result<ArmResult> {
    let mut cfg = base.clone();
    cfg.seed = seed;
    arm.configure(&mut cfg.model);
    let mut model = Model::build(cfg.model.clone(), seed)?;
    let mut final_loss = f64::NAN;
    train(&mut model, train_set, &cfg, |row, _| {
        final_loss = row.total;
        Ok(())
    })?;
    let report = evaluate(&model, val, cfg.batch_size)?;
    Ok(ArmResult {
        arm,
        seed,
        miou: report.miou,
        f_miou: report.f_miou,
        final_loss,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AblationReport {
    pub rows: Vec<ArmResult>,
}

impl AblationReport {
    /// `(mean mIoU, mean f-mIoU)` of an arm over its seeds.
    pub fn mean(&self, arm: Arm) -> Option<(f64, f64)> {
        let rows: Vec<_> = self.rows.iter().filter(|r| r.arm == arm).collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some((
            rows.iter().map(|r| r.miou).sum::<f64>() / n,
            rows.iter().map(|r| r.f_miou).sum::<f64>() / n,
        ))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("arm,seed,miou,f_miou,final_loss\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6}",
                r.arm, r.seed, r.miou, r.f_miou, r.final_loss
            );
        }
        out
    }

    /// Per-arm means in percentage points, as a Markdown table.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| arm | seeds | mIoU | f-mIoU |\n|---|---|---|---|\n");
        for arm in Arm::ALL {
            if let Some((m, f)) = self.mean(arm) {
                let n = self.rows.iter().filter(|r| r.arm == arm).count();
                let _ = writeln!(out, "| {arm} | {n} | {:.2} | {:.2} |", 100.0 * m, 100.0 * f);
            }
        }
        out
    }
}

/// Runs every arm for every seed, reporting each result as it completes.
pub fn run_ablation(
    base: &TrainConfig,
    train_set: &[Sample],
    val: &[Sample],
    seeds: &[u64],
    mut progress: impl FnMut(&ArmResult),
) -> Result<AblationReport> {
    let mut report = AblationReport::default();
    for arm in Arm::ALL {
        for &seed in seeds {
            let r = run_arm(arm, seed, base, train_set, val)?;
            progress(&r);
            report.rows.push(r);
        }
    }
    Ok(report)
}
