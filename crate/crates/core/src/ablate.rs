//! Ablation over network variants and seg-loss weights.
//!
//! Every arm trains from the same base config on the same data with seeds
//! `base.seed + r` for `r < seeds`, so arm `i` and arm `j` see identical
//! initializations for their shared layers and identical batch orders.
//! A failed run is recorded against its arm and the grid continues.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::{NetConfig, Variant};
use crate::data::Dataset;
use crate::error::Result;
use crate::eval::evaluate;
use crate::ssd::decode::DecodeParams;
use crate::train::train;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub variant: Variant,
    pub alpha: f64,
}

impl Arm {
    pub fn new(variant: Variant, alpha: f64) -> Self {
        Arm { variant, alpha }
    }

    pub fn label(&self) -> String {
        match self.variant {
            Variant::Baseline => "baseline".to_string(),
            Variant::G => "+G".to_string(),
            Variant::GS => format!("+G+S (α={})", self.alpha),
            Variant::GSParallel => format!("+G+S parallel (α={})", self.alpha),
        }
    }
}

/// baseline, +G, +G+S at α ∈ {0, 0.1, 1}, and the parallel arm at α = 0.1.
pub fn default_arms() -> Vec<Arm> {
    vec![
        Arm::new(Variant::Baseline, 0.1),
        Arm::new(Variant::G, 0.1),
        Arm::new(Variant::GS, 0.0),
        Arm::new(Variant::GS, 0.1),
        Arm::new(Variant::GS, 1.0),
        Arm::new(Variant::GSParallel, 0.1),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub seed: u64,
    pub map: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub label: String,
    pub runs: Vec<RunOutcome>,
}

impl ArmResult {
    pub fn maps(&self) -> Vec<f64> {
        self.runs.iter().filter_map(|r| r.map).collect()
    }

    pub fn mean(&self) -> Option<f64> {
        let m = self.maps();
        (!m.is_empty()).then(|| m.iter().sum::<f64>() / m.len() as f64)
    }

    /// Sample standard deviation; 0 for a single run.
    pub fn sd(&self) -> Option<f64> {
        let m = self.maps();
        let mean = self.mean()?;
        if m.len() < 2 {
            return Some(0.0);
        }
        Some((m.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m.len() - 1) as f64).sqrt())
    }

    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|r| r.error.is_some()).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: usize,
    pub arms: Vec<ArmResult>,
}

impl AblationTable {
    pub fn arm(&self, variant: Variant, alpha: f64) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.arm.variant == variant && a.arm.alpha == alpha)
    }

    /// Plain-text table, mAP in points (×100).
    pub fn render(&self) -> String {
        let width = self.arms.iter().map(|a| a.label.chars().count()).max().unwrap_or(0).max(3);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>10}  {:>6}  {:>4}  {:>6}", "arm", "mAP (mean)", "sd", "runs", "failed");
        let _ = writeln!(s, "{}", "-".repeat(width + 36));
        for a in &self.arms {
            let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v));
            let _ = writeln!(
                s,
                "{:<width$}  {:>10}  {:>6}  {:>4}  {:>6}",
                a.label,
                fmt(a.mean()),
                fmt(a.sd()),
                a.runs.len(),
                a.failures()
            );
        }
        s
    }
}

/// Trains and evaluates every arm for `seeds` seeds. `progress` is told
/// about each finished run.
pub fn ablate(
    base: &NetConfig,
    train_data: &Dataset,
    test_data: &Dataset,
    arms: &[Arm],
    seeds: usize,
    mut progress: impl FnMut(&Arm, &RunOutcome),
) -> Result<AblationTable> {
    base.validate()?;
    let params = DecodeParams::default();
    let mut results: Vec<ArmResult> = arms
        .iter()
        .map(|arm| ArmResult {
            arm: arm.clone(),
            label: arm.label(),
            runs: Vec::with_capacity(seeds),
        })
        .collect();
    for r in 0..seeds {
        for result in &mut results {
            let cfg = NetConfig {
                variant: result.arm.variant,
                alpha: result.arm.alpha,
                seed: base.seed.wrapping_add(r as u64),
                ..base.clone()
            };
            let outcome = match train(&cfg, train_data, None, |_| {})
                .and_then(|out| evaluate(&out.net, test_data, &params))
            {
                Ok(report) => RunOutcome {
                    seed: cfg.seed,
                    map: Some(report.map),
                    error: None,
                },
                Err(e) => RunOutcome {
                    seed: cfg.seed,
                    map: None,
                    error: Some(e.to_string()),
                },
            };
            progress(&result.arm, &outcome);
            result.runs.push(outcome);
        }
    }
    Ok(AblationTable { seeds, arms: results })
}
