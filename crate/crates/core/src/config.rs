//! Network and optimizer configuration, read from JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DesError, Result};
use crate::global_activation::REDUCTION;
use crate::raster::grid_extent;
use crate::seg_branch::SegBranchConfig;
use crate::ssd::anchors::{ssd_anchor_shapes, SourceLayerSpec};

/// The four network arms compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Plain detector: no gates, no segmentation branch.
    #[serde(rename = "baseline")]
    Baseline,
    /// Global activation gates on every source layer.
    G,
    /// Gates plus the segmentation branch re-weighting the first source.
    GS,
    /// Gates plus a segmentation branch that is trained but leaves the
    /// feature untouched.
    #[serde(rename = "GS_parallel")]
    GSParallel,
}

impl Variant {
    pub fn has_gates(self) -> bool {
        !matches!(self, Variant::Baseline)
    }

    pub fn has_seg_branch(self) -> bool {
        matches!(self, Variant::GS | Variant::GSParallel)
    }

    pub fn activates(self) -> bool {
        matches!(self, Variant::GS)
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::G => "G",
            Variant::GS => "GS",
            Variant::GSParallel => "GS_parallel",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = DesError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "G" => Ok(Variant::G),
            "GS" => Ok(Variant::GS),
            "GS_parallel" => Ok(Variant::GSParallel),
            other => Err(DesError::config("variant", format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub lr: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub schedule: Vec<Phase>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            schedule: vec![
                Phase {
                    lr: 1e-3,
                    iterations: 2000,
                },
                Phase {
                    lr: 1e-4,
                    iterations: 500,
                },
                Phase {
                    lr: 1e-5,
                    iterations: 500,
                },
            ],
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 8,
        }
    }
}

impl OptimizerConfig {
    pub fn total_iterations(&self) -> usize {
        self.schedule.iter().map(|p| p.iterations).sum()
    }

    /// Learning rate in effect at a 0-based iteration, or `None` past the end.
    pub fn lr_at(&self, iteration: usize) -> Option<f64> {
        let mut end = 0;
        for p in &self.schedule {
            end += p.iterations;
            if iteration < end {
                return Some(p.lr);
            }
        }
        None
    }

    /// Iteration indices at which a new phase starts (excluding 0).
    pub fn phase_boundaries(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut end = 0;
        for p in &self.schedule[..self.schedule.len().saturating_sub(1)] {
            end += p.iterations;
            out.push(end);
        }
        out
    }
}

/// Widths of the segmentation branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegWidths {
    pub atrous_width: usize,
    pub mid_width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    /// Square input extent in pixels.
    pub input_size: usize,
    /// Object classes, excluding background.
    pub num_classes: usize,
    /// Output channels of each 3×3 conv + ReLU + 2×2 max-pool stage.
    pub backbone_widths: Vec<usize>,
    /// Stages whose pooled output feeds the prediction heads, lowest first.
    pub source_stages: Vec<usize>,
    pub anchor_scale_min: f64,
    pub anchor_scale_max: f64,
    pub seg_widths: Option<SegWidths>,
    pub sigmoid_on_z: bool,
    pub variant: Variant,
    pub alpha: f64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Write a checkpoint every this many iterations; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Random horizontal flip with probability 0.5.
    pub flip: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            input_size: 64,
            num_classes: 3,
            backbone_widths: vec![16, 32, 64, 64, 64],
            source_stages: vec![2, 3, 4],
            anchor_scale_min: 0.15,
            anchor_scale_max: 0.75,
            seg_widths: Some(SegWidths {
                atrous_width: 64,
                mid_width: 128,
            }),
            sigmoid_on_z: false,
            variant: Variant::GS,
            alpha: 0.1,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            flip: true,
        }
    }
}

impl NetConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: NetConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Downsampling factor after `stage` (0-based).
    pub fn stage_stride(stage: usize) -> usize {
        1 << (stage + 1)
    }

    pub fn source_layers(&self) -> Vec<SourceLayerSpec> {
        ssd_anchor_shapes(self.source_stages.len(), self.anchor_scale_min, self.anchor_scale_max)
            .into_iter()
            .zip(&self.source_stages)
            .map(|(shapes, &stage)| SourceLayerSpec {
                stride: Self::stage_stride(stage),
                channels: self.backbone_widths[stage],
                shapes,
            })
            .collect()
    }

    /// Extent of the segmentation grid (the first source map).
    pub fn seg_grid_extent(&self) -> usize {
        grid_extent(self.input_size, Self::stage_stride(self.source_stages[0]))
    }

    pub fn seg_branch_config(&self) -> Option<SegBranchConfig> {
        let w = self.seg_widths?;
        Some(SegBranchConfig {
            in_channels: self.backbone_widths[self.source_stages[0]],
            atrous_width: w.atrous_width,
            mid_width: w.mid_width,
            num_classes: self.num_classes,
            sigmoid_on_z: self.sigmoid_on_z,
        })
    }

    pub fn validate(&self) -> Result<()> {
        use DesError as E;
        if self.num_classes == 0 {
            return Err(E::config("num_classes", "must be at least 1"));
        }
        if self.backbone_widths.is_empty() || self.backbone_widths.contains(&0) {
            return Err(E::config("backbone_widths", "need at least one stage, all widths positive"));
        }
        let stages = self.backbone_widths.len();
        if self.input_size == 0 || !self.input_size.is_multiple_of(1 << stages) {
            return Err(E::config(
                "input_size",
                format!("{} is not divisible by 2^{stages} (one halving per stage)", self.input_size),
            ));
        }
        if self.source_stages.is_empty() {
            return Err(E::config("source_stages", "need at least one source layer"));
        }
        if self.source_stages.windows(2).any(|w| w[0] >= w[1]) {
            return Err(E::config("source_stages", "must be strictly increasing"));
        }
        if let Some(&s) = self.source_stages.iter().find(|&&s| s >= stages) {
            return Err(E::config("source_stages", format!("stage {s} does not exist ({stages} stages)")));
        }
        if self.variant.has_gates() {
            for &s in &self.source_stages {
                let c = self.backbone_widths[s];
                if !c.is_multiple_of(REDUCTION) {
                    return Err(E::config(
                        "backbone_widths",
                        format!("gated source stage {s} has {c} channels, not a multiple of {REDUCTION}"),
                    ));
                }
            }
        }
        let (lo, hi) = (self.anchor_scale_min, self.anchor_scale_max);
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(E::config("anchor_scale_min", format!("need 0 < min ≤ max ≤ 1, got {lo}..{hi}")));
        }
        match self.seg_widths {
            None if self.variant.has_seg_branch() => {
                return Err(E::config(
                    "seg_widths",
                    format!("variant {} needs segmentation branch widths", self.variant.label()),
                ))
            }
            Some(w) if w.atrous_width == 0 || w.mid_width == 0 => {
                return Err(E::config("seg_widths", "widths must be positive"));
            }
            _ => {}
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(E::config("alpha", format!("must be finite and non-negative, got {}", self.alpha)));
        }
        let opt = &self.optimizer;
        if opt.schedule.is_empty() {
            return Err(E::config("optimizer.schedule", "must not be empty"));
        }
        for (i, p) in opt.schedule.iter().enumerate() {
            if !(p.lr > 0.0 && p.lr.is_finite()) || p.iterations == 0 {
                return Err(E::config(
                    format!("optimizer.schedule[{i}]"),
                    "needs a positive finite lr and at least one iteration",
                ));
            }
        }
        if !(0.0..1.0).contains(&opt.momentum) {
            return Err(E::config("optimizer.momentum", format!("must be in [0, 1), got {}", opt.momentum)));
        }
        if !(opt.weight_decay >= 0.0 && opt.weight_decay.is_finite()) {
            return Err(E::config("optimizer.weight_decay", "must be finite and non-negative"));
        }
        if opt.batch_size == 0 {
            return Err(E::config("optimizer.batch_size", "must be at least 1"));
        }
        Ok(())
    }
}
