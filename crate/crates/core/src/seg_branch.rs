//! Segmentation branch on the low-level detection feature map.
//!
//! Four 3×3 atrous convolutions (dilations 2, 2, 2, 4, each followed by ReLU)
//! and a 1×1 convolution produce the shared intermediate `g`. Two 1×1 heads
//! read `g`: the F head gives per-pixel class logits (softmaxed into `y`), the
//! H head gives the activation map `z` with as many channels as the input.
//! The activated feature is `x ⊙ z`.

use serde::{Deserialize, Serialize};

use crate::autograd::{CustomOp, Graph, NodeId, ParamStore};
use crate::error::{DesError, Result};
use crate::layers::ConvLayer;
use crate::nn::{self, ConvSpec};
use crate::raster::SegGrid;
use crate::tensor::Tensor;

pub const ATROUS_DILATIONS: [usize; 4] = [2, 2, 2, 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegBranchConfig {
    /// Channels of the tapped feature map.
    pub in_channels: usize,
    /// Width of the atrous stack.
    pub atrous_width: usize,
    /// Width of the intermediate map `g`.
    pub mid_width: usize,
    /// Object classes, excluding background.
    pub num_classes: usize,
    /// Squash `z` through a sigmoid before the product. Off by default.
    #[serde(default)]
    pub sigmoid_on_z: bool,
}

impl SegBranchConfig {
    /// Default widths: atrous stack as wide as the input, `g` twice as wide.
    pub fn for_input(in_channels: usize, num_classes: usize) -> Self {
        SegBranchConfig {
            in_channels,
            atrous_width: in_channels,
            mid_width: 2 * in_channels,
            num_classes,
            sigmoid_on_z: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegBranch {
    pub config: SegBranchConfig,
    pub atrous: Vec<ConvLayer>,
    pub g_head: ConvLayer,
    pub f_head: ConvLayer,
    pub h_head: ConvLayer,
}

/// Graph nodes produced by one pass through the branch.
#[derive(Clone, Copy, Debug)]
pub struct SegBranchNodes {
    pub logits: NodeId,
    pub y: NodeId,
    pub z: NodeId,
    pub x_act: NodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegBranchOutput {
    pub y: Tensor,
    pub z: Tensor,
    pub x_act: Tensor,
}

impl SegBranch {
    pub fn new(store: &mut ParamStore, prefix: &str, config: SegBranchConfig, seed: u64) -> Result<Self> {
        let c = &config;
        if c.in_channels == 0 || c.atrous_width == 0 || c.mid_width == 0 || c.num_classes == 0 {
            return Err(DesError::config(
                format!("{prefix}.widths"),
                "segmentation branch widths and class count must be positive",
            ));
        }
        let mut atrous = Vec::with_capacity(ATROUS_DILATIONS.len());
        let mut width = c.in_channels;
        for (i, &d) in ATROUS_DILATIONS.iter().enumerate() {
            let spec = ConvSpec::same3x3(width, c.atrous_width, d);
            atrous.push(ConvLayer::new(store, &format!("{prefix}.atrous{i}"), spec, seed)?);
            width = c.atrous_width;
        }
        let g_head = ConvLayer::new(store, &format!("{prefix}.g"), ConvSpec::pointwise(width, c.mid_width), seed)?;
        let f_head = ConvLayer::new(
            store,
            &format!("{prefix}.f"),
            ConvSpec::pointwise(c.mid_width, c.num_classes + 1),
            seed,
        )?;
        let h_head = ConvLayer::new(
            store,
            &format!("{prefix}.h"),
            ConvSpec::pointwise(c.mid_width, c.in_channels),
            seed,
        )?;
        Ok(SegBranch {
            config,
            atrous,
            g_head,
            f_head,
            h_head,
        })
    }

    /// Builds the branch on `x`. With `activate` false the branch still
    /// predicts `y` but `x_act` is `x` itself (the parallel ablation arm).
    pub fn build(&self, g: &mut Graph, store: &ParamStore, x: NodeId, activate: bool) -> Result<SegBranchNodes> {
        let (c, _, _) = g.value(x).chw()?;
        if c != self.config.in_channels {
            return Err(DesError::shape(
                "seg_forward",
                format!("input has {c} channels, branch expects {}", self.config.in_channels),
            ));
        }
        let mut h = x;
        for layer in &self.atrous {
            let conv = layer.apply(g, store, h)?;
            h = g.relu(conv);
        }
        let mid = self.g_head.apply(g, store, h)?;
        let logits = self.f_head.apply(g, store, mid)?;
        let y = g.softmax_channels(logits)?;
        let raw_z = self.h_head.apply(g, store, mid)?;
        let z = if self.config.sigmoid_on_z { g.sigmoid(raw_z) } else { raw_z };
        let x_act = if activate { g.mul(x, z)? } else { x };
        Ok(SegBranchNodes { logits, y, z, x_act })
    }

    fn run(&self, store: &ParamStore, x: &Tensor, activate: bool) -> Result<SegBranchOutput> {
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let n = self.build(&mut g, store, xi, activate)?;
        Ok(SegBranchOutput {
            y: g.value(n.y).clone(),
            z: g.value(n.z).clone(),
            x_act: g.value(n.x_act).clone(),
        })
    }

    pub fn seg_forward(&self, store: &ParamStore, x: &Tensor) -> Result<SegBranchOutput> {
        self.run(store, x, true)
    }

    pub fn parallel_variant_forward(&self, store: &ParamStore, x: &Tensor) -> Result<SegBranchOutput> {
        self.run(store, x, false)
    }
}

fn check_grid(op: &'static str, k: usize, h: usize, w: usize, grid: &SegGrid) -> Result<()> {
    if grid.height != h || grid.width != w {
        return Err(DesError::shape(
            op,
            format!("prediction is {h}×{w}, ground truth is {}×{}", grid.height, grid.width),
        ));
    }
    if let Some(&bad) = grid.labels.iter().find(|&&l| l as usize >= k) {
        return Err(DesError::shape(op, format!("label {bad} out of range for {k} classes")));
    }
    Ok(())
}

/// `−(1/HW) Σ log y[g(h,w), h, w]` for a probability map `y`.
pub fn seg_loss(y: &Tensor, grid: &SegGrid) -> Result<f64> {
    let (k, h, w) = y.chw()?;
    check_grid("seg_loss", k, h, w, grid)?;
    let plane = h * w;
    let total: f64 = grid
        .labels
        .iter()
        .enumerate()
        .map(|(p, &l)| -y.data()[l as usize * plane + p].ln())
        .sum();
    Ok(total / plane as f64)
}

/// Same loss computed from logits with a log-sum-exp, as a graph node.
pub fn seg_loss_from_logits(g: &mut Graph, logits: NodeId, grid: &SegGrid) -> Result<NodeId> {
    let (k, h, w) = g.value(logits).chw()?;
    check_grid("seg_loss", k, h, w, grid)?;
    let plane = h * w;
    let x = g.value(logits).data();
    let mut total = 0.0;
    for (p, &l) in grid.labels.iter().enumerate() {
        let m = (0..k).map(|c| x[c * plane + p]).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + (0..k).map(|c| (x[c * plane + p] - m).exp()).sum::<f64>().ln();
        total += lse - x[l as usize * plane + p];
    }
    let value = Tensor::scalar(total / plane as f64);
    Ok(g.custom(
        &[logits],
        value,
        Box::new(SegCrossEntropy {
            labels: grid.labels.clone(),
        }),
    ))
}

struct SegCrossEntropy {
    labels: Vec<u32>,
}

impl CustomOp for SegCrossEntropy {
    fn name(&self) -> &'static str {
        "seg_cross_entropy"
    }

    fn backward(&self, inputs: &[&Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let logits = inputs[0];
        let (_, h, w) = logits.chw()?;
        let plane = h * w;
        let mut grad = nn::softmax_channels(logits)?;
        for (p, &l) in self.labels.iter().enumerate() {
            grad.data_mut()[l as usize * plane + p] -= 1.0;
        }
        Ok(vec![grad.scale(upstream.data()[0] / plane as f64)])
    }
}
