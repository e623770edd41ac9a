//! The toy detector: a small conv backbone, prediction heads on several
//! source maps, optional global activation gates on every source, and an
//! optional segmentation branch on the first source.
//!
//! The backbone trunk always continues from the raw stage output. The
//! segmentation branch and the gates only rewrite what the prediction heads
//! read, so the four variants share the same trunk computation.

use crate::autograd::{Graph, NodeId, ParamStore};
use crate::config::{NetConfig, Variant};
use crate::error::{DesError, Result};
use crate::global_activation::GlobalActivation;
use crate::gradcheck::ParamHolder;
use crate::layers::ConvLayer;
use crate::nn::ConvSpec;
use crate::raster::{BoundingBox, SegGrid};
use crate::seg_branch::{seg_loss_from_logits, SegBranch, SegBranchNodes};
use crate::ssd::anchors::{gen_anchors, AnchorBox, SourceLayerSpec};
use crate::ssd::decode::{decode_nms, softmax_rows, DecodeParams, Detection};
use crate::ssd::loss::det_loss_node;
use crate::ssd::matching::{match_anchors, DEFAULT_MATCH_IOU};
use crate::tensor::Tensor;

/// `det + α·seg`.
pub fn total_loss(det: f64, seg: f64, alpha: f64) -> f64 {
    det + alpha * seg
}

/// How the global activation gates are evaluated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum GateMode {
    Learned,
    /// Every gate replaced by a constant; used to check wiring.
    #[cfg_attr(not(test), allow(dead_code))]
    Constant(f64),
}

#[derive(Clone, Debug)]
pub struct DesNet {
    pub config: NetConfig,
    pub store: ParamStore,
    stages: Vec<ConvLayer>,
    seg: Option<SegBranch>,
    gates: Vec<GlobalActivation>,
    cls_heads: Vec<ConvLayer>,
    box_heads: Vec<ConvLayer>,
    sources: Vec<SourceLayerSpec>,
    anchors: Vec<AnchorBox>,
}

/// Graph nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `A×(N+1)` class logits over all anchors.
    pub class_logits: NodeId,
    /// `A×4` encoded box offsets.
    pub box_preds: NodeId,
    pub seg: Option<SegBranchNodes>,
    /// Raw source feature maps, lowest first.
    pub sources: Vec<NodeId>,
    /// What each pair of prediction heads reads.
    pub head_inputs: Vec<NodeId>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub det: NodeId,
    pub seg: Option<NodeId>,
    pub total: NodeId,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub det: f64,
    pub seg: f64,
    pub total: f64,
}

impl ParamHolder for DesNet {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

impl DesNet {
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let mut store = ParamStore::new();

        let mut stages = Vec::with_capacity(config.backbone_widths.len());
        let mut width = 3;
        for (i, &w) in config.backbone_widths.iter().enumerate() {
            stages.push(ConvLayer::new(&mut store, &format!("stage{i}.conv"), ConvSpec::same3x3(width, w, 1), seed)?);
            width = w;
        }

        let seg = match (config.variant.has_seg_branch(), config.seg_branch_config()) {
            (true, Some(sc)) => Some(SegBranch::new(&mut store, "seg", sc, seed)?),
            _ => None,
        };

        let sources = config.source_layers();
        let mut gates = Vec::new();
        if config.variant.has_gates() {
            for (l, s) in sources.iter().enumerate() {
                gates.push(GlobalActivation::new(&mut store, &format!("ga{l}"), s.channels, seed)?);
            }
        }

        let k = config.num_classes + 1;
        let mut cls_heads = Vec::with_capacity(sources.len());
        let mut box_heads = Vec::with_capacity(sources.len());
        for (l, s) in sources.iter().enumerate() {
            let a = s.anchors_per_cell();
            cls_heads.push(ConvLayer::new(
                &mut store,
                &format!("head{l}.cls"),
                ConvSpec::same3x3(s.channels, k * a, 1),
                seed,
            )?);
            box_heads.push(ConvLayer::new(
                &mut store,
                &format!("head{l}.box"),
                ConvSpec::same3x3(s.channels, 4 * a, 1),
                seed,
            )?);
        }
        let anchors = gen_anchors(&sources, config.input_size);
        Ok(DesNet {
            config,
            store,
            stages,
            seg,
            gates,
            cls_heads,
            box_heads,
            sources,
            anchors,
        })
    }

    pub fn anchors(&self) -> &[AnchorBox] {
        &self.anchors
    }

    pub fn source_layers(&self) -> &[SourceLayerSpec] {
        &self.sources
    }

    pub fn seg_branch(&self) -> Option<&SegBranch> {
        self.seg.as_ref()
    }

    pub fn gates(&self) -> &[GlobalActivation] {
        &self.gates
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let s = self.config.input_size;
        if image.shape() != [3, s, s] {
            return Err(DesError::shape(
                "forward",
                format!("expected a 3×{s}×{s} image, got {:?}", image.shape()),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, image: NodeId) -> Result<Forward> {
        self.forward_with(g, image, GateMode::Learned)
    }

    pub(crate) fn forward_with(&self, g: &mut Graph, image: NodeId, gates: GateMode) -> Result<Forward> {
        self.check_image(g.value(image))?;
        let mut h = image;
        let mut stage_out = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let c = stage.apply(g, &self.store, h)?;
            let r = g.relu(c);
            h = g.maxpool2(r)?;
            stage_out.push(h);
        }
        let sources: Vec<NodeId> = self.config.source_stages.iter().map(|&s| stage_out[s]).collect();

        let mut seg = None;
        let mut head_inputs = Vec::with_capacity(sources.len());
        for (l, &src) in sources.iter().enumerate() {
            let mut x = src;
            if l == 0 {
                if let Some(branch) = &self.seg {
                    let nodes = branch.build(g, &self.store, x, self.config.variant.activates())?;
                    x = nodes.x_act;
                    seg = Some(nodes);
                }
            }
            if let Some(block) = self.gates.get(l) {
                x = match gates {
                    GateMode::Learned => block.build(g, &self.store, x)?,
                    GateMode::Constant(v) => {
                        let gate = g.input(Tensor::full([block.channels, 1, 1], v));
                        g.mul(x, gate)?
                    }
                };
            }
            head_inputs.push(x);
        }

        let k = self.config.num_classes + 1;
        let mut cls_parts = Vec::with_capacity(sources.len());
        let mut box_parts = Vec::with_capacity(sources.len());
        for (l, &x) in head_inputs.iter().enumerate() {
            let c = self.cls_heads[l].apply(g, &self.store, x)?;
            cls_parts.push(g.head_flatten(c, k)?);
            let b = self.box_heads[l].apply(g, &self.store, x)?;
            box_parts.push(g.head_flatten(b, 4)?);
        }
        let class_logits = g.concat_rows(&cls_parts)?;
        let box_preds = g.concat_rows(&box_parts)?;
        Ok(Forward {
            class_logits,
            box_preds,
            seg,
            sources,
            head_inputs,
        })
    }

    /// Builds forward pass and objective for one annotated image. `grid` is
    /// the weak segmentation target at the first source's resolution.
    pub fn loss(
        &self,
        g: &mut Graph,
        image: &Tensor,
        boxes: &[BoundingBox],
        grid: &SegGrid,
    ) -> Result<(Forward, LossNodes)> {
        let x = g.input(image.clone());
        let fwd = self.forward(g, x)?;
        let nodes = self.objective(g, &fwd, boxes, grid)?;
        Ok((fwd, nodes))
    }

    /// Objective nodes on top of an existing forward pass.
    pub fn objective(&self, g: &mut Graph, fwd: &Forward, boxes: &[BoundingBox], grid: &SegGrid) -> Result<LossNodes> {
        let m = match_anchors(&self.anchors, boxes, DEFAULT_MATCH_IOU)?;
        let det = det_loss_node(g, fwd.class_logits, fwd.box_preds, &m)?;
        let (seg, total) = match &fwd.seg {
            Some(nodes) => {
                let s = seg_loss_from_logits(g, nodes.logits, grid)?;
                let weighted = g.scale(s, self.config.alpha);
                (Some(s), g.add(det, weighted)?)
            }
            None => (None, det),
        };
        Ok(LossNodes { det, seg, total })
    }

    pub fn loss_values(g: &Graph, nodes: &LossNodes) -> LossValues {
        LossValues {
            det: g.value(nodes.det).data()[0],
            seg: nodes.seg.map_or(0.0, |s| g.value(s).data()[0]),
            total: g.value(nodes.total).data()[0],
        }
    }

    /// Class probabilities `A×(N+1)` and box offsets `A×4` for one image.
    pub fn predict(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let x = g.input(image.clone());
        let fwd = self.forward(&mut g, x)?;
        let probs = softmax_rows(g.value(fwd.class_logits))?;
        Ok((probs, g.value(fwd.box_preds).clone()))
    }

    pub fn detect(&self, image: &Tensor, params: &DecodeParams) -> Result<Vec<Detection>> {
        let (probs, boxes) = self.predict(image)?;
        decode_nms(&probs, &boxes, &self.anchors, params)
    }

    /// First source map `x` and, for variants with a seg branch, its `z`,
    /// `x_act` and `y`.
    pub fn activation_maps(&self, image: &Tensor) -> Result<ActivationMaps> {
        let mut g = Graph::new();
        let x = g.input(image.clone());
        let fwd = self.forward(&mut g, x)?;
        Ok(ActivationMaps {
            x: g.value(fwd.sources[0]).clone(),
            seg: fwd.seg.map(|n| SegMaps {
                z: g.value(n.z).clone(),
                x_act: g.value(n.x_act).clone(),
                y: g.value(n.y).clone(),
            }),
        })
    }
}

#[derive(Clone, Debug)]
pub struct SegMaps {
    pub z: Tensor,
    pub x_act: Tensor,
    pub y: Tensor,
}

#[derive(Clone, Debug)]
pub struct ActivationMaps {
    pub x: Tensor,
    pub seg: Option<SegMaps>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{OptimizerConfig, Phase, SegWidths};
    use crate::raster::rasterize;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(size: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([3, size, size], |_| rng.gen_range(0.0..1.0))
    }

    fn tiny(variant: Variant) -> NetConfig {
        NetConfig {
            input_size: 16,
            num_classes: 2,
            backbone_widths: vec![4, 8, 8, 8],
            source_stages: vec![1, 2, 3],
            seg_widths: Some(SegWidths {
                atrous_width: 4,
                mid_width: 8,
            }),
            variant,
            optimizer: OptimizerConfig {
                schedule: vec![Phase { lr: 1e-3, iterations: 1 }],
                ..OptimizerConfig::default()
            },
            seed: 3,
            ..NetConfig::default()
        }
    }

    /// The small box lands on a first-source anchor, so the detection loss
    /// reaches the activated feature.
    fn scene() -> Vec<BoundingBox> {
        vec![
            BoundingBox::new(1, 0.05, 0.05, 0.2, 0.2).unwrap(),
            BoundingBox::new(1, 0.1, 0.2, 0.5, 0.6).unwrap(),
            BoundingBox::new(2, 0.4, 0.1, 0.95, 0.9).unwrap(),
        ]
    }

    fn logits(net: &DesNet, img: &Tensor, mode: GateMode) -> Tensor {
        let mut g = Graph::new();
        let x = g.input(img.clone());
        let f = net.forward_with(&mut g, x, mode).unwrap();
        g.value(f.class_logits).clone()
    }

    #[test]
    fn default_anchor_count_and_output_extents() {
        let net = DesNet::new(NetConfig::default()).unwrap();
        assert_eq!(net.anchors().len(), 376);
        let img = image(64, 0);
        let (probs, boxes) = net.predict(&img).unwrap();
        assert_eq!(probs.shape(), &[376, 4]);
        assert_eq!(boxes.shape(), &[376, 4]);
        for r in 0..376 {
            let s: f64 = probs.data()[r * 4..r * 4 + 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_is_finite_for_every_variant() {
        for v in [Variant::Baseline, Variant::G, Variant::GS, Variant::GSParallel] {
            let net = DesNet::new(NetConfig {
                variant: v,
                ..NetConfig::default()
            })
            .unwrap();
            let grid = rasterize(&scene(), 8, 8).unwrap();
            let mut g = Graph::new();
            let (_, nodes) = net.loss(&mut g, &image(64, 1), &scene(), &grid).unwrap();
            let l = DesNet::loss_values(&g, &nodes);
            assert!(l.total.is_finite() && l.det.is_finite() && l.seg.is_finite(), "{v:?}: {l:?}");
            assert_eq!(nodes.seg.is_some(), v.has_seg_branch());
            assert!(g.first_non_finite().is_none());
        }
    }

    #[test]
    fn baseline_equals_unit_gates() {
        let base = DesNet::new(tiny(Variant::Baseline)).unwrap();
        let gated = DesNet::new(tiny(Variant::G)).unwrap();
        let img = image(16, 2);
        assert_eq!(logits(&base, &img, GateMode::Learned), logits(&gated, &img, GateMode::Constant(1.0)));
    }

    #[test]
    fn zero_gate_weights_halve_head_inputs() {
        let base = DesNet::new(tiny(Variant::Baseline)).unwrap();
        let mut gated = DesNet::new(tiny(Variant::G)).unwrap();
        for ga in gated.gates.clone() {
            for id in [ga.squeeze.weight, ga.squeeze.bias, ga.excite.weight, ga.excite.bias] {
                gated.store.get_mut(id).data_mut().fill(0.0);
            }
        }
        let img = image(16, 4);
        // Head biases start at zero, so halving the input halves the logits exactly.
        let b = logits(&base, &img, GateMode::Learned);
        assert_eq!(logits(&gated, &img, GateMode::Learned), b.scale(0.5));
        assert_eq!(logits(&gated, &img, GateMode::Constant(0.5)), b.scale(0.5));

        // With nonzero head biases the relation holds after removing them.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut base = base;
        for l in 0..3 {
            let id = base.cls_heads[l].bias;
            let bias: Vec<f64> = (0..base.store.get(id).numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            base.store.get_mut(id).data_mut().copy_from_slice(&bias);
            gated.store.get_mut(gated.cls_heads[l].bias).data_mut().copy_from_slice(&bias);
        }
        let biased_base = logits(&base, &img, GateMode::Learned);
        let biased_gated = logits(&gated, &img, GateMode::Learned);
        let unbiased = b.scale(0.5);
        for ((gv, bv), u) in biased_gated.data().iter().zip(biased_base.data()).zip(unbiased.data()) {
            let bias = bv - 2.0 * u;
            assert!((gv - bias - u).abs() < 1e-12);
        }
    }

    #[test]
    fn seg_output_feeds_first_gate() {
        let net = DesNet::new(tiny(Variant::GS)).unwrap();
        let mut g = Graph::new();
        let x = g.input(image(16, 6));
        let f = net.forward(&mut g, x).unwrap();
        let seg = f.seg.unwrap();
        let x_act = g.value(seg.x_act).clone();
        assert_eq!(x_act, g.value(f.sources[0]).elementwise_mul(g.value(seg.z)).unwrap());
        let expected = net.gates()[0].global_activate(&net.store, &x_act).unwrap();
        assert_eq!(g.value(f.head_inputs[0]), &expected);
        // Higher sources are gated but untouched by the branch.
        let expected1 = net.gates()[1].global_activate(&net.store, g.value(f.sources[1])).unwrap();
        assert_eq!(g.value(f.head_inputs[1]), &expected1);
    }

    #[test]
    fn parallel_variant_leaves_features_and_shares_prediction() {
        let gs = DesNet::new(tiny(Variant::GS)).unwrap();
        let par = DesNet::new(tiny(Variant::GSParallel)).unwrap();
        let img = image(16, 7);
        let run = |net: &DesNet| {
            let mut g = Graph::new();
            let x = g.input(img.clone());
            let f = net.forward(&mut g, x).unwrap();
            let s = f.seg.unwrap();
            (g.value(s.y).clone(), g.value(s.x_act).clone(), g.value(f.sources[0]).clone())
        };
        let (y_gs, _, _) = run(&gs);
        let (y_par, x_act, src) = run(&par);
        assert_eq!(y_gs, y_par);
        assert_eq!(x_act, src);
    }

    /// Largest finite-difference slope and largest tape gradient of the
    /// segmentation (`seg_objective`) or detection loss over the parameters
    /// whose names start with `name_prefix`.
    fn param_sensitivity(net: &DesNet, name_prefix: &str, seg_objective: bool) -> (f64, f64) {
        let pick = |l: &LossValues| if seg_objective { l.seg } else { l.det };
        let img = image(16, 8);
        let grid = rasterize(&scene(), 4, 4).unwrap();
        let eval = |n: &DesNet| {
            let mut g = Graph::new();
            let (_, nodes) = n.loss(&mut g, &img, &scene(), &grid).unwrap();
            pick(&DesNet::loss_values(&g, &nodes))
        };
        let mut worst_fd: f64 = 0.0;
        let mut perturbed = net.clone();
        let ids: Vec<_> = net.store.ids().filter(|&id| net.store.name(id).starts_with(name_prefix)).collect();
        assert!(!ids.is_empty());
        for &id in &ids {
            for i in 0..net.store.get(id).numel() {
                let orig = net.store.get(id).data()[i];
                perturbed.store.get_mut(id).data_mut()[i] = orig + 1e-3;
                let plus = eval(&perturbed);
                perturbed.store.get_mut(id).data_mut()[i] = orig - 1e-3;
                let minus = eval(&perturbed);
                perturbed.store.get_mut(id).data_mut()[i] = orig;
                worst_fd = worst_fd.max(((plus - minus) / 2e-3).abs());
            }
        }
        let mut g = Graph::new();
        let (_, nodes) = net.loss(&mut g, &img, &scene(), &grid).unwrap();
        let target = if seg_objective { nodes.seg.unwrap() } else { nodes.det };
        let grads = g.backward(target).unwrap();
        let all = g.param_grads(&grads, &net.store);
        let worst_tape = ids.iter().map(|id| all[id.0].max_abs()).fold(0.0, f64::max);
        (worst_fd, worst_tape)
    }

    #[test]
    fn seg_loss_ignores_h_head_and_det_loss_ignores_f_head() {
        let net = DesNet::new(tiny(Variant::GS)).unwrap();
        let (fd, tape) = param_sensitivity(&net, "seg.h.", true);
        assert_eq!((fd, tape), (0.0, 0.0));
        let (fd, tape) = param_sensitivity(&net, "seg.f.", false);
        assert_eq!((fd, tape), (0.0, 0.0));
        // Sanity: the other pairings are live.
        let (fd, tape) = param_sensitivity(&net, "seg.f.", true);
        assert!(fd > 0.0 && tape > 0.0);
        let (fd, tape) = param_sensitivity(&net, "seg.h.", false);
        assert!(fd > 0.0 && tape > 0.0, "{fd} {tape}");
    }

    #[test]
    fn total_loss_spot_values_and_alpha_linearity() {
        assert!((total_loss(2.0, 3.0, 0.1) - 2.3).abs() < 1e-15);
        assert_eq!(total_loss(2.0, 3.0, 0.0), 2.0);
        assert_eq!(total_loss(2.0, 3.0, 1.0), 5.0);
        let (d, s) = (1.7, 0.4);
        let l: Vec<f64> = [0.0, 0.5, 1.0].iter().map(|&a| total_loss(d, s, a)).collect();
        assert!(((l[1] - l[0]) / 0.5 - s).abs() < 1e-12);
        assert!(((l[2] - l[1]) / 0.5 - s).abs() < 1e-12);
    }

    #[test]
    fn alpha_zero_total_equals_det() {
        let net = DesNet::new(NetConfig {
            alpha: 0.0,
            ..tiny(Variant::GS)
        })
        .unwrap();
        let grid = rasterize(&scene(), 4, 4).unwrap();
        let mut g = Graph::new();
        let (_, nodes) = net.loss(&mut g, &image(16, 9), &scene(), &grid).unwrap();
        let l = DesNet::loss_values(&g, &nodes);
        assert_eq!(l.total, l.det);
        assert!(l.seg > 0.0);
    }

    #[test]
    fn rejects_wrong_image_extent() {
        let net = DesNet::new(tiny(Variant::G)).unwrap();
        assert!(net.predict(&image(32, 0)).is_err());
    }

    #[test]
    fn shared_layers_identical_across_variants() {
        let a = DesNet::new(tiny(Variant::Baseline)).unwrap();
        let b = DesNet::new(tiny(Variant::GS)).unwrap();
        for (name, t) in a.store.iter() {
            let id = b.store.find(name).unwrap();
            assert_eq!(b.store.get(id), t, "{name}");
        }
    }
}
