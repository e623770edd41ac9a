//! Finite-difference gradient suite over every differentiable building block
//! and the full objective.
//!
//! Each entry is evaluated at [`SUITE_POINTS`] random points. At every point
//! all input coordinates are checked, plus parameter coordinates perturbed
//! through the parameter store. ReLU, max-pooling, smooth-L1 and negative
//! mining make the objective piecewise smooth; a point whose `±eps` probes
//! straddle a piece boundary is redrawn, and the number of redraws is
//! reported alongside the error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, NodeId, ParamId, ParamStore};
use crate::config::{NetConfig, OptimizerConfig, SegWidths, Variant};
use crate::data::gen_synthetic;
use crate::error::Result;
use crate::global_activation::GlobalActivation;
use crate::gradcheck::{
    finite_difference_check, finite_difference_check_at, finite_difference_check_params, GradCheckReport, DEFAULT_EPS,
};
use crate::network::DesNet;
use crate::nn::{ConvSpec, LinearSpec};
use crate::raster::SegGrid;
use crate::seg_branch::{seg_loss_from_logits, SegBranch, SegBranchConfig};
use crate::tensor::Tensor;

pub const SUITE_POINTS: usize = 5;
pub const SUITE_TOLERANCE: f64 = 1e-4;
/// Redraws allowed per point before the entry is declared failed.
pub const MAX_REDRAWS: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    /// Points accepted (smooth over every probe).
    pub points: usize,
    pub redraws: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    /// Where the largest error occurred.
    pub worst: String,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.points == SUITE_POINTS && self.max_rel_error < SUITE_TOLERANCE
    }
}

/// Checks made at one candidate point.
#[derive(Default)]
struct Point {
    coordinates: usize,
    kinks: usize,
    max_rel_error: f64,
    worst: String,
}

impl Point {
    fn record(&mut self, report: &GradCheckReport, describe: impl FnOnce() -> String) {
        self.coordinates += report.coordinates_checked;
        self.kinks += report.kinks;
        if report.max_rel_error > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = report.max_rel_error;
            self.worst = describe();
        }
    }
}

/// Draws points with `body` until [`SUITE_POINTS`] smooth ones are found.
/// `body` gets the RNG and a draw counter for seeding.
fn run_points<F>(name: &'static str, rng: &mut ChaCha8Rng, mut body: F) -> Result<SuiteResult>
where
    F: FnMut(&mut ChaCha8Rng, u64, &mut Point) -> Result<()>,
{
    let mut result = SuiteResult {
        name,
        points: 0,
        redraws: 0,
        coordinates: 0,
        max_rel_error: 0.0,
        worst: String::new(),
    };
    let mut draw = 0u64;
    while result.points < SUITE_POINTS {
        let mut point = Point::default();
        body(rng, draw, &mut point)?;
        draw += 1;
        if point.kinks > 0 {
            result.redraws += 1;
            if result.redraws > MAX_REDRAWS * SUITE_POINTS {
                result.worst = format!("no smooth point found after {} redraws", result.redraws);
                break;
            }
            continue;
        }
        result.coordinates += point.coordinates;
        if point.max_rel_error > result.max_rel_error || result.worst.is_empty() {
            result.max_rel_error = point.max_rel_error;
            result.worst = format!("point {}, {}", result.points, point.worst);
        }
        result.points += 1;
    }
    Ok(result)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Checks every coordinate of every tensor in `inputs` for the scalar built
/// by `f` from the corresponding input nodes.
fn check_inputs<F>(point: &mut Point, inputs: &[Tensor], f: F) -> Result<()>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    for k in 0..inputs.len() {
        let report = finite_difference_check(
            |g, checked| {
                let nodes: Vec<NodeId> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| if j == k { checked } else { g.input(t.clone()) })
                    .collect();
                f(g, &nodes)
            },
            &inputs[k],
            DEFAULT_EPS,
        )?;
        point.record(&report, || format!("input {k} index {}", report.worst_coordinate));
    }
    Ok(())
}

/// `Σ out ⊙ r` turns any tensor-valued node into a scalar with a
/// non-uniform upstream gradient.
fn weighted_sum(g: &mut Graph, out: NodeId, r: NodeId) -> Result<NodeId> {
    let prod = g.mul(out, r)?;
    Ok(g.sum(prod))
}

/// Up to `per_tensor` random coordinates from every parameter.
fn sample_param_coords(rng: &mut ChaCha8Rng, store: &ParamStore, per_tensor: usize) -> Vec<(ParamId, usize)> {
    let mut coords = Vec::new();
    for id in store.ids() {
        let n = store.get(id).numel();
        if n <= per_tensor {
            coords.extend((0..n).map(|i| (id, i)));
        } else {
            coords.extend((0..per_tensor).map(|_| (id, rng.gen_range(0..n))));
        }
    }
    coords
}

fn describe_param(store: &ParamStore, coords: &[(ParamId, usize)], k: usize) -> String {
    coords
        .get(k)
        .map_or_else(String::new, |&(id, i)| format!("`{}` index {i}", store.name(id)))
}

fn jitter_params(rng: &mut ChaCha8Rng, store: &mut ParamStore, amplitude: f64) {
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-amplitude..amplitude);
        }
    }
}

fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, classes: usize) -> SegGrid {
    SegGrid {
        height: h,
        width: w,
        labels: (0..h * w).map(|_| rng.gen_range(0..classes as u32)).collect(),
    }
}

fn dilated_conv(rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let spec = ConvSpec {
        in_channels: 2,
        out_channels: 3,
        kernel: 3,
        stride: 1,
        padding: 2,
        dilation: 2,
    };
    run_points("dilated conv", rng, |rng, _, point| {
        let inputs = [
            uniform(rng, &[2, 7, 7], -1.0, 1.0),
            uniform(rng, &spec.weight_shape(), -1.0, 1.0),
            uniform(rng, &[3], -1.0, 1.0),
        ];
        let r = uniform(rng, &[3, 7, 7], -1.0, 1.0);
        check_inputs(point, &inputs, |g, n| {
            let out = g.conv2d(n[0], n[1], n[2], spec)?;
            let r = g.input(r.clone());
            weighted_sum(g, out, r)
        })
    })
}

fn linear(rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let spec = LinearSpec { in_dim: 6, out_dim: 4 };
    run_points("linear", rng, |rng, _, point| {
        let inputs = [
            uniform(rng, &[6], -1.0, 1.0),
            uniform(rng, &spec.weight_shape(), -1.0, 1.0),
            uniform(rng, &[4], -1.0, 1.0),
        ];
        let r = uniform(rng, &[4], -1.0, 1.0);
        check_inputs(point, &inputs, |g, n| {
            let out = g.linear(n[0], n[1], n[2], spec)?;
            let r = g.input(r.clone());
            weighted_sum(g, out, r)
        })
    })
}

fn relu(rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    run_points("relu", rng, |rng, _, point| {
        let x = uniform(rng, &[3, 4, 4], -1.0, 1.0);
        let r = uniform(rng, &[3, 4, 4], -1.0, 1.0);
        check_inputs(point, std::slice::from_ref(&x), |g, n| {
            let out = g.relu(n[0]);
            let r = g.input(r.clone());
            weighted_sum(g, out, r)
        })
    })
}

fn sigmoid(rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    run_points("sigmoid", rng, |rng, _, point| {
        let x = uniform(rng, &[3, 4, 4], -3.0, 3.0);
        let r = uniform(rng, &[3, 4, 4], -1.0, 1.0);
        check_inputs(point, std::slice::from_ref(&x), |g, n| {
            let out = g.sigmoid(n[0]);
            let r = g.input(r.clone());
            weighted_sum(g, out, r)
        })
    })
}

/// Fused per-pixel cross-entropy plus the channel softmax it is built on.
fn softmax_ce(rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    run_points("softmax-CE", rng, |rng, _, point| {
        let logits = uniform(rng, &[4, 5, 5], -2.0, 2.0);
        let r = uniform(rng, &[4, 5, 5], -1.0, 1.0);
        let grid = random_grid(rng, 5, 5, 4);
        check_inputs(point, std::slice::from_ref(&logits), |g, n| {
            let ce = seg_loss_from_logits(g, n[0], &grid)?;
            let y = g.softmax_channels(n[0])?;
            let r = g.input(r.clone());
            let probe = weighted_sum(g, y, r)?;
            g.add(ce, probe)
        })
    })
}

fn smooth_l1(rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    run_points("smooth-L1", rng, |rng, _, point| {
        // Residuals on both sides of the quadratic/linear switch.
        let pred = uniform(rng, &[20, 4], -2.0, 2.0);
        let target = uniform(rng, &[20, 4], -2.0, 2.0);
        check_inputs(point, &[pred, target], |g, n| g.smooth_l1(n[0], n[1]))
    })
}

fn ga_block(rng: &mut ChaCha8Rng, seed: u64) -> Result<SuiteResult> {
    run_points("GA block", rng, |rng, draw, point| {
        let mut store = ParamStore::new();
        let ga = GlobalActivation::new(&mut store, "ga", 8, seed.wrapping_add(draw))?;
        jitter_params(rng, &mut store, 0.5);
        let x = uniform(rng, &[8, 4, 4], -1.0, 1.0);
        let r = uniform(rng, &[8, 4, 4], -1.0, 1.0);
        check_inputs(point, std::slice::from_ref(&x), |g, n| {
            let out = ga.build(g, &store, n[0])?;
            let r = g.input(r.clone());
            weighted_sum(g, out, r)
        })?;
        let coords = sample_param_coords(rng, &store, usize::MAX);
        let report = finite_difference_check_params(
            &mut store,
            |s, g| {
                let xi = g.input(x.clone());
                let out = ga.build(g, s, xi)?;
                let r = g.input(r.clone());
                weighted_sum(g, out, r)
            },
            &coords,
            DEFAULT_EPS,
        )?;
        point.record(&report, || describe_param(&store, &coords, report.worst_coordinate));
        Ok(())
    })
}

fn seg_branch(rng: &mut ChaCha8Rng, seed: u64) -> Result<SuiteResult> {
    let cfg = SegBranchConfig {
        in_channels: 4,
        atrous_width: 4,
        mid_width: 8,
        num_classes: 3,
        sigmoid_on_z: false,
    };
    run_points("seg branch", rng, |rng, draw, point| {
        let mut store = ParamStore::new();
        let branch = SegBranch::new(&mut store, "seg", cfg, seed.wrapping_add(draw))?;
        jitter_params(rng, &mut store, 0.1);
        let x = uniform(rng, &[4, 6, 6], -1.0, 1.0);
        let r = uniform(rng, &[4, 6, 6], -1.0, 1.0);
        let grid = random_grid(rng, 6, 6, 4);
        let objective = |g: &mut Graph, s: &ParamStore, xi: NodeId| -> Result<NodeId> {
            let nodes = branch.build(g, s, xi, true)?;
            let ce = seg_loss_from_logits(g, nodes.logits, &grid)?;
            let r = g.input(r.clone());
            let probe = weighted_sum(g, nodes.x_act, r)?;
            g.add(ce, probe)
        };
        check_inputs(point, std::slice::from_ref(&x), |g, n| objective(g, &store, n[0]))?;
        let coords = sample_param_coords(rng, &store, 6);
        let report = finite_difference_check_params(
            &mut store,
            |s, g| {
                let xi = g.input(x.clone());
                objective(g, s, xi)
            },
            &coords,
            DEFAULT_EPS,
        )?;
        point.record(&report, || describe_param(&store, &coords, report.worst_coordinate));
        Ok(())
    })
}

/// Small GS network used for the full-objective check.
pub fn suite_net_config(seed: u64) -> NetConfig {
    NetConfig {
        input_size: 32,
        num_classes: 2,
        backbone_widths: vec![8, 8, 16, 16, 16],
        source_stages: vec![2, 3, 4],
        seg_widths: Some(SegWidths {
            atrous_width: 8,
            mid_width: 16,
        }),
        variant: Variant::GS,
        optimizer: OptimizerConfig::default(),
        seed,
        ..NetConfig::default()
    }
}

fn full_objective(rng: &mut ChaCha8Rng, seed: u64) -> Result<SuiteResult> {
    run_points("full L = L_det + α·L_seg", rng, |rng, draw, point| {
        let point_seed = seed.wrapping_add(draw);
        let cfg = suite_net_config(point_seed);
        let grid = cfg.seg_grid_extent();
        let mut net = DesNet::new(cfg)?;
        jitter_params(rng, &mut net.store, 0.05);
        let mut sample = gen_synthetic(point_seed, 1, 2, 32, grid)?.remove(0);
        // Solid shapes give exactly tied max-pool windows. Dither the pixels
        // so the point is generic.
        for v in sample.image.data_mut() {
            *v += rng.gen_range(-0.01..0.01);
        }

        let image_coords: Vec<usize> = (0..24).map(|_| rng.gen_range(0..sample.image.numel())).collect();
        let report = finite_difference_check_at(
            |g, xi| {
                let fwd = net.forward(g, xi)?;
                net.objective(g, &fwd, &sample.boxes, &sample.seg_grid).map(|n| n.total)
            },
            &sample.image,
            DEFAULT_EPS,
            &image_coords,
        )?;
        point.record(&report, || format!("image index {}", report.worst_coordinate));

        let coords = sample_param_coords(rng, &net.store, 2);
        let report = finite_difference_check_params(
            &mut net,
            |n, g| n.loss(g, &sample.image, &sample.boxes, &sample.seg_grid).map(|(_, l)| l.total),
            &coords,
            DEFAULT_EPS,
        )?;
        point.record(&report, || describe_param(&net.store, &coords, report.worst_coordinate));
        Ok(())
    })
}

/// Runs every entry; points are drawn from `seed`.
pub fn run_gradient_suite(seed: u64) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(vec![
        dilated_conv(&mut rng)?,
        linear(&mut rng)?,
        relu(&mut rng)?,
        sigmoid(&mut rng)?,
        softmax_ce(&mut rng)?,
        smooth_l1(&mut rng)?,
        ga_block(&mut rng, seed)?,
        seg_branch(&mut rng, seed)?,
        full_objective(&mut rng, seed)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cheap_entries_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for r in [
            dilated_conv(&mut rng).unwrap(),
            linear(&mut rng).unwrap(),
            relu(&mut rng).unwrap(),
            sigmoid(&mut rng).unwrap(),
            softmax_ce(&mut rng).unwrap(),
            smooth_l1(&mut rng).unwrap(),
            ga_block(&mut rng, 4).unwrap(),
        ] {
            assert!(r.passed(), "{r:?}");
            assert!(r.coordinates > 0);
        }
    }

    #[test]
    fn kinked_points_are_redrawn() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut calls = 0;
        let r = run_points("kink", &mut rng, |_, draw, point| {
            calls += 1;
            // Every other draw sits on the ReLU kink.
            let v = if draw % 2 == 0 { 2e-6 } else { 0.5 };
            let x = Tensor::new([1], vec![v]).unwrap();
            check_inputs(point, std::slice::from_ref(&x), |g, n| {
                let y = g.relu(n[0]);
                Ok(g.sum(y))
            })
        })
        .unwrap();
        assert_eq!((r.points, r.redraws, calls), (SUITE_POINTS, SUITE_POINTS, 2 * SUITE_POINTS));
        assert!(r.passed());
    }

    #[test]
    fn param_coords_cover_every_tensor() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::zeros([2]));
        store.add("b", Tensor::zeros([50]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = sample_param_coords(&mut rng, &store, 3);
        assert_eq!(c.len(), 5);
        assert_eq!(c.iter().filter(|(id, _)| id.0 == 0).count(), 2);
        assert!(c.iter().all(|&(id, i)| i < store.get(id).numel()));
    }
}
