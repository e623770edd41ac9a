//! SGD with momentum and weight decay, and the training loop.
//!
//! Each iteration draws `batch_size` samples from a per-epoch shuffle,
//! optionally mirrors each one, computes per-sample gradients (in parallel
//! when more than one thread is allowed) and averages them in sample order.
//! Results therefore do not depend on the thread count.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::Graph;
use crate::checkpoint;
use crate::config::NetConfig;
use crate::data::{Dataset, Sample};
use crate::error::{DesError, Result};
use crate::network::{DesNet, LossValues};
use crate::tensor::Tensor;

/// `v ← momentum·v + g + weight_decay·p`, then `p ← p − lr·v`.
pub fn sgd_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    velocity: &mut [Tensor],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(DesError::shape(
            "sgd_step",
            format!("{} params, {} grads, {} velocities", params.len(), grads.len(), velocity.len()),
        ));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(velocity.iter()) {
        p.expect_same_shape(g, "sgd_step")?;
        p.expect_same_shape(v, "sgd_step")?;
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = momentum * *vv + gv + weight_decay * *pv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    /// 1-based count of completed updates.
    pub iteration: usize,
    pub det: f64,
    pub seg: f64,
    pub total: f64,
}

pub const LOSS_CSV_HEADER: &str = "iteration,l_det,l_seg,l_total";

pub fn loss_csv(curve: &[LossRecord]) -> String {
    let mut s = String::with_capacity(curve.len() * 64);
    s.push_str(LOSS_CSV_HEADER);
    s.push('\n');
    for r in curve {
        writeln!(s, "{},{},{},{}", r.iteration, r.det, r.seg, r.total).expect("write to String");
    }
    s
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn moving_average(values: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (i, v) in values.iter().enumerate() {
        acc += v;
        if i >= w {
            acc -= values[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

/// Worker count from `DES_THREADS`, defaulting to the available cores.
pub fn thread_count() -> usize {
    std::env::var("DES_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub struct TrainOutcome {
    pub net: DesNet,
    pub curve: Vec<LossRecord>,
}

/// Loss and parameter gradients for one sample.
pub fn sample_gradients(net: &DesNet, sample: &Sample) -> Result<(LossValues, Vec<Tensor>)> {
    let mut g = Graph::new();
    let (_, nodes) = net.loss(&mut g, &sample.image, &sample.boxes, &sample.seg_grid)?;
    let values = DesNet::loss_values(&g, &nodes);
    if !values.total.is_finite() {
        let (node, op) = g.first_non_finite().unwrap_or((nodes.total, "loss"));
        let coordinate = g.value(node).first_non_finite().unwrap_or(0);
        return Err(DesError::NonFinite {
            what: format!("node #{} ({op})", node.index()),
            coordinate,
        });
    }
    let grads = g.backward(nodes.total)?;
    Ok((values, g.param_grads(&grads, &net.store)))
}

/// Deterministic sample order: a fresh shuffle per epoch.
struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    next: usize,
}

impl Sampler {
    fn new(seed: u64, n: usize) -> Self {
        Sampler {
            // Separate stream from parameter initialization.
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a_0000_0001),
            order: (0..n).collect(),
            next: n,
        }
    }

    fn draw(&mut self) -> (usize, bool) {
        if self.next == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.next = 0;
        }
        let i = self.order[self.next];
        self.next += 1;
        (i, self.rng.gen_bool(0.5))
    }
}

/// Trains a fresh network. With `out_dir`, writes `loss.csv`, `config.json`,
/// periodic `ckpt_<iteration>.ckpt` files and the final `model.ckpt`.
/// `progress` sees every record.
pub fn train(
    cfg: &NetConfig,
    data: &Dataset,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(DesError::InvalidInput("training set is empty".into()));
    }
    if data.num_classes() != cfg.num_classes {
        return Err(DesError::config(
            "num_classes",
            format!("config has {} classes, dataset has {}", cfg.num_classes, data.num_classes()),
        ));
    }
    let grid = cfg.seg_grid_extent();
    if let Some(s) = data.samples.iter().find(|s| s.seg_grid.height != grid || s.seg_grid.width != grid) {
        return Err(DesError::shape(
            "train",
            format!("sample seg grid is {}×{}, network needs {grid}×{grid}", s.seg_grid.height, s.seg_grid.width),
        ));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.json"), cfg.to_json())?;
    }

    let mut net = DesNet::new(cfg.clone())?;
    let mut velocity: Vec<Tensor> = net.store.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
    let mut sampler = Sampler::new(cfg.seed, data.len());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| DesError::InvalidInput(format!("thread pool: {e}")))?;
    let opt = &cfg.optimizer;
    let total = opt.total_iterations();
    let mut curve = Vec::with_capacity(total);

    for it in 0..total {
        let picks: Vec<(usize, bool)> = (0..opt.batch_size).map(|_| sampler.draw()).collect();
        let net_ref = &net;
        let results: Vec<Result<(LossValues, Vec<Tensor>)>> = pool.install(|| {
            picks
                .par_iter()
                .map(|&(i, flip)| {
                    let s = &data.samples[i];
                    if flip && cfg.flip {
                        sample_gradients(net_ref, &s.flipped()?)
                    } else {
                        sample_gradients(net_ref, s)
                    }
                })
                .collect()
        });

        let inv = 1.0 / opt.batch_size as f64;
        let mut grads: Vec<Tensor> = Vec::new();
        let mut loss = LossValues::default();
        for r in results {
            let (l, g) = r.map_err(|e| match e {
                DesError::NonFinite { what, coordinate } => DesError::NonFinite {
                    what: format!("{what} at iteration {}", it + 1),
                    coordinate,
                },
                other => other,
            })?;
            loss.det += l.det * inv;
            loss.seg += l.seg * inv;
            loss.total += l.total * inv;
            if grads.is_empty() {
                grads = g.into_iter().map(|t| t.scale(inv)).collect();
            } else {
                for (acc, t) in grads.iter_mut().zip(&g) {
                    for (a, v) in acc.data_mut().iter_mut().zip(t.data()) {
                        *a += v * inv;
                    }
                }
            }
        }
        if let Some((k, t)) = grads.iter().enumerate().find(|(_, t)| t.first_non_finite().is_some()) {
            return Err(DesError::NonFinite {
                what: format!("gradient of `{}` at iteration {}", net.store.name(crate::autograd::ParamId(k)), it + 1),
                coordinate: t.first_non_finite().unwrap_or(0),
            });
        }
        let lr = opt.lr_at(it).expect("iteration within schedule");
        sgd_step(net.store.tensors_mut(), &grads, &mut velocity, lr, opt.momentum, opt.weight_decay)?;

        let record = LossRecord {
            iteration: it + 1,
            det: loss.det,
            seg: loss.seg,
            total: loss.total,
        };
        progress(&record);
        curve.push(record);

        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 && it + 1 < total {
                checkpoint::save(&net, &dir.join(format!("ckpt_{:06}.ckpt", it + 1)))?;
            }
        }
    }

    if let Some(dir) = out_dir {
        std::fs::write(dir.join("loss.csv"), loss_csv(&curve))?;
        checkpoint::save(&net, &dir.join("model.ckpt"))?;
    }
    Ok(TrainOutcome { net, curve })
}
