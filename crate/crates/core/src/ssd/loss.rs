//! Multibox detection loss with hard negative mining.
//!
//! Confidence term: softmax cross-entropy over positive anchors plus the
//! hardest background anchors (highest background loss) at 3 negatives per
//! positive. Localization term: smooth-L1 on the encoded offsets of positive
//! anchors. Both are divided by `max(1, #positives)`.
//!
//! A scene without positives still mines as if it had one, so background-only
//! images contribute a confidence signal.

use std::hash::{DefaultHasher, Hash};

use super::matching::MatchResult;
use crate::autograd::{CustomOp, Graph, NodeId};
use crate::error::{DesError, Result};
use crate::nn::{log_softmax_rows, smooth_l1_grad, smooth_l1_scalar};
use crate::tensor::Tensor;

pub const NEG_POS_RATIO: usize = 3;

/// Anchors contributing to the confidence term.
pub fn mine_hard_negatives(log_probs: &[f64], classes: usize, labels: &[usize]) -> Vec<bool> {
    let positives = labels.iter().filter(|&&l| l != 0).count();
    let mut negatives: Vec<(usize, f64)> = labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == 0)
        .map(|(i, _)| (i, -log_probs[i * classes]))
        .collect();
    // Highest background loss first; stable on index for ties.
    negatives.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let keep = (NEG_POS_RATIO * positives.max(1)).min(negatives.len());
    let mut selected: Vec<bool> = labels.iter().map(|&l| l != 0).collect();
    for &(i, _) in &negatives[..keep] {
        selected[i] = true;
    }
    selected
}

fn check(class_logits: &Tensor, box_preds: &Tensor, m: &MatchResult) -> Result<(usize, usize)> {
    let (a, k) = match class_logits.shape() {
        [a, k] => (*a, *k),
        s => return Err(DesError::shape("det_loss", format!("class logits must be A×K, got {s:?}"))),
    };
    if a == 0 || m.num_anchors() == 0 {
        return Err(DesError::shape("det_loss", "no anchors"));
    }
    if box_preds.shape() != [a, 4] || m.num_anchors() != a {
        return Err(DesError::shape(
            "det_loss",
            format!(
                "class logits {:?}, box predictions {:?}, {} matched anchors",
                class_logits.shape(),
                box_preds.shape(),
                m.num_anchors()
            ),
        ));
    }
    if k < 2 {
        return Err(DesError::shape("det_loss", "need background plus at least one class"));
    }
    if let Some(bad) = m.labels().into_iter().find(|&l| l >= k) {
        return Err(DesError::shape("det_loss", format!("class {bad} out of range for {k} logits")));
    }
    Ok((a, k))
}

/// Value of the loss together with the cached pieces its gradient needs.
struct Evaluated {
    value: f64,
    log_probs: Vec<f64>,
    selected: Vec<bool>,
    labels: Vec<usize>,
    norm: f64,
}

fn evaluate(class_logits: &Tensor, box_preds: &Tensor, m: &MatchResult) -> Result<Evaluated> {
    let (_, k) = check(class_logits, box_preds, m)?;
    let labels = m.labels();
    let log_probs = log_softmax_rows(class_logits.data(), k);
    let selected = mine_hard_negatives(&log_probs, k, &labels);
    let positives = m.positives();
    let norm = positives.len().max(1) as f64;

    let conf: f64 = selected
        .iter()
        .enumerate()
        .filter(|(_, &s)| s)
        .map(|(i, _)| -log_probs[i * k + labels[i]])
        .sum();
    let loc: f64 = positives
        .iter()
        .map(|&i| {
            (0..4)
                .map(|d| smooth_l1_scalar(box_preds.data()[i * 4 + d] - m.targets[i][d]))
                .sum::<f64>()
        })
        .sum();
    Ok(Evaluated {
        value: (conf + loc) / norm,
        log_probs,
        selected,
        labels,
        norm,
    })
}

/// Multibox loss of one image's predictions against its matching.
pub fn det_loss(class_logits: &Tensor, box_preds: &Tensor, m: &MatchResult) -> Result<f64> {
    evaluate(class_logits, box_preds, m).map(|e| e.value)
}

/// Graph node for [`det_loss`].
pub fn det_loss_node(g: &mut Graph, class_logits: NodeId, box_preds: NodeId, m: &MatchResult) -> Result<NodeId> {
    let e = evaluate(g.value(class_logits), g.value(box_preds), m)?;
    let k = g.value(class_logits).shape()[1];
    let op = MultiboxLoss {
        classes: k,
        log_probs: e.log_probs,
        selected: e.selected,
        labels: e.labels,
        targets: m.targets.clone(),
        norm: e.norm,
    };
    Ok(g.custom(&[class_logits, box_preds], Tensor::scalar(e.value), Box::new(op)))
}

struct MultiboxLoss {
    classes: usize,
    log_probs: Vec<f64>,
    selected: Vec<bool>,
    labels: Vec<usize>,
    targets: Vec<[f64; 4]>,
    norm: f64,
}

impl CustomOp for MultiboxLoss {
    fn name(&self) -> &'static str {
        "multibox_loss"
    }

    fn backward(&self, inputs: &[&Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let scale = upstream.data()[0] / self.norm;
        let k = self.classes;
        let mut g_cls = Tensor::zeros(inputs[0].shape().to_vec());
        let mut g_box = Tensor::zeros(inputs[1].shape().to_vec());
        let preds = inputs[1].data();
        for (i, &sel) in self.selected.iter().enumerate() {
            if !sel {
                continue;
            }
            let row = &mut g_cls.data_mut()[i * k..(i + 1) * k];
            for (c, v) in row.iter_mut().enumerate() {
                *v = scale * self.log_probs[i * k + c].exp();
            }
            row[self.labels[i]] -= scale;
        }
        for (i, &l) in self.labels.iter().enumerate() {
            if l == 0 {
                continue;
            }
            for d in 0..4 {
                g_box.data_mut()[i * 4 + d] = scale * smooth_l1_grad(preds[i * 4 + d] - self.targets[i][d]);
            }
        }
        Ok(vec![g_cls, g_box])
    }

    fn hash_branches(&self, inputs: &[&Tensor], state: &mut DefaultHasher) {
        self.selected.hash(state);
        let preds = inputs[1].data();
        for (i, &l) in self.labels.iter().enumerate() {
            if l != 0 {
                for d in 0..4 {
                    ((preds[i * 4 + d] - self.targets[i][d]).abs() < 1.0).hash(state);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference_check, DEFAULT_EPS};
    use crate::ssd::matching::Assignment;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_match(a: usize, k: usize, positives: usize, rng: &mut ChaCha8Rng) -> MatchResult {
        let mut assignments = vec![Assignment::Background; a];
        let mut targets = vec![[0.0; 4]; a];
        for _ in 0..positives {
            let i = rng.gen_range(0..a);
            assignments[i] = Assignment::Object {
                gt_index: 0,
                class_id: rng.gen_range(1..k),
            };
            targets[i] = [(); 4].map(|_| rng.gen_range(-2.0..2.0));
        }
        MatchResult { assignments, targets }
    }

    /// Straight re-implementation: explicit softmax, full sort of negatives.
    fn oracle(cls: &Tensor, boxes: &Tensor, m: &MatchResult) -> f64 {
        let k = cls.shape()[1];
        let a = cls.shape()[0];
        let labels = m.labels();
        let mut ce = vec![0.0; a];
        let mut bg = vec![0.0; a];
        for i in 0..a {
            let row = &cls.data()[i * k..(i + 1) * k];
            let mx = row.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            ce[i] = -((row[labels[i]] - mx).exp() / z).ln();
            bg[i] = -((row[0] - mx).exp() / z).ln();
        }
        let pos: Vec<usize> = (0..a).filter(|&i| labels[i] != 0).collect();
        let mut neg: Vec<usize> = (0..a).filter(|&i| labels[i] == 0).collect();
        neg.sort_by(|&x, &y| bg[y].partial_cmp(&bg[x]).unwrap().then(x.cmp(&y)));
        let n_neg = (3 * pos.len().max(1)).min(neg.len());
        let mut total = 0.0;
        for &i in &pos {
            total += ce[i];
            for d in 0..4 {
                let diff: f64 = boxes.data()[i * 4 + d] - m.targets[i][d];
                total += if diff.abs() < 1.0 { 0.5 * diff * diff } else { diff.abs() - 0.5 };
            }
        }
        for &i in &neg[..n_neg] {
            total += ce[i];
        }
        total / pos.len().max(1) as f64
    }

    #[test]
    fn perfect_prediction_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = random_match(40, 4, 3, &mut rng);
        let labels = m.labels();
        let cls = Tensor::from_fn([40, 4], |i| if labels[i / 4] == i % 4 { 60.0 } else { 0.0 });
        let boxes = Tensor::from_fn([40, 4], |i| m.targets[i / 4][i % 4]);
        assert!(det_loss(&cls, &boxes, &m).unwrap() < 1e-20);
    }

    #[test]
    fn background_scene_uniform_logits() {
        let m = MatchResult {
            assignments: vec![Assignment::Background; 30],
            targets: vec![[0.0; 4]; 30],
        };
        let k = 4;
        let cls = Tensor::zeros([30, k]);
        let loss = det_loss(&cls, &Tensor::zeros([30, 4]), &m).unwrap();
        // three mined negatives at ln K each, normalized by 1
        assert!((loss - 3.0 * (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..50 {
            let a = rng.gen_range(5..60);
            let k = rng.gen_range(2..6);
            let m = random_match(a, k, trial % 4, &mut rng);
            let cls = Tensor::from_fn([a, k], |_| rng.gen_range(-3.0..3.0));
            let boxes = Tensor::from_fn([a, 4], |_| rng.gen_range(-3.0..3.0));
            let got = det_loss(&cls, &boxes, &m).unwrap();
            assert!((got - oracle(&cls, &boxes, &m)).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_inconsistent_extents() {
        let m = MatchResult {
            assignments: vec![Assignment::Background; 3],
            targets: vec![[0.0; 4]; 3],
        };
        assert!(det_loss(&Tensor::zeros([4, 3]), &Tensor::zeros([4, 4]), &m).is_err());
        assert!(det_loss(&Tensor::zeros([3, 3]), &Tensor::zeros([3, 2]), &m).is_err());
        let empty = MatchResult {
            assignments: vec![],
            targets: vec![],
        };
        assert!(det_loss(&Tensor::zeros([1, 3]), &Tensor::zeros([1, 4]), &empty).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_match(30, 4, 4, &mut rng);
        let cls = Tensor::from_fn([30, 4], |_| rng.gen_range(-2.0..2.0));
        let boxes = Tensor::from_fn([30, 4], |_| rng.gen_range(-2.0..2.0));
        let r = finite_difference_check(
            |g, c| {
                let b = g.input(boxes.clone());
                det_loss_node(g, c, b, &m)
            },
            &cls,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        let r = finite_difference_check(
            |g, b| {
                let c = g.input(cls.clone());
                det_loss_node(g, c, b, &m)
            },
            &boxes,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
