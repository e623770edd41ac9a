use super::anchors::AnchorBox;
use super::boxes::{encode, iou, CornerBox};
use crate::error::{DesError, Result};
use crate::raster::BoundingBox;

pub const DEFAULT_MATCH_IOU: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Assignment {
    Background,
    Object { gt_index: usize, class_id: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub assignments: Vec<Assignment>,
    /// Encoded regression targets; zeros for background anchors.
    pub targets: Vec<[f64; 4]>,
}

impl MatchResult {
    pub fn num_anchors(&self) -> usize {
        self.assignments.len()
    }

    pub fn positives(&self) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, a)| matches!(a, Assignment::Object { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn num_positives(&self) -> usize {
        self.positives().len()
    }

    /// Class label per anchor, 0 for background.
    pub fn labels(&self) -> Vec<usize> {
        self.assignments
            .iter()
            .map(|a| match a {
                Assignment::Background => 0,
                Assignment::Object { class_id, .. } => *class_id,
            })
            .collect()
    }
}

/// Assigns ground truth to anchors.
///
/// First, every anchor whose best-overlapping box has IoU ≥ `threshold` is
/// assigned to that box (ties: lower box index). Then each box claims one
/// anchor unconditionally by greedy bipartite matching: the globally highest
/// IoU pair among unclaimed boxes and anchors is fixed first (ties: lower box
/// index, then lower anchor index). Claimed anchors override the threshold
/// assignment.
pub fn match_anchors(anchors: &[AnchorBox], gts: &[BoundingBox], threshold: f64) -> Result<MatchResult> {
    if anchors.is_empty() {
        return Err(DesError::InvalidInput("anchor matching needs at least one anchor".into()));
    }
    let a_boxes: Vec<CornerBox> = anchors.iter().map(AnchorBox::to_corner).collect();
    let g_boxes: Vec<CornerBox> = gts.iter().map(CornerBox::from).collect();
    let overlaps: Vec<Vec<f64>> = a_boxes
        .iter()
        .map(|a| g_boxes.iter().map(|g| iou(a, g)).collect())
        .collect();

    let mut owner: Vec<Option<usize>> = overlaps
        .iter()
        .map(|row| {
            let mut best: Option<(usize, f64)> = None;
            for (j, &v) in row.iter().enumerate() {
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            best.filter(|&(_, v)| v >= threshold).map(|(j, _)| j)
        })
        .collect();

    let mut gt_done = vec![false; gts.len()];
    let mut anchor_claimed = vec![false; anchors.len()];
    for _ in 0..gts.len().min(anchors.len()) {
        let mut best: Option<(usize, usize, f64)> = None;
        for (j, done) in gt_done.iter().enumerate() {
            if *done {
                continue;
            }
            for (i, row) in overlaps.iter().enumerate() {
                if anchor_claimed[i] {
                    continue;
                }
                if best.is_none_or(|(_, _, b)| row[j] > b) {
                    best = Some((j, i, row[j]));
                }
            }
        }
        let Some((j, i, _)) = best else { break };
        gt_done[j] = true;
        anchor_claimed[i] = true;
        owner[i] = Some(j);
    }

    let mut assignments = Vec::with_capacity(anchors.len());
    let mut targets = Vec::with_capacity(anchors.len());
    for (i, o) in owner.iter().enumerate() {
        match *o {
            Some(j) => {
                assignments.push(Assignment::Object {
                    gt_index: j,
                    class_id: gts[j].class_id,
                });
                targets.push(encode(&g_boxes[j], &anchors[i]));
            }
            None => {
                assignments.push(Assignment::Background);
                targets.push([0.0; 4]);
            }
        }
    }
    Ok(MatchResult { assignments, targets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssd::anchors::{gen_anchors, ssd_anchor_shapes, SourceLayerSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn toy_anchors() -> Vec<AnchorBox> {
        let specs: Vec<_> = ssd_anchor_shapes(3, 0.15, 0.75)
            .into_iter()
            .zip([8, 16, 32])
            .map(|(shapes, stride)| SourceLayerSpec {
                stride,
                channels: 8,
                shapes,
            })
            .collect();
        gen_anchors(&specs, 64)
    }

    /// Sort all (box, anchor) pairs once and take them greedily; then apply
    /// the threshold rule to anchors left over.
    fn brute_force(anchors: &[AnchorBox], gts: &[BoundingBox], thr: f64) -> Vec<Option<usize>> {
        let mut pairs = Vec::new();
        for (j, g) in gts.iter().enumerate() {
            for (i, a) in anchors.iter().enumerate() {
                pairs.push((iou(&a.to_corner(), &CornerBox::from(g)), j, i));
            }
        }
        pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        let mut result = vec![None; anchors.len()];
        let mut used_g = BTreeSet::new();
        let mut used_a = BTreeSet::new();
        for (_, j, i) in pairs {
            if used_g.contains(&j) || used_a.contains(&i) {
                continue;
            }
            used_g.insert(j);
            used_a.insert(i);
            result[i] = Some(j);
        }
        for (i, a) in anchors.iter().enumerate() {
            if result[i].is_some() {
                continue;
            }
            let mut best = None;
            let mut best_v = -1.0;
            for (j, g) in gts.iter().enumerate() {
                let v = iou(&a.to_corner(), &CornerBox::from(g));
                if v > best_v {
                    best_v = v;
                    best = Some(j);
                }
            }
            if best_v >= thr {
                result[i] = best;
            }
        }
        result
    }

    fn random_gt(rng: &mut ChaCha8Rng) -> BoundingBox {
        let w = rng.gen_range(0.05..0.7);
        let h = rng.gen_range(0.05..0.7);
        let x = rng.gen_range(0.0..1.0 - w);
        let y = rng.gen_range(0.0..1.0 - h);
        BoundingBox::new(rng.gen_range(1..=3), x, y, x + w, y + h).unwrap()
    }

    #[test]
    fn identical_gt_matches_with_zero_offsets() {
        let anchors = toy_anchors();
        let a = anchors[37].to_corner();
        let gt = BoundingBox::new(2, a.xmin, a.ymin, a.xmax, a.ymax).unwrap();
        let m = match_anchors(&anchors, &[gt], DEFAULT_MATCH_IOU).unwrap();
        assert_eq!(
            m.assignments[37],
            Assignment::Object {
                gt_index: 0,
                class_id: 2
            }
        );
        assert!(m.targets[37].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn no_gt_all_background() {
        let anchors = toy_anchors();
        let m = match_anchors(&anchors, &[], DEFAULT_MATCH_IOU).unwrap();
        assert_eq!(m.num_positives(), 0);
        assert!(match_anchors(&[], &[], 0.5).is_err());
    }

    #[test]
    fn matches_brute_force() {
        let anchors = toy_anchors();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let n = rng.gen_range(1..=5);
            let gts: Vec<_> = (0..n).map(|_| random_gt(&mut rng)).collect();
            let m = match_anchors(&anchors, &gts, DEFAULT_MATCH_IOU).unwrap();
            let got: Vec<Option<usize>> = m
                .assignments
                .iter()
                .map(|a| match a {
                    Assignment::Background => None,
                    Assignment::Object { gt_index, .. } => Some(*gt_index),
                })
                .collect();
            assert_eq!(got, brute_force(&anchors, &gts, DEFAULT_MATCH_IOU));

            // Every box is claimed, and every positive either clears the
            // threshold or is its box's claimed anchor.
            for j in 0..n {
                assert!(got.contains(&Some(j)));
            }
            let mut below_threshold = vec![0; n];
            for (i, o) in got.iter().enumerate() {
                if let Some(j) = o {
                    let v = iou(&anchors[i].to_corner(), &CornerBox::from(&gts[*j]));
                    if v < DEFAULT_MATCH_IOU {
                        below_threshold[*j] += 1;
                    }
                }
            }
            assert!(below_threshold.iter().all(|&c| c <= 1));
        }
    }
}
