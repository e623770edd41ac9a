use serde::{Deserialize, Serialize};

use super::anchors::AnchorBox;
use super::boxes::{decode, iou, CornerBox};
use crate::error::{DesError, Result};
use crate::nn::log_softmax_rows;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub top_k: usize,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams {
            score_thresh: 0.01,
            nms_iou: 0.45,
            top_k: 200,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub bbox: CornerBox,
}

/// Row-wise softmax of an `A×K` logit matrix.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    match logits.shape() {
        [_, k] => {
            let lp = log_softmax_rows(logits.data(), *k);
            Tensor::new(logits.shape().to_vec(), lp.into_iter().map(f64::exp).collect())
        }
        s => Err(DesError::shape("softmax_rows", format!("expected a matrix, got {s:?}"))),
    }
}

/// Greedy suppression: walk candidates by descending score (ties keep input
/// order) and drop any whose IoU with an already kept box exceeds
/// `iou_thresh`. Returns kept indices in score order.
pub fn nms(boxes: &[CornerBox], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_thresh) {
            kept.push(i);
        }
    }
    kept
}

/// Decodes offsets against anchors, clips to the unit square, and runs
/// per-class thresholding and NMS. Output is sorted by descending score and
/// truncated to `top_k`.
pub fn decode_nms(
    class_probs: &Tensor,
    box_preds: &Tensor,
    anchors: &[AnchorBox],
    params: &DecodeParams,
) -> Result<Vec<Detection>> {
    let a = anchors.len();
    let k = match class_probs.shape() {
        [rows, k] if *rows == a => *k,
        s => {
            return Err(DesError::shape(
                "decode_nms",
                format!("class scores {s:?} for {a} anchors"),
            ))
        }
    };
    if box_preds.shape() != [a, 4] {
        return Err(DesError::shape(
            "decode_nms",
            format!("box predictions {:?} for {a} anchors", box_preds.shape()),
        ));
    }
    let boxes: Vec<CornerBox> = anchors
        .iter()
        .enumerate()
        .map(|(i, anchor)| decode(&box_preds.data()[i * 4..i * 4 + 4], anchor).clipped())
        .collect();

    let mut out: Vec<(usize, Detection)> = Vec::new();
    for class in 1..k {
        let cand: Vec<usize> = (0..a)
            .filter(|&i| class_probs.data()[i * k + class] >= params.score_thresh)
            .collect();
        let cb: Vec<CornerBox> = cand.iter().map(|&i| boxes[i]).collect();
        let cs: Vec<f64> = cand.iter().map(|&i| class_probs.data()[i * k + class]).collect();
        for j in nms(&cb, &cs, params.nms_iou) {
            out.push((
                cand[j],
                Detection {
                    class_id: class,
                    score: cs[j],
                    bbox: cb[j],
                },
            ));
        }
    }
    out.sort_by(|(ia, da), (ib, db)| {
        db.score
            .total_cmp(&da.score)
            .then(da.class_id.cmp(&db.class_id))
            .then(ia.cmp(ib))
    });
    out.truncate(params.top_k);
    Ok(out.into_iter().map(|(_, d)| d).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_anchor(cx: f64, cy: f64, s: f64) -> AnchorBox {
        AnchorBox {
            cx,
            cy,
            w: s,
            h: s,
            source_layer: 0,
            scale: s,
            aspect_ratio: 1.0,
        }
    }

    #[test]
    fn duplicate_box_suppressed() {
        let anchors = [unit_anchor(0.5, 0.5, 0.4), unit_anchor(0.5, 0.5, 0.4)];
        let probs = Tensor::new([2, 2], vec![0.1, 0.9, 0.2, 0.8]).unwrap();
        let dets = decode_nms(&probs, &Tensor::zeros([2, 4]), &anchors, &DecodeParams::default()).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].score, 0.9);
    }

    #[test]
    fn classes_do_not_suppress_each_other() {
        let anchors = [unit_anchor(0.5, 0.5, 0.4), unit_anchor(0.5, 0.5, 0.4)];
        let probs = Tensor::new([2, 3], vec![0.05, 0.9, 0.05, 0.1, 0.05, 0.85]).unwrap();
        let params = DecodeParams {
            score_thresh: 0.3,
            ..DecodeParams::default()
        };
        let dets = decode_nms(&probs, &Tensor::zeros([2, 4]), &anchors, &params).unwrap();
        assert_eq!(dets.len(), 2);
        assert_eq!((dets[0].class_id, dets[1].class_id), (1, 2));
    }

    #[test]
    fn boxes_are_clipped() {
        let anchors = [unit_anchor(0.05, 0.95, 0.5)];
        let probs = Tensor::new([1, 2], vec![0.0, 1.0]).unwrap();
        let d = decode_nms(&probs, &Tensor::zeros([1, 4]), &anchors, &DecodeParams::default()).unwrap();
        let b = d[0].bbox;
        assert_eq!((b.xmin, b.ymax), (0.0, 1.0));
    }

    /// Quadratic reference: a candidate survives iff no higher-ranked
    /// survivor overlaps it beyond the threshold.
    fn reference(boxes: &[CornerBox], scores: &[f64], thr: f64) -> Vec<usize> {
        let n = boxes.len();
        let rank = |i: usize| (0..n).filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i)).count();
        let mut by_rank = vec![0; n];
        for i in 0..n {
            by_rank[rank(i)] = i;
        }
        let mut alive = vec![false; n];
        for r in 0..n {
            let i = by_rank[r];
            alive[i] = (0..r).all(|q| !alive[by_rank[q]] || iou(&boxes[by_rank[q]], &boxes[i]) <= thr);
        }
        (0..n).filter(|&i| alive[i]).collect()
    }

    #[test]
    fn nms_matches_quadratic_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let n = rng.gen_range(0..40);
            let boxes: Vec<CornerBox> = (0..n)
                .map(|_| {
                    let x = rng.gen_range(0.0..0.7);
                    let y = rng.gen_range(0.0..0.7);
                    CornerBox::new(x, y, x + rng.gen_range(0.05..0.3), y + rng.gen_range(0.05..0.3))
                })
                .collect();
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..20) as f64) / 20.0).collect();
            let mut got = nms(&boxes, &scores, 0.45);
            got.sort();
            assert_eq!(got, reference(&boxes, &scores, 0.45));
        }
    }

    #[test]
    fn top_k_and_threshold() {
        let anchors: Vec<_> = (0..10).map(|i| unit_anchor(0.05 + 0.1 * i as f64, 0.5, 0.08)).collect();
        let probs = Tensor::from_fn([10, 2], |i| if i % 2 == 1 { 0.1 * (i / 2) as f64 } else { 0.0 });
        let params = DecodeParams {
            score_thresh: 0.25,
            nms_iou: 0.45,
            top_k: 3,
        };
        let dets = decode_nms(&probs, &Tensor::zeros([10, 4]), &anchors, &params).unwrap();
        let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
        assert_eq!(scores.len(), 3);
        assert!((scores[0] - 0.9).abs() < 1e-12 && (scores[2] - 0.7).abs() < 1e-12);
    }
}
