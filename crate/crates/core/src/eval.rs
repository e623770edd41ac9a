//! Detection evaluation: per-class average precision at IoU 0.5 and mAP.
//!
//! Detections of one class are ranked by descending score (ties keep image
//! order, then list order). Each is matched to the unused ground truth of the
//! same class in its image with the highest IoU; at IoU ≥ 0.5 it is a true
//! positive, otherwise a false positive. Detections whose best overlap is a
//! `difficult` object count as neither. AP is the area under the precision
//! envelope over every recall step (all-points interpolation).

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{DesError, Result};
use crate::network::DesNet;
use crate::raster::BoundingBox;
use crate::ssd::boxes::{iou, CornerBox};
use crate::ssd::decode::{DecodeParams, Detection};

pub const EVAL_IOU: f64 = 0.5;
pub const AP_RULE: &str =
    "all-points interpolated AP at IoU >= 0.5; greedy matching by descending score; difficult objects ignored";

pub fn corner(b: &BoundingBox) -> CornerBox {
    CornerBox::new(b.xmin, b.ymin, b.xmax, b.ymax)
}

/// Area under the monotonized precision/recall curve. `recall` must be
/// non-decreasing and aligned with `precision`.
pub fn voc_ap(recall: &[f64], precision: &[f64]) -> f64 {
    let mut mrec = Vec::with_capacity(recall.len() + 2);
    let mut mpre = Vec::with_capacity(recall.len() + 2);
    mrec.push(0.0);
    mpre.push(0.0);
    mrec.extend_from_slice(recall);
    mpre.extend_from_slice(precision);
    mrec.push(1.0);
    mpre.push(0.0);
    for i in (0..mpre.len() - 1).rev() {
        mpre[i] = mpre[i].max(mpre[i + 1]);
    }
    (1..mrec.len())
        .filter(|&i| mrec[i] != mrec[i - 1])
        .map(|i| (mrec[i] - mrec[i - 1]) * mpre[i])
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassAp {
    pub ap: f64,
    /// Ground-truth instances, difficult ones excluded.
    pub num_gt: usize,
    pub num_detections: usize,
}

/// AP of `class_id` over a set of images. `None` when the class has no
/// non-difficult ground truth.
pub fn class_ap(class_id: usize, detections: &[Vec<Detection>], gts: &[Vec<BoundingBox>]) -> Option<ClassAp> {
    let num_gt: usize = gts
        .iter()
        .flatten()
        .filter(|b| b.class_id == class_id && !b.difficult)
        .count();
    if num_gt == 0 {
        return None;
    }
    let mut ranked: Vec<(usize, &Detection)> = detections
        .iter()
        .enumerate()
        .flat_map(|(img, dets)| dets.iter().filter(|d| d.class_id == class_id).map(move |d| (img, d)))
        .collect();
    // Stable: equal scores keep image order, then list order.
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));

    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(ranked.len());
    let mut precision = Vec::with_capacity(ranked.len());
    for &(img, det) in &ranked {
        let mut best = (EVAL_IOU, None);
        for (j, gt) in gts.get(img).map_or(&[][..], Vec::as_slice).iter().enumerate() {
            if gt.class_id != class_id {
                continue;
            }
            let o = iou(&det.bbox, &corner(gt));
            if o >= best.0 && (best.1.is_none() || o > best.0) {
                best = (o, Some(j));
            }
        }
        match best.1 {
            Some(j) if gts[img][j].difficult => continue,
            Some(j) if !used[img][j] => {
                used[img][j] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    Some(ClassAp {
        ap: voc_ap(&recall, &precision),
        num_gt,
        num_detections: ranked.len(),
    })
}

/// Per-class APs for classes `1..=num_classes` and their mean over classes
/// that have ground truth.
pub fn mean_ap(
    num_classes: usize,
    detections: &[Vec<Detection>],
    gts: &[Vec<BoundingBox>],
) -> (Vec<Option<ClassAp>>, f64) {
    let per_class: Vec<Option<ClassAp>> = (1..=num_classes).map(|c| class_ap(c, detections, gts)).collect();
    let present: Vec<f64> = per_class.iter().flatten().map(|c| c.ap).collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    (per_class, map)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub name: String,
    /// Absent for classes without ground truth.
    pub ap: Option<f64>,
    pub num_gt: usize,
    pub num_detections: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionDump {
    pub class_id: usize,
    pub class: String,
    pub score: f64,
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageDump {
    pub image: usize,
    pub detections: Vec<DetectionDump>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap_rule: String,
    pub iou_threshold: f64,
    pub num_images: usize,
    pub classes: Vec<ClassReport>,
    pub map: f64,
    pub mean_ms_per_image: f64,
    pub detections: Vec<ImageDump>,
}

pub fn dump_detections(dets: &[Detection], class_names: &[String]) -> Vec<DetectionDump> {
    dets.iter()
        .map(|d| DetectionDump {
            class_id: d.class_id,
            class: class_names.get(d.class_id).cloned().unwrap_or_default(),
            score: d.score,
            xmin: d.bbox.xmin,
            ymin: d.bbox.ymin,
            xmax: d.bbox.xmax,
            ymax: d.bbox.ymax,
        })
        .collect()
}

/// Runs `net` over every image and scores the detections. Timing covers
/// forward pass, decoding and NMS.
pub fn evaluate(net: &DesNet, data: &Dataset, params: &DecodeParams) -> Result<EvalReport> {
    if data.num_classes() != net.config.num_classes {
        return Err(DesError::InvalidInput(format!(
            "class tables differ: network has {} classes, dataset has {}",
            net.config.num_classes,
            data.num_classes()
        )));
    }
    let mut detections = Vec::with_capacity(data.len());
    let mut elapsed = 0.0;
    for s in &data.samples {
        let t = Instant::now();
        let dets = net.detect(&s.image, params)?;
        elapsed += t.elapsed().as_secs_f64();
        detections.push(dets);
    }
    let gts: Vec<Vec<BoundingBox>> = data.samples.iter().map(|s| s.boxes.clone()).collect();
    Ok(build_report(&data.class_names, &detections, &gts, elapsed, data.len()))
}

/// Report from precomputed detections; `seconds` is the total timed span.
pub fn build_report(
    class_names: &[String],
    detections: &[Vec<Detection>],
    gts: &[Vec<BoundingBox>],
    seconds: f64,
    num_images: usize,
) -> EvalReport {
    let num_classes = class_names.len().saturating_sub(1);
    let (per_class, map) = mean_ap(num_classes, detections, gts);
    let classes = per_class
        .iter()
        .enumerate()
        .map(|(i, c)| ClassReport {
            class_id: i + 1,
            name: class_names[i + 1].clone(),
            ap: c.as_ref().map(|c| c.ap),
            num_gt: c.as_ref().map_or(0, |c| c.num_gt),
            num_detections: detections.iter().flatten().filter(|d| d.class_id == i + 1).count(),
        })
        .collect();
    EvalReport {
        ap_rule: AP_RULE.to_string(),
        iou_threshold: EVAL_IOU,
        num_images,
        classes,
        map,
        mean_ms_per_image: if num_images == 0 {
            0.0
        } else {
            1000.0 * seconds / num_images as f64
        },
        detections: detections
            .iter()
            .enumerate()
            .map(|(i, d)| ImageDump {
                image: i,
                detections: dump_detections(d, class_names),
            })
            .collect(),
    }
}
