//! Average precision and mAP against ground truth.

use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::iou;
use crate::types::{ClassLabel, Detection, GroundTruthObject, ImageId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Interpolation {
    /// Area under the monotone precision envelope.
    #[default]
    #[serde(rename = "all")]
    AllPoint,
    /// Mean of the envelope sampled at recall 0, 0.1, ..., 1.
    #[serde(rename = "11pt")]
    ElevenPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub interpolation: Interpolation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: vec![0.5],
            interpolation: Interpolation::AllPoint,
        }
    }
}

impl EvalConfig {
    /// Thresholds 0.50, 0.55, ..., 0.95.
    pub fn coco_sweep(interpolation: Interpolation) -> Self {
        EvalConfig {
            iou_thresholds: (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
            interpolation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.is_empty() {
            return Err(Error::Config("at least one IoU threshold is required".into()));
        }
        if self.iou_thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::Config("IoU thresholds must lie in (0, 1]".into()));
        }
        if self.iou_thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("IoU thresholds must be strictly increasing".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_label: ClassLabel,
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
    pub num_gt: usize,
    pub tp: usize,
    pub fp: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub iou_threshold: f64,
    pub per_class: Vec<ClassAp>,
    pub map: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub interpolation: Interpolation,
    pub thresholds: Vec<ThresholdReport>,
    /// Mean of the per-threshold mAPs.
    pub map: f64,
}

/// Stable sort by descending confidence.
pub fn sort_by_confidence(detections: &mut [(ImageId, Detection)]) {
    detections.sort_by(|a, b| b.1.confidence.total_cmp(&a.1.confidence));
}

/// Greedy assignment in the given order (callers sort by confidence first).
/// A detection takes the unmatched same-class ground truth on its image with
/// the highest IoU at or above `iou_threshold`; each ground truth object is
/// used once. Returns the matched ground-truth index per detection.
pub fn assign_detections(
    detections: &[(ImageId, Detection)],
    ground_truth: &[GroundTruthObject],
    iou_threshold: f64,
) -> Vec<Option<usize>> {
    let mut index: HashMap<(&ImageId, ClassLabel), Vec<usize>> = HashMap::new();
    for (i, g) in ground_truth.iter().enumerate() {
        index.entry((&g.image_id, g.class_label)).or_default().push(i);
    }
    let mut used = vec![false; ground_truth.len()];
    detections
        .iter()
        .map(|(image_id, d)| {
            let candidates = index.get(&(image_id, d.class_label))?;
            let mut best: Option<(usize, f64)> = None;
            for &g in candidates {
                if used[g] {
                    continue;
                }
                let o = iou(&d.bbox, &ground_truth[g].bbox);
                if o >= iou_threshold && best.is_none_or(|(_, b)| o > b) {
                    best = Some((g, o));
                }
            }
            let (g, _) = best?;
            used[g] = true;
            Some(g)
        })
        .collect()
}

/// True-positive / false-positive label per detection, see [`assign_detections`].
pub fn match_for_eval(
    detections: &[(ImageId, Detection)],
    ground_truth: &[GroundTruthObject],
    iou_threshold: f64,
) -> Vec<bool> {
    assign_detections(detections, ground_truth, iou_threshold)
        .into_iter()
        .map(|m| m.is_some())
        .collect()
}

/// Average precision of a ranked list of true/false-positive labels.
pub fn average_precision(labels: &[bool], num_gt: usize, interpolation: Interpolation) -> Result<f64> {
    if num_gt == 0 {
        return Err(Error::NoGroundTruth);
    }
    let mut recall = Vec::with_capacity(labels.len());
    let mut precision = Vec::with_capacity(labels.len());
    let mut tp = 0usize;
    for (k, &hit) in labels.iter().enumerate() {
        tp += hit as usize;
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }

    let ap = match interpolation {
        Interpolation::AllPoint => {
            let mut mrec = Vec::with_capacity(recall.len() + 2);
            mrec.push(0.0);
            mrec.extend_from_slice(&recall);
            mrec.push(1.0);
            let mut mpre = Vec::with_capacity(precision.len() + 2);
            mpre.push(0.0);
            mpre.extend_from_slice(&precision);
            mpre.push(0.0);
            for i in (0..mpre.len() - 1).rev() {
                mpre[i] = mpre[i].max(mpre[i + 1]);
            }
            (0..mrec.len() - 1)
                .filter(|&i| mrec[i + 1] != mrec[i])
                .map(|i| (mrec[i + 1] - mrec[i]) * mpre[i + 1])
                .sum()
        }
        Interpolation::ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let r = t as f64 / 10.0;
                    recall
                        .iter()
                        .zip(&precision)
                        .filter(|(rc, _)| **rc >= r)
                        .map(|(_, p)| *p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    };
    Ok(ap.clamp(0.0, 1.0))
}

fn class_ap(
    class_label: ClassLabel,
    detections: &[(ImageId, Detection)],
    ground_truth: &[GroundTruthObject],
    iou_threshold: f64,
    interpolation: Interpolation,
) -> ClassAp {
    let mut dets: Vec<(ImageId, Detection)> = detections
        .iter()
        .filter(|(_, d)| d.class_label == class_label)
        .cloned()
        .collect();
    sort_by_confidence(&mut dets);
    let gts: Vec<GroundTruthObject> = ground_truth
        .iter()
        .filter(|g| g.class_label == class_label)
        .cloned()
        .collect();
    let labels = match_for_eval(&dets, &gts, iou_threshold);
    let tp = labels.iter().filter(|&&l| l).count();
    ClassAp {
        class_label,
        ap: average_precision(&labels, gts.len(), interpolation).ok(),
        num_gt: gts.len(),
        tp,
        fp: labels.len() - tp,
    }
}

/// Per-class AP at every configured threshold. mAP averages the classes
/// that have ground truth; detections of other classes still count as FPs.
pub fn mean_average_precision(
    detections: &[(ImageId, Detection)],
    ground_truth: &[GroundTruthObject],
    config: &EvalConfig,
) -> Result<EvalReport> {
    if ground_truth.is_empty() {
        return Err(Error::NoGroundTruth);
    }
    config.validate()?;
    let classes: Vec<ClassLabel> = ground_truth
        .iter()
        .map(|g| g.class_label)
        .chain(detections.iter().map(|(_, d)| d.class_label))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    let thresholds: Vec<ThresholdReport> = config
        .iou_thresholds
        .par_iter()
        .map(|&thr| {
            let per_class: Vec<ClassAp> = classes
                .iter()
                .map(|&c| class_ap(c, detections, ground_truth, thr, config.interpolation))
                .collect();
            let aps: Vec<f64> = per_class.iter().filter_map(|c| c.ap).collect();
            let tp = per_class.iter().map(|c| c.tp).sum();
            let fp = per_class.iter().map(|c| c.fp).sum();
            let num_gt: usize = per_class.iter().map(|c| c.num_gt).sum();
            ThresholdReport {
                iou_threshold: thr,
                map: aps.iter().sum::<f64>() / aps.len() as f64,
                per_class,
                tp,
                fp,
                fn_: num_gt - tp,
            }
        })
        .collect();
    let map = thresholds.iter().map(|t| t.map).sum::<f64>() / thresholds.len() as f64;
    Ok(EvalReport {
        interpolation: config.interpolation,
        thresholds,
        map,
    })
}
