//! Shared data model: boxes, detections, ground truth, teams and fusion
//! configuration.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dataset-relative category id. Label 0 is background.
pub type ClassLabel = u32;

pub const BACKGROUND: ClassLabel = 0;

/// Opaque identifier of a member model.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelId(pub String);

impl ModelId {
    pub fn new(id: impl Into<String>) -> Self {
        ModelId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ModelId {
    fn from(s: &str) -> Self {
        ModelId(s.to_owned())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageId(pub String);

impl ImageId {
    pub fn new(id: impl Into<String>) -> Self {
        ImageId(id.into())
    }
}

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ImageId {
    fn from(s: &str) -> Self {
        ImageId(s.to_owned())
    }
}

/// Axis-aligned box in continuous pixel coordinates, corner form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl BBox {
    /// Builds a box without checking the invariants; see [`BBox::is_valid`].
    pub const fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Self {
        BBox { xmin, ymin, xmax, ymax }
    }

    pub fn is_valid(&self) -> bool {
        let finite = [self.xmin, self.ymin, self.xmax, self.ymax]
            .iter()
            .all(|v| v.is_finite());
        finite && self.xmin <= self.xmax && self.ymin <= self.ymax
    }

    pub fn width(&self) -> f64 {
        (self.xmax - self.xmin).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.ymax - self.ymin).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.xmin, self.ymin, self.xmax, self.ymax]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BBox::new(a[0], a[1], a[2], a[3])
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        BBox::new(self.xmin + dx, self.ymin + dy, self.xmax + dx, self.ymax + dy)
    }

    pub fn scale(&self, k: f64) -> Self {
        BBox::new(self.xmin * k, self.ymin * k, self.xmax * k, self.ymax * k)
    }
}

/// One predicted object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_label: ClassLabel,
    pub confidence: f64,
    pub bbox: BBox,
    pub model_id: ModelId,
}

impl Detection {
    pub fn new(class_label: ClassLabel, confidence: f64, bbox: BBox, model_id: impl Into<ModelId>) -> Self {
        Detection {
            class_label,
            confidence,
            bbox,
            model_id: model_id.into(),
        }
    }
}

impl From<String> for ModelId {
    fn from(s: String) -> Self {
        ModelId(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub image_id: ImageId,
    pub class_label: ClassLabel,
    pub bbox: BBox,
}

/// All detections a single model produced, tagged with their image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOutput {
    pub model_id: ModelId,
    pub detections: Vec<(ImageId, Detection)>,
}

impl ModelOutput {
    pub fn new(model_id: impl Into<ModelId>) -> Self {
        ModelOutput {
            model_id: model_id.into(),
            detections: Vec::new(),
        }
    }

    pub fn push(&mut self, image_id: impl Into<ImageId>, detection: Detection) {
        self.detections.push((image_id.into(), detection));
    }

    pub fn image_ids(&self) -> BTreeSet<ImageId> {
        self.detections.iter().map(|(i, _)| i.clone()).collect()
    }

    /// Returns the subset of this output that belongs to `image_id`.
    pub fn for_image(&self, image_id: &ImageId) -> ModelOutput {
        ModelOutput {
            model_id: self.model_id.clone(),
            detections: self
                .detections
                .iter()
                .filter(|(i, _)| i == image_id)
                .cloned()
                .collect(),
        }
    }
}

impl From<String> for ImageId {
    fn from(s: String) -> Self {
        ImageId(s)
    }
}

/// Checks every invariant of a model output and returns it unchanged.
///
/// The first violation found in detection order is reported.
pub fn validate_model_output(output: ModelOutput) -> Result<ModelOutput> {
    for (index, (image_id, det)) in output.detections.iter().enumerate() {
        if det.model_id != output.model_id {
            return Err(Error::ModelIdMismatch {
                image_id: image_id.clone(),
                index,
                expected: output.model_id.clone(),
                found: det.model_id.clone(),
            });
        }
        if !det.bbox.is_valid() {
            let b = det.bbox;
            return Err(Error::InvalidBox {
                image_id: image_id.clone(),
                index,
                xmin: b.xmin,
                ymin: b.ymin,
                xmax: b.xmax,
                ymax: b.ymax,
            });
        }
        if !(0.0..=1.0).contains(&det.confidence) {
            return Err(Error::ConfidenceOutOfRange {
                image_id: image_id.clone(),
                index,
                confidence: det.confidence,
            });
        }
    }
    Ok(output)
}

pub fn validate_ground_truth(objects: &[GroundTruthObject]) -> Result<()> {
    for (index, g) in objects.iter().enumerate() {
        if !g.bbox.is_valid() {
            let b = g.bbox;
            return Err(Error::InvalidBox {
                image_id: g.image_id.clone(),
                index,
                xmin: b.xmin,
                ymin: b.ymin,
                xmax: b.xmax,
                ymax: b.ymax,
            });
        }
    }
    Ok(())
}

/// An ordered set of distinct member models.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EnsembleTeam {
    members: Vec<ModelId>,
}

impl EnsembleTeam {
    pub fn new(members: Vec<ModelId>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::TeamTooSmall { min: 1, got: 0 });
        }
        let mut seen = BTreeSet::new();
        for m in &members {
            if !seen.insert(m) {
                return Err(Error::DuplicateMember(m.clone()));
            }
        }
        Ok(EnsembleTeam { members })
    }

    pub fn members(&self) -> &[ModelId] {
        &self.members
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn contains(&self, id: &ModelId) -> bool {
        self.members.contains(id)
    }

    /// Comma-joined member ids, e.g. `"0,2,3"`.
    pub fn label(&self) -> String {
        self.members
            .iter()
            .map(ModelId::as_str)
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// How the fused object's confidence is derived from its clique.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfidenceAggregation {
    /// Arithmetic mean over the clique.
    #[default]
    Mean,
    /// Confidence of the highest-scoring member.
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsensusConfig {
    pub iou_threshold: f64,
    /// Per-model objectness thresholds; models not listed use 0.0.
    pub objectness_thresholds: BTreeMap<ModelId, f64>,
    pub confidence_aggregation: ConfidenceAggregation,
    /// Fraction of the team that must agree on an object.
    pub quorum: f64,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        ConsensusConfig {
            iou_threshold: 0.5,
            objectness_thresholds: BTreeMap::new(),
            confidence_aggregation: ConfidenceAggregation::Mean,
            quorum: 0.5,
        }
    }
}

impl ConsensusConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "iou threshold {} must lie in (0, 1]",
                self.iou_threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.quorum) {
            return Err(Error::Config(format!("quorum {} must lie in [0, 1]", self.quorum)));
        }
        for (m, t) in &self.objectness_thresholds {
            if !(0.0..=1.0).contains(t) {
                return Err(Error::Config(format!("objectness threshold {t} for {m} must lie in [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn objectness_threshold(&self, model: &ModelId) -> f64 {
        self.objectness_thresholds.get(model).copied().unwrap_or(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn output() -> ModelOutput {
        let mut out = ModelOutput::new("m0");
        out.push("img", Detection::new(1, 0.7, BBox::new(0.0, 0.0, 10.0, 10.0), "m0"));
        out.push("img", Detection::new(2, 0.2, BBox::new(5.0, 5.0, 5.0, 9.0), "m0"));
        out
    }

    #[test]
    fn well_formed_output_passes_unchanged() {
        let out = output();
        assert_eq!(validate_model_output(out.clone()).unwrap(), out);
    }

    #[test]
    fn inverted_box_is_rejected() {
        let mut out = output();
        out.detections[1].1.bbox = BBox::new(10.0, 0.0, 2.0, 4.0);
        match validate_model_output(out) {
            Err(Error::InvalidBox { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn confidence_above_one_is_rejected() {
        let mut out = output();
        out.detections[0].1.confidence = 1.5;
        assert!(matches!(
            validate_model_output(out),
            Err(Error::ConfidenceOutOfRange { index: 0, .. })
        ));
    }

    #[test]
    fn foreign_model_id_is_rejected() {
        let mut out = output();
        out.detections[0].1.model_id = ModelId::new("other");
        assert!(matches!(validate_model_output(out), Err(Error::ModelIdMismatch { .. })));
    }

    #[test]
    fn non_finite_coordinates_are_invalid() {
        assert!(!BBox::new(0.0, 0.0, f64::NAN, 1.0).is_valid());
        assert!(!BBox::new(0.0, f64::NEG_INFINITY, 1.0, 1.0).is_valid());
        assert!(BBox::new(3.0, 3.0, 3.0, 3.0).is_valid());
    }

    #[test]
    fn team_rejects_duplicates_and_empty() {
        assert!(EnsembleTeam::new(vec![]).is_err());
        assert!(matches!(
            EnsembleTeam::new(vec!["a".into(), "a".into()]),
            Err(Error::DuplicateMember(_))
        ));
        let t = EnsembleTeam::new(vec!["0".into(), "2".into(), "3".into()]).unwrap();
        assert_eq!(t.label(), "0,2,3");
        assert_eq!(t.size(), 3);
    }

    #[test]
    fn config_bounds() {
        assert!(ConsensusConfig::default().validate().is_ok());
        let cfg = ConsensusConfig {
            iou_threshold: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let mut cfg = ConsensusConfig::default();
        cfg.objectness_thresholds.insert("m".into(), 1.2);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn detection_round_trips_through_json() {
        let out = output();
        let text = serde_json::to_string(&out).unwrap();
        let back: ModelOutput = serde_json::from_str(&text).unwrap();
        assert_eq!(back, out);
    }
}
