//! Interchange formats: JSON detection and ground-truth documents, and the
//! SEGF binary container for segmentation score volumes.
//!
//! SEGF layout, all little-endian:
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `SEGF`                   |
//! | 4      | 2    | version (u16) = 1              |
//! | 6      | 4    | C (u32)                        |
//! | 10     | 4    | H (u32)                        |
//! | 14     | 4    | W (u32)                        |
//! | 18     | 4·CHW| f32 scores, class-major, then row-major |

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::ccl::SegmentationScores;
use crate::error::{Error, Result};
use crate::types::{
    validate_ground_truth, validate_model_output, BBox, ClassLabel, Detection, GroundTruthObject, ImageId, ModelId,
    ModelOutput,
};

pub const SEGF_MAGIC: &[u8; 4] = b"SEGF";
pub const SEGF_VERSION: u16 = 1;
pub const SEGF_HEADER_LEN: usize = 18;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    #[serde(rename = "class")]
    pub class_label: ClassLabel,
    pub score: f64,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDetections {
    pub image_id: String,
    pub detections: Vec<DetectionRecord>,
}

/// One model's detections, grouped by image. Images with no detections are
/// kept so coverage of an image set can be checked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionFile {
    pub model_id: String,
    pub images: Vec<ImageDetections>,
}

impl DetectionFile {
    pub fn image_ids(&self) -> BTreeSet<ImageId> {
        self.images.iter().map(|i| ImageId::new(i.image_id.clone())).collect()
    }

    /// Converts to a validated [`ModelOutput`].
    pub fn to_model_output(&self) -> Result<ModelOutput> {
        let model_id = ModelId::new(self.model_id.clone());
        let detections = self
            .images
            .iter()
            .flat_map(|img| {
                let model_id = &model_id;
                img.detections.iter().map(move |d| {
                    (
                        ImageId::new(img.image_id.clone()),
                        Detection {
                            class_label: d.class_label,
                            confidence: d.score,
                            bbox: BBox::from_array(d.bbox),
                            model_id: model_id.clone(),
                        },
                    )
                })
            })
            .collect();
        validate_model_output(ModelOutput { model_id, detections })
    }

    /// Groups `output` by image. Every id in `images` is emitted, in sorted
    /// order, even when it has no detections; detection order within an
    /// image is preserved.
    pub fn from_model_output(output: &ModelOutput, images: &BTreeSet<ImageId>) -> Self {
        let mut grouped: BTreeMap<&ImageId, Vec<DetectionRecord>> = images.iter().map(|i| (i, Vec::new())).collect();
        for (image_id, d) in &output.detections {
            grouped.entry(image_id).or_default().push(DetectionRecord {
                class_label: d.class_label,
                score: d.confidence,
                bbox: d.bbox.to_array(),
            });
        }
        DetectionFile {
            model_id: output.model_id.to_string(),
            images: grouped
                .into_iter()
                .map(|(id, detections)| ImageDetections {
                    image_id: id.0.clone(),
                    detections,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    #[serde(rename = "class")]
    pub class_label: ClassLabel,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageObjects {
    pub image_id: String,
    pub objects: Vec<ObjectRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFile {
    pub images: Vec<ImageObjects>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub class_names: BTreeMap<ClassLabel, String>,
}

impl GroundTruthFile {
    pub fn image_ids(&self) -> BTreeSet<ImageId> {
        self.images.iter().map(|i| ImageId::new(i.image_id.clone())).collect()
    }

    pub fn to_objects(&self) -> Result<Vec<GroundTruthObject>> {
        let objects: Vec<GroundTruthObject> = self
            .images
            .iter()
            .flat_map(|img| {
                img.objects.iter().map(move |o| GroundTruthObject {
                    image_id: ImageId::new(img.image_id.clone()),
                    class_label: o.class_label,
                    bbox: BBox::from_array(o.bbox),
                })
            })
            .collect();
        validate_ground_truth(&objects)?;
        Ok(objects)
    }

    pub fn from_objects(objects: &[GroundTruthObject]) -> Self {
        let mut grouped: BTreeMap<&ImageId, Vec<ObjectRecord>> = BTreeMap::new();
        for g in objects {
            grouped.entry(&g.image_id).or_default().push(ObjectRecord {
                class_label: g.class_label,
                bbox: g.bbox.to_array(),
            });
        }
        GroundTruthFile {
            images: grouped
                .into_iter()
                .map(|(id, objects)| ImageObjects {
                    image_id: id.0.clone(),
                    objects,
                })
                .collect(),
            class_names: BTreeMap::new(),
        }
    }
}

/// Parses a JSON document. Unknown fields are ignored, or rejected when
/// `strict` is set.
pub fn parse_json<T: DeserializeOwned>(text: &str, strict: bool) -> Result<T> {
    let mut de = serde_json::Deserializer::from_str(text);
    let mut unknown = Vec::new();
    let value: T = serde_ignored::deserialize(&mut de, |path| unknown.push(path.to_string()))
        .map_err(|e| Error::Format(e.to_string()))?;
    de.end().map_err(|e| Error::Format(e.to_string()))?;
    if strict && !unknown.is_empty() {
        return Err(Error::Format(format!("unknown fields: {}", unknown.join(", "))));
    }
    Ok(value)
}

pub fn read_json<T: DeserializeOwned>(path: &Path, strict: bool) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_json(&text, strict).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Pretty JSON with a trailing newline. Floats use the shortest
/// representation that parses back to the same bits.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialise");
    s.push('\n');
    s
}

pub fn encode_segf(scores: &SegmentationScores) -> Vec<u8> {
    let mut out = Vec::with_capacity(SEGF_HEADER_LEN + 4 * scores.as_slice().len());
    out.extend_from_slice(SEGF_MAGIC);
    out.extend_from_slice(&SEGF_VERSION.to_le_bytes());
    for dim in [scores.num_classes(), scores.height(), scores.width()] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for s in scores.as_slice() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

pub fn decode_segf(bytes: &[u8]) -> Result<SegmentationScores> {
    if bytes.len() < SEGF_HEADER_LEN {
        return Err(Error::Format(format!("SEGF header truncated ({} bytes)", bytes.len())));
    }
    if &bytes[0..4] != SEGF_MAGIC {
        return Err(Error::Format("bad SEGF magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != SEGF_VERSION {
        return Err(Error::Format(format!("unsupported SEGF version {version}")));
    }
    let dim = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice")) as usize;
    let (c, h, w) = (dim(6), dim(10), dim(14));
    let expected = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(SEGF_HEADER_LEN))
        .ok_or_else(|| Error::Format("SEGF dimensions overflow".into()))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "SEGF length {} does not match shape ({c}, {h}, {w}); expected {expected}",
            bytes.len()
        )));
    }
    let scores = bytes[SEGF_HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4-byte chunk")))
        .collect();
    SegmentationScores::new(c, h, w, scores).map_err(|e| Error::Format(e.to_string()))
}

pub fn read_segf(path: &Path) -> Result<SegmentationScores> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    decode_segf(&bytes)
}
