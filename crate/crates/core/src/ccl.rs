//! Segmentation-to-detection alignment through connected component labelling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{BBox, ClassLabel, Detection, ModelId, BACKGROUND};

/// Dense per-class confidence volume, class-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationScores {
    num_classes: usize,
    height: usize,
    width: usize,
    scores: Vec<f32>,
}

impl SegmentationScores {
    pub fn new(num_classes: usize, height: usize, width: usize, scores: Vec<f32>) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "segmentation needs background plus at least one class, got {num_classes} classes"
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::Config("segmentation map has zero extent".into()));
        }
        if scores.len() != num_classes * height * width {
            return Err(Error::Config(format!(
                "expected {} scores for shape ({num_classes}, {height}, {width}), got {}",
                num_classes * height * width,
                scores.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::Config(format!("score {i} is not finite")));
        }
        Ok(SegmentationScores {
            num_classes,
            height,
            width,
            scores,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.scores
    }

    pub fn get(&self, class: usize, row: usize, col: usize) -> f32 {
        self.scores[(class * self.height + row) * self.width + col]
    }

    /// Per-pixel softmax over the class axis, for volumes holding logits.
    pub fn softmax(&self) -> SegmentationScores {
        let plane = self.height * self.width;
        let mut out = self.scores.clone();
        for px in 0..plane {
            let max = (0..self.num_classes)
                .map(|c| self.scores[c * plane + px])
                .fold(f32::NEG_INFINITY, f32::max);
            let denom: f64 = (0..self.num_classes)
                .map(|c| ((self.scores[c * plane + px] - max) as f64).exp())
                .sum();
            for c in 0..self.num_classes {
                out[c * plane + px] = (((self.scores[c * plane + px] - max) as f64).exp() / denom) as f32;
            }
        }
        SegmentationScores { scores: out, ..*self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    #[serde(rename = "4")]
    Four,
    #[default]
    #[serde(rename = "8")]
    Eight,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentParams {
    pub minsize: usize,
    pub connectivity: Connectivity,
}

impl ComponentParams {
    /// 0.1% of the image area, at least one pixel, 8-connected.
    pub fn default_for(height: usize, width: usize) -> Self {
        let minsize = ((height * width) as f64 * 0.001).ceil().max(1.0) as usize;
        ComponentParams {
            minsize,
            connectivity: Connectivity::Eight,
        }
    }
}

/// Per-pixel class ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<ClassLabel>,
}

impl LabelMap {
    pub fn get(&self, row: usize, col: usize) -> ClassLabel {
        self.labels[row * self.width + col]
    }
}

/// Per-pixel argmax over classes; exact ties go to the smaller class id.
pub fn argmax_labels(scores: &SegmentationScores) -> LabelMap {
    let plane = scores.height * scores.width;
    let labels = (0..plane)
        .map(|px| {
            let mut best = 0;
            for c in 1..scores.num_classes {
                if scores.scores[c * plane + px] > scores.scores[best * plane + px] {
                    best = c;
                }
            }
            best as ClassLabel
        })
        .collect();
    LabelMap {
        height: scores.height,
        width: scores.width,
        labels,
    }
}

/// Connected components of one class within a label map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Components {
    /// Row-major component id per pixel; 0 outside the class.
    pub ids: Vec<u32>,
    /// Pixels `(row, col)` of component `k + 1`, in raster order.
    pub pixels: Vec<Vec<(usize, usize)>>,
}

impl Components {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Two-pass union-find labelling. Component ids are dense from 1 and follow
/// the raster order of each component's first pixel.
pub fn connected_components(map: &LabelMap, class_label: ClassLabel, connectivity: Connectivity) -> Result<Components> {
    if class_label == BACKGROUND {
        return Err(Error::BackgroundClass);
    }
    let (h, w) = (map.height, map.width);
    let mut parent: Vec<usize> = (0..h * w).collect();
    // only neighbours already visited in raster order
    let back: &[(isize, isize)] = match connectivity {
        Connectivity::Four => &[(-1, 0), (0, -1)],
        Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1)],
    };
    for r in 0..h {
        for c in 0..w {
            if map.get(r, c) != class_label {
                continue;
            }
            let here = r * w + c;
            for &(dr, dc) in back {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nc >= w as isize {
                    continue;
                }
                let (nr, nc) = (nr as usize, nc as usize);
                if map.get(nr, nc) == class_label {
                    let (a, b) = (find(&mut parent, here), find(&mut parent, nr * w + nc));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
    }

    let mut ids = vec![0u32; h * w];
    let mut root_id = vec![0u32; h * w];
    let mut pixels: Vec<Vec<(usize, usize)>> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if map.get(r, c) != class_label {
                continue;
            }
            let root = find(&mut parent, r * w + c);
            if root_id[root] == 0 {
                pixels.push(Vec::new());
                root_id[root] = pixels.len() as u32;
            }
            let id = root_id[root];
            ids[r * w + c] = id;
            pixels[id as usize - 1].push((r, c));
        }
    }
    Ok(Components { ids, pixels })
}

/// Converts a segmentation volume into detections: one per connected
/// component of at least `minsize` pixels, boxed by the component's
/// extreme columns and rows and scored by its mean class confidence.
pub fn ccl_align(scores: &SegmentationScores, params: &ComponentParams, model_id: &ModelId) -> Result<Vec<Detection>> {
    if params.minsize == 0 {
        return Err(Error::Config("minsize must be at least 1".into()));
    }
    let map = argmax_labels(scores);
    let mut present = vec![false; scores.num_classes];
    for &l in &map.labels {
        present[l as usize] = true;
    }
    let classes: Vec<ClassLabel> = (1..scores.num_classes)
        .filter(|&c| present[c])
        .map(|c| c as ClassLabel)
        .collect();

    let per_class: Vec<Vec<Detection>> = classes
        .par_iter()
        .map(|&class_label| {
            let comps = connected_components(&map, class_label, params.connectivity)?;
            Ok(comps
                .pixels
                .iter()
                .filter(|p| p.len() >= params.minsize)
                .map(|p| component_detection(scores, class_label, p, model_id))
                .collect())
        })
        .collect::<Result<_>>()?;

    let mut out: Vec<Detection> = per_class.into_iter().flatten().collect();
    out.sort_by(|a, b| {
        a.class_label
            .cmp(&b.class_label)
            .then_with(|| b.confidence.total_cmp(&a.confidence))
    });
    Ok(out)
}

fn component_detection(
    scores: &SegmentationScores,
    class_label: ClassLabel,
    pixels: &[(usize, usize)],
    model_id: &ModelId,
) -> Detection {
    let (mut rmin, mut rmax, mut cmin, mut cmax) = (usize::MAX, 0, usize::MAX, 0);
    let mut sum = 0.0f64;
    for &(r, c) in pixels {
        rmin = rmin.min(r);
        rmax = rmax.max(r);
        cmin = cmin.min(c);
        cmax = cmax.max(c);
        sum += scores.get(class_label as usize, r, c) as f64;
    }
    Detection {
        class_label,
        confidence: sum / pixels.len() as f64,
        bbox: BBox::new(cmin as f64, rmin as f64, cmax as f64, rmax as f64),
        model_id: model_id.clone(),
    }
}
