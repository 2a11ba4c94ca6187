//! Seeded synthetic scenes and noisy detectors for demos and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::types::{BBox, ClassLabel, Detection, GroundTruthObject, ImageId, ModelId, ModelOutput};

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub images: usize,
    /// Foreground classes are `1..=classes`.
    pub classes: ClassLabel,
    pub min_objects: usize,
    pub max_objects: usize,
    pub image_size: f64,
    pub min_box: f64,
    pub max_box: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            images: 100,
            classes: 3,
            min_objects: 1,
            max_objects: 4,
            image_size: 512.0,
            min_box: 60.0,
            max_box: 200.0,
        }
    }
}

pub fn image_id(i: usize) -> ImageId {
    ImageId::new(format!("img{i:04}"))
}

pub fn ground_truth(scene: &SceneConfig, seed: u64) -> Vec<GroundTruthObject> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for i in 0..scene.images {
        let count = rng.random_range(scene.min_objects..=scene.max_objects);
        for _ in 0..count {
            let w = rng.random_range(scene.min_box..scene.max_box);
            let h = rng.random_range(scene.min_box..scene.max_box);
            let x = rng.random_range(0.0..scene.image_size - w);
            let y = rng.random_range(0.0..scene.image_size - h);
            out.push(GroundTruthObject {
                image_id: image_id(i),
                class_label: rng.random_range(1..=scene.classes),
                bbox: BBox::new(x, y, x + w, y + h),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorNoise {
    /// Standard deviation of the per-coordinate box jitter, in pixels.
    pub jitter_sigma: f64,
    pub miss_rate: f64,
    pub class_flip_rate: f64,
    /// Expected number of spurious boxes per image.
    pub false_positives_per_image: f64,
    pub hit_confidence: (f64, f64),
    pub false_confidence: (f64, f64),
}

impl Default for DetectorNoise {
    fn default() -> Self {
        DetectorNoise {
            jitter_sigma: 5.0,
            miss_rate: 0.15,
            class_flip_rate: 0.10,
            false_positives_per_image: 0.3,
            hit_confidence: (0.5, 1.0),
            false_confidence: (0.05, 0.6),
        }
    }
}

/// A detector that sees every ground-truth object independently: it may miss
/// it, flip its class, and jitters the box it reports.
pub fn noisy_detector(
    model_id: &str,
    ground_truth: &[GroundTruthObject],
    scene: &SceneConfig,
    noise: &DetectorNoise,
    seed: u64,
) -> ModelOutput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, noise.jitter_sigma).expect("finite jitter");
    let id = ModelId::new(model_id);
    let mut out = ModelOutput::new(id.clone());
    for g in ground_truth {
        if rng.random::<f64>() < noise.miss_rate {
            continue;
        }
        let mut class_label = g.class_label;
        if scene.classes > 1 && rng.random::<f64>() < noise.class_flip_rate {
            let shift = rng.random_range(1..scene.classes);
            class_label = (class_label - 1 + shift) % scene.classes + 1;
        }
        let c = g.bbox.to_array().map(|v| v + jitter.sample(&mut rng));
        let bbox = BBox::new(c[0].min(c[2]), c[1].min(c[3]), c[0].max(c[2]), c[1].max(c[3]));
        let confidence = rng.random_range(noise.hit_confidence.0..noise.hit_confidence.1);
        out.push(g.image_id.clone(), Detection::new(class_label, confidence, bbox, id.clone()));
    }
    for i in 0..scene.images {
        let mut budget = noise.false_positives_per_image;
        while budget > 0.0 {
            if rng.random::<f64>() < budget.min(1.0) {
                let w = rng.random_range(scene.min_box..scene.max_box);
                let h = rng.random_range(scene.min_box..scene.max_box);
                let x = rng.random_range(0.0..scene.image_size - w);
                let y = rng.random_range(0.0..scene.image_size - h);
                let confidence = rng.random_range(noise.false_confidence.0..noise.false_confidence.1);
                out.push(
                    image_id(i),
                    Detection::new(
                        rng.random_range(1..=scene.classes),
                        confidence,
                        BBox::new(x, y, x + w, y + h),
                        id.clone(),
                    ),
                );
            }
            budget -= 1.0;
        }
    }
    out
}

/// Exact copy of `output` under another id.
pub fn clone_detector(output: &ModelOutput, model_id: &str) -> ModelOutput {
    let id = ModelId::new(model_id);
    ModelOutput {
        model_id: id.clone(),
        detections: output
            .detections
            .iter()
            .map(|(i, d)| {
                let mut d = d.clone();
                d.model_id = id.clone();
                (i.clone(), d)
            })
            .collect(),
    }
}
