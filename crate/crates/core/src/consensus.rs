//! Ensemble consensus for object detection.
//!
//! Detections of one class from all member models become vertices of a
//! graph whose edges join pairs overlapping by at least the IoU threshold.
//! The graph is partitioned into model-disjoint cliques; every clique backed
//! by enough distinct models yields one fused object (confidence-weighted box,
//! aggregated confidence) and its remaining members are re-emitted with their
//! confidence scaled by `1 - IoU` against the fused box.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{iou, weighted_box_fusion};
use crate::types::{
    ClassLabel, ConfidenceAggregation, ConsensusConfig, Detection, ImageId, ModelId, ModelOutput,
};

/// Model id carried by every detection of a fused dataset.
pub const ENSEMBLE_MODEL_ID: &str = "ensemble";

/// Upper bound on vertices accepted by [`clique_partition_exact`].
pub const EXACT_PARTITION_MAX_VERTICES: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

/// Per-class overlap graph over candidate detections.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionGraph {
    class_label: ClassLabel,
    vertices: Vec<Detection>,
    edges: Vec<Edge>,
    adjacency: Vec<Option<f64>>,
}

impl DetectionGraph {
    /// Assembles a graph from explicit vertices and edges. Edges are stored
    /// with `a < b`; self-edges and repeated pairs are rejected.
    pub fn from_parts(class_label: ClassLabel, vertices: Vec<Detection>, edges: Vec<Edge>) -> Result<Self> {
        let n = vertices.len();
        let mut adjacency = vec![None; n * n];
        let mut stored = Vec::with_capacity(edges.len());
        for e in edges {
            let (a, b) = (e.a.min(e.b), e.a.max(e.b));
            if a == b || b >= n {
                return Err(Error::Config(format!("bad edge ({}, {}) for {n} vertices", e.a, e.b)));
            }
            if adjacency[a * n + b].is_some() {
                return Err(Error::Config(format!("duplicate edge ({a}, {b})")));
            }
            adjacency[a * n + b] = Some(e.weight);
            adjacency[b * n + a] = Some(e.weight);
            stored.push(Edge { a, b, weight: e.weight });
        }
        if let Some(v) = vertices.iter().find(|v| v.class_label != class_label) {
            return Err(Error::Config(format!(
                "vertex of class {} in graph of class {class_label}",
                v.class_label
            )));
        }
        Ok(DetectionGraph {
            class_label,
            vertices,
            edges: stored,
            adjacency,
        })
    }

    pub fn class_label(&self) -> ClassLabel {
        self.class_label
    }

    pub fn vertices(&self) -> &[Detection] {
        &self.vertices
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn weight(&self, a: usize, b: usize) -> Option<f64> {
        self.adjacency[a * self.vertices.len() + b]
    }

    fn model(&self, v: usize) -> &ModelId {
        &self.vertices[v].model_id
    }

    /// True when `a ∪ b` stays a clique with at most one vertex per model.
    fn can_merge(&self, a: &[usize], b: &[usize]) -> bool {
        a.iter().all(|&u| {
            b.iter()
                .all(|&v| self.weight(u, v).is_some() && self.model(u) != self.model(v))
        })
    }

    fn clique(&self, mut vertices: Vec<usize>) -> Clique {
        vertices.sort_unstable();
        let num_models = vertices.iter().map(|&v| self.model(v)).collect::<BTreeSet<_>>().len();
        Clique { vertices, num_models }
    }

    /// Sum of edge weights inside each clique.
    pub fn partition_weight(&self, cliques: &[Clique]) -> f64 {
        cliques
            .iter()
            .map(|c| {
                let mut w = 0.0;
                for (i, &u) in c.vertices.iter().enumerate() {
                    for &v in &c.vertices[i + 1..] {
                        w += self.weight(u, v).unwrap_or(0.0);
                    }
                }
                w
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clique {
    /// Sorted vertex indices into the owning graph.
    pub vertices: Vec<usize>,
    pub num_models: usize,
}

/// Collects the detections of `class_label` that clear their model's
/// objectness threshold and joins every pair overlapping by at least the
/// configured IoU threshold.
pub fn build_class_graph(
    outputs: &[ModelOutput],
    class_label: ClassLabel,
    config: &ConsensusConfig,
) -> Result<DetectionGraph> {
    let known: BTreeSet<&ModelId> = outputs.iter().map(|o| &o.model_id).collect();
    if let Some(unknown) = config.objectness_thresholds.keys().find(|m| !known.contains(m)) {
        return Err(Error::UnknownModel(unknown.clone()));
    }
    let vertices: Vec<Detection> = outputs
        .iter()
        .flat_map(|o| {
            let threshold = config.objectness_threshold(&o.model_id);
            o.detections
                .iter()
                .map(|(_, d)| d)
                .filter(move |d| d.class_label == class_label && d.confidence >= threshold)
                .cloned()
        })
        .collect();
    let mut edges = Vec::new();
    for a in 0..vertices.len() {
        for b in a + 1..vertices.len() {
            let w = iou(&vertices[a].bbox, &vertices[b].bbox);
            if w >= config.iou_threshold {
                edges.push(Edge { a, b, weight: w });
            }
        }
    }
    DetectionGraph::from_parts(class_label, vertices, edges)
}

/// Greedy merge partitioning: edges are visited by descending weight (ties by
/// vertex pair) and the groups at either end are merged whenever the union
/// is still a model-disjoint clique.
pub fn clique_partition_greedy(graph: &DetectionGraph) -> Vec<Clique> {
    let n = graph.len();
    let mut group_of: Vec<usize> = (0..n).collect();
    let mut groups: Vec<Vec<usize>> = (0..n).map(|v| vec![v]).collect();

    let mut edges = graph.edges().to_vec();
    edges.sort_by(|x, y| {
        y.weight
            .total_cmp(&x.weight)
            .then_with(|| (x.a, x.b).cmp(&(y.a, y.b)))
    });

    for e in edges {
        let (ga, gb) = (group_of[e.a], group_of[e.b]);
        if ga == gb || !graph.can_merge(&groups[ga], &groups[gb]) {
            continue;
        }
        let (keep, gone) = (ga.min(gb), ga.max(gb));
        let moved = std::mem::take(&mut groups[gone]);
        for &v in &moved {
            group_of[v] = keep;
        }
        groups[keep].extend(moved);
    }

    groups
        .into_iter()
        .filter(|g| !g.is_empty())
        .map(|g| graph.clique(g))
        .collect()
}

/// Exhaustive search over model-disjoint clique partitions. Ties on total
/// weight go to fewer cliques, then to the lexicographically smallest
/// block assignment in vertex order.
pub fn clique_partition_exact(graph: &DetectionGraph) -> Result<Vec<Clique>> {
    let n = graph.len();
    if n > EXACT_PARTITION_MAX_VERTICES {
        return Err(Error::GraphTooLarge {
            vertices: n,
            max: EXACT_PARTITION_MAX_VERTICES,
        });
    }

    struct Search<'g> {
        graph: &'g DetectionGraph,
        blocks: Vec<Vec<usize>>,
        best: Option<(f64, Vec<Vec<usize>>)>,
    }

    impl Search<'_> {
        fn better(&self, weight: f64) -> bool {
            match &self.best {
                None => true,
                Some((w, blocks)) => {
                    let tol = 1e-12 * w.abs().max(1.0);
                    weight > w + tol || ((weight - w).abs() <= tol && self.blocks.len() < blocks.len())
                }
            }
        }

        fn visit(&mut self, v: usize, weight: f64) {
            if v == self.graph.len() {
                if self.better(weight) {
                    self.best = Some((weight, self.blocks.clone()));
                }
                return;
            }
            for k in 0..self.blocks.len() {
                if !self.graph.can_merge(&self.blocks[k], &[v]) {
                    continue;
                }
                let gain: f64 = self.blocks[k]
                    .iter()
                    .map(|&u| self.graph.weight(u, v).unwrap_or(0.0))
                    .sum();
                self.blocks[k].push(v);
                self.visit(v + 1, weight + gain);
                self.blocks[k].pop();
            }
            self.blocks.push(vec![v]);
            self.visit(v + 1, weight);
            self.blocks.pop();
        }
    }

    let mut search = Search {
        graph,
        blocks: Vec::new(),
        best: None,
    };
    search.visit(0, 0.0);
    let blocks = search.best.map(|(_, b)| b).unwrap_or_default();
    Ok(blocks.into_iter().map(|b| graph.clique(b)).collect())
}

/// Confidence of a residual clique member after suppression by the fused box.
pub fn rescale_overlapping(confidence: f64, overlap: f64) -> f64 {
    confidence * (1.0 - overlap)
}

/// Fuses the outputs of all member models for a single image.
///
/// `outputs` holds one entry per member model (an entry may be empty); its
/// length is the team size used for the quorum test.
pub fn fuse_detections(outputs: &[ModelOutput], config: &ConsensusConfig) -> Result<Vec<Detection>> {
    if outputs.is_empty() {
        return Err(Error::Empty("fusion needs at least one model output"));
    }
    config.validate()?;
    let mut image: Option<&ImageId> = None;
    for (id, _) in outputs.iter().flat_map(|o| &o.detections) {
        match image {
            None => image = Some(id),
            Some(first) if first != id => return Err(Error::InconsistentImages(first.clone(), id.clone())),
            _ => {}
        }
    }

    let team_size = outputs.len() as f64;
    let classes: BTreeSet<ClassLabel> = outputs
        .iter()
        .flat_map(|o| o.detections.iter().map(|(_, d)| d.class_label))
        .collect();

    let mut fused = Vec::new();
    for class_label in classes {
        let graph = build_class_graph(outputs, class_label, config)?;
        for clique in clique_partition_greedy(&graph) {
            if (clique.num_models as f64) < config.quorum * team_size {
                continue;
            }
            let members: Vec<&Detection> = clique.vertices.iter().map(|&v| &graph.vertices()[v]).collect();
            // first maximum wins ties
            let lead = members
                .iter()
                .enumerate()
                .fold(0, |best, (i, d)| if d.confidence > members[best].confidence { i } else { best });

            let mut weighted: Vec<_> = members.iter().map(|d| (d.bbox, d.confidence)).collect();
            if weighted.iter().all(|(_, s)| *s <= 0.0) {
                weighted.iter_mut().for_each(|(_, s)| *s = 1.0);
            }
            let bbox = weighted_box_fusion(&weighted)?;
            let confidence = match config.confidence_aggregation {
                ConfidenceAggregation::Mean => {
                    members.iter().map(|d| d.confidence).sum::<f64>() / members.len() as f64
                }
                ConfidenceAggregation::Max => members[lead].confidence,
            };
            fused.push(Detection {
                class_label,
                confidence: confidence.clamp(0.0, 1.0),
                bbox,
                model_id: members[lead].model_id.clone(),
            });
            for (i, d) in members.iter().enumerate() {
                if i == lead {
                    continue;
                }
                let mut rest = (*d).clone();
                rest.confidence = rescale_overlapping(d.confidence, iou(&bbox, &d.bbox));
                fused.push(rest);
            }
        }
    }
    fused.sort_by(|x, y| {
        x.class_label
            .cmp(&y.class_label)
            .then_with(|| y.confidence.total_cmp(&x.confidence))
    });
    Ok(fused)
}

/// Fuses whole datasets image by image. The image universe is the union of
/// the images seen in any output; a model absent from an image contributes
/// no detections there. Every fused detection is relabelled with
/// [`ENSEMBLE_MODEL_ID`], and images are emitted in id order.
pub fn fuse_dataset(outputs: &[ModelOutput], config: &ConsensusConfig) -> Result<ModelOutput> {
    if outputs.is_empty() {
        return Err(Error::Empty("fusion needs at least one model output"));
    }
    config.validate()?;
    let mut per_image: BTreeMap<&ImageId, Vec<ModelOutput>> = BTreeMap::new();
    for (m, out) in outputs.iter().enumerate() {
        for (image_id, det) in &out.detections {
            let slot = per_image
                .entry(image_id)
                .or_insert_with(|| outputs.iter().map(|o| ModelOutput::new(o.model_id.clone())).collect());
            slot[m].detections.push((image_id.clone(), det.clone()));
        }
    }
    let images: Vec<_> = per_image.into_iter().collect();
    let fused: Vec<(ImageId, Vec<Detection>)> = images
        .into_par_iter()
        .map(|(image_id, slices)| fuse_detections(&slices, config).map(|d| (image_id.clone(), d)))
        .collect::<Result<_>>()?;

    let ensemble = ModelId::new(ENSEMBLE_MODEL_ID);
    let mut out = ModelOutput::new(ensemble.clone());
    for (image_id, dets) in fused {
        for mut d in dets {
            d.model_id = ensemble.clone();
            out.detections.push((image_id.clone(), d));
        }
    }
    Ok(out)
}
