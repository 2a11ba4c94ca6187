//! Focal negative correlation and focal diversity of ensemble teams.
//!
//! Both correlation scores are measured only on the *negative* instances of
//! a focal member, i.e. the ground-truth objects it failed to detect. A team
//! gets one score per focal member; the team's focal diversity is the
//! weighted mean of those scores after min-max normalisation across all
//! candidate teams of the same size.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use itertools::Itertools;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{assign_detections, sort_by_confidence};
use crate::types::{EnsembleTeam, GroundTruthObject, ModelId, ModelOutput};

/// Per-model correctness on every ground-truth instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectnessTable {
    instances: Vec<String>,
    correct: BTreeMap<ModelId, Vec<bool>>,
}

impl CorrectnessTable {
    pub fn new(instances: Vec<String>, correct: BTreeMap<ModelId, Vec<bool>>) -> Result<Self> {
        if instances.is_empty() {
            return Err(Error::NoGroundTruth);
        }
        if let Some((m, v)) = correct.iter().find(|(_, v)| v.len() != instances.len()) {
            return Err(Error::Config(format!(
                "model {m} has {} correctness entries for {} instances",
                v.len(),
                instances.len()
            )));
        }
        Ok(CorrectnessTable { instances, correct })
    }

    pub fn instances(&self) -> &[String] {
        &self.instances
    }

    pub fn models(&self) -> impl Iterator<Item = &ModelId> {
        self.correct.keys()
    }

    pub fn vector(&self, model: &ModelId) -> Result<&[bool]> {
        self.correct
            .get(model)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingModel(model.clone()))
    }

    /// Indices of the instances `model` got wrong.
    pub fn negatives(&self, model: &ModelId) -> Result<Vec<usize>> {
        Ok(self
            .vector(model)?
            .iter()
            .enumerate()
            .filter(|(_, &ok)| !ok)
            .map(|(i, _)| i)
            .collect())
    }
}

/// Marks a ground-truth object correct for a model when one of its
/// detections (confidence at least `confidence_threshold`, same class, IoU at
/// least `iou_threshold`) is greedily assigned to it.
pub fn build_correctness_table(
    outputs: &[ModelOutput],
    ground_truth: &[GroundTruthObject],
    iou_threshold: f64,
    confidence_threshold: f64,
) -> Result<CorrectnessTable> {
    if ground_truth.is_empty() {
        return Err(Error::NoGroundTruth);
    }
    let instances = ground_truth
        .iter()
        .enumerate()
        .map(|(i, g)| format!("{}#{i}", g.image_id))
        .collect();
    let correct = outputs
        .par_iter()
        .map(|out| {
            let mut dets: Vec<_> = out
                .detections
                .iter()
                .filter(|(_, d)| d.confidence >= confidence_threshold)
                .cloned()
                .collect();
            sort_by_confidence(&mut dets);
            let mut hit = vec![false; ground_truth.len()];
            for g in assign_detections(&dets, ground_truth, iou_threshold).into_iter().flatten() {
                hit[g] = true;
            }
            (out.model_id.clone(), hit)
        })
        .collect();
    CorrectnessTable::new(instances, correct)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiversityMetric {
    Pairwise,
    #[default]
    NonPairwise,
}

fn focal_vectors<'t>(
    table: &'t CorrectnessTable,
    team: &EnsembleTeam,
    focal: &ModelId,
) -> Result<(Vec<usize>, Vec<&'t [bool]>)> {
    if !team.contains(focal) {
        return Err(Error::Config(format!("focal model {focal} is not in team {}", team.label())));
    }
    if team.size() < 2 {
        return Err(Error::TeamTooSmall { min: 2, got: team.size() });
    }
    let vectors = team
        .members()
        .iter()
        .map(|m| table.vector(m))
        .collect::<Result<Vec<_>>>()?;
    let negatives = table.negatives(focal)?;
    if negatives.is_empty() {
        return Err(Error::NoNegatives(focal.clone()));
    }
    Ok((negatives, vectors))
}

/// Mean pairwise disagreement over the focal model's negative instances.
pub fn pairwise_focal_negative_correlation(
    table: &CorrectnessTable,
    team: &EnsembleTeam,
    focal: &ModelId,
) -> Result<f64> {
    let (negatives, vectors) = focal_vectors(table, team, focal)?;
    let n = negatives.len() as f64;
    let pairs: Vec<f64> = vectors
        .iter()
        .tuple_combinations()
        .map(|(p, q)| negatives.iter().filter(|&&i| p[i] != q[i]).count() as f64 / n)
        .collect();
    Ok(pairs.iter().sum::<f64>() / pairs.len() as f64)
}

/// `1 - p(2)/p(1)` over the focal model's negative instances, where `p_i` is
/// the share of instances on which exactly `i` members fail.
pub fn nonpairwise_focal_negative_correlation(
    table: &CorrectnessTable,
    team: &EnsembleTeam,
    focal: &ModelId,
) -> Result<f64> {
    let (negatives, vectors) = focal_vectors(table, team, focal)?;
    let size = vectors.len();
    let mut failures = vec![0usize; size + 1];
    for &i in &negatives {
        failures[vectors.iter().filter(|v| !v[i]).count()] += 1;
    }
    let total = negatives.len() as f64;
    let big_n = size as f64;
    let (mut p1, mut p2) = (0.0, 0.0);
    for (i, &count) in failures.iter().enumerate().skip(1) {
        let p = count as f64 / total;
        let i = i as f64;
        p1 += i / big_n * p;
        p2 += i / big_n * ((i - 1.0) / (big_n - 1.0)) * p;
    }
    if p1 <= 0.0 {
        return Err(Error::NoNegatives(focal.clone()));
    }
    Ok((1.0 - p2 / p1).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocalScore {
    pub model_id: ModelId,
    pub pairwise: Option<f64>,
    pub nonpairwise: Option<f64>,
    pub pairwise_normalized: Option<f64>,
    pub nonpairwise_normalized: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocalDiversityReport {
    pub team: EnsembleTeam,
    pub focal: Vec<FocalScore>,
    pub d_focal_pairwise: Option<f64>,
    pub d_focal_nonpairwise: Option<f64>,
    /// Members with no negative instances, which carry no score.
    pub omitted: Vec<ModelId>,
}

impl FocalDiversityReport {
    pub fn d_focal(&self, metric: DiversityMetric) -> Option<f64> {
        match metric {
            DiversityMetric::Pairwise => self.d_focal_pairwise,
            DiversityMetric::NonPairwise => self.d_focal_nonpairwise,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DiversityOptions {
    /// Per-member weights; members not listed weigh 1.
    pub weights: BTreeMap<ModelId, f64>,
    /// Min-max normalise raw scores across teams of the same size.
    pub normalize: bool,
}

impl DiversityOptions {
    pub fn normalized() -> Self {
        DiversityOptions {
            weights: BTreeMap::new(),
            normalize: true,
        }
    }
}

fn raw_scores(table: &CorrectnessTable, team: &EnsembleTeam) -> Result<Vec<FocalScore>> {
    team.members()
        .iter()
        .map(|focal| {
            let absent = |r: Result<f64>| match r {
                Ok(v) => Ok(Some(v)),
                Err(Error::NoNegatives(_)) => Ok(None),
                Err(e) => Err(e),
            };
            Ok(FocalScore {
                model_id: focal.clone(),
                pairwise: absent(pairwise_focal_negative_correlation(table, team, focal))?,
                nonpairwise: absent(nonpairwise_focal_negative_correlation(table, team, focal))?,
                pairwise_normalized: None,
                nonpairwise_normalized: None,
            })
        })
        .collect()
}

fn min_max(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    values.fold(None, |acc, v| match acc {
        None => Some((v, v)),
        Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
    })
}

fn weighted_mean(scores: &[FocalScore], weights: &BTreeMap<ModelId, f64>, pick: fn(&FocalScore) -> Option<f64>) -> Option<f64> {
    let (num, den) = scores
        .iter()
        .filter_map(|s| pick(s).map(|v| (v, weights.get(&s.model_id).copied().unwrap_or(1.0))))
        .fold((0.0, 0.0), |(n, d), (v, w)| (n + w * v, d + w));
    (den > 0.0).then(|| (num / den).clamp(0.0, 1.0))
}

/// Focal diversity for every team in `teams`. Normalisation (when enabled)
/// pools the raw scores of all teams sharing a size; a size class with a
/// single team or a constant score is left unnormalised.
pub fn focal_diversity(
    table: &CorrectnessTable,
    teams: &[EnsembleTeam],
    options: &DiversityOptions,
) -> Result<Vec<FocalDiversityReport>> {
    let raw: Vec<Vec<FocalScore>> = teams
        .par_iter()
        .map(|t| raw_scores(table, t))
        .collect::<Result<_>>()?;

    let mut by_size: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, t) in teams.iter().enumerate() {
        by_size.entry(t.size()).or_default().push(i);
    }
    let mut bounds = vec![(None, None); teams.len()];
    if options.normalize {
        for members in by_size.values() {
            if members.len() < 2 {
                continue;
            }
            let pooled = |pick: fn(&FocalScore) -> Option<f64>| {
                min_max(members.iter().flat_map(|&i| raw[i].iter().filter_map(pick)))
                    .filter(|(lo, hi)| hi - lo > f64::EPSILON)
            };
            let pair = pooled(|s| s.pairwise);
            let nonpair = pooled(|s| s.nonpairwise);
            for &i in members {
                bounds[i] = (pair, nonpair);
            }
        }
    }

    let scale = |v: Option<f64>, b: Option<(f64, f64)>| match (v, b) {
        (Some(v), Some((lo, hi))) => Some(((v - lo) / (hi - lo)).clamp(0.0, 1.0)),
        (v, _) => v,
    };
    Ok(teams
        .iter()
        .zip(raw)
        .zip(bounds)
        .map(|((team, mut focal), (pb, nb))| {
            for s in &mut focal {
                s.pairwise_normalized = scale(s.pairwise, pb);
                s.nonpairwise_normalized = scale(s.nonpairwise, nb);
            }
            let omitted = focal
                .iter()
                .filter(|s| s.pairwise.is_none())
                .map(|s| s.model_id.clone())
                .collect();
            FocalDiversityReport {
                team: team.clone(),
                d_focal_pairwise: weighted_mean(&focal, &options.weights, |s| s.pairwise_normalized),
                d_focal_nonpairwise: weighted_mean(&focal, &options.weights, |s| s.nonpairwise_normalized),
                focal,
                omitted,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedTeam {
    pub size: usize,
    /// 1-based position within its size class.
    pub rank: usize,
    pub report: FocalDiversityReport,
}

/// Scores every team of each size in `min_size..=max_size` drawn from `pool`
/// and orders each size class by descending focal diversity under `metric`.
/// Teams without a score go last; ties fall back to member ids.
pub fn rank_teams(
    pool: &[ModelId],
    table: &CorrectnessTable,
    min_size: usize,
    max_size: usize,
    metric: DiversityMetric,
    options: &DiversityOptions,
) -> Result<Vec<RankedTeam>> {
    if min_size < 2 || min_size > max_size || max_size > pool.len() {
        return Err(Error::SizeRange {
            min: min_size,
            max: max_size,
            pool: pool.len(),
        });
    }
    let mut ranked = Vec::new();
    for size in min_size..=max_size {
        let teams = pool
            .iter()
            .cloned()
            .combinations(size)
            .map(EnsembleTeam::new)
            .collect::<Result<Vec<_>>>()?;
        let mut reports = focal_diversity(table, &teams, options)?;
        reports.sort_by(|a, b| {
            let order = match (a.d_focal(metric), b.d_focal(metric)) {
                (Some(x), Some(y)) => y.total_cmp(&x),
                (Some(_), None) => Ordering::Less,
                (None, Some(_)) => Ordering::Greater,
                (None, None) => Ordering::Equal,
            };
            order.then_with(|| a.team.members().cmp(b.team.members()))
        });
        ranked.extend(reports.into_iter().enumerate().map(|(i, report)| RankedTeam {
            size,
            rank: i + 1,
            report,
        }));
    }
    Ok(ranked)
}
