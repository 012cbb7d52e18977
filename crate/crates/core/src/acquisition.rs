//! Instance-selection mechanisms: score every unlabeled query instance,
//! select the argmax.
//!
//! Scores are oriented so that higher means "more urgent to label";
//! mechanisms defined as minimizations carry an explicit negation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{cluster_posterior, kmeans, Clustering, KMeansConfig};
use crate::error::{Error, Result};
use crate::hitl::EpisodeState;
use crate::numerics::{argmax_tiebreak, entropy, euclid_dist, Embedding, ProbVec};
use crate::protonet::{BaseModelKind, Model};
use crate::seeding;

/// The closed set of selection mechanisms.
///
/// The serialized names below are the identifiers used in config files and
/// CSV output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Oracle,
    Random,
    MinConfidence,
    Margin,
    MaxEntropy,
    ClusterMargin,
    ClusterMaxDistance,
    ClusterMaxEntropy,
    Bald,
    VariationRatio,
}

impl Mechanism {
    pub const ALL: [Mechanism; 10] = [
        Mechanism::Oracle,
        Mechanism::Random,
        Mechanism::MinConfidence,
        Mechanism::Margin,
        Mechanism::MaxEntropy,
        Mechanism::ClusterMargin,
        Mechanism::ClusterMaxDistance,
        Mechanism::ClusterMaxEntropy,
        Mechanism::Bald,
        Mechanism::VariationRatio,
    ];

    /// Stable identifier used in config files and CSV columns.
    pub fn id(self) -> &'static str {
        match self {
            Mechanism::Oracle => "oracle",
            Mechanism::Random => "random",
            Mechanism::MinConfidence => "min_confidence",
            Mechanism::Margin => "margin",
            Mechanism::MaxEntropy => "max_entropy",
            Mechanism::ClusterMargin => "cluster_margin",
            Mechanism::ClusterMaxDistance => "cluster_max_distance",
            Mechanism::ClusterMaxEntropy => "cluster_max_entropy",
            Mechanism::Bald => "bald",
            Mechanism::VariationRatio => "variation_ratio",
        }
    }

    /// Human-readable name used in the rendered summary table.
    pub fn display_name(self) -> &'static str {
        match self {
            Mechanism::Oracle => "Single Instance Oracle",
            Mechanism::Random => "Random Selection",
            Mechanism::MinConfidence => "Minimum Confidence",
            Mechanism::Margin => "Margin",
            Mechanism::MaxEntropy => "Maximum Entropy",
            Mechanism::ClusterMargin => "Cluster Margin",
            Mechanism::ClusterMaxDistance => "Cluster Max. Distance",
            Mechanism::ClusterMaxEntropy => "Cluster Max. Entropy",
            Mechanism::Bald => "BALD",
            Mechanism::VariationRatio => "Variation Ratio",
        }
    }

    /// Base model the mechanism runs against unless overridden.
    pub fn default_base_model(self) -> BaseModelKind {
        match self {
            Mechanism::Bald | Mechanism::VariationRatio => BaseModelKind::Ensemble,
            Mechanism::ClusterMargin
            | Mechanism::ClusterMaxDistance
            | Mechanism::ClusterMaxEntropy => BaseModelKind::ClusterInit,
            _ => BaseModelKind::Standard,
        }
    }

    pub fn requires_ensemble(self) -> bool {
        matches!(self, Mechanism::Bald | Mechanism::VariationRatio)
    }

    pub fn is_cluster_based(self) -> bool {
        matches!(
            self,
            Mechanism::ClusterMargin | Mechanism::ClusterMaxDistance | Mechanism::ClusterMaxEntropy
        )
    }
}

impl std::fmt::Display for Mechanism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

impl std::str::FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mechanism::ALL
            .into_iter()
            .find(|m| m.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown mechanism {s:?}")))
    }
}

/// Which instances the oracle re-evaluates accuracy on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleScope {
    /// The full original query (labeled instances re-predicted), matching
    /// the model-accuracy metric.
    FullQuery,
    /// Only the currently unlabeled instances (candidate included).
    RemainingUnlabeled,
}

/// Per-instance urgency scores for one step, parallel to the state's
/// unlabeled list.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSheet {
    pub mechanism: Mechanism,
    pub scores: Vec<f64>,
}

/// Position of the selected instance in the sheet, ties broken by lowest
/// index; `None` when nothing is left to label.
pub fn select(sheet: &ScoreSheet) -> Option<usize> {
    if sheet.scores.is_empty() {
        return None;
    }
    Some(argmax_tiebreak(&sheet.scores).expect("scores are non-empty and finite"))
}

/// `-max_c p(c)`: least-confident first.
pub fn score_min_confidence(posteriors: &[ProbVec]) -> ScoreSheet {
    let scores = posteriors
        .iter()
        .map(|p| -p.probs()[p.argmax()])
        .collect();
    ScoreSheet { mechanism: Mechanism::MinConfidence, scores }
}

/// Entropy of the class distribution.
pub fn score_max_entropy(posteriors: &[ProbVec]) -> ScoreSheet {
    let scores = posteriors.iter().map(entropy).collect();
    ScoreSheet { mechanism: Mechanism::MaxEntropy, scores }
}

fn top_two(p: &ProbVec) -> (f64, f64) {
    let first = p.argmax();
    let mut second = None::<f64>;
    for (c, &v) in p.probs().iter().enumerate() {
        if c != first && second.map_or(true, |s| v > s) {
            second = Some(v);
        }
    }
    (p.probs()[first], second.unwrap_or(0.0))
}

/// `-(p(c1) - p(c2))` over the two most probable classes.
pub fn score_margin(posteriors: &[ProbVec]) -> Result<ScoreSheet> {
    let mut scores = Vec::with_capacity(posteriors.len());
    for p in posteriors {
        if p.len() < 2 {
            return Err(Error::Config("margin needs at least 2 classes".into()));
        }
        let (p1, p2) = top_two(p);
        scores.push(-(p1 - p2));
    }
    Ok(ScoreSheet { mechanism: Mechanism::Margin, scores })
}

/// Distance of each point to its assigned cluster center.
pub fn score_cluster_max_distance(
    points: &[Embedding],
    clustering: &Clustering,
) -> Result<ScoreSheet> {
    let scores = points
        .iter()
        .zip(&clustering.assignment)
        .map(|(p, &a)| euclid_dist(p, &clustering.centers[a]))
        .collect::<Result<Vec<f64>>>()?;
    Ok(ScoreSheet { mechanism: Mechanism::ClusterMaxDistance, scores })
}

/// Entropy of the cluster-membership distribution.
pub fn score_cluster_max_entropy(
    points: &[Embedding],
    clustering: &Clustering,
    temperature: f64,
) -> Result<ScoreSheet> {
    let scores = points
        .iter()
        .map(|p| Ok(entropy(&cluster_posterior(p, clustering, temperature)?)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(ScoreSheet { mechanism: Mechanism::ClusterMaxEntropy, scores })
}

/// `-(q(c1) - q(c2))` over the two most likely clusters.
pub fn score_cluster_margin(
    points: &[Embedding],
    clustering: &Clustering,
    temperature: f64,
) -> Result<ScoreSheet> {
    if clustering.k() < 2 {
        return Err(Error::Config("cluster margin needs at least 2 clusters".into()));
    }
    let mut scores = Vec::with_capacity(points.len());
    for p in points {
        let q = cluster_posterior(p, clustering, temperature)?;
        let (q1, q2) = top_two(&q);
        scores.push(-(q1 - q2));
    }
    Ok(ScoreSheet { mechanism: Mechanism::ClusterMargin, scores })
}

/// Mutual information between the prediction and the ensemble: entropy of
/// the mean posterior minus the mean member entropy.
pub fn score_bald(member_posteriors: &[Vec<ProbVec>]) -> Result<ScoreSheet> {
    let mut scores = Vec::with_capacity(member_posteriors.len());
    for members in member_posteriors {
        if members.len() < 2 {
            return Err(Error::Config(format!(
                "BALD needs at least 2 ensemble members, got {}",
                members.len()
            )));
        }
        let mean = ProbVec::mean(members)?;
        let avg_h: f64 = members.iter().map(entropy).sum::<f64>() / members.len() as f64;
        scores.push(entropy(&mean) - avg_h);
    }
    Ok(ScoreSheet { mechanism: Mechanism::Bald, scores })
}

/// `1 - count(mode class)/E`; mode ties broken by lowest class id.
pub fn score_variation_ratio(member_predictions: &[Vec<usize>]) -> Result<ScoreSheet> {
    let mut scores = Vec::with_capacity(member_predictions.len());
    for preds in member_predictions {
        if preds.len() < 2 {
            return Err(Error::Config(format!(
                "variation ratio needs at least 2 ensemble members, got {}",
                preds.len()
            )));
        }
        let max_class = *preds.iter().max().expect("non-empty");
        let mut counts = vec![0usize; max_class + 1];
        for &p in preds {
            counts[p] += 1;
        }
        let mode_count = *counts.iter().max().expect("non-empty");
        scores.push(1.0 - mode_count as f64 / preds.len() as f64);
    }
    Ok(ScoreSheet { mechanism: Mechanism::VariationRatio, scores })
}

/// I.i.d. uniform scores; selecting their argmax picks uniformly.
pub fn score_random<R: Rng>(n_unlabeled: usize, rng: &mut R) -> ScoreSheet {
    let scores = (0..n_unlabeled).map(|_| rng.gen::<f64>()).collect();
    ScoreSheet { mechanism: Mechanism::Random, scores }
}

/// Ex-post selector: hypothetically label each candidate with its true
/// class and score it by the resulting model accuracy on `scope`. The
/// passed state is untouched.
pub fn score_oracle(state: &EpisodeState, scope: OracleScope) -> Result<ScoreSheet> {
    let scope_idx: Vec<usize> = match scope {
        OracleScope::FullQuery => (0..state.episode.query.len()).collect(),
        OracleScope::RemainingUnlabeled => state.unlabeled().to_vec(),
    };
    let mut scores = Vec::with_capacity(state.unlabeled().len());
    for &cand in state.unlabeled() {
        let inst = &state.episode.query[cand];
        let mut model = state.model.clone();
        model.observe(inst.label, &inst.members)?;
        let mut correct = 0usize;
        for &i in &scope_idx {
            let q = &state.episode.query[i];
            if model.predict(&q.members, state.temperature)? == q.label {
                correct += 1;
            }
        }
        scores.push(correct as f64 / scope_idx.len() as f64);
    }
    Ok(ScoreSheet { mechanism: Mechanism::Oracle, scores })
}

/// Scores the current unlabeled pool with `mechanism` at loop step `step`.
///
/// Cluster-based mechanisms re-cluster the remaining pool, seeded from the
/// current prototypes with a per-step derived seed; when fewer points than
/// classes remain, excess clusters stay empty at their seeds.
pub fn score_step<R: Rng>(
    state: &EpisodeState,
    mechanism: Mechanism,
    kmeans_cfg: &KMeansConfig,
    oracle_scope: OracleScope,
    rng: &mut R,
    step: usize,
) -> Result<ScoreSheet> {
    let unlabeled = state.unlabeled();
    if mechanism.requires_ensemble() && !matches!(state.model, Model::Ensemble(_)) {
        return Err(Error::Config(format!(
            "mechanism {mechanism} requires an ensemble base model"
        )));
    }
    match mechanism {
        Mechanism::Random => Ok(score_random(unlabeled.len(), rng)),
        Mechanism::Oracle => score_oracle(state, oracle_scope),
        Mechanism::MinConfidence | Mechanism::Margin | Mechanism::MaxEntropy => {
            let posteriors: Vec<ProbVec> = unlabeled
                .iter()
                .map(|&q| state.model.posterior(&state.episode.query[q].members, state.temperature))
                .collect::<Result<_>>()?;
            match mechanism {
                Mechanism::MinConfidence => Ok(score_min_confidence(&posteriors)),
                Mechanism::MaxEntropy => Ok(score_max_entropy(&posteriors)),
                _ => score_margin(&posteriors),
            }
        }
        Mechanism::ClusterMargin | Mechanism::ClusterMaxDistance | Mechanism::ClusterMaxEntropy => {
            let points: Vec<Embedding> = unlabeled
                .iter()
                .map(|&q| state.episode.query[q].members[0].clone())
                .collect();
            let seeds = state.model.base_prototypes().prototypes().to_vec();
            let cfg = KMeansConfig { allow_fewer_points: true, ..*kmeans_cfg };
            let seed = seeding::mix(
                seeding::mix(state.episode.seed, seeding::hash_str("acquisition_kmeans")),
                step as u64,
            );
            let clustering = kmeans(&points, seeds.len(), Some(&seeds), &cfg, seed)?;
            match mechanism {
                Mechanism::ClusterMaxDistance => score_cluster_max_distance(&points, &clustering),
                Mechanism::ClusterMaxEntropy => {
                    score_cluster_max_entropy(&points, &clustering, state.temperature)
                }
                _ => score_cluster_margin(&points, &clustering, state.temperature),
            }
        }
        Mechanism::Bald => {
            let Model::Ensemble(ens) = &state.model else { unreachable!("checked above") };
            let member_posteriors: Vec<Vec<ProbVec>> = unlabeled
                .iter()
                .map(|&q| {
                    ens.mean_posterior(&state.episode.query[q].members, state.temperature)
                        .map(|(_, per)| per)
                })
                .collect::<Result<_>>()?;
            score_bald(&member_posteriors)
        }
        Mechanism::VariationRatio => {
            let Model::Ensemble(ens) = &state.model else { unreachable!("checked above") };
            let member_predictions: Vec<Vec<usize>> = unlabeled
                .iter()
                .map(|&q| {
                    let inst = &state.episode.query[q];
                    (0..ens.n_members())
                        .map(|e| ens.member(e).predict(&inst.members[e]))
                        .collect::<Result<Vec<usize>>>()
                })
                .collect::<Result<_>>()?;
            score_variation_ratio(&member_predictions)
        }
    }
}
