//! The expert-in-the-loop labeling cycle (score → select → label →
//! prototype update → metrics) and the evaluation metrics themselves.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acquisition::{score_step, select, Mechanism, OracleScope};
use crate::clustering::KMeansConfig;
use crate::data::Episode;
use crate::error::{Error, Result};
use crate::numerics::{argmax_tiebreak, Embedding};
use crate::protonet::{cluster_refine_init, BaseModelKind, EnsembleState, Model, PrototypeSet};
use crate::seeding;

/// Per-run settings shared by every mechanism.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Overrides the mechanism's default base model when set.
    pub base_model: Option<BaseModelKind>,
    pub temperature: f64,
    pub kmeans: KMeansConfig,
    pub oracle_scope: OracleScope,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            base_model: None,
            temperature: 1.0,
            kmeans: KMeansConfig::default(),
            oracle_scope: OracleScope::FullQuery,
        }
    }
}

/// Which accuracy convention a metric uses for labeled instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum F1Mode {
    /// Labeled instances are re-predicted by the model.
    Model,
    /// Labeled instances count as correct.
    Method,
}

/// Mutable state of one episode run.
#[derive(Debug, Clone)]
pub struct EpisodeState<'a> {
    pub episode: &'a Episode,
    pub model: Model,
    pub temperature: f64,
    unlabeled: Vec<usize>,
    labeled: Vec<usize>,
    is_labeled: Vec<bool>,
}

impl<'a> EpisodeState<'a> {
    /// Builds the base model and marks the whole query as unlabeled.
    ///
    /// The cluster-refined model derives its k-means seed from the episode
    /// seed only, so every mechanism sharing a base model starts from the
    /// same prototypes.
    pub fn init(episode: &'a Episode, base: BaseModelKind, cfg: &RunConfig) -> Result<Self> {
        if episode.query.is_empty() {
            return Err(Error::Empty { what: "episode query" });
        }
        let member0_support = |_c: usize, insts: &[crate::data::Instance]| -> Vec<Embedding> {
            insts.iter().map(|i| i.members[0].clone()).collect()
        };
        let model = match base {
            BaseModelKind::Standard => {
                let support: Vec<Vec<Embedding>> = episode
                    .support
                    .iter()
                    .enumerate()
                    .map(|(c, insts)| member0_support(c, insts))
                    .collect();
                Model::Single(PrototypeSet::from_support(&support)?)
            }
            BaseModelKind::ClusterInit => {
                let support: Vec<Vec<Embedding>> = episode
                    .support
                    .iter()
                    .enumerate()
                    .map(|(c, insts)| member0_support(c, insts))
                    .collect();
                let protos = PrototypeSet::from_support(&support)?;
                let pool: Vec<Embedding> =
                    episode.query.iter().map(|i| i.members[0].clone()).collect();
                let seed = seeding::mix(episode.seed, seeding::hash_str("cluster_init"));
                Model::Single(cluster_refine_init(&protos, &pool, &cfg.kmeans, seed)?)
            }
            BaseModelKind::Ensemble => {
                if episode.n_members < 2 {
                    return Err(Error::Config(format!(
                        "ensemble base model needs at least 2 member embeddings, dataset has {}",
                        episode.n_members
                    )));
                }
                let members: Vec<PrototypeSet> = (0..episode.n_members)
                    .map(|e| {
                        let support: Vec<Vec<Embedding>> = episode
                            .support
                            .iter()
                            .map(|insts| insts.iter().map(|i| i.members[e].clone()).collect())
                            .collect();
                        PrototypeSet::from_support(&support)
                    })
                    .collect::<Result<_>>()?;
                Model::Ensemble(EnsembleState::new(members)?)
            }
        };
        let q = episode.query.len();
        Ok(Self {
            episode,
            model,
            temperature: cfg.temperature,
            unlabeled: (0..q).collect(),
            labeled: Vec::with_capacity(q),
            is_labeled: vec![false; q],
        })
    }

    /// Query indices not yet labeled, in ascending original order with
    /// selected ones removed.
    pub fn unlabeled(&self) -> &[usize] {
        &self.unlabeled
    }

    /// Query indices in acquisition order.
    pub fn labeled(&self) -> &[usize] {
        &self.labeled
    }

    pub fn step(&self) -> usize {
        self.labeled.len()
    }

    /// The simulated expert: always returns the ground-truth class.
    pub fn simulate_expert(&self, query_idx: usize) -> Result<usize> {
        self.episode
            .query
            .get(query_idx)
            .map(|i| i.label)
            .ok_or(Error::UnknownInstance(query_idx))
    }

    /// Labels one instance: asks the expert, folds the label into the
    /// model, and moves the instance from unlabeled to labeled.
    pub fn apply_label(&mut self, query_idx: usize) -> Result<usize> {
        let pos = self
            .unlabeled
            .iter()
            .position(|&u| u == query_idx)
            .ok_or(Error::UnknownInstance(query_idx))?;
        let class = self.simulate_expert(query_idx)?;
        let members = &self.episode.query[query_idx].members;
        self.model.observe(class, members)?;
        self.unlabeled.remove(pos);
        self.labeled.push(query_idx);
        self.is_labeled[query_idx] = true;
        Ok(class)
    }

    fn predict_all(&self, instances: &[crate::data::Instance]) -> Result<Vec<usize>> {
        instances
            .iter()
            .map(|i| self.model.predict(&i.members, self.temperature))
            .collect()
    }

    /// Current-model predictions for the whole query, in query order.
    pub fn query_predictions(&self) -> Result<Vec<usize>> {
        self.predict_all(&self.episode.query)
    }

    fn model_accuracy_from(&self, preds: &[usize]) -> f64 {
        let correct = preds
            .iter()
            .zip(&self.episode.query)
            .filter(|(p, i)| **p == i.label)
            .count();
        correct as f64 / self.episode.query.len() as f64
    }

    fn method_accuracy_from(&self, preds: &[usize]) -> f64 {
        let correct = preds
            .iter()
            .zip(&self.episode.query)
            .enumerate()
            .filter(|(i, (p, inst))| self.is_labeled[*i] || **p == inst.label)
            .count();
        correct as f64 / self.episode.query.len() as f64
    }

    fn macro_f1_from(&self, preds: &[usize], mode: F1Mode) -> f64 {
        let n = self.model.n_classes();
        let mut tp = vec![0usize; n];
        let mut fp = vec![0usize; n];
        let mut fneg = vec![0usize; n];
        for (i, (p, inst)) in preds.iter().zip(&self.episode.query).enumerate() {
            let p = if mode == F1Mode::Method && self.is_labeled[i] { inst.label } else { *p };
            if p == inst.label {
                tp[p] += 1;
            } else {
                fp[p] += 1;
                fneg[inst.label] += 1;
            }
        }
        let mut total = 0.0;
        for c in 0..n {
            let denom = 2 * tp[c] + fp[c] + fneg[c];
            if denom > 0 {
                total += 2.0 * tp[c] as f64 / denom as f64;
            }
        }
        total / n as f64
    }

    /// Fraction of the original query predicted correctly by the current
    /// model, labeled instances included (they are re-predicted).
    pub fn model_accuracy(&self) -> Result<f64> {
        Ok(self.model_accuracy_from(&self.query_predictions()?))
    }

    /// Like model accuracy, but expert-labeled instances count as correct.
    pub fn method_accuracy(&self) -> Result<f64> {
        Ok(self.method_accuracy_from(&self.query_predictions()?))
    }

    /// Unweighted mean over classes of per-class F1. A class with no
    /// predictions and no positives contributes 0.
    pub fn macro_f1(&self, mode: F1Mode) -> Result<f64> {
        Ok(self.macro_f1_from(&self.query_predictions()?, mode))
    }

    /// Model accuracy on the hold-out instances, when the episode has any.
    pub fn holdout_accuracy(&self) -> Result<Option<f64>> {
        if self.episode.holdout.is_empty() {
            return Ok(None);
        }
        let preds = self.predict_all(&self.episode.holdout)?;
        let correct = preds
            .iter()
            .zip(&self.episode.holdout)
            .filter(|(p, i)| **p == i.label)
            .count();
        Ok(Some(correct as f64 / self.episode.holdout.len() as f64))
    }
}

/// Metrics recorded after step `step` (step 0 is the pre-acquisition state).
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Labeled fraction of the query, `step / |Q|`.
    pub budget: f64,
    /// Query index selected at this step; `None` at step 0.
    pub selected: Option<usize>,
    pub model_acc: f64,
    pub method_acc: f64,
    pub macro_f1_model: f64,
    pub macro_f1_method: f64,
    pub holdout_acc: Option<f64>,
}

/// Full per-step record of one (episode, mechanism) run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub mechanism: Mechanism,
    pub episode_seed: u64,
    pub records: Vec<StepRecord>,
}

impl RunTrace {
    pub fn model_curve(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.model_acc).collect()
    }

    pub fn method_curve(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.method_acc).collect()
    }
}

fn record_metrics(state: &EpisodeState, step: usize, selected: Option<usize>) -> Result<StepRecord> {
    let q = state.episode.query.len();
    let preds = state.query_predictions()?;
    let method_acc = state.method_accuracy_from(&preds);
    // Decomposition identity: labeled instances all count as correct, the
    // rest are judged by the model.
    #[cfg(debug_assertions)]
    {
        let correct_unlabeled = state
            .unlabeled
            .iter()
            .filter(|&&i| preds[i] == state.episode.query[i].label)
            .count();
        debug_assert_eq!(method_acc, (step + correct_unlabeled) as f64 / q as f64);
    }
    Ok(StepRecord {
        step,
        budget: step as f64 / q as f64,
        selected,
        model_acc: state.model_accuracy_from(&preds),
        method_acc,
        macro_f1_model: state.macro_f1_from(&preds, F1Mode::Model),
        macro_f1_method: state.macro_f1_from(&preds, F1Mode::Method),
        holdout_acc: state.holdout_accuracy()?,
    })
}

/// Runs the full labeling loop for one (episode, mechanism) pair.
///
/// Metrics are recorded at step 0 and after every acquisition, giving
/// `|Q| + 1` records; `run_seed` drives only the run's own randomness
/// (the random mechanism's scores).
pub fn run_episode(
    episode: &Episode,
    mechanism: Mechanism,
    cfg: &RunConfig,
    run_seed: u64,
) -> Result<RunTrace> {
    let base = cfg.base_model.unwrap_or_else(|| mechanism.default_base_model());
    if mechanism.requires_ensemble() && base != BaseModelKind::Ensemble {
        return Err(Error::Config(format!(
            "mechanism {mechanism} requires the ensemble base model, configured {base}"
        )));
    }
    let mut state = EpisodeState::init(episode, base, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
    let q = episode.query.len();
    let mut records = Vec::with_capacity(q + 1);
    records.push(record_metrics(&state, 0, None)?);
    for step in 1..=q {
        let sheet = score_step(&state, mechanism, &cfg.kmeans, cfg.oracle_scope, &mut rng, step)?;
        let Some(pos) = select(&sheet) else { break };
        let query_idx = state.unlabeled()[pos];
        state.apply_label(query_idx)?;
        records.push(record_metrics(&state, step, Some(query_idx))?);
    }
    debug_assert_eq!(records.len(), q + 1);
    debug_assert_eq!(records[q].method_acc, 1.0);
    Ok(RunTrace { mechanism, episode_seed: episode.seed, records })
}

/// First step whose accuracy reaches `theta`, as a percentage of the query
/// size; `None` when the curve never reaches it.
pub fn budget_at_threshold(curve: &[f64], theta: f64, query_size: usize) -> Option<f64> {
    curve
        .iter()
        .position(|&v| v >= theta)
        .map(|t| 100.0 * t as f64 / query_size as f64)
}

/// Step of the curve maximum (earliest on ties), as a percentage of the
/// query size.
pub fn budget_at_max(curve: &[f64], query_size: usize) -> Result<f64> {
    let t = argmax_tiebreak(curve)?;
    Ok(100.0 * t as f64 / query_size as f64)
}

/// Curve value once the support has grown by `ways * (shot - initial_shots)`
/// labels, i.e. an average of `shot` supports per class.
pub fn accuracy_at_shot(
    curve: &[f64],
    shot: usize,
    ways: usize,
    initial_shots: usize,
) -> Result<f64> {
    if shot < initial_shots {
        return Err(Error::Config(format!(
            "shot evaluation point {shot} is below the initial {initial_shots} shots"
        )));
    }
    let t = ways * (shot - initial_shots);
    curve.get(t).copied().ok_or_else(|| {
        Error::Config(format!(
            "shot evaluation needs step {t} but the curve has {} steps",
            curve.len()
        ))
    })
}
