//! Experiment runner: repetition over seeded episodes, aggregation with
//! 95% confidence intervals, and report emission.
//!
//! One experiment runs every configured mechanism over the same `episodes`
//! sampled episodes (paired design, so mechanism comparisons share their
//! episode noise) and writes four files: `curves.csv` with the per-step
//! aggregate curves, `summary.csv` and `summary.txt` with the per-mechanism
//! cost/accuracy summary, and `metadata.json` with the full configuration.
//! Outputs are byte-deterministic for a fixed config and master seed,
//! independent of the worker count.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::acquisition::{Mechanism, OracleScope};
use crate::clustering::KMeansConfig;
use crate::data::{perturb_ensemble, sample_episode, synth_generate, EmbeddingDataset, Episode, SynthParams, TaskShape};
use crate::error::{Error, Result};
use crate::hitl::{accuracy_at_shot, budget_at_max, budget_at_threshold, run_episode, RunConfig, RunTrace};
use crate::numerics::argmax_tiebreak;
use crate::protonet::BaseModelKind;
use crate::seeding;

/// Version stamp written into `metadata.json`.
pub const FORMAT_VERSION: u32 = 1;

/// Where the embeddings come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    /// Embedding CSV on disk.
    Path(PathBuf),
    /// Synthetic Gaussian blobs generated in-process.
    Synth(SynthParams),
}

fn default_ways() -> usize {
    5
}
fn default_shots() -> usize {
    1
}
fn default_query() -> usize {
    15
}
fn default_episodes() -> usize {
    100
}
fn default_ensemble_size() -> usize {
    8
}
fn default_temperature() -> f64 {
    1.0
}
fn default_threshold() -> f64 {
    0.80
}
fn default_shot_eval() -> usize {
    5
}
fn default_oracle_scope() -> OracleScope {
    OracleScope::FullQuery
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    #[serde(default = "default_ways")]
    pub ways: usize,
    #[serde(default = "default_shots")]
    pub shots: usize,
    /// Query instances per class.
    #[serde(default = "default_query")]
    pub query: usize,
    /// Hold-out instances per class (0 disables hold-out metrics).
    #[serde(default)]
    pub holdout: usize,
    pub mechanisms: Vec<Mechanism>,
    /// Per-mechanism base-model overrides.
    #[serde(default)]
    pub base_models: BTreeMap<Mechanism, BaseModelKind>,
    /// Number of episodes (runs) to average over.
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    /// Master seed; everything else derives from it.
    #[serde(default)]
    pub seed: u64,
    /// Ensemble member count (including the base member) when an ensemble
    /// base model is needed and the dataset has only base embeddings.
    #[serde(default = "default_ensemble_size")]
    pub ensemble_size: usize,
    /// Ensemble perturbation scale; default is 0.1 x the dataset's mean
    /// per-dimension standard deviation.
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub kmeans: KMeansConfig,
    /// Accuracy threshold for the budget-at-threshold column.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Shot count for the accuracy-at-shot column.
    #[serde(default = "default_shot_eval")]
    pub shot_eval: usize,
    pub out_dir: PathBuf,
    /// Worker threads for the (episode x mechanism) job pool; 0 = auto.
    #[serde(default)]
    pub workers: usize,
    #[serde(default = "default_oracle_scope")]
    pub oracle_scope: OracleScope,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::Config("episodes must be >= 1".into()));
        }
        if self.ways < 2 {
            return Err(Error::Config("ways must be >= 2".into()));
        }
        if self.shots == 0 || self.query == 0 {
            return Err(Error::Config("shots and query must be >= 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold must be in (0, 1), got {}",
                self.threshold
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.mechanisms.is_empty() {
            return Err(Error::Config("mechanisms must not be empty".into()));
        }
        let unique: BTreeSet<Mechanism> = self.mechanisms.iter().copied().collect();
        if unique.len() != self.mechanisms.len() {
            return Err(Error::Config("mechanisms contains duplicates".into()));
        }
        if self.ensemble_size < 2 {
            return Err(Error::Config("ensemble_size must be >= 2".into()));
        }
        if self.shot_eval < self.shots || self.shot_eval - self.shots > self.query {
            return Err(Error::Config(format!(
                "shot_eval {} needs between {} and {} shots",
                self.shot_eval,
                self.shots,
                self.shots + self.query
            )));
        }
        Ok(())
    }

    pub fn shape(&self) -> TaskShape {
        TaskShape {
            ways: self.ways,
            shots: self.shots,
            query_per_class: self.query,
            holdout_per_class: self.holdout,
        }
    }

    /// Base model a mechanism runs against: explicit override, else the
    /// mechanism-family default.
    pub fn resolved_base(&self, mechanism: Mechanism) -> BaseModelKind {
        self.base_models
            .get(&mechanism)
            .copied()
            .unwrap_or_else(|| mechanism.default_base_model())
    }
}

/// A sample mean with an optional 95% CI half-width (absent when R = 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanCi {
    pub mean: f64,
    pub ci: Option<f64>,
}

/// Aggregate statistics of one loop step over all episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub budget_pct: f64,
    pub model_acc: MeanCi,
    pub method_acc: MeanCi,
    pub f1_model: MeanCi,
    pub f1_method: MeanCi,
    pub holdout_acc: Option<MeanCi>,
}

/// Aggregated curves of one mechanism.
#[derive(Debug, Clone, PartialEq)]
pub struct MechanismCurves {
    pub mechanism: Mechanism,
    pub steps: Vec<StepStats>,
}

impl MechanismCurves {
    pub fn model_mean_curve(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.model_acc.mean).collect()
    }
}

fn mean_ci(values: &[f64], t_quantile: Option<f64>) -> MeanCi {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ci = t_quantile.map(|t| {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        t * var.sqrt() / n.sqrt()
    });
    MeanCi { mean, ci }
}

/// Two-sided 95% Student-t quantile for `r` samples; `None` for r < 2.
fn t_975(r: usize) -> Result<Option<f64>> {
    if r < 2 {
        return Ok(None);
    }
    let dist = StudentsT::new(0.0, 1.0, (r - 1) as f64)
        .map_err(|e| Error::Config(format!("t-distribution: {e}")))?;
    Ok(Some(dist.inverse_cdf(0.975)))
}

/// Per-step mean and 95% t-CI curves over R runs of one mechanism.
pub fn aggregate(traces: &[RunTrace]) -> Result<MechanismCurves> {
    let first = traces.first().ok_or(Error::Empty { what: "trace list" })?;
    let len = first.records.len();
    for t in traces {
        if t.mechanism != first.mechanism {
            return Err(Error::Config(format!(
                "cannot aggregate {} traces into {}",
                t.mechanism, first.mechanism
            )));
        }
        if t.records.len() != len {
            return Err(Error::Config(format!(
                "trace length mismatch: {} vs {len}",
                t.records.len()
            )));
        }
    }
    let t_quantile = t_975(traces.len())?;
    let has_holdout = first.records.first().is_some_and(|r| r.holdout_acc.is_some());
    let mut steps = Vec::with_capacity(len);
    for i in 0..len {
        let collect = |f: &dyn Fn(&crate::hitl::StepRecord) -> f64| -> Vec<f64> {
            traces.iter().map(|t| f(&t.records[i])).collect()
        };
        let holdout_acc = if has_holdout {
            let vals: Vec<f64> = traces
                .iter()
                .map(|t| t.records[i].holdout_acc.expect("holdout present"))
                .collect();
            Some(mean_ci(&vals, t_quantile))
        } else {
            None
        };
        steps.push(StepStats {
            step: first.records[i].step,
            budget_pct: 100.0 * first.records[i].budget,
            model_acc: mean_ci(&collect(&|r| r.model_acc), t_quantile),
            method_acc: mean_ci(&collect(&|r| r.method_acc), t_quantile),
            f1_model: mean_ci(&collect(&|r| r.macro_f1_model), t_quantile),
            f1_method: mean_ci(&collect(&|r| r.macro_f1_method), t_quantile),
            holdout_acc,
        });
    }
    Ok(MechanismCurves { mechanism: first.mechanism, steps })
}

/// One rendered summary line, shaped like the cost/accuracy table.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub mechanism: Mechanism,
    pub acc_at_shot: MeanCi,
    pub max_acc: MeanCi,
    pub budget_at_max_pct: f64,
    pub budget_at_threshold_pct: Option<f64>,
}

/// Derives the summary metrics from a mechanism's mean model-accuracy curve.
pub fn summarize(
    curves: &MechanismCurves,
    shape: &TaskShape,
    threshold: f64,
    shot_eval: usize,
) -> Result<SummaryRow> {
    let mean_curve = curves.model_mean_curve();
    let q = shape.query_size();
    let shot_idx = shape.ways * (shot_eval - shape.shots);
    let acc_mean = accuracy_at_shot(&mean_curve, shot_eval, shape.ways, shape.shots)?;
    let acc_at_shot = MeanCi { mean: acc_mean, ci: curves.steps[shot_idx].model_acc.ci };
    let t_max = argmax_tiebreak(&mean_curve)?;
    Ok(SummaryRow {
        mechanism: curves.mechanism,
        acc_at_shot,
        max_acc: curves.steps[t_max].model_acc,
        budget_at_max_pct: budget_at_max(&mean_curve, q)?,
        budget_at_threshold_pct: budget_at_threshold(&mean_curve, threshold, q),
    })
}

fn fmt_pct(v: f64) -> String {
    let pct = v * 100.0;
    if (pct - pct.round()).abs() < 1e-9 {
        format!("{pct:.0}")
    } else {
        format!("{pct:.1}")
    }
}

fn fmt_mean_ci(m: &MeanCi) -> String {
    match m.ci {
        Some(ci) => format!("{:.1} \u{b1} {:.1}", 100.0 * m.mean, 100.0 * ci),
        None => format!("{:.1}", 100.0 * m.mean),
    }
}

fn fmt_budget(v: Option<f64>) -> String {
    match v {
        Some(b) => format!("{b:.1}"),
        None => "-".to_string(),
    }
}

/// Renders the fixed-width summary table: accuracy-at-shot, maximum
/// accuracy (both as `mean ± ci`, x100), and the two budget columns.
pub fn render_summary(rows: &[SummaryRow], threshold: f64, shot_eval: usize) -> String {
    let headers = [
        "Mechanism".to_string(),
        format!("Accuracy at {shot_eval}-Shot"),
        "Maximum accuracy".to_string(),
        "Budget at max. accuracy".to_string(),
        format!("Budget at {}% accuracy", fmt_pct(threshold)),
    ];
    let cells: Vec<[String; 5]> = rows
        .iter()
        .map(|r| {
            [
                r.mechanism.display_name().to_string(),
                fmt_mean_ci(&r.acc_at_shot),
                fmt_mean_ci(&r.max_acc),
                fmt_budget(Some(r.budget_at_max_pct)),
                fmt_budget(r.budget_at_threshold_pct),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..5)
        .map(|c| {
            cells
                .iter()
                .map(|row| row[c].chars().count())
                .chain(std::iter::once(headers[c].chars().count()))
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let mut push_row = |row: &[String]| {
        for (c, cell) in row.iter().enumerate() {
            if c > 0 {
                out.push_str("  ");
            }
            if c == 0 {
                let _ = write!(out, "{cell:<w$}", w = widths[c]);
            } else {
                let _ = write!(out, "{cell:>w$}", w = widths[c]);
            }
        }
        while out.ends_with(' ') {
            out.pop();
        }
        out.push('\n');
    };
    push_row(&headers);
    for row in &cells {
        push_row(row);
    }
    out
}

/// Aggregated output of [`run_experiment`].
#[derive(Debug)]
pub struct ExperimentReport {
    pub out_dir: PathBuf,
    pub curves: Vec<MechanismCurves>,
    pub summary: Vec<SummaryRow>,
    pub summary_text: String,
    pub files: Vec<PathBuf>,
    pub sigma_used: Option<f64>,
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<EmbeddingDataset> {
    match &cfg.dataset {
        DatasetSource::Path(p) => {
            let file = fs::File::open(p)
                .map_err(|e| Error::Config(format!("cannot open dataset {}: {e}", p.display())))?;
            EmbeddingDataset::parse_csv(BufReader::new(file))
        }
        DatasetSource::Synth(params) => synth_generate(params),
    }
}

fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

fn fmt6_opt(v: Option<f64>) -> String {
    v.map(fmt6).unwrap_or_default()
}

fn render_curves_csv(curves: &[MechanismCurves]) -> String {
    let mut out = String::from(
        "mechanism,step,budget_pct,model_acc_mean,model_acc_ci,method_acc_mean,method_acc_ci,\
         f1_model_mean,f1_method_mean,holdout_acc_mean,holdout_acc_ci\n",
    );
    for mc in curves {
        for s in &mc.steps {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                mc.mechanism.id(),
                s.step,
                fmt6(s.budget_pct),
                fmt6(s.model_acc.mean),
                fmt6_opt(s.model_acc.ci),
                fmt6(s.method_acc.mean),
                fmt6_opt(s.method_acc.ci),
                fmt6(s.f1_model.mean),
                fmt6(s.f1_method.mean),
                fmt6_opt(s.holdout_acc.map(|h| h.mean)),
                fmt6_opt(s.holdout_acc.and_then(|h| h.ci)),
            );
        }
    }
    out
}

fn render_summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(
        "mechanism,acc_at_shot_mean,acc_at_shot_ci,max_acc_mean,max_acc_ci,\
         budget_at_max_pct,budget_at_threshold_pct\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.mechanism.id(),
            fmt6(r.acc_at_shot.mean),
            fmt6_opt(r.acc_at_shot.ci),
            fmt6(r.max_acc.mean),
            fmt6_opt(r.max_acc.ci),
            fmt6(r.budget_at_max_pct),
            fmt6_opt(r.budget_at_threshold_pct),
        );
    }
    out
}

#[derive(Serialize)]
struct Metadata<'a> {
    format_version: u32,
    config: &'a ExperimentConfig,
    resolved_base_models: BTreeMap<&'static str, String>,
    sigma_used: Option<f64>,
    ensemble_members: usize,
    dataset_instances: usize,
    dataset_dim: usize,
    query_size: usize,
    /// Budgets are percentages of the query size.
    budget_denominator: usize,
    /// All mechanisms run over the same sampled episodes.
    paired_episodes: bool,
}

fn write_outputs(out_dir: &Path, files: &[(&str, &str)]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut written: Vec<PathBuf> = Vec::new();
    for (name, content) in files {
        let path = out_dir.join(name);
        if let Err(e) = fs::write(&path, content) {
            for p in &written {
                let _ = fs::remove_file(p);
            }
            return Err(e.into());
        }
        written.push(path);
    }
    Ok(written)
}

/// Runs the full experiment and writes `curves.csv`, `summary.csv`,
/// `summary.txt` and `metadata.json` into the configured output directory.
///
/// Episode seeds derive from the master seed by counter, and each
/// (episode, mechanism) run seed derives from the episode seed and the
/// mechanism name, so adding a mechanism never perturbs the others. Any
/// episode failure aborts the experiment before anything is written.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mut dataset = load_dataset(cfg)?;
    let resolved: Vec<(Mechanism, BaseModelKind)> = cfg
        .mechanisms
        .iter()
        .map(|&m| (m, cfg.resolved_base(m)))
        .collect();
    for (m, base) in &resolved {
        if m.requires_ensemble() && *base != BaseModelKind::Ensemble {
            return Err(Error::Config(format!(
                "mechanism {m} requires the ensemble base model, configured {base}"
            )));
        }
    }

    let needs_ensemble = resolved.iter().any(|(_, b)| *b == BaseModelKind::Ensemble);
    let mut sigma_used = None;
    if needs_ensemble && dataset.n_members() == 1 {
        let sigma = cfg.sigma.unwrap_or(0.1 * dataset.mean_per_dim_std());
        let seed = seeding::mix(cfg.seed, seeding::hash_str("ensemble_perturb"));
        dataset = perturb_ensemble(&dataset, cfg.ensemble_size, sigma, seed)?;
        sigma_used = Some(sigma);
    }

    let shape = cfg.shape();
    let episodes: Vec<Episode> = (0..cfg.episodes)
        .map(|i| {
            let seed = seeding::mix(cfg.seed, i as u64);
            sample_episode(&dataset, &shape, seed)
                .map_err(|e| Error::Episode { seed, source: Box::new(e) })
        })
        .collect::<Result<_>>()?;

    let jobs: Vec<(usize, usize)> = (0..resolved.len())
        .flat_map(|mi| (0..episodes.len()).map(move |ei| (mi, ei)))
        .collect();
    let run_one = |&(mi, ei): &(usize, usize)| -> Result<RunTrace> {
        let (mechanism, base) = resolved[mi];
        let episode = &episodes[ei];
        let run_cfg = RunConfig {
            base_model: Some(base),
            temperature: cfg.temperature,
            kmeans: cfg.kmeans,
            oracle_scope: cfg.oracle_scope,
        };
        let run_seed = seeding::mix(episode.seed, seeding::hash_str(mechanism.id()));
        run_episode(episode, mechanism, &run_cfg, run_seed)
            .map_err(|e| Error::Episode { seed: episode.seed, source: Box::new(e) })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let results: Vec<Result<RunTrace>> = pool.install(|| jobs.par_iter().map(run_one).collect());

    let mut by_mechanism: Vec<Vec<RunTrace>> = vec![Vec::new(); resolved.len()];
    for ((mi, _), result) in jobs.into_iter().zip(results) {
        by_mechanism[mi].push(result?);
    }

    let curves: Vec<MechanismCurves> =
        by_mechanism.iter().map(|traces| aggregate(traces)).collect::<Result<_>>()?;
    let summary: Vec<SummaryRow> = curves
        .iter()
        .map(|c| summarize(c, &shape, cfg.threshold, cfg.shot_eval))
        .collect::<Result<_>>()?;
    let summary_text = render_summary(&summary, cfg.threshold, cfg.shot_eval);

    let curves_csv = render_curves_csv(&curves);
    let summary_csv = render_summary_csv(&summary);
    let metadata = Metadata {
        format_version: FORMAT_VERSION,
        config: cfg,
        resolved_base_models: resolved
            .iter()
            .map(|(m, b)| (m.id(), b.to_string()))
            .collect(),
        sigma_used,
        ensemble_members: dataset.n_members(),
        dataset_instances: dataset.len(),
        dataset_dim: dataset.dim(),
        query_size: shape.query_size(),
        budget_denominator: shape.query_size(),
        paired_episodes: true,
    };
    let metadata_json = format!("{}\n", serde_json::to_string_pretty(&metadata)?);

    let files = write_outputs(
        &cfg.out_dir,
        &[
            ("curves.csv", curves_csv.as_str()),
            ("summary.csv", summary_csv.as_str()),
            ("summary.txt", summary_text.as_str()),
            ("metadata.json", metadata_json.as_str()),
        ],
    )?;

    Ok(ExperimentReport {
        out_dir: cfg.out_dir.clone(),
        curves,
        summary,
        summary_text,
        files,
        sigma_used,
    })
}
