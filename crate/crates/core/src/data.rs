//! Embedding ingestion, synthetic dataset generation, ensemble-member
//! perturbation, and episode sampling.
//!
//! The interchange format is a UTF-8 CSV with header
//! `id,label,split,member,e0,...,e{D-1}`; the `member` column is optional
//! on input (absent means member 0) and always written on output. Floats
//! are printed with Rust's shortest round-trip formatting, so
//! parse(write(ds)) reproduces every coordinate bit-exactly.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Embedding;
use crate::seeding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One dataset row group: an instance with its per-member embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct DataInstance {
    pub id: String,
    pub label: String,
    pub split: Split,
    /// Member 0 is the base embedding; members 1.. are ensemble variants.
    pub members: Vec<Embedding>,
}

/// An immutable embedding dataset with a uniform member set.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    dim: usize,
    n_members: usize,
    instances: Vec<DataInstance>,
}

impl EmbeddingDataset {
    pub fn new(instances: Vec<DataInstance>) -> Result<Self> {
        let first = instances
            .first()
            .ok_or(Error::Empty { what: "dataset" })?;
        let dim = first.members[0].dim();
        let n_members = first.members.len();
        let mut seen = HashMap::new();
        for inst in &instances {
            if inst.members.is_empty() {
                return Err(Error::MemberMismatch { expected: n_members, got: 0 });
            }
            if inst.members.len() != n_members {
                return Err(Error::MemberMismatch {
                    expected: n_members,
                    got: inst.members.len(),
                });
            }
            for m in &inst.members {
                if m.dim() != dim {
                    return Err(Error::DimensionMismatch { left: dim, right: m.dim() });
                }
            }
            if seen.insert(inst.id.clone(), ()).is_some() {
                return Err(Error::Config(format!("duplicate instance id {}", inst.id)));
            }
        }
        Ok(Self { dim, n_members, instances })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_members(&self) -> usize {
        self.n_members
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn instances(&self) -> &[DataInstance] {
        &self.instances
    }

    /// Mean over dimensions of the per-dimension standard deviation of the
    /// base embeddings. Used as the scale reference for the default
    /// ensemble perturbation.
    pub fn mean_per_dim_std(&self) -> f64 {
        let n = self.instances.len() as f64;
        let mut total = 0.0;
        for d in 0..self.dim {
            let mean: f64 =
                self.instances.iter().map(|i| i.members[0].values()[d]).sum::<f64>() / n;
            let var: f64 = self
                .instances
                .iter()
                .map(|i| {
                    let v = i.members[0].values()[d] - mean;
                    v * v
                })
                .sum::<f64>()
                / n;
            total += var.sqrt();
        }
        total / self.dim as f64
    }

    /// Parses the embedding CSV format, reporting the offending line on error.
    pub fn parse_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        let fields: Vec<&str> = headers.iter().collect();
        if fields.len() < 4 || fields[0] != "id" || fields[1] != "label" || fields[2] != "split" {
            return Err(Error::Parse {
                line: 1,
                msg: "header must start with id,label,split".into(),
            });
        }
        let has_member = fields[3] == "member";
        let coord_start = if has_member { 4 } else { 3 };
        let dim = fields.len() - coord_start;
        if dim == 0 {
            return Err(Error::Parse { line: 1, msg: "no embedding columns".into() });
        }
        for (i, f) in fields[coord_start..].iter().enumerate() {
            if *f != format!("e{i}") {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("expected column e{i}, found {f}"),
                });
            }
        }

        struct Pending {
            label: String,
            split: Split,
            members: BTreeMap<usize, Embedding>,
            first_line: u64,
        }
        let mut order: Vec<String> = Vec::new();
        let mut pending: HashMap<String, Pending> = HashMap::new();

        for record in rdr.records() {
            let record = record?;
            let line = record.position().map_or(0, |p| p.line());
            if record.len() != fields.len() {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected {} fields, got {}", fields.len(), record.len()),
                });
            }
            let id = record[0].to_string();
            let label = record[1].to_string();
            let split = Split::parse(&record[2]).ok_or_else(|| Error::Parse {
                line,
                msg: format!("unknown split {:?}", &record[2]),
            })?;
            let member: usize = if has_member {
                record[3].parse().map_err(|_| Error::Parse {
                    line,
                    msg: format!("invalid member index {:?}", &record[3]),
                })?
            } else {
                0
            };
            let mut coords = Vec::with_capacity(dim);
            for raw in record.iter().skip(coord_start) {
                let v: f64 = raw.parse().map_err(|_| Error::Parse {
                    line,
                    msg: format!("non-numeric coordinate {raw:?}"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line,
                        msg: format!("non-finite coordinate {raw:?}"),
                    });
                }
                coords.push(v);
            }
            let embedding = Embedding::new(coords)?;

            let entry = pending.entry(id.clone()).or_insert_with(|| {
                order.push(id.clone());
                Pending { label: label.clone(), split, members: BTreeMap::new(), first_line: line }
            });
            if entry.label != label || entry.split != split {
                return Err(Error::Parse {
                    line,
                    msg: format!("conflicting label/split for id {id}"),
                });
            }
            if entry.members.insert(member, embedding).is_some() {
                return Err(Error::Parse {
                    line,
                    msg: format!("duplicate (id, member) pair ({id}, {member})"),
                });
            }
        }

        if order.is_empty() {
            return Err(Error::Parse { line: 1, msg: "no data rows".into() });
        }
        let expected: Vec<usize> = {
            let first = &pending[&order[0]];
            first.members.keys().copied().collect()
        };
        if expected.first() != Some(&0) || expected.iter().enumerate().any(|(i, &m)| i != m) {
            let p = &pending[&order[0]];
            return Err(Error::Parse {
                line: p.first_line,
                msg: format!("member indices for id {} are not contiguous from 0", order[0]),
            });
        }
        let mut instances = Vec::with_capacity(order.len());
        for id in order {
            let p = pending.remove(&id).expect("pending entry");
            let members_idx: Vec<usize> = p.members.keys().copied().collect();
            if members_idx != expected {
                return Err(Error::Parse {
                    line: p.first_line,
                    msg: format!("inconsistent member set for id {id}"),
                });
            }
            instances.push(DataInstance {
                id,
                label: p.label,
                split: p.split,
                members: p.members.into_values().collect(),
            });
        }
        Self::new(instances)
    }

    /// Writes the canonical CSV form (member column always present).
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["id".to_string(), "label".into(), "split".into(), "member".into()];
        header.extend((0..self.dim).map(|i| format!("e{i}")));
        wtr.write_record(&header)?;
        for inst in &self.instances {
            for (e, emb) in inst.members.iter().enumerate() {
                let mut row = vec![
                    inst.id.clone(),
                    inst.label.clone(),
                    inst.split.as_str().to_string(),
                    e.to_string(),
                ];
                row.extend(emb.values().iter().map(|v| format!("{v}")));
                wtr.write_record(&row)?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Parameters for the synthetic Gaussian-blob dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthParams {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Scale of the class centers: centers are drawn from N(0, scale² I).
    pub center_scale: f64,
    /// Within-class noise: instances are drawn from N(center, noise² I).
    pub class_noise: f64,
    pub seed: u64,
}

impl SynthParams {
    fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.per_class == 0 || self.dim == 0 {
            return Err(Error::Config(
                "synthetic dataset needs classes, per_class and dim >= 1".into(),
            ));
        }
        if !(self.center_scale >= 0.0) || !(self.class_noise >= 0.0) {
            return Err(Error::Config(
                "synthetic scales must be non-negative and finite".into(),
            ));
        }
        Ok(())
    }
}

/// Draws Gaussian class blobs; every class is tagged `split=test` since the
/// harness performs no training.
pub fn synth_generate(params: &SynthParams) -> Result<EmbeddingDataset> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let normal = StandardNormal;
    let mut instances = Vec::with_capacity(params.classes * params.per_class);
    for c in 0..params.classes {
        let center: Vec<f64> = (0..params.dim)
            .map(|_| params.center_scale * <StandardNormal as Distribution<f64>>::sample(&normal, &mut rng))
            .collect();
        for j in 0..params.per_class {
            let coords: Vec<f64> = center
                .iter()
                .map(|&m| m + params.class_noise * <StandardNormal as Distribution<f64>>::sample(&normal, &mut rng))
                .collect();
            instances.push(DataInstance {
                id: format!("c{c}_i{j}"),
                label: format!("c{c}"),
                split: Split::Test,
                members: vec![Embedding::new(coords)?],
            });
        }
    }
    EmbeddingDataset::new(instances)
}

/// Adds `members - 1` Gaussian-perturbed copies of every base embedding.
///
/// Member `e > 0` is `base + N(0, sigma² I)`, with the noise stream seeded
/// per `(id, e)` so the result does not depend on instance order. Member 0
/// is preserved untouched.
pub fn perturb_ensemble(
    ds: &EmbeddingDataset,
    members: usize,
    sigma: f64,
    seed: u64,
) -> Result<EmbeddingDataset> {
    if ds.n_members() != 1 {
        return Err(Error::Config(format!(
            "dataset already has {} members",
            ds.n_members()
        )));
    }
    if members < 2 {
        return Err(Error::Config(format!(
            "ensemble needs at least 2 members, got {members}"
        )));
    }
    if !(sigma >= 0.0) {
        return Err(Error::Config(format!("sigma must be non-negative, got {sigma}")));
    }
    let normal = StandardNormal;
    let mut instances = Vec::with_capacity(ds.len());
    for inst in ds.instances() {
        let base = &inst.members[0];
        let mut all = Vec::with_capacity(members);
        all.push(base.clone());
        for e in 1..members {
            let stream = seeding::mix(seeding::mix(seed, seeding::hash_str(&inst.id)), e as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(stream);
            let coords: Vec<f64> = base
                .values()
                .iter()
                .map(|&v| v + sigma * <StandardNormal as Distribution<f64>>::sample(&normal, &mut rng))
                .collect();
            all.push(Embedding::new(coords)?);
        }
        instances.push(DataInstance {
            id: inst.id.clone(),
            label: inst.label.clone(),
            split: inst.split,
            members: all,
        });
    }
    EmbeddingDataset::new(instances)
}

/// Shape of one episode: N-way, k-shot, b-query, h-holdout (per class).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskShape {
    pub ways: usize,
    pub shots: usize,
    pub query_per_class: usize,
    pub holdout_per_class: usize,
}

impl TaskShape {
    pub fn per_class_need(&self) -> usize {
        self.shots + self.query_per_class + self.holdout_per_class
    }

    pub fn query_size(&self) -> usize {
        self.ways * self.query_per_class
    }
}

/// One sampled instance inside an episode, with its class renumbered to
/// `0..ways`.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: String,
    pub label: usize,
    pub members: Vec<Embedding>,
}

/// One N-way k-shot task: support, query and optional hold-out instances,
/// pairwise disjoint, with ground truth for all of them.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub seed: u64,
    pub shape: TaskShape,
    /// Original dataset label of each renumbered class.
    pub class_labels: Vec<String>,
    /// `support[c]` holds the k support instances of class `c`.
    pub support: Vec<Vec<Instance>>,
    pub query: Vec<Instance>,
    pub holdout: Vec<Instance>,
    pub dim: usize,
    pub n_members: usize,
}

/// Samples one episode from the dataset's test split.
///
/// Classes and instances are drawn uniformly without replacement from the
/// stream seeded by `seed`; the same seed always yields the same episode.
pub fn sample_episode(ds: &EmbeddingDataset, shape: &TaskShape, seed: u64) -> Result<Episode> {
    if shape.ways < 2 || shape.shots == 0 || shape.query_per_class == 0 {
        return Err(Error::Config(
            "episodes need ways >= 2, shots >= 1 and query >= 1".into(),
        ));
    }
    let need = shape.per_class_need();
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, inst) in ds.instances().iter().enumerate() {
        if inst.split == Split::Test {
            by_class.entry(inst.label.as_str()).or_default().push(i);
        }
    }
    let eligible: Vec<(&str, &Vec<usize>)> =
        by_class.iter().filter(|(_, v)| v.len() >= need).map(|(k, v)| (*k, v)).collect();
    if eligible.len() < shape.ways {
        return Err(Error::Sampling(format!(
            "need {} test classes with at least {} instances each, found {}",
            shape.ways,
            need,
            eligible.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = rand::seq::index::sample(&mut rng, eligible.len(), shape.ways);

    let mut class_labels = Vec::with_capacity(shape.ways);
    let mut support = Vec::with_capacity(shape.ways);
    let mut query = Vec::new();
    let mut holdout = Vec::new();
    for (class, pick) in chosen.iter().enumerate() {
        let (label, indices) = eligible[pick];
        class_labels.push(label.to_string());
        let mut pool = indices.clone();
        pool.shuffle(&mut rng);
        let take = |range: std::ops::Range<usize>| -> Vec<Instance> {
            pool[range]
                .iter()
                .map(|&i| {
                    let inst = &ds.instances()[i];
                    Instance {
                        id: inst.id.clone(),
                        label: class,
                        members: inst.members.clone(),
                    }
                })
                .collect()
        };
        support.push(take(0..shape.shots));
        query.extend(take(shape.shots..shape.shots + shape.query_per_class));
        holdout.extend(take(
            shape.shots + shape.query_per_class..need,
        ));
    }

    Ok(Episode {
        seed,
        shape: *shape,
        class_labels,
        support,
        query,
        holdout,
        dim: ds.dim(),
        n_members: ds.n_members(),
    })
}
