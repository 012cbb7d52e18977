//! Prototypical classifier state: per-class mean prototypes, posteriors,
//! incremental updates, ensemble averaging and the cluster-refined base
//! model.

use serde::{Deserialize, Serialize};

use crate::clustering::{kmeans, EmptyClusterPolicy, KMeansConfig};
use crate::error::{Error, Result};
use crate::numerics::{argmax_tiebreak, euclid_dist, softmax_neg, Embedding, ProbVec};

/// Which classifier variant an episode run scores against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseModelKind {
    /// Plain 1-model prototypes from the support set.
    Standard,
    /// One prototype set per ensemble member; predictions average the
    /// member posteriors.
    Ensemble,
    /// Support prototypes refined by seeded k-means over the unlabeled
    /// query before the loop starts.
    ClusterInit,
}

impl std::fmt::Display for BaseModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            BaseModelKind::Standard => "standard",
            BaseModelKind::Ensemble => "ensemble",
            BaseModelKind::ClusterInit => "cluster_init",
        };
        f.write_str(s)
    }
}

/// Per-class mean embeddings with their support counts.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    prototypes: Vec<Embedding>,
    counts: Vec<usize>,
}

impl PrototypeSet {
    /// Computes one prototype per class as the mean of its support
    /// embeddings. `support[c]` holds the embeddings of class `c`.
    pub fn from_support(support: &[Vec<Embedding>]) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::Empty { what: "support set" });
        }
        let dim = support
            .iter()
            .flatten()
            .next()
            .ok_or(Error::EmptyClass { class: 0 })?
            .dim();
        let mut prototypes = Vec::with_capacity(support.len());
        let mut counts = Vec::with_capacity(support.len());
        for (class, members) in support.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::EmptyClass { class });
            }
            let mut sum = vec![0.0; dim];
            for m in members {
                if m.dim() != dim {
                    return Err(Error::DimensionMismatch { left: dim, right: m.dim() });
                }
                for (s, v) in sum.iter_mut().zip(m.values()) {
                    *s += v;
                }
            }
            let n = members.len() as f64;
            prototypes.push(Embedding::new(sum.into_iter().map(|s| s / n).collect())?);
            counts.push(members.len());
        }
        Ok(Self { prototypes, counts })
    }

    pub fn n_classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn dim(&self) -> usize {
        self.prototypes[0].dim()
    }

    pub fn prototype(&self, class: usize) -> &Embedding {
        &self.prototypes[class]
    }

    pub fn prototypes(&self) -> &[Embedding] {
        &self.prototypes
    }

    pub fn count(&self, class: usize) -> usize {
        self.counts[class]
    }

    /// Euclidean distance from `x` to every prototype, in class order.
    pub fn distances(&self, x: &Embedding) -> Result<Vec<f64>> {
        self.prototypes.iter().map(|p| euclid_dist(x, p)).collect()
    }

    /// Class distribution: softmax over the negated prototype distances.
    pub fn posterior(&self, x: &Embedding, temperature: f64) -> Result<ProbVec> {
        softmax_neg(&self.distances(x)?, temperature)
    }

    /// Nearest-prototype class, ties broken by lowest class id.
    ///
    /// Equals `posterior(x, t).argmax()` for every temperature.
    pub fn predict(&self, x: &Embedding) -> Result<usize> {
        let neg: Vec<f64> = self.distances(x)?.into_iter().map(|d| -d).collect();
        argmax_tiebreak(&neg)
    }

    /// Folds one newly labeled embedding into class `c`'s running mean.
    pub fn update(&mut self, class: usize, x: &Embedding) -> Result<()> {
        if class >= self.n_classes() {
            return Err(Error::InvalidClass { class, n_classes: self.n_classes() });
        }
        if x.dim() != self.dim() {
            return Err(Error::DimensionMismatch { left: self.dim(), right: x.dim() });
        }
        let n = self.counts[class] as f64;
        let updated: Vec<f64> = self.prototypes[class]
            .values()
            .iter()
            .zip(x.values())
            .map(|(p, v)| (n * p + v) / (n + 1.0))
            .collect();
        self.prototypes[class] = Embedding::new(updated)?;
        self.counts[class] += 1;
        Ok(())
    }
}

/// One prototype set per ensemble member.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    members: Vec<PrototypeSet>,
}

impl EnsembleState {
    pub fn new(members: Vec<PrototypeSet>) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::Config(format!(
                "ensemble needs at least 2 members, got {}",
                members.len()
            )));
        }
        let (n, d) = (members[0].n_classes(), members[0].dim());
        for m in &members[1..] {
            if m.n_classes() != n {
                return Err(Error::DimensionMismatch { left: n, right: m.n_classes() });
            }
            if m.dim() != d {
                return Err(Error::DimensionMismatch { left: d, right: m.dim() });
            }
        }
        Ok(Self { members })
    }

    pub fn n_members(&self) -> usize {
        self.members.len()
    }

    pub fn n_classes(&self) -> usize {
        self.members[0].n_classes()
    }

    pub fn member(&self, e: usize) -> &PrototypeSet {
        &self.members[e]
    }

    /// Per-member posteriors of one instance and their arithmetic mean.
    ///
    /// `x_members[e]` is the instance's embedding under ensemble member `e`.
    pub fn mean_posterior(
        &self,
        x_members: &[Embedding],
        temperature: f64,
    ) -> Result<(ProbVec, Vec<ProbVec>)> {
        if x_members.len() != self.members.len() {
            return Err(Error::MemberMismatch {
                expected: self.members.len(),
                got: x_members.len(),
            });
        }
        let per_member: Vec<ProbVec> = self
            .members
            .iter()
            .zip(x_members)
            .map(|(m, x)| m.posterior(x, temperature))
            .collect::<Result<_>>()?;
        let mean = ProbVec::mean(&per_member)?;
        Ok((mean, per_member))
    }

    /// Updates every member's prototype for `class` with the instance's
    /// respective member embedding.
    pub fn update(&mut self, class: usize, x_members: &[Embedding]) -> Result<()> {
        if x_members.len() != self.members.len() {
            return Err(Error::MemberMismatch {
                expected: self.members.len(),
                got: x_members.len(),
            });
        }
        for (m, x) in self.members.iter_mut().zip(x_members) {
            m.update(class, x)?;
        }
        Ok(())
    }
}

/// Runtime classifier state of one episode run.
#[derive(Debug, Clone)]
pub enum Model {
    Single(PrototypeSet),
    Ensemble(EnsembleState),
}

impl Model {
    pub fn n_classes(&self) -> usize {
        match self {
            Model::Single(p) => p.n_classes(),
            Model::Ensemble(e) => e.n_classes(),
        }
    }

    /// Prototype set used for cluster seeding: the single set, or ensemble
    /// member 0 (the unperturbed base member).
    pub fn base_prototypes(&self) -> &PrototypeSet {
        match self {
            Model::Single(p) => p,
            Model::Ensemble(e) => e.member(0),
        }
    }

    /// Class distribution for an instance given all of its member
    /// embeddings; ensembles average the member posteriors.
    pub fn posterior(&self, members: &[Embedding], temperature: f64) -> Result<ProbVec> {
        match self {
            Model::Single(p) => {
                let x = members.first().ok_or(Error::MemberMismatch { expected: 1, got: 0 })?;
                p.posterior(x, temperature)
            }
            Model::Ensemble(e) => Ok(e.mean_posterior(members, temperature)?.0),
        }
    }

    pub fn predict(&self, members: &[Embedding], temperature: f64) -> Result<usize> {
        match self {
            Model::Single(p) => {
                let x = members.first().ok_or(Error::MemberMismatch { expected: 1, got: 0 })?;
                p.predict(x)
            }
            Model::Ensemble(e) => Ok(e.mean_posterior(members, temperature)?.0.argmax()),
        }
    }

    /// Incorporates one expert-labeled instance.
    pub fn observe(&mut self, class: usize, members: &[Embedding]) -> Result<()> {
        match self {
            Model::Single(p) => {
                let x = members.first().ok_or(Error::MemberMismatch { expected: 1, got: 0 })?;
                p.update(class, x)
            }
            Model::Ensemble(e) => e.update(class, members),
        }
    }
}

/// Refines 1-shot prototypes by seeded k-means over the unlabeled pool.
///
/// Each converged center replaces the prototype whose seed it grew from, so
/// the class ↔ prototype association is preserved; a cluster that ends up
/// empty keeps its seed prototype. Support counts are unchanged.
pub fn cluster_refine_init(
    protos: &PrototypeSet,
    unlabeled: &[Embedding],
    cfg: &KMeansConfig,
    seed: u64,
) -> Result<PrototypeSet> {
    if unlabeled.is_empty() {
        return Err(Error::Empty { what: "unlabeled pool" });
    }
    let refine_cfg = KMeansConfig {
        empty_policy: EmptyClusterPolicy::KeepCenter,
        allow_fewer_points: true,
        ..*cfg
    };
    let clustering = kmeans(
        unlabeled,
        protos.n_classes(),
        Some(protos.prototypes()),
        &refine_cfg,
        seed,
    )?;
    let mut occupied = vec![false; protos.n_classes()];
    for &a in &clustering.assignment {
        occupied[a] = true;
    }
    let prototypes: Vec<Embedding> = clustering
        .centers
        .iter()
        .zip(&occupied)
        .enumerate()
        .map(|(c, (center, occ))| if *occ { center.clone() } else { protos.prototype(c).clone() })
        .collect();
    Ok(PrototypeSet {
        prototypes,
        counts: (0..protos.n_classes()).map(|c| protos.count(c)).collect(),
    })
}
