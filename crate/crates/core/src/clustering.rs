//! Deterministic k-means, used by cluster-based acquisition and by the
//! cluster-refined base model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax_tiebreak, euclid_dist, softmax_neg, Embedding, ProbVec};
use crate::seeding;

/// What to do when a Lloyd iteration leaves a cluster with no points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyClusterPolicy {
    /// Move the empty cluster's center onto the point currently farthest
    /// from its assigned center (taken from a cluster with > 1 members).
    ReseedFarthest,
    /// Leave the empty cluster's center where it is.
    KeepCenter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub max_iter: usize,
    /// Number of k-means++ restarts when no seeds are given; seeded runs
    /// always execute exactly once.
    pub restarts: usize,
    pub empty_policy: EmptyClusterPolicy,
    /// Permit `k > |points|` for seeded runs; excess clusters simply stay
    /// empty at their seeds. Off by default.
    pub allow_fewer_points: bool,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            restarts: 3,
            empty_policy: EmptyClusterPolicy::ReseedFarthest,
            allow_fewer_points: false,
        }
    }
}

/// Result of one k-means run.
#[derive(Debug, Clone)]
pub struct Clustering {
    pub centers: Vec<Embedding>,
    /// Cluster index of each input point (nearest center, ties to the
    /// lowest cluster index).
    pub assignment: Vec<usize>,
    /// Sum of squared distances from each point to its assigned center.
    pub inertia: f64,
    pub iterations_run: usize,
    /// Inertia after each assignment pass; non-increasing.
    pub inertia_trace: Vec<f64>,
}

impl Clustering {
    pub fn k(&self) -> usize {
        self.centers.len()
    }
}

/// Lloyd's algorithm until the assignment reaches a fixpoint or `max_iter`.
///
/// Seeded runs start from `seeds` (one run); unseeded runs use k-means++
/// initialization driven by `rng_seed`, taking the best inertia over
/// `cfg.restarts` restarts.
pub fn kmeans(
    points: &[Embedding],
    k: usize,
    seeds: Option<&[Embedding]>,
    cfg: &KMeansConfig,
    rng_seed: u64,
) -> Result<Clustering> {
    if points.is_empty() {
        return Err(Error::Empty { what: "k-means point set" });
    }
    if k == 0 {
        return Err(Error::Config("k-means requires k >= 1".into()));
    }
    let dim = points[0].dim();
    for p in points {
        if p.dim() != dim {
            return Err(Error::DimensionMismatch { left: dim, right: p.dim() });
        }
    }
    if k > points.len() && !cfg.allow_fewer_points {
        return Err(Error::Config(format!(
            "k-means with k={} over {} points",
            k,
            points.len()
        )));
    }
    if let Some(seeds) = seeds {
        if seeds.len() != k {
            return Err(Error::Config(format!(
                "expected {} seed centers, got {}",
                k,
                seeds.len()
            )));
        }
        for s in seeds {
            if s.dim() != dim {
                return Err(Error::DimensionMismatch { left: dim, right: s.dim() });
            }
        }
        return lloyd(points, seeds.to_vec(), cfg);
    }

    let restarts = cfg.restarts.max(1);
    let mut best: Option<Clustering> = None;
    for r in 0..restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(seeding::mix(rng_seed, r as u64));
        let init = kmeans_pp_init(points, k, &mut rng);
        let run = lloyd(points, init, cfg)?;
        let better = match &best {
            None => true,
            Some(b) => run.inertia < b.inertia,
        };
        if better {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Membership distribution of `x` over the cluster centers: softmax over
/// the negated center distances.
pub fn cluster_posterior(x: &Embedding, clustering: &Clustering, temperature: f64) -> Result<ProbVec> {
    let distances = clustering
        .centers
        .iter()
        .map(|c| euclid_dist(x, c))
        .collect::<Result<Vec<f64>>>()?;
    softmax_neg(&distances, temperature)
}

fn kmeans_pp_init(points: &[Embedding], k: usize, rng: &mut ChaCha8Rng) -> Vec<Embedding> {
    let n = points.len();
    let mut centers: Vec<Embedding> = Vec::with_capacity(k);
    let mut chosen = vec![false; n];
    let first = rng.gen_range(0..n);
    chosen[first] = true;
    centers.push(points[first].clone());

    // d2[i] = squared distance from point i to its nearest chosen center
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| sq_dist(p, &centers[0]))
        .collect();

    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, w) in d2.iter().enumerate() {
                u -= w;
                if u <= 0.0 && *w > 0.0 {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can exhaust u just past the last positive weight.
            pick.unwrap_or_else(|| {
                d2.iter()
                    .rposition(|w| *w > 0.0)
                    .expect("total > 0 implies a positive weight")
            })
        } else {
            // All remaining points coincide with chosen centers; take the
            // first unchosen index for determinism.
            chosen.iter().position(|c| !c).unwrap_or(0)
        };
        chosen[next] = true;
        centers.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            let d = sq_dist(p, centers.last().unwrap());
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    centers
}

fn sq_dist(a: &Embedding, b: &Embedding) -> f64 {
    a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

fn lloyd(points: &[Embedding], mut centers: Vec<Embedding>, cfg: &KMeansConfig) -> Result<Clustering> {
    let k = centers.len();
    let dim = points[0].dim();
    let max_iter = cfg.max_iter.max(1);
    let mut assignment: Vec<usize> = vec![0; points.len()];
    let mut prev: Option<Vec<usize>> = None;
    let mut inertia_trace = Vec::new();
    let mut iterations_run = 0;

    for it in 0..max_iter {
        iterations_run = it + 1;
        for (i, p) in points.iter().enumerate() {
            let neg_d2: Vec<f64> = centers.iter().map(|c| -sq_dist(p, c)).collect();
            assignment[i] = argmax_tiebreak(&neg_d2)?;
        }
        let inertia: f64 = points
            .iter()
            .zip(&assignment)
            .map(|(p, &a)| sq_dist(p, &centers[a]))
            .sum();
        if let Some(last) = inertia_trace.last() {
            debug_assert!(inertia <= last + 1e-9 * (1.0 + last));
        }
        inertia_trace.push(inertia);

        if prev.as_ref() == Some(&assignment) || it + 1 == max_iter {
            break;
        }
        prev = Some(assignment.clone());

        let mut sums = vec![vec![0.0; dim]; k];
        let mut sizes = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignment) {
            sizes[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p.values()) {
                *s += v;
            }
        }
        for (c, (sum, &size)) in centers.iter_mut().zip(sums.iter().zip(&sizes)) {
            if size > 0 {
                *c = Embedding::new(sum.iter().map(|s| s / size as f64).collect())?;
            }
            // size == 0: keep the current center; repair below if requested.
        }
        if cfg.empty_policy == EmptyClusterPolicy::ReseedFarthest {
            let mut taken = vec![false; points.len()];
            for j in 0..k {
                if sizes[j] > 0 {
                    continue;
                }
                // Farthest point from its assigned center, ties to the lowest
                // point index; only from clusters that can spare a point.
                let mut pick: Option<(usize, f64)> = None;
                for (i, p) in points.iter().enumerate() {
                    if taken[i] || sizes[assignment[i]] <= 1 {
                        continue;
                    }
                    let d = sq_dist(p, &centers[assignment[i]]);
                    if pick.map_or(true, |(_, best)| d > best) {
                        pick = Some((i, d));
                    }
                }
                if let Some((i, _)) = pick {
                    taken[i] = true;
                    sizes[assignment[i]] -= 1;
                    sizes[j] += 1;
                    centers[j] = points[i].clone();
                }
            }
        }
    }

    let inertia = *inertia_trace.last().expect("at least one iteration");
    Ok(Clustering {
        centers,
        assignment,
        inertia,
        iterations_run,
        inertia_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn pts(vals: &[&[f64]]) -> Vec<Embedding> {
        vals.iter().map(|v| Embedding::new(v.to_vec()).unwrap()).collect()
    }

    #[test]
    fn exact_cover_has_zero_inertia() {
        let points = pts(&[&[0.0, 0.0], &[5.0, 0.0], &[0.0, 5.0]]);
        let c = kmeans(&points, 3, None, &KMeansConfig::default(), 7).unwrap();
        assert_eq!(c.inertia, 0.0);
        let mut centers: Vec<Vec<f64>> = c.centers.iter().map(|e| e.values().to_vec()).collect();
        centers.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut expected: Vec<Vec<f64>> = points.iter().map(|e| e.values().to_vec()).collect();
        expected.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(centers, expected);
    }

    /// Independent oracle: enumerate every assignment of the points to two
    /// clusters, place centers at cluster means, and take the best inertia.
    fn brute_force_best_two_clusters(values: &[f64]) -> f64 {
        let n = values.len();
        let mut best = f64::INFINITY;
        for mask in 0..(1u32 << n) {
            let (mut s0, mut n0, mut s1, mut n1) = (0.0, 0, 0.0, 0);
            for (i, v) in values.iter().enumerate() {
                if mask & (1 << i) == 0 {
                    s0 += v;
                    n0 += 1;
                } else {
                    s1 += v;
                    n1 += 1;
                }
            }
            if n0 == 0 || n1 == 0 {
                continue;
            }
            let (m0, m1) = (s0 / n0 as f64, s1 / n1 as f64);
            let cost: f64 = values
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let m = if mask & (1 << i) == 0 { m0 } else { m1 };
                    (v - m) * (v - m)
                })
                .sum();
            if cost < best {
                best = cost;
            }
        }
        best
    }

    #[test]
    fn two_cluster_line_matches_exhaustive_oracle() {
        let values = [0.0, 1.0, 9.0, 10.0];
        let points = pts(&[&[0.0], &[1.0], &[9.0], &[10.0]]);
        let c = kmeans(&points, 2, None, &KMeansConfig::default(), 3).unwrap();
        let oracle = brute_force_best_two_clusters(&values);
        assert_abs_diff_eq!(c.inertia, oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(c.inertia, 1.0, epsilon = 1e-12);
        let mut centers: Vec<f64> = c.centers.iter().map(|e| e.values()[0]).collect();
        centers.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(centers, vec![0.5, 9.5]);
    }

    #[test]
    fn identical_points_single_cluster() {
        let points = pts(&[&[2.0, 2.0], &[2.0, 2.0], &[2.0, 2.0]]);
        let c = kmeans(&points, 1, None, &KMeansConfig::default(), 0).unwrap();
        assert_eq!(c.centers[0].values(), &[2.0, 2.0]);
        assert_eq!(c.inertia, 0.0);
    }

    #[test]
    fn rejects_more_clusters_than_points() {
        let points = pts(&[&[0.0], &[1.0]]);
        assert!(matches!(
            kmeans(&points, 3, None, &KMeansConfig::default(), 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn seeded_oversized_k_keeps_empty_clusters_at_seeds() {
        let points = pts(&[&[0.0], &[0.2]]);
        let seeds = pts(&[&[0.0], &[10.0], &[20.0]]);

        let keep = KMeansConfig {
            allow_fewer_points: true,
            empty_policy: EmptyClusterPolicy::KeepCenter,
            ..KMeansConfig::default()
        };
        let c = kmeans(&points, 3, Some(&seeds), &keep, 0).unwrap();
        assert_eq!(c.centers[1].values(), &[10.0]);
        assert_eq!(c.centers[2].values(), &[20.0]);
        assert!(c.assignment.iter().all(|&a| a == 0));

        // Reseeding can hand each point its own cluster (the repair steals
        // the lowest-indexed of the tied farthest points), but a cluster
        // that cannot steal a point stays at its seed.
        let reseed = KMeansConfig { allow_fewer_points: true, ..KMeansConfig::default() };
        let c = kmeans(&points, 3, Some(&seeds), &reseed, 0).unwrap();
        assert_eq!(c.centers[2].values(), &[20.0]);
        assert_eq!(c.assignment, vec![1, 0]);
        assert_eq!(c.inertia, 0.0);
    }

    #[test]
    fn fixed_seed_is_bit_deterministic() {
        let points = pts(&[&[0.0, 1.0], &[1.5, 0.5], &[9.0, 9.0], &[8.5, 9.5], &[4.0, 4.0]]);
        let a = kmeans(&points, 2, None, &KMeansConfig::default(), 42).unwrap();
        let b = kmeans(&points, 2, None, &KMeansConfig::default(), 42).unwrap();
        assert_eq!(a.centers, b.centers);
        assert_eq!(a.assignment, b.assignment);
        assert_eq!(a.inertia.to_bits(), b.inertia.to_bits());
    }

    #[test]
    fn inertia_trace_is_non_increasing() {
        let points = pts(&[
            &[0.0, 0.0], &[1.0, 0.5], &[0.5, 1.0], &[8.0, 8.0], &[9.0, 8.5],
            &[8.5, 9.0], &[4.0, 5.0], &[5.0, 4.0],
        ]);
        let c = kmeans(&points, 3, None, &KMeansConfig::default(), 11).unwrap();
        for w in c.inertia_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
    }

    #[test]
    fn converged_centers_are_cluster_means() {
        let points = pts(&[&[0.0], &[1.0], &[2.0], &[10.0], &[11.0]]);
        let c = kmeans(&points, 2, None, &KMeansConfig::default(), 5).unwrap();
        for j in 0..c.k() {
            let members: Vec<&Embedding> = points
                .iter()
                .zip(&c.assignment)
                .filter(|(_, &a)| a == j)
                .map(|(p, _)| p)
                .collect();
            if members.is_empty() {
                continue;
            }
            let mean: f64 =
                members.iter().map(|m| m.values()[0]).sum::<f64>() / members.len() as f64;
            assert_abs_diff_eq!(c.centers[j].values()[0], mean, epsilon = 1e-9);
        }
    }

    #[test]
    fn cluster_posterior_symmetry_and_peak() {
        let points = pts(&[&[0.0], &[10.0]]);
        let c = kmeans(&points, 2, None, &KMeansConfig::default(), 1).unwrap();
        let mid = Embedding::new(vec![5.0]).unwrap();
        let p = cluster_posterior(&mid, &c, 1.0).unwrap();
        assert_abs_diff_eq!(p.probs()[0], 0.5, epsilon = 1e-12);

        let at_first = &c.centers[0].clone();
        let p = cluster_posterior(at_first, &c, 1.0).unwrap();
        assert_eq!(p.argmax(), 0);
    }

    #[test]
    fn cluster_posterior_matches_softmax_of_distances() {
        let centers = pts(&[&[0.0, 0.0], &[4.0, 0.0], &[0.0, 3.0]]);
        let clustering = Clustering {
            centers: centers.clone(),
            assignment: vec![],
            inertia: 0.0,
            iterations_run: 0,
            inertia_trace: vec![],
        };
        let x = Embedding::new(vec![1.0, 1.0]).unwrap();
        let got = cluster_posterior(&x, &clustering, 2.0).unwrap();
        let d: Vec<f64> = centers.iter().map(|c| euclid_dist(&x, c).unwrap()).collect();
        let expected = softmax_neg(&d, 2.0).unwrap();
        assert_eq!(got, expected);
    }
}
