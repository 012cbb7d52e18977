//! Property tests for the numeric and sampling invariants.

use fewshot_hitl::acquisition::{
    score_bald, score_margin, score_max_entropy, score_min_confidence, score_variation_ratio,
};
use fewshot_hitl::clustering::{kmeans, KMeansConfig};
use fewshot_hitl::data::{perturb_ensemble, sample_episode, synth_generate, SynthParams, TaskShape};
use fewshot_hitl::numerics::{entropy, euclid_dist, softmax_neg, Embedding, ProbVec};
use fewshot_hitl::protonet::{cluster_refine_init, PrototypeSet};
use proptest::prelude::*;

fn embedding(dim: usize) -> impl Strategy<Value = Embedding> {
    prop::collection::vec(-50.0..50.0f64, dim).prop_map(|v| Embedding::new(v).unwrap())
}

fn probvec(n: usize) -> impl Strategy<Value = ProbVec> {
    prop::collection::vec(1e-6..1.0f64, n).prop_map(|v| {
        let s: f64 = v.iter().sum();
        ProbVec::new(v.into_iter().map(|x| x / s).collect()).unwrap()
    })
}

fn argsort_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    idx
}

proptest! {
    #[test]
    fn softmax_always_yields_valid_distribution(
        d in prop::collection::vec(-1e6..1e6f64, 1..12),
        t in 0.01..50.0f64,
    ) {
        let p = softmax_neg(&d, t).unwrap();
        prop_assert_eq!(p.len(), d.len());
        prop_assert!(p.probs().iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!((p.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn softmax_is_shift_invariant(
        d in prop::collection::vec(-10.0..10.0f64, 1..10),
        t in 0.1..10.0f64,
        c in -5.0..5.0f64,
    ) {
        let base = softmax_neg(&d, t).unwrap();
        let shifted_d: Vec<f64> = d.iter().map(|x| x + c).collect();
        let shifted = softmax_neg(&shifted_d, t).unwrap();
        for (a, b) in base.probs().iter().zip(shifted.probs()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn entropy_stays_within_bounds(p in (2usize..8).prop_flat_map(probvec)) {
        let h = entropy(&p);
        prop_assert!(h >= 0.0);
        prop_assert!(h <= (p.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn euclid_satisfies_triangle_inequality(
        (a, b, c) in (1usize..6).prop_flat_map(|d| (embedding(d), embedding(d), embedding(d))),
    ) {
        let ab = euclid_dist(&a, &b).unwrap();
        let bc = euclid_dist(&b, &c).unwrap();
        let ac = euclid_dist(&a, &c).unwrap();
        prop_assert!(ac <= ab + bc + 1e-9);
        prop_assert!((euclid_dist(&b, &a).unwrap() - ab).abs() <= 1e-15);
    }

    #[test]
    fn prototype_mean_is_order_independent(
        (xs, order) in (1usize..5)
            .prop_flat_map(|d| prop::collection::vec(embedding(d), 2..9))
            .prop_flat_map(|xs| {
                let n = xs.len();
                (Just(xs), Just((0..n).collect::<Vec<usize>>()).prop_shuffle())
            }),
    ) {
        let mut forward = PrototypeSet::from_support(&[vec![xs[0].clone()]]).unwrap();
        for x in &xs[1..] {
            forward.update(0, x).unwrap();
        }
        let mut permuted = PrototypeSet::from_support(&[vec![xs[order[0]].clone()]]).unwrap();
        for &i in &order[1..] {
            permuted.update(0, &xs[i]).unwrap();
        }
        for (a, b) in forward.prototype(0).values().iter().zip(permuted.prototype(0).values()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn predict_is_posterior_argmax_and_temperature_invariant(
        (protos, x) in (1usize..4, 2usize..6).prop_flat_map(|(d, n)| {
            (prop::collection::vec(embedding(d), n..=n), embedding(d))
        }),
        t1 in 0.1..5.0f64,
        t2 in 0.1..5.0f64,
    ) {
        let support: Vec<Vec<Embedding>> = protos.iter().map(|p| vec![p.clone()]).collect();
        let set = PrototypeSet::from_support(&support).unwrap();
        let pred = set.predict(&x).unwrap();
        prop_assert_eq!(pred, set.posterior(&x, t1).unwrap().argmax());
        prop_assert_eq!(pred, set.posterior(&x, t2).unwrap().argmax());
    }

    #[test]
    fn cluster_refine_preserves_class_structure(
        (protos, pool) in (1usize..4, 2usize..5).prop_flat_map(|(d, n)| {
            (prop::collection::vec(embedding(d), n..=n), prop::collection::vec(embedding(d), 1..20))
        }),
        seed in any::<u64>(),
    ) {
        let support: Vec<Vec<Embedding>> = protos.iter().map(|p| vec![p.clone()]).collect();
        let set = PrototypeSet::from_support(&support).unwrap();
        let refined = cluster_refine_init(&set, &pool, &KMeansConfig::default(), seed).unwrap();
        prop_assert_eq!(refined.n_classes(), set.n_classes());
        for c in 0..set.n_classes() {
            prop_assert_eq!(refined.count(c), set.count(c));
        }
    }

    #[test]
    fn bald_is_bounded_by_mean_entropy(
        members in (2usize..6, 2usize..6).prop_flat_map(|(e, n)| {
            prop::collection::vec(probvec(n), e..=e)
        }),
    ) {
        let sheet = score_bald(std::slice::from_ref(&members)).unwrap();
        let mean = ProbVec::mean(&members).unwrap();
        let h_mean = entropy(&mean);
        prop_assert!(sheet.scores[0] >= -1e-9);
        prop_assert!(sheet.scores[0] <= h_mean + 1e-9);
        prop_assert!(h_mean <= (mean.len() as f64).ln() + 1e-9);
    }

    #[test]
    fn variation_ratio_is_bounded(
        preds in (2usize..9).prop_flat_map(|e| {
            prop::collection::vec(0usize..5, e..=e)
        }),
    ) {
        let e = preds.len();
        let sheet = score_variation_ratio(std::slice::from_ref(&preds)).unwrap();
        prop_assert!(sheet.scores[0] >= 0.0);
        prop_assert!(sheet.scores[0] <= 1.0 - 1.0 / e as f64);
    }

    #[test]
    fn two_class_uncertainty_scores_rank_identically(
        ps in prop::collection::vec(0.001..0.999f64, 2..10),
    ) {
        let posteriors: Vec<ProbVec> = ps
            .iter()
            .map(|&p| ProbVec::new(vec![p, 1.0 - p]).unwrap())
            .collect();
        let confidence = score_min_confidence(&posteriors);
        let margin = score_margin(&posteriors).unwrap();
        let ent = score_max_entropy(&posteriors);
        let rank = argsort_desc(&confidence.scores);
        prop_assert_eq!(&rank, &argsort_desc(&margin.scores));
        prop_assert_eq!(&rank, &argsort_desc(&ent.scores));
    }

    #[test]
    fn per_instance_scorers_commute_with_permutation(
        (posteriors, order) in (2usize..6)
            .prop_flat_map(|n| prop::collection::vec(probvec(n), 2..8))
            .prop_flat_map(|ps| {
                let n = ps.len();
                (Just(ps), Just((0..n).collect::<Vec<usize>>()).prop_shuffle())
            }),
    ) {
        let permuted: Vec<ProbVec> = order.iter().map(|&i| posteriors[i].clone()).collect();
        for scores in [
            (score_min_confidence(&posteriors).scores, score_min_confidence(&permuted).scores),
            (score_margin(&posteriors).unwrap().scores, score_margin(&permuted).unwrap().scores),
            (score_max_entropy(&posteriors).scores, score_max_entropy(&permuted).scores),
        ] {
            for (pos, &src) in order.iter().enumerate() {
                prop_assert_eq!(scores.1[pos], scores.0[src]);
            }
        }
    }

    #[test]
    fn kmeans_is_deterministic_and_internally_consistent(
        (points, k) in (1usize..4)
            .prop_flat_map(|d| prop::collection::vec(embedding(d), 3..25))
            .prop_flat_map(|pts| {
                let n = pts.len();
                (Just(pts), 1..=n.min(4))
            }),
        seed in any::<u64>(),
    ) {
        let cfg = KMeansConfig::default();
        let a = kmeans(&points, k, None, &cfg, seed).unwrap();
        let b = kmeans(&points, k, None, &cfg, seed).unwrap();
        prop_assert_eq!(&a.centers, &b.centers);
        prop_assert_eq!(&a.assignment, &b.assignment);
        prop_assert_eq!(a.inertia.to_bits(), b.inertia.to_bits());

        for w in a.inertia_trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9 * (1.0 + w[0]));
        }
        // Every point sits in its nearest cluster.
        for (p, &assigned) in points.iter().zip(&a.assignment) {
            let d_assigned = euclid_dist(p, &a.centers[assigned]).unwrap();
            for c in &a.centers {
                prop_assert!(d_assigned <= euclid_dist(p, c).unwrap() + 1e-9);
            }
        }
        // At convergence, non-empty centers are the means of their points.
        if a.iterations_run < cfg.max_iter {
            let dim = points[0].dim();
            for j in 0..k {
                let members: Vec<&Embedding> = points
                    .iter()
                    .zip(&a.assignment)
                    .filter(|(_, &c)| c == j)
                    .map(|(p, _)| p)
                    .collect();
                if members.is_empty() {
                    continue;
                }
                for d in 0..dim {
                    let mean: f64 = members.iter().map(|m| m.values()[d]).sum::<f64>()
                        / members.len() as f64;
                    prop_assert!((a.centers[j].values()[d] - mean).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn perturbation_never_touches_member_zero(
        (classes, per_class, members) in (1usize..4, 2usize..5, 2usize..5),
        sigma in 0.0..2.0f64,
        seed in any::<u64>(),
    ) {
        let ds = synth_generate(&SynthParams {
            classes,
            per_class,
            dim: 3,
            center_scale: 1.0,
            class_noise: 0.5,
            seed: 17,
        })
        .unwrap();
        let ens = perturb_ensemble(&ds, members, sigma, seed).unwrap();
        for (orig, pert) in ds.instances().iter().zip(ens.instances()) {
            prop_assert_eq!(&orig.members[0], &pert.members[0]);
            prop_assert_eq!(pert.members.len(), members);
        }
    }
}

/// Episode disjointness and per-class counts over many random sampling
/// configurations (seeded scan rather than shrink-driven cases: the
/// invariant is cheap and the input space is small).
#[test]
fn episode_sampling_counts_and_disjointness_hold() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed);
    for _ in 0..10_000 {
        let ways = rng.gen_range(2..=4);
        let shots = rng.gen_range(1..=3);
        let query = rng.gen_range(1..=3);
        let holdout = rng.gen_range(0..=2);
        let shape = TaskShape {
            ways,
            shots,
            query_per_class: query,
            holdout_per_class: holdout,
        };
        let classes = ways + rng.gen_range(0..=2);
        let per_class = shape.per_class_need() + rng.gen_range(0..=3);
        let ds = synth_generate(&SynthParams {
            classes,
            per_class,
            dim: 2,
            center_scale: 1.0,
            class_noise: 0.3,
            seed: rng.gen(),
        })
        .unwrap();
        let ep = sample_episode(&ds, &shape, rng.gen()).unwrap();

        assert_eq!(ep.support.len(), ways);
        assert!(ep.support.iter().all(|s| s.len() == shots));
        assert_eq!(ep.query.len(), ways * query);
        assert_eq!(ep.holdout.len(), ways * holdout);
        for c in 0..ways {
            assert_eq!(ep.query.iter().filter(|i| i.label == c).count(), query);
            assert_eq!(ep.holdout.iter().filter(|i| i.label == c).count(), holdout);
        }
        let mut ids = std::collections::HashSet::new();
        for inst in ep
            .support
            .iter()
            .flatten()
            .chain(ep.query.iter())
            .chain(ep.holdout.iter())
        {
            assert!(ids.insert(inst.id.clone()));
        }
    }
}
