//! Scalar and vector primitives shared by every other module.
//!
//! All operations here are pure functions over validated values: an
//! [`Embedding`] is finite and non-empty, a [`ProbVec`] is a normalized
//! probability distribution. Constructing the types checks the invariants
//! once so downstream code never re-validates.

use crate::error::{Error, Result};

/// Tolerance on the sum of a probability vector.
pub const PROB_SUM_TOL: f64 = 1e-12;

/// A fixed-dimension real vector representing one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Wraps raw coordinates, rejecting empty or non-finite input.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty { what: "embedding" });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "embedding" });
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// A probability distribution over classes or clusters.
///
/// Entries are in `[0, 1]` and sum to 1 within [`PROB_SUM_TOL`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVec(Vec<f64>);

impl ProbVec {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty { what: "probability vector" });
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidProbVec(format!(
                "entry {p} outside [0, 1]"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::InvalidProbVec(format!(
                "entries sum to {sum}, expected 1"
            )));
        }
        Ok(Self(probs))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    /// Index of the most probable entry, ties broken by lowest index.
    pub fn argmax(&self) -> usize {
        argmax_tiebreak(&self.0).expect("ProbVec is non-empty and finite")
    }

    /// Element-wise arithmetic mean of several distributions of equal length.
    pub fn mean(members: &[ProbVec]) -> Result<ProbVec> {
        let first = members
            .first()
            .ok_or(Error::Empty { what: "probability vector list" })?;
        let n = first.len();
        let mut acc = vec![0.0; n];
        for m in members {
            if m.len() != n {
                return Err(Error::DimensionMismatch { left: n, right: m.len() });
            }
            for (a, p) in acc.iter_mut().zip(m.probs()) {
                *a += p;
            }
        }
        let e = members.len() as f64;
        ProbVec::new(acc.into_iter().map(|a| a / e).collect())
    }
}

/// Euclidean distance between two embeddings of the same dimension.
pub fn euclid_dist(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch { left: a.dim(), right: b.dim() });
    }
    let sq: f64 = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sq.sqrt())
}

/// Softmax over negated distances: `p_i = exp(-d_i/T) / sum_j exp(-d_j/T)`.
///
/// Computed with max-subtraction so arbitrarily large distances cannot
/// overflow or produce NaN.
pub fn softmax_neg(distances: &[f64], temperature: f64) -> Result<ProbVec> {
    if distances.is_empty() {
        return Err(Error::Empty { what: "distance list" });
    }
    if distances.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite { what: "distance list" });
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    let scores: Vec<f64> = distances.iter().map(|d| -d / temperature).collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    ProbVec::new(exps.into_iter().map(|e| e / total).collect())
}

/// Shannon entropy in nats, with `0 * ln 0` taken as 0.
pub fn entropy(p: &ProbVec) -> f64 {
    p.probs()
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| -x * x.ln())
        .sum()
}

/// Index of the maximum score, ties broken by lowest index.
pub fn argmax_tiebreak(scores: &[f64]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::Empty { what: "score list" });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { what: "score list" });
    }
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if *s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn emb(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    #[test]
    fn euclid_identity_is_zero() {
        assert_eq!(euclid_dist(&emb(&[1.0, 2.0, 3.0]), &emb(&[1.0, 2.0, 3.0])).unwrap(), 0.0);
    }

    #[test]
    fn euclid_pythagorean_triple() {
        assert_eq!(euclid_dist(&emb(&[0.0, 0.0]), &emb(&[3.0, 4.0])).unwrap(), 5.0);
    }

    #[test]
    fn euclid_matches_direct_formula() {
        // Oracle: evaluate sqrt((1-2)^2 + (1-3)^2) directly.
        let expected = ((1.0f64 - 2.0).powi(2) + (1.0f64 - 3.0).powi(2)).sqrt();
        let got = euclid_dist(&emb(&[1.0, 1.0]), &emb(&[2.0, 3.0])).unwrap();
        assert_abs_diff_eq!(got, expected, epsilon = 1e-15);
        assert_abs_diff_eq!(got, 2.236_067_977_499_79, epsilon = 1e-12);
    }

    #[test]
    fn euclid_rejects_dimension_mismatch() {
        let err = euclid_dist(&emb(&[1.0]), &emb(&[1.0, 2.0])).unwrap_err();
        match err {
            Error::DimensionMismatch { left, right } => {
                assert_eq!((left, right), (1, 2));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn softmax_symmetric_input() {
        let p = softmax_neg(&[5.0, 5.0], 1.0).unwrap();
        assert_eq!(p.probs(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_hand_evaluated() {
        // exp(0) = 1 and exp(-ln 2) = 1/2, so probabilities are 2/3 and 1/3.
        let p = softmax_neg(&[0.0, 2f64.ln()], 1.0).unwrap();
        assert_abs_diff_eq!(p.probs()[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.probs()[1], 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn softmax_survives_huge_distance_gap() {
        let p = softmax_neg(&[0.0, 1000.0], 1.0).unwrap();
        assert_eq!(p.probs()[0], 1.0);
        assert!(p.probs()[1].abs() < 1e-300);
    }

    #[test]
    fn softmax_rejects_nonpositive_temperature() {
        assert!(matches!(softmax_neg(&[1.0], 0.0), Err(Error::Config(_))));
        assert!(matches!(softmax_neg(&[1.0], -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn entropy_degenerate_distribution() {
        let p = ProbVec::new(vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(entropy(&p), 0.0);
    }

    #[test]
    fn entropy_uniform_is_ln_n() {
        let p = ProbVec::new(vec![0.2; 5]).unwrap();
        assert_abs_diff_eq!(entropy(&p), 5f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn entropy_hand_evaluated() {
        // -(0.5 ln 0.5 + 2 * 0.25 ln 0.25) = 1.5 ln 2
        let p = ProbVec::new(vec![0.5, 0.25, 0.25]).unwrap();
        assert_abs_diff_eq!(entropy(&p), 1.5 * 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn argmax_unique_maximum() {
        assert_eq!(argmax_tiebreak(&[0.1, 0.9, 0.4]).unwrap(), 1);
    }

    #[test]
    fn argmax_tie_takes_lowest_index() {
        assert_eq!(argmax_tiebreak(&[0.7, 0.7, 0.2]).unwrap(), 0);
        assert_eq!(argmax_tiebreak(&[-1.0, -1.0, -1.0]).unwrap(), 0);
    }

    #[test]
    fn argmax_rejects_empty() {
        assert!(matches!(argmax_tiebreak(&[]), Err(Error::Empty { .. })));
    }

    #[test]
    fn probvec_rejects_bad_sum_and_range() {
        assert!(ProbVec::new(vec![0.5, 0.6]).is_err());
        assert!(ProbVec::new(vec![1.2, -0.2]).is_err());
        assert!(ProbVec::new(vec![]).is_err());
    }

    #[test]
    fn probvec_mean_averages_elementwise() {
        let a = ProbVec::new(vec![1.0, 0.0]).unwrap();
        let b = ProbVec::new(vec![0.0, 1.0]).unwrap();
        let m = ProbVec::mean(&[a, b]).unwrap();
        assert_eq!(m.probs(), &[0.5, 0.5]);
    }

    #[test]
    fn embedding_rejects_nan_and_empty() {
        assert!(Embedding::new(vec![f64::NAN]).is_err());
        assert!(Embedding::new(vec![f64::INFINITY, 0.0]).is_err());
        assert!(Embedding::new(vec![]).is_err());
    }
}
