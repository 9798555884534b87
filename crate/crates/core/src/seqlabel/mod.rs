//! Sequence-level revision of a teacher's per-step distributions.
//!
//! A decoding path picks one class per step; its likelihood is the product of
//! the chosen per-step probabilities. The sequence-level distribution at
//! `(t, k)` is the likelihood mass of paths with `π_t = k` divided by the
//! total mass of the considered paths. Over *all* paths it reduces to the
//! word-level distribution exactly, so the revision only carries information
//! when restricted to the top-K paths found by beam search. The revised label
//! mixes both levels with weight `α`; when the best path is less likely than
//! the threshold `r`, the word-level distribution is used unchanged.
//!
//! Everything here is computed in `f64`.

pub mod oracle;

use std::cmp::Ordering;

use crate::error::{Error, Result};

/// Largest `|A|^T` that [`enumerate_paths_exact`] will expand.
pub const ENUMERATION_LIMIT: u64 = 1_000_000;

const ROW_TOLERANCE: f64 = 1e-6;

/// Per-step probability rows `p_t` over the alphabet.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDistributions {
    steps: usize,
    classes: usize,
    probs: Vec<f64>,
}

impl StepDistributions {
    /// Validates that every row is a probability vector (within 1e-6).
    pub fn new(steps: usize, classes: usize, probs: Vec<f64>) -> Result<Self> {
        if steps == 0 || classes == 0 || probs.len() != steps * classes {
            return Err(Error::Dimension(format!(
                "{} probabilities cannot form {steps}×{classes} rows",
                probs.len()
            )));
        }
        for (t, row) in probs.chunks(classes).enumerate() {
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::Contract(format!("row {t} has a negative or non-finite entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_TOLERANCE {
                return Err(Error::Contract(format!("row {t} sums to {sum}")));
            }
        }
        Ok(Self {
            steps,
            classes,
            probs,
        })
    }

    /// Row-wise `softmax(logits / temperature)`, evaluated in `f64`.
    pub fn from_logits(steps: usize, classes: usize, logits: &[f32], temperature: f64) -> Result<Self> {
        if logits.len() != steps * classes || classes == 0 {
            return Err(Error::Dimension(format!(
                "{} logits cannot form {steps}×{classes} rows",
                logits.len()
            )));
        }
        if !(temperature > 0.0) {
            return Err(Error::Contract(format!("temperature {temperature} must be positive")));
        }
        let mut probs = Vec::with_capacity(logits.len());
        for row in logits.chunks(classes) {
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
            let exps: Vec<f64> = row.iter().map(|&v| ((v as f64 - max) / temperature).exp()).collect();
            let sum: f64 = exps.iter().sum();
            probs.extend(exps.iter().map(|e| e / sum));
        }
        Self::new(steps, classes, probs)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.probs[t * self.classes..(t + 1) * self.classes]
    }

    pub fn get(&self, t: usize, k: usize) -> f64 {
        self.probs[t * self.classes + k]
    }

    /// Number of distinct paths, `None` on overflow.
    pub fn path_count(&self) -> Option<u64> {
        (self.classes as u64).checked_pow(self.steps as u32)
    }

    /// Product of the chosen probabilities, multiplied left to right.
    pub fn likelihood(&self, path: &[usize]) -> f64 {
        path.iter()
            .enumerate()
            .fold(1.0, |acc, (t, &k)| acc * self.get(t, k))
    }

    /// Index of the most probable class per step.
    pub fn greedy_path(&self) -> Vec<usize> {
        (0..self.steps)
            .map(|t| {
                let row = self.row(t);
                (0..self.classes).fold(0, |best, k| if row[k] > row[best] { k } else { best })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodingPath {
    pub indices: Vec<usize>,
    pub likelihood: f64,
}

/// Paths sorted by descending likelihood, ties in ascending lexicographic order.
#[derive(Clone, Debug, PartialEq)]
pub struct PathSet {
    pub paths: Vec<DecodingPath>,
    pub total_mass: f64,
}

impl PathSet {
    fn from_sorted(paths: Vec<DecodingPath>) -> Self {
        let total_mass = paths.iter().map(|p| p.likelihood).sum();
        Self { paths, total_mass }
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn max_likelihood(&self) -> f64 {
        self.paths.first().map_or(0.0, |p| p.likelihood)
    }

    /// The first `k` paths.
    pub fn top(&self, k: usize) -> PathSet {
        Self::from_sorted(self.paths.iter().take(k).cloned().collect())
    }
}

fn path_order(a: &DecodingPath, b: &DecodingPath) -> Ordering {
    b.likelihood
        .partial_cmp(&a.likelihood)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.indices.cmp(&b.indices))
}

/// Every path with nonzero likelihood, by brute force.
pub fn enumerate_paths_exact(p: &StepDistributions) -> Result<PathSet> {
    let mut all = enumerate_all(p)?;
    all.paths.retain(|path| path.likelihood > 0.0);
    Ok(all)
}

/// Every path including zero-likelihood ones, in [`PathSet`] order.
pub fn enumerate_all(p: &StepDistributions) -> Result<PathSet> {
    let count = p
        .path_count()
        .filter(|&c| c <= ENUMERATION_LIMIT)
        .ok_or_else(|| {
            Error::Capacity(format!(
                "{}^{} paths exceed the enumeration limit of {ENUMERATION_LIMIT}",
                p.classes, p.steps
            ))
        })?;
    let mut paths = Vec::with_capacity(count as usize);
    let mut idx = vec![0usize; p.steps];
    for _ in 0..count {
        paths.push(DecodingPath {
            likelihood: p.likelihood(&idx),
            indices: idx.clone(),
        });
        // odometer increment, last step fastest => lexicographic order
        for t in (0..p.steps).rev() {
            idx[t] += 1;
            if idx[t] < p.classes {
                break;
            }
            idx[t] = 0;
        }
    }
    // stable sort keeps lexicographic order among equal likelihoods
    paths.sort_by(|a, b| b.likelihood.partial_cmp(&a.likelihood).unwrap_or(Ordering::Equal));
    Ok(PathSet::from_sorted(paths))
}

/// The `k` most likely paths by beam search with beam width `k`.
///
/// Path likelihood factorizes over steps, so every prefix of a global top-`k`
/// path is itself among the top-`k` prefixes and the search is exact. When
/// `k` exceeds the number of paths, all paths are returned. Zero-likelihood
/// paths are kept so exactly `min(k, |A|^T)` paths come back.
pub fn beam_search_topk(p: &StepDistributions, k: usize) -> Result<PathSet> {
    if k == 0 {
        return Err(Error::Contract("beam width must be at least 1".into()));
    }
    let mut beam = vec![DecodingPath {
        indices: Vec::with_capacity(p.steps),
        likelihood: 1.0,
    }];
    for t in 0..p.steps {
        let row = p.row(t);
        let mut next = Vec::with_capacity(beam.len() * p.classes);
        for prefix in &beam {
            for (c, &prob) in row.iter().enumerate() {
                let mut indices = prefix.indices.clone();
                indices.push(c);
                next.push(DecodingPath {
                    indices,
                    likelihood: prefix.likelihood * prob,
                });
            }
        }
        next.sort_by(path_order);
        next.truncate(k);
        beam = next;
    }
    Ok(PathSet::from_sorted(beam))
}

/// Per-step vote of `paths`: mass of paths with `π_t = k` over their total mass.
/// Returns `None` when the total mass is zero.
pub fn sequence_level(p: &StepDistributions, paths: &PathSet) -> Option<Vec<f64>> {
    if !(paths.total_mass > 0.0) {
        return None;
    }
    let mut votes = vec![0.0; p.steps * p.classes];
    for path in &paths.paths {
        for (t, &k) in path.indices.iter().enumerate() {
            votes[t * p.classes + k] += path.likelihood;
        }
    }
    votes.iter_mut().for_each(|v| *v /= paths.total_mass);
    Some(votes)
}

/// Revised teacher label.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqSoftLabel {
    /// Mixed distribution `(1 − α)·p + α·sequence_level`, one row per step.
    pub revised: StepDistributions,
    /// Top-K vote; `None` when the fallback fired.
    pub sequence_level: Option<Vec<f64>>,
    pub alpha: f64,
    pub k_beam: usize,
    pub threshold: f64,
    pub max_path_likelihood: f64,
    pub used_fallback: bool,
}

/// Mixes word-level rows with the top-`k` sequence-level vote.
///
/// Falls back to `p` itself when the best path likelihood is below `r` or the
/// top-`k` paths carry no mass.
pub fn revise_distribution(p: &StepDistributions, alpha: f64, k: usize, r: f64) -> Result<SeqSoftLabel> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Contract(format!("alpha {alpha} outside [0, 1]")));
    }
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Contract(format!("threshold {r} outside [0, 1]")));
    }
    let paths = beam_search_topk(p, k)?;
    let max_path_likelihood = paths.max_likelihood();
    let vote = sequence_level(p, &paths).filter(|_| max_path_likelihood >= r);
    let (revised, used_fallback) = match &vote {
        None => (p.clone(), true),
        Some(seq) => {
            let probs = p
                .probs
                .iter()
                .zip(seq)
                .map(|(&w, &s)| (1.0 - alpha) * w + alpha * s)
                .collect();
            (
                StepDistributions {
                    steps: p.steps,
                    classes: p.classes,
                    probs,
                },
                false,
            )
        }
    };
    Ok(SeqSoftLabel {
        revised,
        sequence_level: vote,
        alpha,
        k_beam: k,
        threshold: r,
        max_path_likelihood,
        used_fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_by_two() -> StepDistributions {
        StepDistributions::new(2, 2, vec![0.6, 0.4, 0.7, 0.3]).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn rows_must_normalize() {
        assert!(StepDistributions::new(1, 2, vec![0.5, 0.6]).is_err());
        assert!(StepDistributions::new(1, 2, vec![1.5, -0.5]).is_err());
        assert!(StepDistributions::new(2, 2, vec![0.5; 3]).is_err());
    }

    #[test]
    fn hand_enumeration() {
        let set = enumerate_paths_exact(&two_by_two()).unwrap();
        assert_eq!(set.len(), 4);
        assert!(close(set.total_mass, 1.0, 1e-12));
        let got: Vec<(Vec<usize>, f64)> = set
            .paths
            .iter()
            .map(|p| (p.indices.clone(), p.likelihood))
            .collect();
        let want = [
            (vec![0, 0], 0.42),
            (vec![1, 0], 0.28),
            (vec![0, 1], 0.18),
            (vec![1, 1], 0.12),
        ];
        for ((gi, gl), (wi, wl)) in got.iter().zip(&want) {
            assert_eq!(gi, wi);
            assert!(close(*gl, *wl, 1e-12));
        }
    }

    #[test]
    fn one_hot_rows_keep_a_single_path() {
        let p = StepDistributions::new(3, 2, vec![0., 1., 1., 0., 0., 1.]).unwrap();
        let set = enumerate_paths_exact(&p).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.paths[0].indices, vec![1, 0, 1]);
        assert_eq!(set.paths[0].likelihood, 1.0);
    }

    #[test]
    fn enumeration_guard() {
        let p = StepDistributions::new(5, 20, vec![0.05; 100]).unwrap();
        assert!(matches!(enumerate_paths_exact(&p), Err(Error::Capacity(_))));
    }

    #[test]
    fn beam_top2_of_hand_example() {
        let set = beam_search_topk(&two_by_two(), 2).unwrap();
        assert_eq!(set.paths[0].indices, vec![0, 0]);
        assert_eq!(set.paths[1].indices, vec![1, 0]);
        assert!(close(set.paths[0].likelihood, 0.42, 1e-12));
        assert!(close(set.paths[1].likelihood, 0.28, 1e-12));
    }

    #[test]
    fn beam_on_one_hot_rows() {
        // greedy path is all zeros; the runner-up is the lexicographically
        // smallest path differing in one step
        let p = StepDistributions::new(3, 3, vec![1., 0., 0., 1., 0., 0., 1., 0., 0.]).unwrap();
        let set = beam_search_topk(&p, 2).unwrap();
        assert_eq!(set.paths[0].indices, vec![0, 0, 0]);
        assert_eq!(set.paths[0].likelihood, 1.0);
        assert_eq!(set.paths[1].indices, vec![0, 0, 1]);
        let oracle = enumerate_all(&p).unwrap();
        assert_eq!(set, oracle.top(2));
    }

    #[test]
    fn beam_exhaustive_equals_enumeration() {
        let p = two_by_two();
        assert_eq!(
            beam_search_topk(&p, 4).unwrap(),
            enumerate_paths_exact(&p).unwrap()
        );
        assert_eq!(beam_search_topk(&p, 50).unwrap().len(), 4);
        assert!(beam_search_topk(&p, 0).is_err());
    }

    #[test]
    fn worked_revision_example() {
        let label = revise_distribution(&two_by_two(), 0.5, 2, 0.1).unwrap();
        assert!(!label.used_fallback);
        let seq = label.sequence_level.as_ref().unwrap();
        for (g, w) in seq.iter().zip([0.6, 0.4, 1.0, 0.0]) {
            assert!(close(*g, w, 1e-12), "{seq:?}");
        }
        for (g, w) in label.revised.probs().iter().zip([0.6, 0.4, 0.85, 0.15]) {
            assert!(close(*g, w, 1e-12));
        }
    }

    #[test]
    fn exhaustive_revision_is_identity() {
        let p = two_by_two();
        for alpha in [0.0, 0.3, 1.0] {
            let label = revise_distribution(&p, alpha, 4, 0.1).unwrap();
            for (g, w) in label.revised.probs().iter().zip(p.probs()) {
                assert!(close(*g, *w, 1e-12));
            }
        }
    }

    #[test]
    fn fallback_below_threshold() {
        // best path 0.2 * 0.25 = 0.05 < 0.1
        let p = StepDistributions::new(2, 5, vec![0.2, 0.2, 0.2, 0.2, 0.2, 0.25, 0.25, 0.25, 0.25, 0.0])
            .unwrap();
        let label = revise_distribution(&p, 0.5, 6, 0.1).unwrap();
        assert!(label.used_fallback);
        assert!(close(label.max_path_likelihood, 0.05, 1e-12));
        assert_eq!(label.revised, p);
        assert!(label.sequence_level.is_none());

        // exactly at the threshold keeps the revision
        let p = StepDistributions::new(2, 4, vec![0.25, 0.25, 0.25, 0.25, 0.2, 0.2, 0.2, 0.4]).unwrap();
        let label = revise_distribution(&p, 0.5, 6, 0.1).unwrap();
        assert!(close(label.max_path_likelihood, 0.1, 1e-12));
        assert!(!label.used_fallback);
    }

    #[test]
    fn alpha_extremes() {
        let p = StepDistributions::new(3, 3, vec![0.5, 0.3, 0.2, 0.1, 0.6, 0.3, 0.3, 0.3, 0.4]).unwrap();
        let zero = revise_distribution(&p, 0.0, 3, 0.0).unwrap();
        assert_eq!(zero.revised.probs(), p.probs());
        let greedy = revise_distribution(&p, 1.0, 1, 0.0).unwrap();
        let path = p.greedy_path();
        for (t, &best) in path.iter().enumerate() {
            for k in 0..3 {
                let want = if best == k { 1.0 } else { 0.0 };
                assert_eq!(greedy.revised.get(t, k), want);
            }
        }
    }

    #[test]
    fn invalid_parameters_rejected() {
        let p = two_by_two();
        assert!(revise_distribution(&p, 1.5, 2, 0.1).is_err());
        assert!(revise_distribution(&p, 0.5, 2, -0.1).is_err());
        assert!(revise_distribution(&p, 0.5, 0, 0.1).is_err());
    }
}
