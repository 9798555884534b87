//! Randomized cross-checks of beam search and label revision against brute
//! force. Used by the `oracle-check` subcommand and the acceptance suite.

use super::{beam_search_topk, enumerate_all, revise_distribution, StepDistributions};
use crate::error::Result;
use crate::rng::{derive_seed, SeededRng};

/// Random per-step distributions with `1..=max_steps` steps and
/// `2..=max_classes` classes. About one row in five is uniform so that
/// likelihood ties occur.
pub fn random_instance(rng: &mut SeededRng, max_steps: usize, max_classes: usize) -> StepDistributions {
    let steps = 1 + rng.below(max_steps as u64) as usize;
    let classes = 2 + rng.below(max_classes as u64 - 1) as usize;
    let scale = rng.uniform(0.5, 4.0);
    let mut probs = Vec::with_capacity(steps * classes);
    for _ in 0..steps {
        if rng.below(5) == 0 {
            probs.extend(std::iter::repeat_n(1.0 / classes as f64, classes));
            continue;
        }
        let logits: Vec<f64> = (0..classes).map(|_| scale * rng.gaussian()).collect();
        let max = logits.iter().cloned().fold(f64::MIN, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        probs.extend(exps.iter().map(|e| e / sum));
    }
    StepDistributions::new(steps, classes, probs).expect("rows are normalized")
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OracleOutcome {
    pub trials: usize,
    pub failures: usize,
    pub max_deviation: f64,
}

impl OracleOutcome {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    fn record(&mut self, deviation: f64, ok: bool) {
        self.trials += 1;
        self.max_deviation = self.max_deviation.max(deviation);
        self.failures += !ok as usize;
    }
}

/// Beam search against the brute-force top `k`. Paths must agree wherever
/// their likelihoods are not tied. Returns the largest likelihood deviation.
pub fn check_beam(p: &StepDistributions, k: usize) -> Result<(f64, bool)> {
    let beam = beam_search_topk(p, k)?;
    let brute = enumerate_all(p)?.top(k);
    if beam.len() != brute.len() {
        return Ok((f64::INFINITY, false));
    }
    let mut deviation = 0.0f64;
    let mut ok = true;
    for (b, e) in beam.paths.iter().zip(&brute.paths) {
        let d = (b.likelihood - e.likelihood).abs();
        deviation = deviation.max(d);
        let exact = (p.likelihood(&b.indices) - b.likelihood).abs();
        deviation = deviation.max(exact);
        if b.indices != e.indices && d > 1e-15 {
            ok = false;
        }
    }
    Ok((deviation, ok && deviation <= 1e-12))
}

/// Revision over every path must return the word-level rows.
pub fn check_identity(p: &StepDistributions, alpha: f64) -> Result<(f64, bool)> {
    let all = p.path_count().expect("small instance") as usize;
    let label = revise_distribution(p, alpha, all, 0.0)?;
    let deviation = label
        .revised
        .probs()
        .iter()
        .zip(p.probs())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok((deviation, deviation <= 1e-9))
}

/// Fallback fires exactly when the greedy path's likelihood is below `r`.
pub fn check_fallback(p: &StepDistributions, k: usize, r: f64) -> Result<bool> {
    let best: f64 = (0..p.steps())
        .map(|t| p.row(t).iter().cloned().fold(0.0, f64::max))
        .product();
    let label = revise_distribution(p, 0.5, k, r)?;
    Ok(label.used_fallback == (best < r) && label.max_path_likelihood == best)
}

/// Beam-vs-enumeration on `trials` instances with `T ≤ 5`, `|A| ≤ 6`, `K ≤ 8`.
pub fn beam_trials(trials: usize, seed: u64) -> Result<OracleOutcome> {
    let mut out = OracleOutcome::default();
    for i in 0..trials {
        let mut rng = SeededRng::new(derive_seed(seed, i as u64));
        let p = random_instance(&mut rng, 5, 6);
        let k = 1 + rng.below(8) as usize;
        let (d, ok) = check_beam(&p, k)?;
        out.record(d, ok);
    }
    Ok(out)
}

/// Exhaustive-revision identity on `trials` instances with `T ≤ 4`, `|A| ≤ 4`.
pub fn identity_trials(trials: usize, seed: u64) -> Result<OracleOutcome> {
    let mut out = OracleOutcome::default();
    for i in 0..trials {
        let mut rng = SeededRng::new(derive_seed(seed, i as u64));
        let p = random_instance(&mut rng, 4, 4);
        let alpha = rng.uniform(0.0, 1.0);
        let (d, ok) = check_identity(&p, alpha)?;
        out.record(d, ok);
    }
    Ok(out)
}

/// Threshold fallback on random instances, including `r` set exactly to the
/// best path likelihood (must not fall back) and just above it (must).
pub fn fallback_trials(trials: usize, seed: u64) -> Result<OracleOutcome> {
    let mut out = OracleOutcome::default();
    for i in 0..trials {
        let mut rng = SeededRng::new(derive_seed(seed, i as u64));
        let p = random_instance(&mut rng, 5, 6);
        let k = 1 + rng.below(8) as usize;
        let best = beam_search_topk(&p, 1)?.max_likelihood();
        let r = match i % 3 {
            0 => rng.uniform(0.0, 1.0) * best.min(1.0) * 2.0,
            1 => best,
            _ => (best * (1.0 + 1e-9)).min(1.0),
        };
        let ok = check_fallback(&p, k, r.min(1.0))?;
        out.record(0.0, ok);
    }
    Ok(out)
}
