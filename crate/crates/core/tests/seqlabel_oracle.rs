use kdlt::seqlabel::{beam_search_topk, oracle, revise_distribution, StepDistributions};
use proptest::prelude::*;

/// Row-stochastic `steps × classes`; a zero weight row becomes uniform.
fn distributions(max_steps: usize, max_classes: usize) -> impl Strategy<Value = StepDistributions> {
    (1..=max_steps, 2..=max_classes).prop_flat_map(|(t, a)| {
        prop::collection::vec(prop_oneof![Just(1.0f64), 0.0f64..1.0], t * a).prop_map(move |raw| {
            let mut probs = raw;
            for row in probs.chunks_mut(a) {
                let s: f64 = row.iter().sum();
                if s == 0.0 {
                    row.iter_mut().for_each(|v| *v = 1.0 / a as f64);
                } else {
                    row.iter_mut().for_each(|v| *v /= s);
                }
            }
            StepDistributions::new(t, a, probs).unwrap()
        })
    })
}

/// Every path likelihood, sorted descending.
fn brute_likelihoods(p: &StepDistributions) -> Vec<f64> {
    let (t, a) = (p.steps(), p.classes());
    let mut out = Vec::new();
    let mut idx = vec![0usize; t];
    loop {
        out.push((0..t).map(|s| p.get(s, idx[s])).product());
        let mut s = t;
        loop {
            if s == 0 {
                out.sort_by(|x: &f64, y| y.total_cmp(x));
                return out;
            }
            s -= 1;
            idx[s] += 1;
            if idx[s] < a {
                break;
            }
            idx[s] = 0;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn beam_matches_brute_force_topk(p in distributions(5, 6), k in 1usize..=8) {
        let all = brute_likelihoods(&p);
        let got = beam_search_topk(&p, k).unwrap();
        prop_assert_eq!(got.len(), k.min(all.len()));
        for (path, want) in got.paths.iter().zip(&all) {
            prop_assert!((path.likelihood - want).abs() <= 1e-12, "{} vs {}", path.likelihood, want);
            prop_assert!((p.likelihood(&path.indices) - path.likelihood).abs() <= 1e-15);
        }
        let mut seen: Vec<&Vec<usize>> = got.paths.iter().map(|q| &q.indices).collect();
        seen.sort();
        seen.dedup();
        prop_assert_eq!(seen.len(), got.len());
    }

    #[test]
    fn exhaustive_revision_is_identity(p in distributions(4, 4), alpha in 0.0f64..=1.0) {
        let k = p.path_count().unwrap() as usize;
        let label = revise_distribution(&p, alpha, k, 0.0).unwrap();
        prop_assert!(!label.used_fallback);
        for (a, b) in label.revised.probs().iter().zip(p.probs()) {
            prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn fallback_exactly_below_threshold(p in distributions(4, 4), r in 0.0f64..0.6, k in 1usize..6) {
        let best = brute_likelihoods(&p)[0];
        let label = revise_distribution(&p, 0.5, k, r).unwrap();
        prop_assert_eq!(label.used_fallback, best < r);
        if label.used_fallback {
            prop_assert_eq!(label.revised.probs(), p.probs());
        }
    }

    #[test]
    fn revised_rows_are_distributions(p in distributions(4, 5), alpha in 0.0f64..=1.0, k in 1usize..8) {
        let label = revise_distribution(&p, alpha, k, 0.0).unwrap();
        for t in 0..p.steps() {
            let s: f64 = label.revised.row(t).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn worked_example_second_row() {
    // p1 = (0.6, 0.4), p2 = (0.7, 0.3); top-2 paths (0,0) 0.42 and (1,0) 0.28
    // vote class 0 at t=2 with weight 1, so the row mixes to (0.85, 0.15).
    let p = StepDistributions::new(2, 2, vec![0.6, 0.4, 0.7, 0.3]).unwrap();
    let label = revise_distribution(&p, 0.5, 2, 0.1).unwrap();
    let row = label.revised.row(1);
    assert!((row[0] - 0.85).abs() < 1e-4 && (row[1] - 0.15).abs() < 1e-4, "{row:?}");
}

#[test]
fn library_oracle_runners_pass() {
    assert!(oracle::beam_trials(500, 11).unwrap().passed());
    assert!(oracle::identity_trials(200, 12).unwrap().passed());
    assert!(oracle::fallback_trials(200, 13).unwrap().passed());
}
