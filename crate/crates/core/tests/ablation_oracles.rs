mod common;

use common::fixture;
use nwp_core::ablation::{build_removal_set, AblationContext, AblationPlan, Method, Regime};
use nwp_core::headfit::head_only_retrain;
use nwp_core::representer::{annotate_row, compute_alphas};
use nwp_core::train::Schedule;

#[test]
fn soft_retention_frequencies_follow_the_scores() {
    let scores = [0.0, 0.03, 0.1, 0.25, 0.4, 0.5, 0.6, 0.75, 0.9, 0.97, 1.0, 0.33];
    let annotations: Vec<_> = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            // two-token vocab: the score is 1 - p(target)
            annotate_row(i, 0, &[1.0 - s, s], 0.9)
        })
        .collect();
    let draws = 1000;
    let mut kept = vec![0usize; scores.len()];
    for seed in 0..draws {
        for id in build_removal_set(&annotations, Method::Soft, seed) {
            kept[id] += 1;
        }
    }
    let mut z2 = 0.0;
    for (a, &k) in annotations.iter().zip(&kept) {
        let (s, freq) = (a.score, k as f64 / draws as f64);
        let sigma = (s * (1.0 - s) / draws as f64).sqrt();
        assert!((freq - s).abs() <= 3.0 * sigma + 1e-12, "score {s}: kept {freq}");
        if sigma > 0.0 {
            z2 += ((freq - s) / sigma).powi(2);
        }
    }
    // ten non-degenerate scores: chi-square with 10 dof, 99.9% quantile 29.6
    assert!(z2 < 29.6, "{z2}");
}

#[test]
fn heads_only_results_match_a_from_scratch_recount() {
    let f = fixture();
    let tau = 0.9;
    let index = compute_alphas(&f.stationary, &f.corpus, &f.split.train, tau, 0.5).unwrap();
    let schedule = Schedule { steps: 20, batch_windows: 8, eval_every: 10, ..Default::default() };
    let ctx = AblationContext::new(&f.corpus, &f.stationary, f.split.clone(), index.clone(), f.fit, schedule).unwrap();
    for method in Method::ALL {
        let plan = AblationPlan { method, regime: Regime::HeadsOnly, seed: 2, warm_start: false };
        let result = ctx.run(&plan).unwrap();
        let retained = build_removal_set(&index.annotations, method, 2);
        assert_eq!(result.retained, retained.len());
        let (retrained, _) = head_only_retrain(&f.stationary, &f.corpus, &retained, &f.fit, false).unwrap();
        let recount = compute_alphas(&retrained, &f.corpus, &f.split.train, tau, 0.5).unwrap();
        assert_eq!(result.original_support_after, recount.support_count(), "{method:?}");
        let test = retrained.mean_nll(&f.corpus, &f.split.test).unwrap();
        assert!((result.test_loss - test).abs() <= 1e-9, "{method:?}: {} vs {test}", result.test_loss);
    }
}

#[test]
fn hard_and_random_retain_equal_counts() {
    let f = fixture();
    let index = compute_alphas(&f.stationary, &f.corpus, &f.split.train, 0.9, 0.5).unwrap();
    let hard = build_removal_set(&index.annotations, Method::Hard, 0);
    for seed in 0..5 {
        assert_eq!(build_removal_set(&index.annotations, Method::Random, seed).len(), hard.len());
    }
    assert_eq!(hard, index.support_ids());
}
