use nwp_core::corpus::SplitTag;
use nwp_core::representer::{annotate_row, threshold_sweep, SupportType};
use nwp_core::{Corpus, SplitSpec};
use proptest::prelude::*;

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn rows() -> impl Strategy<Value = (Vec<f64>, u32)> {
    (2usize..12).prop_flat_map(|v| (prop::collection::vec(-12.0f64..12.0, v), 0..v as u32))
}

proptest! {
    #[test]
    fn alpha_structure((logits, y) in rows(), tau in 0.5f64..=1.0, gamma in 0.5f64..=1.0) {
        let p = softmax(&logits);
        let a = annotate_row(0, y, &p, tau);
        prop_assert!(a.alpha_sum.abs() <= 1e-9);
        prop_assert!(a.entries.iter().all(|e| (-1.0..=1.0).contains(&e.alpha) && e.alpha.abs() >= tau));
        prop_assert!(a.entries.iter().filter(|e| e.kind == SupportType::Type2).count() <= 1);
        let max_alpha = p.iter().enumerate().map(|(v, &q)| ((v == y as usize) as u8 as f64 - q).abs()).fold(0.0, f64::max);
        prop_assert!((a.score - max_alpha).abs() <= 1e-15);
        if a.is_memorized(gamma) {
            prop_assert!(!a.is_support());
        }
    }

    #[test]
    fn threshold_counts_never_increase(
        batch in prop::collection::vec(rows(), 1..40),
        mut grid in prop::collection::vec(0.01f64..=1.0, 1..12),
    ) {
        let annotations: Vec<_> = batch.iter().enumerate().map(|(i, (z, y))| annotate_row(i, *y, &softmax(z), 0.9)).collect();
        grid.sort_by(f64::total_cmp);
        let sweep = threshold_sweep(&annotations, &grid).unwrap();
        prop_assert!(sweep.windows(2).all(|w| w[1].support <= w[0].support));
    }

    #[test]
    fn split_is_disjoint_and_exhaustive(n in 0usize..300, seed in any::<u64>(), a in 1u32..10, b in 0u32..5, c in 0u32..5) {
        let total = (a + b + c) as f64;
        let spec = SplitSpec::new([a as f64 / total, b as f64 / total, c as f64 / total], seed).unwrap();
        let ids: Vec<usize> = (0..n).collect();
        let tags = spec.assign(&ids);
        prop_assert_eq!(tags.len(), n);
        let sizes = spec.sizes(n);
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        for (tag, want) in [SplitTag::Train, SplitTag::Valid, SplitTag::Test].into_iter().zip(sizes) {
            prop_assert_eq!(tags.iter().filter(|&&t| t == tag).count(), want);
        }
        prop_assert_eq!(spec.assign(&ids), tags);
    }

    #[test]
    fn corpus_text_round_trips(docs in prop::collection::vec(prop::collection::vec(0u32..50, 2..20), 1..10)) {
        let corpus = Corpus::from_documents(docs.clone(), 50, 8).unwrap();
        let text = corpus.to_text();
        let again = Corpus::parse(&text, 50, 8, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(again.docs(), &docs[..]);
        prop_assert_eq!(again.to_text(), text);
        prop_assert_eq!(corpus.len(), docs.iter().map(|d| d.len() - 1).sum::<usize>());
    }
}
