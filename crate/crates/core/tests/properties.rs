//! Property tests for the numeric, loss, augmentation and metric invariants.

mod common;

use std::collections::BTreeMap;

use mracl::augment::{extract_motion_phrase, make_augmented_pairs, AmbiguityFilter, AnnotationRecord, Caption, Lexicon};
use mracl::fusion::ToyModel;
use mracl::grid::BinaryMask;
use mracl::losses::{mracl_loss, ContrastiveBatch, LossHyper, MarginUnit};
use mracl::metrics::{anisotropy_histogram, iou, miou, oiou, prec_at};
use mracl::numcore::{l2_normalize, stable_arccos};
use mracl::similarity::{angular_sim, angular_sim_grad, cosine_sim_grad};
use proptest::prelude::*;

fn vec_strategy(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, dim).prop_filter("non-degenerate", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3)
}

fn batch_strategy() -> impl Strategy<Value = ContrastiveBatch> {
    (1usize..4, 1usize..4, any::<u64>()).prop_map(|(n, k, seed)| common::random_batch(n, k, 5, &mut common::rng(seed)))
}

fn mask_strategy(n: usize) -> impl Strategy<Value = BinaryMask> {
    prop::collection::vec(any::<bool>(), n * n).prop_map(move |bits| BinaryMask::from_fn(n, n, |i, j| bits[i * n + j]))
}

proptest! {
    #[test]
    fn normalize_fixes_unit_vectors(v in vec_strategy(6)) {
        let u = l2_normalize(&v).unwrap().into_inner();
        let again = l2_normalize(&u).unwrap().into_inner();
        for (a, b) in u.iter().zip(&again) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn arccos_is_decreasing(a in -1.5f64..1.5, b in -1.5f64..1.5) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(stable_arccos(lo).unwrap() >= stable_arccos(hi).unwrap());
    }

    #[test]
    fn angular_sim_is_scale_invariant_and_symmetric(u in vec_strategy(5), v in vec_strategy(5), c in 0.01f64..100.0) {
        let scaled: Vec<f64> = u.iter().map(|x| c * x).collect();
        let base = angular_sim(&u, &v).unwrap();
        prop_assert!((angular_sim(&scaled, &v).unwrap() - base).abs() <= 1e-12);
        prop_assert_eq!(base, angular_sim(&v, &u).unwrap());
    }

    #[test]
    fn angular_gradient_does_not_vanish(seed in any::<u64>(), phi in 0.01f64..(std::f64::consts::PI - 0.01)) {
        let mut r = common::rng(seed);
        let u = common::unit(6, &mut r);
        let v = common::at_angle(&u, phi, &mut r);
        let ang = angular_sim_grad(&u, &v).unwrap();
        let norm = |g: &[f64]| g.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((norm(&ang.du) - 1.0).abs() <= 1e-6);
        let cos = cosine_sim_grad(&u, &v).unwrap();
        prop_assert!((norm(&cos.du) - phi.sin()).abs() <= 1e-9);
    }

    #[test]
    fn mracl_is_non_decreasing_in_margin(batch in batch_strategy()) {
        let mut prev = f64::NEG_INFINITY;
        for m in [0.0, 0.05, 0.1, 0.2, 0.3] {
            let hyper = LossHyper { margin_m: m, margin_unit: MarginUnit::Radians, ..LossHyper::default() };
            let v = mracl_loss(&batch, &hyper).unwrap().value;
            prop_assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn masking_never_increases_loss(batch in batch_strategy(), row in 0usize..4, col in 0usize..4) {
        let hyper = LossHyper::default();
        let row = row % batch.len();
        let col = col % batch.negatives[row].len();
        let full = mracl_loss(&batch, &hyper).unwrap().value;
        let mut mask = batch.mask.clone();
        mask[row][col] = false;
        let masked = mracl_loss(&batch.clone().with_mask(mask).unwrap(), &hyper).unwrap().value;
        prop_assert!(masked <= full + 1e-15);
    }

    #[test]
    fn extreme_settings_stay_finite(batch in batch_strategy(), m in 0.0f64..20.0, degrees in any::<bool>()) {
        let unit = if degrees { MarginUnit::Degrees } else { MarginUnit::Radians };
        let hyper = LossHyper { margin_m: m, margin_unit: unit, ..LossHyper::default() };
        prop_assert!(mracl_loss(&batch, &hyper).unwrap().value.is_finite());
    }

    #[test]
    fn fuse_is_deterministic(seed in any::<u64>()) {
        let vocab = mracl::fusion::Vocabulary::new(["a", "b", "c"]);
        let cfg = mracl::fusion::ModelConfig::default();
        let model = ToyModel::init(&cfg, 4, vocab, &mut common::rng(seed)).unwrap();
        let x_img = common::gaussian(cfg.embed_dim, &mut common::rng(seed ^ 1));
        let x_txt = common::gaussian(cfg.text_dim, &mut common::rng(seed ^ 2));
        let a = model.fuse(&x_img, &x_txt).unwrap();
        let b = model.fuse(&x_img, &x_txt).unwrap();
        prop_assert_eq!(a.values.as_slice(), b.values.as_slice());
    }

    #[test]
    fn metrics_are_bounded_and_ordered(pairs in prop::collection::vec((mask_strategy(4), mask_strategy(4)), 1..6)) {
        let m = miou(&pairs).unwrap();
        let o = oiou(&pairs).unwrap();
        prop_assert!((0.0..=1.0).contains(&m));
        prop_assert!((0.0..=1.0).contains(&o));
        let mut prev = 1.0;
        for p in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let v = prec_at(&pairs, p).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert!(v <= prev);
            prev = v;
        }
        for (a, b) in &pairs {
            prop_assert_eq!(iou(a, b).unwrap(), iou(b, a).unwrap());
        }
    }

    #[test]
    fn histogram_conserves_pairs(seed in any::<u64>(), n in 2usize..30, n_pairs in 1usize..500, bins in 1usize..40) {
        let mut r = common::rng(seed);
        let emb: Vec<Vec<f64>> = (0..n).map(|_| common::unit(4, &mut r)).collect();
        let h = anisotropy_histogram(&emb, n_pairs, bins, &mut r).unwrap();
        prop_assert_eq!(h.total(), n_pairs.min(n * (n - 1) / 2));
    }
}

const WORDS: [&str; 12] = [
    "the", "red", "blue", "person", "dog", "running", "jumping", "walking", "that", "is", "ball", "bending-over",
];

fn caption_strategy() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(&WORDS[..]), 1..8).prop_map(|w| w.into_iter().map(String::from).collect())
}

fn lexicon() -> Lexicon {
    Lexicon::builtin()
}

proptest! {
    #[test]
    fn phrases_are_verbatim_slices(tokens in caption_strategy()) {
        let caption = Caption::from_tokens(tokens.clone());
        if let Some(p) = extract_motion_phrase(&caption, &lexicon()).unwrap() {
            prop_assert_eq!(&tokens[p.span.0..p.span.1], &p.tokens[..]);
        }
    }

    #[test]
    fn augmentation_keeps_originals_and_filters_monotonically(
        tokens in prop::collection::vec(caption_strategy(), 1..8),
        counts in prop::collection::vec(1usize..5, 1..8),
    ) {
        let records: Vec<AnnotationRecord> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| AnnotationRecord {
                sample_id: format!("s{i}"),
                caption: t.join(" "),
                target_category: "person".into(),
                category_counts: BTreeMap::from([("person".to_string(), counts[i % counts.len()])]),
                source_span: None,
                is_augmented: false,
            })
            .collect();
        let kept = |k: usize| -> Vec<String> {
            make_augmented_pairs(&records, &lexicon(), AmbiguityFilter::exclude_above(k))
                .unwrap()
                .into_iter()
                .filter(|r| r.is_augmented)
                .map(|r| r.sample_id)
                .collect()
        };
        let (k1, k2, k3) = (kept(1), kept(2), kept(3));
        prop_assert!(k1.iter().all(|s| k2.contains(s)));
        prop_assert!(k2.iter().all(|s| k3.contains(s)));
        let out = make_augmented_pairs(&records, &lexicon(), AmbiguityFilter::NoFiltering).unwrap();
        for r in &records {
            prop_assert!(out.contains(r));
        }
    }
}
