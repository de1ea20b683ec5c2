use molcpt::linalg::{softmax_rows, Mat};
use molcpt::losses::{
    blend, blend_weights, cross_entropy, full_reverse_kl_oracle, reverse_kl_truncated, route_batch, truncate_pair,
    CorpusTag, LossMode, ProbVector, RouteSettings, SequenceLossInput,
};
use proptest::prelude::*;

fn distribution(v: usize) -> impl Strategy<Value = ProbVector> {
    (prop::collection::vec(prop_oneof![Just(0.0), 0.0..1.0f64, 0.0..1e-6f64], v), 0..v).prop_map(|(mut w, hot)| {
        w[hot] += 0.5;
        let z: f64 = w.iter().sum();
        ProbVector::new(w.into_iter().map(|x| x / z).collect()).unwrap()
    })
}

fn pair_and_n() -> impl Strategy<Value = (ProbVector, ProbVector, usize)> {
    (1usize..80).prop_flat_map(|v| (distribution(v), distribution(v), 1..=v))
}

/// Alphas whose complement is exactly representable, so 1 - (1 - a) == a.
fn exact_alpha() -> impl Strategy<Value = f64> {
    prop_oneof![(0u32..=1 << 24).prop_map(|k| k as f64 / (1u32 << 24) as f64), 0.5..=1.0f64]
}

#[derive(Debug, Clone)]
struct Seq {
    tag: CorpusTag,
    logits: Mat<f64>,
    base: Mat<f64>,
    targets: Vec<usize>,
    mask: Vec<bool>,
}

fn sequence(vocab: usize) -> impl Strategy<Value = Seq> {
    (1usize..6).prop_flat_map(move |rows| {
        (
            any::<bool>(),
            prop::collection::vec(-4.0..4.0f64, rows * vocab),
            prop::collection::vec(-4.0..4.0f64, rows * vocab),
            prop::collection::vec(0..vocab, rows),
            prop::collection::vec(any::<bool>(), rows),
        )
            .prop_map(move |(domain, l, b, targets, mut mask)| {
                mask[0] = true;
                Seq {
                    tag: if domain { CorpusTag::Domain } else { CorpusTag::General },
                    logits: Mat::from_vec(rows, vocab, l).unwrap(),
                    base: softmax_rows(&Mat::from_vec(rows, vocab, b).unwrap()),
                    targets,
                    mask,
                }
            })
    })
}

fn batch() -> impl Strategy<Value = (Vec<Seq>, RouteSettings)> {
    (2usize..20).prop_flat_map(|vocab| {
        (
            prop::collection::vec(sequence(vocab), 1..5),
            0.0..=1.0f64,
            1..=vocab,
            prop_oneof![Just(LossMode::Mol), Just(LossMode::CeOnly)],
        )
            .prop_map(|(seqs, alpha, n_trunc, mode)| (seqs, RouteSettings { alpha, n_trunc, mode }))
    })
}

fn inputs(seqs: &[Seq]) -> Vec<SequenceLossInput<'_, f64>> {
    seqs.iter()
        .map(|s| SequenceLossInput {
            tag: s.tag,
            student_logits: &s.logits,
            base_probs: Some(&s.base),
            targets: &s.targets,
            mask: &s.mask,
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn truncated_masses_are_normalised((base, student, n) in pair_and_n()) {
        let p = truncate_pair(&base, &student, n).unwrap();
        prop_assert_eq!(p.kept_ids.len(), n);
        prop_assert!((p.base_kept.iter().sum::<f64>() + p.base_residual - 1.0).abs() <= 1e-9);
        prop_assert!((p.student_kept.iter().sum::<f64>() + p.student_residual - 1.0).abs() <= 1e-9);
        prop_assert!(p.base_residual >= 0.0 && p.student_residual >= 0.0);
        prop_assert!(p.reverse_kl().0 >= -1e-12);
    }

    #[test]
    fn kept_tokens_are_the_base_top_n((base, student, n) in pair_and_n()) {
        let p = truncate_pair(&base, &student, n).unwrap();
        let kept_min = p.base_kept.iter().cloned().fold(f64::INFINITY, f64::min);
        for (i, &b) in base.as_slice().iter().enumerate() {
            if !p.kept_ids.contains(&i) {
                prop_assert!(b <= kept_min);
            }
        }
        for w in p.base_kept.windows(2) {
            prop_assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn untruncated_kl_matches_oracle((base, student, _) in pair_and_n()) {
        let v = base.len();
        let kl = truncate_pair(&base, &student, v).unwrap().reverse_kl().0;
        prop_assert!((kl - full_reverse_kl_oracle(&student, &base)).abs() <= 1e-10);
    }

    #[test]
    fn identical_distributions_have_zero_kl((base, _, n) in pair_and_n()) {
        let kl = truncate_pair(&base, &base, n).unwrap().reverse_kl().0;
        prop_assert!(kl.abs() <= 1e-12);
    }

    #[test]
    fn tag_swap_equals_complemented_alpha(alpha in exact_alpha(), ce in 0.0..20.0f64, kl in 0.0..20.0f64) {
        prop_assert_eq!(
            blend(ce, kl, CorpusTag::Domain, alpha).unwrap(),
            blend(ce, kl, CorpusTag::General, 1.0 - alpha).unwrap()
        );
        prop_assert_eq!(
            blend(ce, kl, CorpusTag::General, alpha).unwrap(),
            blend(ce, kl, CorpusTag::Domain, 1.0 - alpha).unwrap()
        );
    }

    #[test]
    fn blend_is_a_convex_combination(alpha in 0.0..=1.0f64, ce in 0.0..20.0f64, kl in 0.0..20.0f64) {
        for tag in [CorpusTag::Domain, CorpusTag::General] {
            let (wc, wk) = blend_weights(tag, alpha).unwrap();
            prop_assert!(wc >= 0.0 && wk >= 0.0 && (wc + wk - 1.0).abs() <= 1e-15);
            let b = blend(ce, kl, tag, alpha).unwrap();
            prop_assert!(b >= ce.min(kl) - 1e-12 && b <= ce.max(kl) + 1e-12);
        }
    }

    #[test]
    fn routing_is_the_weighted_mean_of_sequences((seqs, settings) in batch()) {
        let routed = route_batch(&inputs(&seqs), &settings).unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        for s in &seqs {
            let ce = cross_entropy(&s.logits, &s.targets, &s.mask).unwrap();
            let loss = match settings.mode {
                LossMode::CeOnly => ce.value,
                LossMode::Mol => {
                    let kl = reverse_kl_truncated(&s.logits, &s.base, &s.mask, settings.n_trunc).unwrap();
                    blend(ce.value, kl.value, s.tag, settings.alpha).unwrap()
                }
            };
            num += ce.n_eff as f64 * loss;
            den += ce.n_eff as f64;
        }
        prop_assert!((routed.breakdown.blended_total - num / den).abs() <= 1e-9);
        prop_assert_eq!(routed.sequence_losses.len(), seqs.len());
    }

    #[test]
    fn routing_ignores_sequence_order((seqs, settings) in batch()) {
        let a = route_batch(&inputs(&seqs), &settings).unwrap().breakdown.blended_total;
        let mut rev = seqs.clone();
        rev.reverse();
        let b = route_batch(&inputs(&rev), &settings).unwrap().breakdown.blended_total;
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn ce_only_ignores_alpha_and_base((seqs, mut settings) in batch(), alpha in 0.0..=1.0f64) {
        settings.mode = LossMode::CeOnly;
        let a = route_batch(&inputs(&seqs), &settings).unwrap();
        settings.alpha = alpha;
        let no_base: Vec<_> = inputs(&seqs).into_iter().map(|i| SequenceLossInput { base_probs: None, ..i }).collect();
        let b = route_batch(&no_base, &settings).unwrap();
        prop_assert_eq!(a.breakdown.blended_total, b.breakdown.blended_total);
        prop_assert_eq!(a.breakdown.kl_general, 0.0);
    }
}
