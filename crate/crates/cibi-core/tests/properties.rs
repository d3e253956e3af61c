//! Property tests for the generator oracles, the bias statistics, the
//! counterfactual constructions, and the loss-side numeric helpers.

mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;

use cibi_core::bias::{count_cooccurrence, mutual_information, select_keyword, CooccurrenceCounts};
use cibi_core::counterfactual::{mask_counterfactual, MaskPolicy};
use cibi_core::data::{quantize9, read_dataset, write_dataset, Split};
use cibi_core::objectives::{cross_entropy, fusion_h, info_nce, log_softmax, softmax};
use cibi_core::rngutil::stream;
use cibi_core::scm::{
    generate_dataset, interventional_answer_distribution, observational_answer_distribution,
    ScmConfig,
};
use cibi_core::vocab::MASK_TOKEN;
use common::{grad_scm, mc_scm_exact_images, mc_scm_no_visual};

fn oracle_cfg(
    biases: (f64, f64, f64),
    visual: f64,
    noise: f64,
    train_yes: f64,
    n_confounders: usize,
) -> ScmConfig {
    let mut cfg = mc_scm_no_visual();
    cfg.context_bias = biases.0;
    cfg.structure_bias = biases.1;
    cfg.keyword_bias = biases.2;
    cfg.visual_signal = visual;
    cfg.noise_std = noise;
    cfg.n_confounders = n_confounders;
    cfg.train_prior
        .insert("yesno".into(), vec![train_yes, 1.0 - train_yes]);
    cfg.validate().unwrap();
    cfg
}

fn question_for(cfg: &ScmConfig, prefix: usize, keyword: usize) -> Vec<String> {
    let keywords: Vec<&String> = cfg
        .vocab
        .synonym_groups
        .iter()
        .flat_map(|g| g.iter())
        .collect();
    let mut q = cfg.vocab.prefixes[prefix % cfg.vocab.prefixes.len()].clone();
    q.push(keywords[keyword % keywords.len()].clone());
    q
}

proptest! {
    #[test]
    fn oracle_distributions_are_normalized(
        bc in 0.0..0.98f64,
        bs in 0.0..0.98f64,
        bk in 0.0..0.98f64,
        visual in 0.0..0.95f64,
        noise in 0.05..1.5f64,
        train_yes in 0.05..0.95f64,
        n_confounders in 1usize..6,
        prefix in 0usize..4,
        keyword in 0usize..4,
        image in prop::collection::vec(-2.0..2.0f64, 3),
    ) {
        let cfg = oracle_cfg((bc, bs, bk), visual, noise, train_yes, n_confounders);
        let q = question_for(&cfg, prefix, keyword);
        for dist in [
            observational_answer_distribution(&cfg, &q, &image).unwrap(),
            interventional_answer_distribution(&cfg, &q, &image).unwrap(),
        ] {
            prop_assert!(dist.iter().all(|&p| (0.0..=1.0 + 1e-12).contains(&p)));
            prop_assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn unconfounded_oracles_coincide(
        bc in 0.0..0.98f64,
        bs in 0.0..0.98f64,
        bk in 0.0..0.98f64,
        visual in 0.0..0.95f64,
        noise in 0.05..1.5f64,
        train_yes in 0.05..0.95f64,
        n_confounders in 1usize..6,
        prefix in 0usize..4,
        keyword in 0usize..4,
        image in prop::collection::vec(-2.0..2.0f64, 3),
        zero_bias in any::<bool>(),
    ) {
        // Confounding needs both a link from the confounder to the question
        // and more than one confounder state; remove either and conditioning
        // must equal intervening.
        let cfg = if zero_bias {
            oracle_cfg((0.0, 0.0, 0.0), visual, noise, train_yes, n_confounders)
        } else {
            oracle_cfg((bc, bs, bk), visual, noise, train_yes, 1)
        };
        let q = question_for(&cfg, prefix, keyword);
        let obs = observational_answer_distribution(&cfg, &q, &image).unwrap();
        let int = interventional_answer_distribution(&cfg, &q, &image).unwrap();
        for (o, i) in obs.iter().zip(&int) {
            prop_assert!((o - i).abs() <= 1e-12);
        }
    }

    #[test]
    fn mutual_information_follows_the_count_ratios(
        h_wa in 1u64..50,
        extra_w in 0u64..50,
        extra_a in 0u64..50,
        slack in 0u64..200,
        scale in 1u64..5,
    ) {
        let h_w = h_wa + extra_w;
        let h_a = h_wa + extra_a;
        let total = h_w + h_a - h_wa + slack;
        let counts = |wa: u64, w: u64, a: u64, k: u64| CooccurrenceCounts {
            pair: BTreeMap::from([(("w".to_string(), 0usize), wa)]),
            token: BTreeMap::from([("w".to_string(), w)]),
            answer: vec![a],
            total: k,
        };
        let vocab = mc_scm_no_visual().vocab;
        let mi = |c: &CooccurrenceCounts| mutual_information(c, "w", 0, &vocab).unwrap();

        let base = mi(&counts(h_wa, h_w, h_a, total));
        prop_assert!((base - ((h_wa * total) as f64 / (h_w * h_a) as f64).ln()).abs() < 1e-12);
        // More joint mass, same marginals: association can only grow.
        prop_assert!(mi(&counts(h_wa + 1, h_w, h_a, total)) > base);
        // More marginal mass without joint mass: association can only shrink.
        prop_assert!(mi(&counts(h_wa, h_w + 1, h_a, total)) < base);
        // Scaling every count leaves the ratio alone.
        let scaled = mi(&counts(h_wa * scale, h_w * scale, h_a * scale, total * scale));
        prop_assert!((scaled - base).abs() < 1e-9);
    }

    #[test]
    fn independent_counts_have_zero_information(x in 1u64..40, y in 1u64..40) {
        let counts = CooccurrenceCounts {
            pair: BTreeMap::from([(("w".to_string(), 0usize), 1)]),
            token: BTreeMap::from([("w".to_string(), x)]),
            answer: vec![y],
            total: x * y,
        };
        let vocab = mc_scm_no_visual().vocab;
        let mi = mutual_information(&counts, "w", 0, &vocab).unwrap();
        prop_assert!(mi.abs() < 1e-12);
    }

    #[test]
    fn masking_preserves_shape_and_only_rewrites_cue_positions(
        p_structure in 0.0..=1.0f64,
        p_keyword in 0.0..=1.0f64,
        guarantee_one in any::<bool>(),
        sample_idx in 0usize..64,
        seed in 0u64..1000,
    ) {
        let cfg = grad_scm();
        let data = generate_dataset(&cfg, 64, Split::Train).unwrap();
        let counts = count_cooccurrence(&data).unwrap();
        let s = &data.samples[sample_idx];
        let keyword = select_keyword(&counts, &cfg.vocab, &s.question, s.answer).unwrap();
        let policy = MaskPolicy { p_structure, p_keyword, guarantee_one };
        let mut rng = stream(seed, "prop/mask", 0);
        let masked = mask_counterfactual(&cfg.vocab, &s.question, &keyword, &policy, &mut rng).unwrap();

        prop_assert_eq!(masked.len(), s.question.len());
        let (prefix, _) = cfg.vocab.split_question(&s.question).unwrap();
        let prefix_len = cfg.vocab.prefixes[prefix].len();
        for (i, (orig, got)) in s.question.iter().zip(&masked).enumerate() {
            if got != orig {
                prop_assert_eq!(got.as_str(), MASK_TOKEN);
                prop_assert!(i < prefix_len || orig == &keyword);
            }
        }
        if guarantee_one {
            prop_assert_ne!(&masked, &s.question);
        }
    }

    #[test]
    fn score_fusion_never_reorders_answers(
        vqa in prop::collection::vec(-20.0..20.0f64, 2..8),
        shift in prop::collection::vec(-20.0..20.0f64, 2..8),
    ) {
        let n = vqa.len().min(shift.len());
        let f_vqa = &vqa[..n];
        let f_qa = &shift[..n];
        let fused = fusion_h(f_vqa, f_qa).unwrap();
        prop_assert!(fused.iter().all(|x| x.is_finite() && *x <= 0.0));

        let diff: Vec<f64> = f_vqa.iter().zip(f_qa).map(|(a, b)| a - b).collect();
        let argmax = |xs: &[f64]| {
            xs.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        // Near-ties are resolved by float noise either way; skip them.
        let mut sorted = diff.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        prop_assume!(n < 2 || sorted[0] - sorted[1] > 1e-9);
        prop_assert_eq!(argmax(&fused), argmax(&diff));
    }

    #[test]
    fn softmax_is_a_shift_invariant_distribution(
        logits in prop::collection::vec(-30.0..30.0f64, 1..10),
        shift in -10.0..10.0f64,
        target_idx in 0usize..10,
    ) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
        for (a, b) in softmax(&shifted).iter().zip(&p) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        let target = target_idx % logits.len();
        let ce = cross_entropy(&logits, target).unwrap();
        prop_assert!(ce >= 0.0);
        prop_assert!((ce + log_softmax(&logits)[target]).abs() < 1e-9);
    }

    #[test]
    fn contrastive_loss_is_nonnegative_with_anchor_in_batch(
        vecs in prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 4), 3..8),
        tau in 0.05..1.0f64,
    ) {
        let ok = vecs
            .iter()
            .all(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt() > 1e-6);
        prop_assume!(ok);
        let anchor = &vecs[0];
        let positives = vec![vecs[1].clone(), vecs[2].clone()];
        let loss = info_nce(anchor, &positives, &vecs, tau).unwrap();
        prop_assert!(loss >= -1e-12);
    }

    #[test]
    fn datasets_survive_the_text_round_trip(n in 1usize..40, exact in any::<bool>()) {
        let cfg = if exact { mc_scm_exact_images() } else { grad_scm() };
        let data = generate_dataset(&cfg, n, Split::Test).unwrap();
        let mut buf = Vec::new();
        write_dataset(&data, &mut buf).unwrap();
        let back = read_dataset(buf.as_slice()).unwrap();
        prop_assert_eq!(back, data);
    }

    #[test]
    fn quantization_is_idempotent_and_tight(x in -100.0..100.0f64) {
        let q = quantize9(x);
        prop_assert_eq!(quantize9(q), q);
        // Nine significant digits: the error is relative, not absolute.
        prop_assert!((q - x).abs() <= 5e-9 * x.abs());
    }
}
