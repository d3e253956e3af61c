//! Monte-Carlo checks of the exact answer-distribution oracles: large
//! generated corpora are binned into exact conditioning cells and the
//! empirical frequencies are required to sit inside binomial error bars
//! around the closed-form conditionals.

mod common;

use cibi_core::scm::{
    default_scm, interventional_answer_distribution, observational_answer_distribution, probe_set,
};
use common::{mc_consistency, mc_scm_exact_images, mc_scm_no_visual};

const N_SAMPLES: usize = 1_000_000;

#[test]
fn frequencies_match_oracle_without_visual_signal() {
    let cfg = mc_scm_no_visual();
    let check = mc_consistency(&cfg, N_SAMPLES, false);
    assert_eq!(check.cells, 16, "4 prefixes x 4 keywords");
    assert!(
        check.min_cell_count > 10_000,
        "thinnest cell has {} samples",
        check.min_cell_count
    );
    assert!(
        check.max_z <= 3.0,
        "worst cell is {:.2} sigma from the oracle",
        check.max_z
    );
    assert!(check.max_abs_diff < 0.01);
}

#[test]
fn biased_questions_shift_away_from_the_prior() {
    let cfg = mc_scm_no_visual();
    let zeros = vec![0.0; cfg.image_dim];
    let mut max_shift: f64 = 0.0;
    for prefix in &cfg.vocab.prefixes {
        for group in &cfg.vocab.synonym_groups {
            for kw in group {
                let mut q = prefix.clone();
                q.push(kw.clone());
                let p = observational_answer_distribution(&cfg, &q, &zeros).unwrap();
                max_shift = max_shift.max((p[0] - 0.75).abs());
            }
        }
    }
    assert!(
        max_shift > 0.05,
        "no question moved the conditional off the prior ({max_shift:.4})"
    );
}

#[test]
fn frequencies_match_oracle_with_exact_images() {
    let cfg = mc_scm_exact_images();
    let check = mc_consistency(&cfg, N_SAMPLES, true);
    assert_eq!(check.cells, 32, "16 questions x 2 visual truths");
    assert!(
        check.min_cell_count > 5_000,
        "thinnest cell has {} samples",
        check.min_cell_count
    );
    assert!(
        check.max_z <= 3.0,
        "worst cell is {:.2} sigma from the oracle",
        check.max_z
    );
    assert!(check.max_abs_diff < 0.01);
}

#[test]
fn zero_bias_collapses_observational_to_interventional() {
    let mut cfg = default_scm();
    cfg.context_bias = 0.0;
    cfg.structure_bias = 0.0;
    cfg.keyword_bias = 0.0;
    for (question, image) in probe_set(&cfg, 32, 4242).unwrap() {
        let obs = observational_answer_distribution(&cfg, &question, &image).unwrap();
        let int = interventional_answer_distribution(&cfg, &question, &image).unwrap();
        for (o, i) in obs.iter().zip(&int) {
            assert!(
                (o - i).abs() <= 1e-12,
                "unbiased generator must make conditioning and intervening identical"
            );
        }
    }
}

#[test]
fn intervention_removes_the_question_answer_shortcut() {
    let cfg = mc_scm_no_visual();
    let zeros = vec![0.0; cfg.image_dim];
    let mut max_gap: f64 = 0.0;
    for prefix in &cfg.vocab.prefixes {
        for group in &cfg.vocab.synonym_groups {
            for kw in group {
                let mut q = prefix.clone();
                q.push(kw.clone());
                let obs = observational_answer_distribution(&cfg, &q, &zeros).unwrap();
                let int = interventional_answer_distribution(&cfg, &q, &zeros).unwrap();
                max_gap = max_gap.max((obs[0] - int[0]).abs());
            }
        }
    }
    assert!(
        max_gap > 0.02,
        "do-questions should differ from observed questions somewhere ({max_gap:.4})"
    );
}
