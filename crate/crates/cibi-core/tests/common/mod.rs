//! Shared fixtures for the integration suites: small generator configs whose
//! conditional answer laws are exactly computable, and a Monte-Carlo
//! consistency harness that compares empirical frequencies against the
//! observational oracle.
#![allow(dead_code)]

use std::collections::BTreeMap;

use cibi_core::data::Split;
use cibi_core::scm::{generate_dataset, observational_answer_distribution, ScmConfig};
use cibi_core::vocab::VocabSpec;

pub fn strs(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

pub fn yesno_vocab() -> VocabSpec {
    VocabSpec {
        content_tokens: strs(&["banana", "plantain", "plate", "dish"]),
        synonym_groups: vec![strs(&["banana", "plantain"]), strs(&["plate", "dish"])],
        prefixes: vec![
            strs(&["is", "it"]),
            strs(&["was", "it"]),
            strs(&["do", "you", "see"]),
            strs(&["can", "you", "see"]),
        ],
        prefix_equivalence: vec![vec![0, 1], vec![2, 3]],
        answers: strs(&["yes", "no"]),
        qtype_categories: strs(&["yesno", "yesno", "yesno", "yesno"]),
    }
}

fn yesno_priors(train_yes: f64) -> (BTreeMap<String, Vec<f64>>, BTreeMap<String, Vec<f64>>) {
    let mut train = BTreeMap::new();
    let mut test = BTreeMap::new();
    train.insert("yesno".to_string(), vec![train_yes, 1.0 - train_yes]);
    test.insert("yesno".to_string(), vec![0.5, 0.5]);
    (train, test)
}

/// No visual grounding at all: the image is pure noise, so the exact
/// conditional answer law depends on the question alone and every biased
/// mechanism (context, structure, keyword) still shapes it.
pub fn mc_scm_no_visual() -> ScmConfig {
    let (train_prior, test_prior) = yesno_priors(0.75);
    let cfg = ScmConfig {
        vocab: yesno_vocab(),
        n_confounders: 2,
        confounder_prior: None,
        context_bias: 0.6,
        structure_bias: 0.3,
        keyword_bias: 0.2,
        visual_signal: 0.0,
        noise_std: 1.0,
        image_dim: 3,
        filler_group: None,
        train_prior,
        test_prior,
        seed: 29,
    };
    cfg.validate().unwrap();
    cfg
}

/// Noise-free images: every image is exactly the scaled direction of its
/// visual truth, so conditioning on `(question, image)` is a discrete cell
/// with an exactly computable answer law.
pub fn mc_scm_exact_images() -> ScmConfig {
    let (train_prior, test_prior) = yesno_priors(0.7);
    let cfg = ScmConfig {
        vocab: yesno_vocab(),
        n_confounders: 4,
        confounder_prior: None,
        context_bias: 0.5,
        structure_bias: 0.25,
        keyword_bias: 0.0,
        visual_signal: 0.7,
        noise_std: 0.0,
        image_dim: 3,
        filler_group: None,
        train_prior,
        test_prior,
        seed: 31,
    };
    cfg.validate().unwrap();
    cfg
}

/// Three-answer config sized for gradient checks: one category, two prefix
/// forms, two keyword groups, a filler determiner, and every bias mechanism
/// active.
pub fn grad_scm() -> ScmConfig {
    let vocab = VocabSpec {
        content_tokens: strs(&["the", "a", "banana", "plantain", "plate", "dish"]),
        synonym_groups: vec![
            strs(&["the", "a"]),
            strs(&["banana", "plantain"]),
            strs(&["plate", "dish"]),
        ],
        prefixes: vec![
            strs(&["what", "color", "is"]),
            strs(&["which", "color", "is"]),
        ],
        prefix_equivalence: vec![vec![0, 1]],
        answers: strs(&["red", "blue", "green"]),
        qtype_categories: strs(&["color", "color"]),
    };
    let mut train_prior = BTreeMap::new();
    let mut test_prior = BTreeMap::new();
    train_prior.insert("color".to_string(), vec![0.5, 0.3, 0.2]);
    test_prior.insert("color".to_string(), vec![0.2, 0.3, 0.5]);
    let cfg = ScmConfig {
        vocab,
        n_confounders: 3,
        confounder_prior: None,
        context_bias: 0.6,
        structure_bias: 0.2,
        keyword_bias: 0.2,
        visual_signal: 0.5,
        noise_std: 0.6,
        image_dim: 3,
        filler_group: Some(0),
        train_prior,
        test_prior,
        seed: 47,
    };
    cfg.validate().unwrap();
    cfg
}

pub struct McCheck {
    pub cells: usize,
    pub comparisons: usize,
    pub max_z: f64,
    pub max_abs_diff: f64,
    pub min_cell_count: u64,
}

/// Generate `n` training samples, group them into exact conditioning cells,
/// and compare per-cell answer frequencies against the observational oracle.
///
/// With `by_image` unset the config must make the oracle independent of the
/// image (no visual signal); cells are questions alone. With it set the
/// config must produce noise-free images; cells are `(question, image)`.
///
/// Returns the worst binomial z-score and worst absolute frequency gap over
/// all cells and answers. A zero-probability answer with a nonzero count
/// reports an infinite z.
pub fn mc_consistency(cfg: &ScmConfig, n: usize, by_image: bool) -> McCheck {
    let data = generate_dataset(cfg, n, Split::Train).unwrap();
    let n_answers = cfg.vocab.answers.len();

    struct Cell {
        question: Vec<String>,
        image: Vec<f64>,
        counts: Vec<u64>,
        total: u64,
    }
    let mut cells: BTreeMap<String, Cell> = BTreeMap::new();
    for s in &data.samples {
        let mut key = s.question.join(" ");
        if by_image {
            for x in &s.image {
                key.push('|');
                key.push_str(&x.to_bits().to_string());
            }
        }
        let cell = cells.entry(key).or_insert_with(|| Cell {
            question: s.question.clone(),
            image: if by_image {
                s.image.clone()
            } else {
                vec![0.0; cfg.image_dim]
            },
            counts: vec![0; n_answers],
            total: 0,
        });
        cell.counts[s.answer] += 1;
        cell.total += 1;
    }

    let mut check = McCheck {
        cells: cells.len(),
        comparisons: 0,
        max_z: 0.0,
        max_abs_diff: 0.0,
        min_cell_count: u64::MAX,
    };
    for cell in cells.values() {
        check.min_cell_count = check.min_cell_count.min(cell.total);
        let expected = observational_answer_distribution(cfg, &cell.question, &cell.image).unwrap();
        let m = cell.total as f64;
        for a in 0..n_answers {
            let p = expected[a];
            let freq = cell.counts[a] as f64 / m;
            let diff = (freq - p).abs();
            check.comparisons += 1;
            check.max_abs_diff = check.max_abs_diff.max(diff);
            let z = if p == 0.0 || p == 1.0 {
                if diff == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                diff / (p * (1.0 - p) / m).sqrt()
            };
            check.max_z = check.max_z.max(z);
        }
    }
    check
}
