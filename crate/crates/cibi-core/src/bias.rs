//! Dataset-level bias measurement: token/answer co-occurrence, pointwise
//! mutual information, structure extraction, and keyword selection.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::vocab::VocabSpec;

/// Presence-based co-occurrence counts: a token is counted at most once per
/// sample no matter how often it repeats in the question.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CooccurrenceCounts {
    pub pair: BTreeMap<(String, usize), u64>,
    pub token: BTreeMap<String, u64>,
    pub answer: Vec<u64>,
    pub total: u64,
}

impl CooccurrenceCounts {
    pub fn pair_count(&self, token: &str, answer: usize) -> u64 {
        self.pair
            .get(&(token.to_string(), answer))
            .copied()
            .unwrap_or(0)
    }

    pub fn token_count(&self, token: &str) -> u64 {
        self.token.get(token).copied().unwrap_or(0)
    }

    pub fn answer_count(&self, answer: usize) -> u64 {
        self.answer.get(answer).copied().unwrap_or(0)
    }
}

pub fn count_cooccurrence(dataset: &Dataset) -> Result<CooccurrenceCounts> {
    if dataset.samples.is_empty() {
        return Err(Error::EmptyInput {
            what: "dataset for co-occurrence counting".into(),
        });
    }
    let mut counts = CooccurrenceCounts {
        answer: vec![0; dataset.vocab.answers.len()],
        ..Default::default()
    };
    for s in &dataset.samples {
        let distinct: BTreeSet<&String> = s.question.iter().collect();
        for t in distinct {
            *counts.token.entry(t.clone()).or_insert(0) += 1;
            *counts.pair.entry((t.clone(), s.answer)).or_insert(0) += 1;
        }
        counts.answer[s.answer] += 1;
        counts.total += 1;
    }
    Ok(counts)
}

/// Pointwise mutual information between a token and an answer:
/// `ln(joint * total / (token_marginal * answer_marginal))`, in nats.
/// A zero joint count with positive marginals yields negative infinity
/// (the pair never co-occurs); a zero marginal is an error.
pub fn mutual_information(
    counts: &CooccurrenceCounts,
    token: &str,
    answer: usize,
    vocab: &VocabSpec,
) -> Result<f64> {
    let h_w = counts.token_count(token);
    let h_a = counts.answer_count(answer);
    if h_w == 0 || h_a == 0 {
        return Err(Error::UndefinedScore {
            token: token.to_string(),
            answer: vocab
                .answers
                .get(answer)
                .cloned()
                .unwrap_or_else(|| format!("#{answer}")),
        });
    }
    let h_wa = counts.pair_count(token, answer);
    if h_wa == 0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(((h_wa as f64 * counts.total as f64) / (h_w as f64 * h_a as f64)).ln())
}

/// Splits a question into its structure prefix and remainder.
pub fn extract_structure<'q>(
    vocab: &VocabSpec,
    question: &'q [String],
) -> Result<(usize, &'q [String])> {
    vocab.split_question(question)
}

/// Picks the remainder token with the highest mutual information with the
/// sample's answer. Ties go to the earliest question position. Tokens the
/// counts have never seen are not scorable and are skipped.
pub fn select_keyword(
    counts: &CooccurrenceCounts,
    vocab: &VocabSpec,
    question: &[String],
    answer: usize,
) -> Result<String> {
    let (_, remainder) = extract_structure(vocab, question)?;
    let mut best: Option<(f64, &String)> = None;
    for t in remainder {
        if counts.token_count(t) == 0 {
            continue;
        }
        let mi = mutual_information(counts, t, answer, vocab)?;
        if best.map(|(b, _)| mi > b).unwrap_or(true) {
            best = Some((mi, t));
        }
    }
    match best {
        Some((_, t)) => Ok(t.clone()),
        None => Err(Error::NoKeyword {
            question: question.join(" "),
        }),
    }
}

/// A question's superficial context: its structure prefix plus its selected
/// keyword.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ContextPattern {
    pub prefix: usize,
    pub keyword: String,
}

pub fn context_pattern(
    counts: &CooccurrenceCounts,
    vocab: &VocabSpec,
    question: &[String],
    answer: usize,
) -> Result<ContextPattern> {
    let (prefix, _) = extract_structure(vocab, question)?;
    let keyword = select_keyword(counts, vocab, question, answer)?;
    Ok(ContextPattern { prefix, keyword })
}

/// What to condition on when measuring an empirical answer distribution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PriorKey {
    Category(String),
    Pattern(ContextPattern),
}

/// Empirical answer distribution among samples matching the key. Pattern
/// matching selects each sample's keyword using counts from the dataset
/// itself.
pub fn answer_prior(dataset: &Dataset, key: &PriorKey) -> Result<Vec<f64>> {
    let counts = match key {
        PriorKey::Pattern(_) => Some(count_cooccurrence(dataset)?),
        PriorKey::Category(_) => None,
    };
    let mut freq = vec![0u64; dataset.vocab.answers.len()];
    let mut n = 0u64;
    for s in &dataset.samples {
        let matches = match key {
            PriorKey::Category(c) => &s.qtype == c,
            PriorKey::Pattern(p) => context_pattern(
                counts.as_ref().unwrap(),
                &dataset.vocab,
                &s.question,
                s.answer,
            )
            .map(|got| got == *p)
            .unwrap_or(false),
        };
        if matches {
            freq[s.answer] += 1;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyInput {
            what: format!("no samples match {key:?}"),
        });
    }
    Ok(freq.iter().map(|&k| k as f64 / n as f64).collect())
}

/// Tokens ranked by mutual information with an answer, strongest first.
/// Pairs that never co-occur rank last; ties break lexicographically.
pub fn top_mi_tokens(
    counts: &CooccurrenceCounts,
    answer: usize,
    k: usize,
    vocab: &VocabSpec,
) -> Result<Vec<(String, f64)>> {
    let mut scored = Vec::new();
    for t in counts.token.keys() {
        let mi = mutual_information(counts, t, answer, vocab)?;
        scored.push((t.clone(), mi));
    }
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}
