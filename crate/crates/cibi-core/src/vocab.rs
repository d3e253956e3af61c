//! Vocabulary: content tokens with synonym groups, structure prefixes with
//! equivalence groups, answers, and per-prefix question-type categories.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rngutil::fnv1a64;

/// Reserved token used when masking question parts. It is a first-class
/// vocabulary entry with its own learned embedding, so masked questions still
/// pass through the question encoder unchanged in shape.
pub const MASK_TOKEN: &str = "[MASK]";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSpec {
    /// All non-prefix tokens that can appear in questions.
    pub content_tokens: Vec<String>,
    /// Partition of `content_tokens` into interchangeable groups.
    pub synonym_groups: Vec<Vec<String>>,
    /// Structure prefixes as token sequences; the table is prefix-free.
    pub prefixes: Vec<Vec<String>>,
    /// Partition of prefix indices into structure-equivalence groups.
    pub prefix_equivalence: Vec<Vec<usize>>,
    /// Answer labels.
    pub answers: Vec<String>,
    /// Question-type category label per prefix (parallel to `prefixes`).
    pub qtype_categories: Vec<String>,
}

impl VocabSpec {
    /// Structural validation. Everything downstream (generation, oracles,
    /// counterfactuals) assumes these properties hold.
    pub fn validate(&self) -> Result<()> {
        if self.content_tokens.is_empty() {
            return Err(Error::config("content_tokens", "must not be empty"));
        }
        if self.prefixes.is_empty() {
            return Err(Error::config("prefixes", "must not be empty"));
        }
        if self.answers.is_empty() {
            return Err(Error::config("answers", "must not be empty"));
        }
        if self.qtype_categories.len() != self.prefixes.len() {
            return Err(Error::config(
                "qtype_categories",
                format!(
                    "must have one entry per prefix ({} prefixes, {} categories)",
                    self.prefixes.len(),
                    self.qtype_categories.len()
                ),
            ));
        }

        let all_single_tokens = self
            .content_tokens
            .iter()
            .chain(self.answers.iter())
            .chain(self.prefixes.iter().flatten())
            .chain(self.qtype_categories.iter());
        for t in all_single_tokens {
            if t.is_empty() || t.chars().any(|c| c.is_whitespace() || c.is_control()) {
                return Err(Error::config(
                    "tokens",
                    format!("token `{t}` is empty or contains whitespace/control characters"),
                ));
            }
        }
        if self.content_tokens.iter().any(|t| t == MASK_TOKEN)
            || self.prefixes.iter().flatten().any(|t| t == MASK_TOKEN)
        {
            return Err(Error::config(
                "content_tokens",
                format!("`{MASK_TOKEN}` is reserved and cannot appear in the vocabulary"),
            ));
        }

        let mut seen = HashSet::new();
        for t in &self.content_tokens {
            if !seen.insert(t.as_str()) {
                return Err(Error::config(
                    "content_tokens",
                    format!("duplicate token `{t}`"),
                ));
            }
        }
        let mut seen = HashSet::new();
        for a in &self.answers {
            if !seen.insert(a.as_str()) {
                return Err(Error::config("answers", format!("duplicate answer `{a}`")));
            }
        }

        // Prefixes: unique, prefix-free, and disjoint from content tokens.
        let content: HashSet<&str> = self.content_tokens.iter().map(|s| s.as_str()).collect();
        for (i, p) in self.prefixes.iter().enumerate() {
            if p.is_empty() {
                return Err(Error::config("prefixes", format!("prefix {i} is empty")));
            }
            for t in p {
                if content.contains(t.as_str()) {
                    return Err(Error::config(
                        "prefixes",
                        format!("content token `{t}` also appears in a prefix"),
                    ));
                }
            }
            for (j, q) in self.prefixes.iter().enumerate() {
                if i != j && p.len() <= q.len() && q[..p.len()] == p[..] {
                    return Err(Error::config(
                        "prefixes",
                        format!(
                            "table is not prefix-free: `{}` is an initial segment of `{}`",
                            p.join(" "),
                            q.join(" ")
                        ),
                    ));
                }
            }
        }

        // Synonym groups: a partition of content tokens, each group >= 2.
        let mut covered: HashMap<&str, usize> = HashMap::new();
        for (g, group) in self.synonym_groups.iter().enumerate() {
            if group.len() < 2 {
                return Err(Error::config(
                    "synonym_groups",
                    format!("group {g} has {} member(s); need at least 2", group.len()),
                ));
            }
            for t in group {
                if !content.contains(t.as_str()) {
                    return Err(Error::config(
                        "synonym_groups",
                        format!("`{t}` is not a content token"),
                    ));
                }
                if covered.insert(t.as_str(), g).is_some() {
                    return Err(Error::config(
                        "synonym_groups",
                        format!("token `{t}` appears in more than one group"),
                    ));
                }
            }
        }
        for t in &self.content_tokens {
            if !covered.contains_key(t.as_str()) {
                return Err(Error::config(
                    "synonym_groups",
                    format!("token `{t}` is not covered by any group"),
                ));
            }
        }

        // Prefix equivalence: a partition of prefix indices; groups never mix
        // question-type categories.
        let mut covered = vec![false; self.prefixes.len()];
        for (g, group) in self.prefix_equivalence.iter().enumerate() {
            if group.is_empty() {
                return Err(Error::config(
                    "prefix_equivalence",
                    format!("group {g} is empty"),
                ));
            }
            let cat = &self.qtype_categories[group[0]];
            for &p in group {
                if p >= self.prefixes.len() {
                    return Err(Error::config(
                        "prefix_equivalence",
                        format!("prefix index {p} out of range"),
                    ));
                }
                if covered[p] {
                    return Err(Error::config(
                        "prefix_equivalence",
                        format!("prefix index {p} appears in more than one group"),
                    ));
                }
                covered[p] = true;
                if &self.qtype_categories[p] != cat {
                    return Err(Error::config(
                        "prefix_equivalence",
                        format!(
                            "group {g} mixes categories `{cat}` and `{}`",
                            self.qtype_categories[p]
                        ),
                    ));
                }
            }
        }
        if let Some(p) = covered.iter().position(|c| !c) {
            return Err(Error::config(
                "prefix_equivalence",
                format!("prefix index {p} is not covered by any group"),
            ));
        }

        Ok(())
    }

    /// Distinct category labels in order of first appearance in the prefix
    /// table. This order is part of the deterministic contract.
    pub fn categories(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in &self.qtype_categories {
            if !out.contains(c) {
                out.push(c.clone());
            }
        }
        out
    }

    pub fn category_of_prefix(&self, prefix: usize) -> &str {
        &self.qtype_categories[prefix]
    }

    /// Index of the synonym group containing `token`, if any.
    pub fn synonym_group_of(&self, token: &str) -> Option<usize> {
        self.synonym_groups
            .iter()
            .position(|g| g.iter().any(|t| t == token))
    }

    /// Index of the equivalence group containing prefix `p`.
    pub fn equivalence_group_of(&self, p: usize) -> Option<usize> {
        self.prefix_equivalence.iter().position(|g| g.contains(&p))
    }

    pub fn answer_index(&self, label: &str) -> Option<usize> {
        self.answers.iter().position(|a| a == label)
    }

    /// Splits a question into `(prefix index, remainder tokens)`. Because the
    /// prefix table is prefix-free, at most one prefix can match.
    pub fn split_question<'q>(&self, question: &'q [String]) -> Result<(usize, &'q [String])> {
        for (i, p) in self.prefixes.iter().enumerate() {
            if question.len() >= p.len() && question[..p.len()] == p[..] {
                return Ok((i, &question[p.len()..]));
            }
        }
        Err(Error::UnstructuredQuestion {
            question: question.join(" "),
        })
    }

    /// Every token the model must embed: content tokens, then prefix tokens in
    /// table order (deduplicated), then the mask token. Order is stable.
    pub fn token_universe(&self) -> Vec<String> {
        let mut out = self.content_tokens.clone();
        let mut seen: HashSet<String> = out.iter().cloned().collect();
        for p in &self.prefixes {
            for t in p {
                if seen.insert(t.clone()) {
                    out.push(t.clone());
                }
            }
        }
        out.push(MASK_TOKEN.to_string());
        out
    }

    /// Stable fingerprint of the vocabulary, used to match datasets with
    /// checkpoints. Hashes the canonical JSON serialization.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("vocab serialization cannot fail");
        fnv1a64(json.as_bytes())
    }

    pub fn hash_hex(&self) -> String {
        format!("{:016x}", self.hash())
    }
}

/// Token-to-id lookup over the embedding universe of a vocabulary.
#[derive(Debug, Clone)]
pub struct TokenIndex {
    tokens: Vec<String>,
    ids: BTreeMap<String, usize>,
}

impl TokenIndex {
    pub fn new(vocab: &VocabSpec) -> Self {
        let tokens = vocab.token_universe();
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        TokenIndex { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.ids
            .get(token)
            .copied()
            .ok_or_else(|| Error::Vocabulary {
                token: token.to_string(),
            })
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode(&self, question: &[String]) -> Result<Vec<usize>> {
        question.iter().map(|t| self.id(t)).collect()
    }
}

/// The stock vocabulary: three question categories, each with a pair of
/// equivalent prefixes; four keyword groups plus a determiner group used as
/// filler; answers spanning yes/no, colors, and counts.
pub fn default_vocab() -> VocabSpec {
    let v = VocabSpec {
        content_tokens: vec![
            "the", "a", "banana", "plantain", "plate", "dish", "grass", "lawn", "ocean", "sea",
        ]
        .into_iter()
        .map(String::from)
        .collect(),
        synonym_groups: vec![
            vec!["the".into(), "a".into()],
            vec!["banana".into(), "plantain".into()],
            vec!["plate".into(), "dish".into()],
            vec!["grass".into(), "lawn".into()],
            vec!["ocean".into(), "sea".into()],
        ],
        prefixes: vec![
            vec!["what".into(), "color".into(), "is".into()],
            vec!["which".into(), "color".into(), "is".into()],
            vec!["is".into(), "this".into()],
            vec!["do".into(), "you".into(), "see".into()],
            vec!["how".into(), "many".into()],
            vec!["what".into(), "number".into(), "of".into()],
        ],
        prefix_equivalence: vec![vec![0, 1], vec![2, 3], vec![4, 5]],
        answers: vec![
            "yellow", "white", "green", "blue", "yes", "no", "one", "two", "three",
        ]
        .into_iter()
        .map(String::from)
        .collect(),
        qtype_categories: vec![
            "color".into(),
            "color".into(),
            "yesno".into(),
            "yesno".into(),
            "count".into(),
            "count".into(),
        ],
    };
    debug_assert!(v.validate().is_ok());
    v
}
