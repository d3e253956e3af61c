//! Counterfactual question construction.
//!
//! Three mechanisms, all token-count preserving or category preserving by
//! construction:
//!
//! * synonym swap: replace a question's keyword with another member of its
//!   synonym group;
//! * structure swap: replace the structure prefix with an equivalent prefix
//!   from the same category;
//! * masking: overwrite the structure tokens and/or the keyword with the
//!   reserved mask token, used to expose superficial question cues.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bias::{select_keyword, CooccurrenceCounts};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::vocab::{VocabSpec, MASK_TOKEN};

/// Masking policy for the question-only branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskPolicy {
    /// Probability of masking every structure-prefix token.
    pub p_structure: f64,
    /// Probability of masking the keyword.
    pub p_keyword: f64,
    /// If neither coin lands, mask the keyword anyway so the variant always
    /// differs from the original question.
    pub guarantee_one: bool,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy {
            p_structure: 0.5,
            p_keyword: 0.5,
            guarantee_one: true,
        }
    }
}

impl MaskPolicy {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("p_structure", self.p_structure),
            ("p_keyword", self.p_keyword),
        ] {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                return Err(Error::config(name, format!("must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Replace every occurrence of `keyword` with one uniformly chosen synonym
/// from its group (the same synonym for all occurrences).
pub fn synonym_counterfactual(
    vocab: &VocabSpec,
    question: &[String],
    keyword: &str,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<String>> {
    let group = vocab
        .synonym_group_of(keyword)
        .map(|g| &vocab.synonym_groups[g])
        .ok_or_else(|| Error::NoSynonym {
            token: keyword.to_string(),
        })?;
    let partners: Vec<&String> = group.iter().filter(|t| t.as_str() != keyword).collect();
    if partners.is_empty() {
        return Err(Error::NoSynonym {
            token: keyword.to_string(),
        });
    }
    let replacement = partners[rng.gen_range(0..partners.len())];
    Ok(question
        .iter()
        .map(|t| {
            if t == keyword {
                replacement.clone()
            } else {
                t.clone()
            }
        })
        .collect())
}

/// Replace the structure prefix with a uniformly chosen equivalent prefix.
/// Equivalence groups never cross categories, so the question type is
/// preserved.
pub fn structure_counterfactual(
    vocab: &VocabSpec,
    question: &[String],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<String>> {
    let (prefix, remainder) = vocab.split_question(question)?;
    let group = &vocab.prefix_equivalence[vocab.equivalence_group_of(prefix).unwrap()];
    let partners: Vec<usize> = group.iter().copied().filter(|&p| p != prefix).collect();
    if partners.is_empty() {
        return Err(Error::NoEquivalentStructure {
            prefix: vocab.prefixes[prefix].join(" "),
        });
    }
    let replacement = partners[rng.gen_range(0..partners.len())];
    let mut out = vocab.prefixes[replacement].clone();
    out.extend(remainder.iter().cloned());
    Ok(out)
}

/// Mask the structure tokens and/or the keyword according to the policy.
/// The token count never changes: masked positions are overwritten in place.
pub fn mask_counterfactual(
    vocab: &VocabSpec,
    question: &[String],
    keyword: &str,
    policy: &MaskPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<String>> {
    policy.validate()?;
    let (prefix, _) = vocab.split_question(question)?;
    let prefix_len = vocab.prefixes[prefix].len();
    let mask_structure = rng.gen_bool(policy.p_structure);
    let mut mask_keyword = rng.gen_bool(policy.p_keyword);
    if !mask_structure && !mask_keyword && policy.guarantee_one {
        mask_keyword = true;
    }
    let mut out = question.to_vec();
    if mask_structure {
        for t in out.iter_mut().take(prefix_len) {
            *t = MASK_TOKEN.to_string();
        }
    }
    if mask_keyword {
        for t in out.iter_mut().skip(prefix_len) {
            if t == keyword {
                *t = MASK_TOKEN.to_string();
            }
        }
    }
    Ok(out)
}

/// Contrastive material for one anchor sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveEntry {
    pub anchor: usize,
    /// Two positive question variants sharing the anchor's image. The first
    /// slot is the synonym swap and the second the structure swap; when one
    /// mechanism is impossible the other is drawn twice.
    pub positives: [Vec<String>; 2],
    /// The other in-batch indices; their fused embeddings serve as negatives.
    pub negatives: Vec<usize>,
}

/// Two positive variants for one question: a synonym swap and a structure
/// swap. When one mechanism is impossible the other is drawn twice.
pub fn positive_pair(
    vocab: &VocabSpec,
    counts: &CooccurrenceCounts,
    question: &[String],
    answer: usize,
    rng: &mut ChaCha8Rng,
) -> Result<[Vec<String>; 2]> {
    let keyword = select_keyword(counts, vocab, question, answer);
    let synonym = match &keyword {
        Ok(k) => synonym_counterfactual(vocab, question, k, rng),
        Err(_) => Err(Error::NoSynonym {
            token: "<no keyword>".into(),
        }),
    };
    let structure = structure_counterfactual(vocab, question, rng);
    match (synonym, structure) {
        (Ok(a), Ok(b)) => Ok([a, b]),
        (Ok(a), Err(_)) => {
            let k = keyword.as_ref().expect("synonym swap implies keyword");
            let b = synonym_counterfactual(vocab, question, k, rng)?;
            Ok([a, b])
        }
        (Err(_), Ok(b)) => {
            let a = structure_counterfactual(vocab, question, rng)?;
            Ok([a, b])
        }
        (Err(e), Err(_)) => Err(e),
    }
}

/// Build the contrastive pairing for a batch. Keywords are selected by
/// mutual information against `counts`.
pub fn make_contrastive_pairs(
    batch: &[Sample],
    vocab: &VocabSpec,
    counts: &CooccurrenceCounts,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ContrastiveEntry>> {
    if batch.len() < 2 {
        return Err(Error::InsufficientNegatives { batch: batch.len() });
    }
    let mut out = Vec::with_capacity(batch.len());
    for (i, s) in batch.iter().enumerate() {
        let positives = positive_pair(vocab, counts, &s.question, s.answer, rng)?;
        let negatives = (0..batch.len()).filter(|&j| j != i).collect();
        out.push(ContrastiveEntry {
            anchor: i,
            positives,
            negatives,
        });
    }
    Ok(out)
}

/// User-supplied interchangeability lexicon.
///
/// Line format, tab-separated: `group_id<TAB>entry`. An entry with internal
/// spaces is a structure prefix; a single token is a synonym. Lines starting
/// with `#` and blank lines are ignored.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Lexicon {
    pub synonym_groups: Vec<Vec<String>>,
    pub structure_groups: Vec<Vec<Vec<String>>>,
}

pub fn parse_lexicon(text: &str) -> Result<Lexicon> {
    let mut syn: Vec<(String, Vec<String>)> = Vec::new();
    let mut st: Vec<(String, Vec<Vec<String>>)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, entry) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: "expected `group_id<TAB>entry`".into(),
        })?;
        let entry = entry.trim();
        if entry.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                message: "empty entry".into(),
            });
        }
        if entry.contains(' ') {
            let tokens: Vec<String> = entry.split_whitespace().map(String::from).collect();
            match st.iter_mut().find(|(g, _)| g == id) {
                Some((_, group)) => group.push(tokens),
                None => st.push((id.to_string(), vec![tokens])),
            }
        } else {
            match syn.iter_mut().find(|(g, _)| g == id) {
                Some((_, group)) => group.push(entry.to_string()),
                None => syn.push((id.to_string(), vec![entry.to_string()])),
            }
        }
    }
    Ok(Lexicon {
        synonym_groups: syn.into_iter().map(|(_, g)| g).collect(),
        structure_groups: st.into_iter().map(|(_, g)| g).collect(),
    })
}

/// Rebuild a vocabulary's interchangeability structure from a lexicon.
/// Synonym groups are replaced wholesale; structure groups regroup the
/// existing prefixes (every prefix must be covered). The result is
/// re-validated.
pub fn apply_lexicon(vocab: &VocabSpec, lexicon: &Lexicon) -> Result<VocabSpec> {
    let mut out = vocab.clone();
    if !lexicon.synonym_groups.is_empty() {
        out.synonym_groups = lexicon.synonym_groups.clone();
    }
    if !lexicon.structure_groups.is_empty() {
        let mut equivalence = Vec::new();
        for group in &lexicon.structure_groups {
            let mut ids = Vec::new();
            for prefix in group {
                let id = vocab
                    .prefixes
                    .iter()
                    .position(|p| p == prefix)
                    .ok_or_else(|| Error::Config {
                        field: "lexicon".into(),
                        message: format!("unknown prefix `{}`", prefix.join(" ")),
                    })?;
                ids.push(id);
            }
            equivalence.push(ids);
        }
        out.prefix_equivalence = equivalence;
    }
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::rngutil::stream;
    use crate::scm::{default_scm, generate_dataset, interventional_answer_distribution};
    use crate::vocab::default_vocab;

    fn toks(s: &str) -> Vec<String> {
        s.split(' ').map(String::from).collect()
    }

    #[test]
    fn synonym_swap_replaces_every_occurrence_with_one_partner() {
        let v = default_vocab();
        let mut rng = stream(1, "t", 0);
        let q = toks("is this the banana banana");
        let swapped = synonym_counterfactual(&v, &q, "banana", &mut rng).unwrap();
        assert_eq!(swapped, toks("is this the plantain plantain"));
        assert_eq!(swapped.len(), q.len());
    }

    #[test]
    fn synonym_swap_without_partner_errors() {
        let v = default_vocab();
        let mut rng = stream(1, "t", 0);
        // Prefix tokens have no synonym group.
        assert!(matches!(
            synonym_counterfactual(&v, &toks("is this the banana"), "this", &mut rng),
            Err(Error::NoSynonym { .. })
        ));
    }

    #[test]
    fn structure_swap_stays_in_category_and_keeps_remainder() {
        let v = default_vocab();
        let mut rng = stream(2, "t", 0);
        let q = toks("what color is the banana");
        let swapped = structure_counterfactual(&v, &q, &mut rng).unwrap();
        assert_eq!(swapped, toks("which color is the banana"));
        let (p_orig, _) = v.split_question(&q).unwrap();
        let (p_new, _) = v.split_question(&swapped).unwrap();
        assert_eq!(v.category_of_prefix(p_orig), v.category_of_prefix(p_new));
        assert_ne!(p_orig, p_new);
    }

    #[test]
    fn lone_prefix_has_no_equivalent_structure() {
        let mut v = default_vocab();
        // Make the color pair two singleton groups.
        v.prefix_equivalence = vec![vec![0], vec![1], vec![2, 3], vec![4, 5]];
        v.validate().unwrap();
        let mut rng = stream(3, "t", 0);
        assert!(matches!(
            structure_counterfactual(&v, &toks("what color is the banana"), &mut rng),
            Err(Error::NoEquivalentStructure { .. })
        ));
    }

    #[test]
    fn masking_obeys_the_policy_coins() {
        let v = default_vocab();
        let q = toks("what color is the banana");
        let all = MaskPolicy {
            p_structure: 1.0,
            p_keyword: 1.0,
            guarantee_one: true,
        };
        let mut rng = stream(4, "t", 0);
        let masked = mask_counterfactual(&v, &q, "banana", &all, &mut rng).unwrap();
        assert_eq!(
            masked,
            toks("[MASK] [MASK] [MASK] the [MASK]"),
            "structure and keyword masked, filler untouched"
        );
        assert_eq!(masked.len(), q.len());

        let none = MaskPolicy {
            p_structure: 0.0,
            p_keyword: 0.0,
            guarantee_one: true,
        };
        let mut rng = stream(4, "t", 1);
        let masked = mask_counterfactual(&v, &q, "banana", &none, &mut rng).unwrap();
        assert_eq!(
            masked,
            toks("what color is the [MASK]"),
            "guarantee falls back to masking the keyword"
        );

        let none_free = MaskPolicy {
            guarantee_one: false,
            ..none
        };
        let mut rng = stream(4, "t", 2);
        let masked = mask_counterfactual(&v, &q, "banana", &none_free, &mut rng).unwrap();
        assert_eq!(masked, q, "without the guarantee nothing changes");
    }

    #[test]
    fn masking_is_deterministic_per_stream() {
        let v = default_vocab();
        let q = toks("what color is the banana");
        let policy = MaskPolicy::default();
        let a = mask_counterfactual(&v, &q, "banana", &policy, &mut stream(9, "m", 5)).unwrap();
        let b = mask_counterfactual(&v, &q, "banana", &policy, &mut stream(9, "m", 5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_mask_probabilities_are_rejected() {
        let v = default_vocab();
        let bad = MaskPolicy {
            p_structure: 1.2,
            ..MaskPolicy::default()
        };
        let mut rng = stream(4, "t", 3);
        assert!(matches!(
            mask_counterfactual(&v, &toks("is this the banana"), "banana", &bad, &mut rng),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn contrastive_pairs_give_two_positives_and_the_rest_as_negatives() {
        let cfg = default_scm();
        let d = generate_dataset(&cfg, 8, Split::Train).unwrap();
        let counts = crate::bias::count_cooccurrence(&d).unwrap();
        let mut rng = stream(5, "pairs", 0);
        let entries = make_contrastive_pairs(&d.samples, &d.vocab, &counts, &mut rng).unwrap();
        assert_eq!(entries.len(), 8);
        for (i, e) in entries.iter().enumerate() {
            assert_eq!(e.anchor, i);
            assert_eq!(e.negatives.len(), 7);
            assert!(!e.negatives.contains(&i));
            for p in &e.positives {
                assert_ne!(
                    *p, d.samples[i].question,
                    "positives must differ from the anchor"
                );
                let (prefix, _) = d.vocab.split_question(p).unwrap();
                let (orig, _) = d.vocab.split_question(&d.samples[i].question).unwrap();
                assert_eq!(
                    d.vocab.category_of_prefix(prefix),
                    d.vocab.category_of_prefix(orig)
                );
            }
        }
    }

    #[test]
    fn single_sample_batch_has_no_negatives() {
        let cfg = default_scm();
        let d = generate_dataset(&cfg, 1, Split::Train).unwrap();
        let counts_src = generate_dataset(&cfg, 16, Split::Train).unwrap();
        let counts = crate::bias::count_cooccurrence(&counts_src).unwrap();
        let mut rng = stream(5, "pairs", 1);
        assert!(matches!(
            make_contrastive_pairs(&d.samples, &d.vocab, &counts, &mut rng),
            Err(Error::InsufficientNegatives { batch: 1 })
        ));
    }

    #[test]
    fn swap_failure_falls_back_to_the_other_mechanism() {
        // A raw vocabulary with a singleton synonym group: synonym swaps for
        // that token are impossible, so both positives come from structure
        // swaps.
        let mut v = default_vocab();
        v.synonym_groups = vec![
            vec!["the".into(), "a".into()],
            vec!["banana".into()],
            vec![
                "plantain".into(),
                "plate".into(),
                "dish".into(),
                "grass".into(),
                "lawn".into(),
                "ocean".into(),
                "sea".into(),
            ],
        ];
        let samples = vec![
            Sample {
                question: toks("what color is the banana"),
                qtype: "color".into(),
                answer: 0,
                image: vec![0.0; 16],
            },
            Sample {
                question: toks("what color is the banana"),
                qtype: "color".into(),
                answer: 0,
                image: vec![0.0; 16],
            },
        ];
        // Counts where `banana` carries real information about answer 0 while
        // the filler appears everywhere: banana must win keyword selection.
        let mut counts = CooccurrenceCounts::default();
        counts.answer = vec![2, 0, 0, 0, 0, 0, 0, 0, 0];
        counts.total = 4;
        for t in ["what", "color", "is", "the"] {
            counts.token.insert(t.into(), 4);
            counts.pair.insert((t.into(), 0), 2);
        }
        counts.token.insert("banana".into(), 2);
        counts.pair.insert(("banana".into(), 0), 2);
        let mut rng = stream(6, "pairs", 0);
        let entries = make_contrastive_pairs(&samples, &v, &counts, &mut rng).unwrap();
        for e in &entries {
            for p in &e.positives {
                assert_eq!(
                    &p[..3],
                    &toks("which color is")[..],
                    "both positives are structure swaps"
                );
            }
        }
    }

    #[test]
    fn swaps_preserve_the_interventional_label_law() {
        let cfg = default_scm();
        let d = generate_dataset(&cfg, 12, Split::Train).unwrap();
        let counts = crate::bias::count_cooccurrence(&d).unwrap();
        let mut rng = stream(7, "pairs", 0);
        let entries = make_contrastive_pairs(&d.samples, &d.vocab, &counts, &mut rng).unwrap();
        for e in &entries {
            let s = &d.samples[e.anchor];
            let base = interventional_answer_distribution(&cfg, &s.question, &s.image).unwrap();
            for p in &e.positives {
                let swapped = interventional_answer_distribution(&cfg, p, &s.image).unwrap();
                for a in 0..base.len() {
                    assert!(
                        (base[a] - swapped[a]).abs() < 1e-12,
                        "counterfactual changed the label law"
                    );
                }
            }
        }
    }

    #[test]
    fn lexicon_round_trip_and_application() {
        let text = "# interchangeables\nfruit\tbanana\nfruit\tplantain\nware\tplate\nware\tdish\nturf\tgrass\nturf\tlawn\nwater\tocean\nwater\tsea\ndet\tthe\ndet\ta\ncolorq\twhat color is\ncolorq\twhich color is\nyn\tis this\nyn\tdo you see\ncnt\thow many\ncnt\twhat number of\n";
        let lex = parse_lexicon(text).unwrap();
        assert_eq!(lex.synonym_groups.len(), 5);
        assert_eq!(lex.structure_groups.len(), 3);
        assert_eq!(lex.structure_groups[0][1], toks("which color is"));

        let v = apply_lexicon(&default_vocab(), &lex).unwrap();
        v.validate().unwrap();
        assert_eq!(v.synonym_groups[0], vec!["banana", "plantain"]);

        assert!(matches!(
            parse_lexicon("missing-tab-line\n"),
            Err(Error::Parse { line: 1, .. })
        ));

        let mut bad = lex.clone();
        bad.structure_groups[0].push(toks("where is"));
        assert!(apply_lexicon(&default_vocab(), &bad).is_err());
    }
}
