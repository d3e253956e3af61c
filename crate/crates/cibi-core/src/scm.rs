//! The structural causal model behind the synthetic corpus.
//!
//! A discrete confounder `u` influences both how a question is phrased and
//! which answer tends to co-occur with that phrasing. Each confounder state
//! owns a signature: a question category, a structure-equivalence group, a
//! keyword synonym group, and a preferred answer. On the training split the
//! coupling knobs make the signature pattern and the preferred answer appear
//! together; on the test split the couplings are inactive and answers follow
//! the (shifted) per-category test prior, so superficial question/answer
//! correlations learned from training stop paying off.
//!
//! Images always depict a latent "visual truth" answer. `visual_signal`
//! controls both how cleanly the image encodes it and how often the recorded
//! answer agrees with it, so one knob moves the corpus between "look at the
//! picture" and "guess from the phrasing" regimes.
//!
//! Two exact oracles are derived from the same generative law by enumerating
//! the confounder: the observational conditional weights each confounder
//! state by its posterior given the question and image, while the
//! interventional conditional weights states by their prior, cutting the
//! confounding path.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{quantize9, Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::rngutil::{normal, stream};
use crate::vocab::VocabSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmConfig {
    pub vocab: VocabSpec,
    /// Number of confounder states.
    pub n_confounders: usize,
    /// Prior over confounder states; `None` means uniform.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confounder_prior: Option<Vec<f64>>,
    /// Probability that a coupled sample copies its confounder's full
    /// (structure, keyword) signature pattern and preferred answer.
    pub context_bias: f64,
    /// Probability that only the structure half of the signature is copied.
    pub structure_bias: f64,
    /// Probability that only the keyword half of the signature is copied.
    pub keyword_bias: f64,
    /// Weight of the visual truth in both the image and the recorded answer.
    pub visual_signal: f64,
    /// Base scale of image noise; the effective scale is
    /// `(1 - visual_signal) * noise_std`.
    pub noise_std: f64,
    pub image_dim: usize,
    /// Synonym group used as a determiner between prefix and keyword;
    /// its tokens never serve as keywords.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filler_group: Option<usize>,
    /// Per-category answer distributions for the training split.
    pub train_prior: BTreeMap<String, Vec<f64>>,
    /// Per-category answer distributions for the test split.
    pub test_prior: BTreeMap<String, Vec<f64>>,
    pub seed: u64,
}

/// One confounder state's signature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Signature {
    /// Index into `categories()` order.
    pub category: usize,
    /// Structure-equivalence group id.
    pub equiv_group: usize,
    /// Synonym group id of the preferred keyword group.
    pub keyword_group: usize,
    /// Preferred answer index.
    pub answer: usize,
}

/// A signature expanded to concrete vocabulary items, for reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasedPattern {
    pub category: String,
    pub prefixes: Vec<usize>,
    pub keywords: Vec<String>,
    pub answer: usize,
}

/// Tables derived deterministically from a validated config.
#[derive(Debug, Clone)]
pub(crate) struct Tables {
    pub categories: Vec<String>,
    /// Per category: structure-equivalence group ids belonging to it.
    pub cat_equiv_groups: Vec<Vec<usize>>,
    /// Synonym group ids eligible as keywords (filler excluded).
    pub keyword_groups: Vec<usize>,
    pub signatures: Vec<Signature>,
    pub pi: Vec<f64>,
}

impl ScmConfig {
    pub fn validate(&self) -> Result<()> {
        self.vocab.validate()?;
        if self.n_confounders == 0 {
            return Err(Error::config("n_confounders", "must be at least 1"));
        }
        if let Some(p) = &self.confounder_prior {
            check_distribution("confounder_prior", p, self.n_confounders)?;
        }
        for (name, v) in [
            ("context_bias", self.context_bias),
            ("structure_bias", self.structure_bias),
            ("keyword_bias", self.keyword_bias),
            ("visual_signal", self.visual_signal),
        ] {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                return Err(Error::config(name, format!("must lie in [0, 1], got {v}")));
            }
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::config(
                "noise_std",
                "must be finite and non-negative",
            ));
        }
        if self.image_dim < self.vocab.answers.len() {
            return Err(Error::config(
                "image_dim",
                format!(
                    "must be at least the number of answers ({}) so every answer has its own image direction",
                    self.vocab.answers.len()
                ),
            ));
        }
        if let Some(g) = self.filler_group {
            if g >= self.vocab.synonym_groups.len() {
                return Err(Error::config(
                    "filler_group",
                    format!("group index {g} out of range"),
                ));
            }
            if self.vocab.synonym_groups.len() < 2 {
                return Err(Error::config(
                    "filler_group",
                    "no keyword groups remain besides the filler",
                ));
            }
        }
        let n_answers = self.vocab.answers.len();
        for (field, prior) in [
            ("train_prior", &self.train_prior),
            ("test_prior", &self.test_prior),
        ] {
            for cat in self.vocab.categories() {
                let row = prior
                    .get(&cat)
                    .ok_or_else(|| Error::config(field, format!("missing category `{cat}`")))?;
                check_distribution(&format!("{field}.{cat}"), row, n_answers)?;
            }
        }
        Ok(())
    }

    /// Confounder prior as a dense vector.
    pub fn confounder_pi(&self) -> Vec<f64> {
        match &self.confounder_prior {
            Some(p) => p.clone(),
            None => vec![1.0 / self.n_confounders as f64; self.n_confounders],
        }
    }

    pub fn prior_for(&self, split: Split, category: &str) -> Option<&Vec<f64>> {
        match split {
            Split::Train => self.train_prior.get(category),
            Split::Test => self.test_prior.get(category),
        }
    }

    /// Unit direction in image space associated with an answer.
    pub fn answer_direction(&self, answer: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.image_dim];
        v[answer] = 1.0;
        v
    }

    /// Stable fingerprint of the full config.
    pub fn hash_hex(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", crate::rngutil::fnv1a64(json.as_bytes()))
    }
}

fn check_distribution(field: &str, p: &[f64], expected_len: usize) -> Result<()> {
    if p.len() != expected_len {
        return Err(Error::config(
            field,
            format!("expected {expected_len} entries, got {}", p.len()),
        ));
    }
    if p.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(Error::config(
            field,
            "entries must be finite and non-negative",
        ));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::config(field, format!("must sum to 1, got {sum}")));
    }
    Ok(())
}

impl Tables {
    pub fn build(cfg: &ScmConfig) -> Result<Tables> {
        cfg.validate()?;
        let categories = cfg.vocab.categories();
        let cat_index = |label: &str| categories.iter().position(|c| c == label).unwrap();

        let mut cat_equiv_groups = vec![Vec::new(); categories.len()];
        for (g, group) in cfg.vocab.prefix_equivalence.iter().enumerate() {
            let cat = cat_index(cfg.vocab.category_of_prefix(group[0]));
            cat_equiv_groups[cat].push(g);
        }

        let keyword_groups: Vec<usize> = (0..cfg.vocab.synonym_groups.len())
            .filter(|&g| Some(g) != cfg.filler_group)
            .collect();
        if keyword_groups.is_empty() {
            return Err(Error::config("filler_group", "no keyword groups available"));
        }

        let mut support = Vec::with_capacity(categories.len());
        for cat in &categories {
            let row = &cfg.train_prior[cat];
            let s: Vec<usize> = (0..row.len()).filter(|&a| row[a] > 0.0).collect();
            if s.is_empty() {
                return Err(Error::config(
                    "train_prior",
                    format!("category `{cat}` has empty support"),
                ));
            }
            support.push(s);
        }

        let signatures = (0..cfg.n_confounders)
            .map(|u| {
                let category = u % categories.len();
                let eg = &cat_equiv_groups[category];
                Signature {
                    category,
                    equiv_group: eg[u % eg.len()],
                    keyword_group: keyword_groups[u % keyword_groups.len()],
                    answer: support[category][u % support[category].len()],
                }
            })
            .collect();

        Ok(Tables {
            categories,
            cat_equiv_groups,
            keyword_groups,
            signatures,
            pi: cfg.confounder_pi(),
        })
    }
}

/// Concrete biased patterns implied by the confounder signatures.
pub fn signature_patterns(cfg: &ScmConfig) -> Result<Vec<BiasedPattern>> {
    let t = Tables::build(cfg)?;
    Ok(t.signatures
        .iter()
        .map(|sig| BiasedPattern {
            category: t.categories[sig.category].clone(),
            prefixes: cfg.vocab.prefix_equivalence[sig.equiv_group].clone(),
            keywords: cfg.vocab.synonym_groups[sig.keyword_group].clone(),
            answer: sig.answer,
        })
        .collect())
}

fn draw_categorical(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let x: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last = i;
            acc += w;
            if x < acc {
                return i;
            }
        }
    }
    last
}

fn uniform_pick<T: Copy>(rng: &mut ChaCha8Rng, items: &[T]) -> T {
    items[rng.gen_range(0..items.len())]
}

/// Generate `n` samples. Each sample is produced from its own random stream
/// derived from `(seed, split, index)`, so the result does not depend on
/// evaluation order or worker count.
pub fn generate_dataset(cfg: &ScmConfig, n: usize, split: Split) -> Result<Dataset> {
    let t = Tables::build(cfg)?;
    let samples: Vec<Sample> = (0..n)
        .map(|i| generate_sample(cfg, &t, split, i as u64))
        .collect();
    Ok(Dataset {
        samples,
        vocab: cfg.vocab.clone(),
        split,
    })
}

fn generate_sample(cfg: &ScmConfig, t: &Tables, split: Split, index: u64) -> Sample {
    let mut rng = stream(cfg.seed, &format!("gen/{split}"), index);

    let cat = rng.gen_range(0..t.categories.len());
    let u = draw_categorical(&mut rng, &t.pi);
    let sig = t.signatures[u];

    // Coupling is a training-split phenomenon: the test split keeps the same
    // vocabulary and image model but breaks the question/answer shortcut.
    let coupled = split == Split::Train && sig.category == cat;
    let ctx = coupled && rng.gen_bool(cfg.context_bias);
    let str_f = coupled && rng.gen_bool(cfg.structure_bias);
    let kw_f = coupled && rng.gen_bool(cfg.keyword_bias);

    let (equiv_group, keyword_group, fired) = if ctx {
        (sig.equiv_group, sig.keyword_group, true)
    } else {
        let eg = if str_f {
            sig.equiv_group
        } else {
            uniform_pick(&mut rng, &t.cat_equiv_groups[cat])
        };
        let kg = if kw_f {
            sig.keyword_group
        } else {
            uniform_pick(&mut rng, &t.keyword_groups)
        };
        (eg, kg, str_f || kw_f)
    };

    let prefix = uniform_pick(&mut rng, &cfg.vocab.prefix_equivalence[equiv_group]);
    let kw_tokens = &cfg.vocab.synonym_groups[keyword_group];
    let keyword = kw_tokens[rng.gen_range(0..kw_tokens.len())].clone();
    let mut question = cfg.vocab.prefixes[prefix].clone();
    if let Some(fg) = cfg.filler_group {
        let fillers = &cfg.vocab.synonym_groups[fg];
        question.push(fillers[rng.gen_range(0..fillers.len())].clone());
    }
    question.push(keyword);

    let category = &t.categories[cat];
    let prior = cfg.prior_for(split, category).expect("validated prior");
    let one_hot;
    let answer_law: &[f64] = if fired {
        let mut v = vec![0.0; cfg.vocab.answers.len()];
        v[sig.answer] = 1.0;
        one_hot = v;
        &one_hot
    } else {
        prior
    };

    let visual_truth = draw_categorical(&mut rng, answer_law);
    let grounded = rng.gen_bool(cfg.visual_signal);
    let answer = if grounded {
        visual_truth
    } else {
        draw_categorical(&mut rng, answer_law)
    };

    let sigma = (1.0 - cfg.visual_signal) * cfg.noise_std;
    let mut image = Vec::with_capacity(cfg.image_dim);
    for d in 0..cfg.image_dim {
        let signal = if d == visual_truth {
            cfg.visual_signal
        } else {
            0.0
        };
        image.push(quantize9(signal + sigma * normal(&mut rng)));
    }

    Sample {
        question,
        qtype: category.clone(),
        answer,
        image,
    }
}

/// The parsed generative reading of a question.
struct ParsedQuestion {
    category: usize,
    equiv_group: usize,
    keyword_group: usize,
}

fn parse_question(cfg: &ScmConfig, t: &Tables, question: &[String]) -> Result<ParsedQuestion> {
    let (prefix, remainder) = cfg.vocab.split_question(question)?;
    let expected = 1 + usize::from(cfg.filler_group.is_some());
    if remainder.len() != expected {
        return Err(Error::MalformedQuestion {
            reason: format!(
                "expected {expected} token(s) after the prefix, got {}",
                remainder.len()
            ),
        });
    }
    let mut iter = remainder.iter();
    if let Some(fg) = cfg.filler_group {
        let filler = iter.next().unwrap();
        let g = cfg
            .vocab
            .synonym_group_of(filler)
            .ok_or_else(|| Error::Vocabulary {
                token: filler.clone(),
            })?;
        if g != fg {
            return Err(Error::MalformedQuestion {
                reason: format!("`{filler}` is not a filler token"),
            });
        }
    }
    let keyword = iter.next().unwrap();
    let kg = cfg
        .vocab
        .synonym_group_of(keyword)
        .ok_or_else(|| Error::Vocabulary {
            token: keyword.clone(),
        })?;
    if !t.keyword_groups.contains(&kg) {
        return Err(Error::MalformedQuestion {
            reason: format!("`{keyword}` is a filler token, not a keyword"),
        });
    }
    let category = t
        .categories
        .iter()
        .position(|c| c == cfg.vocab.category_of_prefix(prefix))
        .unwrap();
    Ok(ParsedQuestion {
        category,
        equiv_group: cfg.vocab.equivalence_group_of(prefix).unwrap(),
        keyword_group: kg,
    })
}

/// Per-confounder joint weights `J[u][a]` proportional to
/// `P(question, image, answer | u)` under the training-split law. Factors
/// that do not depend on `(u, answer)` are dropped; both oracles normalize
/// them away.
fn joint_weights(
    cfg: &ScmConfig,
    t: &Tables,
    q: &ParsedQuestion,
    image: &[f64],
) -> Result<Vec<Vec<f64>>> {
    if image.len() != cfg.image_dim {
        return Err(Error::Shape {
            what: "image".into(),
            expected: cfg.image_dim,
            found: image.len(),
        });
    }

    let n_answers = cfg.vocab.answers.len();
    let w = cfg.visual_signal;
    let sigma = (1.0 - w) * cfg.noise_std;

    // Relative likelihood of the image given each candidate visual truth.
    // Computed in log space and shifted by the max; the common factor cancels
    // in every normalization below.
    let mut phi = vec![0.0; n_answers];
    if sigma > 0.0 {
        let inv = 1.0 / (2.0 * sigma * sigma);
        let mut logs = Vec::with_capacity(n_answers);
        for a in 0..n_answers {
            let mut d2 = 0.0;
            for (i, &x) in image.iter().enumerate() {
                let mu = if i == a { w } else { 0.0 };
                d2 += (x - mu) * (x - mu);
            }
            logs.push(-d2 * inv);
        }
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for a in 0..n_answers {
            phi[a] = (logs[a] - m).exp();
        }
    } else {
        for a in 0..n_answers {
            let exact = image.iter().enumerate().all(|(i, &x)| {
                let mu = if i == a { w } else { 0.0 };
                (x - mu).abs() < 1e-9
            });
            phi[a] = if exact { 1.0 } else { 0.0 };
        }
        if phi.iter().all(|&p| p == 0.0) {
            return Err(Error::MalformedQuestion {
                reason: "image does not match any noise-free answer direction".into(),
            });
        }
    }

    let prior = &cfg.train_prior[&t.categories[q.category]];
    let prior_phi: f64 = (0..n_answers).map(|a| prior[a] * phi[a]).sum();
    let n_sg = t.cat_equiv_groups[q.category].len() as f64;
    let n_kg = t.keyword_groups.len() as f64;
    let (bc, bs, bk) = (cfg.context_bias, cfg.structure_bias, cfg.keyword_bias);

    let mut joint = vec![vec![0.0; n_answers]; cfg.n_confounders];
    for (u, row) in joint.iter_mut().enumerate() {
        let sig = t.signatures[u];
        let coupled = sig.category == q.category;
        let (fired_mass, plain_mass) = if coupled {
            let ms = sig.equiv_group == q.equiv_group;
            let mk = sig.keyword_group == q.keyword_group;
            let s_sig = if ms { bs } else { 0.0 };
            let s_uni = (1.0 - bs) / n_sg;
            let k_sig = if mk { bk } else { 0.0 };
            let k_uni = (1.0 - bk) / n_kg;
            let ctx = if ms && mk { bc } else { 0.0 };
            let fired = ctx + (1.0 - bc) * (s_sig * k_sig + s_sig * k_uni + s_uni * k_sig);
            let plain = (1.0 - bc) * s_uni * k_uni;
            (fired, plain)
        } else {
            (0.0, 1.0 / (n_sg * n_kg))
        };

        for a in 0..n_answers {
            // When the coupling fires, the answer law is a point mass on the
            // signature answer, so visual truth and recorded answer coincide.
            let fired_term = if a == sig.answer {
                fired_mass * phi[sig.answer]
            } else {
                0.0
            };
            let plain_term = plain_mass * prior[a] * (w * phi[a] + (1.0 - w) * prior_phi);
            row[a] = fired_term + plain_term;
        }
    }
    Ok(joint)
}

/// Exact `P(answer | question, image)` under the training-split law:
/// confounder states weighted by their posterior given the evidence.
pub fn observational_answer_distribution(
    cfg: &ScmConfig,
    question: &[String],
    image: &[f64],
) -> Result<Vec<f64>> {
    let t = Tables::build(cfg)?;
    let q = parse_question(cfg, &t, question)?;
    let joint = joint_weights(cfg, &t, &q, image)?;
    let n_answers = cfg.vocab.answers.len();
    let mut out = vec![0.0; n_answers];
    for (u, row) in joint.iter().enumerate() {
        for a in 0..n_answers {
            out[a] += t.pi[u] * row[a];
        }
    }
    normalize(&mut out)?;
    Ok(out)
}

/// Exact `P(answer | do(question), image)` under the training-split law:
/// the per-confounder conditionals averaged under the confounder prior, which
/// removes the dependence of the confounder on the question.
pub fn interventional_answer_distribution(
    cfg: &ScmConfig,
    question: &[String],
    image: &[f64],
) -> Result<Vec<f64>> {
    let t = Tables::build(cfg)?;
    let q = parse_question(cfg, &t, question)?;
    let joint = joint_weights(cfg, &t, &q, image)?;
    let n_answers = cfg.vocab.answers.len();
    let mut out = vec![0.0; n_answers];
    let mut mass = 0.0;
    for (u, row) in joint.iter().enumerate() {
        let rowsum: f64 = row.iter().sum();
        // A state that cannot produce this evidence at all has no defined
        // conditional; it is dropped and the prior renormalized over the rest.
        if rowsum > 0.0 {
            mass += t.pi[u];
            for a in 0..n_answers {
                out[a] += t.pi[u] * row[a] / rowsum;
            }
        }
    }
    if mass <= 0.0 {
        return Err(Error::MalformedQuestion {
            reason: "evidence impossible under every confounder state".into(),
        });
    }
    for x in &mut out {
        *x /= mass;
    }
    Ok(out)
}

fn normalize(v: &mut [f64]) -> Result<()> {
    let sum: f64 = v.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return Err(Error::MalformedQuestion {
            reason: "evidence has zero probability under the model".into(),
        });
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
    Ok(())
}

/// Deterministic pattern-balanced probe set: `(question, image)` pairs that
/// cycle through every concrete (prefix, keyword) combination, with images
/// drawn from the training-split image law for the prefix's category.
pub fn probe_set(cfg: &ScmConfig, count: usize, seed: u64) -> Result<Vec<(Vec<String>, Vec<f64>)>> {
    let t = Tables::build(cfg)?;
    let keywords: Vec<&String> = t
        .keyword_groups
        .iter()
        .flat_map(|&g| cfg.vocab.synonym_groups[g].iter())
        .collect();
    let n_pairs = cfg.vocab.prefixes.len() * keywords.len();
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let pair = i % n_pairs;
        let prefix = pair / keywords.len();
        let keyword = keywords[pair % keywords.len()];
        let mut question = cfg.vocab.prefixes[prefix].clone();
        let mut rng = stream(seed, "probe", i as u64);
        if let Some(fg) = cfg.filler_group {
            let fillers = &cfg.vocab.synonym_groups[fg];
            question.push(fillers[rng.gen_range(0..fillers.len())].clone());
        }
        question.push(keyword.clone());

        let category = cfg.vocab.category_of_prefix(prefix).to_string();
        let prior = &cfg.train_prior[&category];
        let visual_truth = draw_categorical(&mut rng, prior);
        let sigma = (1.0 - cfg.visual_signal) * cfg.noise_std;
        let mut image = Vec::with_capacity(cfg.image_dim);
        for d in 0..cfg.image_dim {
            let signal = if d == visual_truth {
                cfg.visual_signal
            } else {
                0.0
            };
            image.push(quantize9(signal + sigma * normal(&mut rng)));
        }
        out.push((question, image));
    }
    Ok(out)
}

/// The stock configuration: three categories with shifted priors between the
/// splits, four confounder states, and a strong context coupling.
pub fn default_scm() -> ScmConfig {
    let vocab = crate::vocab::default_vocab();
    let mk = |pairs: &[(&str, f64)]| {
        let mut row = vec![0.0; vocab.answers.len()];
        for (label, p) in pairs {
            let i = vocab.answer_index(label).expect("known answer");
            row[i] = *p;
        }
        row
    };
    let mut train_prior = BTreeMap::new();
    let mut test_prior = BTreeMap::new();
    train_prior.insert(
        "color".to_string(),
        mk(&[
            ("yellow", 0.4),
            ("white", 0.3),
            ("green", 0.2),
            ("blue", 0.1),
        ]),
    );
    test_prior.insert(
        "color".to_string(),
        mk(&[
            ("yellow", 0.1),
            ("white", 0.2),
            ("green", 0.3),
            ("blue", 0.4),
        ]),
    );
    train_prior.insert("yesno".to_string(), mk(&[("yes", 0.9), ("no", 0.1)]));
    test_prior.insert("yesno".to_string(), mk(&[("yes", 0.5), ("no", 0.5)]));
    train_prior.insert(
        "count".to_string(),
        mk(&[("one", 0.7), ("two", 0.2), ("three", 0.1)]),
    );
    test_prior.insert(
        "count".to_string(),
        mk(&[("one", 0.2), ("two", 0.3), ("three", 0.5)]),
    );

    ScmConfig {
        vocab,
        n_confounders: 4,
        confounder_prior: None,
        context_bias: 0.8,
        structure_bias: 0.0,
        keyword_bias: 0.0,
        visual_signal: 0.7,
        noise_std: 1.0,
        image_dim: 16,
        filler_group: Some(0),
        train_prior,
        test_prior,
        seed: 17,
    }
}
