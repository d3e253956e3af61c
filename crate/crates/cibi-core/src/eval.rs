//! Evaluation: accuracy reports, answer-distribution recovery, alignment
//! with the interventional law, ablations, and a lambda sweep. All outputs
//! are plain data with deterministic renderings.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::bias::{context_pattern, count_cooccurrence, CooccurrenceCounts};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::scm::{
    generate_dataset, interventional_answer_distribution, probe_set, signature_patterns, ScmConfig,
};
use crate::trainer::{TrainConfig, Trainer};

/// Total variation distance between two distributions on the same support.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape {
            what: "distribution pair".into(),
            expected: p.len(),
            found: q.len(),
        });
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// KL divergence with both arguments floored at 1e-12 and renormalized, so
/// empirical distributions with empty cells stay comparable.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape {
            what: "distribution pair".into(),
            expected: p.len(),
            found: q.len(),
        });
    }
    let floor = |xs: &[f64]| -> Vec<f64> {
        let raised: Vec<f64> = xs.iter().map(|&x| x.max(1e-12)).collect();
        let z: f64 = raised.iter().sum();
        raised.into_iter().map(|x| x / z).collect()
    };
    let fp = floor(p);
    let fq = floor(q);
    Ok(fp
        .iter()
        .zip(&fq)
        .map(|(a, b)| a * (a / b).ln())
        .sum::<f64>())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QtypeStats {
    pub n: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub version: String,
    pub seed: u64,
    pub epochs_completed: usize,
    pub use_context_branch: bool,
    pub use_question_only_branch: bool,
    pub vocab_hash: String,
}

impl RunMeta {
    fn from_trainer(t: &Trainer) -> Self {
        RunMeta {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: t.cfg.seed,
            epochs_completed: t.epoch,
            use_context_branch: t.cfg.use_context_branch,
            use_question_only_branch: t.cfg.use_question_only_branch,
            vocab_hash: t.vocab.hash_hex(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub n: usize,
    pub accuracy: f64,
    /// Mean negative log probability of the recorded answer.
    pub log_loss: f64,
    pub per_qtype: BTreeMap<String, QtypeStats>,
    pub meta: RunMeta,
}

pub fn evaluate(t: &Trainer, data: &Dataset) -> Result<EvalReport> {
    if data.vocab.hash_hex() != t.vocab.hash_hex() {
        return Err(Error::Compatibility {
            message: "evaluation dataset vocabulary differs from the model's".into(),
        });
    }
    if data.samples.is_empty() {
        return Err(Error::EmptyInput {
            what: "evaluation dataset".into(),
        });
    }
    let mut correct = 0usize;
    let mut log_loss = 0.0;
    let mut per: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for s in &data.samples {
        let dist = t.predict_distribution(&s.question, &s.image)?;
        let pred = argmax(&dist);
        let hit = pred == s.answer;
        correct += hit as usize;
        log_loss -= dist[s.answer].max(1e-12).ln();
        let e = per.entry(s.qtype.clone()).or_insert((0, 0));
        e.0 += 1;
        e.1 += hit as usize;
    }
    let n = data.samples.len();
    Ok(EvalReport {
        split: data.split,
        n,
        accuracy: correct as f64 / n as f64,
        log_loss: log_loss / n as f64,
        per_qtype: per
            .into_iter()
            .map(|(k, (cnt, hits))| {
                (
                    k,
                    QtypeStats {
                        n: cnt,
                        accuracy: hits as f64 / cnt as f64,
                    },
                )
            })
            .collect(),
        meta: RunMeta::from_trainer(t),
    })
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Per-pattern comparison of the model's mean test-split prediction against
/// the training-set frequency and the test-split prior.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatternRecovery {
    /// `prefix + keyword` rendered as text.
    pub pattern: String,
    pub qtype: String,
    /// Whether the pattern carries a training-split coupling.
    pub biased: bool,
    pub n: usize,
    pub mean_prediction: Vec<f64>,
    pub tv_to_train_frequency: f64,
    pub tv_to_test_prior: f64,
}

fn grouped_frequencies(
    data: &Dataset,
    counts: &CooccurrenceCounts,
) -> Result<BTreeMap<(usize, String), (Vec<f64>, usize)>> {
    let mut groups: BTreeMap<(usize, String), (Vec<u64>, usize)> = BTreeMap::new();
    for s in &data.samples {
        let p = context_pattern(counts, &data.vocab, &s.question, s.answer)?;
        let e = groups
            .entry((p.prefix, p.keyword))
            .or_insert_with(|| (vec![0; data.vocab.answers.len()], 0));
        e.0[s.answer] += 1;
        e.1 += 1;
    }
    Ok(groups
        .into_iter()
        .map(|(k, (freq, n))| {
            let dist = freq.iter().map(|&c| c as f64 / n as f64).collect();
            (k, (dist, n))
        })
        .collect())
}

pub fn distribution_recovery(
    t: &Trainer,
    scm: &ScmConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<Vec<PatternRecovery>> {
    let train_counts = count_cooccurrence(train)?;
    let train_groups = grouped_frequencies(train, &train_counts)?;
    let patterns = signature_patterns(scm)?;

    let mut groups: BTreeMap<(usize, String), (Vec<f64>, usize)> = BTreeMap::new();
    for s in &test.samples {
        let p = context_pattern(&train_counts, &test.vocab, &s.question, s.answer)?;
        let dist = t.predict_distribution(&s.question, &s.image)?;
        let e = groups
            .entry((p.prefix, p.keyword))
            .or_insert_with(|| (vec![0.0; test.vocab.answers.len()], 0));
        for (acc, d) in e.0.iter_mut().zip(&dist) {
            *acc += d;
        }
        e.1 += 1;
    }

    let mut out = Vec::new();
    for ((prefix, keyword), (sum, n)) in groups {
        let mean: Vec<f64> = sum.iter().map(|x| x / n as f64).collect();
        let category = t.vocab.category_of_prefix(prefix).to_string();
        let test_prior = scm
            .prior_for(Split::Test, &category)
            .ok_or_else(|| Error::state(format!("no test prior for category {category}")))?;
        let train_freq = match train_groups.get(&(prefix, keyword.clone())) {
            Some((dist, _)) => dist.clone(),
            None => {
                // The pattern never occurs in training; fall back to the
                // category's training frequency.
                let mut freq = vec![0u64; train.vocab.answers.len()];
                let mut cnt = 0u64;
                for s in train.samples.iter().filter(|s| s.qtype == category) {
                    freq[s.answer] += 1;
                    cnt += 1;
                }
                if cnt == 0 {
                    test_prior.clone()
                } else {
                    freq.iter().map(|&c| c as f64 / cnt as f64).collect()
                }
            }
        };
        let biased = patterns
            .iter()
            .any(|p| p.prefixes.contains(&prefix) && p.keywords.contains(&keyword));
        out.push(PatternRecovery {
            pattern: format!("{} + {}", t.vocab.prefixes[prefix].join(" "), keyword),
            qtype: category,
            biased,
            n,
            tv_to_train_frequency: tv_distance(&mean, &train_freq)?,
            tv_to_test_prior: tv_distance(&mean, test_prior)?,
            mean_prediction: mean,
        });
    }
    Ok(out)
}

/// Mean KL divergence from the interventional answer law to the model's
/// prediction over a deterministic probe set.
pub fn interventional_alignment(
    t: &Trainer,
    scm: &ScmConfig,
    n_probes: usize,
    probe_seed: u64,
) -> Result<f64> {
    let probes = probe_set(scm, n_probes, probe_seed)?;
    if probes.is_empty() {
        return Err(Error::EmptyInput {
            what: "probe set".into(),
        });
    }
    let mut total = 0.0;
    for (question, image) in &probes {
        let oracle = interventional_answer_distribution(scm, question, image)?;
        let model = t.predict_distribution(question, image)?;
        total += kl_divergence(&oracle, &model)?;
    }
    Ok(total / probes.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub use_context_branch: bool,
    pub use_question_only_branch: bool,
    pub test_accuracy: f64,
    pub test_log_loss: f64,
    pub interventional_kl: f64,
}

/// Train the four branch combinations on one dataset pair and score them.
pub fn run_ablation(
    base: &TrainConfig,
    scm: &ScmConfig,
    n_train: usize,
    n_test: usize,
    n_probes: usize,
) -> Result<Vec<AblationRow>> {
    let train = generate_dataset(scm, n_train, Split::Train)?;
    let test = generate_dataset(scm, n_test, Split::Test)?;
    let variants = [
        ("plain", false, false),
        ("contrastive-only", true, false),
        ("masked-only", false, true),
        ("full", true, true),
    ];
    let mut rows = Vec::with_capacity(variants.len());
    for (name, ctx, qonly) in variants {
        let cfg = TrainConfig {
            use_context_branch: ctx,
            use_question_only_branch: qonly,
            ..base.clone()
        };
        let mut t = Trainer::new(cfg, &train)?;
        t.train(&train)?;
        let report = evaluate(&t, &test)?;
        let kl = interventional_alignment(&t, scm, n_probes, base.seed)?;
        rows.push(AblationRow {
            name: name.to_string(),
            use_context_branch: ctx,
            use_question_only_branch: qonly,
            test_accuracy: report.accuracy,
            test_log_loss: report.log_loss,
            interventional_kl: kl,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub test_accuracy: f64,
    pub test_log_loss: f64,
}

/// Train the full model at each contrastive weight and score it.
pub fn lambda_sweep(
    base: &TrainConfig,
    scm: &ScmConfig,
    lambdas: &[f64],
    n_train: usize,
    n_test: usize,
) -> Result<Vec<SweepRow>> {
    let train = generate_dataset(scm, n_train, Split::Train)?;
    let test = generate_dataset(scm, n_test, Split::Test)?;
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let cfg = TrainConfig {
            lambda,
            use_context_branch: true,
            use_question_only_branch: true,
            ..base.clone()
        };
        let mut t = Trainer::new(cfg, &train)?;
        t.train(&train)?;
        let report = evaluate(&t, &test)?;
        rows.push(SweepRow {
            lambda,
            test_accuracy: report.accuracy,
            test_log_loss: report.log_loss,
        });
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:<18} {:>8} {:>8} {:>10} {:>10} {:>12}\n",
        "model", "context", "masked", "accuracy", "log-loss", "interv-kl"
    ));
    for r in rows {
        s.push_str(&format!(
            "{:<18} {:>8} {:>8} {:>10.4} {:>10.4} {:>12.4}\n",
            r.name,
            r.use_context_branch,
            r.use_question_only_branch,
            r.test_accuracy,
            r.test_log_loss,
            r.interventional_kl
        ));
    }
    s
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:<8} {:>10} {:>10}\n",
        "lambda", "accuracy", "log-loss"
    ));
    for r in rows {
        s.push_str(&format!(
            "{:<8.3} {:>10.4} {:>10.4}\n",
            r.lambda, r.test_accuracy, r.test_log_loss
        ));
    }
    s
}

pub fn recovery_table(rows: &[PatternRecovery]) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:<36} {:<8} {:>6} {:>5} {:>10} {:>10}\n",
        "pattern", "qtype", "biased", "n", "tv-train", "tv-test"
    ));
    for r in rows {
        s.push_str(&format!(
            "{:<36} {:<8} {:>6} {:>5} {:>10.4} {:>10.4}\n",
            r.pattern, r.qtype, r.biased, r.n, r.tv_to_train_frequency, r.tv_to_test_prior
        ));
    }
    s
}

pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "model",
        "use_context_branch",
        "use_question_only_branch",
        "test_accuracy",
        "test_log_loss",
        "interventional_kl",
    ])
    .map_err(csv_err)?;
    for r in rows {
        wtr.write_record([
            r.name.clone(),
            r.use_context_branch.to_string(),
            r.use_question_only_branch.to_string(),
            format!("{:.6}", r.test_accuracy),
            format!("{:.6}", r.test_log_loss),
            format!("{:.6}", r.interventional_kl),
        ])
        .map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["lambda", "test_accuracy", "test_log_loss"])
        .map_err(csv_err)?;
    for r in rows {
        wtr.write_record([
            format!("{:.6}", r.lambda),
            format!("{:.6}", r.test_accuracy),
            format!("{:.6}", r.test_log_loss),
        ])
        .map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_recovery_csv<W: Write>(rows: &[PatternRecovery], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "pattern",
        "qtype",
        "biased",
        "n",
        "tv_to_train_frequency",
        "tv_to_test_prior",
    ])
    .map_err(csv_err)?;
    for r in rows {
        wtr.write_record([
            r.pattern.clone(),
            r.qtype.clone(),
            r.biased.to_string(),
            r.n.to_string(),
            format!("{:.6}", r.tv_to_train_frequency),
            format!("{:.6}", r.tv_to_test_prior),
        ])
        .map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::state(format!("csv output: {e}"))
}

pub fn report_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::state(format!("json output: {e}")))
}
