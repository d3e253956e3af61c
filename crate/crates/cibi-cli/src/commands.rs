//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use cibi_core::bias::{
    answer_prior, context_pattern, count_cooccurrence, top_mi_tokens, ContextPattern, PriorKey,
};
use cibi_core::data::{load_dataset, save_dataset, Split};
use cibi_core::eval::{
    ablation_table, distribution_recovery, evaluate, interventional_alignment, lambda_sweep,
    recovery_table, report_json, run_ablation, sweep_table, write_ablation_csv, write_recovery_csv,
    write_sweep_csv, AblationRow, EvalReport, PatternRecovery, SweepRow,
};
use cibi_core::scm::generate_dataset;
use cibi_core::trainer::Trainer;

use crate::config::{resolve, Resolved};
use crate::fail::{validation, CliError};
use crate::outln;

pub const RESOLVED_CONFIG: &str = "config.toml";

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::runtime(format!("creating {}: {e}", dir.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = report_json(value).map_err(CliError::from)?;
    fs::write(path, text + "\n")
        .map_err(|e| CliError::runtime(format!("writing {}: {e}", path.display())))?;
    Ok(())
}

fn flag_list(pairs: &[(&'static str, Option<String>)]) -> Vec<(&'static str, String)> {
    pairs
        .iter()
        .filter_map(|(k, v)| v.clone().map(|v| (*k, v)))
        .collect()
}

pub struct GenArgs {
    pub config: Option<PathBuf>,
    pub n: usize,
    pub split: Split,
    pub out: PathBuf,
    pub seed: Option<String>,
}

pub fn gen(args: GenArgs) -> Result<(), CliError> {
    let flags = flag_list(&[("scm.seed", args.seed.clone())]);
    let (cfg, prov) = resolve(args.config.as_deref(), &flags)?;
    let data = generate_dataset(&cfg.scm, args.n, args.split)?;
    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            ensure_dir(dir)?;
        }
    }
    save_dataset(&data, &args.out)?;
    let invocation = [
        ("subcommand", "gen".to_string()),
        ("n", args.n.to_string()),
        ("split", args.split.to_string()),
        ("out", args.out.display().to_string()),
    ];
    let sidecar = args.out.with_extension("config.toml");
    Resolved::new(&cfg, &prov, &invocation).write(&sidecar)?;
    outln!(
        "wrote {} {} samples to {} (config: {})",
        data.samples.len(),
        args.split,
        args.out.display(),
        sidecar.display()
    );
    Ok(())
}

pub struct AnalyzeArgs {
    pub config: Option<PathBuf>,
    pub data: PathBuf,
    pub out: PathBuf,
    pub top_k: Option<String>,
}

#[derive(Serialize)]
struct PatternSummary {
    prefix: String,
    keyword: String,
    count: usize,
    prior: Vec<f64>,
}

#[derive(Serialize)]
struct AnalyzeSummary {
    n_samples: usize,
    answers: Vec<String>,
    patterns: Vec<PatternSummary>,
    top_mi: BTreeMap<String, Vec<(String, f64)>>,
}

pub fn analyze(args: AnalyzeArgs) -> Result<(), CliError> {
    let flags = flag_list(&[("eval.top_k", args.top_k.clone())]);
    let (cfg, prov) = resolve(args.config.as_deref(), &flags)?;
    let data = load_dataset(&args.data)?;
    let counts = count_cooccurrence(&data)?;
    let vocab = &data.vocab;

    let mut pattern_counts: BTreeMap<(usize, String), usize> = BTreeMap::new();
    for s in &data.samples {
        let p = context_pattern(&counts, vocab, &s.question, s.answer)?;
        *pattern_counts.entry((p.prefix, p.keyword)).or_default() += 1;
    }
    let mut patterns = Vec::new();
    for (&(prefix, ref keyword), &count) in &pattern_counts {
        let key = PriorKey::Pattern(ContextPattern {
            prefix,
            keyword: keyword.clone(),
        });
        patterns.push(PatternSummary {
            prefix: vocab.prefixes[prefix].join(" "),
            keyword: keyword.clone(),
            count,
            prior: answer_prior(&data, &key)?,
        });
    }

    let mut top_mi = BTreeMap::new();
    for (a, label) in vocab.answers.iter().enumerate() {
        top_mi.insert(
            label.clone(),
            top_mi_tokens(&counts, a, cfg.eval.top_k, vocab)?,
        );
    }

    ensure_dir(&args.out)?;
    let mut w = csv::Writer::from_path(args.out.join("priors.csv"))
        .map_err(|e| CliError::runtime(e.to_string()))?;
    let mut header = vec![
        "prefix".to_string(),
        "keyword".to_string(),
        "count".to_string(),
    ];
    header.extend(vocab.answers.iter().cloned());
    w.write_record(&header)
        .map_err(|e| CliError::runtime(e.to_string()))?;
    for p in &patterns {
        let mut rec = vec![p.prefix.clone(), p.keyword.clone(), p.count.to_string()];
        rec.extend(p.prior.iter().map(|x| format!("{x:.6}")));
        w.write_record(&rec)
            .map_err(|e| CliError::runtime(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::runtime(e.to_string()))?;

    let mut w = csv::Writer::from_path(args.out.join("mi_tokens.csv"))
        .map_err(|e| CliError::runtime(e.to_string()))?;
    w.write_record(["answer", "rank", "token", "mi"])
        .map_err(|e| CliError::runtime(e.to_string()))?;
    for (label, rows) in &top_mi {
        for (rank, (token, mi)) in rows.iter().enumerate() {
            w.write_record([label, &(rank + 1).to_string(), token, &format!("{mi:.6}")])
                .map_err(|e| CliError::runtime(e.to_string()))?;
        }
    }
    w.flush().map_err(|e| CliError::runtime(e.to_string()))?;

    let summary = AnalyzeSummary {
        n_samples: data.samples.len(),
        answers: vocab.answers.clone(),
        patterns,
        top_mi,
    };
    write_json(&args.out.join("summary.json"), &summary)?;
    let invocation = [
        ("subcommand", "analyze".to_string()),
        ("data", args.data.display().to_string()),
        ("out", args.out.display().to_string()),
    ];
    Resolved::new(&cfg, &prov, &invocation).write(&args.out.join(RESOLVED_CONFIG))?;

    outln!(
        "analyzed {} samples: {} context patterns, reports in {}",
        summary.n_samples,
        summary.patterns.len(),
        args.out.display()
    );
    for p in summary.patterns.iter().take(8) {
        let best = p
            .prior
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, f)| format!("{} {:.3}", summary.answers[i], f))
            .unwrap_or_default();
        outln!(
            "  [{} | {}] n={} top answer: {}",
            p.prefix,
            p.keyword,
            p.count,
            best
        );
    }
    Ok(())
}

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub data: PathBuf,
    pub out: PathBuf,
    pub seed: Option<String>,
    pub lambda: Option<String>,
    pub tau: Option<String>,
    pub epochs: Option<String>,
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";

pub fn train(args: TrainArgs) -> Result<(), CliError> {
    let flags = flag_list(&[
        ("train.seed", args.seed.clone()),
        ("train.lambda", args.lambda.clone()),
        ("train.tau", args.tau.clone()),
        ("train.epochs", args.epochs.clone()),
    ]);
    let (cfg, prov) = resolve(args.config.as_deref(), &flags)?;
    let data = load_dataset(&args.data)?;
    let mut t = Trainer::new(cfg.train.clone(), &data)?;
    t.train(&data)?;

    ensure_dir(&args.out)?;
    let ckpt_path = args.out.join(CHECKPOINT_FILE);
    let mut w = BufWriter::new(File::create(&ckpt_path)?);
    t.save_checkpoint(&mut w)?;
    w.flush().map_err(CliError::from)?;

    let mut w = csv::Writer::from_path(args.out.join("loss_trace.csv"))
        .map_err(|e| CliError::runtime(e.to_string()))?;
    w.write_record([
        "epoch",
        "contrastive",
        "debiased_vqa",
        "question_only",
        "total",
    ])
    .map_err(|e| CliError::runtime(e.to_string()))?;
    for (epoch, b) in t.loss_trace.iter().enumerate() {
        w.write_record([
            epoch.to_string(),
            format!("{:.6}", b.contrastive),
            format!("{:.6}", b.debiased_vqa),
            format!("{:.6}", b.question_only),
            format!("{:.6}", b.total),
        ])
        .map_err(|e| CliError::runtime(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::runtime(e.to_string()))?;

    let invocation = [
        ("subcommand", "train".to_string()),
        ("data", args.data.display().to_string()),
        ("out", args.out.display().to_string()),
    ];
    Resolved::new(&cfg, &prov, &invocation).write(&args.out.join(RESOLVED_CONFIG))?;

    let last = t.loss_trace.last();
    outln!(
        "trained {} epochs on {} samples; final loss {} -> {}",
        t.epoch,
        data.samples.len(),
        last.map_or("n/a".into(), |b| format!("{:.4}", b.total)),
        ckpt_path.display()
    );
    Ok(())
}

pub struct EvalArgs {
    pub ckpt: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub train_data: Option<PathBuf>,
}

fn checkpoint_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(CHECKPOINT_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn eval(args: EvalArgs) -> Result<(), CliError> {
    // The SCM is only needed for oracle-based scores; prefer an explicit
    // config, fall back to the one saved next to the checkpoint.
    let sidecar = checkpoint_file(&args.ckpt)
        .parent()
        .map(|d| d.join(RESOLVED_CONFIG))
        .filter(|p| p.is_file());
    let config_path = args.config.clone().or(sidecar);
    let (cfg, prov) = resolve(config_path.as_deref(), &[])?;

    let ckpt_path = checkpoint_file(&args.ckpt);
    let mut r = BufReader::new(File::open(&ckpt_path)?);
    let t = Trainer::load_checkpoint(&mut r)?;
    let data = load_dataset(&args.data)?;
    let report = evaluate(&t, &data)?;

    ensure_dir(&args.out)?;
    write_json(&args.out.join("report.json"), &report)?;

    let mut oracle_lines = Vec::new();
    let scm_matches = cfg.scm.vocab.hash_hex() == t.vocab.hash_hex();
    if scm_matches {
        let kl = interventional_alignment(&t, &cfg.scm, cfg.eval.n_probes, cfg.eval.probe_seed)?;
        #[derive(Serialize)]
        struct Alignment {
            mean_kl_oracle_to_model: f64,
            n_probes: usize,
            probe_seed: u64,
        }
        write_json(
            &args.out.join("interventional.json"),
            &Alignment {
                mean_kl_oracle_to_model: kl,
                n_probes: cfg.eval.n_probes,
                probe_seed: cfg.eval.probe_seed,
            },
        )?;
        oracle_lines.push(format!(
            "interventional alignment: mean KL(oracle || model) {kl:.4} over {} probes",
            cfg.eval.n_probes
        ));

        if let Some(train_path) = &args.train_data {
            let train = load_dataset(train_path)?;
            let rows = distribution_recovery(&t, &cfg.scm, &train, &data)?;
            let f = File::create(args.out.join("recovery.csv"))?;
            write_recovery_csv(&rows, f)?;
            write_json(&args.out.join("recovery.json"), &rows)?;
            oracle_lines.push(recovery_table(&rows));
        }
    }

    let invocation = [
        ("subcommand", "eval".to_string()),
        ("ckpt", args.ckpt.display().to_string()),
        ("data", args.data.display().to_string()),
        ("out", args.out.display().to_string()),
    ];
    Resolved::new(&cfg, &prov, &invocation).write(&args.out.join(RESOLVED_CONFIG))?;

    outln!("{}", render_report(&report));
    if !scm_matches {
        outln!("note: configured vocabulary differs from the model's; oracle scores skipped");
    }
    for line in oracle_lines {
        outln!("{line}");
    }
    Ok(())
}

fn render_report(r: &EvalReport) -> String {
    let mut out = format!(
        "{} split: {} samples, accuracy {:.4}, log loss {:.4}\n",
        r.split, r.n, r.accuracy, r.log_loss
    );
    for (qtype, s) in &r.per_qtype {
        out.push_str(&format!(
            "  {qtype:<12} n={:<6} accuracy {:.4}\n",
            s.n, s.accuracy
        ));
    }
    out.pop();
    out
}

pub struct AblateArgs {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<String>,
    pub lambda: Option<String>,
    pub tau: Option<String>,
    pub n_train: Option<String>,
    pub n_test: Option<String>,
}

pub fn ablate(args: AblateArgs) -> Result<(), CliError> {
    let flags = flag_list(&[
        ("train.seed", args.seed.clone()),
        ("train.lambda", args.lambda.clone()),
        ("train.tau", args.tau.clone()),
        ("data.n_train", args.n_train.clone()),
        ("data.n_test", args.n_test.clone()),
    ]);
    let (cfg, prov) = resolve(args.config.as_deref(), &flags)?;
    let rows = run_ablation(
        &cfg.train,
        &cfg.scm,
        cfg.data.n_train,
        cfg.data.n_test,
        cfg.eval.n_probes,
    )?;

    ensure_dir(&args.out)?;
    let f = File::create(args.out.join("ablation.csv"))?;
    write_ablation_csv(&rows, f)?;
    write_json(&args.out.join("ablation.json"), &rows)?;
    let invocation = [
        ("subcommand", "ablate".to_string()),
        ("out", args.out.display().to_string()),
    ];
    Resolved::new(&cfg, &prov, &invocation).write(&args.out.join(RESOLVED_CONFIG))?;

    outln!("{}", ablation_table(&rows));
    Ok(())
}

pub struct SweepArgs {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<String>,
    pub tau: Option<String>,
    pub lambdas: Option<String>,
}

pub fn sweep(args: SweepArgs) -> Result<(), CliError> {
    let flags = flag_list(&[
        ("train.seed", args.seed.clone()),
        ("train.tau", args.tau.clone()),
    ]);
    let (mut cfg, mut prov) = resolve(args.config.as_deref(), &flags)?;
    if let Some(raw) = &args.lambdas {
        let mut grid = Vec::new();
        for part in raw.split(',') {
            let v: f64 = part
                .trim()
                .parse()
                .map_err(|_| validation(format!("--lambdas: `{part}` is not a number")))?;
            if !(v >= 0.0) {
                return Err(validation(format!("--lambdas: `{part}` must be >= 0")));
            }
            grid.push(v);
        }
        if grid.is_empty() {
            return Err(validation("--lambdas: empty grid"));
        }
        cfg.sweep.lambdas = grid;
        prov.insert("sweep.lambdas".into(), "flag".into());
    }
    let rows = lambda_sweep(
        &cfg.train,
        &cfg.scm,
        &cfg.sweep.lambdas,
        cfg.data.n_train,
        cfg.data.n_test,
    )?;

    ensure_dir(&args.out)?;
    let f = File::create(args.out.join("sweep.csv"))?;
    write_sweep_csv(&rows, f)?;
    write_json(&args.out.join("sweep.json"), &rows)?;
    let invocation = [
        ("subcommand", "sweep".to_string()),
        ("out", args.out.display().to_string()),
    ];
    Resolved::new(&cfg, &prov, &invocation).write(&args.out.join(RESOLVED_CONFIG))?;

    outln!("{}", sweep_table(&rows));
    Ok(())
}

pub struct ReportArgs {
    pub dir: PathBuf,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<T>, CliError> {
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(path)?;
    let v =
        serde_json::from_str(&text).map_err(|e| validation(format!("{}: {e}", path.display())))?;
    Ok(Some(v))
}

pub fn report(args: ReportArgs) -> Result<(), CliError> {
    let mut printed = false;
    if let Some(r) = read_json::<EvalReport>(&args.dir.join("report.json"))? {
        outln!("{}", render_report(&r));
        printed = true;
    }
    if let Some(rows) = read_json::<Vec<AblationRow>>(&args.dir.join("ablation.json"))? {
        outln!("{}", ablation_table(&rows));
        printed = true;
    }
    if let Some(rows) = read_json::<Vec<SweepRow>>(&args.dir.join("sweep.json"))? {
        outln!("{}", sweep_table(&rows));
        printed = true;
    }
    if let Some(rows) = read_json::<Vec<PatternRecovery>>(&args.dir.join("recovery.json"))? {
        outln!("{}", recovery_table(&rows));
        printed = true;
    }
    if !printed {
        return Err(validation(format!(
            "no report artifacts (report.json, ablation.json, sweep.json, recovery.json) in {}",
            args.dir.display()
        )));
    }
    Ok(())
}
