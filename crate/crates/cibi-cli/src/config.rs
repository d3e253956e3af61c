//! Layered run configuration.
//!
//! Values resolve in fixed precedence: built-in defaults, then the config
//! file, then `CIBI_*` environment variables, then command-line flags. The
//! origin of every value is recorded and written next to each artifact so a
//! run can be reproduced from its own output directory.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use cibi_core::scm::{default_scm, ScmConfig};
use cibi_core::trainer::TrainConfig;

use crate::fail::{validation, CliError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Probe count for scoring against the interventional oracle.
    pub n_probes: usize,
    pub probe_seed: u64,
    /// How many top-scoring tokens the bias report lists per answer.
    pub top_k: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            n_probes: 256,
            probe_seed: 1717,
            top_k: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataOptions {
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for DataOptions {
    fn default() -> Self {
        DataOptions {
            n_train: 5000,
            n_test: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub lambdas: Vec<f64>,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            lambdas: vec![0.0, 0.2, 0.4, 0.6, 0.8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub scm: ScmConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub data: DataOptions,
    pub sweep: SweepOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scm: default_scm(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            data: DataOptions::default(),
            sweep: SweepOptions::default(),
        }
    }
}

/// Where a resolved value came from.
pub type Provenance = BTreeMap<String, String>;

/// A fully resolved configuration plus everything needed to re-run it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Resolved {
    pub version: String,
    pub invocation: BTreeMap<String, String>,
    pub scm: ScmConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub data: DataOptions,
    pub sweep: SweepOptions,
    pub provenance: Provenance,
}

enum Setter {
    F64(fn(&mut RunConfig, f64)),
    U64(fn(&mut RunConfig, u64)),
    Usize(fn(&mut RunConfig, usize)),
    Bool(fn(&mut RunConfig, bool)),
    Str(fn(&mut RunConfig, &str) -> Result<(), String>),
}

/// Scalar keys reachable from all three override layers.
const KEYS: &[(&str, Setter)] = &[
    (
        "scm.n_confounders",
        Setter::Usize(|c, v| c.scm.n_confounders = v),
    ),
    (
        "scm.context_bias",
        Setter::F64(|c, v| c.scm.context_bias = v),
    ),
    (
        "scm.structure_bias",
        Setter::F64(|c, v| c.scm.structure_bias = v),
    ),
    (
        "scm.keyword_bias",
        Setter::F64(|c, v| c.scm.keyword_bias = v),
    ),
    (
        "scm.visual_signal",
        Setter::F64(|c, v| c.scm.visual_signal = v),
    ),
    ("scm.noise_std", Setter::F64(|c, v| c.scm.noise_std = v)),
    ("scm.image_dim", Setter::Usize(|c, v| c.scm.image_dim = v)),
    (
        "scm.filler_group",
        Setter::Usize(|c, v| c.scm.filler_group = Some(v)),
    ),
    ("scm.seed", Setter::U64(|c, v| c.scm.seed = v)),
    ("train.epochs", Setter::Usize(|c, v| c.train.epochs = v)),
    (
        "train.batch_size",
        Setter::Usize(|c, v| c.train.batch_size = v),
    ),
    (
        "train.learning_rate",
        Setter::F64(|c, v| c.train.learning_rate = v),
    ),
    (
        "train.optimizer",
        Setter::Str(|c, v| {
            c.train.optimizer = v.parse().map_err(|_| format!("unknown optimizer `{v}`"))?;
            Ok(())
        }),
    ),
    ("train.lambda", Setter::F64(|c, v| c.train.lambda = v)),
    ("train.tau", Setter::F64(|c, v| c.train.tau = v)),
    ("train.seed", Setter::U64(|c, v| c.train.seed = v)),
    (
        "train.use_context_branch",
        Setter::Bool(|c, v| c.train.use_context_branch = v),
    ),
    (
        "train.use_question_only_branch",
        Setter::Bool(|c, v| c.train.use_question_only_branch = v),
    ),
    ("train.d_embed", Setter::Usize(|c, v| c.train.d_embed = v)),
    ("train.d_hidden", Setter::Usize(|c, v| c.train.d_hidden = v)),
    (
        "train.mask.p_structure",
        Setter::F64(|c, v| c.train.mask.p_structure = v),
    ),
    (
        "train.mask.p_keyword",
        Setter::F64(|c, v| c.train.mask.p_keyword = v),
    ),
    (
        "train.mask.guarantee_one",
        Setter::Bool(|c, v| c.train.mask.guarantee_one = v),
    ),
    ("eval.n_probes", Setter::Usize(|c, v| c.eval.n_probes = v)),
    ("eval.probe_seed", Setter::U64(|c, v| c.eval.probe_seed = v)),
    ("eval.top_k", Setter::Usize(|c, v| c.eval.top_k = v)),
    ("data.n_train", Setter::Usize(|c, v| c.data.n_train = v)),
    ("data.n_test", Setter::Usize(|c, v| c.data.n_test = v)),
];

/// Structured subtrees settable only through the config file.
const FILE_ONLY: &[&str] = &[
    "scm.vocab",
    "scm.train_prior",
    "scm.test_prior",
    "scm.confounder_prior",
    "sweep.lambdas",
];

fn find_key(path: &str) -> Option<&'static Setter> {
    KEYS.iter().find(|(p, _)| *p == path).map(|(_, s)| s)
}

fn value_as_f64(path: &str, v: &toml::Value) -> Result<f64, CliError> {
    match v {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        toml::Value::String(s) => s
            .parse()
            .map_err(|_| validation(format!("{path}: `{s}` is not a number"))),
        other => Err(validation(format!(
            "{path}: expected a number, got {other}"
        ))),
    }
}

fn value_as_u64(path: &str, v: &toml::Value) -> Result<u64, CliError> {
    match v {
        toml::Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        toml::Value::String(s) => s
            .parse()
            .map_err(|_| validation(format!("{path}: `{s}` is not a non-negative integer"))),
        other => Err(validation(format!(
            "{path}: expected a non-negative integer, got {other}"
        ))),
    }
}

fn value_as_usize(path: &str, v: &toml::Value) -> Result<usize, CliError> {
    Ok(value_as_u64(path, v)? as usize)
}

fn value_as_bool(path: &str, v: &toml::Value) -> Result<bool, CliError> {
    match v {
        toml::Value::Boolean(b) => Ok(*b),
        toml::Value::String(s) => s
            .parse()
            .map_err(|_| validation(format!("{path}: `{s}` is not a boolean"))),
        other => Err(validation(format!(
            "{path}: expected a boolean, got {other}"
        ))),
    }
}

fn apply_scalar(
    cfg: &mut RunConfig,
    path: &str,
    setter: &Setter,
    v: &toml::Value,
) -> Result<(), CliError> {
    match setter {
        Setter::F64(f) => f(cfg, value_as_f64(path, v)?),
        Setter::U64(f) => f(cfg, value_as_u64(path, v)?),
        Setter::Usize(f) => f(cfg, value_as_usize(path, v)?),
        Setter::Bool(f) => f(cfg, value_as_bool(path, v)?),
        Setter::Str(f) => {
            let s = match v {
                toml::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            f(cfg, &s).map_err(|m| validation(format!("{path}: {m}")))?;
        }
    }
    Ok(())
}

fn apply_file_only(cfg: &mut RunConfig, path: &str, v: &toml::Value) -> Result<(), CliError> {
    let bad = |e: toml::de::Error| validation(format!("{path}: {e}"));
    match path {
        "scm.vocab" => cfg.scm.vocab = v.clone().try_into().map_err(bad)?,
        "scm.train_prior" => cfg.scm.train_prior = v.clone().try_into().map_err(bad)?,
        "scm.test_prior" => cfg.scm.test_prior = v.clone().try_into().map_err(bad)?,
        "scm.confounder_prior" => {
            cfg.scm.confounder_prior = Some(v.clone().try_into().map_err(bad)?)
        }
        "sweep.lambdas" => cfg.sweep.lambdas = v.clone().try_into().map_err(bad)?,
        _ => unreachable!(),
    }
    Ok(())
}

fn merge_table(
    cfg: &mut RunConfig,
    prov: &mut Provenance,
    prefix: &str,
    table: &toml::value::Table,
) -> Result<(), CliError> {
    for (k, v) in table {
        // A resolved sidecar is itself a valid config file; skip the
        // metadata it carries alongside the values.
        if prefix.is_empty() && matches!(k.as_str(), "version" | "invocation" | "provenance") {
            continue;
        }
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        if FILE_ONLY.contains(&path.as_str()) {
            apply_file_only(cfg, &path, v)?;
            prov.insert(path, "file".into());
        } else if let Some(setter) = find_key(&path) {
            apply_scalar(cfg, &path, setter, v)?;
            prov.insert(path, "file".into());
        } else if let toml::Value::Table(inner) = v {
            merge_table(cfg, prov, &path, inner)?;
        } else {
            return Err(validation(format!("unknown config key `{path}`")));
        }
    }
    Ok(())
}

pub fn merge_file(cfg: &mut RunConfig, prov: &mut Provenance, path: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| validation(format!("cannot read config {}: {e}", path.display())))?;
    let root: toml::Value = text
        .parse()
        .map_err(|e| validation(format!("{}: {e}", path.display())))?;
    let table = root
        .as_table()
        .ok_or_else(|| validation(format!("{}: top level must be a table", path.display())))?;
    merge_table(cfg, prov, "", table)
}

fn env_name(path: &str) -> String {
    format!("CIBI_{}", path.replace('.', "_").to_uppercase())
}

pub fn merge_env(cfg: &mut RunConfig, prov: &mut Provenance) -> Result<(), CliError> {
    for (path, setter) in KEYS {
        if let Ok(raw) = std::env::var(env_name(path)) {
            let v = toml::Value::String(raw);
            apply_scalar(cfg, path, setter, &v)
                .map_err(|e| validation(format!("{}: {}", env_name(path), e.message)))?;
            prov.insert((*path).into(), "env".into());
        }
    }
    let known: Vec<String> = KEYS.iter().map(|(p, _)| env_name(p)).collect();
    for (name, _) in std::env::vars() {
        if name.starts_with("CIBI_") && !known.contains(&name) {
            return Err(validation(format!(
                "unrecognized environment variable {name}"
            )));
        }
    }
    Ok(())
}

pub fn apply_flag(
    cfg: &mut RunConfig,
    prov: &mut Provenance,
    path: &str,
    raw: &str,
) -> Result<(), CliError> {
    let setter = find_key(path).expect("flag maps to a known config key");
    apply_scalar(cfg, path, setter, &toml::Value::String(raw.into()))?;
    prov.insert(path.into(), "flag".into());
    Ok(())
}

/// Resolve the full layering for one subcommand invocation.
pub fn resolve(
    config_path: Option<&Path>,
    flags: &[(&str, String)],
) -> Result<(RunConfig, Provenance), CliError> {
    let mut cfg = RunConfig::default();
    let mut prov: Provenance = KEYS
        .iter()
        .map(|(p, _)| ((*p).to_string(), "default".to_string()))
        .collect();
    for p in FILE_ONLY {
        prov.insert((*p).to_string(), "default".to_string());
    }
    if let Some(p) = config_path {
        merge_file(&mut cfg, &mut prov, p)?;
    }
    merge_env(&mut cfg, &mut prov)?;
    for (path, raw) in flags {
        apply_flag(&mut cfg, &mut prov, path, raw)?;
    }
    cfg.scm.validate().map_err(CliError::from)?;
    cfg.train.validate().map_err(CliError::from)?;
    Ok((cfg, prov))
}

impl Resolved {
    pub fn new(cfg: &RunConfig, prov: &Provenance, invocation: &[(&str, String)]) -> Self {
        Resolved {
            version: env!("CARGO_PKG_VERSION").to_string(),
            invocation: invocation
                .iter()
                .map(|(k, v)| ((*k).to_string(), v.clone()))
                .collect(),
            scm: cfg.scm.clone(),
            train: cfg.train.clone(),
            eval: cfg.eval.clone(),
            data: cfg.data.clone(),
            sweep: cfg.sweep.clone(),
            provenance: prov.clone(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| CliError::runtime(format!("serializing resolved config: {e}")))?;
        std::fs::write(path, text)
            .map_err(|e| CliError::runtime(format!("writing {}: {e}", path.display())))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_have_default_provenance() {
        let (cfg, prov) = resolve(None, &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert!(prov.values().all(|v| v == "default"));
    }

    #[test]
    fn flags_outrank_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[train]\nlambda = 0.3\ntau = 0.2\n").unwrap();
        let (cfg, prov) = resolve(Some(&path), &[("train.lambda", "0.7".into())]).unwrap();
        assert_eq!(cfg.train.lambda, 0.7);
        assert_eq!(cfg.train.tau, 0.2);
        assert_eq!(prov["train.lambda"], "flag");
        assert_eq!(prov["train.tau"], "file");
        assert_eq!(prov["train.epochs"], "default");
    }

    #[test]
    fn unknown_file_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[train]\nlamda = 0.3\n").unwrap();
        let err = resolve(Some(&path), &[]).unwrap_err();
        assert_eq!(err.code, 2);
        assert!(err.message.contains("train.lamda"));
    }

    #[test]
    fn nested_mask_keys_resolve() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[train.mask]\np_keyword = 0.9\n").unwrap();
        let (cfg, prov) = resolve(Some(&path), &[]).unwrap();
        assert_eq!(cfg.train.mask.p_keyword, 0.9);
        assert_eq!(prov["train.mask.p_keyword"], "file");
    }

    #[test]
    fn invalid_resolved_config_fails_validation() {
        let err = resolve(None, &[("train.tau", "-1".into())]).unwrap_err();
        assert_eq!(err.code, 2);
    }

    #[test]
    fn resolved_round_trips_through_toml() {
        let (cfg, prov) = resolve(None, &[]).unwrap();
        let res = Resolved::new(&cfg, &prov, &[("subcommand", "train".into())]);
        let text = toml::to_string_pretty(&res).unwrap();
        let back: Resolved = text.parse::<toml::Value>().unwrap().try_into().unwrap();
        assert_eq!(back.scm, cfg.scm);
        assert_eq!(back.train, cfg.train);
        assert_eq!(back.provenance, res.provenance);
    }
}
