//! Experiment configuration: one TOML file with a section per module,
//! overridable per scalar field from the environment and the command line.
//!
//! Precedence, highest first: `--set path=value`, `SECUREGATE_<PATH>`
//! environment variables, the file, built-in defaults. Paths are dotted in
//! `--set` (`federation.rounds`) and joined by `__` in the environment
//! (`SECUREGATE_FEDERATION__ROUNDS`).

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::Value;

use securegate_core::attacks::{ExtractionConfig, InferenceAttackConfig};
use securegate_core::fedcore::{Defense, DpConfig, FederationConfig};
use securegate_core::fusion::FusionConfig;
use securegate_core::gating::GatingConfig;
use securegate_core::lora::LoraConfig;
use securegate_core::optim::OptimizerConfig;
use securegate_core::privacy::CorpusConfig;
use securegate_core::tinylm::tokenizer::FIRST_KEY_SLOT;
use securegate_core::tinylm::PretrainConfig;
use securegate_core::ModelConfig;

/// Prefix of environment overrides.
pub const ENV_PREFIX: &str = "SECUREGATE_";

/// The default configuration as shipped.
pub const DEFAULT_TOML: &str = include_str!("../configs/default.toml");

/// Keys that are valid but absent from the serialized defaults because they
/// default to `None`.
const OPTIONAL_KEYS: [&str; 2] = ["lora.alpha", "attacks.inference.pii_class"];

/// Sizes of the generated PII dictionary and the public/private split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DictionaryConfig {
    /// Values generated per class.
    pub per_class: usize,
    /// Values per class reserved for public pretraining text; the rest are
    /// private and feed client corpora and attack candidates.
    pub public_per_class: usize,
    /// Template statements in the public pretraining corpus.
    pub public_statements: usize,
}

impl DictionaryConfig {
    pub fn private_per_class(&self) -> usize {
        self.per_class.saturating_sub(self.public_per_class)
    }
}

/// The overfit configuration of the client-local revealing adapters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RevealingConfig {
    /// Revealing adapters per client, all fused into the revealing path.
    pub count: usize,
    pub optimizer: OptimizerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyConfig {
    pub defense: Defense,
    pub dp: DpConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttacksConfig {
    pub inference: InferenceAttackConfig,
    pub extraction: ExtractionConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub dictionary: DictionaryConfig,
    pub corpus: CorpusConfig,
    pub pretrain: PretrainConfig,
    pub federation: FederationConfig,
    /// Local secure-adapter training inside each round.
    pub optimizer: OptimizerConfig,
    pub revealing: RevealingConfig,
    pub lora: LoraConfig,
    pub privacy: PrivacyConfig,
    pub fusion: FusionConfig,
    pub gating: GatingConfig,
    pub attacks: AttacksConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str(DEFAULT_TOML).expect("shipped default config parses")
    }
}

/// Every problem found in a configuration, in discovery order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigErrors(pub Vec<String>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

impl ExperimentConfig {
    /// Checks every field against the preconditions of the module that
    /// consumes it, plus the constraints that tie sections together.
    pub fn validate(&self) -> Vec<String> {
        let mut e = Vec::new();
        self.model.validate("model", &mut e);
        self.corpus.validate("corpus", &mut e);
        self.pretrain.validate("pretrain", &mut e);
        self.federation.validate("federation", &mut e);
        self.optimizer.validate("optimizer", &mut e);
        self.revealing
            .optimizer
            .validate("revealing.optimizer", &mut e);
        self.lora.validate("lora", &mut e);
        self.privacy.dp.validate("privacy.dp", &mut e);
        self.fusion.validate("fusion", &mut e);
        self.gating.validate("gating", &mut e);
        self.attacks.inference.validate("attacks.inference", &mut e);
        self.attacks
            .extraction
            .validate("attacks.extraction", &mut e);

        let d = &self.dictionary;
        if d.public_per_class == 0 {
            e.push("dictionary.public_per_class must be positive".into());
        }
        if d.public_statements == 0 {
            e.push("dictionary.public_statements must be positive".into());
        }
        if d.public_per_class >= d.per_class {
            e.push(format!(
                "dictionary.public_per_class ({}) must be below dictionary.per_class ({})",
                d.public_per_class, d.per_class
            ));
        }
        let private = d.private_per_class();
        let need = self.corpus.n_clients * self.corpus.pool_per_class;
        if private < need.max(self.corpus.min_class_size) {
            e.push(format!(
                "dictionary leaves {private} private values per class; corpus needs {}",
                need.max(self.corpus.min_class_size)
            ));
        }
        if self.attacks.inference.candidate_pool_c > private {
            e.push(format!(
                "attacks.inference.candidate_pool_c = {} exceeds the {private} private values per class",
                self.attacks.inference.candidate_pool_c
            ));
        }
        if self.federation.n_clients != self.corpus.n_clients {
            e.push(format!(
                "federation.n_clients ({}) must equal corpus.n_clients ({})",
                self.federation.n_clients, self.corpus.n_clients
            ));
        }
        if self.fusion.query_set_size > self.corpus.query_size {
            e.push(format!(
                "fusion.query_set_size ({}) exceeds corpus.query_size ({})",
                self.fusion.query_set_size, self.corpus.query_size
            ));
        }
        if self.revealing.count == 0 {
            e.push("revealing.count must be at least 1".into());
        }
        if self.model.vocab_size <= FIRST_KEY_SLOT as usize {
            e.push(format!(
                "model.vocab_size must leave at least one key slot above {FIRST_KEY_SLOT}"
            ));
        }
        e
    }

    /// Parses and validates a TOML document with the given overrides applied.
    pub fn from_toml_with(
        text: &str,
        env: &[(String, String)],
        sets: &[String],
    ) -> Result<Self, ConfigErrors> {
        let mut errors = Vec::new();
        let defaults = Value::try_from(ExperimentConfig::default()).expect("defaults serialize");
        let mut tree: Value = match toml::from_str(text) {
            Ok(v) => v,
            Err(err) => return Err(ConfigErrors(vec![format!("parse error: {err}")])),
        };
        unknown_keys(&tree, &defaults, "", &mut errors);

        let mut overrides: Vec<(String, String, String)> = env_overrides(env)
            .into_iter()
            .map(|(p, v)| (p.clone(), v, format!("{ENV_PREFIX}{}", env_name(&p))))
            .collect();
        for s in sets {
            match s.split_once('=') {
                Some((p, v)) => overrides.push((
                    p.trim().to_string(),
                    v.trim().to_string(),
                    format!("--set {s}"),
                )),
                None => errors.push(format!("--set {s:?}: expected path=value")),
            }
        }
        for (path, raw, origin) in overrides {
            if let Err(msg) = apply_override(&mut tree, &defaults, &path, &raw) {
                errors.push(format!("{origin}: {msg}"));
            }
        }

        // Missing fields take their defaults; each section is decoded
        // separately so one bad section does not hide the others.
        let merged = merge(defaults.clone(), tree);
        let table = merged.as_table().expect("config root is a table");
        for (section, value) in table {
            if let Err(err) = decode_section(section, value.clone()) {
                errors.push(format!("{section}: {err}"));
            }
        }
        if !errors.is_empty() {
            return Err(ConfigErrors(errors));
        }
        let cfg: ExperimentConfig = merged
            .try_into()
            .map_err(|err: toml::de::Error| ConfigErrors(vec![err.to_string()]))?;
        let errors = cfg.validate();
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigErrors(errors))
        }
    }

    /// [`ExperimentConfig::from_toml_with`] on a file, with overrides from
    /// the process environment.
    pub fn load(path: &Path, sets: &[String]) -> Result<Self, ConfigErrors> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigErrors(vec![format!("{}: {e}", path.display())]))?;
        let env: Vec<(String, String)> = std::env::vars().collect();
        Self::from_toml_with(&text, &env, sets)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn decode_section(section: &str, value: Value) -> Result<(), String> {
    fn check<T: serde::de::DeserializeOwned>(v: Value) -> Result<(), String> {
        v.try_into::<T>().map(|_| ()).map_err(|e| e.to_string())
    }
    match section {
        "seed" => check::<u64>(value),
        "model" => check::<ModelConfig>(value),
        "dictionary" => check::<DictionaryConfig>(value),
        "corpus" => check::<CorpusConfig>(value),
        "pretrain" => check::<PretrainConfig>(value),
        "federation" => check::<FederationConfig>(value),
        "optimizer" => check::<OptimizerConfig>(value),
        "revealing" => check::<RevealingConfig>(value),
        "lora" => check::<LoraConfig>(value),
        "privacy" => check::<PrivacyConfig>(value),
        "fusion" => check::<FusionConfig>(value),
        "gating" => check::<GatingConfig>(value),
        "attacks" => check::<AttacksConfig>(value),
        // Reported by `unknown_keys`.
        _ => Ok(()),
    }
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

fn unknown_keys(tree: &Value, defaults: &Value, prefix: &str, errors: &mut Vec<String>) {
    let (Some(t), Some(d)) = (tree.as_table(), defaults.as_table()) else {
        return;
    };
    for (k, v) in t {
        let path = join(prefix, k);
        match d.get(k) {
            Some(dv) => unknown_keys(v, dv, &path, errors),
            None if OPTIONAL_KEYS.contains(&path.as_str()) => {}
            None => errors.push(format!("unknown key `{path}`")),
        }
    }
}

/// Recursive table merge; `over` wins.
fn merge(base: Value, over: Value) -> Value {
    match (base, over) {
        (Value::Table(mut b), Value::Table(o)) => {
            for (k, v) in o {
                let merged = match b.remove(&k) {
                    Some(bv) => merge(bv, v),
                    None => v,
                };
                b.insert(k, merged);
            }
            Value::Table(b)
        }
        (_, o) => o,
    }
}

fn env_name(path: &str) -> String {
    path.split('.')
        .map(str::to_ascii_uppercase)
        .collect::<Vec<_>>()
        .join("__")
}

/// `SECUREGATE_A__B=v` as `("a.b", "v")`, sorted by path.
pub fn env_overrides(env: &[(String, String)]) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = env
        .iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            Some((rest.to_ascii_lowercase().replace("__", "."), v.clone()))
        })
        .collect();
    out.sort();
    out
}

/// Parses `raw` as the type of the default at `path` (or by inference for
/// optional keys) and stores it in `tree`.
fn apply_override(tree: &mut Value, defaults: &Value, path: &str, raw: &str) -> Result<(), String> {
    let parts: Vec<&str> = path.split('.').collect();
    let mut d = Some(defaults);
    for p in &parts {
        d = d.and_then(|v| v.as_table()).and_then(|t| t.get(*p));
    }
    let value = match d {
        Some(Value::Table(_)) => return Err(format!("`{path}` is a section, not a scalar field")),
        Some(Value::Array(_)) => {
            let v: Value = toml::from_str(&format!("x = {raw}")).map_err(|e| e.to_string())?;
            v["x"].clone()
        }
        Some(Value::Integer(_)) => Value::Integer(
            raw.parse()
                .map_err(|_| format!("`{path}` expects an integer, got {raw:?}"))?,
        ),
        Some(Value::Float(_)) => Value::Float(
            raw.parse()
                .map_err(|_| format!("`{path}` expects a number, got {raw:?}"))?,
        ),
        Some(Value::Boolean(_)) => Value::Boolean(
            raw.parse()
                .map_err(|_| format!("`{path}` expects true or false, got {raw:?}"))?,
        ),
        Some(_) => Value::String(raw.to_string()),
        None if OPTIONAL_KEYS.contains(&path) => {
            if let Ok(i) = raw.parse::<i64>() {
                Value::Integer(i)
            } else if let Ok(f) = raw.parse::<f64>() {
                Value::Float(f)
            } else {
                Value::String(raw.to_string())
            }
        }
        None => return Err(format!("unknown key `{path}`")),
    };
    let mut node = tree;
    for p in &parts[..parts.len() - 1] {
        let t = node
            .as_table_mut()
            .ok_or_else(|| format!("`{path}` crosses a scalar"))?;
        node = t
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Default::default()));
    }
    node.as_table_mut()
        .ok_or_else(|| format!("`{path}` crosses a scalar"))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
