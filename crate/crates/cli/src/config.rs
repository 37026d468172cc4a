//! Run configuration: defaults, variant preset, config file, then overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use idiomkit_core::eval::{ProbeConfig, ProbeTask};
use idiomkit_core::model::{AdapterSpec, BackboneConfig};
use idiomkit_core::noising::{mix_seed, NoisingPolicy};
use idiomkit_core::training::TrainConfig;
use idiomkit_core::{Error, Result, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Jsonl,
    Magpie,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: PathBuf,
    pub corpus_format: CorpusFormat,
    pub dictionary: PathBuf,
    pub groups: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: "data/corpus.jsonl".into(),
            corpus_format: CorpusFormat::Jsonl,
            dictionary: "data/dictionary.jsonl".into(),
            groups: "data/meaning_groups.json".into(),
            output_dir: "runs".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    /// Existing word-piece vocabulary; learned from the corpus when absent.
    pub vocab: Option<PathBuf>,
    pub max_size: usize,
    pub min_count: usize,
    pub lowercase: bool,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { vocab: None, max_size: 8000, min_count: 1, lowercase: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BankSource {
    Test,
    Train,
    All,
}

impl BankSource {
    pub fn label(self) -> &'static str {
        match self {
            BankSource::Test => "idiomatic sentences, test split",
            BankSource::Train => "idiomatic sentences, train split",
            BankSource::All => "idiomatic sentences, all splits",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefinitionEncoder {
    /// The untrained backbone encoder, mean-pooled.
    Backbone,
    /// Vectors read from `definition_vectors`.
    Precomputed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankConfig {
    pub source: BankSource,
    pub definition_encoder: DefinitionEncoder,
    /// JSONL of `{text, vector}` for the precomputed encoder.
    pub definition_vectors: Option<PathBuf>,
    pub batch_size: usize,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            source: BankSource::Test,
            definition_encoder: DefinitionEncoder::Backbone,
            definition_vectors: None,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Defaults to the number of groups among the evaluated idioms.
    pub n_clusters: Option<usize>,
    pub k: usize,
    /// Also train and score a disambiguation probe on masked expressions.
    pub masked_control: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_clusters: None, k: 3, masked_control: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfigs {
    pub disambiguation: ProbeConfig,
    pub span: ProbeConfig,
}

impl Default for ProbeConfigs {
    fn default() -> Self {
        Self { disambiguation: ProbeConfig::disambiguation(), span: ProbeConfig::span() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub tag: String,
    pub variant: Variant,
    /// Master seed; when set it replaces the noising, training, adapter and
    /// probe seeds. The backbone init seed is left alone.
    pub seed: Option<u64>,
    pub paths: Paths,
    pub tokenizer: TokenizerConfig,
    pub backbone: BackboneConfig,
    pub adapter: AdapterSpec,
    pub noising: NoisingPolicy,
    pub train: TrainConfig,
    pub bank: BankConfig,
    pub eval: EvalConfig,
    pub probe: ProbeConfigs,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tag: "run".into(),
            variant: Variant::ItiSfSi,
            seed: None,
            paths: Paths::default(),
            tokenizer: TokenizerConfig::default(),
            backbone: BackboneConfig::default(),
            adapter: AdapterSpec::default(),
            noising: NoisingPolicy::default(),
            train: TrainConfig::default(),
            bank: BankConfig::default(),
            eval: EvalConfig::default(),
            probe: ProbeConfigs::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tag.is_empty() || self.tag.contains(['/', '\\']) || self.tag.starts_with('.') {
            return Err(Error::Config(format!("tag {:?} is not a valid directory name", self.tag)));
        }
        self.noising.validate()?;
        self.train.validate()?;
        self.probe.disambiguation.validate()?;
        self.probe.span.validate()?;
        if self.probe.disambiguation.task != ProbeTask::Disambiguation || self.probe.span.task != ProbeTask::Span {
            return Err(Error::Config("probe.disambiguation and probe.span must keep their task".into()));
        }
        if self.bank.definition_encoder == DefinitionEncoder::Precomputed && self.bank.definition_vectors.is_none() {
            return Err(Error::Config("bank.definition_vectors is required for the precomputed encoder".into()));
        }
        if self.bank.batch_size == 0 || self.eval.k == 0 {
            return Err(Error::Config("bank.batch_size and eval.k must be positive".into()));
        }
        self.variant.check(&self.noising, &self.train)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn seeds(&self) -> std::collections::BTreeMap<String, u64> {
        [
            ("backbone.init_seed", self.backbone.init_seed),
            ("adapter.init_seed", self.adapter.init_seed),
            ("noising.seed", self.noising.seed),
            ("train.seed", self.train.seed),
            ("probe.disambiguation.seed", self.probe.disambiguation.seed),
            ("probe.span.seed", self.probe.span.seed),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.paths.output_dir.join(&self.tag)
    }

    fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            self.noising.seed = s;
            self.train.seed = s;
            self.adapter.init_seed = mix_seed(s, 1);
            self.probe.disambiguation.seed = mix_seed(s, 2);
            self.probe.span.seed = mix_seed(s, 3);
        }
    }
}

/// Command-line adjustments layered over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    /// `key.path=value` pairs; values are TOML literals or bare strings.
    pub set: Vec<String>,
    pub seed: Option<u64>,
    pub variant: Option<String>,
    pub out: Option<PathBuf>,
}

const PATH_KEYS: [&[&str]; 7] = [
    &["paths", "corpus"],
    &["paths", "dictionary"],
    &["paths", "groups"],
    &["paths", "output_dir"],
    &["tokenizer", "vocab"],
    &["backbone", "checkpoint"],
    &["bank", "definition_vectors"],
];

fn parse_value(raw: &str) -> Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => serde_json::to_value(t.remove("v").unwrap()).unwrap_or(Value::String(raw.into())),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut node = root;
    for p in &parts[..parts.len() - 1] {
        let map = node.as_object_mut().ok_or_else(|| Error::Config(format!("override {key} goes through a scalar")))?;
        node = map.entry(p.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    node.as_object_mut()
        .ok_or_else(|| Error::Config(format!("override {key} goes through a scalar")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn lookup<'v>(root: &'v Value, path: &[&str]) -> Option<&'v Value> {
    path.iter().try_fold(root, |n, p| n.get(p))
}

/// Resolves a config from an optional file plus overrides. Relative paths in
/// the file are taken relative to the file's directory; paths given as
/// overrides are taken as they are. Layers, lowest first: defaults with the
/// variant preset, the file, the preset again if `--variant` was given, then
/// `--set` and the remaining flags.
pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut layer = Value::Object(Default::default());
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: toml::Table =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        layer = serde_json::to_value(table)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for key in PATH_KEYS {
            if let Some(Value::String(p)) = lookup(&layer, key) {
                let joined = base.join(p);
                set_path(&mut layer, &key.join("."), Value::String(joined.to_string_lossy().into_owned()))?;
            }
        }
    }
    let mut late = Value::Object(Default::default());
    for kv in &overrides.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        set_path(&mut late, k.trim(), parse_value(v.trim()))?;
    }
    if let Some(v) = &overrides.variant {
        set_path(&mut late, "variant", Value::String(v.clone()))?;
    }
    if let Some(s) = overrides.seed {
        set_path(&mut late, "seed", Value::from(s))?;
    }
    if let Some(out) = &overrides.out {
        set_path(&mut late, "paths.output_dir", Value::String(out.to_string_lossy().into_owned()))?;
    }
    let variant: Variant = match late.get("variant").or_else(|| layer.get("variant")) {
        Some(Value::String(s)) => s.parse()?,
        Some(other) => return Err(Error::Config(format!("variant must be a string, got {other}"))),
        None => RunConfig::default().variant,
    };
    let mut preset = RunConfig { variant, ..RunConfig::default() };
    variant.apply(&mut preset.noising, &mut preset.train);
    let mut merged = serde_json::to_value(&preset)?;
    merge(&mut merged, layer);
    // A variant chosen on the command line takes its preset over the file.
    if overrides.variant.is_some() {
        let mut cfg: RunConfig = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        variant.apply(&mut cfg.noising, &mut cfg.train);
        merged = serde_json::to_value(&cfg)?;
    }
    merge(&mut merged, late);
    let mut cfg: RunConfig = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
    cfg.apply_seed();
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with(set: &[&str]) -> Result<RunConfig> {
        resolve(None, &Overrides { set: set.iter().map(|s| s.to_string()).collect(), ..Default::default() })
    }

    #[test]
    fn variant_presets_fill_unset_fields() {
        let cfg = with(&["variant=iti"]).unwrap();
        assert_eq!((cfg.noising.p_iti, cfg.train.w_sf), (1.0, 0.0));
    }

    #[test]
    fn conflicting_override_is_rejected() {
        let err = with(&["variant=iti", "train.w_sf=0.5"]).unwrap_err();
        assert_eq!(err.kind(), idiomkit_core::ErrorKind::Validation);
    }

    #[test]
    fn variant_flag_overrides_file_presets() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.toml");
        std::fs::write(&file, "variant = \"iti+sf+si\"\n[train]\nepochs = 30\nw_sf = 1.0\n").unwrap();
        assert!(resolve(Some(&file), &Overrides { set: vec!["variant=base".into()], ..Default::default() }).is_err());
        let base = Overrides { variant: Some("base".into()), ..Default::default() };
        let cfg = resolve(Some(&file), &base).unwrap();
        assert_eq!((cfg.variant, cfg.train.epochs, cfg.train.w_sf), (Variant::Base, 0, 0.0));
        let clash = Overrides { variant: Some("iti".into()), set: vec!["train.w_sf=1.0".into()], ..Default::default() };
        assert!(resolve(Some(&file), &clash).is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(with(&["train.learning_rat=0.1"]).is_err());
    }

    #[test]
    fn master_seed_fans_out() {
        let cfg = with(&["seed=7"]).unwrap();
        assert_eq!((cfg.noising.seed, cfg.train.seed), (7, 7));
        assert_ne!(cfg.probe.span.seed, cfg.probe.disambiguation.seed);
        assert_eq!(cfg.hash(), with(&["seed=7"]).unwrap().hash());
    }
}
