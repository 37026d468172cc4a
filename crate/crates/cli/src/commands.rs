//! The pipeline stages. Each reads its inputs from the run directory, writes
//! its outputs atomically and records them in the manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use idiomkit_core::bank::{
    build_definition_embeddings, build_ie_embeddings, nearest_idioms, BackboneEncoder, PrecomputedEncoder,
    SentenceEncoder,
};
use idiomkit_core::corpus::magpie::{self, ShimStats};
use idiomkit_core::corpus::{
    align_span, filter_view, load_corpus, render_templates, split_stats, tokenize_corpus, Corpus, Dictionary,
    MeaningGroups, PieInstance, Sense, Split, TemplateSentence, TokenizedInstance, Tokenizer, View, VocabOptions,
    WordPieceTokenizer, TEMPLATES,
};
use idiomkit_core::eval::report::{from_jsonl, to_jsonl};
use idiomkit_core::eval::{
    categorize_span_errors, compare_variants, disambiguation_metrics, evaluate_intrinsic, majority_baseline,
    per_idiom_accuracy, per_idiom_correlation, predict_disambiguation, predict_span, span_metrics, train_probe, Comparison, DisambiguationMetrics,
    ErrorBreakdown, ErrorCategory, EvalReport, FrozenEmbedder, IdiomCorrelation, IntrinsicReport, LabelPrediction, MajorityBaseline,
    Probe, ProbeConfig, ProbeExample, ProbeMeta, ProbeOutcome, SpanErrorContext, SpanMetrics, TagPrediction,
};
use idiomkit_core::io::{atomic_write, read_to_string};
use idiomkit_core::model::{
    attach_adapter, load_checkpoint, AdaptedModel, AdapterSpec, Backbone, BackboneConfig, CheckpointFiles,
    ParameterPartition,
};
use idiomkit_core::noising::tokenize_template;
use idiomkit_core::training::{loss_log_csv, train_adapter, DefinitionTargets, TrainData, TrainOutcome};
use idiomkit_core::{BankKind, EmbeddingBank, Error, Result};

use crate::config::{BankSource, DefinitionEncoder, RunConfig};
use crate::manifest::{ArtifactKind, RunManifest};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Command {
    Ingest,
    Templates,
    TrainAdapter,
    BuildBank,
    EvalIntrinsic,
    TrainProbe,
    EvalProbe,
    ErrorAnalysis,
    Report,
}

impl Command {
    pub const PIPELINE: [Command; 9] = [
        Command::Ingest,
        Command::Templates,
        Command::TrainAdapter,
        Command::BuildBank,
        Command::EvalIntrinsic,
        Command::TrainProbe,
        Command::EvalProbe,
        Command::ErrorAnalysis,
        Command::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Templates => "templates",
            Command::TrainAdapter => "train-adapter",
            Command::BuildBank => "build-bank",
            Command::EvalIntrinsic => "eval-intrinsic",
            Command::TrainProbe => "train-probe",
            Command::EvalProbe => "eval-probe",
            Command::ErrorAnalysis => "error-analysis",
            Command::Report => "report",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::PIPELINE
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown command {s:?}")))
    }
}

/// Artifact locations inside a run directory.
pub mod layout {
    pub const PREPARED: &str = "prepared";
    pub const CHECKPOINTS: &str = "checkpoints";
    pub const BANKS: &str = "banks";
    pub const REPORTS: &str = "reports";
    pub const PREDICTIONS: &str = "predictions";

    pub const CONFIG: &str = "config.json";
    pub const CORPUS: &str = "prepared/corpus.jsonl";
    pub const DICTIONARY: &str = "prepared/dictionary.jsonl";
    pub const GROUPS: &str = "prepared/meaning_groups.json";
    pub const TOKENIZER: &str = "prepared/tokenizer.vocab";
    pub const INGEST_STATS: &str = "prepared/ingest.json";
    pub const TEMPLATES: &str = "prepared/templates.jsonl";
    pub const BEST: &str = "checkpoints/best";
    pub const PROBE_DISAMBIGUATION: &str = "checkpoints/probe_disambiguation";
    pub const PROBE_MASKED: &str = "checkpoints/probe_disambiguation_masked";
    pub const PROBE_SPAN: &str = "checkpoints/probe_span";
    pub const IE_BANK: &str = "banks/ie.bank";
    pub const DEFINITION_BANK: &str = "banks/definition.bank";
    pub const TRAIN_LOG: &str = "reports/train_log.csv";
    pub const TRAIN_SUMMARY: &str = "reports/train_summary.json";
    pub const INTRINSIC: &str = "reports/intrinsic.json";
    pub const PROBE_TRAINING: &str = "reports/probe_training.json";
    pub const EXTRINSIC: &str = "reports/extrinsic.json";
    pub const ERRORS: &str = "reports/errors.json";
    pub const REPORT_JSON: &str = "reports/report.json";
    pub const REPORT_MD: &str = "reports/report.md";
    pub const NEIGHBORS: &str = "predictions/neighbors.jsonl";
    pub const PRED_DISAMBIGUATION: &str = "predictions/disambiguation.jsonl";
    pub const PRED_MASKED: &str = "predictions/disambiguation_masked.jsonl";
    pub const PRED_SPAN: &str = "predictions/span.jsonl";
    pub const PRED_SPAN_ERRORS: &str = "predictions/span_errors.jsonl";
}

/// An opened run directory with its manifest.
pub struct Run {
    pub cfg: RunConfig,
    pub root: PathBuf,
    pub manifest: RunManifest,
}

struct Inputs {
    dictionary: Dictionary,
    groups: MeaningGroups,
    corpus: Corpus,
    tokenizer: WordPieceTokenizer,
}

#[derive(Serialize, Deserialize)]
struct IntrinsicFile {
    bank_source: String,
    ie: IntrinsicReport,
    definition: IntrinsicReport,
}

#[derive(Serialize, Deserialize)]
struct ExtrinsicFile {
    n_test_sentences: usize,
    disambiguation: DisambiguationMetrics,
    disambiguation_masked: Option<DisambiguationMetrics>,
    span: SpanMetrics,
    majority: MajorityBaseline,
    correlation: IdiomCorrelation,
}

#[derive(Serialize, Deserialize)]
struct ErrorsFile {
    n_sequences: usize,
    n_errors: usize,
    breakdown: ErrorBreakdown,
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    variant: String,
    partition: &'a ParameterPartition,
    train_sentences: usize,
    validation_sentences: usize,
    templates: usize,
    steps: usize,
    best: usize,
    best_epoch: usize,
    best_step: usize,
    checkpoints: &'a [idiomkit_core::training::CheckpointRecord],
    frozen_checksum: &'a str,
}

#[derive(Serialize, Deserialize)]
struct ProbeTrainingFile {
    embedder_checksum: String,
    train_sentences: usize,
    disambiguation: ProbeOutcome,
    span: ProbeOutcome,
    disambiguation_masked: Option<ProbeOutcome>,
}

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    Ok((serde_json::to_string_pretty(v)? + "\n").into_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&read_to_string(path)?)?)
}

fn stem_file(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

impl Run {
    /// Creates the directory layout and loads (or starts) the manifest.
    pub fn open(cfg: RunConfig) -> Result<Self> {
        let root = cfg.run_dir();
        for sub in [layout::PREPARED, layout::CHECKPOINTS, layout::BANKS, layout::REPORTS, layout::PREDICTIONS] {
            let d = root.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let hash = cfg.hash();
        let manifest = match RunManifest::load(&root) {
            Ok(mut m) => {
                if m.config_hash != hash {
                    log::warn!("configuration changed since this run directory was last used");
                    m.config_hash = hash;
                    m.variant = cfg.variant;
                    m.seeds = cfg.seeds();
                }
                m
            }
            Err(Error::MissingArtifact { .. }) => RunManifest::new(&cfg.tag, cfg.variant, &hash, cfg.seeds()),
            Err(e) => return Err(e),
        };
        let mut run = Self { cfg, root, manifest };
        let cfg_json = json_bytes(&run.cfg)?;
        run.write(layout::CONFIG, &cfg_json, ArtifactKind::Config, "config")?;
        run.manifest.save(&run.root)?;
        Ok(run)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn require(&self, rel: &str, producer: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact { path: p, producer: producer.into() })
        }
    }

    fn write(&mut self, rel: &str, bytes: &[u8], kind: ArtifactKind, producer: &str) -> Result<()> {
        let p = self.path(rel);
        atomic_write(&p, bytes)?;
        self.manifest.record(&self.root, &p, kind, producer)
    }

    fn record(&mut self, path: &Path, kind: ArtifactKind, producer: &str) -> Result<()> {
        self.manifest.record(&self.root, path, kind, producer)
    }

    /// Runs one command and saves the manifest with its timing.
    pub fn execute(&mut self, cmd: Command) -> Result<()> {
        log::info!("[{}] {cmd}", self.cfg.tag);
        let start = Instant::now();
        match cmd {
            Command::Ingest => self.ingest(),
            Command::Templates => self.templates(),
            Command::TrainAdapter => self.train_adapter(),
            Command::BuildBank => self.build_bank(),
            Command::EvalIntrinsic => self.eval_intrinsic(),
            Command::TrainProbe => self.train_probe(),
            Command::EvalProbe => self.eval_probe(),
            Command::ErrorAnalysis => self.error_analysis(),
            Command::Report => self.report(),
        }?;
        self.manifest.timings.insert(cmd.name().to_string(), start.elapsed().as_secs_f64());
        self.manifest.save(&self.root)
    }

    fn load_inputs(&self) -> Result<Inputs> {
        let dict_path = self.require(layout::DICTIONARY, "ingest")?;
        let mut dictionary = Dictionary::load(&dict_path)?;
        let groups = MeaningGroups::load(&self.require(layout::GROUPS, "ingest")?)?;
        dictionary.assign_groups(&groups);
        let corpus = load_corpus(&self.require(layout::CORPUS, "ingest")?, &dictionary)?;
        let tokenizer = WordPieceTokenizer::load(&self.require(layout::TOKENIZER, "ingest")?)?;
        Ok(Inputs { dictionary, groups, corpus, tokenizer })
    }

    fn backbone_config(&self, tokenizer: &dyn Tokenizer) -> Result<BackboneConfig> {
        let mut b = self.cfg.backbone.clone();
        if b.vocab_size == 0 {
            b.vocab_size = tokenizer.vocab_size();
        } else if b.vocab_size < tokenizer.vocab_size() {
            return Err(Error::Config(format!(
                "backbone vocab_size {} is smaller than the tokenizer's {}",
                b.vocab_size,
                tokenizer.vocab_size()
            )));
        }
        b.validate()?;
        Ok(b)
    }

    fn fresh_model(&self, tokenizer: &dyn Tokenizer) -> Result<(AdaptedModel, ParameterPartition)> {
        let backbone = Backbone::new(&self.backbone_config(tokenizer)?)?;
        attach_adapter(backbone, &self.cfg.adapter)
    }

    /// Definition vectors from the configured encoder; the backbone binding
    /// always uses the untouched backbone.
    fn definition_bank(&self, inputs: &Inputs, ids: &[&str]) -> Result<EmbeddingBank> {
        match self.cfg.bank.definition_encoder {
            DefinitionEncoder::Backbone => {
                let backbone = Backbone::new(&self.backbone_config(&inputs.tokenizer)?)?;
                let (model, _) = attach_adapter(backbone, &AdapterSpec::default())?;
                let enc = BackboneEncoder::new(&model, &inputs.tokenizer);
                build_definition_embeddings(&inputs.dictionary, ids, &enc)
            }
            DefinitionEncoder::Precomputed => {
                let path = self.cfg.bank.definition_vectors.as_deref().expect("validated");
                let enc = PrecomputedEncoder::load(path)?;
                build_definition_embeddings(&inputs.dictionary, ids, &enc as &dyn SentenceEncoder)
            }
        }
    }

    fn load_model(&self) -> Result<AdaptedModel> {
        let stem = self.path(layout::BEST);
        let mut model = load_checkpoint(&stem)?;
        model.set_backbone_trainable(false)?;
        Ok(model)
    }

    fn ingest(&mut self) -> Result<()> {
        let paths = self.cfg.paths.clone();
        let mut dictionary = Dictionary::load(&paths.dictionary)?;
        let groups = MeaningGroups::load(&paths.groups)?;
        dictionary.assign_groups(&groups);
        let missing: Vec<&str> = groups
            .groups
            .iter()
            .flat_map(|g| g.idiom_ids.iter())
            .filter(|id| dictionary.get(id).is_none())
            .map(String::as_str)
            .collect();
        if !missing.is_empty() {
            log::warn!("{} grouped idioms are missing from the dictionary: {}", missing.len(), missing.join(", "));
        }
        let (corpus, shim): (Corpus, Option<ShimStats>) = match self.cfg.paths.corpus_format {
            crate::config::CorpusFormat::Jsonl => (load_corpus(&paths.corpus, &dictionary)?, None),
            crate::config::CorpusFormat::Magpie => {
                let text = read_to_string(&paths.corpus)?;
                let (instances, stats) = magpie::convert(&text, &paths.corpus.display().to_string())?;
                (Corpus::new(instances, &dictionary)?, Some(stats))
            }
        };
        if !corpus.unknown_idiom_instances().is_empty() {
            log::warn!("{} instances reference idioms missing from the dictionary", corpus.unknown_idiom_instances().len());
        }
        let tokenizer = match &self.cfg.tokenizer.vocab {
            Some(p) => WordPieceTokenizer::load(p)?,
            None => {
                let mut texts: Vec<String> = corpus.split(Split::Train).map(|i| i.text.clone()).collect();
                for e in dictionary.entries() {
                    texts.push(e.lemma.clone());
                    texts.push(e.definition.clone());
                }
                texts.extend(TEMPLATES.iter().map(|t| t.replace("{IE}", "")));
                let opts = VocabOptions {
                    max_size: self.cfg.tokenizer.max_size,
                    min_count: self.cfg.tokenizer.min_count,
                    lowercase: self.cfg.tokenizer.lowercase,
                };
                WordPieceTokenizer::train(texts.iter().map(String::as_str), &opts)
            }
        };
        let tok_path = self.path(layout::TOKENIZER);
        idiomkit_core::io::atomic_with(&tok_path, |tmp| tokenizer.save(tmp))?;
        self.record(&tok_path, ArtifactKind::Prepared, "ingest")?;

        let mut corpus_bytes = Vec::new();
        corpus.write_jsonl(&mut corpus_bytes).map_err(|e| Error::io(self.path(layout::CORPUS), e))?;
        self.write(layout::CORPUS, &corpus_bytes, ArtifactKind::Prepared, "ingest")?;
        let mut dict_bytes = Vec::new();
        dictionary.write_jsonl(&mut dict_bytes).map_err(|e| Error::io(self.path(layout::DICTIONARY), e))?;
        self.write(layout::DICTIONARY, &dict_bytes, ArtifactKind::Prepared, "ingest")?;
        self.write(layout::GROUPS, groups.to_json().as_bytes(), ArtifactKind::Prepared, "ingest")?;

        let train = corpus.subset(|i| i.split == Split::Train);
        let test = corpus.subset(|i| i.split == Split::Test);
        let emb = filter_view(&train, &dictionary, View::Embedding);
        let probe_test = filter_view(&test, &dictionary, View::Probe);
        let stats = json!({
            "instances": corpus.len(),
            "idioms": corpus.idiom_count(),
            "unknown_idiom_instances": corpus.unknown_idiom_instances().len(),
            "train": split_stats(&corpus, Split::Train),
            "test": split_stats(&corpus, Split::Test),
            "embedding_view": { "instances": emb.len(), "idioms": emb.idiom_count() },
            "probe_test_view": {
                "instances": probe_test.len(),
                "idioms": probe_test.idiom_count(),
                "idiomatic_fraction": probe_test.idiomatic_fraction(),
            },
            "meaning_groups": {
                "groups": groups.len(),
                "idioms": groups.idiom_count(),
                "mean_size": groups.mean_group_size(),
            },
            "tokenizer": { "name": tokenizer.name(), "vocab_size": tokenizer.vocab_size() },
            "magpie": shim,
        });
        self.write(layout::INGEST_STATS, &json_bytes(&stats)?, ArtifactKind::Prepared, "ingest")
    }

    fn embedding_view(&self, inputs: &Inputs) -> Corpus {
        let train = inputs.corpus.subset(|i| i.split == Split::Train);
        filter_view(&train, &inputs.dictionary, View::Embedding)
    }

    fn templates(&mut self) -> Result<()> {
        let inputs = self.load_inputs()?;
        let view = self.embedding_view(&inputs);
        let ids: BTreeSet<&str> = view.instances().iter().map(|i| i.idiom_id.as_str()).collect();
        let mut rows = Vec::new();
        let mut skipped = 0;
        for id in ids {
            let entry = inputs.dictionary.get(id).expect("view keeps known idioms");
            if !entry.has_definition() {
                skipped += 1;
                continue;
            }
            rows.extend(render_templates(entry)?);
        }
        if skipped > 0 {
            log::warn!("{skipped} training idioms have no definition and get no templates");
        }
        self.write(layout::TEMPLATES, to_jsonl(&rows)?.as_bytes(), ArtifactKind::Prepared, "templates")
    }

    fn train_adapter(&mut self) -> Result<()> {
        let inputs = self.load_inputs()?;
        let view = self.embedding_view(&inputs);
        let instances = tokenize_corpus(&view, &inputs.tokenizer)?;
        let templates = if self.cfg.noising.template_mix > 0.0 {
            let path = self.require(layout::TEMPLATES, "templates")?;
            let rows: Vec<TemplateSentence> = from_jsonl(&read_to_string(&path)?, &path.display().to_string())?;
            rows.iter().map(|t| tokenize_template(t, &inputs.tokenizer)).collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let (mut model, partition) = self.fresh_model(&inputs.tokenizer)?;
        let dtype = model.config().precision.dtype();
        let defs = if self.cfg.train.w_sf > 0.0 {
            let ids: BTreeSet<&str> = instances.iter().map(|i| i.idiom_id.as_str()).collect();
            let ids: Vec<&str> = ids.into_iter().collect();
            DefinitionTargets::from_bank(&self.definition_bank(&inputs, &ids)?, dtype)?
        } else {
            DefinitionTargets::from_bank(&EmbeddingBank::new(BankKind::Definition, 1), dtype)?
        };
        let data = TrainData { instances: &instances, templates: &templates, specials: inputs.tokenizer.special_ids() };
        let ckpt_dir = self.path(layout::CHECKPOINTS);
        let outcome: TrainOutcome =
            train_adapter(&mut model, &data, &self.cfg.noising, &defs, &self.cfg.train, Some(&ckpt_dir))?;
        let mut files: Vec<&CheckpointFiles> = outcome.checkpoints.iter().filter_map(|c| c.files.as_ref()).collect();
        files.extend(outcome.best_files.as_ref());
        let paths: Vec<PathBuf> = files.iter().flat_map(|f| f.all()).map(Path::to_path_buf).collect();
        for p in paths {
            self.record(&p, ArtifactKind::Checkpoint, "train-adapter")?;
        }
        self.write(layout::TRAIN_LOG, loss_log_csv(&outcome.log).as_bytes(), ArtifactKind::Report, "train-adapter")?;
        let best = &outcome.checkpoints[outcome.best];
        let summary = TrainSummary {
            variant: self.cfg.variant.to_string(),
            partition: &partition,
            train_sentences: outcome.train_sentences,
            validation_sentences: outcome.validation_sentences,
            templates: templates.len(),
            steps: outcome.log.len(),
            best: outcome.best,
            best_epoch: best.epoch,
            best_step: best.step,
            checkpoints: &outcome.checkpoints,
            frozen_checksum: &outcome.frozen_checksum,
        };
        let mut value = serde_json::to_value(&summary)?;
        strip_checkpoint_paths(&mut value, &self.root);
        self.write(layout::TRAIN_SUMMARY, &json_bytes(&value)?, ArtifactKind::Report, "train-adapter")
    }

    fn bank_instances(&self, inputs: &Inputs) -> Result<Vec<TokenizedInstance>> {
        let source = self.cfg.bank.source;
        let view = inputs.corpus.subset(|i| {
            i.sense == Sense::Idiomatic
                && match source {
                    BankSource::Test => i.split == Split::Test,
                    BankSource::Train => i.split == Split::Train,
                    BankSource::All => true,
                }
        });
        tokenize_corpus(&view, &inputs.tokenizer)
    }

    fn build_bank(&mut self) -> Result<()> {
        let inputs = self.load_inputs()?;
        let model = self.load_model()?;
        let instances = self.bank_instances(&inputs)?;
        let side = self.cfg.train.extraction;
        let mut ie = build_ie_embeddings(&model, &instances, None, &inputs.tokenizer, side, self.cfg.bank.batch_size)?;
        ie.set_provenance("source", self.cfg.bank.source.label());
        ie.set_provenance("variant", self.cfg.variant.tag());
        ie.set_provenance("adapter_checksum", model.adapter_store().checksum()?);
        let mut ids: BTreeSet<&str> = ie.ids().collect();
        for g in &inputs.groups.groups {
            ids.extend(g.idiom_ids.iter().map(String::as_str));
        }
        let ids: Vec<&str> = ids
            .into_iter()
            .filter(|id| inputs.dictionary.get(id).is_some_and(|e| e.has_definition()))
            .collect();
        let def = self.definition_bank(&inputs, &ids)?;
        for (rel, bank) in [(layout::IE_BANK, &ie), (layout::DEFINITION_BANK, &def)] {
            let p = self.path(rel);
            bank.save(&p)?;
            self.record(&p, ArtifactKind::Bank, "build-bank")?;
        }
        Ok(())
    }

    fn eval_intrinsic(&mut self) -> Result<()> {
        let inputs_groups = MeaningGroups::load(&self.require(layout::GROUPS, "ingest")?)?;
        let ie = EmbeddingBank::load(&self.path(layout::IE_BANK))?;
        let def = EmbeddingBank::load(&self.path(layout::DEFINITION_BANK))?;
        let groups = &inputs_groups;
        let ids: Vec<&str> = ie.ids().filter(|id| groups.group_of(id).is_some()).collect();
        let missing_def: Vec<&str> = ids.iter().copied().filter(|id| !def.contains(id)).collect();
        if !missing_def.is_empty() {
            return Err(Error::Validation(format!("definition bank lacks grouped idioms: {}", missing_def.join(", "))));
        }
        let present: BTreeSet<usize> = ids.iter().filter_map(|id| groups.group_of(id)).collect();
        if ids.len() < 2 || present.len() < 2 {
            return Err(Error::Validation(format!(
                "clustering needs idioms from at least two meaning groups; the IE bank has {} grouped idioms",
                ids.len()
            )));
        }
        let n_clusters = self.cfg.eval.n_clusters.unwrap_or(present.len());
        let k = self.cfg.eval.k;
        let ie_report = evaluate_intrinsic(&ie, groups, n_clusters, k)?;
        let def_report = evaluate_intrinsic(&def.restrict(ids.iter().copied()), groups, n_clusters, k)?;
        let file = IntrinsicFile {
            bank_source: ie.provenance().get("source").cloned().unwrap_or_default(),
            ie: ie_report,
            definition: def_report,
        };
        self.write(layout::INTRINSIC, &json_bytes(&file)?, ArtifactKind::Report, "eval-intrinsic")?;
        let mut rows = Vec::new();
        if ie.len() > k {
            for id in &ids {
                let nn = nearest_idioms(&ie, id, k)?;
                rows.push(json!({
                    "idiom_id": id,
                    "group_id": groups.group_id_of(id),
                    "neighbors": nn.iter().map(|(n, c)| json!({"idiom_id": n, "cosine": c})).collect::<Vec<_>>(),
                }));
            }
        }
        self.write(layout::NEIGHBORS, to_jsonl(&rows)?.as_bytes(), ArtifactKind::Prediction, "eval-intrinsic")
    }

    fn probe_view(&self, inputs: &Inputs, split: Split) -> Result<Vec<TokenizedInstance>> {
        let part = inputs.corpus.subset(|i| i.split == split);
        tokenize_corpus(&filter_view(&part, &inputs.dictionary, View::Probe), &inputs.tokenizer)
    }

    fn train_probe(&mut self) -> Result<()> {
        let inputs = self.load_inputs()?;
        let model = self.load_model()?;
        let embedder = FrozenEmbedder::new(&model, self.cfg.train.extraction)?;
        let instances = self.probe_view(&inputs, Split::Train)?;
        let specials = inputs.tokenizer.special_ids();
        let batch = self.cfg.bank.batch_size;
        let examples = embedder.embed(&instances, specials, false, batch)?;
        let mut outcomes = Vec::new();
        let mut plan: Vec<(&str, ProbeConfig, bool)> = vec![
            (layout::PROBE_DISAMBIGUATION, self.cfg.probe.disambiguation.clone(), false),
            (layout::PROBE_SPAN, self.cfg.probe.span.clone(), false),
        ];
        if self.cfg.eval.masked_control {
            let cfg = ProbeConfig { mask_pie: true, ..self.cfg.probe.disambiguation.clone() };
            plan.push((layout::PROBE_MASKED, cfg, true));
        }
        for (rel, cfg, masked) in plan {
            let data = if masked { embedder.embed(&instances, specials, true, batch)? } else { examples.clone() };
            let (probe, outcome) = train_probe(&data, &cfg)?;
            let meta = ProbeMeta {
                task: cfg.task,
                dim: data[0].pooled.len(),
                config: cfg,
                embedder_checksum: embedder.checksum().to_string(),
                best_epoch: outcome.best_epoch,
            };
            let stem = self.path(rel);
            probe.save(&stem, &meta)?;
            for ext in [".json", ".safetensors"] {
                self.record(&stem_file(&stem, ext), ArtifactKind::Checkpoint, "train-probe")?;
            }
            outcomes.push(outcome);
        }
        embedder.verify()?;
        let mut it = outcomes.into_iter();
        let file = ProbeTrainingFile {
            embedder_checksum: embedder.checksum().to_string(),
            train_sentences: examples.len(),
            disambiguation: it.next().unwrap(),
            span: it.next().unwrap(),
            disambiguation_masked: it.next(),
        };
        self.write(layout::PROBE_TRAINING, &json_bytes(&file)?, ArtifactKind::Report, "train-probe")
    }

    fn load_probe(&self, rel: &str, embedder: &FrozenEmbedder) -> Result<Probe> {
        let stem = self.path(rel);
        if !stem_file(&stem, ".json").exists() {
            return Err(Error::MissingArtifact { path: stem_file(&stem, ".json"), producer: "train-probe".into() });
        }
        let (probe, meta) = Probe::load(&stem)?;
        if meta.embedder_checksum != embedder.checksum() {
            return Err(Error::Integrity(format!(
                "{} was trained on different embeddings; rerun train-probe",
                stem.display()
            )));
        }
        Ok(probe)
    }

    fn eval_probe(&mut self) -> Result<()> {
        let inputs = self.load_inputs()?;
        let model = self.load_model()?;
        let embedder = FrozenEmbedder::new(&model, self.cfg.train.extraction)?;
        let dprobe = self.load_probe(layout::PROBE_DISAMBIGUATION, &embedder)?;
        let sprobe = self.load_probe(layout::PROBE_SPAN, &embedder)?;
        let mprobe = if self.cfg.eval.masked_control {
            Some(self.load_probe(layout::PROBE_MASKED, &embedder)?)
        } else {
            None
        };
        let instances = self.probe_view(&inputs, Split::Test)?;
        if instances.is_empty() {
            return Err(Error::Validation("the test split has no probe sentences".into()));
        }
        let specials = inputs.tokenizer.special_ids();
        let batch = self.cfg.bank.batch_size;
        let examples = embedder.embed(&instances, specials, false, batch)?;
        let ids: Vec<String> = examples.iter().map(|e| e.instance_id.clone()).collect();
        let gold_labels: Vec<bool> = examples.iter().map(ProbeExample::gold_label).collect();
        let gold_tags: Vec<Vec<bool>> = examples.iter().map(ProbeExample::gold_tags).collect();

        let pred_labels = predict_disambiguation(&dprobe, &examples)?;
        let pred_tags = predict_span(&sprobe, &examples)?;
        let label_rows = |pred: &[bool]| -> Vec<LabelPrediction> {
            ids.iter()
                .zip(pred)
                .zip(&gold_labels)
                .map(|((id, &label), &gold)| LabelPrediction { instance_id: id.clone(), label, gold })
                .collect()
        };
        let tag_rows: Vec<TagPrediction> = ids
            .iter()
            .zip(&pred_tags)
            .zip(&gold_tags)
            .map(|((id, t), g)| TagPrediction { instance_id: id.clone(), tags: t.clone(), gold: g.clone() })
            .collect();
        self.write(layout::PRED_DISAMBIGUATION, to_jsonl(&label_rows(&pred_labels))?.as_bytes(), ArtifactKind::Prediction, "eval-probe")?;
        self.write(layout::PRED_SPAN, to_jsonl(&tag_rows)?.as_bytes(), ArtifactKind::Prediction, "eval-probe")?;
        let masked = match &mprobe {
            Some(p) => {
                let mex = embedder.embed(&instances, specials, true, batch)?;
                let pred = predict_disambiguation(p, &mex)?;
                self.write(layout::PRED_MASKED, to_jsonl(&label_rows(&pred))?.as_bytes(), ArtifactKind::Prediction, "eval-probe")?;
                Some(disambiguation_metrics(&pred, &gold_labels)?)
            }
            None => None,
        };
        embedder.verify()?;
        let mut train_counts: BTreeMap<String, usize> = BTreeMap::new();
        for i in self.probe_view(&inputs, Split::Train)? {
            *train_counts.entry(i.idiom_id).or_default() += 1;
        }
        let idioms: Vec<&str> = examples.iter().map(|e| e.idiom_id.as_str()).collect();
        let hit = |ok: bool| if ok { 1.0 } else { 0.0 };
        let d_acc: Vec<f64> = pred_labels.iter().zip(&gold_labels).map(|(p, g)| hit(p == g)).collect();
        let s_acc: Vec<f64> = pred_tags.iter().zip(&gold_tags).map(|(p, g)| hit(p == g)).collect();
        let d_acc = per_idiom_accuracy(&idioms, &d_acc)?;
        let s_acc = per_idiom_accuracy(&idioms, &s_acc)?;
        let correlation = IdiomCorrelation {
            n_idioms: d_acc.len(),
            disambiguation: per_idiom_correlation(&d_acc, &train_counts).ok(),
            span: per_idiom_correlation(&s_acc, &train_counts).ok(),
        };
        let file = ExtrinsicFile {
            n_test_sentences: examples.len(),
            disambiguation: disambiguation_metrics(&pred_labels, &gold_labels)?,
            disambiguation_masked: masked,
            span: span_metrics(&pred_tags, &gold_tags, &ids)?,
            majority: majority_baseline(&gold_labels, &gold_tags, &ids)?,
            correlation,
        };
        self.write(layout::EXTRINSIC, &json_bytes(&file)?, ArtifactKind::Report, "eval-probe")
    }

    fn error_analysis(&mut self) -> Result<()> {
        let pred_path = self.require(layout::PRED_SPAN, "eval-probe")?;
        let preds: Vec<TagPrediction> = from_jsonl(&read_to_string(&pred_path)?, &pred_path.display().to_string())?;
        let inputs = self.load_inputs()?;
        let by_id: BTreeMap<&str, &PieInstance> =
            inputs.corpus.instances().iter().map(|i| (i.instance_id.as_str(), i)).collect();
        let mut by_text: BTreeMap<&str, Vec<&PieInstance>> = BTreeMap::new();
        for i in inputs.corpus.instances() {
            by_text.entry(i.text.as_str()).or_default().push(i);
        }
        let mut contexts = Vec::with_capacity(preds.len());
        for p in &preds {
            let inst = by_id.get(p.instance_id.as_str()).ok_or_else(|| Error::InvalidRecord {
                id: p.instance_id.clone(),
                message: "prediction refers to an instance missing from the corpus".into(),
            })?;
            let enc = inputs.tokenizer.encode(&inst.text);
            let others = by_text[inst.text.as_str()]
                .iter()
                .filter(|o| o.instance_id != inst.instance_id && o.sense == Sense::Idiomatic)
                .map(|o| align_span(&enc, o.pie_char_span))
                .collect::<Result<Vec<_>>>()?;
            let figurative = inst
                .figurative_spans
                .iter()
                .map(|s| align_span(&enc, *s))
                .collect::<Result<Vec<_>>>()?;
            contexts.push(SpanErrorContext {
                sense: Some(inst.sense),
                pie_span: Some(align_span(&enc, inst.pie_char_span)?),
                other_ie_spans: others,
                figurative_spans: figurative,
            });
        }
        let pred: Vec<Vec<bool>> = preds.iter().map(|p| p.tags.clone()).collect();
        let gold: Vec<Vec<bool>> = preds.iter().map(|p| p.gold.clone()).collect();
        let (breakdown, per) = categorize_span_errors(&pred, &gold, &contexts)?;
        let rows: Vec<serde_json::Value> = preds
            .iter()
            .zip(&per)
            .filter_map(|(p, c)| c.map(|c: ErrorCategory| json!({"instance_id": p.instance_id, "category": c})))
            .collect();
        self.write(layout::PRED_SPAN_ERRORS, to_jsonl(&rows)?.as_bytes(), ArtifactKind::Prediction, "error-analysis")?;
        let file = ErrorsFile { n_sequences: preds.len(), n_errors: breakdown.total, breakdown };
        self.write(layout::ERRORS, &json_bytes(&file)?, ArtifactKind::Report, "error-analysis")
    }

    /// Assembles the evaluation report from the stage outputs.
    pub fn assemble_report(&self) -> Result<EvalReport> {
        let intrinsic: IntrinsicFile = read_json(&self.require(layout::INTRINSIC, "eval-intrinsic")?)?;
        let extrinsic: ExtrinsicFile = read_json(&self.require(layout::EXTRINSIC, "eval-probe")?)?;
        let errors_path = self.path(layout::ERRORS);
        let errors: Option<ErrorsFile> = if errors_path.exists() { Some(read_json(&errors_path)?) } else { None };
        let mut r = EvalReport::new(self.cfg.tag.clone(), self.cfg.variant);
        r.bank_source = Some(intrinsic.bank_source);
        r.intrinsic = Some(intrinsic.ie);
        r.definition_intrinsic = Some(intrinsic.definition);
        r.disambiguation = Some(extrinsic.disambiguation);
        r.disambiguation_masked = extrinsic.disambiguation_masked;
        r.span = Some(extrinsic.span);
        r.majority = Some(extrinsic.majority);
        r.correlation = Some(extrinsic.correlation);
        r.span_errors = errors.map(|e| e.breakdown);
        Ok(r)
    }

    fn report(&mut self) -> Result<()> {
        let r = self.assemble_report()?;
        self.write(layout::REPORT_JSON, r.to_json()?.as_bytes(), ArtifactKind::Report, "report")?;
        self.write(layout::REPORT_MD, r.to_markdown().as_bytes(), ArtifactKind::Report, "report")
    }
}

/// Replaces absolute checkpoint paths with run-relative ones so summaries
/// do not depend on where the run directory lives.
fn strip_checkpoint_paths(v: &mut serde_json::Value, root: &Path) {
    match v {
        serde_json::Value::String(s) => {
            if let Ok(rel) = Path::new(s.as_str()).strip_prefix(root) {
                *s = rel.to_string_lossy().replace('\\', "/");
            }
        }
        serde_json::Value::Array(a) => a.iter_mut().for_each(|x| strip_checkpoint_paths(x, root)),
        serde_json::Value::Object(o) => o.values_mut().for_each(|x| strip_checkpoint_paths(x, root)),
        _ => {}
    }
}

pub fn run_command(cmd: Command, cfg: RunConfig) -> Result<RunManifest> {
    let mut run = Run::open(cfg)?;
    run.execute(cmd)?;
    Ok(run.manifest)
}

pub fn run_pipeline(cfg: RunConfig) -> Result<RunManifest> {
    let mut run = Run::open(cfg)?;
    for cmd in Command::PIPELINE {
        run.execute(cmd)?;
    }
    Ok(run.manifest)
}

/// Reads each run's report and writes the normalized comparison to `out`.
pub fn compare_runs(run_dirs: &[PathBuf], out: &Path) -> Result<Comparison> {
    let mut reports = Vec::with_capacity(run_dirs.len());
    for dir in run_dirs {
        let p = dir.join(layout::REPORT_JSON);
        if !p.exists() {
            return Err(Error::MissingArtifact { path: p, producer: "report".into() });
        }
        reports.push(read_json::<EvalReport>(&p)?);
    }
    let cmp = compare_variants(&reports)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    atomic_write(&out.join("comparison.json"), &json_bytes(&cmp)?)?;
    atomic_write(&out.join("comparison.md"), cmp.to_markdown().as_bytes())?;
    Ok(cmp)
}
