//! Pipeline configuration and stage orchestration.
//!
//! Every stage reads its inputs from and writes its outputs to the work
//! directory, so stages can be rerun on their own. Outputs carry the config
//! hash and seed; a stage refuses upstream artifacts stamped with a
//! different hash.
//!
//! Stage switches map onto the ablation variants:
//! `stage1 = false` trains on the annotated set only, `stage2 = false` keeps
//! every CRF prediction, `stage3 = false` grounds with zero in-context
//! examples and `mes = false` uses the first `k` annotated samples as fixed
//! examples.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::artifact::{self, ArtifactMeta};
use crate::bio::LabelSet;
use crate::crf::{self, CheckpointMeta, CrfModel, Example, MarginalTable, TrainConfig};
use crate::dataset::{load_dataset, AnnotatedSample, DatasetFormat, GmnerTriplet, MentionSpan, Schema, Sentence};
use crate::embedding::{self, EmbeddingStore};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, MatchMode, PredictionRecord};
use crate::gateway::{Gateway, GatewayConfig, GatewayMode, HttpTransport, TranscriptCache};
use crate::icl::{SelectionTrace, Selector, SelectorConfig, Stores};
use crate::prompt::Templates;
use crate::refine::{self, RefineConfig, RefineStats, RefinementOutcome};
use crate::synthesis::{self, GuidelineTable, Rejection, Strategy, SynthRecord, SynthesizedSample};
use crate::uncertainty::{self, RouterConfig, RoutingRecord};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Annotated set: guideline traversal, synthesis seeds, CRF training
    /// and the in-context example pool.
    pub train: PathBuf,
    pub test: PathBuf,
    pub image_root: PathBuf,
    pub token_embeddings: PathBuf,
    pub sentence_embeddings: PathBuf,
    pub entity_embeddings: PathBuf,
    pub image_embeddings: PathBuf,
    pub transcripts: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaConfig {
    pub types: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stages {
    pub stage1: bool,
    pub stage2: bool,
    pub stage3: bool,
    /// Dynamic multimodal example selection; off means fixed first-k.
    pub mes: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Stages {
            stage1: true,
            stage2: true,
            stage3: true,
            mes: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisSettings {
    pub strategies: Vec<Strategy>,
    pub count_per_seed: usize,
}

impl Default for SynthesisSettings {
    fn default() -> Self {
        SynthesisSettings {
            strategies: vec![Strategy::Substitution, Strategy::Paraphrase],
            count_per_seed: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenKeys {
    /// `{sentence id}#{token index}`: contextual token vectors.
    #[default]
    Positional,
    /// Bare token surface: one vector per word type.
    Surface,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSettings {
    pub token_keys: TokenKeys,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub mode: MatchMode,
    pub f1_gate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    #[serde(default)]
    pub variant: Option<String>,
    pub seed: u64,
    pub work_dir: PathBuf,
    pub paths: Paths,
    pub schema: SchemaConfig,
    #[serde(default)]
    pub stages: Stages,
    #[serde(default)]
    pub synthesis: SynthesisSettings,
    #[serde(default)]
    pub features: FeatureSettings,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub router: RouterConfig,
    #[serde(default)]
    pub refine: RefineConfig,
    #[serde(default)]
    pub selector: SelectorConfig,
    #[serde(default)]
    pub gateway: GatewayConfig,
    #[serde(default)]
    pub eval: EvalSettings,
}

/// Fields that change how a run executes but not what it computes.
const UNHASHED: &[&[&str]] = &[
    &["work_dir"],
    &["gateway", "mode"],
    &["gateway", "endpoint"],
    &["gateway", "api_key_env"],
    &["gateway", "max_retries"],
    &["gateway", "backoff_ms"],
    &["gateway", "concurrency"],
    &["gateway", "timeout_secs"],
    &["train", "parallel"],
    &["eval", "f1_gate"],
];

impl PipelineConfig {
    /// Parses a TOML config, applies `key.path=value` overrides and resolves
    /// relative paths against the config file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<(Self, String)> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&raw, overrides, base)
    }

    pub fn from_toml(raw: &str, overrides: &[String], base: &Path) -> Result<(Self, String)> {
        let mut value: toml::Value = toml::from_str(raw).map_err(|e| Error::Config {
            field: "<file>".into(),
            message: e.to_string(),
        })?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut config: PipelineConfig = value.try_into().map_err(|e: toml::de::Error| Error::Config {
            field: "<file>".into(),
            message: e.message().to_string(),
        })?;
        let hash = config.hash()?;
        config.resolve(base);
        config.validate()?;
        Ok((config, hash))
    }

    /// SHA-256 over the canonical JSON form, minus execution-only fields.
    /// Taken before path resolution so the hash does not depend on where
    /// the checkout lives.
    pub fn hash(&self) -> Result<String> {
        let mut v = serde_json::to_value(self).map_err(|e| Error::json("config", e))?;
        for path in UNHASHED {
            let (last, parents) = path.split_last().unwrap();
            let mut cur = &mut v;
            for p in parents {
                cur = &mut cur[*p];
            }
            if let Some(obj) = cur.as_object_mut() {
                obj.remove(*last);
            }
        }
        let canonical = serde_json::to_string(&v).map_err(|e| Error::json("config", e))?;
        Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.work_dir);
        let p = &mut self.paths;
        for path in [
            &mut p.train,
            &mut p.test,
            &mut p.image_root,
            &mut p.token_embeddings,
            &mut p.sentence_embeddings,
            &mut p.entity_embeddings,
            &mut p.image_embeddings,
            &mut p.transcripts,
        ] {
            fix(path);
        }
        if let Some(t) = &mut p.templates {
            fix(t);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |field: &str, message: String| Error::Config {
            field: field.into(),
            message,
        };
        if self.version != CONFIG_VERSION {
            return Err(cfg(
                "version",
                format!("expected {CONFIG_VERSION}, found {}", self.version),
            ));
        }
        Schema::new(&self.schema.types).map_err(|e| cfg("schema.types", e.to_string()))?;
        self.router.validate()?;
        self.selector.validate().map_err(|e| cfg("selector", e.to_string()))?;
        self.gateway.validate()?;
        if self.train.batch_size == 0 {
            return Err(cfg("train.batch_size", "must be positive".into()));
        }
        if self.stages.stage1 && (self.synthesis.strategies.is_empty() || self.synthesis.count_per_seed == 0) {
            return Err(cfg(
                "synthesis",
                "stage1 needs at least one strategy and count_per_seed >= 1".into(),
            ));
        }
        if let Some(g) = self.eval.f1_gate {
            if !(0.0..=1.0).contains(&g) {
                return Err(cfg("eval.f1_gate", format!("must lie in [0, 1], got {g}")));
            }
        }
        Ok(())
    }

    /// Checks that every input path exists.
    pub fn check_paths(&self) -> Result<()> {
        let p = &self.paths;
        let required = [
            ("paths.train", &p.train),
            ("paths.test", &p.test),
            ("paths.image_root", &p.image_root),
            ("paths.token_embeddings", &p.token_embeddings),
            ("paths.sentence_embeddings", &p.sentence_embeddings),
            ("paths.entity_embeddings", &p.entity_embeddings),
            ("paths.image_embeddings", &p.image_embeddings),
        ];
        for (field, path) in required {
            if !path.exists() {
                return Err(Error::Config {
                    field: field.into(),
                    message: format!("{} does not exist", path.display()),
                });
            }
        }
        if self.gateway.mode == GatewayMode::Replay && !p.transcripts.exists() {
            return Err(Error::Config {
                field: "paths.transcripts".into(),
                message: format!("{} does not exist (required in replay mode)", p.transcripts.display()),
            });
        }
        Ok(())
    }

    pub fn variant(&self) -> String {
        if let Some(v) = &self.variant {
            return v.clone();
        }
        let s = &self.stages;
        match (s.stage1, s.stage2, s.stage3, s.mes) {
            (true, true, true, true) => "overall".into(),
            (false, true, true, true) => "w/o stage1".into(),
            (true, false, true, true) => "w/o stage2".into(),
            (true, true, false, _) => "w/o stage3".into(),
            (true, true, true, false) => "w/o mes".into(),
            _ => format!(
                "stage1={} stage2={} stage3={} mes={}",
                s.stage1, s.stage2, s.stage3, s.mes
            ),
        }
    }

    pub fn schema(&self) -> Schema {
        Schema::new(&self.schema.types).expect("validated")
    }
}

fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| Error::Config {
        field: spec.into(),
        message: "override must look like key.path=value".into(),
    })?;
    let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let table = cur.as_table_mut().ok_or_else(|| Error::Config {
            field: key.into(),
            message: format!("`{}` is not a table", parts[..i].join(".")),
        })?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    unreachable!("split yields at least one part")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Artifact {
    Guideline,
    Synth,
    SynthRejects,
    Checkpoint,
    Inference,
    Routing,
    Refined,
    Selection,
    Predictions,
    Report,
    ReportText,
}

impl Artifact {
    pub fn file_name(self) -> &'static str {
        match self {
            Artifact::Guideline => "guideline.json",
            Artifact::Synth => "synth.jsonl",
            Artifact::SynthRejects => "synth_rejects.jsonl",
            Artifact::Checkpoint => "crf.bin",
            Artifact::Inference => "infer.jsonl",
            Artifact::Routing => "routing.jsonl",
            Artifact::Refined => "refined.jsonl",
            Artifact::Selection => "selection.jsonl",
            Artifact::Predictions => "predictions.jsonl",
            Artifact::Report => "report.json",
            Artifact::ReportText => "report.txt",
        }
    }

    /// Command that writes this artifact.
    pub fn stage(self) -> &'static str {
        match self {
            Artifact::Guideline | Artifact::Synth | Artifact::SynthRejects => "synthesize",
            Artifact::Checkpoint => "train",
            Artifact::Inference => "infer",
            Artifact::Routing | Artifact::Refined => "refine",
            Artifact::Selection => "select",
            Artifact::Predictions => "ground",
            Artifact::Report | Artifact::ReportText => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpanRecord {
    pub token_start: usize,
    pub token_end: usize,
    #[serde(rename = "type")]
    pub etype: String,
    pub surface: String,
}

impl From<&MentionSpan> for SpanRecord {
    fn from(m: &MentionSpan) -> Self {
        SpanRecord {
            token_start: m.token_start,
            token_end: m.token_end,
            etype: m.etype.name.clone(),
            surface: m.surface.clone(),
        }
    }
}

impl SpanRecord {
    pub fn to_mention(&self, sentence: &Sentence, schema: &Schema) -> Result<MentionSpan> {
        let etype = schema.get(&self.etype).ok_or_else(|| Error::Config {
            field: format!("{}.type", sentence.id),
            message: format!("type `{}` not in schema", self.etype),
        })?;
        let m = sentence.mention(self.token_start, self.token_end, etype)?;
        if m.surface != self.surface {
            return Err(Error::IdMismatch(format!(
                "span {}..{} of `{}` reads \"{}\", artifact says \"{}\"",
                self.token_start, self.token_end, sentence.id, m.surface, self.surface
            )));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferRecord {
    pub id: String,
    pub mentions: Vec<SpanRecord>,
    pub marginals: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinedRecord {
    pub id: String,
    pub mentions: Vec<SpanRecord>,
    pub outcomes: Vec<RefinementOutcome>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainSummary {
    pub examples: usize,
    pub synthesized: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Token feature vectors for a sentence.
pub fn token_features(sentence: &Sentence, store: &EmbeddingStore, keys: TokenKeys) -> Result<Vec<Vec<f64>>> {
    sentence
        .tokens
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let key = match keys {
                TokenKeys::Positional => embedding::token_key(&sentence.id, i),
                TokenKeys::Surface => t.surface.clone(),
            };
            Ok(store.get(&key)?.values().to_vec())
        })
        .collect()
}

pub struct Pipeline {
    config: PipelineConfig,
    hash: String,
    schema: Schema,
    labels: LabelSet,
    gateway: Gateway,
    templates: Templates,
}

impl Pipeline {
    /// Builds the gateway the config asks for: replay-only, or HTTP for
    /// live and record modes.
    pub fn new(config: PipelineConfig, hash: String) -> Result<Self> {
        let cache = TranscriptCache::open(&config.paths.transcripts)?;
        let transport: Option<Box<dyn crate::gateway::Transport>> = match config.gateway.mode {
            GatewayMode::Replay => None,
            _ => Some(Box::new(HttpTransport::new(&config.gateway, &config.paths.image_root)?)),
        };
        let gateway = Gateway::new(config.gateway.clone(), cache, transport)?;
        Self::with_gateway(config, hash, gateway)
    }

    pub fn with_gateway(config: PipelineConfig, hash: String, gateway: Gateway) -> Result<Self> {
        config.validate()?;
        let schema = config.schema();
        let templates = Templates::load(config.paths.templates.as_deref())?;
        Ok(Pipeline {
            labels: LabelSet::new(schema.clone()),
            schema,
            config,
            hash,
            gateway,
            templates,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn path(&self, a: Artifact) -> PathBuf {
        self.config.work_dir.join(a.file_name())
    }

    fn meta(&self, a: Artifact) -> ArtifactMeta {
        ArtifactMeta {
            artifact: a
                .file_name()
                .trim_end_matches(".jsonl")
                .trim_end_matches(".json")
                .to_string(),
            config_hash: self.hash.clone(),
            seed: self.config.seed,
        }
    }

    fn prepare(&self) -> Result<()> {
        self.config.check_paths()?;
        fs::create_dir_all(&self.config.work_dir)
            .map_err(|e| Error::io(format!("creating {}", self.config.work_dir.display()), e))
    }

    fn require(&self, a: Artifact) -> Result<PathBuf> {
        let p = self.path(a);
        if !p.exists() {
            return Err(Error::MissingArtifact {
                path: p,
                stage: a.stage().into(),
            });
        }
        Ok(p)
    }

    fn read_upstream<T: serde::de::DeserializeOwned>(&self, a: Artifact) -> Result<Vec<T>> {
        let p = self.require(a)?;
        let (meta, records) = artifact::read_jsonl(&p)?;
        match meta {
            Some(m) => m.check(&p, &self.hash)?,
            None => {
                return Err(Error::ArtifactMismatch {
                    path: p,
                    expected: self.hash.clone(),
                    found: "<no provenance header>".into(),
                })
            }
        }
        Ok(records)
    }

    pub fn train_set(&self) -> Result<Vec<AnnotatedSample>> {
        load_dataset(&self.config.paths.train, DatasetFormat::JsonLines, &self.schema)
    }

    pub fn test_set(&self) -> Result<Vec<AnnotatedSample>> {
        load_dataset(&self.config.paths.test, DatasetFormat::JsonLines, &self.schema)
    }

    /// Guideline traversal over the annotated set, then synthesis with each
    /// configured strategy.
    pub fn synthesize(&self) -> Result<usize> {
        self.prepare()?;
        if !self.config.stages.stage1 {
            return Err(Error::Config {
                field: "stages.stage1".into(),
                message: "synthesis is disabled".into(),
            });
        }
        let train = self.train_set()?;
        let table = synthesis::build_guideline(
            GuidelineTable::new(&self.schema),
            &train,
            &self.schema,
            &self.gateway,
            &self.templates,
        )?;
        artifact::write_json(&self.path(Artifact::Guideline), &self.meta(Artifact::Guideline), &table)?;
        log::info!("guideline table at version {}", table.version);

        let mut existing: HashSet<String> = train.iter().map(|s| s.sentence.text.clone()).collect();
        let mut accepted: Vec<SynthRecord> = Vec::new();
        let mut rejected: Vec<Rejection> = Vec::new();
        for &strategy in &self.config.synthesis.strategies {
            let out = synthesis::synthesize(
                &train,
                &table,
                strategy,
                self.config.synthesis.count_per_seed,
                &self.schema,
                &self.gateway,
                &self.templates,
                &existing,
            )?;
            log::info!(
                "{strategy:?}: {} accepted, {} rejected",
                out.accepted.len(),
                out.rejected.len()
            );
            for s in &out.accepted {
                existing.insert(s.sentence.text.clone());
                accepted.push(s.to_record());
            }
            rejected.extend(out.rejected);
        }
        artifact::write_jsonl(
            &self.path(Artifact::Synth),
            Some(&self.meta(Artifact::Synth)),
            &accepted,
        )?;
        artifact::write_jsonl(
            &self.path(Artifact::SynthRejects),
            Some(&self.meta(Artifact::SynthRejects)),
            &rejected,
        )?;
        Ok(accepted.len())
    }

    pub fn train(&self) -> Result<TrainSummary> {
        self.prepare()?;
        let tokens = EmbeddingStore::load(&self.config.paths.token_embeddings)?;
        let keys = self.config.features.token_keys;
        let mut sequences: Vec<(Sentence, Vec<MentionSpan>)> = self
            .train_set()?
            .into_iter()
            .map(|s| {
                let m = s.mentions();
                (s.sentence, m)
            })
            .collect();
        let mut synthesized = 0;
        if self.config.stages.stage1 {
            let records: Vec<SynthRecord> = self.read_upstream(Artifact::Synth)?;
            synthesized = records.len();
            for r in &records {
                let s = SynthesizedSample::from_record(r, &self.schema)?;
                sequences.push((s.sentence, s.entities));
            }
        }
        let data: Vec<Example> = sequences
            .iter()
            .map(|(sentence, mentions)| {
                Ok(Example {
                    features: token_features(sentence, &tokens, keys)?,
                    labels: self.labels.encode(mentions, sentence.len())?,
                })
            })
            .collect::<Result<_>>()?;
        let train_cfg = TrainConfig {
            seed: self.config.seed,
            ..self.config.train.clone()
        };
        let report = crf::train(&data, self.labels.len(), &train_cfg)?;
        let meta = CheckpointMeta {
            labels: self.labels.names(),
            schema: self.schema.names(),
            dim: tokens.dim(),
            train: train_cfg,
            config_hash: self.hash.clone(),
            seed: self.config.seed,
            initial_loss: report.initial_loss,
            final_loss: report.final_loss(),
        };
        crf::save_checkpoint(&self.path(Artifact::Checkpoint), &report.model, &meta)?;
        log::info!(
            "trained on {} sequences ({} synthesized): nll {:.4} -> {:.4}",
            data.len(),
            synthesized,
            report.initial_loss,
            report.final_loss()
        );
        Ok(TrainSummary {
            examples: data.len(),
            synthesized,
            initial_loss: report.initial_loss,
            final_loss: report.final_loss(),
        })
    }

    fn load_model(&self) -> Result<CrfModel> {
        let path = self.require(Artifact::Checkpoint)?;
        let (model, meta) = crf::load_checkpoint(&path)?;
        if meta.config_hash != self.hash {
            return Err(Error::ArtifactMismatch {
                path,
                expected: self.hash.clone(),
                found: meta.config_hash,
            });
        }
        if meta.labels != self.labels.names() {
            return Err(Error::Checkpoint(format!(
                "labels {:?} do not match schema",
                meta.labels
            )));
        }
        Ok(model)
    }

    pub fn infer(&self) -> Result<()> {
        self.prepare()?;
        let model = self.load_model()?;
        let tokens = EmbeddingStore::load(&self.config.paths.token_embeddings)?;
        let keys = self.config.features.token_keys;
        let test = self.test_set()?;
        let records: Vec<InferRecord> = test
            .par_iter()
            .map(|s| {
                let feats = token_features(&s.sentence, &tokens, keys)?;
                let path = model.viterbi(&feats)?;
                let marginals = model.marginals(&feats)?;
                Ok(InferRecord {
                    id: s.id().to_string(),
                    mentions: self
                        .labels
                        .decode(&path.labels, &s.sentence)
                        .iter()
                        .map(SpanRecord::from)
                        .collect(),
                    marginals: marginals.rows().to_vec(),
                })
            })
            .collect::<Result<_>>()?;
        artifact::write_jsonl(
            &self.path(Artifact::Inference),
            Some(&self.meta(Artifact::Inference)),
            &records,
        )
    }

    fn by_id<'a>(&self, samples: &'a [AnnotatedSample], id: &str) -> Result<&'a AnnotatedSample> {
        samples
            .iter()
            .find(|s| s.id() == id)
            .ok_or_else(|| Error::IdMismatch(format!("artifact refers to unknown sample `{id}`")))
    }

    pub fn refine(&self) -> Result<RefineSummary> {
        self.prepare()?;
        let inferred: Vec<InferRecord> = self.read_upstream(Artifact::Inference)?;
        let test = self.test_set()?;
        let mut predictions: Vec<(AnnotatedSample, Vec<MentionSpan>)> = Vec::with_capacity(inferred.len());
        let mut marginals = HashMap::new();
        for r in &inferred {
            let sample = self.by_id(&test, &r.id)?.without_gold();
            let mentions = r
                .mentions
                .iter()
                .map(|m| m.to_mention(&sample.sentence, &self.schema))
                .collect::<Result<Vec<_>>>()?;
            marginals.insert(r.id.clone(), MarginalTable::from_rows(r.marginals.clone()));
            predictions.push((sample, mentions));
        }

        let mut summary = RefineSummary::default();
        let records: Vec<RefinedRecord> = if !self.config.stages.stage2 {
            predictions
                .iter()
                .map(|(s, m)| RefinedRecord {
                    id: s.id().to_string(),
                    mentions: m.iter().map(SpanRecord::from).collect(),
                    outcomes: Vec::new(),
                })
                .collect()
        } else {
            let all: Vec<MentionSpan> = predictions.iter().flat_map(|(_, m)| m.iter().cloned()).collect();
            let routing = uncertainty::route(&all, &marginals, &self.config.router)?;
            let report: Vec<RoutingRecord> = routing.decisions.iter().map(RoutingRecord::from).collect();
            artifact::write_jsonl(
                &self.path(Artifact::Routing),
                Some(&self.meta(Artifact::Routing)),
                &report,
            )?;
            summary.kept = routing.keep.len();
            summary.routed = routing.refine.len();

            let stats = RefineStats::default();
            let records = predictions
                .par_iter()
                .map(|(sample, _)| {
                    let mine = |v: &[MentionSpan]| -> Vec<MentionSpan> {
                        v.iter().filter(|m| m.sentence_id == sample.id()).cloned().collect()
                    };
                    let keep = mine(&routing.keep);
                    let unsure = mine(&routing.refine);
                    let outcomes = refine::refine(
                        &unsure,
                        &keep,
                        sample,
                        &self.schema,
                        &self.gateway,
                        &self.templates,
                        &self.config.refine,
                        &stats,
                    )?;
                    let merged = refine::merge(&keep, &outcomes);
                    Ok(RefinedRecord {
                        id: sample.id().to_string(),
                        mentions: merged.iter().map(SpanRecord::from).collect(),
                        outcomes,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            summary.parse_failures = stats.parse_failures();
            summary.rejected_verdicts = stats.rejected_verdicts();
            records
        };
        artifact::write_jsonl(
            &self.path(Artifact::Refined),
            Some(&self.meta(Artifact::Refined)),
            &records,
        )?;
        log::info!(
            "refine: {} kept, {} routed, {} parse failures, {} rejected verdicts",
            summary.kept,
            summary.routed,
            summary.parse_failures,
            summary.rejected_verdicts
        );
        Ok(summary)
    }

    fn refined(&self, test: &[AnnotatedSample]) -> Result<Vec<(AnnotatedSample, Vec<MentionSpan>)>> {
        let records: Vec<RefinedRecord> = self.read_upstream(Artifact::Refined)?;
        records
            .iter()
            .map(|r| {
                let sample = self.by_id(test, &r.id)?.without_gold();
                let mentions = r
                    .mentions
                    .iter()
                    .map(|m| m.to_mention(&sample.sentence, &self.schema))
                    .collect::<Result<Vec<_>>>()?;
                Ok((sample, mentions))
            })
            .collect()
    }

    pub fn select(&self) -> Result<()> {
        self.prepare()?;
        let test = self.test_set()?;
        let refined = self.refined(&test)?;
        let pool = self.train_set()?;

        let traces: Vec<SelectionTrace> = if !self.config.stages.stage3 {
            refined
                .iter()
                .map(|(s, _)| SelectionTrace {
                    query_id: s.id().to_string(),
                    scores: Vec::new(),
                    chosen: Vec::new(),
                    chosen_ids: Vec::new(),
                })
                .collect()
        } else if !self.config.stages.mes {
            let chosen: Vec<usize> = (0..self.config.selector.k.min(pool.len())).collect();
            refined
                .iter()
                .map(|(s, _)| SelectionTrace {
                    query_id: s.id().to_string(),
                    scores: Vec::new(),
                    chosen: chosen.clone(),
                    chosen_ids: chosen.iter().map(|&i| pool[i].id().to_string()).collect(),
                })
                .collect()
        } else {
            let sentence = EmbeddingStore::load(&self.config.paths.sentence_embeddings)?;
            let entity = EmbeddingStore::load(&self.config.paths.entity_embeddings)?;
            let image = EmbeddingStore::load(&self.config.paths.image_embeddings)?;
            let stores = Stores {
                sentence: &sentence,
                entity: &entity,
                image: &image,
            };
            let examples = pool.iter().map(|s| stores.example(s)).collect::<Result<Vec<_>>>()?;
            let selector = Selector::new(examples, self.config.selector)?;
            refined
                .par_iter()
                .map(|(s, mentions)| {
                    let (query, missing) = stores.query_partial(s, mentions)?;
                    if !missing.is_empty() {
                        log::warn!(
                            "`{}`: no entity embedding for {missing:?}; left out of the query",
                            s.id()
                        );
                    }
                    let sel = selector.select_topk(&query)?;
                    Ok(SelectionTrace {
                        query_id: s.id().to_string(),
                        chosen_ids: sel.chosen.iter().map(|&i| pool[i].id().to_string()).collect(),
                        scores: sel.scores,
                        chosen: sel.chosen,
                    })
                })
                .collect::<Result<_>>()?
        };
        artifact::write_jsonl(
            &self.path(Artifact::Selection),
            Some(&self.meta(Artifact::Selection)),
            &traces,
        )
    }

    pub fn ground(&self) -> Result<()> {
        self.prepare()?;
        let test = self.test_set()?;
        let refined = self.refined(&test)?;
        let traces: Vec<SelectionTrace> = self.read_upstream(Artifact::Selection)?;
        let pool = self.train_set()?;
        let chosen: HashMap<&str, &SelectionTrace> = traces.iter().map(|t| (t.query_id.as_str(), t)).collect();

        let records: Vec<PredictionRecord> = refined
            .par_iter()
            .map(|(sample, mentions)| {
                let trace = chosen
                    .get(sample.id())
                    .ok_or_else(|| Error::IdMismatch(format!("no selection trace for `{}`", sample.id())))?;
                let examples = trace
                    .chosen_ids
                    .iter()
                    .map(|id| self.by_id(&pool, id))
                    .collect::<Result<Vec<_>>>()?;
                let results = refine::ground(mentions, sample, &examples, &self.gateway, &self.templates)?;
                let triplets: Vec<GmnerTriplet> = results
                    .into_iter()
                    .map(|r| GmnerTriplet {
                        mention: r.mention,
                        region: r.region,
                    })
                    .collect();
                Ok(PredictionRecord::from_triplets(sample, &triplets))
            })
            .collect::<Result<_>>()?;
        artifact::write_jsonl(
            &self.path(Artifact::Predictions),
            Some(&self.meta(Artifact::Predictions)),
            &records,
        )
    }

    pub fn eval(&self) -> Result<EvalReport> {
        self.prepare()?;
        let path = self.require(Artifact::Predictions)?;
        if let (Some(meta), _) = artifact::read_jsonl::<serde_json::Value>(&path)? {
            meta.check(&path, &self.hash)?;
        }
        let test = self.test_set()?;
        let preds = eval::read_predictions(&path, &test)?;
        let report = eval::score(&test, &preds, self.config.eval.mode, &self.config.variant())?;
        artifact::write_json(&self.path(Artifact::Report), &self.meta(Artifact::Report), &report)?;
        let text = format!(
            "# config {} seed {}\n{}",
            self.hash,
            self.config.seed,
            report.to_table()
        );
        artifact::write_atomic(&self.path(Artifact::ReportText), text.as_bytes())?;
        Ok(report)
    }

    /// All stages in order, honouring the switches.
    pub fn run_all(&self) -> Result<EvalReport> {
        if self.config.stages.stage1 {
            self.synthesize()?;
        }
        self.train()?;
        self.infer()?;
        self.refine()?;
        self.select()?;
        self.ground()?;
        let report = self.eval()?;
        let m = self.gateway.metrics();
        log::info!(
            "gateway: {} requests, {} cache hits, {} live calls, {} retries",
            m.requests,
            m.cache_hits,
            m.live_calls,
            m.retries
        );
        Ok(report)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct RefineSummary {
    pub kept: usize,
    pub routed: usize,
    pub parse_failures: u64,
    pub rejected_verdicts: u64,
}

/// Reads a written report back.
pub fn read_report(path: &Path) -> Result<(ArtifactMeta, EvalReport)> {
    artifact::read_json(path)
}
