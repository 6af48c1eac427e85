//! Run configuration and the staged pipeline.
//!
//! Every stage reads its inputs from the run directory and writes its
//! outputs back there before the next stage starts, so running the whole
//! pipeline and running the stages one at a time produce the same bytes.
//! `run-manifest.json` records the config hash and the digest of every
//! stage output; a resumed run skips stages whose recorded outputs are
//! still intact.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{self, Chunk, ChunkBounds, DocumentRecord, IngestIssue, SourceCategory};
use crate::error::{Error, Result};
use crate::eval_harness::{self, EvalTask, TaskName, TaskOptions};
use crate::gateway::{Endpoint, Gateway, GatewayConfig, MockBackend, MockSpec, Responder, SyntheticModel};
use crate::jsonl::{self, sha256_hex};
use crate::mcq_forge::{self, McqConfig, McqItem, ReviewState, TaskTag};
use crate::mixer::{self, LoadedSource, MixerConfig, SourceKind, Stage as MixStage};
use crate::refinery::{
    self, Ablation, DedupScope, FilterConfig, InstructionMeta, InstructionRecord, QAPair, RunStats,
    SCHEMA_VERSION,
};
use crate::report;
use crate::synthesizer::{self, Markers, RawQAPair, SeedLibrary, SynthConfig};
use crate::template::PromptTemplate;

pub const LOCK_FILE: &str = "run.lock";
pub const RUN_MANIFEST_FILE: &str = "run-manifest.json";

/// File names inside a run directory.
pub mod files {
    pub const DOCS: &str = "docs.jsonl";
    pub const INGEST_ERRORS: &str = "ingest_errors.jsonl";
    pub const CHUNKS: &str = "chunks.jsonl";
    pub const QUESTIONS: &str = "questions.jsonl";
    pub const RAW_PAIRS: &str = "raw_pairs.jsonl";
    pub const SYNTH_ISSUES: &str = "synth_issues.jsonl";
    pub const PAIRS: &str = "pairs.jsonl";
    pub const INSTRUCT: &str = "instruct.jsonl";
    pub const STATS: &str = "stats.json";
    pub const ITEMS: &str = "items.jsonl";
    pub const MCQ_FAILURES: &str = "mcq_failures.jsonl";
    pub const BANK_ISSUES: &str = "bank_issues.jsonl";
    pub const REVIEW_SHEET: &str = "review_sheet.csv";
    pub const MIXED: &str = super::mixer::MIXED_FILE;
    pub const MANIFEST: &str = super::mixer::MANIFEST_FILE;
    pub const PREDICTIONS: &str = "predictions.jsonl";
    pub const REPORT: &str = "report.json";
    pub const COMPOSITION_JSON: &str = "composition.json";
    pub const COMPOSITION_TXT: &str = "composition.txt";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub path: PathBuf,
    #[serde(default)]
    pub category: Option<SourceCategory>,
    #[serde(default = "default_min_tokens")]
    pub min_tokens: u64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u64,
}

fn default_min_tokens() -> u64 {
    corpus::DEFAULT_MIN_TOKENS
}
fn default_max_tokens() -> u64 {
    corpus::DEFAULT_MAX_TOKENS
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    #[serde(default = "default_k")]
    pub k_seeds: usize,
    #[serde(default = "default_n")]
    pub n_questions: usize,
    #[serde(default)]
    pub seeds: Option<PathBuf>,
    #[serde(default)]
    pub question_template: Option<PathBuf>,
    #[serde(default)]
    pub answer_template: Option<PathBuf>,
    #[serde(default = "default_begin")]
    pub begin_marker: String,
    #[serde(default = "default_end")]
    pub end_marker: String,
}

fn default_k() -> usize {
    synthesizer::DEFAULT_K_SEEDS
}
fn default_n() -> usize {
    synthesizer::DEFAULT_N_QUESTIONS
}
fn default_begin() -> String {
    synthesizer::DEFAULT_BEGIN_MARKER.into()
}
fn default_end() -> String {
    synthesizer::DEFAULT_END_MARKER.into()
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            k_seeds: default_k(),
            n_questions: default_n(),
            seeds: None,
            question_template: None,
            answer_template: None,
            begin_marker: default_begin(),
            end_marker: default_end(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSection {
    #[serde(default = "default_min_chars")]
    pub min_answer_chars: usize,
    #[serde(default)]
    pub refusal_patterns: Option<PathBuf>,
    #[serde(default = "default_shingle")]
    pub shingle_size: usize,
    #[serde(default = "default_threshold")]
    pub jaccard_threshold: f64,
    #[serde(default)]
    pub dedup_scope: DedupScope,
    #[serde(default)]
    pub strict_markers: bool,
}

fn default_min_chars() -> usize {
    10
}
fn default_shingle() -> usize {
    3
}
fn default_threshold() -> f64 {
    0.85
}

impl Default for FilterSection {
    fn default() -> Self {
        Self {
            min_answer_chars: default_min_chars(),
            refusal_patterns: None,
            shingle_size: default_shingle(),
            jaccard_threshold: default_threshold(),
            dedup_scope: DedupScope::default(),
            strict_markers: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McqSection {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default)]
    pub template: Option<PathBuf>,
    #[serde(default)]
    pub bank: Option<PathBuf>,
    #[serde(default)]
    pub task_tag: TaskTag,
}

impl Default for McqSection {
    fn default() -> Self {
        Self {
            enabled: true,
            template: None,
            bank: None,
            task_tag: TaskTag::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixSection {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "default_mix_stage")]
    pub stage: String,
    /// Domain source; defaults to the run's own `instruct.jsonl`.
    #[serde(default)]
    pub domain: Option<PathBuf>,
    #[serde(default = "default_domain_kind")]
    pub domain_kind: SourceKind,
    #[serde(default)]
    pub generic: Option<PathBuf>,
    #[serde(default = "default_generic_kind")]
    pub generic_kind: SourceKind,
    #[serde(default = "default_inject")]
    pub generic_inject: usize,
    #[serde(default)]
    pub tolerance: f64,
    #[serde(default)]
    pub overrides: mixer::HyperparamOverrides,
}

fn default_mix_stage() -> String {
    "sm".into()
}
fn default_domain_kind() -> SourceKind {
    SourceKind::DomainText
}
fn default_generic_kind() -> SourceKind {
    SourceKind::GenericMultimodal
}
fn default_inject() -> usize {
    mixer::DEFAULT_GENERIC_INJECT
}

impl Default for MixSection {
    fn default() -> Self {
        Self {
            enabled: true,
            stage: default_mix_stage(),
            domain: None,
            domain_kind: default_domain_kind(),
            generic: None,
            generic_kind: default_generic_kind(),
            generic_inject: default_inject(),
            tolerance: 0.0,
            overrides: Default::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_task")]
    pub task: String,
    /// Item file; defaults to the run's own `items.jsonl`.
    #[serde(default)]
    pub items: Option<PathBuf>,
    #[serde(default)]
    pub template: Option<PathBuf>,
    #[serde(default)]
    pub shuffle_seed: Option<u64>,
    #[serde(default)]
    pub allow_unreviewed: bool,
}

fn default_task() -> String {
    "custom".into()
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            task: default_task(),
            items: None,
            template: None,
            shuffle_seed: None,
            allow_unreviewed: false,
        }
    }
}

/// The three pipeline removals used in the ablation study.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    #[serde(default = "yes")]
    pub filtering: bool,
    #[serde(default = "yes")]
    pub chunking: bool,
    #[serde(default = "yes")]
    pub question_answer: bool,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            filtering: true,
            chunking: true,
            question_answer: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub rng_seed: u64,
    pub output_dir: PathBuf,
    pub gateway: GatewayConfig,
    /// Endpoint for the model under test; defaults to `gateway`.
    #[serde(default)]
    pub eval_gateway: Option<GatewayConfig>,
    pub corpus: CorpusSection,
    #[serde(default)]
    pub synth: SynthSection,
    #[serde(default)]
    pub filter: FilterSection,
    #[serde(default)]
    pub mcq: McqSection,
    #[serde(default)]
    pub mix: MixSection,
    #[serde(default)]
    pub eval: Option<EvalSection>,
    #[serde(default)]
    pub ablation: AblationSection,
}

/// `api_key = "${VAR}"` in a gateway table becomes `api_key_env = "VAR"`.
/// Literal secrets are refused so config files never hold tokens.
fn interpolate_secret(table: &mut toml::Table, section: &str) -> Result<()> {
    let Some(toml::Value::Table(gw)) = table.get_mut(section) else {
        return Ok(());
    };
    let Some(raw) = gw.remove("api_key") else {
        return Ok(());
    };
    let var = raw
        .as_str()
        .and_then(|s| s.strip_prefix("${"))
        .and_then(|s| s.strip_suffix('}'))
        .filter(|v| !v.is_empty() && v.chars().all(|c| c.is_ascii_alphanumeric() || c == '_'))
        .ok_or_else(|| {
            Error::config(format!(
                "{section}.api_key must be an environment reference like \"${{API_KEY}}\""
            ))
        })?;
    if gw.contains_key("api_key_env") {
        return Err(Error::config(format!(
            "{section}: give either api_key or api_key_env, not both"
        )));
    }
    gw.insert("api_key_env".into(), toml::Value::String(var.to_string()));
    Ok(())
}

impl RunConfig {
    /// Parse TOML. Relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        interpolate_secret(&mut table, "gateway")?;
        interpolate_secret(&mut table, "eval_gateway")?;
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let fix_opt = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                fix(p);
            }
        };
        fix(&mut self.output_dir);
        fix(&mut self.corpus.path);
        fix_opt(&mut self.synth.seeds);
        fix_opt(&mut self.synth.question_template);
        fix_opt(&mut self.synth.answer_template);
        fix_opt(&mut self.filter.refusal_patterns);
        fix_opt(&mut self.mcq.template);
        fix_opt(&mut self.mcq.bank);
        fix_opt(&mut self.mix.domain);
        fix_opt(&mut self.mix.generic);
        if let Some(e) = &mut self.eval {
            fix_opt(&mut e.items);
            fix_opt(&mut e.template);
        }
    }

    /// Check everything that can be checked without running a stage.
    pub fn validate(&self) -> Result<()> {
        self.gateway.validate()?;
        if let Some(g) = &self.eval_gateway {
            g.validate()?;
        }
        self.bounds()?;
        self.synth_config()?;
        self.filter_config()?;
        self.mcq_config()?;
        self.mixer_config()?.validate()?;
        self.mix_stage()?;
        if let Some(e) = &self.eval {
            e.task.parse::<TaskName>()?;
            if e.items.is_none() && !self.mcq.enabled {
                return Err(Error::config(
                    "[eval] needs `items` when the mcq stage is disabled",
                ));
            }
        }
        Ok(())
    }

    /// Stable hash of the resolved configuration.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn bounds(&self) -> Result<ChunkBounds> {
        ChunkBounds::new(self.corpus.min_tokens, self.corpus.max_tokens)
    }

    pub fn markers(&self) -> Result<Markers> {
        Markers::new(&self.synth.begin_marker, &self.synth.end_marker)
    }

    pub fn seed_library(&self) -> Result<SeedLibrary> {
        match &self.synth.seeds {
            Some(p) => SeedLibrary::load(p),
            None => Ok(SeedLibrary::builtin()),
        }
    }

    pub fn synth_config(&self) -> Result<SynthConfig> {
        let mut cfg = SynthConfig::new(self.rng_seed);
        cfg.k_seeds = self.synth.k_seeds;
        cfg.n_questions = self.synth.n_questions;
        cfg.markers = self.markers()?;
        if let Some(p) = &self.synth.question_template {
            cfg.question_template = PromptTemplate::load(p, synthesizer::QUESTION_PLACEHOLDERS)?;
        }
        if let Some(p) = &self.synth.answer_template {
            cfg.answer_template = PromptTemplate::load(p, synthesizer::ANSWER_PLACEHOLDERS)?;
        }
        cfg.validate(&self.seed_library()?)?;
        Ok(cfg)
    }

    pub fn filter_config(&self) -> Result<FilterConfig> {
        let mut cfg = FilterConfig {
            min_answer_chars: self.filter.min_answer_chars,
            dedup_shingle_size: self.filter.shingle_size,
            dedup_jaccard_threshold: self.filter.jaccard_threshold,
            dedup_scope: self.filter.dedup_scope,
            strict_markers: self.filter.strict_markers,
            ablation: Ablation {
                filtering_enabled: self.ablation.filtering,
                chunking_was_enabled: self.ablation.chunking,
            },
            ..FilterConfig::default()
        };
        if let Some(p) = &self.filter.refusal_patterns {
            cfg.refusal_patterns = refinery::load_refusal_patterns(p)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn mcq_config(&self) -> Result<McqConfig> {
        let mut cfg = McqConfig {
            task_tag: self.mcq.task_tag,
            ..McqConfig::default()
        };
        if let Some(p) = &self.mcq.template {
            cfg.template = PromptTemplate::load(p, mcq_forge::MCQ_PLACEHOLDERS)?;
        }
        Ok(cfg)
    }

    pub fn mixer_config(&self) -> Result<MixerConfig> {
        Ok(MixerConfig {
            rng_seed: self.rng_seed,
            generic_inject: self.mix.generic_inject,
            tolerance: self.mix.tolerance,
            overrides: self.mix.overrides.clone(),
        })
    }

    pub fn mix_stage(&self) -> Result<MixStage> {
        self.mix.stage.parse()
    }

    pub fn eval_gateway_config(&self) -> &GatewayConfig {
        self.eval_gateway.as_ref().unwrap_or(&self.gateway)
    }
}

/// Build a gateway. The synthetic mock is given the configured answer
/// markers; `mock:gold` needs the evaluation items.
pub fn build_gateway(cfg: &GatewayConfig, markers: &Markers, gold: Option<&[McqItem]>) -> Result<Gateway> {
    match cfg.endpoint()? {
        Endpoint::Mock(MockSpec::Synthetic { seed }) => {
            let model = SyntheticModel::new(seed).with_markers(&markers.begin, &markers.end);
            Gateway::new(cfg.clone(), Arc::new(MockBackend::new(Responder::Synthetic(model))))
        }
        Endpoint::Mock(MockSpec::Gold) => match gold {
            Some(items) => Gateway::new(cfg.clone(), Arc::new(eval_harness::gold_mock(items))),
            None => Err(Error::config("mock:gold is only available to the eval stage")),
        },
        _ => Gateway::from_config(cfg.clone()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    Ingest,
    Chunk,
    Synth,
    Filter,
    Mcq,
    Mix,
    Eval,
    Report,
}

impl StageName {
    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Ingest => "ingest",
            StageName::Chunk => "chunk",
            StageName::Synth => "synth",
            StageName::Filter => "filter",
            StageName::Mcq => "mcq",
            StageName::Mix => "mix",
            StageName::Eval => "eval",
            StageName::Report => "report",
        }
    }
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            StageName::Ingest,
            StageName::Chunk,
            StageName::Synth,
            StageName::Filter,
            StageName::Mcq,
            StageName::Mix,
            StageName::Eval,
            StageName::Report,
        ]
        .into_iter()
        .find(|n| n.as_str() == s)
        .ok_or_else(|| Error::validation(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Output file name to SHA-256.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub stages: BTreeMap<StageName, StageRecord>,
}

/// Removes the lock file when dropped.
struct LockGuard(PathBuf);

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// An open run directory.
pub struct Run {
    cfg: RunConfig,
    dir: PathBuf,
    manifest: RunManifest,
    _lock: LockGuard,
}

/// What a stage produced, for logging and the CLI summary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageSummary {
    pub stage: StageName,
    pub skipped: bool,
    pub message: String,
}

fn stage_err(stage: StageName, e: Error) -> Error {
    match e {
        e if e.is_validation() => e,
        Error::Stage { .. } => e,
        other => Error::Stage {
            stage: stage.to_string(),
            message: other.to_string(),
        },
    }
}

impl Run {
    /// Validate the config, create the run directory and take the lock.
    pub fn open(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let dir = cfg.output_dir.clone();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let lock = dir.join(LOCK_FILE);
        fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => Error::validation(format!(
                    "{} exists: another run is using this directory (remove it if that run died)",
                    lock.display()
                )),
                _ => Error::io(&lock, e),
            })?;
        let guard = LockGuard(lock);
        let config_hash = cfg.hash();
        let manifest_path = dir.join(RUN_MANIFEST_FILE);
        let manifest = match fs::read_to_string(&manifest_path) {
            Ok(text) => {
                let m: RunManifest = serde_json::from_str(&text)?;
                if m.config_hash == config_hash {
                    m
                } else {
                    RunManifest {
                        schema_version: SCHEMA_VERSION,
                        config_hash,
                        stages: BTreeMap::new(),
                    }
                }
            }
            Err(_) => RunManifest {
                schema_version: SCHEMA_VERSION,
                config_hash,
                stages: BTreeMap::new(),
            },
        };
        Ok(Self {
            cfg,
            dir,
            manifest,
            _lock: guard,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn require(&self, name: &str, producer: StageName) -> Result<PathBuf> {
        let p = self.path(name);
        match p.exists() {
            true => Ok(p),
            false => Err(Error::validation(format!(
                "{} is missing; run the `{producer}` stage first",
                p.display()
            ))),
        }
    }

    /// Whether `stage` already ran under this config and its outputs are
    /// unchanged on disk.
    pub fn is_complete(&self, stage: StageName) -> bool {
        let Some(rec) = self.manifest.stages.get(&stage) else {
            return false;
        };
        rec.outputs
            .iter()
            .all(|(name, digest)| jsonl::file_digest(&self.path(name)).ok().as_deref() == Some(digest))
    }

    fn record(&mut self, stage: StageName, outputs: &[&str]) -> Result<()> {
        let mut rec = StageRecord::default();
        for name in outputs {
            rec.outputs.insert(name.to_string(), jsonl::file_digest(&self.path(name))?);
        }
        self.manifest.stages.insert(stage, rec);
        // a re-run stage invalidates everything downstream of it
        self.manifest.stages.retain(|s, _| *s <= stage);
        jsonl::write_json(&self.path(RUN_MANIFEST_FILE), &self.manifest)
    }

    /// Run one stage, recording its outputs.
    pub fn run_stage(&mut self, stage: StageName) -> Result<StageSummary> {
        let (outputs, message) = match stage {
            StageName::Ingest => self.ingest(),
            StageName::Chunk => self.chunk(),
            StageName::Synth => self.synth(),
            StageName::Filter => self.filter(),
            StageName::Mcq => self.mcq(),
            StageName::Mix => self.mix(),
            StageName::Eval => self.eval(),
            StageName::Report => self.report(),
        }
        .map_err(|e| stage_err(stage, e))?;
        self.record(stage, &outputs).map_err(|e| stage_err(stage, e))?;
        log::info!("{stage}: {message}");
        Ok(StageSummary {
            stage,
            skipped: false,
            message,
        })
    }

    /// The stages a full run executes, in order.
    pub fn planned_stages(&self) -> Vec<StageName> {
        let mut out = vec![StageName::Ingest, StageName::Chunk];
        if self.cfg.ablation.question_answer {
            out.push(StageName::Synth);
        }
        out.push(StageName::Filter);
        if self.cfg.mcq.enabled {
            out.push(StageName::Mcq);
        }
        if self.cfg.mix.enabled {
            out.push(StageName::Mix);
        }
        if self.cfg.eval.is_some() {
            out.push(StageName::Eval);
        }
        out.push(StageName::Report);
        out
    }

    /// Run every planned stage; with `resume`, intact stages are skipped
    /// until the first one that needs work.
    pub fn run_all(&mut self, resume: bool) -> Result<Vec<StageSummary>> {
        let mut out = Vec::new();
        let mut skipping = resume;
        for stage in self.planned_stages() {
            if skipping && self.is_complete(stage) {
                out.push(StageSummary {
                    stage,
                    skipped: true,
                    message: "outputs intact, skipped".into(),
                });
                continue;
            }
            skipping = false;
            out.push(self.run_stage(stage)?);
        }
        Ok(out)
    }

    /// Apply a filled review sheet to `items.jsonl`. The mcq stage record
    /// is refreshed so a resumed run keeps the verdicts.
    pub fn apply_review(&mut self, sheet: &str) -> Result<ReviewCounts> {
        let path = self.require(files::ITEMS, StageName::Mcq)?;
        let items = mcq_forge::load_items(&path)?;
        let reviewed = mcq_forge::import_review_sheet(&items, sheet)?;
        jsonl::write_jsonl(&path, &reviewed)?;
        let mut counts = ReviewCounts::default();
        for item in &reviewed {
            match item.review_state {
                ReviewState::Approved => counts.approved += 1,
                ReviewState::Rejected => counts.rejected += 1,
                ReviewState::Unreviewed => counts.unreviewed += 1,
            }
        }
        self.record(
            StageName::Mcq,
            &[files::ITEMS, files::MCQ_FAILURES, files::BANK_ISSUES, files::REVIEW_SHEET],
        )?;
        Ok(counts)
    }

    fn ingest(&mut self) -> Result<(Vec<&'static str>, String)> {
        let outcome = corpus::ingest(&self.cfg.corpus.path, self.cfg.corpus.category)?;
        for e in &outcome.errors {
            log::warn!("could not ingest {}: {}", e.path.display(), e.message);
        }
        let errors: Vec<IngestIssue> = outcome
            .errors
            .iter()
            .map(|e| IngestIssue {
                path: e.path.strip_prefix(&self.cfg.corpus.path).unwrap_or(&e.path).to_path_buf(),
                message: e.message.clone(),
            })
            .collect();
        jsonl::write_jsonl(&self.path(files::DOCS), &outcome.documents)?;
        jsonl::write_jsonl(&self.path(files::INGEST_ERRORS), &errors)?;
        Ok((
            vec![files::DOCS, files::INGEST_ERRORS],
            format!(
                "{} documents, {} errors, {} empty files skipped",
                outcome.documents.len(),
                errors.len(),
                outcome.skipped_empty.len()
            ),
        ))
    }

    fn docs(&self) -> Result<Vec<DocumentRecord>> {
        jsonl::read_jsonl(&self.require(files::DOCS, StageName::Ingest)?)
    }

    fn chunks(&self) -> Result<Vec<Chunk>> {
        jsonl::read_jsonl(&self.require(files::CHUNKS, StageName::Chunk)?)
    }

    fn chunk(&mut self) -> Result<(Vec<&'static str>, String)> {
        let docs = self.docs()?;
        let chunks = corpus::chunk_documents(&docs, self.cfg.bounds()?, self.cfg.ablation.chunking);
        jsonl::write_jsonl(&self.path(files::CHUNKS), &chunks)?;
        Ok((
            vec![files::CHUNKS],
            format!("{} chunks from {} documents", chunks.len(), docs.len()),
        ))
    }

    fn categories(&self) -> Result<HashMap<String, SourceCategory>> {
        Ok(self
            .docs()?
            .into_iter()
            .map(|d| (d.doc_id, d.source_category))
            .collect())
    }

    fn synth(&mut self) -> Result<(Vec<&'static str>, String)> {
        let chunks = self.chunks()?;
        let categories = self.categories()?;
        let library = self.cfg.seed_library()?;
        let cfg = self.cfg.synth_config()?;
        let gw = build_gateway(&self.cfg.gateway, &cfg.markers, None)?;
        let out = synthesizer::synthesize(&chunks, &categories, &library, &cfg, &gw)?;
        jsonl::write_jsonl(&self.path(files::QUESTIONS), &out.questions)?;
        jsonl::write_jsonl(&self.path(files::RAW_PAIRS), &out.pairs)?;
        jsonl::write_jsonl(&self.path(files::SYNTH_ISSUES), &out.issues)?;
        Ok((
            vec![files::QUESTIONS, files::RAW_PAIRS, files::SYNTH_ISSUES],
            format!(
                "{} questions, {} raw pairs, {} issues",
                out.questions.len(),
                out.pairs.len(),
                out.issues.len()
            ),
        ))
    }

    fn filter(&mut self) -> Result<(Vec<&'static str>, String)> {
        let cfg = self.cfg.filter_config()?;
        let (pairs, records, stats) = if self.cfg.ablation.question_answer {
            let raw: Vec<RawQAPair> = jsonl::read_jsonl(&self.require(files::RAW_PAIRS, StageName::Synth)?)?;
            let categories = self.categories()?;
            let category_of = |chunk_id: &str| categories.get(corpus::doc_id_of(chunk_id)).copied();
            refinery::refine(&raw, &cfg, &category_of)?
        } else {
            passthrough(&self.docs()?, &cfg.ablation)
        };
        jsonl::write_jsonl(&self.path(files::PAIRS), &pairs)?;
        refinery::write_outputs(&self.path(files::INSTRUCT), &self.path(files::STATS), &records, &stats)?;
        Ok((
            vec![files::PAIRS, files::INSTRUCT, files::STATS],
            format!(
                "{} of {} pairs accepted, {} instruction records",
                stats.accepted,
                stats.total_pairs,
                records.len()
            ),
        ))
    }

    fn mcq(&mut self) -> Result<(Vec<&'static str>, String)> {
        let pairs: Vec<QAPair> = jsonl::read_jsonl(&self.require(files::PAIRS, StageName::Filter)?)?;
        let cfg = self.cfg.mcq_config()?;
        let gw = build_gateway(&self.cfg.gateway, &self.cfg.markers()?, None)?;
        let converted = mcq_forge::convert_batch(&pairs, &gw, &cfg)?;
        let (items, bank_issues, dropped) = match &self.cfg.mcq.bank {
            Some(bank) => {
                let m = mcq_forge::merge_bank(&converted.items, bank)?;
                (m.items, m.issues, m.dropped_generated)
            }
            None => (converted.items.clone(), Vec::new(), 0),
        };
        jsonl::write_jsonl(&self.path(files::ITEMS), &items)?;
        jsonl::write_jsonl(&self.path(files::MCQ_FAILURES), &converted.failures)?;
        jsonl::write_jsonl(&self.path(files::BANK_ISSUES), &bank_issues)?;
        jsonl::write_atomic(
            &self.path(files::REVIEW_SHEET),
            mcq_forge::export_review_sheet(&items)?.as_bytes(),
        )?;
        Ok((
            vec![files::ITEMS, files::MCQ_FAILURES, files::BANK_ISSUES, files::REVIEW_SHEET],
            format!(
                "{} items ({} converted, {} conversion failures, {} generated duplicates of bank items dropped)",
                items.len(),
                converted.items.len(),
                converted.failures.len(),
                dropped
            ),
        ))
    }

    fn mix(&mut self) -> Result<(Vec<&'static str>, String)> {
        let stage = self.cfg.mix_stage()?;
        let cfg = self.cfg.mixer_config()?;
        let domain_path = match &self.cfg.mix.domain {
            Some(p) => p.clone(),
            None => self.require(files::INSTRUCT, StageName::Filter)?,
        };
        let domain = LoadedSource::load("domain", &domain_path, self.cfg.mix.domain_kind)?;
        let generic = match &self.cfg.mix.generic {
            Some(p) => Some(LoadedSource::load("generic", p, self.cfg.mix.generic_kind)?),
            None => None,
        };
        let mut mixture = mixer::build(stage, &domain, generic.as_ref(), &cfg)?;
        // keep run-local paths relative so manifests compare across run dirs
        for s in &mut mixture.manifest.sources {
            if let Ok(rel) = s.source.path.strip_prefix(&self.dir) {
                s.source.path = rel.to_path_buf();
            }
        }
        mixture.write(&self.dir)?;
        Ok((
            vec![files::MIXED, files::MANIFEST],
            format!(
                "{} manifest with {} records",
                mixture.manifest.stage, mixture.manifest.total_records
            ),
        ))
    }

    fn eval(&mut self) -> Result<(Vec<&'static str>, String)> {
        let section = self
            .cfg
            .eval
            .clone()
            .ok_or_else(|| Error::validation("no [eval] section in the config"))?;
        let items_path = match &section.items {
            Some(p) => p.clone(),
            None => self.require(files::ITEMS, StageName::Mcq)?,
        };
        let report = run_eval(&EvalRequest {
            task: section.task.parse()?,
            items: items_path,
            gateway: self.cfg.eval_gateway_config().clone(),
            template: section.template.clone(),
            shuffle_seed: section.shuffle_seed,
            allow_unreviewed: section.allow_unreviewed,
            out_dir: self.dir.clone(),
        })?;
        Ok((
            vec![files::PREDICTIONS, files::REPORT],
            format!(
                "{}: {} of {} correct ({}%)",
                report.task_name,
                report.n_correct,
                report.n_items,
                report.accuracy_text()
            ),
        ))
    }

    fn report(&mut self) -> Result<(Vec<&'static str>, String)> {
        let instruct = self.require(files::INSTRUCT, StageName::Filter)?;
        let chunks = self.require(files::CHUNKS, StageName::Chunk)?;
        let stats = self.path(files::STATS);
        let rep = report::compose_stats(&instruct, &chunks, stats.exists().then_some(stats.as_path()))?;
        report::write_composition(&self.dir, &rep)?;
        // composition.json carries a timestamp, so only the table is digested
        Ok((
            vec![files::COMPOSITION_TXT],
            format!("{} records across {} categories", rep.total.records, rep.categories.len()),
        ))
    }
}

/// The -Question-Answer ablation: each document becomes one record whose
/// output is the document text.
fn passthrough(docs: &[DocumentRecord], ablation: &Ablation) -> (Vec<QAPair>, Vec<InstructionRecord>, RunStats) {
    let records: Vec<InstructionRecord> = docs
        .iter()
        .map(|d| InstructionRecord {
            instruction: String::new(),
            input: String::new(),
            output: d.body.clone(),
            meta: InstructionMeta {
                pair_id: d.doc_id.clone(),
                chunk_id: corpus::chunk_id(&d.doc_id, 0),
                source_category: d.source_category,
            },
        })
        .collect();
    let mut stats = RunStats::from_pairs(&[], ablation);
    stats.total_pairs = records.len();
    stats.accepted = records.len();
    stats.acceptance_rate = if records.is_empty() { 0.0 } else { 1.0 };
    (Vec::new(), records, stats)
}

/// Review states after a sheet import.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReviewCounts {
    pub approved: usize,
    pub rejected: usize,
    pub unreviewed: usize,
}

/// Inputs of a standalone evaluation.
#[derive(Debug, Clone)]
pub struct EvalRequest {
    pub task: TaskName,
    pub items: PathBuf,
    pub gateway: GatewayConfig,
    pub template: Option<PathBuf>,
    pub shuffle_seed: Option<u64>,
    pub allow_unreviewed: bool,
    pub out_dir: PathBuf,
}

/// Load items, query the model, score, and write `predictions.jsonl` and
/// `report.json` into `out_dir`.
pub fn run_eval(req: &EvalRequest) -> Result<eval_harness::EvalReport> {
    let items = mcq_forge::load_items(&req.items)?;
    let mut opts = TaskOptions {
        shuffle_seed: req.shuffle_seed,
        allow_unreviewed: req.allow_unreviewed,
        ..TaskOptions::default()
    };
    if let Some(p) = &req.template {
        opts.template = PromptTemplate::load(p, eval_harness::EVAL_PLACEHOLDERS)?;
    }
    let task = EvalTask::new(req.task, items, opts)?;
    let gw = build_gateway(&req.gateway, &Markers::default(), Some(task.items()))?;
    let preds = eval_harness::run_task(&task, &gw)?;
    let report = eval_harness::score(&preds, &task)?;
    fs::create_dir_all(&req.out_dir).map_err(|e| Error::io(&req.out_dir, e))?;
    eval_harness::write_results(&req.out_dir, &preds, &report)?;
    Ok(report)
}

/// Open `cfg`'s run directory and execute every planned stage.
pub fn run_pipeline(cfg: RunConfig, resume: bool) -> Result<Vec<StageSummary>> {
    Run::open(cfg)?.run_all(resume)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
output_dir = "out"
[gateway]
base_url = "mock:synthetic:3"
[corpus]
path = "corpus"
"#;

    #[test]
    fn minimal_config_defaults() {
        let cfg = RunConfig::parse(MINIMAL, Path::new("/base")).unwrap();
        assert_eq!(cfg.output_dir, PathBuf::from("/base/out"));
        assert_eq!(cfg.corpus.min_tokens, 64);
        assert_eq!(cfg.synth.k_seeds, 3);
        assert!(cfg.ablation.filtering && cfg.ablation.chunking && cfg.ablation.question_answer);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = format!("{MINIMAL}\n[filter]\nthreshold = 0.5\n");
        let err = RunConfig::parse(&text, Path::new(".")).unwrap_err();
        assert!(err.is_validation(), "{err}");
        let text = format!("bogus = 1\n{MINIMAL}");
        assert!(RunConfig::parse(&text, Path::new(".")).is_err());
    }

    #[test]
    fn secret_interpolation() {
        let text = MINIMAL.replace("[corpus]", "api_key = \"${QA_TOKEN}\"\n[corpus]");
        let cfg = RunConfig::parse(&text, Path::new(".")).unwrap();
        assert_eq!(cfg.gateway.api_key_env.as_deref(), Some("QA_TOKEN"));
        let literal = MINIMAL.replace("[corpus]", "api_key = \"sk-123\"\n[corpus]");
        assert!(RunConfig::parse(&literal, Path::new(".")).is_err());
    }

    #[test]
    fn bad_bounds_fail_validation() {
        let mut cfg = RunConfig::parse(MINIMAL, Path::new(".")).unwrap();
        cfg.corpus.min_tokens = 64;
        cfg.corpus.max_tokens = 32;
        assert!(cfg.validate().unwrap_err().is_validation());
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::parse(MINIMAL, dir.path()).unwrap();
        cfg.output_dir = dir.path().join("run");
        let run = Run::open(cfg.clone()).unwrap();
        assert!(dir.path().join("run").join(LOCK_FILE).exists());
        assert!(Run::open(cfg.clone()).is_err());
        drop(run);
        assert!(!dir.path().join("run").join(LOCK_FILE).exists());
        Run::open(cfg).unwrap();
    }

    #[test]
    fn missing_input_names_producer() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::parse(MINIMAL, dir.path()).unwrap();
        cfg.output_dir = dir.path().join("run");
        let mut run = Run::open(cfg).unwrap();
        let err = run.run_stage(StageName::Chunk).unwrap_err().to_string();
        assert!(err.contains("ingest"), "{err}");
    }

    #[test]
    fn gold_needs_items() {
        let cfg = GatewayConfig::new("mock:gold");
        assert!(build_gateway(&cfg, &Markers::default(), None).is_err());
        assert!(build_gateway(&cfg, &Markers::default(), Some(&[])).is_ok());
    }
}
