//! Fine-tuning data mixtures and the manifests handed to an external
//! trainer. Nothing here trains anything.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::jsonl::{self, sha256_hex};
use crate::refinery::SCHEMA_VERSION;
use crate::rng::keyed_rng;

pub const MIXED_FILE: &str = "mixed.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEFAULT_GENERIC_INJECT: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    DomainText,
    DomainMultimodal,
    GenericMultimodal,
    GenericText,
}

impl SourceKind {
    pub fn is_multimodal(self) -> bool {
        matches!(self, SourceKind::DomainMultimodal | SourceKind::GenericMultimodal)
    }

    pub fn is_domain(self) -> bool {
        matches!(self, SourceKind::DomainText | SourceKind::DomainMultimodal)
    }
}

impl FromStr for SourceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "domain_text" => Ok(SourceKind::DomainText),
            "domain_multimodal" => Ok(SourceKind::DomainMultimodal),
            "generic_multimodal" => Ok(SourceKind::GenericMultimodal),
            "generic_text" => Ok(SourceKind::GenericText),
            _ => Err(Error::validation(format!("unknown source kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSourceRef {
    pub name: String,
    pub path: PathBuf,
    pub kind: SourceKind,
    pub record_count: usize,
}

/// A source with its records parsed.
#[derive(Debug, Clone)]
pub struct LoadedSource {
    pub source: DataSourceRef,
    records: Vec<Value>,
}

impl LoadedSource {
    /// Read a JSONL source. Every line must be a JSON object; multimodal
    /// records must name an `image_path` that exists (relative paths are
    /// resolved against the file's directory). Images are never opened.
    pub fn load(name: impl Into<String>, path: &Path, kind: SourceKind) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: String| Error::Record {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let value: Value = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
            if !value.is_object() {
                return Err(bad("record is not a JSON object".into()));
            }
            if kind.is_multimodal() {
                let image = value
                    .get("image_path")
                    .and_then(Value::as_str)
                    .ok_or_else(|| bad("multimodal record has no image_path".into()))?;
                if !base.join(image).exists() {
                    return Err(bad(format!("image_path `{image}` does not exist")));
                }
            }
            records.push(value);
        }
        Ok(Self {
            source: DataSourceRef {
                name: name.into(),
                path: path.to_path_buf(),
                kind,
                record_count: records.len(),
            },
            records,
        })
    }

    /// In-memory source, for callers that already hold the records.
    pub fn from_records(name: impl Into<String>, kind: SourceKind, records: Vec<Value>) -> Self {
        Self {
            source: DataSourceRef {
                name: name.into(),
                path: PathBuf::new(),
                kind,
                record_count: records.len(),
            },
            records,
        }
    }

    pub fn records(&self) -> &[Value] {
        &self.records
    }

    fn len(&self) -> usize {
        self.records.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    SmSft,
    MmStage1,
    MmStage2,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::SmSft => "sm_sft",
            Stage::MmStage1 => "mm_stage1",
            Stage::MmStage2 => "mm_stage2",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sm" | "sm_sft" => Ok(Stage::SmSft),
            "mm1" | "mm_stage1" => Ok(Stage::MmStage1),
            "mm2" | "mm_stage2" => Ok(Stage::MmStage2),
            _ => Err(Error::validation(format!(
                "unknown stage `{s}` (expected sm, mm1 or mm2)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub batch_size: u32,
    pub epochs: u32,
    pub adapter_rank: Option<u32>,
    pub optimizer: String,
    pub loss: String,
}

impl Hyperparams {
    pub fn for_stage(stage: Stage) -> Self {
        let (epochs, rank) = match stage {
            Stage::SmSft => (3, 8),
            Stage::MmStage1 => (300, 32),
            Stage::MmStage2 => (120, 32),
        };
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            epochs,
            adapter_rank: Some(rank),
            optimizer: "adam".into(),
            loss: "cross_entropy".into(),
        }
    }
}

/// Optional overrides of the per-stage defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperparamOverrides {
    pub learning_rate: Option<f64>,
    pub batch_size: Option<u32>,
    pub epochs: Option<u32>,
    pub adapter_rank: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixerConfig {
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default = "default_inject")]
    pub generic_inject: usize,
    /// Allowed `|d - g| / (d + g)` for stage 1. Zero means exactly equal
    /// counts from both sources.
    #[serde(default)]
    pub tolerance: f64,
    #[serde(default)]
    pub overrides: HyperparamOverrides,
}

fn default_inject() -> usize {
    DEFAULT_GENERIC_INJECT
}

impl Default for MixerConfig {
    fn default() -> Self {
        Self {
            rng_seed: 0,
            generic_inject: DEFAULT_GENERIC_INJECT,
            tolerance: 0.0,
            overrides: HyperparamOverrides::default(),
        }
    }
}

impl MixerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.tolerance) {
            return Err(Error::validation(format!(
                "mixer tolerance must be in [0, 1), got {}",
                self.tolerance
            )));
        }
        let o = &self.overrides;
        if o.learning_rate.is_some_and(|lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::validation("learning_rate must be positive"));
        }
        if o.batch_size == Some(0) || o.epochs == Some(0) || o.adapter_rank == Some(0) {
            return Err(Error::validation(
                "batch_size, epochs and adapter_rank must be at least 1",
            ));
        }
        Ok(())
    }

    fn hyperparams(&self, stage: Stage) -> Hyperparams {
        let mut h = Hyperparams::for_stage(stage);
        let o = &self.overrides;
        h.learning_rate = o.learning_rate.unwrap_or(h.learning_rate);
        h.batch_size = o.batch_size.unwrap_or(h.batch_size);
        h.epochs = o.epochs.unwrap_or(h.epochs);
        h.adapter_rank = o.adapter_rank.or(h.adapter_rank);
        h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceTake {
    #[serde(flatten)]
    pub source: DataSourceRef,
    pub take_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub schema_version: u32,
    pub stage: Stage,
    pub sources: Vec<SourceTake>,
    pub total_records: usize,
    pub hyperparams: Hyperparams,
    pub rng_seed: u64,
    pub data_file: String,
    /// SHA-256 of the mixed file.
    pub content_digest: String,
}

/// A manifest and the exact bytes of its mixed file.
#[derive(Debug, Clone)]
pub struct Mixture {
    pub manifest: TrainingManifest,
    pub data: Vec<u8>,
}

impl Mixture {
    pub fn write(&self, out_dir: &Path) -> Result<()> {
        jsonl::write_atomic(&out_dir.join(&self.manifest.data_file), &self.data)?;
        jsonl::write_json(&out_dir.join(MANIFEST_FILE), &self.manifest)
    }
}

fn assemble(
    stage: Stage,
    takes: Vec<(&LoadedSource, usize)>,
    records: Vec<&Value>,
    cfg: &MixerConfig,
) -> Result<Mixture> {
    let data = jsonl::to_jsonl_bytes(&records)?;
    let sources: Vec<SourceTake> = takes
        .into_iter()
        .map(|(s, take_count)| SourceTake {
            source: s.source.clone(),
            take_count,
        })
        .collect();
    debug_assert_eq!(sources.iter().map(|s| s.take_count).sum::<usize>(), records.len());
    Ok(Mixture {
        manifest: TrainingManifest {
            schema_version: SCHEMA_VERSION,
            stage,
            sources,
            total_records: records.len(),
            hyperparams: cfg.hyperparams(stage),
            rng_seed: cfg.rng_seed,
            data_file: MIXED_FILE.into(),
            content_digest: sha256_hex(&data),
        },
        data,
    })
}

/// `k` records drawn uniformly without replacement, kept in source order.
fn sample<'a>(src: &'a LoadedSource, k: usize, seed: u64, purpose: &str) -> Vec<&'a Value> {
    if k >= src.len() {
        return src.records.iter().collect();
    }
    let mut rng = keyed_rng(seed, &format!("{purpose}:{}", src.source.name));
    let mut picked = index::sample(&mut rng, src.len(), k).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| &src.records[i]).collect()
}

fn require_kind(src: &LoadedSource, ok: impl Fn(SourceKind) -> bool, want: &str) -> Result<()> {
    match ok(src.source.kind) {
        true => Ok(()),
        false => Err(Error::validation(format!(
            "source `{}` has kind {:?}, expected {want}",
            src.source.name, src.source.kind
        ))),
    }
}

fn require_non_empty(src: &LoadedSource) -> Result<()> {
    match src.len() {
        0 => Err(Error::validation(format!("source `{}` is empty", src.source.name))),
        _ => Ok(()),
    }
}

/// Single-modal SFT: every domain record, three epochs.
pub fn build_sm_manifest(domain: &LoadedSource, cfg: &MixerConfig) -> Result<Mixture> {
    cfg.validate()?;
    require_kind(domain, |k| k == SourceKind::DomainText, "domain_text")?;
    require_non_empty(domain)?;
    let records: Vec<&Value> = domain.records.iter().collect();
    assemble(Stage::SmSft, vec![(domain, records.len())], records, cfg)
}

fn balanced_counts(d: usize, g: usize, tolerance: f64) -> (usize, usize) {
    let dev = |a: usize, b: usize| a.abs_diff(b) as f64 / (a + b) as f64;
    if dev(d, g) <= tolerance {
        return (d, g);
    }
    let small = d.min(g);
    // largest n with (n - small) / (n + small) <= tolerance
    let mut big = ((small as f64) * (1.0 + tolerance) / (1.0 - tolerance)).floor() as usize;
    while big > small && dev(big, small) > tolerance {
        big -= 1;
    }
    let big = big.max(small);
    if d < g {
        (d, big)
    } else {
        (big, g)
    }
}

/// Stage 1: domain and generic data in (by default exactly) equal measure,
/// the larger side down-sampled, then interleaved one-for-one.
pub fn build_mm_stage1(domain: &LoadedSource, generic: &LoadedSource, cfg: &MixerConfig) -> Result<Mixture> {
    cfg.validate()?;
    require_kind(domain, SourceKind::is_domain, "a domain kind")?;
    require_kind(generic, |k| !k.is_domain(), "a generic kind")?;
    require_non_empty(domain)?;
    require_non_empty(generic)?;
    let (nd, ng) = balanced_counts(domain.len(), generic.len(), cfg.tolerance);
    let achieved = nd.abs_diff(ng) as f64 / (nd + ng) as f64;
    if achieved > cfg.tolerance {
        return Err(Error::validation(format!(
            "stage-1 balance {achieved} exceeds tolerance {}",
            cfg.tolerance
        )));
    }
    let ds = sample(domain, nd, cfg.rng_seed, "stage1");
    let gs = sample(generic, ng, cfg.rng_seed, "stage1");
    let mut records = Vec::with_capacity(nd + ng);
    for i in 0..nd.max(ng) {
        records.extend(ds.get(i).copied());
        records.extend(gs.get(i).copied());
    }
    assemble(Stage::MmStage1, vec![(domain, nd), (generic, ng)], records, cfg)
}

/// Stage 2: every domain record plus a small seeded generic injection
/// against forgetting.
pub fn build_mm_stage2(domain: &LoadedSource, generic: &LoadedSource, cfg: &MixerConfig) -> Result<Mixture> {
    cfg.validate()?;
    require_kind(domain, SourceKind::is_domain, "a domain kind")?;
    require_kind(generic, |k| !k.is_domain(), "a generic kind")?;
    require_non_empty(domain)?;
    let inject = cfg.generic_inject;
    if generic.len() < inject {
        return Err(Error::validation(format!(
            "generic pool `{}` has {} records, fewer than the {inject} to inject",
            generic.source.name,
            generic.len()
        )));
    }
    let mut records: Vec<&Value> = domain.records.iter().collect();
    records.extend(sample(generic, inject, cfg.rng_seed, "stage2"));
    assemble(
        Stage::MmStage2,
        vec![(domain, domain.len()), (generic, inject)],
        records,
        cfg,
    )
}

/// Build whichever stage is asked for; stage 1 and 2 need a generic source.
pub fn build(stage: Stage, domain: &LoadedSource, generic: Option<&LoadedSource>, cfg: &MixerConfig) -> Result<Mixture> {
    let need = || Error::validation(format!("stage {stage} needs a generic source"));
    match stage {
        Stage::SmSft => build_sm_manifest(domain, cfg),
        Stage::MmStage1 => build_mm_stage1(domain, generic.ok_or_else(need)?, cfg),
        Stage::MmStage2 => build_mm_stage2(domain, generic.ok_or_else(need)?, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn text_src(name: &str, kind: SourceKind, n: usize) -> LoadedSource {
        let recs = (0..n)
            .map(|i| json!({"instruction": format!("{name} q{i}"), "input": "", "output": format!("a{i}")}))
            .collect();
        LoadedSource::from_records(name, kind, recs)
    }

    fn lines(m: &Mixture) -> Vec<Value> {
        std::str::from_utf8(&m.data)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }

    #[test]
    fn sm_takes_everything() {
        let m = build_sm_manifest(&text_src("std", SourceKind::DomainText, 1), &MixerConfig::default()).unwrap();
        assert_eq!(m.manifest.total_records, 1);
        assert_eq!(m.manifest.hyperparams.epochs, 3);
        assert_eq!(m.manifest.hyperparams.adapter_rank, Some(8));
        assert_eq!(m.manifest.content_digest, sha256_hex(&m.data));
        let empty = text_src("e", SourceKind::DomainText, 0);
        assert!(build_sm_manifest(&empty, &MixerConfig::default()).is_err());
        let wrong = text_src("g", SourceKind::GenericText, 3);
        assert!(build_sm_manifest(&wrong, &MixerConfig::default()).is_err());
    }

    #[test]
    fn stage1_symmetric_alternates() {
        let d = text_src("d", SourceKind::DomainMultimodal, 10);
        let g = text_src("g", SourceKind::GenericMultimodal, 10);
        let m = build_mm_stage1(&d, &g, &MixerConfig::default()).unwrap();
        let recs = lines(&m);
        assert_eq!(recs.len(), 20);
        for (i, r) in recs.iter().enumerate() {
            let from = if i % 2 == 0 { "d " } else { "g " };
            assert!(r["instruction"].as_str().unwrap().starts_with(from));
        }
    }

    #[test]
    fn stage1_downsamples_reproducibly() {
        let d = text_src("d", SourceKind::DomainMultimodal, 30);
        let g = text_src("g", SourceKind::GenericMultimodal, 50);
        let cfg = MixerConfig { rng_seed: 5, ..MixerConfig::default() };
        let a = build_mm_stage1(&d, &g, &cfg).unwrap();
        let b = build_mm_stage1(&d, &g, &cfg).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.manifest.total_records, 60);
        let other = build_mm_stage1(&d, &g, &MixerConfig { rng_seed: 6, ..cfg }).unwrap();
        assert_ne!(a.data, other.data);
    }

    #[test]
    fn stage1_tolerance_mode() {
        let d = text_src("d", SourceKind::DomainMultimodal, 100);
        let g = text_src("g", SourceKind::GenericMultimodal, 200);
        let cfg = MixerConfig { tolerance: 0.1, ..MixerConfig::default() };
        let m = build_mm_stage1(&d, &g, &cfg).unwrap();
        let takes: Vec<usize> = m.manifest.sources.iter().map(|s| s.take_count).collect();
        assert_eq!(takes, vec![100, 122]);
        assert!((22.0 / 222.0) <= 0.1);
    }

    #[test]
    fn stage2_injection() {
        let d = text_src("d", SourceKind::DomainMultimodal, 40);
        let g = text_src("g", SourceKind::GenericMultimodal, 31);
        let err = build_mm_stage2(&d, &g, &MixerConfig::default()).unwrap_err().to_string();
        assert!(err.contains("31") && err.contains("32"), "{err}");
        let zero = MixerConfig { generic_inject: 0, ..MixerConfig::default() };
        assert_eq!(build_mm_stage2(&d, &g, &zero).unwrap().manifest.total_records, 40);
        let g = text_src("g", SourceKind::GenericMultimodal, 100);
        let m = build_mm_stage2(&d, &g, &MixerConfig::default()).unwrap();
        assert_eq!(m.manifest.total_records, 72);
        assert_eq!(m.manifest.hyperparams.epochs, 120);
    }

    #[test]
    fn overrides_apply() {
        let cfg = MixerConfig {
            overrides: HyperparamOverrides { epochs: Some(7), ..Default::default() },
            ..MixerConfig::default()
        };
        let m = build_sm_manifest(&text_src("d", SourceKind::DomainText, 2), &cfg).unwrap();
        assert_eq!(m.manifest.hyperparams.epochs, 7);
        assert_eq!(m.manifest.hyperparams.learning_rate, 1e-4);
    }

    #[test]
    fn load_checks_images_and_counts() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.jpg"), b"").unwrap();
        let p = dir.path().join("mm.jsonl");
        std::fs::write(&p, "{\"image_path\":\"a.jpg\",\"question\":\"q\",\"answer\":\"x\"}\n\n").unwrap();
        let s = LoadedSource::load("mm", &p, SourceKind::DomainMultimodal).unwrap();
        assert_eq!(s.source.record_count, 1);
        std::fs::write(&p, "{\"image_path\":\"missing.jpg\"}\n").unwrap();
        let err = LoadedSource::load("mm", &p, SourceKind::DomainMultimodal).unwrap_err();
        assert!(matches!(err, Error::Record { line: 1, .. }));
        std::fs::write(&p, "[1]\n").unwrap();
        assert!(LoadedSource::load("t", &p, SourceKind::DomainText).is_err());
    }

    #[test]
    fn written_file_matches_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_sm_manifest(&text_src("d", SourceKind::DomainText, 5), &MixerConfig::default()).unwrap();
        m.write(dir.path()).unwrap();
        let path = dir.path().join(MIXED_FILE);
        assert_eq!(jsonl::file_digest(&path).unwrap(), m.manifest.content_digest);
        assert_eq!(jsonl::count_lines(&path).unwrap(), m.manifest.total_records);
    }
}
