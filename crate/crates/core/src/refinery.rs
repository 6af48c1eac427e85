//! Filtering, near-duplicate removal and merging into instruction records.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{doc_id_of, SourceCategory};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::synthesizer::{RawQAPair, STANDING_INSTRUCTION};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_REFUSAL_PATTERNS: &str = include_str!("../assets/refusal_patterns.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairStatus {
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    EmptyAnswer,
    Refusal,
    InstructionDeviation,
    DuplicateQuestion,
    TooShort,
    MarkerMissingStrict,
}

impl RejectReason {
    pub const ALL: [RejectReason; 6] = [
        RejectReason::EmptyAnswer,
        RejectReason::Refusal,
        RejectReason::InstructionDeviation,
        RejectReason::DuplicateQuestion,
        RejectReason::TooShort,
        RejectReason::MarkerMissingStrict,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::EmptyAnswer => "empty_answer",
            RejectReason::Refusal => "refusal",
            RejectReason::InstructionDeviation => "instruction_deviation",
            RejectReason::DuplicateQuestion => "duplicate_question",
            RejectReason::TooShort => "too_short",
            RejectReason::MarkerMissingStrict => "marker_missing_strict",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    pub pair_id: String,
    pub chunk_id: String,
    pub question: String,
    pub answer: String,
    pub status: PairStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reject_reason: Option<RejectReason>,
}

impl QAPair {
    pub fn is_accepted(&self) -> bool {
        self.status == PairStatus::Accepted
    }

    fn reject(&mut self, reason: RejectReason) {
        self.status = PairStatus::Rejected;
        self.reject_reason = Some(reason);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DedupScope {
    #[default]
    PerDocument,
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub filtering_enabled: bool,
    pub chunking_was_enabled: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            filtering_enabled: true,
            chunking_was_enabled: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub min_answer_chars: usize,
    pub refusal_patterns: Vec<String>,
    pub dedup_shingle_size: usize,
    pub dedup_jaccard_threshold: f64,
    pub dedup_scope: DedupScope,
    pub strict_markers: bool,
    pub standing_instruction: String,
    pub ablation: Ablation,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_answer_chars: 10,
            refusal_patterns: parse_pattern_list(DEFAULT_REFUSAL_PATTERNS),
            dedup_shingle_size: 3,
            dedup_jaccard_threshold: 0.85,
            dedup_scope: DedupScope::PerDocument,
            strict_markers: false,
            standing_instruction: STANDING_INSTRUCTION.to_string(),
            ablation: Ablation::default(),
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dedup_jaccard_threshold > 0.0 && self.dedup_jaccard_threshold <= 1.0) {
            return Err(Error::validation(format!(
                "dedup_jaccard_threshold must be in (0, 1], got {}",
                self.dedup_jaccard_threshold
            )));
        }
        if self.dedup_shingle_size == 0 {
            return Err(Error::validation("dedup_shingle_size must be at least 1"));
        }
        Ok(())
    }
}

/// One pattern per line; blank lines and `#` comments are ignored.
pub fn parse_pattern_list(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

pub fn load_refusal_patterns(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_pattern_list(&text))
}

/// Apply the rejection rules in order; the first match wins.
pub fn filter_pair(raw: &RawQAPair, cfg: &FilterConfig) -> QAPair {
    let mut pair = QAPair {
        pair_id: raw.pair_id.clone(),
        chunk_id: raw.chunk_id.clone(),
        question: raw.question.clone(),
        answer: raw.raw_answer.trim().to_string(),
        status: PairStatus::Accepted,
        reject_reason: None,
    };
    if !cfg.ablation.filtering_enabled {
        pair.answer = raw.raw_answer.clone();
        return pair;
    }
    if let Some(reason) = rejection(raw, &pair.answer, cfg) {
        pair.reject(reason);
    }
    pair
}

fn rejection(raw: &RawQAPair, answer: &str, cfg: &FilterConfig) -> Option<RejectReason> {
    if answer.is_empty() {
        return Some(RejectReason::EmptyAnswer);
    }
    if answer.chars().count() < cfg.min_answer_chars {
        return Some(RejectReason::TooShort);
    }
    if cfg
        .refusal_patterns
        .iter()
        .any(|p| !p.is_empty() && answer.contains(p.as_str()))
    {
        return Some(RejectReason::Refusal);
    }
    let question = raw.question.trim();
    let echoes_instruction =
        !cfg.standing_instruction.is_empty() && answer.contains(cfg.standing_instruction.as_str());
    if echoes_instruction || (!question.is_empty() && answer.starts_with(question)) {
        return Some(RejectReason::InstructionDeviation);
    }
    if cfg.strict_markers && !raw.answer_markers_found {
        return Some(RejectReason::MarkerMissingStrict);
    }
    None
}

/// Character `n`-gram set of a question with whitespace removed and ASCII
/// lowercased. Text shorter than `n` yields a single shingle of the whole
/// text; empty text yields the empty set.
pub fn shingles(text: &str, n: usize) -> HashSet<String> {
    let chars: Vec<char> = text
        .chars()
        .filter(|c| !c.is_whitespace())
        .map(|c| c.to_ascii_lowercase())
        .collect();
    if chars.is_empty() {
        return HashSet::new();
    }
    if chars.len() < n {
        return HashSet::from([chars.iter().collect()]);
    }
    chars.windows(n).map(|w| w.iter().collect()).collect()
}

/// Jaccard similarity; two empty sets are identical.
pub fn jaccard(a: &HashSet<String>, b: &HashSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// Reject later near-duplicates within each scope group.
///
/// Accepted pairs are visited in `pair_id` order; a pair is rejected when its
/// question's similarity to any already kept question reaches the threshold.
/// The output is in `pair_id` order, so the result does not depend on input
/// order. Disabled entirely in the no-filtering ablation.
pub fn dedup_questions(pairs: Vec<QAPair>, cfg: &FilterConfig) -> Vec<QAPair> {
    let mut pairs = pairs;
    pairs.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
    if !cfg.ablation.filtering_enabled {
        return pairs;
    }
    let mut kept: HashMap<&str, Vec<HashSet<String>>> = HashMap::new();
    let mut rejected = Vec::new();
    for (idx, pair) in pairs.iter().enumerate() {
        if !pair.is_accepted() {
            continue;
        }
        let group = match cfg.dedup_scope {
            DedupScope::PerDocument => doc_id_of(&pair.chunk_id),
            DedupScope::Global => "",
        };
        let sh = shingles(&pair.question, cfg.dedup_shingle_size);
        let seen = kept.entry(group).or_default();
        if seen
            .iter()
            .any(|k| jaccard(k, &sh) >= cfg.dedup_jaccard_threshold)
        {
            rejected.push(idx);
        } else {
            seen.push(sh);
        }
    }
    for idx in rejected {
        pairs[idx].reject(RejectReason::DuplicateQuestion);
    }
    pairs
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionMeta {
    pub pair_id: String,
    pub chunk_id: String,
    pub source_category: SourceCategory,
}

/// One supervised fine-tuning record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub instruction: String,
    pub input: String,
    pub output: String,
    pub meta: InstructionMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub schema_version: u32,
    pub total_pairs: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub reject_reasons: BTreeMap<String, usize>,
    pub acceptance_rate: f64,
    pub filtering_enabled: bool,
    pub chunking_was_enabled: bool,
}

impl RunStats {
    pub fn from_pairs(pairs: &[QAPair], ablation: &Ablation) -> Self {
        let mut reasons: BTreeMap<String, usize> = RejectReason::ALL
            .iter()
            .map(|r| (r.as_str().to_string(), 0))
            .collect();
        let mut accepted = 0;
        for p in pairs {
            if p.is_accepted() {
                accepted += 1;
            } else if let Some(r) = p.reject_reason {
                *reasons.entry(r.as_str().to_string()).or_default() += 1;
            }
        }
        let total = pairs.len();
        Self {
            schema_version: SCHEMA_VERSION,
            total_pairs: total,
            accepted,
            rejected: total - accepted,
            reject_reasons: reasons,
            acceptance_rate: if total == 0 {
                0.0
            } else {
                accepted as f64 / total as f64
            },
            filtering_enabled: ablation.filtering_enabled,
            chunking_was_enabled: ablation.chunking_was_enabled,
        }
    }
}

/// Turn accepted pairs into instruction records (in `pair_id` order) and
/// tally every pair. `category_of` maps a chunk id to its source category;
/// unknown chunks fall under `other`.
pub fn merge_structured(
    pairs: &[QAPair],
    category_of: &dyn Fn(&str) -> Option<SourceCategory>,
    ablation: &Ablation,
) -> (Vec<InstructionRecord>, RunStats) {
    let mut accepted: Vec<&QAPair> = pairs.iter().filter(|p| p.is_accepted()).collect();
    accepted.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
    let records = accepted
        .into_iter()
        .map(|p| InstructionRecord {
            instruction: p.question.clone(),
            input: String::new(),
            output: p.answer.clone(),
            meta: InstructionMeta {
                pair_id: p.pair_id.clone(),
                chunk_id: p.chunk_id.clone(),
                source_category: category_of(&p.chunk_id).unwrap_or(SourceCategory::Other),
            },
        })
        .collect();
    (records, RunStats::from_pairs(pairs, ablation))
}

/// Write `instruct.jsonl` and `stats.json`. If either write fails, neither
/// file is left behind.
pub fn write_outputs(
    instruct_path: &Path,
    stats_path: &Path,
    records: &[InstructionRecord],
    stats: &RunStats,
) -> Result<()> {
    jsonl::write_jsonl(instruct_path, records)?;
    if let Err(e) = jsonl::write_json(stats_path, stats) {
        let _ = std::fs::remove_file(instruct_path);
        return Err(e);
    }
    Ok(())
}

/// Filter, dedup and merge in one call.
pub fn refine(
    raw: &[RawQAPair],
    cfg: &FilterConfig,
    category_of: &dyn Fn(&str) -> Option<SourceCategory>,
) -> Result<(Vec<QAPair>, Vec<InstructionRecord>, RunStats)> {
    cfg.validate()?;
    let filtered: Vec<QAPair> = raw.iter().map(|r| filter_pair(r, cfg)).collect();
    let pairs = dedup_questions(filtered, cfg);
    let (records, stats) = merge_structured(&pairs, category_of, &cfg.ablation);
    Ok((pairs, records, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(id: &str, q: &str, a: &str) -> RawQAPair {
        RawQAPair {
            pair_id: id.into(),
            chunk_id: id.rsplit_once('.').map(|(c, _)| c).unwrap_or(id).into(),
            question: q.into(),
            raw_answer: a.into(),
            answer_markers_found: true,
        }
    }

    fn accepted(id: &str, q: &str) -> QAPair {
        filter_pair(&raw(id, q, "一个足够长的合格答案文本。"), &FilterConfig::default())
    }

    #[test]
    fn empty_answer_rejected() {
        let p = filter_pair(&raw("d.0000.q01", "问？", ""), &FilterConfig::default());
        assert_eq!(p.status, PairStatus::Rejected);
        assert_eq!(p.reject_reason, Some(RejectReason::EmptyAnswer));
    }

    #[test]
    fn refusal_pattern_rejected() {
        let cfg = FilterConfig {
            refusal_patterns: vec!["无法回答".into()],
            ..FilterConfig::default()
        };
        let p = filter_pair(&raw("d.0000.q01", "问？", "很抱歉，这个问题我无法回答，资料不足。"), &cfg);
        assert_eq!(p.reject_reason, Some(RejectReason::Refusal));
    }

    #[test]
    fn ablation_accepts_everything() {
        let mut cfg = FilterConfig::default();
        cfg.ablation.filtering_enabled = false;
        let p = filter_pair(&raw("d.0000.q01", "问？", ""), &cfg);
        assert_eq!(p.status, PairStatus::Accepted);
        assert_eq!(p.reject_reason, None);
    }

    #[test]
    fn rule_order() {
        let cfg = FilterConfig {
            strict_markers: true,
            ..FilterConfig::default()
        };
        // short and a refusal: too_short fires first
        let p = filter_pair(&raw("d.0.q1", "q?", "无法回答"), &cfg);
        assert_eq!(p.reject_reason, Some(RejectReason::TooShort));
        let p = filter_pair(&raw("d.0.q1", "红灯该怎么办？", "红灯该怎么办？应当停车等待。"), &cfg);
        assert_eq!(p.reject_reason, Some(RejectReason::InstructionDeviation));
        // the instruction itself contains a refusal phrase, so test the echo
        // rule on its own
        let echo_cfg = FilterConfig {
            refusal_patterns: Vec::new(),
            ..cfg.clone()
        };
        let echoed = format!("好的。{STANDING_INSTRUCTION}");
        let p = filter_pair(&raw("d.0.q1", "q?", &echoed), &echo_cfg);
        assert_eq!(p.reject_reason, Some(RejectReason::InstructionDeviation));
        let mut r = raw("d.0.q1", "q?", "停车等待，直到绿灯亮起再通行。");
        r.answer_markers_found = false;
        assert_eq!(
            filter_pair(&r, &cfg).reject_reason,
            Some(RejectReason::MarkerMissingStrict)
        );
        let lax = FilterConfig::default();
        assert_eq!(filter_pair(&r, &lax).status, PairStatus::Accepted);
    }

    #[test]
    fn identical_questions_deduped() {
        let pairs = vec![accepted("d.0000.q02", "红灯该怎么办？"), accepted("d.0000.q01", "红灯该怎么办？")];
        let cfg = FilterConfig {
            dedup_jaccard_threshold: 0.8,
            ..FilterConfig::default()
        };
        let out = dedup_questions(pairs, &cfg);
        assert_eq!(out[0].pair_id, "d.0000.q01");
        assert!(out[0].is_accepted());
        assert_eq!(out[1].reject_reason, Some(RejectReason::DuplicateQuestion));
    }

    #[test]
    fn similar_but_distinct_questions_kept() {
        // bigram sets share 5 of 7 distinct shingles: 5/7 < 0.8
        let a = shingles("红灯该怎么办？", 2);
        let b = shingles("绿灯该怎么办？", 2);
        assert!((jaccard(&a, &b) - 5.0 / 7.0).abs() < 1e-12);
        let cfg = FilterConfig {
            dedup_shingle_size: 2,
            dedup_jaccard_threshold: 0.8,
            ..FilterConfig::default()
        };
        let out = dedup_questions(
            vec![accepted("d.0.q1", "红灯该怎么办？"), accepted("d.0.q2", "绿灯该怎么办？")],
            &cfg,
        );
        assert!(out.iter().all(QAPair::is_accepted));
    }

    #[test]
    fn scope_controls_grouping() {
        let pairs = vec![accepted("a.0000.q01", "同一个问题？"), accepted("b.0000.q01", "同一个问题？")];
        let per_doc = dedup_questions(pairs.clone(), &FilterConfig::default());
        assert!(per_doc.iter().all(QAPair::is_accepted));
        let global = dedup_questions(
            pairs,
            &FilterConfig {
                dedup_scope: DedupScope::Global,
                ..FilterConfig::default()
            },
        );
        assert_eq!(global.iter().filter(|p| p.is_accepted()).count(), 1);
    }

    #[test]
    fn rejected_pairs_do_not_block() {
        let mut first = accepted("d.0.q1", "同一个问题？");
        first.reject(RejectReason::Refusal);
        let out = dedup_questions(vec![first, accepted("d.0.q2", "同一个问题？")], &FilterConfig::default());
        assert!(out[1].is_accepted());
    }

    #[test]
    fn shingle_edge_cases() {
        assert!(shingles("", 3).is_empty());
        assert!(shingles("  ", 3).is_empty());
        assert_eq!(shingles("ab", 3), HashSet::from(["ab".to_string()]));
        assert_eq!(shingles("A b", 2), HashSet::from(["ab".to_string()]));
        assert_eq!(jaccard(&HashSet::new(), &HashSet::new()), 1.0);
    }

    #[test]
    fn merge_counts() {
        let mut pairs: Vec<QAPair> = (0..10)
            .map(|i| accepted(&format!("d.0000.q{i:02}"), &format!("问题{i}？")))
            .collect();
        for p in pairs.iter_mut().take(4) {
            p.reject(RejectReason::EmptyAnswer);
        }
        let (records, stats) =
            merge_structured(&pairs, &|_| Some(SourceCategory::Report), &Ablation::default());
        assert_eq!(records.len(), 6);
        assert_eq!(stats.accepted, 6);
        assert_eq!(stats.rejected, 4);
        assert_eq!(stats.acceptance_rate, 0.6);
        assert_eq!(stats.reject_reasons["empty_answer"], 4);
        assert_eq!(records[0].meta.source_category, SourceCategory::Report);
        assert_eq!(records[0].input, "");
    }

    #[test]
    fn merge_empty() {
        let (records, stats) = merge_structured(&[], &|_| None, &Ablation::default());
        assert!(records.is_empty());
        assert_eq!(stats.total_pairs, 0);
        assert_eq!(stats.acceptance_rate, 0.0);
        assert_eq!(stats.reject_reasons.len(), RejectReason::ALL.len());
    }

    #[test]
    fn config_validation() {
        let mut cfg = FilterConfig::default();
        cfg.dedup_jaccard_threshold = 0.0;
        assert!(cfg.validate().is_err());
        cfg.dedup_jaccard_threshold = 1.0;
        assert!(cfg.validate().is_ok());
        cfg.dedup_shingle_size = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn default_patterns_loaded() {
        let cfg = FilterConfig::default();
        assert!(cfg.refusal_patterns.iter().any(|p| p == "无法回答"));
        assert!(cfg.refusal_patterns.iter().all(|p| !p.starts_with('#')));
    }

    #[test]
    fn write_failure_cleans_up() {
        let dir = tempfile::tempdir().unwrap();
        let instruct = dir.path().join("instruct.jsonl");
        let stats_dir = dir.path().join("stats.json");
        std::fs::create_dir(&stats_dir).unwrap();
        std::fs::write(stats_dir.join("x"), "").unwrap();
        let stats = RunStats::from_pairs(&[], &Ablation::default());
        assert!(write_outputs(&instruct, &stats_dir, &[], &stats).is_err());
        assert!(!instruct.exists());
    }
}
