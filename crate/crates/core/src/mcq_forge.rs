//! Single-choice item construction.
//!
//! Accepted QA pairs are rewritten by the generator into a four-option item
//! in one call, parsed against a strict line schema, validated, and merged
//! with a traditional question bank. Items only reach evaluation after a
//! manual review pass through the review sheet.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::synthetic::tags;
use crate::gateway::{CompletionRequest, CompletionResult, Gateway, GENERATION_TEMPERATURE};
use crate::jsonl;
use crate::refinery::QAPair;
use crate::template::PromptTemplate;

pub const LABELS: [char; 4] = ['A', 'B', 'C', 'D'];
pub const DEFAULT_MCQ_TEMPLATE: &str = include_str!("../assets/mcq_prompt.txt");
pub const MCQ_PLACEHOLDERS: &[&str] = &["question", "answer"];
pub const GENERATED_PREFIX: &str = "gen:";
pub const BANK_PREFIX: &str = "bank:";
pub const KEY_NOT_GROUNDED: &str = "key_not_grounded";

const MCQ_SYSTEM: &str = "你是严谨的交通运输领域命题专家。";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqOption {
    pub label: char,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemSource {
    Generated,
    QuestionBank,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum TaskTag {
    #[serde(rename = "TET")]
    Tet,
    #[serde(rename = "TPT")]
    Tpt,
    #[serde(rename = "DLE")]
    Dle,
    #[default]
    #[serde(rename = "other")]
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewState {
    #[default]
    Unreviewed,
    Approved,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqItem {
    pub item_id: String,
    pub stem: String,
    pub options: Vec<McqOption>,
    pub answer_key: char,
    pub source: ItemSource,
    #[serde(default)]
    pub task_tag: TaskTag,
    #[serde(default)]
    pub review_state: ReviewState,
    /// Sub-test name used for grouped scoring.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub review_note: Option<String>,
}

impl McqItem {
    pub fn option_text(&self, label: char) -> Option<&str> {
        self.options
            .iter()
            .find(|o| o.label == label)
            .map(|o| o.text.as_str())
    }

    pub fn gold_text(&self) -> Option<&str> {
        self.option_text(self.answer_key)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    OptionCount { found: usize },
    LabelOrder { position: usize, found: char },
    KeyOutOfRange { key: char },
    DuplicateOptions { first: char, second: char },
    EmptyOption { label: char },
    EmptyStem,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::OptionCount { found } => write!(f, "expected 4 options, found {found}"),
            Violation::LabelOrder { position, found } => {
                write!(f, "option {} is labelled {found}, expected {}", position + 1, LABELS.get(*position).copied().unwrap_or('?'))
            }
            Violation::KeyOutOfRange { key } => write!(f, "key out of range: {key}"),
            Violation::DuplicateOptions { first, second } => {
                write!(f, "options {first} and {second} have the same text")
            }
            Violation::EmptyOption { label } => write!(f, "option {label} is empty"),
            Violation::EmptyStem => write!(f, "stem is empty"),
        }
    }
}

/// Every violated item invariant, not just the first.
pub fn validate_item(item: &McqItem) -> std::result::Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    if item.stem.trim().is_empty() {
        out.push(Violation::EmptyStem);
    }
    if item.options.len() != LABELS.len() {
        out.push(Violation::OptionCount {
            found: item.options.len(),
        });
    }
    for (pos, opt) in item.options.iter().enumerate() {
        if LABELS.get(pos) != Some(&opt.label) {
            out.push(Violation::LabelOrder {
                position: pos,
                found: opt.label,
            });
        }
        if opt.text.trim().is_empty() {
            out.push(Violation::EmptyOption { label: opt.label });
        }
    }
    if !LABELS.contains(&item.answer_key) || !item.options.iter().any(|o| o.label == item.answer_key) {
        out.push(Violation::KeyOutOfRange {
            key: item.answer_key,
        });
    }
    for (i, a) in item.options.iter().enumerate() {
        for b in &item.options[i + 1..] {
            let (ta, tb) = (a.text.trim(), b.text.trim());
            if !ta.is_empty() && ta == tb {
                out.push(Violation::DuplicateOptions {
                    first: a.label,
                    second: b.label,
                });
            }
        }
    }
    match out.is_empty() {
        true => Ok(()),
        false => Err(out),
    }
}

/// Longest clause of an answer, trimmed.
pub fn answer_core(answer: &str) -> String {
    answer
        .split(['，', '。', '；', '、', ',', '.', ';', ':', '：', '！', '？', '!', '?', '\n'])
        .map(str::trim)
        .max_by_key(|c| c.chars().count())
        .unwrap_or("")
        .to_string()
}

fn loose(text: &str) -> String {
    text.chars()
        .filter(|c| !c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect()
}

/// Whether the keyed option and the original answer's core clause overlap
/// by containment in either direction.
pub fn key_is_grounded(item: &McqItem, answer: &str) -> bool {
    let core = loose(&answer_core(answer));
    let Some(gold) = item.gold_text().map(loose) else {
        return false;
    };
    !core.is_empty() && !gold.is_empty() && (gold.contains(&core) || core.contains(&gold))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    ParseFailure,
    InvariantViolation,
    GatewayFailure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversionFailure {
    pub pair_id: String,
    pub reason: FailureReason,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedBlock {
    pub stem: String,
    pub options: Vec<McqOption>,
    pub key: char,
}

fn option_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^([A-Z])\s*[.．、]\s*(.*)$").expect("option pattern compiles"))
}

fn field<'a>(line: &'a str, name: &str) -> Option<&'a str> {
    let head = line.get(..name.len())?;
    if !head.eq_ignore_ascii_case(name) {
        return None;
    }
    let rest = &line[name.len()..];
    rest.strip_prefix(':')
        .or_else(|| rest.strip_prefix('：'))
        .map(str::trim)
}

/// Parse a `Stem:` / `A.`…`D.` / `Key:` block. Any other non-blank line is
/// a parse failure.
pub fn parse_block(text: &str) -> std::result::Result<ParsedBlock, String> {
    let mut stem = None;
    let mut key = None;
    let mut options = Vec::new();
    for (n, line) in text.lines().map(str::trim).enumerate() {
        if line.is_empty() {
            continue;
        }
        if let Some(s) = field(line, "Stem") {
            if stem.replace(s.to_string()).is_some() {
                return Err(format!("line {}: second Stem", n + 1));
            }
        } else if let Some(k) = field(line, "Key") {
            let mut chars = k.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) if c.is_ascii_uppercase() => key = Some(c),
                _ => return Err(format!("line {}: bad key `{k}`", n + 1)),
            }
        } else if let Some(cap) = option_line().captures(line) {
            let label = cap[1].chars().next().expect("one capital letter");
            options.push(McqOption {
                label,
                text: cap[2].trim().to_string(),
            });
        } else {
            return Err(format!("line {}: unexpected `{line}`", n + 1));
        }
    }
    match (stem, key) {
        (Some(stem), Some(key)) if !options.is_empty() => Ok(ParsedBlock { stem, options, key }),
        (None, _) => Err("missing Stem line".into()),
        (_, None) => Err("missing Key line".into()),
        _ => Err("no option lines".into()),
    }
}

#[derive(Debug, Clone)]
pub struct McqConfig {
    pub template: PromptTemplate,
    pub task_tag: TaskTag,
}

impl Default for McqConfig {
    fn default() -> Self {
        Self {
            template: PromptTemplate::new(DEFAULT_MCQ_TEMPLATE, MCQ_PLACEHOLDERS)
                .expect("bundled mcq template is valid"),
            task_tag: TaskTag::Other,
        }
    }
}

fn conversion_request(pair: &QAPair, cfg: &McqConfig) -> Result<CompletionRequest> {
    let user = cfg
        .template
        .render(&[("question", &pair.question), ("answer", &pair.answer)]);
    CompletionRequest::new(MCQ_SYSTEM, user, format!("{}:{}", tags::MCQ, pair.pair_id))?
        .with_temperature(GENERATION_TEMPERATURE)
}

fn item_from_result(
    pair: &QAPair,
    res: &CompletionResult,
    cfg: &McqConfig,
) -> std::result::Result<McqItem, ConversionFailure> {
    let fail = |reason, detail: String| ConversionFailure {
        pair_id: pair.pair_id.clone(),
        reason,
        detail,
    };
    if res.is_transport_error() {
        return Err(fail(
            FailureReason::GatewayFailure,
            format!("gave up after {} attempts", res.attempt_count),
        ));
    }
    let block = parse_block(&res.text).map_err(|e| fail(FailureReason::ParseFailure, e))?;
    let mut item = McqItem {
        item_id: format!("{GENERATED_PREFIX}{}", pair.pair_id),
        stem: block.stem,
        options: block.options,
        answer_key: block.key,
        source: ItemSource::Generated,
        task_tag: cfg.task_tag,
        review_state: ReviewState::Unreviewed,
        group: None,
        review_note: None,
    };
    if let Err(violations) = validate_item(&item) {
        let detail: Vec<String> = violations.iter().map(ToString::to_string).collect();
        return Err(fail(FailureReason::InvariantViolation, detail.join("; ")));
    }
    if !key_is_grounded(&item, &pair.answer) {
        item.review_note = Some(KEY_NOT_GROUNDED.to_string());
    }
    Ok(item)
}

/// Convert one accepted pair.
pub fn convert_qa_to_mcq(
    pair: &QAPair,
    gateway: &Gateway,
    cfg: &McqConfig,
) -> Result<std::result::Result<McqItem, ConversionFailure>> {
    if !pair.is_accepted() {
        return Err(Error::validation(format!(
            "pair {} is not accepted",
            pair.pair_id
        )));
    }
    let res = gateway.complete(&conversion_request(pair, cfg)?);
    Ok(item_from_result(pair, &res, cfg))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConversionOutcome {
    pub items: Vec<McqItem>,
    pub failures: Vec<ConversionFailure>,
}

impl ConversionOutcome {
    pub fn failure_counts(&self) -> BTreeMap<FailureReason, usize> {
        let mut out = BTreeMap::new();
        for f in &self.failures {
            *out.entry(f.reason).or_default() += 1;
        }
        out
    }
}

impl PartialOrd for FailureReason {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for FailureReason {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (*self as u8).cmp(&(*other as u8))
    }
}

/// Convert every accepted pair through the gateway's bounded batch.
pub fn convert_batch(pairs: &[QAPair], gateway: &Gateway, cfg: &McqConfig) -> Result<ConversionOutcome> {
    let accepted: Vec<&QAPair> = pairs.iter().filter(|p| p.is_accepted()).collect();
    let reqs = accepted
        .iter()
        .map(|p| conversion_request(p, cfg))
        .collect::<Result<Vec<_>>>()?;
    let results = gateway.complete_batch(&reqs);
    let mut out = ConversionOutcome::default();
    for (pair, res) in accepted.iter().zip(&results) {
        match item_from_result(pair, res, cfg) {
            Ok(item) => out.items.push(item),
            Err(f) => out.failures.push(f),
        }
    }
    out.items.sort_by(|a, b| a.item_id.cmp(&b.item_id));
    Ok(out)
}

pub fn normalize_stem(stem: &str) -> String {
    let collapsed = stem.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    collapsed
        .trim_end_matches(['?', '？', '。', '.', ':', '：', ' '])
        .to_string()
}

fn namespaced(id: &str, prefix: &str) -> String {
    if id.starts_with(GENERATED_PREFIX) || id.starts_with(BANK_PREFIX) {
        id.to_string()
    } else {
        format!("{prefix}{id}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankIssue {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BankMerge {
    pub items: Vec<McqItem>,
    pub issues: Vec<BankIssue>,
    pub dropped_generated: usize,
}

/// Union of generated items and a bank file.
///
/// Ids are namespaced `gen:` / `bank:`. When two items share a normalized
/// stem the bank copy is kept. Malformed or invalid bank lines are reported
/// and skipped. Output is sorted by id.
pub fn merge_bank(generated: &[McqItem], bank_path: &Path) -> Result<BankMerge> {
    let text = std::fs::read_to_string(bank_path).map_err(|e| Error::io(bank_path, e))?;
    let mut out = BankMerge::default();
    let mut by_stem: HashMap<String, McqItem> = HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut item: McqItem = match serde_json::from_str(line) {
            Ok(item) => item,
            Err(e) => {
                out.issues.push(BankIssue {
                    line: idx + 1,
                    message: e.to_string(),
                });
                continue;
            }
        };
        if let Err(v) = validate_item(&item) {
            let msgs: Vec<String> = v.iter().map(ToString::to_string).collect();
            out.issues.push(BankIssue {
                line: idx + 1,
                message: msgs.join("; "),
            });
            continue;
        }
        item.item_id = namespaced(&item.item_id, BANK_PREFIX);
        item.source = ItemSource::QuestionBank;
        by_stem.entry(normalize_stem(&item.stem)).or_insert(item);
    }
    for item in generated {
        let stem = normalize_stem(&item.stem);
        if by_stem.contains_key(&stem) {
            if item.source == ItemSource::Generated {
                out.dropped_generated += 1;
            }
            continue;
        }
        let mut item = item.clone();
        item.item_id = namespaced(&item.item_id, GENERATED_PREFIX);
        by_stem.insert(stem, item);
    }
    out.items = by_stem.into_values().collect();
    out.items.sort_by(|a, b| a.item_id.cmp(&b.item_id));
    Ok(out)
}

pub fn load_items(path: &Path) -> Result<Vec<McqItem>> {
    let items: Vec<McqItem> = jsonl::read_jsonl(path)?;
    for item in &items {
        if let Err(v) = validate_item(item) {
            let msgs: Vec<String> = v.iter().map(ToString::to_string).collect();
            return Err(Error::validation(format!(
                "item {} violates invariants: {}",
                item.item_id,
                msgs.join("; ")
            )));
        }
    }
    Ok(items)
}

pub fn render_options(item: &McqItem) -> String {
    item.options
        .iter()
        .map(|o| format!("{}. {}", o.label, o.text))
        .collect::<Vec<_>>()
        .join(" | ")
}

/// Review sheet: `item_id, stem, options, key, note, verdict` with the
/// verdict column left blank.
pub fn export_review_sheet(items: &[McqItem]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .quote_style(csv::QuoteStyle::Always)
        .from_writer(Vec::new());
    w.write_record(["item_id", "stem", "options", "key", "note", "verdict"])?;
    for item in items {
        w.write_record([
            item.item_id.as_str(),
            item.stem.as_str(),
            &render_options(item),
            &item.answer_key.to_string(),
            item.review_note.as_deref().unwrap_or(""),
            "",
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::validation(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Apply `approved` / `rejected` verdicts; blank leaves an item unreviewed.
/// Unknown ids and bad tokens abort the import with their line numbers.
pub fn import_review_sheet(items: &[McqItem], sheet: &str) -> Result<Vec<McqItem>> {
    let mut by_id: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        by_id.insert(&item.item_id, i);
    }
    let mut out = items.to_vec();
    let mut errors = Vec::new();
    let mut rdr = csv::Reader::from_reader(sheet.as_bytes());
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(id_col), Some(verdict_col)) = (col("item_id"), col("verdict")) else {
        return Err(Error::Sheet(vec!["header must contain item_id and verdict".into()]));
    };
    for (n, row) in rdr.records().enumerate() {
        let line = n + 2;
        let row = row?;
        let id = row.get(id_col).unwrap_or("");
        let verdict = row.get(verdict_col).unwrap_or("").trim();
        let Some(&idx) = by_id.get(id) else {
            errors.push(format!("line {line}: unknown item_id `{id}`"));
            continue;
        };
        out[idx].review_state = match verdict {
            "" => ReviewState::Unreviewed,
            "approved" => ReviewState::Approved,
            "rejected" => ReviewState::Rejected,
            other => {
                errors.push(format!("line {line}: invalid verdict `{other}`"));
                continue;
            }
        };
    }
    match errors.is_empty() {
        true => Ok(out),
        false => Err(Error::Sheet(errors)),
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::gateway::{GatewayConfig, MockBackend, MockReply, Responder};
    use crate::refinery::PairStatus;

    pub(crate) fn item(id: &str, stem: &str, opts: [&str; 4], key: char) -> McqItem {
        McqItem {
            item_id: id.into(),
            stem: stem.into(),
            options: LABELS
                .iter()
                .zip(opts)
                .map(|(&label, t)| McqOption {
                    label,
                    text: t.into(),
                })
                .collect(),
            answer_key: key,
            source: ItemSource::Generated,
            task_tag: TaskTag::Other,
            review_state: ReviewState::Unreviewed,
            group: None,
            review_note: None,
        }
    }

    fn pair(id: &str, q: &str, a: &str) -> QAPair {
        QAPair {
            pair_id: id.into(),
            chunk_id: "d.0000".into(),
            question: q.into(),
            answer: a.into(),
            status: PairStatus::Accepted,
            reject_reason: None,
        }
    }

    fn gateway(f: impl Fn(&CompletionRequest) -> MockReply + Send + Sync + 'static) -> Gateway {
        Gateway::new(
            GatewayConfig::new("mock:echo"),
            Arc::new(MockBackend::new(Responder::func(f))),
        )
        .unwrap()
    }

    const WELL_FORMED: &str = "Stem: 遇到红灯应当怎么做？\nA. 加速通过\nB. 停车等待\nC. 鸣笛示意\nD. 倒车离开\nKey: B";

    #[test]
    fn valid_item_ok() {
        assert!(validate_item(&item("x", "s", ["a", "b", "c", "d"], 'A')).is_ok());
    }

    #[test]
    fn key_out_of_range() {
        let v = validate_item(&item("x", "s", ["a", "b", "c", "d"], 'E')).unwrap_err();
        assert_eq!(v, vec![Violation::KeyOutOfRange { key: 'E' }]);
    }

    #[test]
    fn all_violations_reported() {
        let mut it = item("x", " ", ["a", "a", "c", "d"], 'Z');
        it.options.pop();
        let v = validate_item(&it).unwrap_err();
        assert!(v.contains(&Violation::EmptyStem));
        assert!(v.contains(&Violation::OptionCount { found: 3 }));
        assert!(v.contains(&Violation::KeyOutOfRange { key: 'Z' }));
        assert!(v.contains(&Violation::DuplicateOptions { first: 'A', second: 'B' }));
    }

    #[test]
    fn duplicate_after_trim() {
        let v = validate_item(&item("x", "s", ["a ", " a", "c", "d"], 'A')).unwrap_err();
        assert_eq!(v, vec![Violation::DuplicateOptions { first: 'A', second: 'B' }]);
    }

    #[test]
    fn convert_well_formed() {
        let gw = gateway(|_| MockReply::text(WELL_FORMED));
        let p = pair("d.0000.q01", "遇到红灯应当怎么做？", "应当停车等待");
        let it = convert_qa_to_mcq(&p, &gw, &McqConfig::default()).unwrap().unwrap();
        assert_eq!(it.answer_key, 'B');
        assert_eq!(it.item_id, "gen:d.0000.q01");
        assert_eq!(it.review_state, ReviewState::Unreviewed);
        assert_eq!(it.review_note, None);
    }

    #[test]
    fn ungrounded_key_flagged() {
        let gw = gateway(|_| MockReply::text(WELL_FORMED));
        let p = pair("d.0000.q01", "q", "应当立即加速离开路口");
        let it = convert_qa_to_mcq(&p, &gw, &McqConfig::default()).unwrap().unwrap();
        assert_eq!(it.review_note.as_deref(), Some(KEY_NOT_GROUNDED));
    }

    #[test]
    fn three_options_is_invariant_violation() {
        let gw = gateway(|_| MockReply::text("Stem: s\nA. a\nB. b\nC. c\nKey: A"));
        let f = convert_qa_to_mcq(&pair("p", "q", "a"), &gw, &McqConfig::default())
            .unwrap()
            .unwrap_err();
        assert_eq!(f.reason, FailureReason::InvariantViolation);
    }

    #[test]
    fn chatter_is_parse_failure() {
        let gw = gateway(|_| MockReply::text("好的，题目如下：\nStem: s\nA. a\nB. b\nC. c\nD. d\nKey: A"));
        let f = convert_qa_to_mcq(&pair("p", "q", "a"), &gw, &McqConfig::default())
            .unwrap()
            .unwrap_err();
        assert_eq!(f.reason, FailureReason::ParseFailure);
        assert!(parse_block("Stem: s\nA. a").is_err());
        assert!(parse_block("A. a\nKey: A").is_err());
        assert!(parse_block("Stem: s\nA. a\nKey: AB").is_err());
        assert!(parse_block("stem：s\nA．a\nkey：A").is_ok());
    }

    #[test]
    fn rejected_pairs_are_not_converted() {
        let gw = gateway(|_| MockReply::text(WELL_FORMED));
        let mut p = pair("p", "q", "a");
        p.status = PairStatus::Rejected;
        assert!(convert_qa_to_mcq(&p, &gw, &McqConfig::default()).is_err());
    }

    #[test]
    fn sixty_percent_parseable_of_500() {
        // parseable iff the keyed hash lands in the lower 60%
        let gw = gateway(|r| {
            if crate::rng::stable_hash64(42, r.request_tag()) % 100 < 60 {
                MockReply::text(WELL_FORMED)
            } else {
                MockReply::text("Stem: s\nA. a\nB. b\nKey: A")
            }
        });
        let pairs: Vec<QAPair> = (0..500)
            .map(|i| pair(&format!("d.0000.q{i:03}"), "q", "停车等待"))
            .collect();
        let expected = pairs
            .iter()
            .filter(|p| crate::rng::stable_hash64(42, &format!("mcq:{}", p.pair_id)) % 100 < 60)
            .count();
        let out = convert_batch(&pairs, &gw, &McqConfig::default()).unwrap();
        assert_eq!(out.items.len(), expected);
        assert_eq!(out.items.len() + out.failures.len(), 500);
        // roughly 300 usable items from 500 pairs
        assert!((270..=330).contains(&out.items.len()), "{}", out.items.len());
    }

    fn write_bank(items: &[McqItem]) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.jsonl");
        jsonl::write_jsonl(&path, items).unwrap();
        (dir, path)
    }

    fn generated(n: usize) -> Vec<McqItem> {
        (0..n)
            .map(|i| item(&format!("g{i:03}"), &format!("生成题{i}？"), ["a", "b", "c", "d"], 'A'))
            .collect()
    }

    fn bank(n: usize) -> Vec<McqItem> {
        (0..n)
            .map(|i| {
                let mut it = item(&format!("b{i:03}"), &format!("题库题{i}？"), ["w", "x", "y", "z"], 'C');
                it.source = ItemSource::QuestionBank;
                it
            })
            .collect()
    }

    #[test]
    fn merge_300_and_200() {
        let (_d, path) = write_bank(&bank(200));
        let out = merge_bank(&generated(300), &path).unwrap();
        assert_eq!(out.items.len(), 500);
        assert!(out.issues.is_empty());
        assert_eq!(out.items.iter().filter(|i| i.item_id.starts_with("bank:")).count(), 200);
    }

    #[test]
    fn empty_bank_is_identity() {
        let (_d, path) = write_bank(&[]);
        let gen = generated(5);
        let out = merge_bank(&gen, &path).unwrap();
        assert_eq!(out.items.len(), 5);
        assert!(out.items.iter().zip(&gen).all(|(a, b)| a.item_id == format!("gen:{}", b.item_id)));
    }

    #[test]
    fn collision_keeps_bank_copy() {
        let mut b = bank(200);
        b[7].stem = "生成题3 ?".into();
        let (_d, path) = write_bank(&b);
        let out = merge_bank(&generated(300), &path).unwrap();
        assert_eq!(out.items.len(), 499);
        assert_eq!(out.dropped_generated, 1);
        let kept = out.items.iter().find(|i| normalize_stem(&i.stem) == "生成题3").unwrap();
        assert_eq!(kept.item_id, "bank:b007");
    }

    #[test]
    fn merge_is_idempotent() {
        let (_d, path) = write_bank(&bank(20));
        let once = merge_bank(&generated(30), &path).unwrap().items;
        let twice = merge_bank(&once, &path).unwrap().items;
        assert_eq!(once, twice);
    }

    #[test]
    fn malformed_bank_lines_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.jsonl");
        let good = serde_json::to_string(&bank(1)[0]).unwrap();
        let bad_key = serde_json::to_string(&item("b9", "s?", ["a", "b", "c", "d"], 'E')).unwrap();
        std::fs::write(&path, format!("{good}\nnot json\n{bad_key}\n")).unwrap();
        let out = merge_bank(&[], &path).unwrap();
        assert_eq!(out.items.len(), 1);
        let lines: Vec<usize> = out.issues.iter().map(|i| i.line).collect();
        assert_eq!(lines, vec![2, 3]);
    }

    #[test]
    fn review_sheet_round_trip() {
        let items = generated(3);
        let sheet = export_review_sheet(&items).unwrap();
        assert!(sheet.starts_with("\"item_id\",\"stem\",\"options\",\"key\",\"note\",\"verdict\""));
        let filled = sheet
            .lines()
            .enumerate()
            .map(|(i, l)| match i {
                1 => l.replace(",\"\"\n", "").trim_end_matches("\"\"").to_string() + "\"approved\"",
                2 => l.trim_end_matches("\"\"").to_string() + "\"rejected\"",
                _ => l.to_string(),
            })
            .collect::<Vec<_>>()
            .join("\n");
        let out = import_review_sheet(&items, &filled).unwrap();
        assert_eq!(out[0].review_state, ReviewState::Approved);
        assert_eq!(out[1].review_state, ReviewState::Rejected);
        assert_eq!(out[2].review_state, ReviewState::Unreviewed);
    }

    #[test]
    fn review_sheet_errors_carry_lines() {
        let items = generated(1);
        let sheet = "item_id,verdict\ng000,maybe\nzzz,approved\n";
        match import_review_sheet(&items, sheet) {
            Err(Error::Sheet(errs)) => {
                assert_eq!(errs.len(), 2);
                assert!(errs[0].starts_with("line 2"));
                assert!(errs[1].starts_with("line 3"));
            }
            other => panic!("expected sheet error, got {other:?}"),
        }
    }

    #[test]
    fn answer_core_is_longest_clause() {
        assert_eq!(answer_core("应当停车，并且等待绿灯亮起。"), "并且等待绿灯亮起");
        assert_eq!(answer_core(""), "");
    }
}
