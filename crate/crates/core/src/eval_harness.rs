//! Multiple-choice evaluation: prompting, choice extraction, scoring, and
//! the manual judgment sheet for open-ended multimodal answers.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, OnceLock};

use rand::seq::SliceRandom;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::synthetic::tags;
use crate::gateway::{
    CompletionRequest, Gateway, MockBackend, MockReply, Responder, EVALUATION_TEMPERATURE,
};
use crate::jsonl;
use crate::mcq_forge::{McqItem, McqOption, ReviewState, LABELS};
use crate::rng::keyed_rng;
use crate::sheet::{read_sheet, write_sheet};
use crate::template::PromptTemplate;

pub const DEFAULT_EVAL_TEMPLATE: &str = include_str!("../assets/eval_prompt.txt");
pub const EVAL_PLACEHOLDERS: &[&str] = &["stem", "options"];

const EVAL_SYSTEM: &str = "You are taking a single-choice exam.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TaskName {
    Tet,
    Tpt,
    Dle,
    Custom,
}

impl fmt::Display for TaskName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskName::Tet => "TET",
            TaskName::Tpt => "TPT",
            TaskName::Dle => "DLE",
            TaskName::Custom => "CUSTOM",
        })
    }
}

impl FromStr for TaskName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "TET" => Ok(TaskName::Tet),
            "TPT" => Ok(TaskName::Tpt),
            "DLE" => Ok(TaskName::Dle),
            "CUSTOM" => Ok(TaskName::Custom),
            _ => Err(Error::validation(format!(
                "unknown task `{s}` (expected tet, tpt, dle or custom)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaskOptions {
    pub template: PromptTemplate,
    pub shuffle_seed: Option<u64>,
    /// Admit items that have not been through review. Rejected items are
    /// never admitted.
    pub allow_unreviewed: bool,
}

impl Default for TaskOptions {
    fn default() -> Self {
        Self {
            template: PromptTemplate::new(DEFAULT_EVAL_TEMPLATE, EVAL_PLACEHOLDERS)
                .expect("bundled eval template is valid"),
            shuffle_seed: None,
            allow_unreviewed: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalTask {
    pub task_name: TaskName,
    items: Vec<McqItem>,
    template: PromptTemplate,
    shuffle_seed: Option<u64>,
}

impl EvalTask {
    /// Keep admissible items; fail if none remain or the template lacks a
    /// placeholder.
    pub fn new(task_name: TaskName, items: Vec<McqItem>, opts: TaskOptions) -> Result<Self> {
        let template = PromptTemplate::new(opts.template.as_str(), EVAL_PLACEHOLDERS)?;
        let total = items.len();
        let items: Vec<McqItem> = items
            .into_iter()
            .filter(|i| match i.review_state {
                ReviewState::Approved => true,
                ReviewState::Unreviewed => opts.allow_unreviewed,
                ReviewState::Rejected => false,
            })
            .collect();
        if items.is_empty() {
            return Err(Error::validation(format!(
                "task {task_name} has no admissible items ({total} loaded, none approved)"
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = items.iter().find(|i| !seen.insert(i.item_id.as_str())) {
            return Err(Error::validation(format!("duplicate item id {}", dup.item_id)));
        }
        Ok(Self {
            task_name,
            items,
            template,
            shuffle_seed: opts.shuffle_seed,
        })
    }

    pub fn items(&self) -> &[McqItem] {
        &self.items
    }

    pub fn shuffle_seed(&self) -> Option<u64> {
        self.shuffle_seed
    }

    /// The item as the model sees it: options in display order, relabelled
    /// A-D, with the key moved along. Also returns the original label of
    /// each displayed position.
    pub fn present(&self, item: &McqItem) -> (McqItem, Vec<char>) {
        let mut order: Vec<char> = item.options.iter().map(|o| o.label).collect();
        if let Some(seed) = self.shuffle_seed {
            order.shuffle(&mut keyed_rng(seed, &item.item_id));
        }
        let options: Vec<McqOption> = order
            .iter()
            .zip(LABELS)
            .map(|(orig, label)| McqOption {
                label,
                text: item.option_text(*orig).unwrap_or_default().to_string(),
            })
            .collect();
        let key_pos = order.iter().position(|l| *l == item.answer_key).unwrap_or(0);
        let shown = McqItem {
            options,
            answer_key: LABELS[key_pos],
            ..item.clone()
        };
        (shown, order)
    }

    fn prompt(&self, shown: &McqItem) -> String {
        let options = shown
            .options
            .iter()
            .map(|o| format!("{}. {}", o.label, o.text))
            .collect::<Vec<_>>()
            .join("\n");
        self.template
            .render(&[("stem", &shown.stem), ("options", &options)])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionRule {
    LeadingLetter,
    LabeledPhrase,
    OptionTextMatch,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelPrediction {
    pub item_id: String,
    pub raw_text: String,
    /// Choice in the item's original labelling.
    pub extracted_choice: Option<char>,
    pub extraction_rule_fired: ExtractionRule,
    /// Original labels in the order they were shown.
    pub option_order: String,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

fn leading_sentence(text: &str) -> &str {
    text.split(['。', '！', '？', '!', '?', '\n'])
        .map(str::trim)
        .find(|s| !s.is_empty())
        .unwrap_or("")
}

/// Standalone capital A-D tokens: not touching a letter, digit or CJK
/// character on either side.
fn standalone_letters(text: &str) -> Vec<char> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    for (i, &c) in chars.iter().enumerate() {
        if !LABELS.contains(&c) {
            continue;
        }
        let before = i.checked_sub(1).map(|j| chars[j]);
        let after = chars.get(i + 1).copied();
        if !before.is_some_and(is_word_char) && !after.is_some_and(is_word_char) {
            out.push(c);
        }
    }
    out
}

fn phrase_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?:正确答案|答案|选项|应选|选择|选|(?i:the\s+answer\s+is|answer\s+is|answer))\s*(?:是|为|应为|应该是)?\s*[:：]?\s*[(（【\[]?\s*([A-D])(?:[^A-Za-z0-9_]|$)",
        )
        .expect("phrase pattern compiles")
    })
}

fn unique(labels: impl IntoIterator<Item = char>) -> Option<Option<char>> {
    let set: std::collections::BTreeSet<char> = labels.into_iter().collect();
    match set.len() {
        0 => None,
        1 => Some(set.into_iter().next()),
        _ => Some(None),
    }
}

/// Pull a choice label out of a model response.
///
/// Rules in order, first hit wins: a standalone A-D in the leading
/// sentence; a phrase such as `答案是X` or `Answer: X`; the one option whose
/// full text appears verbatim. If the deciding rule matches two different
/// labels the result is none.
pub fn extract_choice(raw_text: &str, item: &McqItem) -> (Option<char>, ExtractionRule) {
    if let Some(hit) = unique(standalone_letters(leading_sentence(raw_text))) {
        return match hit {
            Some(c) => (Some(c), ExtractionRule::LeadingLetter),
            None => (None, ExtractionRule::None),
        };
    }
    let phrased = phrase_pattern()
        .captures_iter(raw_text)
        .filter_map(|c| c[1].chars().next());
    if let Some(hit) = unique(phrased) {
        return match hit {
            Some(c) => (Some(c), ExtractionRule::LabeledPhrase),
            None => (None, ExtractionRule::None),
        };
    }
    let present: Vec<&McqOption> = item
        .options
        .iter()
        .filter(|o| !o.text.trim().is_empty() && raw_text.contains(o.text.trim()))
        .collect();
    // an option that only matched because it is part of a longer matched
    // option does not count
    let maximal = present.iter().filter(|o| {
        !present
            .iter()
            .any(|p| p.label != o.label && p.text.trim().len() > o.text.trim().len() && p.text.contains(o.text.trim()))
    });
    match unique(maximal.map(|o| o.label)) {
        Some(Some(c)) => (Some(c), ExtractionRule::OptionTextMatch),
        _ => (None, ExtractionRule::None),
    }
}

/// Query the model once per item. Transport failures become empty,
/// unextracted predictions.
pub fn run_task(task: &EvalTask, gateway: &Gateway) -> Result<Vec<ModelPrediction>> {
    let shown: Vec<(McqItem, Vec<char>)> = task.items.iter().map(|i| task.present(i)).collect();
    let reqs = shown
        .iter()
        .map(|(s, _)| {
            CompletionRequest::new(EVAL_SYSTEM, task.prompt(s), format!("{}:{}", tags::EVAL, s.item_id))?
                .with_temperature(EVALUATION_TEMPERATURE)
        })
        .collect::<Result<Vec<_>>>()?;
    let results = gateway.complete_batch(&reqs);
    Ok(shown
        .iter()
        .zip(results)
        .map(|((s, order), res)| {
            let raw_text = if res.is_transport_error() { String::new() } else { res.text };
            let (choice, rule) = extract_choice(&raw_text, s);
            let original = choice.and_then(|c| LABELS.iter().position(|l| *l == c)).map(|p| order[p]);
            ModelPrediction {
                item_id: s.item_id.clone(),
                raw_text,
                extracted_choice: original,
                extraction_rule_fired: if original.is_some() { rule } else { ExtractionRule::None },
                option_order: order.iter().collect(),
            }
        })
        .collect())
}

/// `round(100 * correct / n, 2)` with halves rounded up, as hundredths of a
/// percent. Integer arithmetic so 67.21 is exactly 67.21.
pub fn accuracy_hundredths(correct: u64, n: u64) -> u64 {
    if n == 0 {
        return 0;
    }
    (20_000 * correct + n) / (2 * n)
}

pub fn accuracy_pct(correct: u64, n: u64) -> f64 {
    accuracy_hundredths(correct, n) as f64 / 100.0
}

/// Fixed two-decimal rendering used in text output.
pub fn format_pct(correct: u64, n: u64) -> String {
    let h = accuracy_hundredths(correct, n);
    format!("{}.{:02}", h / 100, h % 100)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemOutcome {
    pub item_id: String,
    pub gold: char,
    pub extracted: Option<char>,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub group: String,
    pub n_items: u64,
    pub n_correct: u64,
    pub accuracy_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task_name: TaskName,
    pub n_items: u64,
    pub n_correct: u64,
    pub n_unextracted: u64,
    pub accuracy_pct: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub groups: Vec<GroupScore>,
    pub per_item: Vec<ItemOutcome>,
}

impl EvalReport {
    pub fn accuracy_text(&self) -> String {
        format_pct(self.n_correct, self.n_items)
    }
}

/// Score predictions against the task's gold keys. Items with no prediction
/// count as incorrect; every item appears in the report.
pub fn score(preds: &[ModelPrediction], task: &EvalTask) -> Result<EvalReport> {
    let known: HashSet<&str> = task.items.iter().map(|i| i.item_id.as_str()).collect();
    if let Some(stray) = preds.iter().find(|p| !known.contains(p.item_id.as_str())) {
        return Err(Error::validation(format!(
            "prediction for unknown item {}",
            stray.item_id
        )));
    }
    let by_id: HashMap<&str, &ModelPrediction> =
        preds.iter().map(|p| (p.item_id.as_str(), p)).collect();

    let mut per_item = Vec::with_capacity(task.items.len());
    let mut groups: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    let (mut n_correct, mut n_unextracted) = (0u64, 0u64);
    for item in &task.items {
        let extracted = match by_id.get(item.item_id.as_str()) {
            Some(p) => p.extracted_choice,
            None => {
                log::warn!("no prediction for item {}; counted as incorrect", item.item_id);
                None
            }
        };
        let correct = extracted == Some(item.answer_key);
        n_correct += u64::from(correct);
        n_unextracted += u64::from(extracted.is_none());
        if let Some(g) = &item.group {
            let e = groups.entry(g.clone()).or_default();
            e.0 += 1;
            e.1 += u64::from(correct);
        }
        per_item.push(ItemOutcome {
            item_id: item.item_id.clone(),
            gold: item.answer_key,
            extracted,
            correct,
        });
    }
    let n_items = task.items.len() as u64;
    Ok(EvalReport {
        task_name: task.task_name,
        n_items,
        n_correct,
        n_unextracted,
        accuracy_pct: accuracy_pct(n_correct, n_items),
        groups: groups
            .into_iter()
            .map(|(group, (n, c))| GroupScore {
                group,
                n_items: n,
                n_correct: c,
                accuracy_pct: accuracy_pct(c, n),
            })
            .collect(),
        per_item,
    })
}

pub fn write_results(out_dir: &Path, preds: &[ModelPrediction], report: &EvalReport) -> Result<()> {
    jsonl::write_jsonl(&out_dir.join("predictions.jsonl"), preds)?;
    jsonl::write_json(&out_dir.join("report.json"), report)
}

/// A mock that answers each `eval:<item_id>` request with the label under
/// which the item's gold option text was shown in the prompt.
pub fn gold_mock(items: &[McqItem]) -> MockBackend {
    let gold: HashMap<String, String> = items
        .iter()
        .filter_map(|i| Some((i.item_id.clone(), i.gold_text()?.to_string())))
        .collect();
    let gold = Arc::new(gold);
    MockBackend::new(Responder::func(move |req: &CompletionRequest| {
        let id = req
            .request_tag()
            .strip_prefix(tags::EVAL)
            .and_then(|t| t.strip_prefix(':'))
            .unwrap_or("");
        let Some(text) = gold.get(id) else {
            return MockReply::text("");
        };
        let label = req.user_text().lines().find_map(|line| {
            let (label, rest) = line.split_once(". ")?;
            (rest == text && label.len() == 1).then(|| label.to_string())
        });
        MockReply::text(label.unwrap_or_default())
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Correct,
    Incorrect,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MmRecord {
    pub sample_id: String,
    pub image_path: String,
    pub question: String,
    pub gold_answer: String,
    #[serde(default)]
    pub prediction: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human_verdict: Option<Verdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmReport {
    pub n_items: u64,
    pub n_correct: u64,
    pub accuracy_pct: f64,
    pub records: Vec<MmRecord>,
}

const JUDGMENT_COLUMNS: [&str; 6] = ["sample_id", "image_path", "question", "gold", "prediction", "verdict"];

/// Sheet for manual judgment; every record must carry a prediction.
pub fn export_judgment_sheet(records: &[MmRecord]) -> Result<String> {
    let missing: Vec<String> = records
        .iter()
        .filter(|r| r.prediction.is_none())
        .map(|r| format!("sample {} has no prediction", r.sample_id))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Sheet(missing));
    }
    write_sheet(
        &JUDGMENT_COLUMNS,
        records.iter().map(|r| {
            vec![
                r.sample_id.as_str(),
                r.image_path.as_str(),
                r.question.as_str(),
                r.gold_answer.as_str(),
                r.prediction.as_deref().unwrap_or(""),
                "",
            ]
        }),
    )
}

/// Read back a filled sheet. Every record needs exactly one verdict of
/// `correct` or `incorrect`; all problems are reported together.
pub fn import_judgments(records: &[MmRecord], sheet: &str) -> Result<MmReport> {
    let rows = read_sheet(sheet, &["sample_id", "verdict"])?;
    let index: HashMap<&str, usize> = records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.sample_id.as_str(), i))
        .collect();
    let mut out = records.to_vec();
    let mut judged = vec![false; records.len()];
    let mut errors = Vec::new();
    for row in &rows {
        let id = row.get("sample_id");
        let Some(&i) = index.get(id) else {
            errors.push(format!("line {}: unknown sample_id `{id}`", row.line));
            continue;
        };
        let verdict = match row.get("verdict").trim() {
            "correct" => Verdict::Correct,
            "incorrect" => Verdict::Incorrect,
            "" => {
                errors.push(format!("line {}: missing verdict for `{id}`", row.line));
                continue;
            }
            other => {
                errors.push(format!("line {}: invalid verdict `{other}`", row.line));
                continue;
            }
        };
        if out[i].prediction.is_none() {
            errors.push(format!("line {}: `{id}` has no prediction to judge", row.line));
            continue;
        }
        if std::mem::replace(&mut judged[i], true) {
            errors.push(format!("line {}: `{id}` judged twice", row.line));
        }
        out[i].human_verdict = Some(verdict);
    }
    let listed: HashSet<&str> = rows.iter().map(|r| r.get("sample_id")).collect();
    for (r, done) in records.iter().zip(&judged) {
        if !done && !listed.contains(r.sample_id.as_str()) {
            errors.push(format!("sample `{}` has no row in the sheet", r.sample_id));
        }
    }
    if !errors.is_empty() {
        return Err(Error::Sheet(errors));
    }
    let n_items = out.len() as u64;
    let n_correct = out
        .iter()
        .filter(|r| r.human_verdict == Some(Verdict::Correct))
        .count() as u64;
    Ok(MmReport {
        n_items,
        n_correct,
        accuracy_pct: accuracy_pct(n_correct, n_items),
        records: out,
    })
}
