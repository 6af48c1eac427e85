//! Dataset composition statistics and the manual audit sample.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::corpus::{estimate_tokens, Chunk, SourceCategory};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::refinery::{InstructionRecord, RunStats, SCHEMA_VERSION};
use crate::rng::keyed_rng;
use crate::sheet::{read_sheet, write_sheet};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub records: u64,
    pub tokens: u64,
}

impl Tally {
    fn add(&mut self, tokens: u64) {
        self.records += 1;
        self.tokens += tokens;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub category: SourceCategory,
    #[serde(flatten)]
    pub tally: Tally,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceSummary {
    pub total_pairs: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub acceptance_rate: f64,
}

impl From<&RunStats> for AcceptanceSummary {
    fn from(s: &RunStats) -> Self {
        Self {
            total_pairs: s.total_pairs,
            accepted: s.accepted,
            rejected: s.rejected,
            acceptance_rate: s.acceptance_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionReport {
    pub schema_version: u32,
    pub generated_at: String,
    /// One row per source category, always all five.
    pub categories: Vec<CategoryRow>,
    pub total: Tally,
    /// Records whose chunk id is not in the chunk store; not part of
    /// `total`.
    pub dangling: Tally,
    pub acceptance: Option<AcceptanceSummary>,
}

impl CompositionReport {
    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<20} {:>10} {:>14}", "category", "records", "tokens");
        let rows = self
            .categories
            .iter()
            .map(|r| (r.category.as_str(), &r.tally))
            .chain([("total", &self.total), ("dangling", &self.dangling)]);
        for (name, t) in rows {
            let _ = writeln!(out, "{name:<20} {:>10} {:>14}", t.records, t.tokens);
        }
        if let Some(a) = &self.acceptance {
            let _ = writeln!(
                out,
                "acceptance: {} of {} pairs ({:.2}%)",
                a.accepted,
                a.total_pairs,
                a.acceptance_rate * 100.0
            );
        }
        out
    }
}

fn record_tokens(r: &InstructionRecord) -> u64 {
    estimate_tokens(&r.instruction) + estimate_tokens(&r.input) + estimate_tokens(&r.output)
}

/// Count records and tokens per source category.
pub fn compose(records: &[InstructionRecord], chunk_ids: &dyn Fn(&str) -> bool, stats: Option<&RunStats>) -> CompositionReport {
    let mut per: BTreeMap<SourceCategory, Tally> =
        SourceCategory::ALL.iter().map(|c| (*c, Tally::default())).collect();
    let mut total = Tally::default();
    let mut dangling = Tally::default();
    for r in records {
        let tokens = record_tokens(r);
        if !chunk_ids(&r.meta.chunk_id) {
            log::warn!("record {} points at unknown chunk {}", r.meta.pair_id, r.meta.chunk_id);
            dangling.add(tokens);
            continue;
        }
        per.entry(r.meta.source_category).or_default().add(tokens);
        total.add(tokens);
    }
    CompositionReport {
        schema_version: SCHEMA_VERSION,
        generated_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        categories: SourceCategory::ALL
            .iter()
            .map(|c| CategoryRow {
                category: *c,
                tally: per.remove(c).unwrap_or_default(),
            })
            .collect(),
        total,
        dangling,
        acceptance: stats.map(AcceptanceSummary::from),
    }
}

/// [`compose`] over files; `stats_file` is optional.
pub fn compose_stats(instruct_file: &Path, chunks_file: &Path, stats_file: Option<&Path>) -> Result<CompositionReport> {
    let records: Vec<InstructionRecord> = jsonl::read_jsonl(instruct_file)?;
    let chunks: Vec<Chunk> = jsonl::read_jsonl(chunks_file)?;
    let stats: Option<RunStats> = match stats_file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Some(serde_json::from_str(&text)?)
        }
        None => None,
    };
    let known: std::collections::HashSet<&str> = chunks.iter().map(|c| c.chunk_id.as_str()).collect();
    Ok(compose(&records, &|id| known.contains(id), stats.as_ref()))
}

pub fn write_composition(out_dir: &Path, report: &CompositionReport) -> Result<()> {
    jsonl::write_json(&out_dir.join("composition.json"), report)?;
    jsonl::write_atomic(&out_dir.join("composition.txt"), report.to_table().as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditVerdict {
    Accurate,
    PartiallyCorrect,
    WrongFormat,
    Incorrect,
}

impl AuditVerdict {
    pub const ALL: [AuditVerdict; 4] = [
        AuditVerdict::Accurate,
        AuditVerdict::PartiallyCorrect,
        AuditVerdict::WrongFormat,
        AuditVerdict::Incorrect,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AuditVerdict::Accurate => "accurate",
            AuditVerdict::PartiallyCorrect => "partially_correct",
            AuditVerdict::WrongFormat => "wrong_format",
            AuditVerdict::Incorrect => "incorrect",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub pair_id: String,
    pub chunk_id: String,
    pub question: String,
    pub answer: String,
    pub chunk_text: String,
    #[serde(default)]
    pub verdict: Option<AuditVerdict>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditBatch {
    pub sample_size: usize,
    pub rng_seed: u64,
    pub entries: Vec<AuditEntry>,
}

impl AuditBatch {
    pub fn verdict_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut out: BTreeMap<&'static str, usize> =
            AuditVerdict::ALL.iter().map(|v| (v.as_str(), 0)).collect();
        for v in self.entries.iter().filter_map(|e| e.verdict) {
            *out.entry(v.as_str()).or_default() += 1;
        }
        out
    }
}

/// Indices of `n` of `population` items, uniform without replacement, in
/// ascending order.
pub fn sample_indices(population: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > population {
        return Err(Error::validation(format!(
            "cannot sample {n} records from a population of {population}"
        )));
    }
    let mut picked = index::sample(&mut keyed_rng(seed, "audit"), population, n).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Sample `n` records and join each with its chunk text.
pub fn sample_audit(
    records: &[InstructionRecord],
    chunk_text: &HashMap<String, String>,
    n: usize,
    seed: u64,
) -> Result<AuditBatch> {
    let entries = sample_indices(records.len(), n, seed)?
        .into_iter()
        .map(|i| {
            let r = &records[i];
            AuditEntry {
                pair_id: r.meta.pair_id.clone(),
                chunk_id: r.meta.chunk_id.clone(),
                question: r.instruction.clone(),
                answer: r.output.clone(),
                chunk_text: chunk_text.get(&r.meta.chunk_id).cloned().unwrap_or_default(),
                verdict: None,
            }
        })
        .collect();
    Ok(AuditBatch {
        sample_size: n,
        rng_seed: seed,
        entries,
    })
}

pub fn draw_audit(instruct_file: &Path, chunks_file: &Path, n: usize, seed: u64) -> Result<AuditBatch> {
    let records: Vec<InstructionRecord> = jsonl::read_jsonl(instruct_file)?;
    let chunks: Vec<Chunk> = jsonl::read_jsonl(chunks_file)?;
    let text: HashMap<String, String> = chunks.into_iter().map(|c| (c.chunk_id, c.text)).collect();
    sample_audit(&records, &text, n, seed)
}

const AUDIT_COLUMNS: [&str; 6] = ["pair_id", "chunk_id", "question", "answer", "chunk_text", "verdict"];

pub fn export_audit_sheet(batch: &AuditBatch) -> Result<String> {
    write_sheet(
        &AUDIT_COLUMNS,
        batch.entries.iter().map(|e| {
            vec![
                e.pair_id.as_str(),
                e.chunk_id.as_str(),
                e.question.as_str(),
                e.answer.as_str(),
                e.chunk_text.as_str(),
                e.verdict.map(AuditVerdict::as_str).unwrap_or(""),
            ]
        }),
    )
}

/// Apply a filled audit sheet. Every entry needs a valid verdict; all row
/// problems are reported together with their line numbers.
pub fn import_audit_sheet(batch: &AuditBatch, sheet: &str) -> Result<AuditBatch> {
    let rows = read_sheet(sheet, &["pair_id", "verdict"])?;
    let index: HashMap<&str, usize> = batch
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| (e.pair_id.as_str(), i))
        .collect();
    let mut out = batch.clone();
    let mut seen = vec![false; batch.entries.len()];
    let mut errors = Vec::new();
    for row in &rows {
        let id = row.get("pair_id");
        let Some(&i) = index.get(id) else {
            errors.push(format!("line {}: unknown pair_id `{id}`", row.line));
            continue;
        };
        let token = row.get("verdict").trim();
        match AuditVerdict::ALL.iter().find(|v| v.as_str() == token) {
            Some(v) => {
                out.entries[i].verdict = Some(*v);
                seen[i] = true;
            }
            None if token.is_empty() => errors.push(format!("line {}: missing verdict for `{id}`", row.line)),
            None => errors.push(format!("line {}: invalid verdict `{token}`", row.line)),
        }
    }
    for (e, ok) in batch.entries.iter().zip(&seen) {
        if !ok && !rows.iter().any(|r| r.get("pair_id") == e.pair_id) {
            errors.push(format!("entry `{}` has no row in the sheet", e.pair_id));
        }
    }
    match errors.is_empty() {
        true => Ok(out),
        false => Err(Error::Sheet(errors)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refinery::InstructionMeta;

    fn rec(i: usize, cat: SourceCategory) -> InstructionRecord {
        InstructionRecord {
            instruction: format!("问题{i}"),
            input: String::new(),
            output: "答案".into(),
            meta: InstructionMeta {
                pair_id: format!("d.0000.q{i:05}"),
                chunk_id: "d.0000".into(),
                source_category: cat,
            },
        }
    }

    #[test]
    fn empty_is_all_zero() {
        let r = compose(&[], &|_| true, None);
        assert_eq!(r.categories.len(), 5);
        assert_eq!(r.total, Tally::default());
        assert!(r.categories.iter().all(|c| c.tally.records == 0));
    }

    #[test]
    fn four_and_two() {
        let recs: Vec<_> = (0..6)
            .map(|i| rec(i, if i < 4 { SourceCategory::Thesis } else { SourceCategory::Report }))
            .collect();
        let r = compose(&recs, &|_| true, None);
        let count = |c| r.categories.iter().find(|row| row.category == c).unwrap().tally.records;
        assert_eq!(count(SourceCategory::Thesis), 4);
        assert_eq!(count(SourceCategory::Report), 2);
        assert_eq!(r.total.records, 6);
        assert_eq!(r.total.tokens, recs.iter().map(record_tokens).sum::<u64>());
        assert!(r.to_table().contains("thesis"));
    }

    #[test]
    fn dangling_bucket() {
        let recs = vec![rec(0, SourceCategory::Thesis)];
        let r = compose(&recs, &|_| false, None);
        assert_eq!(r.total.records, 0);
        assert_eq!(r.dangling.records, 1);
    }

    #[test]
    fn rerun_identical_minus_timestamp() {
        let recs: Vec<_> = (0..3).map(|i| rec(i, SourceCategory::Other)).collect();
        let mut a = compose(&recs, &|_| true, None);
        let mut b = compose(&recs, &|_| true, None);
        a.generated_at.clear();
        b.generated_at.clear();
        assert_eq!(a, b);
    }

    #[test]
    fn audit_sampling() {
        let recs: Vec<_> = (0..1000).map(|i| rec(i, SourceCategory::Other)).collect();
        let text = HashMap::from([("d.0000".to_string(), "原文".to_string())]);
        let a = sample_audit(&recs, &text, 200, 3).unwrap();
        let b = sample_audit(&recs, &text, 200, 3).unwrap();
        assert_eq!(a, b);
        let ids: std::collections::HashSet<_> = a.entries.iter().map(|e| &e.pair_id).collect();
        assert_eq!(ids.len(), 200);
        assert!(a.entries.iter().all(|e| e.chunk_text == "原文"));
        assert!(sample_audit(&recs, &text, 0, 3).unwrap().entries.is_empty());
        let err = sample_audit(&recs, &text, 1001, 3).unwrap_err().to_string();
        assert!(err.contains("1001") && err.contains("1000"), "{err}");
    }

    #[test]
    fn audit_sheet_round_trip() {
        let recs: Vec<_> = (0..4).map(|i| rec(i, SourceCategory::Other)).collect();
        let batch = sample_audit(&recs, &HashMap::new(), 4, 1).unwrap();
        let mut judged = batch.clone();
        for (e, v) in judged.entries.iter_mut().zip(AuditVerdict::ALL) {
            e.verdict = Some(v);
        }
        let sheet = export_audit_sheet(&judged).unwrap();
        let back = import_audit_sheet(&batch, &sheet).unwrap();
        assert_eq!(back, judged);
        assert!(back.verdict_counts().values().all(|c| *c == 1));

        match import_audit_sheet(&batch, &export_audit_sheet(&batch).unwrap()) {
            Err(Error::Sheet(e)) => assert_eq!(e.len(), 4),
            other => panic!("{other:?}"),
        }
    }
}
