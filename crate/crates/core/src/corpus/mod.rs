//! Document ingestion and chunking.

mod chunker;
pub mod tokens;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::error::{Error, Result};
use crate::jsonl::sha256_hex;

pub use chunker::{
    chunk_id, is_heading, normalize_body, split_into_chunks, whole_document_chunk, ChunkBounds,
    DEFAULT_MAX_TOKENS, DEFAULT_MIN_TOKENS,
};
pub use tokens::estimate_tokens;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceCategory {
    TrafficEngineering,
    Thesis,
    Examination,
    Report,
    Other,
}

impl SourceCategory {
    pub const ALL: [SourceCategory; 5] = [
        SourceCategory::TrafficEngineering,
        SourceCategory::Thesis,
        SourceCategory::Examination,
        SourceCategory::Report,
        SourceCategory::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SourceCategory::TrafficEngineering => "traffic_engineering",
            SourceCategory::Thesis => "thesis",
            SourceCategory::Examination => "examination",
            SourceCategory::Report => "report",
            SourceCategory::Other => "other",
        }
    }
}

impl fmt::Display for SourceCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SourceCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SourceCategory::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::validation(format!("unknown source category `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub doc_id: String,
    pub source_category: SourceCategory,
    pub title: String,
    /// Normalized body text.
    pub body: String,
    pub est_tokens: u64,
}

impl DocumentRecord {
    /// Build a record from raw text; the body is normalized here.
    pub fn new(
        doc_id: impl Into<String>,
        category: SourceCategory,
        title: impl Into<String>,
        raw_body: &str,
    ) -> Self {
        let body = normalize_body(raw_body);
        let est_tokens = estimate_tokens(&body);
        Self {
            doc_id: doc_id.into(),
            source_category: category,
            title: title.into(),
            body,
            est_tokens,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryKind {
    Paragraph,
    Sentence,
    Heading,
    HardCut,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub text: String,
    pub est_tokens: u64,
    pub boundary_kind: BoundaryKind,
}

/// Document id of a chunk, pair or question id (everything before the first `.`).
pub fn doc_id_of(id: &str) -> &str {
    id.split('.').next().unwrap_or(id)
}

/// A file that could not be ingested.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestIssue {
    pub path: PathBuf,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestOutcome {
    pub documents: Vec<DocumentRecord>,
    pub errors: Vec<IngestIssue>,
    pub skipped_empty: Vec<PathBuf>,
}

/// Ingest `.txt`/`.md` files under `path` (or `path` itself if it is a file).
///
/// Files are visited in sorted path order. Without a forced category the
/// category comes from the first directory below `path`, defaulting to
/// `other`. Unreadable files are reported and skipped; empty ones are
/// skipped with a warning.
pub fn ingest(path: &Path, forced: Option<SourceCategory>) -> Result<IngestOutcome> {
    if !path.exists() {
        return Err(Error::validation(format!(
            "corpus path {} does not exist",
            path.display()
        )));
    }
    let mut outcome = IngestOutcome::default();
    let files: Vec<PathBuf> = if path.is_file() {
        vec![path.to_path_buf()]
    } else {
        let mut files = Vec::new();
        for entry in WalkDir::new(path).sort_by_file_name() {
            match entry {
                Ok(e) if e.file_type().is_file() && is_text_file(e.path()) => {
                    files.push(e.into_path())
                }
                Ok(_) => {}
                Err(e) => outcome.errors.push(IngestIssue {
                    path: e.path().map(Path::to_path_buf).unwrap_or_default(),
                    message: e.to_string(),
                }),
            }
        }
        files
    };

    for file in files {
        let raw = match std::fs::read(&file).map(String::from_utf8) {
            Ok(Ok(text)) => text,
            Ok(Err(_)) => {
                outcome.errors.push(IngestIssue {
                    path: file,
                    message: "not valid UTF-8".into(),
                });
                continue;
            }
            Err(e) => {
                outcome.errors.push(IngestIssue {
                    path: file,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let category = forced.unwrap_or_else(|| infer_category(path, &file));
        let body = normalize_body(&raw);
        if body.is_empty() {
            log::warn!("skipping empty file {}", file.display());
            outcome.skipped_empty.push(file);
            continue;
        }
        let seq = outcome.documents.len();
        let doc_id = format!("{}-{seq:05}", &sha256_hex(body.as_bytes())[..12]);
        let title = title_of(&body, &file);
        outcome
            .documents
            .push(DocumentRecord::new(doc_id, category, title, &body));
    }
    Ok(outcome)
}

fn is_text_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("txt") || e.eq_ignore_ascii_case("md"))
}

fn infer_category(root: &Path, file: &Path) -> SourceCategory {
    let rel = file.strip_prefix(root).unwrap_or(file);
    let mut parts = rel.components();
    match (parts.next(), parts.next()) {
        (Some(dir), Some(_)) => dir
            .as_os_str()
            .to_str()
            .and_then(|d| d.parse().ok())
            .unwrap_or(SourceCategory::Other),
        _ => SourceCategory::Other,
    }
}

fn title_of(body: &str, file: &Path) -> String {
    let first = body.lines().next().unwrap_or("");
    if is_heading(first) {
        return first.trim_start_matches('#').trim().chars().take(80).collect();
    }
    file.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("untitled")
        .to_string()
}

/// Chunk every document, or keep each whole when chunking is disabled.
pub fn chunk_documents(docs: &[DocumentRecord], bounds: ChunkBounds, chunking: bool) -> Vec<Chunk> {
    docs.iter()
        .flat_map(|d| match chunking {
            true => split_into_chunks(d, bounds),
            false => vec![whole_document_chunk(d)],
        })
        .collect()
}
