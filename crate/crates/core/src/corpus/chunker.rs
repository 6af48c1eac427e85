//! Bounded, boundary-aware chunking.
//!
//! The document is scanned left to right. From the current start, every
//! candidate cut whose chunk would hold between `min_tokens` and `max_tokens`
//! is considered, and the strongest boundary wins (heading, then paragraph,
//! then sentence); among equals the latest one wins, which packs as many
//! whole units as fit. With no natural boundary in range the chunk is cut at
//! the last word gap, or failing that the last character, that fits.
//!
//! Separators stay attached to the end of the preceding chunk, so joining
//! the chunks in order reproduces the normalized body byte for byte.

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;

use super::tokens::{estimate_tokens, TokenCounter};
use super::{BoundaryKind, Chunk, DocumentRecord};
use crate::error::{Error, Result};

pub const DEFAULT_MIN_TOKENS: u64 = 64;
pub const DEFAULT_MAX_TOKENS: u64 = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Strength {
    Char,
    Word,
    Sentence,
    Paragraph,
    Heading,
}

impl Strength {
    fn kind(self) -> BoundaryKind {
        match self {
            Strength::Heading => BoundaryKind::Heading,
            Strength::Paragraph => BoundaryKind::Paragraph,
            Strength::Sentence => BoundaryKind::Sentence,
            Strength::Word | Strength::Char => BoundaryKind::HardCut,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkBounds {
    pub min_tokens: u64,
    pub max_tokens: u64,
}

impl Default for ChunkBounds {
    fn default() -> Self {
        Self {
            min_tokens: DEFAULT_MIN_TOKENS,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }
}

impl ChunkBounds {
    pub fn new(min_tokens: u64, max_tokens: u64) -> Result<Self> {
        if min_tokens == 0 || min_tokens >= max_tokens {
            return Err(Error::validation(format!(
                "chunk bounds need 0 < min < max, got min={min_tokens} max={max_tokens}"
            )));
        }
        Ok(Self {
            min_tokens,
            max_tokens,
        })
    }
}

/// Collapse blank-line runs, strip trailing whitespace, unify line endings
/// and drop leading/trailing blank lines. Heading lines are kept as-is.
pub fn normalize_body(raw: &str) -> String {
    let unified = raw.replace("\r\n", "\n").replace('\r', "\n");
    let mut out = String::with_capacity(unified.len());
    let mut pending_blank = false;
    for line in unified.split('\n') {
        let line = line.trim_end();
        if line.is_empty() {
            pending_blank = !out.is_empty();
            continue;
        }
        if !out.is_empty() {
            out.push('\n');
            if pending_blank {
                out.push('\n');
            }
        }
        pending_blank = false;
        out.push_str(line);
    }
    out
}

pub fn is_heading(line: &str) -> bool {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| {
        Regex::new(
            r"^(?:#{1,6}\s+\S|第[一二三四五六七八九十百千零〇0-9]+[章节篇部]|[一二三四五六七八九十]+、)",
        )
        .expect("heading pattern compiles")
    });
    re.is_match(line.trim_start())
}

fn is_sentence_end(c: char) -> bool {
    matches!(c, '。' | '！' | '？' | '；' | '!' | '?' | '.' | ';' | '…')
}

fn is_closer(c: char) -> bool {
    matches!(c, '”' | '’' | '"' | '\'' | ')' | '）' | '」' | '』' | '】')
}

/// Natural cut positions (byte offsets) in a normalized body.
fn natural_boundaries(body: &str) -> HashMap<usize, Strength> {
    let mut out = HashMap::new();
    let bytes = body.as_bytes();
    let mut line_start = 0;
    for line in body.split('\n') {
        if line_start > 0 && !line.is_empty() {
            let strength = if is_heading(line) {
                Strength::Heading
            } else if line_start >= 2 && bytes[line_start - 2] == b'\n' {
                Strength::Paragraph
            } else {
                Strength::Sentence
            };
            out.insert(line_start, strength);
        }
        sentence_boundaries(line, line_start, &mut out);
        line_start += line.len() + 1;
    }
    out
}

fn sentence_boundaries(line: &str, offset: usize, out: &mut HashMap<usize, Strength>) {
    let chars: Vec<(usize, char)> = line.char_indices().collect();
    let mut i = 0;
    while i < chars.len() {
        let (_, c) = chars[i];
        i += 1;
        if !is_sentence_end(c) {
            continue;
        }
        while i < chars.len() && (is_sentence_end(chars[i].1) || is_closer(chars[i].1)) {
            i += 1;
        }
        let ascii_stop = c.is_ascii();
        let mut j = i;
        while j < chars.len() && chars[j].1.is_whitespace() {
            j += 1;
        }
        // a Latin stop only ends a sentence when followed by whitespace
        if ascii_stop && j == i {
            continue;
        }
        if j < chars.len() {
            out.entry(offset + chars[j].0).or_insert(Strength::Sentence);
        }
        i = j;
    }
}

/// Split a document into chunks. See the module docs for the cut rule.
pub fn split_into_chunks(doc: &DocumentRecord, bounds: ChunkBounds) -> Vec<Chunk> {
    let body = doc.body.as_str();
    let whole = estimate_tokens(body);
    if whole < bounds.min_tokens {
        return vec![make_chunk(doc, 0, body, BoundaryKind::HardCut)];
    }
    let natural = natural_boundaries(body);
    let mut chunks = Vec::new();
    let mut start = 0;
    while start < body.len() {
        match next_cut(body, start, &natural, bounds) {
            None => {
                let idx = chunks.len();
                chunks.push(make_chunk(doc, idx, &body[start..], BoundaryKind::Paragraph));
                break;
            }
            Some((cut, strength)) => {
                let idx = chunks.len();
                chunks.push(make_chunk(doc, idx, &body[start..cut], strength.kind()));
                start = cut;
            }
        }
    }
    chunks
}

/// The cut for a chunk starting at `start`, or `None` when the rest fits.
fn next_cut(
    body: &str,
    start: usize,
    natural: &HashMap<usize, Strength>,
    bounds: ChunkBounds,
) -> Option<(usize, Strength)> {
    let mut counter = TokenCounter::default();
    let mut best: Option<(Strength, usize)> = None;
    let mut last_fit = start;
    let mut prev: Option<char> = None;
    for (i, c) in body[start..].char_indices() {
        let pos = start + i;
        if pos > start {
            let tokens = counter.tokens();
            if tokens <= bounds.max_tokens {
                last_fit = pos;
                if tokens >= bounds.min_tokens {
                    let strength = natural.get(&pos).copied().unwrap_or(
                        if prev.is_some_and(char::is_whitespace) && !c.is_whitespace() {
                            Strength::Word
                        } else {
                            Strength::Char
                        },
                    );
                    if best.map_or(true, |(s, _)| strength >= s) {
                        best = Some((strength, pos));
                    }
                }
            }
        }
        counter.push(c);
        prev = Some(c);
        if counter.tokens() > bounds.max_tokens {
            return Some(match best {
                Some((strength, pos)) => (pos, strength),
                None => (last_fit, Strength::Char),
            });
        }
    }
    None
}

fn make_chunk(doc: &DocumentRecord, index: usize, text: &str, kind: BoundaryKind) -> Chunk {
    Chunk {
        chunk_id: chunk_id(&doc.doc_id, index),
        doc_id: doc.doc_id.clone(),
        text: text.to_string(),
        est_tokens: estimate_tokens(text),
        boundary_kind: kind,
    }
}

pub fn chunk_id(doc_id: &str, index: usize) -> String {
    format!("{doc_id}.{index:04}")
}

/// Whole document as one chunk (the chunking ablation).
pub fn whole_document_chunk(doc: &DocumentRecord) -> Chunk {
    make_chunk(doc, 0, &doc.body, BoundaryKind::Paragraph)
}
