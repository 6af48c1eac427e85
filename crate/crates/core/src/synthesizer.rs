//! Question generation, prompt merging and answering.
//!
//! Per chunk: sample example questions from the seed library, ask the
//! generator for questions about the chunk, parse them, merge each question
//! with its chunk into an answer prompt, and pull the answer out from
//! between the configured markers.

use std::collections::HashMap;
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::index::sample;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{Chunk, SourceCategory};
use crate::error::{Error, Result};
use crate::gateway::synthetic::tags;
use crate::gateway::{CompletionRequest, CompletionResult, Gateway, GENERATION_TEMPERATURE};
use crate::jsonl;
use crate::rng::keyed_rng;
use crate::template::PromptTemplate;

pub const DEFAULT_BEGIN_MARKER: &str = "«ANS»";
pub const DEFAULT_END_MARKER: &str = "«/ANS»";
pub const DEFAULT_K_SEEDS: usize = 3;
pub const DEFAULT_N_QUESTIONS: usize = 3;

/// Told to the answering model on every call; answers that echo it back are
/// filtered as instruction deviations.
pub const STANDING_INSTRUCTION: &str =
    "如果无法根据所给资料回答该问题，或问题超出你的理解范围，请不要输出任何内容。";

const QUESTION_SYSTEM: &str = "你是交通运输领域的出题专家。";

pub const DEFAULT_QUESTION_TEMPLATE: &str = include_str!("../assets/question_prompt.txt");
pub const DEFAULT_ANSWER_TEMPLATE: &str = include_str!("../assets/answer_prompt.txt");
pub const DEFAULT_SEEDS: &str = include_str!("../assets/seeds.jsonl");

pub const QUESTION_PLACEHOLDERS: &[&str] = &["chunk", "examples"];
pub const ANSWER_PLACEHOLDERS: &[&str] = &["chunk", "question"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedQuestion {
    pub seed_id: String,
    pub text: String,
    pub category: SourceCategory,
}

impl SeedQuestion {
    fn validate(&self) -> Result<()> {
        let text = self.text.trim();
        if text.is_empty() || !(text.ends_with('?') || text.ends_with('？')) {
            return Err(Error::validation(format!(
                "seed {} must be a non-empty question ending in a question mark",
                self.seed_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedLibrary {
    seeds: Vec<SeedQuestion>,
}

impl SeedLibrary {
    pub fn new(seeds: Vec<SeedQuestion>) -> Result<Self> {
        if seeds.is_empty() {
            return Err(Error::validation("seed library is empty"));
        }
        seeds.iter().try_for_each(SeedQuestion::validate)?;
        Ok(Self { seeds })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(jsonl::read_jsonl(path)?)
    }

    pub fn builtin() -> Self {
        let seeds = DEFAULT_SEEDS
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).expect("bundled seeds parse"))
            .collect();
        Self::new(seeds).expect("bundled seeds are valid")
    }

    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }

    /// `k` seeds uniformly without replacement from the category subset,
    /// or from the whole library when the subset holds fewer than `k`.
    pub fn sample(
        &self,
        category: Option<SourceCategory>,
        k: usize,
        run_seed: u64,
        key: &str,
    ) -> Vec<&SeedQuestion> {
        let matched: Vec<&SeedQuestion> = match category {
            Some(c) => self.seeds.iter().filter(|s| s.category == c).collect(),
            None => Vec::new(),
        };
        let pool: Vec<&SeedQuestion> = if matched.len() >= k {
            matched
        } else {
            self.seeds.iter().collect()
        };
        let k = k.min(pool.len());
        let mut rng = keyed_rng(run_seed, key);
        let mut picked: Vec<usize> = sample(&mut rng, pool.len(), k).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| pool[i]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenMeta {
    pub model_id: String,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateQuestion {
    pub question_id: String,
    pub chunk_id: String,
    pub text: String,
    pub seeds_used: Vec<String>,
    pub gen_meta: GenMeta,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawQAPair {
    pub pair_id: String,
    pub chunk_id: String,
    pub question: String,
    pub raw_answer: String,
    pub answer_markers_found: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Markers {
    pub begin: String,
    pub end: String,
}

impl Default for Markers {
    fn default() -> Self {
        Self {
            begin: DEFAULT_BEGIN_MARKER.into(),
            end: DEFAULT_END_MARKER.into(),
        }
    }
}

impl Markers {
    pub fn new(begin: impl Into<String>, end: impl Into<String>) -> Result<Self> {
        let m = Self {
            begin: begin.into(),
            end: end.into(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.begin.is_empty() || self.end.is_empty() || self.begin == self.end {
            return Err(Error::config("answer markers must be non-empty and distinct"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub k_seeds: usize,
    pub n_questions: usize,
    pub rng_seed: u64,
    pub question_template: PromptTemplate,
    pub answer_template: PromptTemplate,
    pub markers: Markers,
}

impl SynthConfig {
    pub fn new(rng_seed: u64) -> Self {
        Self {
            k_seeds: DEFAULT_K_SEEDS,
            n_questions: DEFAULT_N_QUESTIONS,
            rng_seed,
            question_template: PromptTemplate::new(DEFAULT_QUESTION_TEMPLATE, QUESTION_PLACEHOLDERS)
                .expect("bundled question template is valid"),
            answer_template: PromptTemplate::new(DEFAULT_ANSWER_TEMPLATE, ANSWER_PLACEHOLDERS)
                .expect("bundled answer template is valid"),
            markers: Markers::default(),
        }
    }

    pub fn validate(&self, library: &SeedLibrary) -> Result<()> {
        if self.k_seeds == 0 || self.k_seeds > library.len() {
            return Err(Error::validation(format!(
                "k_seeds must be in 1..={}, got {}",
                library.len(),
                self.k_seeds
            )));
        }
        if self.n_questions == 0 {
            return Err(Error::validation("n_questions must be at least 1"));
        }
        self.markers.validate()
    }
}

/// A chunk that produced nothing because the gateway failed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthIssue {
    pub id: String,
    pub message: String,
}

fn enumeration_prefix() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"^(?:\d+\s*[.、)）:：]|[(（]\d+[)）]|[一二三四五六七八九十]+[、.．]|[-*•·]|[Qq]\d*\s*[:：.])\s*",
        )
        .expect("enumeration pattern compiles")
    })
}

/// One question per line; enumeration prefixes are trimmed and only lines
/// ending in a question mark survive. At most `n` are kept, in order.
pub fn parse_questions(output: &str, n: usize) -> Vec<String> {
    output
        .lines()
        .map(str::trim)
        .map(|l| enumeration_prefix().replace(l, "").trim().to_string())
        .filter(|l| {
            (l.ends_with('?') || l.ends_with('？'))
                && l.trim_end_matches(['?', '？']).chars().any(|c| !c.is_whitespace())
        })
        .take(n)
        .collect()
}

fn question_request(
    chunk: &Chunk,
    category: Option<SourceCategory>,
    library: &SeedLibrary,
    cfg: &SynthConfig,
) -> Result<(CompletionRequest, Vec<String>)> {
    let seeds = library.sample(category, cfg.k_seeds, cfg.rng_seed, &chunk.chunk_id);
    let examples: Vec<String> = seeds
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {}", i + 1, s.text))
        .collect();
    let n = cfg.n_questions.to_string();
    let user = cfg.question_template.render(&[
        ("chunk", &chunk.text),
        ("examples", &examples.join("\n")),
        ("n", &n),
    ]);
    let req = CompletionRequest::new(
        QUESTION_SYSTEM,
        user,
        format!("{}:{}", tags::QUESTION_GEN, chunk.chunk_id),
    )?
    .with_temperature(GENERATION_TEMPERATURE)?;
    Ok((req, seeds.iter().map(|s| s.seed_id.clone()).collect()))
}

fn questions_from_result(
    chunk: &Chunk,
    seeds_used: Vec<String>,
    res: &CompletionResult,
    cfg: &SynthConfig,
    model_id: &str,
) -> std::result::Result<Vec<CandidateQuestion>, SynthIssue> {
    if res.is_transport_error() {
        return Err(SynthIssue {
            id: chunk.chunk_id.clone(),
            message: format!("question generation failed after {} attempts", res.attempt_count),
        });
    }
    Ok(parse_questions(&res.text, cfg.n_questions)
        .into_iter()
        .enumerate()
        .map(|(i, text)| CandidateQuestion {
            question_id: format!("{}.q{:02}", chunk.chunk_id, i + 1),
            chunk_id: chunk.chunk_id.clone(),
            text,
            seeds_used: seeds_used.clone(),
            gen_meta: GenMeta {
                model_id: model_id.to_string(),
                temperature: GENERATION_TEMPERATURE,
            },
        })
        .collect())
}

/// Generate questions for one chunk. A gateway failure yields an empty list
/// plus an issue; zero parseable lines yield an empty list and no issue.
pub fn generate_questions(
    chunk: &Chunk,
    category: Option<SourceCategory>,
    library: &SeedLibrary,
    cfg: &SynthConfig,
    gateway: &Gateway,
) -> Result<(Vec<CandidateQuestion>, Option<SynthIssue>)> {
    let (req, seeds) = question_request(chunk, category, library, cfg)?;
    let res = gateway.complete(&req);
    Ok(
        match questions_from_result(chunk, seeds, &res, cfg, gateway.model_id()) {
            Ok(qs) => (qs, None),
            Err(issue) => (Vec::new(), Some(issue)),
        },
    )
}

/// Merge a question with its chunk.
pub fn build_prompt(
    question: &CandidateQuestion,
    chunk: &Chunk,
    template: &PromptTemplate,
    markers: &Markers,
) -> String {
    template.render(&[
        ("chunk", &chunk.text),
        ("question", &question.text),
        ("begin", &markers.begin),
        ("end", &markers.end),
    ])
}

/// Text strictly between the first begin marker and the next end marker;
/// otherwise the whole trimmed output with the flag cleared.
pub fn extract_marked(output: &str, markers: &Markers) -> (String, bool) {
    if let Some(b) = output.find(&markers.begin) {
        let start = b + markers.begin.len();
        if let Some(e) = output[start..].find(&markers.end) {
            return (output[start..start + e].to_string(), true);
        }
    }
    (output.trim().to_string(), false)
}

fn answer_request(prompt: String, tag: String) -> Result<CompletionRequest> {
    CompletionRequest::new(STANDING_INSTRUCTION, prompt, tag)?
        .with_temperature(GENERATION_TEMPERATURE)
}

fn answer_from_result(res: &CompletionResult, markers: &Markers) -> (String, bool) {
    if res.is_transport_error() {
        return (String::new(), false);
    }
    extract_marked(&res.text, markers)
}

/// Ask one question; returns `(raw_answer, answer_markers_found)`.
pub fn answer_question(
    prompt: &str,
    gateway: &Gateway,
    markers: &Markers,
    tag: &str,
) -> Result<(String, bool)> {
    let req = answer_request(prompt.to_string(), format!("{}:{tag}", tags::ANSWER))?;
    Ok(answer_from_result(&gateway.complete(&req), markers))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SynthOutput {
    pub questions: Vec<CandidateQuestion>,
    pub pairs: Vec<RawQAPair>,
    pub issues: Vec<SynthIssue>,
}

/// Run question generation and answering for every chunk.
///
/// Both phases go through `complete_batch`, so concurrency is bounded by the
/// gateway; outputs are sorted by id and independent of worker count.
pub fn synthesize(
    chunks: &[Chunk],
    categories: &HashMap<String, SourceCategory>,
    library: &SeedLibrary,
    cfg: &SynthConfig,
    gateway: &Gateway,
) -> Result<SynthOutput> {
    cfg.validate(library)?;
    let mut out = SynthOutput::default();

    let mut requests = Vec::with_capacity(chunks.len());
    let mut seeds_used = Vec::with_capacity(chunks.len());
    for chunk in chunks {
        let category = categories.get(&chunk.doc_id).copied();
        let (req, seeds) = question_request(chunk, category, library, cfg)?;
        requests.push(req);
        seeds_used.push(seeds);
    }
    let results = gateway.complete_batch(&requests);
    for ((chunk, seeds), res) in chunks.iter().zip(seeds_used).zip(&results) {
        match questions_from_result(chunk, seeds, res, cfg, gateway.model_id()) {
            Ok(qs) => out.questions.extend(qs),
            Err(issue) => out.issues.push(issue),
        }
    }
    out.questions.sort_by(|a, b| a.question_id.cmp(&b.question_id));

    let by_id: HashMap<&str, &Chunk> = chunks.iter().map(|c| (c.chunk_id.as_str(), c)).collect();
    let mut answer_reqs = Vec::with_capacity(out.questions.len());
    for q in &out.questions {
        let chunk = by_id[q.chunk_id.as_str()];
        let prompt = build_prompt(q, chunk, &cfg.answer_template, &cfg.markers);
        answer_reqs.push(answer_request(
            prompt,
            format!("{}:{}", tags::ANSWER, q.question_id),
        )?);
    }
    let answers = gateway.complete_batch(&answer_reqs);
    for (q, res) in out.questions.iter().zip(&answers) {
        if res.is_transport_error() {
            out.issues.push(SynthIssue {
                id: q.question_id.clone(),
                message: format!("answering failed after {} attempts", res.attempt_count),
            });
        }
        let (raw_answer, found) = answer_from_result(res, &cfg.markers);
        out.pairs.push(RawQAPair {
            pair_id: q.question_id.clone(),
            chunk_id: q.chunk_id.clone(),
            question: q.text.clone(),
            raw_answer,
            answer_markers_found: found,
        });
    }
    out.pairs.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
    out.issues.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::corpus::BoundaryKind;
    use crate::gateway::{FaultPlan, GatewayConfig, MockBackend, MockReply, Responder};

    fn chunk(id: &str, text: &str) -> Chunk {
        Chunk {
            chunk_id: id.into(),
            doc_id: crate::corpus::doc_id_of(id).into(),
            text: text.into(),
            est_tokens: crate::corpus::estimate_tokens(text),
            boundary_kind: BoundaryKind::Paragraph,
        }
    }

    fn gateway(f: impl Fn(&CompletionRequest) -> MockReply + Send + Sync + 'static) -> Gateway {
        let mut cfg = GatewayConfig::new("mock:echo");
        cfg.backoff_ms = 1;
        Gateway::new(cfg, Arc::new(MockBackend::new(Responder::func(f)))).unwrap()
    }

    #[test]
    fn parse_two_questions() {
        assert_eq!(parse_questions("Q1?\nQ2?", 3), vec!["Q1?", "Q2?"]);
    }

    #[test]
    fn parse_truncates_in_order() {
        let out = "1. 甲？\n2. 乙？\n以下不是问题\n3) 丙?\n一、丁？\n- 戊？";
        assert_eq!(parse_questions(out, 3), vec!["甲？", "乙？", "丙?"]);
        assert_eq!(parse_questions(out, 10).len(), 5);
        assert_eq!(parse_questions("Q: what?\n？\n  \n", 5), vec!["what?"]);
    }

    #[test]
    fn generate_questions_from_mock() {
        let gw = gateway(|_| MockReply::text("Q1?\nQ2?"));
        let lib = SeedLibrary::builtin();
        let cfg = SynthConfig::new(1);
        let c = chunk("d-00000.0000", "资料");
        let (qs, issue) = generate_questions(&c, None, &lib, &cfg, &gw).unwrap();
        assert!(issue.is_none());
        assert_eq!(qs.len(), 2);
        assert_eq!(qs[0].question_id, "d-00000.0000.q01");
        assert_eq!(qs[1].text, "Q2?");
        assert_eq!(qs[0].seeds_used.len(), 3);
    }

    #[test]
    fn five_lines_keep_first_three() {
        let gw = gateway(|_| MockReply::text("a?\nb?\nc?\nd?\ne?"));
        let cfg = SynthConfig::new(1);
        let (qs, _) = generate_questions(
            &chunk("d-1.0000", "x"),
            None,
            &SeedLibrary::builtin(),
            &cfg,
            &gw,
        )
        .unwrap();
        let texts: Vec<&str> = qs.iter().map(|q| q.text.as_str()).collect();
        assert_eq!(texts, vec!["a?", "b?", "c?"]);
    }

    #[test]
    fn seeding_is_replayable_and_category_filtered() {
        let lib = SeedLibrary::builtin();
        let a = lib.sample(Some(SourceCategory::Examination), 3, 9, "c1");
        let b = lib.sample(Some(SourceCategory::Examination), 3, 9, "c1");
        assert_eq!(a, b);
        assert!(a.iter().all(|s| s.category == SourceCategory::Examination));
        // report has only two seeds: fall back to the whole library
        let r = lib.sample(Some(SourceCategory::Report), 3, 9, "c1");
        assert_eq!(r.len(), 3);
        let ids: std::collections::HashSet<_> = r.iter().map(|s| &s.seed_id).collect();
        assert_eq!(ids.len(), 3);
    }

    #[test]
    fn prompt_contains_chunk_and_k_examples() {
        let seen = Arc::new(std::sync::Mutex::new(String::new()));
        let sink = seen.clone();
        let gw = gateway(move |r| {
            *sink.lock().unwrap() = r.user_text().to_string();
            MockReply::text("")
        });
        let lib = SeedLibrary::builtin();
        let mut cfg = SynthConfig::new(3);
        cfg.k_seeds = 2;
        let c = chunk("d-1.0000", "独特的资料文本");
        let (qs, issue) = generate_questions(&c, Some(SourceCategory::Thesis), &lib, &cfg, &gw).unwrap();
        assert!(qs.is_empty() && issue.is_none());
        let prompt = seen.lock().unwrap().clone();
        assert!(prompt.contains("独特的资料文本"));
        let thesis_seeds = ["s005", "s006", "s007"];
        let shown = lib
            .seeds
            .iter()
            .filter(|s| thesis_seeds.contains(&s.seed_id.as_str()) && prompt.contains(&s.text))
            .count();
        assert_eq!(shown, 2);
    }

    #[test]
    fn gateway_failure_is_an_issue() {
        let mut cfg = GatewayConfig::new("mock:echo");
        cfg.backoff_ms = 1;
        cfg.max_retries = 0;
        let mock = MockBackend::echo().with_faults(FaultPlan::AlwaysTimeout);
        let gw = Gateway::new(cfg, Arc::new(mock)).unwrap();
        let (qs, issue) = generate_questions(
            &chunk("d-1.0000", "x"),
            None,
            &SeedLibrary::builtin(),
            &SynthConfig::new(0),
            &gw,
        )
        .unwrap();
        assert!(qs.is_empty());
        assert_eq!(issue.unwrap().id, "d-1.0000");
    }

    #[test]
    fn marker_extraction() {
        let m = Markers::default();
        assert_eq!(extract_marked("«ANS»42«/ANS»", &m), ("42".into(), true));
        assert_eq!(extract_marked(" 42 \n", &m), ("42".into(), false));
        assert_eq!(
            extract_marked("«ANS»a«/ANS»junk«ANS»b«/ANS»", &m),
            ("a".into(), true)
        );
        assert_eq!(extract_marked("«/ANS»x«ANS»", &m), ("«/ANS»x«ANS»".into(), false));
        assert!(Markers::new("x", "x").is_err());
        assert!(Markers::new("", "y").is_err());
    }

    #[test]
    fn answer_question_via_gateway() {
        let gw = gateway(|_| MockReply::text("«ANS»42«/ANS»"));
        let got = answer_question("p", &gw, &Markers::default(), "x").unwrap();
        assert_eq!(got, ("42".to_string(), true));
    }

    #[test]
    fn seed_validation() {
        let bad = SeedQuestion {
            seed_id: "x".into(),
            text: "not a question".into(),
            category: SourceCategory::Other,
        };
        assert!(SeedLibrary::new(vec![bad]).is_err());
        assert!(SeedLibrary::new(vec![]).is_err());
    }

    #[test]
    fn synthesize_is_worker_count_insensitive() {
        let chunks: Vec<Chunk> = (0..12)
            .map(|i| chunk(&format!("d-{i:05}.0000"), &format!("第{i}段资料。红灯停，绿灯行。")))
            .collect();
        let lib = SeedLibrary::builtin();
        let cfg = SynthConfig::new(4);
        let run = |workers: usize| {
            let mut gcfg = GatewayConfig::new("mock:synthetic:11");
            gcfg.max_in_flight = workers;
            let gw = Gateway::from_config(gcfg).unwrap();
            synthesize(&chunks, &HashMap::new(), &lib, &cfg, &gw).unwrap()
        };
        let a = run(1);
        let b = run(8);
        assert_eq!(a, b);
        assert!(!a.pairs.is_empty());
        let ids: std::collections::HashSet<_> = chunks.iter().map(|c| &c.chunk_id).collect();
        assert!(a.pairs.iter().all(|p| ids.contains(&p.chunk_id)));
    }
}
