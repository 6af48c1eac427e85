//! A seeded stand-in for the generator model.
//!
//! It recognises the pipeline's request kinds by tag prefix and produces
//! plausible, deliberately imperfect output derived from the prompt: some
//! refusals, empty answers, missing markers, malformed multiple-choice
//! blocks and near-duplicate questions, so every filter path is exercised
//! offline. All choices come from an RNG keyed on the prompt hash.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::mock::MockReply;
use super::CompletionRequest;
use crate::rng::keyed_rng;

/// Request-tag prefixes, `"<prefix>:<id>"`.
pub mod tags {
    pub const QUESTION_GEN: &str = "qgen";
    pub const ANSWER: &str = "answer";
    pub const MCQ: &str = "mcq";
    pub const EVAL: &str = "eval";
}

#[derive(Debug, Clone)]
pub struct SyntheticModel {
    seed: u64,
    begin_marker: String,
    end_marker: String,
}

impl SyntheticModel {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            begin_marker: crate::synthesizer::DEFAULT_BEGIN_MARKER.to_string(),
            end_marker: crate::synthesizer::DEFAULT_END_MARKER.to_string(),
        }
    }

    pub fn with_markers(mut self, begin: &str, end: &str) -> Self {
        self.begin_marker = begin.to_string();
        self.end_marker = end.to_string();
        self
    }

    pub fn respond(&self, req: &CompletionRequest) -> MockReply {
        let mut rng = keyed_rng(self.seed, &req.prompt_hash());
        let kind = req.request_tag().split(':').next().unwrap_or("");
        let text = match kind {
            tags::QUESTION_GEN => self.questions(req.user_text(), &mut rng),
            tags::ANSWER => self.answer(req.user_text(), &mut rng),
            tags::MCQ => self.mcq(req.user_text(), &mut rng),
            tags::EVAL => self.eval_answer(&mut rng),
            _ => String::new(),
        };
        MockReply::text(text)
    }

    fn questions(&self, prompt: &str, rng: &mut ChaCha8Rng) -> String {
        let chunk = between(prompt, "<chunk>", "</chunk>").unwrap_or(prompt);
        let sentences = sentences(chunk);
        if sentences.is_empty() {
            return "资料内容不足。".to_string();
        }
        let n = rng.gen_range(1..=4);
        let mut lines = Vec::new();
        if rng.gen_bool(0.3) {
            lines.push("以下是根据资料提出的问题：".to_string());
        }
        for i in 0..n {
            let s = sentences.choose(rng).expect("non-empty");
            lines.push(format!("{}. {}", i + 1, question_about(topic(s), rng)));
        }
        if rng.gen_bool(0.15) {
            // a repeated question, as a model without history would produce
            let dup = lines.last().cloned().unwrap_or_default();
            lines.push(dup);
        }
        lines.join("\n")
    }

    fn answer(&self, prompt: &str, rng: &mut ChaCha8Rng) -> String {
        let chunk = between(prompt, "<chunk>", "</chunk>").unwrap_or(prompt);
        let question = between(prompt, "<question>", "</question>").unwrap_or("");
        let sentences = sentences(chunk);
        let body = match sentences.choose(rng) {
            Some(s) if rng.gen_bool(0.5) && sentences.len() > 1 => {
                let other = sentences.choose(rng).expect("non-empty");
                if other == s {
                    s.to_string()
                } else {
                    format!("{s}{other}")
                }
            }
            Some(s) => s.to_string(),
            None => String::new(),
        };
        let wrap = |t: &str| format!("{}{}{}", self.begin_marker, t, self.end_marker);
        match rng.gen_range(0..100) {
            0..=5 => String::new(),
            6..=11 => wrap("抱歉，根据所给资料无法回答该问题。"),
            12..=15 => wrap("是的。"),
            16..=19 if !question.is_empty() => wrap(&format!("{question}{body}")),
            20..=25 => body,
            _ => wrap(&body),
        }
    }

    fn mcq(&self, prompt: &str, rng: &mut ChaCha8Rng) -> String {
        let question = between(prompt, "<question>", "</question>").unwrap_or("请选择正确的说法");
        let answer = between(prompt, "<answer>", "</answer>").unwrap_or("");
        let core = crate::mcq_forge::answer_core(answer);
        let correct = if core.is_empty() { "以上说法均正确".to_string() } else { core };
        let mut options = vec![
            correct.clone(),
            format!("{correct}（仅在夜间适用）"),
            format!("与“{correct}”相反的做法"),
            "资料中未提及相关内容".to_string(),
        ];
        let mut order: Vec<usize> = (0..4).collect();
        order.shuffle(rng);
        let key_pos = order.iter().position(|&i| i == 0).expect("correct option present");
        options = order.iter().map(|&i| options[i].clone()).collect();
        let labels = ['A', 'B', 'C', 'D'];
        let roll = rng.gen_range(0..100);
        let mut lines = vec![format!("Stem: {question}")];
        match roll {
            0..=9 => return "我认为这道题可以这样出：请判断下列说法。".to_string(),
            10..=19 => {
                for (l, o) in labels.iter().zip(&options).take(3) {
                    lines.push(format!("{l}. {o}"));
                }
            }
            20..=24 => {
                for l in labels {
                    lines.push(format!("{l}. {}", options[0]));
                }
            }
            _ => {
                for (l, o) in labels.iter().zip(&options) {
                    lines.push(format!("{l}. {o}"));
                }
            }
        }
        lines.push(format!("Key: {}", labels[key_pos]));
        lines.join("\n")
    }

    fn eval_answer(&self, rng: &mut ChaCha8Rng) -> String {
        let label = ['A', 'B', 'C', 'D'][rng.gen_range(0..4)];
        match rng.gen_range(0..3) {
            0 => label.to_string(),
            1 => format!("答案是{label}"),
            _ => format!("({label})"),
        }
    }
}

fn between<'a>(text: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let start = text.find(open)? + open.len();
    let end = text[start..].find(close)? + start;
    Some(text[start..end].trim())
}

fn sentences(text: &str) -> Vec<&str> {
    text.split_inclusive(['。', '！', '？', '!', '?', '；', '\n'])
        .map(str::trim)
        .filter(|s| s.chars().count() >= 4 && !s.starts_with('#'))
        .collect()
}

fn topic(sentence: &str) -> String {
    let clause = sentence
        .split(['，', ',', '：', ':', '。', '！', '？', '!', '?', '；'])
        .map(str::trim)
        .find(|c| !c.is_empty())
        .unwrap_or(sentence);
    clause.chars().take(16).collect()
}

fn question_about(topic: String, rng: &mut ChaCha8Rng) -> String {
    let latin = topic.chars().all(|c| c.is_ascii());
    if latin {
        match rng.gen_range(0..2) {
            0 => format!("What does the text say about {topic}?"),
            _ => format!("Why is {topic} important?"),
        }
    } else {
        match rng.gen_range(0..3) {
            0 => format!("{topic}的含义是什么？"),
            1 => format!("关于{topic}，资料中是如何说明的？"),
            _ => format!("为什么说{topic}？"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_prompt_same_reply() {
        let m = SyntheticModel::new(5);
        let req = CompletionRequest::new("", "<chunk>\n红灯停，绿灯行。黄灯亮时应减速。\n</chunk>", "qgen:x")
            .unwrap();
        assert_eq!(m.respond(&req), m.respond(&req));
        assert!(!m.respond(&req).text.is_empty());
    }

    #[test]
    fn unknown_kinds_get_empty_text() {
        let m = SyntheticModel::new(0);
        let req = CompletionRequest::new("", "hello", "other:1").unwrap();
        assert_eq!(m.respond(&req).text, "");
    }

    #[test]
    fn helpers() {
        assert_eq!(between("a<x> b </x>c", "<x>", "</x>"), Some("b"));
        assert_eq!(sentences("甲乙丙丁。短。戊己庚辛！"), vec!["甲乙丙丁。", "戊己庚辛！"]);
        assert_eq!(topic("红灯停，绿灯行。"), "红灯停");
    }
}
