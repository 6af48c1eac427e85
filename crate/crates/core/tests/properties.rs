use proptest::prelude::*;
use qaforge_core::corpus::{estimate_tokens, split_into_chunks, whole_document_chunk, ChunkBounds, DocumentRecord, SourceCategory};
use qaforge_core::jsonl::sha256_hex;
use qaforge_core::mcq_forge::{validate_item, ItemSource, McqItem, McqOption, ReviewState, TaskTag};
use qaforge_core::mixer::{build_mm_stage1, build_mm_stage2, LoadedSource, MixerConfig, SourceKind};
use qaforge_core::refinery::{dedup_questions, merge_structured, Ablation, FilterConfig, PairStatus, QAPair};
use qaforge_core::report::sample_indices;
use qaforge_core::synthesizer::{
    build_prompt, extract_marked, CandidateQuestion, GenMeta, Markers, ANSWER_PLACEHOLDERS, DEFAULT_ANSWER_TEMPLATE,
};
use qaforge_core::template::PromptTemplate;
use serde_json::json;

fn body_strategy() -> impl Strategy<Value = String> {
    prop::collection::vec(
        prop_oneof![
            Just("交通".to_string()),
            Just("信号灯".to_string()),
            Just(" lane ".to_string()),
            Just("capacity".to_string()),
            Just("。".to_string()),
            Just("! ".to_string()),
            Just("\n".to_string()),
            Just("\n\n".to_string()),
            Just("## 小节\n".to_string()),
            "[a-z]{1,12}",
        ],
        0..300,
    )
    .prop_map(|parts| parts.concat())
}

fn pair(id: String, question: String) -> QAPair {
    QAPair {
        pair_id: id,
        chunk_id: "d.0000".into(),
        question,
        answer: "一个足够长的回答内容。".into(),
        status: PairStatus::Accepted,
        reject_reason: None,
    }
}

fn source(name: &str, kind: SourceKind, n: usize) -> LoadedSource {
    let recs = (0..n).map(|i| json!({"instruction": format!("{name}-{i}"), "output": "x"})).collect();
    LoadedSource::from_records(name, kind, recs)
}

proptest! {
    #[test]
    fn chunks_rebuild_the_body(raw in body_strategy(), min in 4u64..40, span in 4u64..120) {
        let bounds = ChunkBounds::new(min, min + span).unwrap();
        let doc = DocumentRecord::new("d", SourceCategory::Other, "", &raw);
        let chunks = split_into_chunks(&doc, bounds);
        let joined: String = chunks.iter().map(|c| c.text.as_str()).collect();
        prop_assert_eq!(&joined, &doc.body);
        for c in &chunks[..chunks.len().saturating_sub(1)] {
            let t = estimate_tokens(&c.text);
            prop_assert!(t >= min && t <= min + span, "{} tokens outside bounds", t);
        }
        for (i, c) in chunks.iter().enumerate() {
            prop_assert_eq!(&c.chunk_id, &format!("d.{i:04}"));
        }
    }

    #[test]
    fn answer_prompt_keeps_chunk_and_question(raw in body_strategy(), q in "[^{}]{1,40}") {
        let doc = DocumentRecord::new("d", SourceCategory::Other, "", &raw);
        let chunk = whole_document_chunk(&doc);
        let template = PromptTemplate::new(DEFAULT_ANSWER_TEMPLATE, ANSWER_PLACEHOLDERS).unwrap();
        let question = CandidateQuestion {
            question_id: "d.0000.q01".into(),
            chunk_id: chunk.chunk_id.clone(),
            text: q.clone(),
            seeds_used: Vec::new(),
            gen_meta: GenMeta { model_id: "m".into(), temperature: 0.7 },
        };
        let prompt = build_prompt(&question, &chunk, &template, &Markers::default());
        prop_assert!(prompt.contains(&chunk.text));
        prop_assert!(prompt.contains(&q));
    }

    #[test]
    fn marked_answers_round_trip(text in "[^«»]{0,80}") {
        let m = Markers::default();
        let wrapped = format!("preamble {}{text}{} trailer", m.begin, m.end);
        prop_assert_eq!(extract_marked(&wrapped, &m), (text, true));
    }

    #[test]
    fn dedup_ignores_input_order(
        qs in prop::collection::vec("[ab路车 ]{0,12}", 0..25),
        seed in any::<u64>(),
    ) {
        let pairs: Vec<QAPair> = qs.iter().enumerate().map(|(i, q)| pair(format!("d.0000.q{i:02}"), q.clone())).collect();
        let mut shuffled = pairs.clone();
        // deterministic shuffle from the seed
        let len = shuffled.len();
        for i in (1..len).rev() {
            let j = (seed.wrapping_mul(i as u64 + 7) >> 3) as usize % (i + 1);
            shuffled.swap(i, j);
        }
        let cfg = FilterConfig::default();
        prop_assert_eq!(dedup_questions(pairs, &cfg), dedup_questions(shuffled, &cfg));
    }

    #[test]
    fn merge_keeps_exactly_the_accepted(flags in prop::collection::vec(any::<bool>(), 0..40)) {
        let pairs: Vec<QAPair> = flags.iter().enumerate().rev().map(|(i, ok)| {
            let mut p = pair(format!("d.0000.q{i:02}"), format!("问题{i}"));
            if !ok {
                p.status = PairStatus::Rejected;
            }
            p
        }).collect();
        let (records, stats) = merge_structured(&pairs, &|_| None, &Ablation::default());
        prop_assert_eq!(records.len(), flags.iter().filter(|f| **f).count());
        prop_assert_eq!(stats.accepted, records.len());
        prop_assert!(records.windows(2).all(|w| w[0].meta.pair_id < w[1].meta.pair_id));
    }

    #[test]
    fn stage1_conserves_and_digests(d in 1usize..300, g in 1usize..300, seed in any::<u64>()) {
        let cfg = MixerConfig { rng_seed: seed, ..MixerConfig::default() };
        let domain = source("dom", SourceKind::DomainText, d);
        let generic = source("gen", SourceKind::GenericText, g);
        let m = build_mm_stage1(&domain, &generic, &cfg).unwrap();
        prop_assert_eq!(m.manifest.total_records, 2 * d.min(g));
        prop_assert_eq!(m.data.iter().filter(|b| **b == b'\n').count(), m.manifest.total_records);
        prop_assert_eq!(&m.manifest.content_digest, &sha256_hex(&m.data));
        let again = build_mm_stage1(&domain, &generic, &cfg).unwrap();
        prop_assert_eq!(again.data, m.data);
    }

    #[test]
    fn stage2_adds_exactly_the_injection(d in 1usize..200, extra in 0usize..100, inject in 0usize..64) {
        let cfg = MixerConfig { generic_inject: inject, ..MixerConfig::default() };
        let domain = source("dom", SourceKind::DomainText, d);
        let generic = source("gen", SourceKind::GenericText, inject + extra);
        let m = build_mm_stage2(&domain, &generic, &cfg).unwrap();
        prop_assert_eq!(m.manifest.total_records, d + inject);
        let too_small = source("gen", SourceKind::GenericText, inject.saturating_sub(1));
        prop_assert_eq!(build_mm_stage2(&domain, &too_small, &cfg).is_err(), inject > 0);
    }

    #[test]
    fn audit_indices_are_distinct_and_sorted(pop in 0usize..500, frac in 0.0f64..=1.0, seed in any::<u64>()) {
        let n = (pop as f64 * frac) as usize;
        let idx = sample_indices(pop, n, seed).unwrap();
        prop_assert_eq!(idx.len(), n);
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(idx.iter().all(|i| *i < pop));
        prop_assert!(sample_indices(pop, pop + 1, seed).is_err());
    }

    #[test]
    fn distinct_nonempty_options_validate(
        texts in prop::collection::btree_set("[a-z路车]{1,8}", 4..=4),
        key in 0usize..4,
    ) {
        let texts: Vec<String> = texts.into_iter().collect();
        let item = McqItem {
            item_id: "i".into(),
            stem: "题干".into(),
            options: ['A', 'B', 'C', 'D'].into_iter().zip(texts).map(|(label, text)| McqOption { label, text }).collect(),
            answer_key: ['A', 'B', 'C', 'D'][key],
            source: ItemSource::Generated,
            task_tag: TaskTag::Other,
            review_state: ReviewState::Unreviewed,
            group: None,
            review_note: None,
        };
        prop_assert!(validate_item(&item).is_ok());
    }
}
