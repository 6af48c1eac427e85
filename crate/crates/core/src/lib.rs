//! Domain instruction-data pipeline for transportation question answering.
//!
//! Unlabeled documents are chunked, turned into question-answer pairs by a
//! chat-completion endpoint, filtered and merged into instruction records,
//! rewritten as single-choice evaluation items, mixed into fine-tuning
//! manifests, and scored. Every model call goes through [`gateway::Gateway`],
//! which also offers deterministic offline mocks.

pub mod corpus;
pub mod error;
pub mod eval_harness;
pub mod gateway;
pub mod jsonl;
pub mod mcq_forge;
pub mod mixer;
pub mod pipeline;
pub mod refinery;
pub mod report;
pub mod rng;
pub mod sheet;
pub mod synthesizer;
pub mod template;

pub use corpus::{Chunk, ChunkBounds, DocumentRecord, SourceCategory};
pub use error::{Error, Result};
pub use eval_harness::{EvalReport, EvalTask, ModelPrediction, TaskName};
pub use gateway::{CompletionRequest, CompletionResult, Gateway, GatewayConfig};
pub use mcq_forge::McqItem;
pub use mixer::TrainingManifest;
pub use pipeline::{run_pipeline, Run, RunConfig, StageName};
pub use refinery::{InstructionRecord, QAPair};
pub use synthesizer::RawQAPair;
