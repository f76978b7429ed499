//! Inference-time unlearning guardrail.
//!
//! A query is answered by the base model, the draft is used to retrieve the
//! relevant unlearning targets, a corrector judges whether the draft leaks
//! any of them and rewrites it only when it does. Alongside the gateway this
//! crate carries the corrector's training objectives, the training-data
//! builder and the evaluation metrics.

pub mod backend;
pub mod correction;
pub mod dataset;
pub mod evaluation;
pub mod exclusions;
pub mod gradcheck;
pub mod numeric;
pub mod overlap;
pub mod retrieval;
pub mod store;
pub mod training;

pub use backend::{
    Backend, BackendError, ChatPrompt, GenerationParams, JudgeScores, JudgeTokens, Route,
};
pub use correction::{
    Branch, CorrectionOutcome, CorrectionPipeline, PipelineConfig, PipelineError,
};
pub use exclusions::ExclusionSet;
pub use retrieval::{tokenize, Bm25Index, Bm25Params, RetrievalResult};
pub use store::{ExclusionRecord, ExclusionStore, RecordDraft, StoreError, StoreVersion};
