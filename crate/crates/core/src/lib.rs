//! Multi-round agentic retrieval-augmented answering for multiple-choice
//! questions: BM25 fan-out retrieval, sampled solver rounds, consensus
//! gating, conflict-driven query generation and ranked answer history.

pub mod agents;
pub mod config;
pub mod engine;
pub mod error;
pub mod eval;
pub mod index;
pub mod item;
pub mod llm;
pub mod retrieval;

pub use engine::{consensus_gate, majority_vote, Engine, EpisodeTrace, GateDecision, LoopConfig, Termination};
pub use error::{Error, Result};
pub use index::{Document, InvertedIndex};
pub use item::{Answer, AnswerMode, McqItem};
