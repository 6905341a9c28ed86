//! The solver, retrieval-query and ranking agents. Everything here is prompt
//! assembly, output parsing or scoring; transport lives in [`crate::llm`].

mod parse;
mod prompts;
mod scoring;
pub mod template;

use serde::{Deserialize, Serialize};

use crate::engine::RoundState;
use crate::error::{Error, Result};
use crate::llm::{Gateway, SamplingParams, TokenLogprob, Usage};

pub use parse::{parse_answer, parse_queries};
pub use prompts::{render_documents, PromptTemplates, DOC_TOKEN_LIMIT};
pub use scoring::{
    display_score, hybrid_scores, rank_history, rank_order, score_intrinsic, score_oracle, score_pool, CachedScorer,
    HttpScorer, RankedHistory, ScoreFunction, ScoreKind, Scorer,
};

use crate::item::Answer;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intrinsic: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extrinsic: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hybrid: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<f64>,
}

impl Scores {
    pub fn get(&self, kind: ScoreKind) -> Option<f64> {
        match kind {
            ScoreKind::Intrinsic => self.intrinsic,
            ScoreKind::Extrinsic => self.extrinsic,
            ScoreKind::Hybrid => self.hybrid,
            ScoreKind::Oracle => self.oracle,
        }
    }

    pub fn set(&mut self, kind: ScoreKind, v: Option<f64>) {
        match kind {
            ScoreKind::Intrinsic => self.intrinsic = v,
            ScoreKind::Extrinsic => self.extrinsic = v,
            ScoreKind::Hybrid => self.hybrid = v,
            ScoreKind::Oracle => self.oracle = v,
        }
    }
}

/// One sampled response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub answer: Option<Answer>,
    #[serde(skip)]
    pub token_logprobs: Option<Vec<TokenLogprob>>,
    #[serde(default)]
    pub scores: Scores,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub display_score: Option<u8>,
}

impl Candidate {
    pub fn new(text: impl Into<String>, answer: Option<Answer>) -> Self {
        Self {
            text: text.into(),
            answer,
            token_logprobs: None,
            scores: Scores::default(),
            display_score: None,
        }
    }
}

pub struct SolverOutput {
    pub prompt: String,
    pub candidates: Vec<Candidate>,
    pub usage: Usage,
}

/// Sample `params.n` solver responses for the current round state.
pub fn run_solver(
    gateway: &Gateway,
    templates: &PromptTemplates,
    state: &RoundState<'_>,
    params: &SamplingParams,
    want_logprobs: bool,
) -> Result<SolverOutput> {
    let prompt = templates.build_solver_prompt(state)?;
    let labels = state.item.labels();
    let generations = gateway
        .complete(&prompt, params, want_logprobs)
        .map_err(|e| Error::Round {
            round: state.round,
            source: Box::new(e),
        })?;
    let mut usage = Usage::default();
    let candidates = generations
        .into_iter()
        .map(|g| {
            usage.prompt_tokens += g.usage.prompt_tokens;
            usage.completion_tokens += g.usage.completion_tokens;
            let answer = parse_answer(&g.text, &labels, state.item.answer_mode);
            let mut c = Candidate::new(g.text, answer);
            if let Some(lp) = g.token_logprobs {
                c.scores.intrinsic = score_intrinsic(&lp).ok();
                c.token_logprobs = Some(lp);
            }
            c
        })
        .collect();
    Ok(SolverOutput {
        prompt,
        candidates,
        usage,
    })
}
