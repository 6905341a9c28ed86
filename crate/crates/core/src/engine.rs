//! The refinement loop: solve, check for consensus, turn disagreement into
//! retrieval queries, rank the round's answers into history, repeat.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{
    parse_queries, rank_history, rank_order, run_solver, score_pool, Candidate, PromptTemplates, RankedHistory,
    ScoreFunction, ScoreKind, Scorer,
};
use crate::error::{Error, Result};
use crate::item::{Answer, McqItem};
use crate::llm::{Gateway, SamplingParams, Usage};
use crate::retrieval::{
    next_document_context, ContextMode, DocumentContext, QuerySet, RetrievalBudgets, Retriever,
};

/// Everything the solver prompt of one round is built from.
#[derive(Debug, Clone, Copy)]
pub struct RoundState<'a> {
    pub round: usize,
    pub item: &'a McqItem,
    pub documents: &'a DocumentContext,
    pub history: Option<&'a RankedHistory>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VotePool {
    #[default]
    LastRound,
    AllRounds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    pub max_rounds: usize,
    pub num_candidates: usize,
    pub num_queries: usize,
    pub epsilon: f64,
    pub context_mode: ContextMode,
    pub score: ScoreKind,
    pub budgets: RetrievalBudgets,
    pub sampling: SamplingParams,
    pub vote_pool: VotePool,
    /// Required for the gold-label oracle score.
    pub analysis_mode: bool,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            max_rounds: 8,
            num_candidates: 8,
            num_queries: 4,
            epsilon: 1.0,
            context_mode: ContextMode::Dynamic,
            score: ScoreKind::Intrinsic,
            budgets: RetrievalBudgets::default(),
            sampling: SamplingParams::default(),
            vote_pool: VotePool::LastRound,
            analysis_mode: false,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_rounds == 0 || self.num_candidates == 0 || self.num_queries == 0 {
            return Err(Error::Config("max_rounds, num_candidates and num_queries must be >= 1".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::Config(format!("epsilon {} outside (0, 1]", self.epsilon)));
        }
        if self.score == ScoreKind::Oracle && !self.analysis_mode {
            return Err(Error::Config("the oracle score is only allowed in analysis mode".into()));
        }
        if self.budgets.per_query == 0 || self.budgets.global == 0 || self.budgets.per_corpus_k == 0 {
            return Err(Error::Config("retrieval budgets must be >= 1".into()));
        }
        self.sampling.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum GateDecision {
    Stop { answer: Answer, share: f64 },
    Continue { share: Option<f64> },
}

impl GateDecision {
    pub fn is_stop(&self) -> bool {
        matches!(self, GateDecision::Stop { .. })
    }
}

fn vote_counts<'a>(candidates: impl IntoIterator<Item = &'a Candidate>) -> BTreeMap<Answer, usize> {
    let mut counts = BTreeMap::new();
    for c in candidates {
        if let Some(a) = &c.answer {
            *counts.entry(a.clone()).or_insert(0) += 1;
        }
    }
    counts
}

/// Stop when the modal parsed answer holds at least `epsilon` of the parsed
/// votes and no other answer ties it. Unparsed candidates do not vote.
pub fn consensus_gate(candidates: &[Candidate], epsilon: f64) -> GateDecision {
    let counts = vote_counts(candidates);
    let voters: usize = counts.values().sum();
    if voters == 0 {
        return GateDecision::Continue { share: None };
    }
    let top = *counts.values().max().unwrap();
    let share = top as f64 / voters as f64;
    let mut leaders = counts.iter().filter(|(_, &n)| n == top);
    let leader = leaders.next().unwrap().0.clone();
    if share >= epsilon && leaders.next().is_none() {
        GateDecision::Stop { answer: leader, share }
    } else {
        GateDecision::Continue { share: Some(share) }
    }
}

/// Plurality over parsed answers. Ties go to the answer whose best
/// candidate has the highest `kind` score, then to the smallest label.
/// `None` means nothing parsed (reported as ABSTAIN).
pub fn majority_vote(candidates: &[Candidate], kind: Option<ScoreKind>) -> Option<Answer> {
    let counts = vote_counts(candidates);
    let top = *counts.values().max()?;
    let best_score = |a: &Answer| {
        kind.and_then(|k| {
            candidates
                .iter()
                .filter(|c| c.answer.as_ref() == Some(a))
                .filter_map(|c| c.scores.get(k))
                .max_by(f64::total_cmp)
        })
        .unwrap_or(f64::NEG_INFINITY)
    };
    let mut best: Option<(&Answer, f64)> = None;
    for (a, _) in counts.iter().filter(|(_, &n)| n == top) {
        let s = best_score(a);
        // BTreeMap iterates labels in ascending order; strict > keeps the smaller on ties
        if best.map_or(true, |(_, bs)| s > bs) {
            best = Some((a, s));
        }
    }
    best.map(|(a, _)| a.clone())
}

/// True when the plurality is shared, i.e. the score tie-break matters.
pub fn has_vote_tie(candidates: &[Candidate]) -> bool {
    let counts = vote_counts(candidates);
    match counts.values().max() {
        Some(&top) => counts.values().filter(|&&n| n == top).count() > 1,
        None => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Unanimity,
    EpsilonConsensus,
    #[serde(rename = "T_max_exhausted")]
    TMaxExhausted,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextAction {
    /// No next round.
    Final,
    Cleared,
    Kept,
    Replaced,
    Merged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub prompt: String,
    pub context_doc_ids: Vec<String>,
    /// In sample order.
    pub candidates: Vec<Candidate>,
    pub gate: GateDecision,
    /// Score used to rank (or tie-break) this round, after any fallback.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score_kind: Option<ScoreKind>,
    /// Sample indices in history order, when the round was ranked.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ranking: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conflict_prompt: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub queries: Option<Vec<String>>,
    pub retrieved_doc_ids: Vec<String>,
    pub context_action: ContextAction,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub item_id: String,
    pub context_mode: ContextMode,
    pub score: ScoreKind,
    pub initial_context_doc_ids: Vec<String>,
    pub rounds: Vec<RoundRecord>,
    #[serde(with = "abstain")]
    pub final_answer: Option<Answer>,
    pub termination: Termination,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub retrieval_phases: usize,
    pub usage: Usage,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_ms: Option<u64>,
}

/// `None` answers are written as the literal label `ABSTAIN`.
pub mod abstain {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::item::Answer;

    pub const LABEL: &str = "ABSTAIN";

    pub fn serialize<S: Serializer>(a: &Option<Answer>, s: S) -> Result<S::Ok, S::Error> {
        match a {
            Some(a) => s.collect_str(a),
            None => s.serialize_str(LABEL),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Answer>, D::Error> {
        let raw = String::deserialize(d)?;
        if raw == LABEL {
            return Ok(None);
        }
        Answer::parse(&raw)
            .map(Some)
            .ok_or_else(|| serde::de::Error::custom(format!("invalid answer `{raw}`")))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum TraceLine {
    Episode {
        item_id: String,
        context_mode: ContextMode,
        score: ScoreKind,
        initial_context_doc_ids: Vec<String>,
    },
    Round(Box<RoundRecord>),
    Final {
        #[serde(with = "abstain")]
        final_answer: Option<Answer>,
        termination: Termination,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
        retrieval_phases: usize,
        usage: Usage,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        warnings: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        wall_clock_ms: Option<u64>,
    },
}

impl EpisodeTrace {
    pub fn failed(&self) -> bool {
        self.termination == Termination::Failed
    }

    pub fn final_label(&self) -> String {
        self.final_answer
            .as_ref()
            .map_or_else(|| abstain::LABEL.to_string(), |a| a.to_string())
    }

    /// Drops the wall-clock reading, the only field that differs between
    /// identical runs.
    pub fn normalized(&self) -> Self {
        Self {
            wall_clock_ms: None,
            ..self.clone()
        }
    }

    /// Header line, one line per round, then a final line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        let mut push = |line: &TraceLine| -> Result<()> {
            out.push_str(&serde_json::to_string(line)?);
            out.push('\n');
            Ok(())
        };
        push(&TraceLine::Episode {
            item_id: self.item_id.clone(),
            context_mode: self.context_mode,
            score: self.score,
            initial_context_doc_ids: self.initial_context_doc_ids.clone(),
        })?;
        for r in &self.rounds {
            push(&TraceLine::Round(Box::new(r.clone())))?;
        }
        push(&TraceLine::Final {
            final_answer: self.final_answer.clone(),
            termination: self.termination,
            error: self.error.clone(),
            retrieval_phases: self.retrieval_phases,
            usage: self.usage,
            warnings: self.warnings.clone(),
            wall_clock_ms: self.wall_clock_ms,
        })?;
        Ok(out)
    }

    pub fn from_jsonl(raw: &str) -> Result<Self> {
        let mut header = None;
        let mut rounds = Vec::new();
        let mut fin = None;
        for (i, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: TraceLine =
                serde_json::from_str(line).map_err(|e| Error::record("<trace>", i + 1, e.to_string()))?;
            match parsed {
                TraceLine::Episode { .. } => header = Some(parsed),
                TraceLine::Round(r) => rounds.push(*r),
                TraceLine::Final { .. } => fin = Some(parsed),
            }
        }
        let (
            Some(TraceLine::Episode {
                item_id,
                context_mode,
                score,
                initial_context_doc_ids,
            }),
            Some(TraceLine::Final {
                final_answer,
                termination,
                error,
                retrieval_phases,
                usage,
                warnings,
                wall_clock_ms,
            }),
        ) = (header, fin)
        else {
            return Err(Error::Config("trace needs an episode line and a final line".into()));
        };
        Ok(Self {
            item_id,
            context_mode,
            score,
            initial_context_doc_ids,
            rounds,
            final_answer,
            termination,
            error,
            retrieval_phases,
            usage,
            warnings,
            wall_clock_ms,
        })
    }

    pub fn write_to_dir(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let name: String = self
            .item_id
            .chars()
            .map(|c| if c.is_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        let path = dir.join(format!("{name}.jsonl"));
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes())
            .map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Runs episodes. Cheap to share across threads.
#[derive(Clone)]
pub struct Engine {
    gateway: Gateway,
    templates: Arc<PromptTemplates>,
    retriever: Option<Retriever>,
    scorer: Option<Arc<dyn Scorer>>,
    config: LoopConfig,
}

impl Engine {
    pub fn new(gateway: Gateway, config: LoopConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            gateway,
            templates: Arc::new(PromptTemplates::default()),
            retriever: None,
            scorer: None,
            config,
        })
    }

    pub fn with_retriever(mut self, retriever: Retriever) -> Self {
        self.retriever = Some(retriever);
        self
    }

    pub fn with_scorer(mut self, scorer: Arc<dyn Scorer>) -> Self {
        self.scorer = Some(scorer);
        self
    }

    pub fn with_templates(mut self, templates: PromptTemplates) -> Self {
        self.templates = Arc::new(templates);
        self
    }

    pub fn config(&self) -> &LoopConfig {
        &self.config
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    /// Checks that every collaborator the configuration needs is attached.
    pub fn check_ready(&self) -> Result<()> {
        if self.config.context_mode != ContextMode::None && self.retriever.is_none() {
            return Err(Error::Config(format!(
                "context mode {:?} needs a corpus index",
                self.config.context_mode
            )));
        }
        if matches!(self.config.score, ScoreKind::Extrinsic | ScoreKind::Hybrid) && self.scorer.is_none() {
            return Err(Error::Config(format!("score {:?} needs a scorer endpoint", self.config.score)));
        }
        Ok(())
    }

    fn score_function(&self, item: &McqItem) -> Result<ScoreFunction> {
        Ok(match self.config.score {
            ScoreKind::Intrinsic => ScoreFunction::Intrinsic,
            ScoreKind::Extrinsic => ScoreFunction::Extrinsic(self.scorer.clone().ok_or_else(|| {
                Error::Config("extrinsic score needs a scorer".into())
            })?),
            ScoreKind::Hybrid => ScoreFunction::Hybrid(
                self.scorer
                    .clone()
                    .ok_or_else(|| Error::Config("hybrid score needs a scorer".into()))?,
            ),
            ScoreKind::Oracle => {
                if !self.config.analysis_mode {
                    return Err(Error::Config("oracle score outside analysis mode".into()));
                }
                ScoreFunction::Oracle(
                    item.gold
                        .clone()
                        .ok_or_else(|| Error::Config(format!("item {} has no gold label", item.id)))?,
                )
            }
        })
    }

    /// Score a pool, degrading to intrinsic when the verifier is down.
    fn score_with_fallback(
        &self,
        item: &McqItem,
        candidates: &mut [Candidate],
        f: &ScoreFunction,
        warnings: &mut Vec<String>,
    ) -> ScoreKind {
        match score_pool(&item.scoring_text(), candidates, f) {
            Ok(()) => f.kind(),
            Err(e) => {
                warnings.push(format!("{:?} scoring failed, using intrinsic: {e}", f.kind()));
                // intrinsic never fails at pool level
                let _ = score_pool(&item.scoring_text(), candidates, &ScoreFunction::Intrinsic);
                ScoreKind::Intrinsic
            }
        }
    }

    pub fn run_episode(&self, item: &McqItem) -> EpisodeTrace {
        let started = Instant::now();
        let cfg = &self.config;
        let mut trace = EpisodeTrace {
            item_id: item.id.clone(),
            context_mode: cfg.context_mode,
            score: cfg.score,
            initial_context_doc_ids: Vec::new(),
            rounds: Vec::new(),
            final_answer: None,
            termination: Termination::Failed,
            error: None,
            retrieval_phases: 0,
            usage: Usage::default(),
            warnings: Vec::new(),
            wall_clock_ms: None,
        };

        if let Err(e) = self.episode(item, &mut trace) {
            trace.termination = Termination::Failed;
            trace.error = Some(e.to_string());
            trace.final_answer = trace
                .rounds
                .last()
                .and_then(|r| majority_vote(&r.candidates, r.score_kind));
        }
        trace.wall_clock_ms = Some(started.elapsed().as_millis() as u64);
        trace
    }

    fn episode(&self, item: &McqItem, trace: &mut EpisodeTrace) -> Result<()> {
        self.check_ready()?;
        let cfg = &self.config;
        let score_fn = self.score_function(item)?;
        let want_logprobs = score_fn.needs_logprobs();
        let sampling = cfg.sampling.with_n(cfg.num_candidates);

        let mut initial = DocumentContext::empty(1);
        if cfg.context_mode.needs_initial() {
            let retriever = self.retriever.as_ref().unwrap();
            let r = retriever.initial_context(&item.question, cfg.budgets);
            trace.warnings.extend(r.warnings);
            initial.docs = r.docs;
            trace.initial_context_doc_ids = initial.doc_ids();
        }
        let mut documents = match cfg.context_mode {
            ContextMode::Static | ContextMode::Hybrid => initial.clone(),
            _ => DocumentContext::empty(1),
        };
        let mut history: Option<RankedHistory> = None;

        for t in 1..=cfg.max_rounds {
            let state = RoundState {
                round: t,
                item,
                documents: &documents,
                history: history.as_ref(),
            };
            let out = run_solver(&self.gateway, &self.templates, &state, &sampling, want_logprobs)?;
            trace.usage.prompt_tokens += out.usage.prompt_tokens;
            trace.usage.completion_tokens += out.usage.completion_tokens;
            let mut candidates = out.candidates;
            let gate = consensus_gate(&candidates, cfg.epsilon);

            let mut record = RoundRecord {
                round: t,
                prompt: out.prompt,
                context_doc_ids: documents.doc_ids(),
                candidates: Vec::new(),
                gate: gate.clone(),
                score_kind: None,
                ranking: None,
                conflict_prompt: None,
                queries: None,
                retrieved_doc_ids: Vec::new(),
                context_action: ContextAction::Final,
                warnings: Vec::new(),
            };

            if let GateDecision::Stop { answer, share } = gate {
                record.candidates = candidates;
                trace.rounds.push(record);
                trace.final_answer = Some(answer);
                trace.termination = if share >= 1.0 {
                    Termination::Unanimity
                } else {
                    Termination::EpsilonConsensus
                };
                return Ok(());
            }

            if t == cfg.max_rounds {
                if has_vote_tie(&candidates) {
                    record.score_kind =
                        Some(self.score_with_fallback(item, &mut candidates, &score_fn, &mut record.warnings));
                }
                record.candidates = candidates;
                trace.rounds.push(record);
                trace.final_answer = self.final_vote(&trace.rounds);
                trace.termination = Termination::TMaxExhausted;
                return Ok(());
            }

            // retrieval agent
            let mut newly = Vec::new();
            if cfg.context_mode.uses_agent_retrieval() {
                let queries = if candidates.len() >= 2 {
                    let prompt = self
                        .templates
                        .build_conflict_prompt(item, &candidates, cfg.num_queries)?;
                    let reply = self
                        .gateway
                        .complete(&prompt, &cfg.sampling.with_n(1), false)
                        .map_err(|e| Error::Round {
                            round: t,
                            source: Box::new(e),
                        })?;
                    for g in &reply {
                        trace.usage.prompt_tokens += g.usage.prompt_tokens;
                        trace.usage.completion_tokens += g.usage.completion_tokens;
                    }
                    record.conflict_prompt = Some(prompt);
                    parse_queries(&reply[0].text, cfg.num_queries, t, &item.question)
                } else {
                    QuerySet {
                        round: t,
                        queries: vec![item.question.trim().to_string()],
                    }
                };
                let retrieved = self
                    .retriever
                    .as_ref()
                    .unwrap()
                    .retrieve_round(&queries, cfg.budgets);
                trace.retrieval_phases += 1;
                record.warnings.extend(retrieved.warnings);
                record.retrieved_doc_ids = retrieved.docs.iter().map(|d| d.doc.doc_id.clone()).collect();
                record.queries = Some(queries.queries);
                newly = retrieved.docs;
            }
            let next = next_document_context(cfg.context_mode, &initial, &documents, &newly, cfg.budgets.global);
            record.context_action = match cfg.context_mode {
                ContextMode::None => ContextAction::Cleared,
                ContextMode::Static => ContextAction::Kept,
                ContextMode::Dynamic => ContextAction::Replaced,
                ContextMode::Hybrid => ContextAction::Merged,
            };
            documents = next;

            // ranking agent
            let kind = self.score_with_fallback(item, &mut candidates, &score_fn, &mut record.warnings);
            let ranked = rank_history(t, candidates.clone(), kind);
            let order = rank_order(&candidates, kind);
            for (pos, &i) in order.iter().enumerate() {
                candidates[i].display_score = ranked.entries[pos].display_score;
            }
            record.score_kind = Some(kind);
            record.ranking = Some(order);
            record.candidates = candidates;
            trace.rounds.push(record);
            history = Some(ranked);
        }
        unreachable!("loop returns on its last round")
    }

    fn final_vote(&self, rounds: &[RoundRecord]) -> Option<Answer> {
        let last = rounds.last()?;
        match self.config.vote_pool {
            VotePool::LastRound => majority_vote(&last.candidates, last.score_kind),
            VotePool::AllRounds => {
                let all: Vec<Candidate> = rounds.iter().flat_map(|r| r.candidates.iter().cloned()).collect();
                majority_vote(&all, last.score_kind)
            }
        }
    }

    /// Run many episodes, at most `parallelism` at a time. Output order
    /// follows input order.
    pub fn run_batch(&self, items: &[McqItem], parallelism: usize) -> Vec<EpisodeTrace> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism.max(1))
            .build()
            .expect("thread pool");
        pool.install(|| items.par_iter().map(|it| self.run_episode(it)).collect())
    }
}
