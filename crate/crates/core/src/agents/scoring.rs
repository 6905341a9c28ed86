//! Quality scores for candidate responses and the ranked history built from
//! them. Every score follows one convention: higher is better.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::Candidate;
use crate::error::{Error, Result};
use crate::item::Answer;
use crate::llm::TokenLogprob;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    #[default]
    Intrinsic,
    Extrinsic,
    Hybrid,
    Oracle,
}

impl std::str::FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intrinsic" => Ok(ScoreKind::Intrinsic),
            "extrinsic" => Ok(ScoreKind::Extrinsic),
            "hybrid" => Ok(ScoreKind::Hybrid),
            "oracle" => Ok(ScoreKind::Oracle),
            other => Err(Error::Config(format!("unknown score function `{other}`"))),
        }
    }
}

/// Verifier that maps a `(question, answer)` pair to a raw logit.
pub trait Scorer: Send + Sync {
    fn score(&self, question: &str, answer: &str) -> Result<f64>;
}

#[derive(Clone)]
pub enum ScoreFunction {
    Intrinsic,
    Extrinsic(Arc<dyn Scorer>),
    Hybrid(Arc<dyn Scorer>),
    /// Uses the gold label; analysis runs only.
    Oracle(Answer),
}

impl ScoreFunction {
    pub fn kind(&self) -> ScoreKind {
        match self {
            ScoreFunction::Intrinsic => ScoreKind::Intrinsic,
            ScoreFunction::Extrinsic(_) => ScoreKind::Extrinsic,
            ScoreFunction::Hybrid(_) => ScoreKind::Hybrid,
            ScoreFunction::Oracle(_) => ScoreKind::Oracle,
        }
    }

    pub fn needs_logprobs(&self) -> bool {
        matches!(self, ScoreFunction::Intrinsic | ScoreFunction::Hybrid(_))
    }
}

impl std::fmt::Debug for ScoreFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self.kind())
    }
}

/// Negative mean per-position entropy (nats). Each position's distribution
/// is the returned top alternatives renormalized to sum to one.
pub fn score_intrinsic(logprobs: &[TokenLogprob]) -> Result<f64> {
    if logprobs.is_empty() {
        return Err(Error::IntrinsicUnavailable);
    }
    let mut total = 0.0;
    for pos in logprobs {
        let alts: Vec<f64> = if pos.top_alternatives.is_empty() {
            vec![pos.logprob]
        } else {
            pos.top_alternatives.iter().map(|(_, lp)| *lp).collect()
        };
        total += entropy_of_logprobs(&alts);
    }
    // + 0.0 turns a zero-entropy -0.0 into 0.0
    Ok(-total / logprobs.len() as f64 + 0.0)
}

fn entropy_of_logprobs(lps: &[f64]) -> f64 {
    let m = lps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return 0.0;
    }
    let z: f64 = lps.iter().map(|lp| (lp - m).exp()).sum();
    let log_z = z.ln();
    lps.iter()
        .map(|lp| {
            let log_p = lp - m - log_z;
            let p = log_p.exp();
            if p > 0.0 {
                -p * log_p
            } else {
                0.0
            }
        })
        .sum()
}

/// Correct beats incorrect; within a class, shorter text wins.
pub fn score_oracle(candidate: &Candidate, gold: &Answer) -> f64 {
    let len = candidate.text.chars().count() as f64;
    let brevity = 1.0 / (1.0 + len);
    if candidate.answer.as_ref() == Some(gold) {
        1.0 + brevity
    } else {
        brevity
    }
}

fn min_max(xs: &[f64]) -> Vec<f64> {
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    xs.iter()
        .map(|x| if hi > lo { (x - lo) / (hi - lo) } else { 0.5 })
        .collect()
}

/// Pool-relative sum of min-max normalized extrinsic and intrinsic scores.
pub fn hybrid_scores(intrinsic: &[f64], extrinsic: &[f64]) -> Vec<f64> {
    assert_eq!(intrinsic.len(), extrinsic.len());
    min_max(extrinsic)
        .into_iter()
        .zip(min_max(intrinsic))
        .map(|(e, i)| e + i)
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn round_half_up(x: f64) -> u8 {
    (x + 0.5).floor().clamp(0.0, 10.0) as u8
}

/// Integer 0..=10 shown next to a history entry. Verifier logits go through
/// a sigmoid; every other score is min-max scaled over its pool.
pub fn display_score(raw: f64, kind: ScoreKind, pool: &[f64]) -> u8 {
    match kind {
        ScoreKind::Extrinsic => round_half_up(10.0 * sigmoid(raw)),
        _ => {
            let lo = pool.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = pool.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                round_half_up(10.0 * (raw - lo) / (hi - lo))
            } else {
                5
            }
        }
    }
}

/// Fill in the scores `f` needs on every candidate. Extrinsic failures are
/// returned without touching the pool so the caller can fall back.
pub fn score_pool(question: &str, candidates: &mut [Candidate], f: &ScoreFunction) -> Result<()> {
    for c in candidates.iter_mut() {
        if c.scores.intrinsic.is_none() {
            if let Some(lp) = &c.token_logprobs {
                c.scores.intrinsic = score_intrinsic(lp).ok();
            }
        }
    }
    match f {
        ScoreFunction::Intrinsic => Ok(()),
        ScoreFunction::Oracle(gold) => {
            for c in candidates.iter_mut() {
                c.scores.oracle = Some(score_oracle(c, gold));
            }
            Ok(())
        }
        ScoreFunction::Extrinsic(scorer) | ScoreFunction::Hybrid(scorer) => {
            let logits: Vec<f64> = candidates
                .par_iter()
                .map(|c| scorer.score(question, &c.text))
                .collect::<Result<_>>()?;
            for (c, l) in candidates.iter_mut().zip(logits) {
                c.scores.extrinsic = Some(l);
            }
            if matches!(f, ScoreFunction::Hybrid(_)) {
                let both: Vec<usize> = (0..candidates.len())
                    .filter(|&i| candidates[i].scores.intrinsic.is_some())
                    .collect();
                let intr: Vec<f64> = both.iter().map(|&i| candidates[i].scores.intrinsic.unwrap()).collect();
                let extr: Vec<f64> = both.iter().map(|&i| candidates[i].scores.extrinsic.unwrap()).collect();
                for c in candidates.iter_mut() {
                    c.scores.hybrid = None;
                }
                for (&i, h) in both.iter().zip(hybrid_scores(&intr, &extr)) {
                    candidates[i].scores.hybrid = Some(h);
                }
            }
            Ok(())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedHistory {
    pub round: usize,
    pub entries: Vec<Candidate>,
}

/// Sample indices in ranked order: stable descending sort on the `kind`
/// score, candidates without that score last.
pub fn rank_order(candidates: &[Candidate], kind: ScoreKind) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        match (candidates[a].scores.get(kind), candidates[b].scores.get(kind)) {
            (Some(x), Some(y)) => y.total_cmp(&x),
            (Some(_), None) => Ordering::Less,
            (None, Some(_)) => Ordering::Greater,
            (None, None) => Ordering::Equal,
        }
    });
    order
}

/// Rank a pool into history entries. Unscorable candidates get display
/// score 0.
pub fn rank_history(round: usize, candidates: Vec<Candidate>, kind: ScoreKind) -> RankedHistory {
    let order = rank_order(&candidates, kind);
    let pool: Vec<f64> = candidates.iter().filter_map(|c| c.scores.get(kind)).collect();
    let mut slots: Vec<Option<Candidate>> = candidates.into_iter().map(Some).collect();
    let entries = order
        .into_iter()
        .map(|i| {
            let mut c = slots[i].take().unwrap();
            c.display_score = Some(match c.scores.get(kind) {
                Some(raw) => display_score(raw, kind, &pool),
                None => 0,
            });
            c
        })
        .collect();
    RankedHistory { round, entries }
}

/// Client for the verifier wire contract:
/// `{"question", "answer"}` -> `{"logit": f64}`.
pub struct HttpScorer {
    url: String,
    client: reqwest::blocking::Client,
}

impl HttpScorer {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(Self { url: url.into(), client })
    }
}

#[derive(Deserialize)]
struct ScoreResponse {
    logit: f64,
}

impl Scorer for HttpScorer {
    fn score(&self, question: &str, answer: &str) -> Result<f64> {
        let resp = self
            .client
            .post(&self.url)
            .json(&json!({"question": question, "answer": answer}))
            .send()
            .map_err(|e| Error::Scorer(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(Error::Scorer(format!("http {}", resp.status())));
        }
        let parsed: ScoreResponse = resp.json().map_err(|e| Error::Scorer(e.to_string()))?;
        if !parsed.logit.is_finite() {
            return Err(Error::Scorer("non-finite logit".into()));
        }
        Ok(parsed.logit)
    }
}

type CacheKey = ([u8; 32], [u8; 32]);

/// Memoizes a scorer by `(sha256(question), sha256(answer))`.
pub struct CachedScorer<S> {
    inner: S,
    cache: Mutex<HashMap<CacheKey, f64>>,
}

impl<S: Scorer> CachedScorer<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            cache: Mutex::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.cache.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<S: Scorer> Scorer for CachedScorer<S> {
    fn score(&self, question: &str, answer: &str) -> Result<f64> {
        let key: CacheKey = (Sha256::digest(question).into(), Sha256::digest(answer).into());
        if let Some(v) = self.cache.lock().unwrap().get(&key) {
            return Ok(*v);
        }
        let v = self.inner.score(question, answer)?;
        self.cache.lock().unwrap().insert(key, v);
        Ok(v)
    }
}
