//! Per-round retrieval: fan a query out over every sub-corpus, rerank the
//! pooled hits, enforce document budgets, and roll the document context
//! forward according to the run's context mode.

use std::collections::HashSet;
use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::index::{Document, InvertedIndex, SearchHit};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySet {
    pub round: usize,
    pub queries: Vec<String>,
}

impl QuerySet {
    pub fn new(round: usize, queries: Vec<String>, k_max: usize) -> Result<Self> {
        if queries.is_empty() || queries.len() > k_max {
            return Err(Error::Config(format!(
                "query set must hold 1..={k_max} queries, got {}",
                queries.len()
            )));
        }
        if queries.iter().any(|q| q.trim().is_empty()) {
            return Err(Error::Config("empty retrieval query".into()));
        }
        Ok(Self { round, queries })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    None,
    Static,
    #[default]
    Dynamic,
    Hybrid,
}

impl ContextMode {
    /// Whether the mode needs a context built from the raw question up front.
    pub fn needs_initial(self) -> bool {
        matches!(self, ContextMode::Static | ContextMode::Hybrid)
    }

    /// Whether retrieval-agent output can ever reach the prompt.
    pub fn uses_agent_retrieval(self) -> bool {
        matches!(self, ContextMode::Dynamic | ContextMode::Hybrid)
    }
}

impl std::str::FromStr for ContextMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ContextMode::None),
            "static" => Ok(ContextMode::Static),
            "dynamic" => Ok(ContextMode::Dynamic),
            "hybrid" => Ok(ContextMode::Hybrid),
            other => Err(Error::Config(format!("unknown context mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Index into the round's query set; `None` for the initial context.
    pub source_query: Option<usize>,
    pub pre_rerank_rank: usize,
    pub rerank_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextDoc {
    pub doc: Document,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DocumentContext {
    pub round: usize,
    pub docs: Vec<ContextDoc>,
}

impl DocumentContext {
    pub fn empty(round: usize) -> Self {
        Self { round, docs: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn doc_ids(&self) -> Vec<String> {
        self.docs.iter().map(|d| d.doc.doc_id.clone()).collect()
    }

    pub fn documents(&self) -> impl Iterator<Item = &Document> {
        self.docs.iter().map(|d| &d.doc)
    }
}

/// External relevance scorer for `(query, document)` pairs.
pub trait Reranker: Send + Sync {
    /// One score per document, aligned by position.
    fn score(&self, query: &str, docs: &[&Document]) -> Result<Vec<f64>>;
}

/// Client for the reranker wire contract:
/// `{"query", "documents": [{"id", "text"}]}` -> `{"scores": [f64]}`.
pub struct HttpReranker {
    url: String,
    client: reqwest::blocking::Client,
}

impl HttpReranker {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(Self { url: url.into(), client })
    }
}

#[derive(Deserialize)]
struct RerankResponse {
    scores: Vec<f64>,
}

impl Reranker for HttpReranker {
    fn score(&self, query: &str, docs: &[&Document]) -> Result<Vec<f64>> {
        let body = json!({
            "query": query,
            "documents": docs.iter().map(|d| json!({"id": d.doc_id, "text": d.text})).collect::<Vec<_>>(),
        });
        let resp = self
            .client
            .post(&self.url)
            .json(&body)
            .send()
            .map_err(|e| Error::Reranker(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(Error::Reranker(format!("http {}", resp.status())));
        }
        let parsed: RerankResponse = resp.json().map_err(|e| Error::Reranker(e.to_string()))?;
        Ok(parsed.scores)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalBudgets {
    pub per_corpus_k: usize,
    pub per_query: usize,
    pub global: usize,
}

impl Default for RetrievalBudgets {
    fn default() -> Self {
        Self {
            per_corpus_k: 32,
            per_query: 2,
            global: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedDoc {
    pub doc: Document,
    pub pre_rerank_rank: usize,
    pub rerank_score: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Reranked {
    pub docs: Vec<RankedDoc>,
    /// Set when the reranker failed and BM25 order was used instead.
    pub warning: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundRetrieval {
    pub docs: Vec<ContextDoc>,
    pub warnings: Vec<String>,
}

#[derive(Clone)]
pub struct Retriever {
    index: Arc<InvertedIndex>,
    reranker: Option<Arc<dyn Reranker>>,
}

impl Retriever {
    pub fn new(index: Arc<InvertedIndex>) -> Self {
        Self { index, reranker: None }
    }

    pub fn with_reranker(mut self, reranker: Arc<dyn Reranker>) -> Self {
        self.reranker = Some(reranker);
        self
    }

    pub fn index(&self) -> &InvertedIndex {
        &self.index
    }

    /// Top `per_corpus_k` hits from each sub-corpus, pooled in BM25 order
    /// (score descending, then `doc_id`). Ranks are positions in the pool.
    pub fn fan_out_retrieve(&self, query: &str, per_corpus_k: usize) -> Vec<SearchHit> {
        let mut pool: Vec<SearchHit> = self
            .index
            .sub_corpora()
            .iter()
            .flat_map(|sc| self.index.search(query, Some(sc), per_corpus_k))
            .collect();
        pool.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.doc_id.cmp(&b.doc_id)));
        for (i, h) in pool.iter_mut().enumerate() {
            h.rank = i + 1;
        }
        pool
    }

    /// Full ordering of the pool; `rerank` truncates it.
    fn rank_pool(&self, query: &str, pool: &[SearchHit]) -> Reranked {
        let docs: Vec<&Document> = pool
            .iter()
            .filter_map(|h| self.index.document(&h.doc_id))
            .collect();
        let bm25_order = || {
            docs.iter()
                .zip(pool)
                .map(|(d, h)| RankedDoc {
                    doc: (*d).clone(),
                    pre_rerank_rank: h.rank,
                    rerank_score: None,
                })
                .collect::<Vec<_>>()
        };
        let Some(reranker) = &self.reranker else {
            return Reranked {
                docs: bm25_order(),
                warning: None,
            };
        };
        if docs.is_empty() {
            return Reranked::default();
        }
        let scores = reranker.score(query, &docs).and_then(|s| {
            if s.len() != docs.len() {
                Err(Error::Reranker(format!("{} scores for {} documents", s.len(), docs.len())))
            } else if s.iter().any(|x| !x.is_finite()) {
                Err(Error::Reranker("non-finite score".into()))
            } else {
                Ok(s)
            }
        });
        match scores {
            Ok(scores) => {
                let mut ranked: Vec<RankedDoc> = docs
                    .iter()
                    .zip(pool)
                    .zip(scores)
                    .map(|((d, h), s)| RankedDoc {
                        doc: (*d).clone(),
                        pre_rerank_rank: h.rank,
                        rerank_score: Some(s),
                    })
                    .collect();
                ranked.sort_by(|a, b| {
                    b.rerank_score
                        .unwrap()
                        .total_cmp(&a.rerank_score.unwrap())
                        .then_with(|| a.doc.doc_id.cmp(&b.doc.doc_id))
                });
                Reranked {
                    docs: ranked,
                    warning: None,
                }
            }
            Err(e) => Reranked {
                docs: bm25_order(),
                warning: Some(format!("reranker failed, using BM25 order: {e}")),
            },
        }
    }

    pub fn rerank(&self, query: &str, pool: &[SearchHit], keep: usize) -> Reranked {
        let mut out = self.rank_pool(query, pool);
        out.docs.truncate(keep);
        out
    }

    /// Retrieve for every query of a round. Each query contributes up to
    /// `budget_per_query` documents not already taken by an earlier query,
    /// walking further down its own ranking to replace duplicates. The
    /// result never exceeds `global_budget`.
    pub fn retrieve_round(&self, queries: &QuerySet, budgets: RetrievalBudgets) -> RoundRetrieval {
        let ranked: Vec<Reranked> = queries
            .queries
            .par_iter()
            .map(|q| {
                let pool = self.fan_out_retrieve(q, budgets.per_corpus_k);
                self.rank_pool(q, &pool)
            })
            .collect();

        let mut out = RoundRetrieval::default();
        let mut taken = HashSet::new();
        for (qi, r) in ranked.into_iter().enumerate() {
            if let Some(w) = r.warning {
                out.warnings.push(format!("query {}: {w}", qi + 1));
            }
            let mut from_this = 0;
            for rd in r.docs {
                if from_this == budgets.per_query || out.docs.len() == budgets.global {
                    break;
                }
                if !taken.insert(rd.doc.doc_id.clone()) {
                    continue;
                }
                out.docs.push(ContextDoc {
                    doc: rd.doc,
                    provenance: Provenance {
                        source_query: Some(qi),
                        pre_rerank_rank: rd.pre_rerank_rank,
                        rerank_score: rd.rerank_score,
                    },
                });
                from_this += 1;
            }
        }
        out
    }

    /// Context built once from the raw question for static/hybrid modes.
    pub fn initial_context(&self, question: &str, budgets: RetrievalBudgets) -> RoundRetrieval {
        let qs = QuerySet {
            round: 0,
            queries: vec![question.to_string()],
        };
        let mut r = self.retrieve_round(
            &qs,
            RetrievalBudgets {
                per_query: budgets.global,
                ..budgets
            },
        );
        for d in &mut r.docs {
            d.provenance.source_query = None;
        }
        r
    }
}

/// Roll the document context forward one round.
///
/// * `none` - always empty.
/// * `static` - always the initial context.
/// * `dynamic` - exactly the new retrieval; the previous context is dropped.
/// * `hybrid` - initial documents first, then new ones not already present.
///   New documents keep their slots: the initial prefix is cut to make room.
pub fn next_document_context(
    mode: ContextMode,
    initial: &DocumentContext,
    current: &DocumentContext,
    newly_retrieved: &[ContextDoc],
    global_budget: usize,
) -> DocumentContext {
    let round = current.round + 1;
    let docs = match mode {
        ContextMode::None => Vec::new(),
        ContextMode::Static => initial.docs.clone(),
        ContextMode::Dynamic => dedup(newly_retrieved.iter().cloned())
            .into_iter()
            .take(global_budget)
            .collect(),
        ContextMode::Hybrid => {
            let initial_ids: HashSet<&str> = initial.docs.iter().map(|d| d.doc.doc_id.as_str()).collect();
            let fresh: Vec<ContextDoc> = dedup(
                newly_retrieved
                    .iter()
                    .filter(|d| !initial_ids.contains(d.doc.doc_id.as_str()))
                    .cloned(),
            )
            .into_iter()
            .take(global_budget)
            .collect();
            let keep = global_budget - fresh.len();
            initial.docs.iter().take(keep).cloned().chain(fresh).collect()
        }
    };
    DocumentContext { round, docs }
}

fn dedup(docs: impl Iterator<Item = ContextDoc>) -> Vec<ContextDoc> {
    let mut seen = HashSet::new();
    docs.filter(|d| seen.insert(d.doc.doc_id.clone())).collect()
}
