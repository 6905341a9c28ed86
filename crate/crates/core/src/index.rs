//! In-memory inverted index with Okapi BM25 ranking.
//!
//! Documents are grouped into named sub-corpora. A search restricted to one
//! sub-corpus uses that sub-corpus's collection statistics (document count,
//! average length, document frequencies), so each sub-corpus behaves like a
//! separate index. An unrestricted search uses statistics over everything.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SNAPSHOT_MAGIC: &str = "marag-index";
const SNAPSHOT_VERSION: u32 = 1;

/// Lowercase, split on anything that is not alphanumeric, drop empties.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub sub_corpus: String,
    pub title: String,
    pub text: String,
}

impl Document {
    pub fn new(
        doc_id: impl Into<String>,
        sub_corpus: impl Into<String>,
        title: impl Into<String>,
        text: impl Into<String>,
    ) -> Self {
        Self {
            doc_id: doc_id.into(),
            sub_corpus: sub_corpus.into(),
            title: title.into(),
            text: text.into(),
        }
    }

    /// The indexed field: title followed by body.
    pub fn indexed_text(&self) -> String {
        if self.title.is_empty() {
            self.text.clone()
        } else {
            format!("{} {}", self.title, self.text)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexStats {
    pub num_docs: usize,
    pub num_terms: usize,
    pub avg_doc_len: f64,
    pub per_sub_corpus_counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub doc_id: String,
    pub score: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Params {
    /// Robertson-Sparck-Jones IDF with +0.5 smoothing, floored at zero.
    pub fn idf(&self, num_docs: usize, doc_freq: usize) -> f64 {
        let n = num_docs as f64;
        let df = doc_freq as f64;
        ((n - df + 0.5) / (df + 0.5)).ln().max(0.0)
    }

    pub fn term_weight(&self, idf: f64, tf: f64, doc_len: f64, avg_doc_len: f64) -> f64 {
        let norm = self.k1 * (1.0 - self.b + self.b * doc_len / avg_doc_len);
        idf * tf * (self.k1 + 1.0) / (tf + norm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
struct ScopeStats {
    num_docs: usize,
    total_len: u64,
}

impl ScopeStats {
    fn avg_len(&self) -> f64 {
        if self.num_docs == 0 {
            0.0
        } else {
            self.total_len as f64 / self.num_docs as f64
        }
    }
}

#[derive(Debug, Deserialize)]
struct CorpusRecord {
    id: Option<String>,
    #[serde(default)]
    title: Option<String>,
    text: Option<String>,
    #[serde(default)]
    corpus: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct InvertedIndex {
    params: Bm25Params,
    docs: Vec<Document>,
    doc_lens: Vec<u32>,
    doc_scope: Vec<u16>,
    scopes: Vec<String>,
    postings: BTreeMap<String, Vec<Posting>>,
    #[serde(skip)]
    by_id: HashMap<String, u32>,
}

impl InvertedIndex {
    pub fn new() -> Self {
        Self::with_params(Bm25Params::default())
    }

    pub fn with_params(params: Bm25Params) -> Self {
        Self {
            params,
            ..Default::default()
        }
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// Sub-corpus names in ingestion order.
    pub fn sub_corpora(&self) -> &[String] {
        &self.scopes
    }

    pub fn document(&self, doc_id: &str) -> Option<&Document> {
        self.by_id.get(doc_id).map(|&i| &self.docs[i as usize])
    }

    pub fn documents(&self) -> &[Document] {
        &self.docs
    }

    /// Read a corpus JSONL file. When `sub_corpus` is given it tags every
    /// record; otherwise each record's `corpus` field is required.
    ///
    /// The file is validated in full before anything is indexed, so a bad
    /// line leaves the index untouched.
    pub fn ingest_corpus(&mut self, path: &Path, sub_corpus: Option<&str>) -> Result<IndexStats> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut batch = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: CorpusRecord = serde_json::from_str(&line)
                .map_err(|e| Error::record(path, lineno, e.to_string()))?;
            let id = rec
                .id
                .filter(|s| !s.is_empty())
                .ok_or_else(|| Error::record(path, lineno, "missing field `id`"))?;
            let text = rec
                .text
                .ok_or_else(|| Error::record(path, lineno, "missing field `text`"))?;
            if text.trim().is_empty() {
                return Err(Error::record(path, lineno, "field `text` is empty"));
            }
            let corpus = match sub_corpus {
                Some(sc) => sc.to_string(),
                None => rec
                    .corpus
                    .filter(|s| !s.is_empty())
                    .ok_or_else(|| Error::record(path, lineno, "missing field `corpus`"))?,
            };
            batch.push(Document::new(id, corpus, rec.title.unwrap_or_default(), text));
        }
        self.add_documents(batch)?;
        Ok(self.stats())
    }

    /// Add documents atomically: either all are indexed or none.
    pub fn add_documents(&mut self, docs: Vec<Document>) -> Result<()> {
        let mut seen = HashSet::new();
        for d in &docs {
            if d.text.trim().is_empty() {
                return Err(Error::Config(format!("document `{}` has empty text", d.doc_id)));
            }
            if self.by_id.contains_key(&d.doc_id) || !seen.insert(d.doc_id.as_str()) {
                return Err(Error::DuplicateId(d.doc_id.clone()));
            }
        }
        for d in docs {
            self.push(d);
        }
        Ok(())
    }

    fn push(&mut self, doc: Document) {
        let idx = self.docs.len() as u32;
        let scope = match self.scopes.iter().position(|s| *s == doc.sub_corpus) {
            Some(p) => p,
            None => {
                self.scopes.push(doc.sub_corpus.clone());
                self.scopes.len() - 1
            }
        } as u16;

        let tokens = tokenize(&doc.indexed_text());
        let mut tfs: BTreeMap<String, u32> = BTreeMap::new();
        for t in &tokens {
            *tfs.entry(t.clone()).or_default() += 1;
        }
        for (term, tf) in tfs {
            self.postings.entry(term).or_default().push(Posting { doc: idx, tf });
        }
        self.doc_lens.push(tokens.len() as u32);
        self.doc_scope.push(scope);
        self.by_id.insert(doc.doc_id.clone(), idx);
        self.docs.push(doc);
    }

    pub fn stats(&self) -> IndexStats {
        let mut per_sub_corpus_counts = BTreeMap::new();
        for s in &self.scopes {
            per_sub_corpus_counts.insert(s.clone(), 0);
        }
        for &s in &self.doc_scope {
            *per_sub_corpus_counts.get_mut(&self.scopes[s as usize]).unwrap() += 1;
        }
        IndexStats {
            num_docs: self.docs.len(),
            num_terms: self.postings.len(),
            avg_doc_len: self.scope_stats(None).avg_len(),
            per_sub_corpus_counts,
        }
    }

    fn scope_stats(&self, scope: Option<u16>) -> ScopeStats {
        let mut st = ScopeStats::default();
        for (i, &len) in self.doc_lens.iter().enumerate() {
            if scope.map_or(true, |s| self.doc_scope[i] == s) {
                st.num_docs += 1;
                st.total_len += len as u64;
            }
        }
        st
    }

    /// Number of documents containing `term`, within `sub_corpus` if given.
    pub fn doc_freq(&self, term: &str, sub_corpus: Option<&str>) -> usize {
        let scope = match self.resolve_scope(sub_corpus) {
            Ok(s) => s,
            Err(()) => return 0,
        };
        self.postings.get(term).map_or(0, |ps| {
            ps.iter()
                .filter(|p| scope.map_or(true, |s| self.doc_scope[p.doc as usize] == s))
                .count()
        })
    }

    fn resolve_scope(&self, sub_corpus: Option<&str>) -> std::result::Result<Option<u16>, ()> {
        match sub_corpus {
            None => Ok(None),
            Some(name) => self
                .scopes
                .iter()
                .position(|s| s == name)
                .map(|p| Some(p as u16))
                .ok_or(()),
        }
    }

    /// Ranked BM25 search. Documents sharing no term with the query are
    /// excluded; ties are broken by ascending `doc_id`.
    pub fn search(&self, query: &str, sub_corpus: Option<&str>, top_k: usize) -> Vec<SearchHit> {
        let Ok(scope) = self.resolve_scope(sub_corpus) else {
            return Vec::new();
        };
        if top_k == 0 {
            return Vec::new();
        }
        let mut terms = tokenize(query);
        let mut seen = HashSet::new();
        terms.retain(|t| seen.insert(t.clone()));
        if terms.is_empty() {
            return Vec::new();
        }

        let stats = self.scope_stats(scope);
        let avg_len = stats.avg_len();
        let in_scope = |doc: u32| scope.map_or(true, |s| self.doc_scope[doc as usize] == s);

        let mut acc: HashMap<u32, f64> = HashMap::new();
        for term in &terms {
            let Some(postings) = self.postings.get(term) else {
                continue;
            };
            let df = postings.iter().filter(|p| in_scope(p.doc)).count();
            if df == 0 {
                continue;
            }
            let idf = self.params.idf(stats.num_docs, df);
            for p in postings.iter().filter(|p| in_scope(p.doc)) {
                let w = self.params.term_weight(
                    idf,
                    p.tf as f64,
                    self.doc_lens[p.doc as usize] as f64,
                    avg_len,
                );
                *acc.entry(p.doc).or_insert(0.0) += w;
            }
        }

        let mut scored: Vec<(u32, f64)> = acc.into_iter().collect();
        scored.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.docs[a.0 as usize].doc_id.cmp(&self.docs[b.0 as usize].doc_id))
        });
        scored
            .into_iter()
            .take(top_k)
            .enumerate()
            .map(|(i, (doc, score))| SearchHit {
                doc_id: self.docs[doc as usize].doc_id.clone(),
                score,
                rank: i + 1,
            })
            .collect()
    }

    pub fn save_snapshot(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(f, "{SNAPSHOT_MAGIC} {SNAPSHOT_VERSION}").map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(&mut f, self)?;
        f.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_snapshot(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(file);
        let mut header = String::new();
        reader.read_line(&mut header).map_err(|e| Error::io(path, e))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(SNAPSHOT_MAGIC) {
            return Err(Error::Snapshot(format!("{} is not an index snapshot", path.display())));
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Snapshot("unreadable version".into()))?;
        if version != SNAPSHOT_VERSION {
            return Err(Error::Snapshot(format!(
                "unsupported snapshot version {version} (expected {SNAPSHOT_VERSION})"
            )));
        }
        let mut index: InvertedIndex = serde_json::from_reader(reader)?;
        if index.doc_lens.len() != index.docs.len() || index.doc_scope.len() != index.docs.len() {
            return Err(Error::Snapshot("inconsistent document tables".into()));
        }
        index.by_id = index
            .docs
            .iter()
            .enumerate()
            .map(|(i, d)| (d.doc_id.clone(), i as u32))
            .collect();
        Ok(index)
    }
}
