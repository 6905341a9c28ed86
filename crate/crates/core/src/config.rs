//! TOML run configuration. Every section is optional; command-line flags
//! override whatever is loaded here.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::agents::{CachedScorer, HttpScorer, PromptTemplates, Scorer};
use crate::engine::{Engine, LoopConfig};
use crate::error::{Error, Result};
use crate::index::InvertedIndex;
use crate::llm::{Gateway, HttpBackend, HttpBackendConfig, MockBackend};
use crate::retrieval::{ContextMode, HttpReranker, Retriever};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendSection {
    #[serde(flatten)]
    pub http: HttpBackendConfig,
    /// Environment variable holding the API key.
    pub api_key_env: Option<String>,
    /// Scripted mock backend; when set, no HTTP calls are made.
    pub mock_script: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    /// Corpus JSONL files, each record tagged with its own sub-corpus.
    pub paths: Vec<PathBuf>,
    /// Prebuilt snapshot from `marag index build`, preferred over `paths`.
    pub index: Option<PathBuf>,
    pub reranker_url: Option<String>,
    pub reranker_timeout_secs: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerSection {
    pub url: Option<String>,
    pub timeout_secs: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backend: BackendSection,
    #[serde(rename = "loop")]
    pub loop_: LoopConfig,
    pub corpus: CorpusSection,
    pub scorer: ScorerSection,
    pub parallelism: usize,
    pub trace_dir: Option<PathBuf>,
    pub templates_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backend: BackendSection::default(),
            loop_: LoopConfig::default(),
            corpus: CorpusSection::default(),
            scorer: ScorerSection::default(),
            parallelism: 4,
            trace_dir: None,
            templates_dir: None,
        }
    }
}

const DEFAULT_SIDECAR_TIMEOUT: f64 = 30.0;

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&raw).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_toml(raw: &str) -> Result<Self> {
        toml::from_str(raw).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.loop_.validate()?;
        if self.parallelism == 0 {
            return Err(Error::Config("parallelism must be >= 1".into()));
        }
        if self.loop_.context_mode != ContextMode::None
            && self.corpus.paths.is_empty()
            && self.corpus.index.is_none()
        {
            return Err(Error::Config(format!(
                "context mode {:?} needs corpus.paths or corpus.index",
                self.loop_.context_mode
            )));
        }
        Ok(())
    }

    pub fn build_gateway(&self) -> Result<Gateway> {
        if let Some(script) = &self.backend.mock_script {
            return Ok(Gateway::new(MockBackend::load(script)?));
        }
        let mut http = self.backend.http.clone();
        if http.api_key.is_none() {
            if let Some(var) = &self.backend.api_key_env {
                http.api_key = std::env::var(var).ok();
            }
        }
        Ok(Gateway::new(HttpBackend::new(http)?))
    }

    /// Loads the snapshot if one is configured, otherwise ingests `paths`.
    pub fn build_index(&self) -> Result<Option<InvertedIndex>> {
        if let Some(snap) = &self.corpus.index {
            return InvertedIndex::load_snapshot(snap).map(Some);
        }
        if self.corpus.paths.is_empty() {
            return Ok(None);
        }
        let mut index = InvertedIndex::new();
        for p in &self.corpus.paths {
            index.ingest_corpus(p, None)?;
        }
        Ok(Some(index))
    }

    /// Gateway, index, reranker, scorer and templates wired into an engine.
    pub fn build_engine(&self) -> Result<Engine> {
        self.validate()?;
        let mut engine = Engine::new(self.build_gateway()?, self.loop_.clone())?;
        if let Some(dir) = &self.templates_dir {
            engine = engine.with_templates(PromptTemplates::from_dir(dir)?);
        }
        if let Some(index) = self.build_index()? {
            let mut retriever = Retriever::new(Arc::new(index));
            if let Some(url) = &self.corpus.reranker_url {
                let t = self.corpus.reranker_timeout_secs.unwrap_or(DEFAULT_SIDECAR_TIMEOUT);
                retriever = retriever.with_reranker(Arc::new(HttpReranker::new(url.clone(), Duration::from_secs_f64(t))?));
            }
            engine = engine.with_retriever(retriever);
        }
        if let Some(url) = &self.scorer.url {
            let t = self.scorer.timeout_secs.unwrap_or(DEFAULT_SIDECAR_TIMEOUT);
            let scorer: Arc<dyn Scorer> =
                Arc::new(CachedScorer::new(HttpScorer::new(url.clone(), Duration::from_secs_f64(t))?));
            engine = engine.with_scorer(scorer);
        }
        engine.check_ready()?;
        Ok(engine)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::ScoreKind;

    #[test]
    fn empty_file_is_all_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg.loop_, LoopConfig::default());
        assert_eq!(cfg.parallelism, 4);
    }

    #[test]
    fn sections_parse() {
        let cfg = RunConfig::from_toml(
            r#"
parallelism = 2

[backend]
base_url = "http://localhost:9000/v1"
model = "m"
mock_script = "script.jsonl"

[loop]
max_rounds = 3
epsilon = 0.75
context_mode = "hybrid"
score = "extrinsic"

[loop.budgets]
per_query = 8
global = 8

[corpus]
paths = ["a.jsonl", "b.jsonl"]

[scorer]
url = "http://localhost:7000/score"
"#,
        )
        .unwrap();
        assert_eq!(cfg.loop_.max_rounds, 3);
        assert_eq!(cfg.loop_.context_mode, ContextMode::Hybrid);
        assert_eq!(cfg.loop_.score, ScoreKind::Extrinsic);
        assert_eq!(cfg.loop_.budgets.per_query, 8);
        assert_eq!(cfg.loop_.budgets.per_corpus_k, 32);
        assert_eq!(cfg.backend.http.model, "m");
        assert_eq!(cfg.corpus.paths.len(), 2);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("[loop]\nmax_round = 3").is_err());
        assert!(RunConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn retrieval_modes_need_a_corpus() {
        let cfg = RunConfig::from_toml("[loop]\ncontext_mode = \"static\"").unwrap();
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("corpus"), "{err}");
        let cfg = RunConfig::from_toml("[loop]\ncontext_mode = \"none\"").unwrap();
        cfg.validate().unwrap();
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::default();
        let again = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again.loop_, cfg.loop_);
    }
}
