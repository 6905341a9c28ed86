//! Chat-completion gateway: sampling parameters, generations with per-token
//! logprobs, and the backends that produce them.

mod http;
mod mock;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use http::{HttpBackend, HttpBackendConfig};
pub use mock::MockBackend;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: Option<u32>,
    pub n: usize,
    pub max_tokens: u32,
    pub seed: Option<u64>,
    /// Alternatives requested per position when logprobs are wanted.
    pub top_logprobs: usize,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 0.95,
            top_k: Some(20),
            n: 8,
            max_tokens: 4096,
            seed: None,
            top_logprobs: 20,
        }
    }
}

impl SamplingParams {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("sampling n must be >= 1".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::Config("temperature must be >= 0".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config("top_p must be in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn with_n(&self, n: usize) -> Self {
        Self { n, ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
    /// Sorted by descending logprob.
    pub top_alternatives: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub text: String,
    pub finish_reason: FinishReason,
    pub token_logprobs: Option<Vec<TokenLogprob>>,
    #[serde(default)]
    pub usage: Usage,
}

impl Generation {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            finish_reason: FinishReason::Stop,
            token_logprobs: None,
            usage: Usage::default(),
        }
    }
}

/// Anything that can turn a prompt into `params.n` generations.
///
/// Implementations must return generations in request order and be safe to
/// call from several threads at once.
pub trait LlmBackend: Send + Sync {
    fn complete(&self, prompt: &str, params: &SamplingParams, want_logprobs: bool) -> Result<Vec<Generation>>;
}

impl<T: LlmBackend + ?Sized> LlmBackend for Arc<T> {
    fn complete(&self, prompt: &str, params: &SamplingParams, want_logprobs: bool) -> Result<Vec<Generation>> {
        (**self).complete(prompt, params, want_logprobs)
    }
}

pub fn prompt_hash(prompt: &str) -> String {
    let digest = Sha256::digest(prompt.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub prompt_hash: String,
    pub n: usize,
    pub want_logprobs: bool,
    pub ok: bool,
    pub generations: usize,
    pub usage: Usage,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Front door to a backend. Checks the result shape and keeps a request log.
#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn LlmBackend>,
    log: Arc<Mutex<Vec<RequestRecord>>>,
}

impl Gateway {
    pub fn new(backend: impl LlmBackend + 'static) -> Self {
        Self::from_arc(Arc::new(backend))
    }

    pub fn from_arc(backend: Arc<dyn LlmBackend>) -> Self {
        Self {
            backend,
            log: Arc::default(),
        }
    }

    pub fn complete(&self, prompt: &str, params: &SamplingParams, want_logprobs: bool) -> Result<Vec<Generation>> {
        params.validate()?;
        let result = self
            .backend
            .complete(prompt, params, want_logprobs)
            .and_then(|gens| {
                if gens.len() != params.n {
                    return Err(Error::Backend(format!(
                        "expected {} generations, got {}",
                        params.n,
                        gens.len()
                    )));
                }
                Ok(gens)
            });

        let mut record = RequestRecord {
            prompt_hash: prompt_hash(prompt),
            n: params.n,
            want_logprobs,
            ok: result.is_ok(),
            generations: 0,
            usage: Usage::default(),
            error: None,
        };
        match &result {
            Ok(gens) => {
                record.generations = gens.len();
                for g in gens {
                    record.usage.prompt_tokens += g.usage.prompt_tokens;
                    record.usage.completion_tokens += g.usage.completion_tokens;
                }
            }
            Err(e) => record.error = Some(e.to_string()),
        }
        self.log.lock().unwrap().push(record);
        result
    }

    pub fn request_log(&self) -> Vec<RequestRecord> {
        self.log.lock().unwrap().clone()
    }

    pub fn write_request_log(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for rec in self.log.lock().unwrap().iter() {
            serde_json::to_writer(&mut f, rec)?;
            f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Short;

    impl LlmBackend for Short {
        fn complete(&self, _: &str, _: &SamplingParams, _: bool) -> Result<Vec<Generation>> {
            Ok(vec![Generation::text("only one")])
        }
    }

    #[test]
    fn gateway_rejects_wrong_sample_count() {
        let gw = Gateway::new(Short);
        let err = gw
            .complete("p", &SamplingParams::default().with_n(2), false)
            .unwrap_err();
        assert!(err.to_string().contains("expected 2 generations"));
        let log = gw.request_log();
        assert_eq!(log.len(), 1);
        assert!(!log[0].ok);
    }

    #[test]
    fn zero_samples_is_a_config_error() {
        let gw = Gateway::new(Short);
        assert!(matches!(
            gw.complete("p", &SamplingParams::default().with_n(0), false),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn prompt_hash_is_stable() {
        assert_eq!(prompt_hash("abc"), "ba7816bf8f01cfea");
    }
}
