use std::thread;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::{FinishReason, Generation, LlmBackend, SamplingParams, TokenLogprob, Usage};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpBackendConfig {
    pub base_url: String,
    pub model: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    /// Merged verbatim into every request body (e.g. a switch that turns
    /// off a model's thinking mode).
    pub extra_body: Map<String, Value>,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model: "default".into(),
            api_key: None,
            timeout_secs: 120.0,
            max_retries: 3,
            backoff_base_ms: 500,
            extra_body: Map::new(),
        }
    }
}

/// OpenAI-compatible `/chat/completions` client. The `n` samples of a call
/// are issued as concurrent single-sample requests and joined in order.
pub struct HttpBackend {
    cfg: HttpBackendConfig,
    client: reqwest::blocking::Client,
}

enum Failure {
    Transient(String),
    Fatal(Error),
}

impl HttpBackend {
    pub fn new(cfg: HttpBackendConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(Self { cfg, client })
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'))
    }

    fn body(&self, prompt: &str, params: &SamplingParams, seed: Option<u64>, want_logprobs: bool) -> Value {
        let mut body = json!({
            "model": self.cfg.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": params.temperature,
            "top_p": params.top_p,
            "max_tokens": params.max_tokens,
            "n": 1,
        });
        let obj = body.as_object_mut().unwrap();
        if let Some(k) = params.top_k {
            obj.insert("top_k".into(), json!(k));
        }
        if let Some(s) = seed {
            obj.insert("seed".into(), json!(s));
        }
        if want_logprobs {
            obj.insert("logprobs".into(), json!(true));
            obj.insert("top_logprobs".into(), json!(params.top_logprobs));
        }
        for (k, v) in &self.cfg.extra_body {
            obj.insert(k.clone(), v.clone());
        }
        body
    }

    fn attempt(&self, body: &Value, want_logprobs: bool) -> std::result::Result<Generation, Failure> {
        let mut req = self.client.post(self.endpoint()).json(body);
        if let Some(key) = &self.cfg.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Failure::Transient(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Failure::Transient(format!("http {status}")));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(Failure::Fatal(Error::Backend(format!("http {status}: {text}"))));
        }
        let payload: Value = resp
            .json()
            .map_err(|e| Failure::Fatal(Error::Backend(format!("invalid json: {e}"))))?;
        parse_choice(&payload, want_logprobs).map_err(Failure::Fatal)
    }

    fn request_one(&self, prompt: &str, params: &SamplingParams, seed: Option<u64>, want_logprobs: bool) -> Result<Generation> {
        let request_id = uuid::Uuid::new_v4().to_string();
        let body = self.body(prompt, params, seed, want_logprobs);
        let attempts = self.cfg.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            match self.attempt(&body, want_logprobs) {
                Ok(g) => return Ok(g),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Transient(msg)) => {
                    log::warn!("request {request_id} attempt {}: {msg}", attempt + 1);
                    last = msg;
                    if attempt + 1 < attempts {
                        let jitter: f64 = rand::thread_rng().gen_range(0.5..1.5);
                        let ms = self.cfg.backoff_base_ms as f64 * 2f64.powi(attempt as i32) * jitter;
                        thread::sleep(Duration::from_millis(ms as u64));
                    }
                }
            }
        }
        Err(Error::RetriesExhausted {
            request_id,
            attempts,
            message: last,
        })
    }
}

impl LlmBackend for HttpBackend {
    fn complete(&self, prompt: &str, params: &SamplingParams, want_logprobs: bool) -> Result<Vec<Generation>> {
        thread::scope(|s| {
            let handles: Vec<_> = (0..params.n)
                .map(|i| {
                    let seed = params.seed.map(|s| s.wrapping_add(i as u64));
                    s.spawn(move || self.request_one(prompt, params, seed, want_logprobs))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("request thread panicked"))
                .collect()
        })
    }
}

fn field<'a>(v: &'a Value, path: &str) -> Result<&'a Value> {
    let mut cur = v;
    for part in path.split('.') {
        cur = match part.parse::<usize>() {
            Ok(i) => cur.get(i),
            Err(_) => cur.get(part),
        }
        .filter(|v| !v.is_null())
        .ok_or_else(|| Error::MissingField(path.to_string()))?;
    }
    Ok(cur)
}

pub(crate) fn parse_choice(payload: &Value, want_logprobs: bool) -> Result<Generation> {
    let text = field(payload, "choices.0.message.content")?
        .as_str()
        .ok_or_else(|| Error::MissingField("choices.0.message.content".into()))?
        .to_string();
    let finish_reason = match payload
        .pointer("/choices/0/finish_reason")
        .and_then(Value::as_str)
    {
        Some("length") => FinishReason::Length,
        Some("stop") | Some("eos") | None => FinishReason::Stop,
        Some(_) => FinishReason::Error,
    };

    let token_logprobs = if want_logprobs {
        let content = payload
            .pointer("/choices/0/logprobs/content")
            .and_then(Value::as_array)
            .ok_or(Error::LogprobsMissing)?;
        let mut out = Vec::with_capacity(content.len());
        for (i, pos) in content.iter().enumerate() {
            let token = field(pos, "token")
                .map_err(|_| Error::MissingField(format!("logprobs.content.{i}.token")))?
                .as_str()
                .unwrap_or_default()
                .to_string();
            let logprob = field(pos, "logprob")
                .ok()
                .and_then(Value::as_f64)
                .ok_or_else(|| Error::MissingField(format!("logprobs.content.{i}.logprob")))?;
            let mut top: Vec<(String, f64)> = pos
                .get("top_logprobs")
                .and_then(Value::as_array)
                .map(|alts| {
                    alts.iter()
                        .filter_map(|a| {
                            Some((a.get("token")?.as_str()?.to_string(), a.get("logprob")?.as_f64()?))
                        })
                        .collect()
                })
                .unwrap_or_default();
            if top.is_empty() {
                top.push((token.clone(), logprob));
            }
            top.sort_by(|a, b| b.1.total_cmp(&a.1));
            out.push(TokenLogprob {
                token,
                logprob: logprob.min(0.0),
                top_alternatives: top,
            });
        }
        Some(out)
    } else {
        None
    };

    let usage = Usage {
        prompt_tokens: payload.pointer("/usage/prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
        completion_tokens: payload
            .pointer("/usage/completion_tokens")
            .and_then(Value::as_u64)
            .unwrap_or(0),
    };

    Ok(Generation {
        text,
        finish_reason,
        token_logprobs,
        usage,
    })
}
