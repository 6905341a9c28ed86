use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use regex::Regex;
use serde::Deserialize;

use super::{prompt_hash, FinishReason, Generation, LlmBackend, SamplingParams, TokenLogprob, Usage};
use crate::error::{Error, Result};
use crate::index::tokenize;

/// One scripted position: a bare logprob, a list of alternative logprobs
/// (the first is the sampled token), or a fully spelled-out record.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum ScriptPosition {
    Single(f64),
    Alternatives(Vec<f64>),
    Full {
        token: String,
        logprob: f64,
        #[serde(default)]
        top: Vec<(String, f64)>,
    },
}

#[derive(Debug, Deserialize)]
struct ScriptLine {
    #[serde(rename = "match")]
    matcher: String,
    responses: Vec<String>,
    #[serde(default)]
    logprobs: Option<Vec<Vec<ScriptPosition>>>,
}

#[derive(Debug)]
enum Matcher {
    Any,
    Literal(String),
    Pattern(Regex),
}

impl Matcher {
    /// `"*"` matches everything, `"/.../"` is a regex, anything else is a
    /// literal substring.
    fn parse(raw: &str) -> Result<Self> {
        if raw == "*" {
            return Ok(Matcher::Any);
        }
        if raw.len() >= 2 && raw.starts_with('/') && raw.ends_with('/') {
            let re = Regex::new(&raw[1..raw.len() - 1])
                .map_err(|e| Error::MockScript(format!("bad regex {raw:?}: {e}")))?;
            return Ok(Matcher::Pattern(re));
        }
        Ok(Matcher::Literal(raw.to_string()))
    }

    fn is_match(&self, prompt: &str) -> bool {
        match self {
            Matcher::Any => true,
            Matcher::Literal(s) => prompt.contains(s.as_str()),
            Matcher::Pattern(re) => re.is_match(prompt),
        }
    }
}

#[derive(Debug, Clone)]
struct ScriptedCall {
    responses: Vec<String>,
    logprobs: Option<Vec<Vec<TokenLogprob>>>,
}

#[derive(Debug)]
struct Rule {
    key: String,
    matcher: Matcher,
    calls: Vec<ScriptedCall>,
}

/// Deterministic scripted backend.
///
/// Script lines sharing the same `match` string form a queue: the k-th call
/// whose prompt hits that matcher is answered by the k-th line, and the last
/// line keeps answering once the queue runs out. Rules are tried in the
/// order their matcher first appears in the script. Generation `i` of a
/// call is `responses[i % len]`.
#[derive(Debug)]
pub struct MockBackend {
    rules: Vec<Rule>,
    counters: Mutex<HashMap<String, usize>>,
    fallback: Option<String>,
}

impl MockBackend {
    pub fn new() -> Self {
        Self {
            rules: Vec::new(),
            counters: Mutex::default(),
            fallback: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&raw).map_err(|e| match e {
            Error::Record { line, message, .. } => Error::record(path, line, message),
            other => other,
        })
    }

    pub fn from_jsonl(raw: &str) -> Result<Self> {
        let mut mock = Self::new();
        for (i, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ScriptLine =
                serde_json::from_str(line).map_err(|e| Error::record("<mock>", i + 1, e.to_string()))?;
            mock.push_line(parsed)
                .map_err(|e| Error::record("<mock>", i + 1, e.to_string()))?;
        }
        Ok(mock)
    }

    /// Unmatched prompts get this text instead of an error.
    pub fn with_default(mut self, text: impl Into<String>) -> Self {
        self.fallback = Some(text.into());
        self
    }

    /// Append a scripted call without logprobs.
    pub fn script(mut self, matcher: &str, responses: &[&str]) -> Result<Self> {
        self.push_line(ScriptLine {
            matcher: matcher.to_string(),
            responses: responses.iter().map(|s| s.to_string()).collect(),
            logprobs: None,
        })?;
        Ok(self)
    }

    fn push_line(&mut self, line: ScriptLine) -> Result<()> {
        if line.responses.is_empty() {
            return Err(Error::MockScript("`responses` must not be empty".into()));
        }
        let logprobs = match line.logprobs {
            None => None,
            Some(tables) => {
                if tables.len() != line.responses.len() {
                    return Err(Error::MockScript(format!(
                        "{} logprob tables for {} responses",
                        tables.len(),
                        line.responses.len()
                    )));
                }
                Some(
                    tables
                        .into_iter()
                        .map(|t| {
                            t.into_iter()
                                .enumerate()
                                .map(|(i, p)| position(i, p))
                                .collect::<Result<Vec<_>>>()
                        })
                        .collect::<Result<Vec<_>>>()?,
                )
            }
        };
        let call = ScriptedCall {
            responses: line.responses,
            logprobs,
        };
        match self.rules.iter_mut().find(|r| r.key == line.matcher) {
            Some(rule) => rule.calls.push(call),
            None => self.rules.push(Rule {
                matcher: Matcher::parse(&line.matcher)?,
                key: line.matcher,
                calls: vec![call],
            }),
        }
        Ok(())
    }
}

impl Default for MockBackend {
    fn default() -> Self {
        Self::new()
    }
}

fn position(i: usize, p: ScriptPosition) -> Result<TokenLogprob> {
    let (token, logprob, mut top) = match p {
        ScriptPosition::Single(lp) => (format!("t{i}"), lp, vec![(format!("t{i}"), lp)]),
        ScriptPosition::Alternatives(lps) => {
            let Some(&first) = lps.first() else {
                return Err(Error::MockScript(format!("position {i}: empty alternatives")));
            };
            let top = lps
                .iter()
                .enumerate()
                .map(|(j, &lp)| (format!("t{i}_{j}"), lp))
                .collect();
            (format!("t{i}_0"), first, top)
        }
        ScriptPosition::Full { token, logprob, top } => {
            let top = if top.is_empty() {
                vec![(token.clone(), logprob)]
            } else {
                top
            };
            (token, logprob, top)
        }
    };
    if !(logprob <= 0.0) || top.iter().any(|(_, lp)| !(*lp <= 0.0)) {
        return Err(Error::MockScript(format!("position {i}: logprobs must be <= 0")));
    }
    top.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(TokenLogprob {
        token,
        logprob,
        top_alternatives: top,
    })
}

impl LlmBackend for MockBackend {
    fn complete(&self, prompt: &str, params: &SamplingParams, want_logprobs: bool) -> Result<Vec<Generation>> {
        let rule = self.rules.iter().find(|r| r.matcher.is_match(prompt));
        let call = match rule {
            Some(rule) => {
                let mut counters = self.counters.lock().unwrap();
                let k = counters.entry(rule.key.clone()).or_insert(0);
                let call = rule.calls[(*k).min(rule.calls.len() - 1)].clone();
                *k += 1;
                call
            }
            None => match &self.fallback {
                Some(text) => ScriptedCall {
                    responses: vec![text.clone()],
                    logprobs: None,
                },
                None => return Err(Error::Unscripted(prompt_hash(prompt))),
            },
        };

        let prompt_tokens = tokenize(prompt).len() as u64;
        let greedy = params.temperature == 0.0;
        Ok((0..params.n)
            .map(|i| {
                let j = if greedy { 0 } else { i % call.responses.len() };
                let text = call.responses[j].clone();
                let token_logprobs = if want_logprobs {
                    call.logprobs.as_ref().map(|t| t[j].clone())
                } else {
                    None
                };
                Generation {
                    usage: Usage {
                        prompt_tokens,
                        completion_tokens: tokenize(&text).len() as u64,
                    },
                    text,
                    finish_reason: FinishReason::Stop,
                    token_logprobs,
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(n: usize) -> SamplingParams {
        SamplingParams::default().with_n(n)
    }

    fn texts(g: Vec<Generation>) -> Vec<String> {
        g.into_iter().map(|g| g.text).collect()
    }

    #[test]
    fn scripted_responses_in_order() {
        let mock = MockBackend::new().script("Question", &["A-text", "B-text"]).unwrap();
        assert_eq!(texts(mock.complete("Question?", &params(2), false).unwrap()), ["A-text", "B-text"]);
    }

    #[test]
    fn n_cycles_through_responses() {
        let mock = MockBackend::new().script("*", &["x", "y", "z"]).unwrap();
        let out = texts(mock.complete("p", &params(8), false).unwrap());
        assert_eq!(out, ["x", "y", "z", "x", "y", "z", "x", "y"]);
    }

    #[test]
    fn regex_matcher_and_call_index() {
        let raw = r#"{"match": "/Question\\nWhat is/", "responses": ["first"]}
{"match": "/Question\\nWhat is/", "responses": ["second"]}"#;
        let mock = MockBackend::from_jsonl(raw).unwrap();
        let p = "Below\nQuestion\nWhat is a fever?";
        assert_eq!(texts(mock.complete(p, &params(1), false).unwrap()), ["first"]);
        assert_eq!(texts(mock.complete(p, &params(1), false).unwrap()), ["second"]);
        // queue exhausted: last entry repeats
        assert_eq!(texts(mock.complete(p, &params(1), false).unwrap()), ["second"]);
    }

    #[test]
    fn unmatched_prompt_is_error_unless_default() {
        let mock = MockBackend::new().script("zzz", &["x"]).unwrap();
        assert!(matches!(mock.complete("p", &params(1), false), Err(Error::Unscripted(_))));
        let mock = mock.with_default("fallback");
        assert_eq!(texts(mock.complete("p", &params(1), false).unwrap()), ["fallback"]);
    }

    #[test]
    fn logprob_tables_are_attached() {
        let raw = r#"{"match": "*", "responses": ["a", "b"], "logprobs": [[[0.0], [0.0]], [[-0.6931471805599453, -0.6931471805599453]]]}"#;
        let mock = MockBackend::from_jsonl(raw).unwrap();
        let out = mock.complete("p", &params(2), true).unwrap();
        let first = out[0].token_logprobs.as_ref().unwrap();
        assert_eq!(first.len(), 2);
        assert_eq!(first[0].top_alternatives.len(), 1);
        let second = out[1].token_logprobs.as_ref().unwrap();
        assert_eq!(second[0].top_alternatives.len(), 2);
        // not requested, not returned
        assert!(mock.complete("p", &params(1), false).unwrap()[0].token_logprobs.is_none());
    }

    #[test]
    fn schema_violations_are_reported_with_line() {
        let err = MockBackend::from_jsonl("{\"match\": \"x\"}").unwrap_err();
        assert!(matches!(err, Error::Record { line: 1, .. }));
        let err = MockBackend::from_jsonl(r#"{"match": "x", "responses": ["a"], "logprobs": [[[0.5]]]}"#).unwrap_err();
        assert!(err.to_string().contains("<= 0"));
        let err = MockBackend::from_jsonl(r#"{"match": "x", "responses": ["a", "b"], "logprobs": [[]]}"#).unwrap_err();
        assert!(err.to_string().contains("logprob tables"));
    }

    #[test]
    fn zero_temperature_repeats_first_response() {
        let mock = MockBackend::new().script("*", &["x", "y"]).unwrap();
        let p = SamplingParams {
            temperature: 0.0,
            ..params(3)
        };
        assert_eq!(texts(mock.complete("p", &p, false).unwrap()), ["x", "x", "x"]);
    }
}
