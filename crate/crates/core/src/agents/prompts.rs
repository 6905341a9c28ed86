use std::fs;
use std::path::Path;

use super::template::{text, Template, Value, Vars};
use super::Candidate;
use crate::engine::RoundState;
use crate::error::{Error, Result};
use crate::index::Document;
use crate::item::McqItem;

/// Documents are cut to this many whitespace-separated words in prompts.
pub const DOC_TOKEN_LIMIT: usize = 512;

const SOLVER_ROUND1: &str = include_str!("../../templates/solver_round1.txt");
const SOLVER_ROUND_N: &str = include_str!("../../templates/solver_round_n.txt");
const RETRIEVAL: &str = include_str!("../../templates/retrieval.txt");

#[derive(Debug, Clone)]
pub struct PromptTemplates {
    solver_round1: Template,
    solver_round_n: Template,
    retrieval: Template,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            solver_round1: Template::parse(SOLVER_ROUND1).expect("bundled template"),
            solver_round_n: Template::parse(SOLVER_ROUND_N).expect("bundled template"),
            retrieval: Template::parse(RETRIEVAL).expect("bundled template"),
        }
    }
}

impl PromptTemplates {
    /// Bundled templates, replaced by any of `solver_round1.txt`,
    /// `solver_round_n.txt` or `retrieval.txt` found in `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut t = Self::default();
        let load = |name: &str| -> Result<Option<Template>> {
            let p = dir.join(name);
            if !p.exists() {
                return Ok(None);
            }
            let src = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            Template::parse(&src).map(Some)
        };
        if let Some(x) = load("solver_round1.txt")? {
            t.solver_round1 = x;
        }
        if let Some(x) = load("solver_round_n.txt")? {
            t.solver_round_n = x;
        }
        if let Some(x) = load("retrieval.txt")? {
            t.retrieval = x;
        }
        Ok(t)
    }

    pub fn build_solver_prompt(&self, state: &RoundState<'_>) -> Result<String> {
        if state.round == 0 {
            return Err(Error::Config("rounds start at 1".into()));
        }
        let docs: Vec<&Document> = state.documents.documents().collect();
        let history = state.history.map(|h| h.entries.as_slice()).unwrap_or(&[]);

        let mut vars = item_vars(state.item);
        if state.round == 1 && docs.is_empty() && history.is_empty() {
            return self.solver_round1.render(&vars);
        }
        vars.insert("has_documents".into(), Value::Flag(!docs.is_empty()));
        vars.insert("documents".into(), text(render_documents(&docs, DOC_TOKEN_LIMIT)));
        vars.insert("has_history".into(), Value::Flag(!history.is_empty()));
        vars.insert(
            "answers".into(),
            Value::List(
                history
                    .iter()
                    .enumerate()
                    .map(|(i, c)| {
                        let mut v = answer_vars(i, c);
                        v.insert("score".into(), text(c.display_score.unwrap_or(0).to_string()));
                        v
                    })
                    .collect(),
            ),
        );
        self.solver_round_n.render(&vars)
    }

    pub fn build_conflict_prompt(&self, item: &McqItem, candidates: &[Candidate], num_queries: usize) -> Result<String> {
        if candidates.len() < 2 {
            return Err(Error::Template("conflict prompt needs at least 2 candidates".into()));
        }
        let mut vars = item_vars(item);
        vars.insert("num_queries".into(), text(num_queries.to_string()));
        vars.insert(
            "query_format".into(),
            text(
                (1..=num_queries)
                    .map(|k| format!("[Query {k}] xxx"))
                    .collect::<Vec<_>>()
                    .join("\n"),
            ),
        );
        vars.insert(
            "answers".into(),
            Value::List(candidates.iter().enumerate().map(|(i, c)| answer_vars(i, c)).collect()),
        );
        self.retrieval.render(&vars)
    }
}

fn item_vars(item: &McqItem) -> Vars {
    let mut v = Vars::new();
    v.insert("question".into(), text(item.question.clone()));
    v.insert("options".into(), text(item.render_options()));
    v
}

fn answer_vars(i: usize, c: &Candidate) -> Vars {
    let mut v = Vars::new();
    v.insert("i".into(), text((i + 1).to_string()));
    v.insert("answers_i".into(), text(c.text.trim().to_string()));
    v
}

/// `[k] title` header then body, body cut to `max_words` words.
pub fn render_documents(docs: &[&Document], max_words: usize) -> String {
    docs.iter()
        .enumerate()
        .map(|(i, d)| {
            let words: Vec<&str> = d.text.split_whitespace().collect();
            let body = if words.len() > max_words {
                words[..max_words].join(" ")
            } else {
                d.text.trim().to_string()
            };
            if d.title.is_empty() {
                format!("[{}] {}", i + 1, body)
            } else {
                format!("[{}] {}\n{}", i + 1, d.title, body)
            }
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}
