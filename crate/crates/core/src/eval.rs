//! Datasets, run reports and the candidate-pool metrics.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agents::Candidate;
use crate::engine::{majority_vote, EpisodeTrace, Termination};
use crate::error::{Error, Result};
use crate::item::{Answer, AnswerMode, McqItem};
use crate::llm::Usage;

#[derive(Deserialize)]
#[serde(untagged)]
enum GoldField {
    One(String),
    Many(Vec<String>),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ItemRecord {
    id: String,
    question: String,
    options: BTreeMap<String, String>,
    #[serde(default)]
    gold: Option<GoldField>,
    #[serde(default)]
    answer_mode: AnswerMode,
    #[serde(default)]
    tags: BTreeMap<String, serde_json::Value>,
}

impl ItemRecord {
    fn into_item(self) -> std::result::Result<McqItem, String> {
        let mut options = BTreeMap::new();
        for (k, v) in self.options {
            let mut cs = k.chars();
            match (cs.next(), cs.next()) {
                (Some(c), None) if c.is_ascii_uppercase() => {
                    options.insert(c, v);
                }
                _ => return Err(format!("option label `{k}` is not a single capital letter")),
            }
        }
        let gold = match self.gold {
            None => None,
            Some(GoldField::One(s)) => Some(Answer::parse(&s).ok_or_else(|| format!("invalid gold `{s}`"))?),
            Some(GoldField::Many(v)) => {
                let joined = v.join(",");
                Some(Answer::parse(&joined).ok_or_else(|| format!("invalid gold {v:?}"))?)
            }
        };
        let item = McqItem {
            id: self.id,
            question: self.question,
            options,
            gold,
            answer_mode: self.answer_mode,
            tags: self.tags,
        };
        item.validate().map_err(|e| e.to_string())?;
        Ok(item)
    }
}

/// Parses one item from a JSON object (dataset line or question file).
pub fn parse_item(raw: &str) -> std::result::Result<McqItem, String> {
    let rec: ItemRecord = serde_json::from_str(raw).map_err(|e| e.to_string())?;
    rec.into_item()
}

pub fn load_question(path: &Path) -> Result<McqItem> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_item(&raw).map_err(|m| Error::record(path, 1, m))
}

pub fn load_dataset(path: &Path) -> Result<Vec<McqItem>> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut seen = HashSet::new();
    let mut items = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item = parse_item(line).map_err(|m| Error::record(path, i + 1, m))?;
        if !seen.insert(item.id.clone()) {
            return Err(Error::record(path, i + 1, format!("duplicate id `{}`", item.id)));
        }
        items.push(item);
    }
    Ok(items)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub item_id: String,
    pub final_answer: String,
    pub gold: Option<String>,
    /// `None` when the item had no gold or the episode failed.
    pub correct: Option<bool>,
    pub failed: bool,
    pub termination: Termination,
    pub rounds: usize,
    pub retrievals: usize,
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundAccuracy {
    pub round: usize,
    pub correct: usize,
    pub evaluated: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub items: Vec<ItemResult>,
    pub total: usize,
    pub evaluated: usize,
    pub correct: usize,
    pub failed: usize,
    /// Percent correct over evaluated (non-failed, gold-bearing) episodes.
    pub accuracy: f64,
    pub mean_rounds: f64,
    pub accuracy_by_round: Vec<RoundAccuracy>,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

fn percent(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

/// The answer the episode would have produced had it stopped after round
/// `t`. Episodes that ended earlier keep their final answer.
pub fn answer_at_round(trace: &EpisodeTrace, t: usize) -> Option<Answer> {
    if t >= trace.rounds.len() {
        return trace.final_answer.clone();
    }
    let r = &trace.rounds[t - 1];
    majority_vote(&r.candidates, r.score_kind)
}

pub fn evaluate(traces: &[EpisodeTrace], items: &[McqItem]) -> RunReport {
    let by_id: HashMap<&str, &McqItem> = items.iter().map(|i| (i.id.as_str(), i)).collect();
    let mut warnings = Vec::new();
    let mut results = Vec::new();
    let mut scored: Vec<(&EpisodeTrace, &McqItem)> = Vec::new();

    for tr in traces {
        let item = by_id.get(tr.item_id.as_str()).copied();
        let gold = item.and_then(|i| i.gold.as_ref());
        if item.is_none() {
            warnings.push(format!("{}: no dataset item for trace", tr.item_id));
        } else if gold.is_none() {
            warnings.push(format!("{}: missing gold, excluded", tr.item_id));
        }
        let correct = match (tr.failed(), item) {
            (false, Some(it)) => it.is_correct(tr.final_answer.as_ref()),
            _ => None,
        };
        if let (Some(_), Some(it)) = (correct, item) {
            scored.push((tr, it));
        }
        results.push(ItemResult {
            item_id: tr.item_id.clone(),
            final_answer: tr.final_label(),
            gold: gold.map(|g| g.to_string()),
            correct,
            failed: tr.failed(),
            termination: tr.termination,
            rounds: tr.rounds.len(),
            retrievals: tr.retrieval_phases,
            usage: tr.usage,
        });
    }

    let evaluated = scored.len();
    let correct = results.iter().filter(|r| r.correct == Some(true)).count();
    let failed = results.iter().filter(|r| r.failed).count();
    let finished: Vec<&ItemResult> = results.iter().filter(|r| !r.failed).collect();
    let mean_rounds = if finished.is_empty() {
        0.0
    } else {
        finished.iter().map(|r| r.rounds as f64).sum::<f64>() / finished.len() as f64
    };

    let horizon = scored.iter().map(|(t, _)| t.rounds.len()).max().unwrap_or(0);
    let accuracy_by_round = (1..=horizon)
        .map(|t| {
            let c = scored
                .iter()
                .filter(|(tr, it)| it.is_correct(answer_at_round(tr, t).as_ref()) == Some(true))
                .count();
            RoundAccuracy {
                round: t,
                correct: c,
                evaluated,
                accuracy: percent(c, evaluated),
            }
        })
        .collect();

    RunReport {
        total: results.len(),
        items: results,
        evaluated,
        correct,
        failed,
        accuracy: percent(correct, evaluated),
        mean_rounds,
        accuracy_by_round,
        warnings,
        config: None,
    }
}

/// Percent of items whose top-`k` candidates include a correct answer.
/// Each pool must already be in ranked order.
pub fn recall_at_k(pools: &[Vec<Candidate>], golds: &[Answer], k: usize) -> f64 {
    assert_eq!(pools.len(), golds.len(), "one gold per pool");
    let hits = pools
        .iter()
        .zip(golds)
        .filter(|(p, g)| p.iter().take(k).any(|c| c.answer.as_ref() == Some(g)))
        .count();
    percent(hits, pools.len())
}

/// Percent of items with at least one correct candidate anywhere.
pub fn pass_at_n(pools: &[Vec<Candidate>], golds: &[Answer]) -> f64 {
    let n = pools.iter().map(Vec::len).max().unwrap_or(0);
    recall_at_k(pools, golds, n)
}

/// First-round pools in ranked order (sample order when the round was not
/// ranked), paired with golds. Failed or gold-less episodes are skipped.
pub fn ranked_first_round_pools(traces: &[EpisodeTrace], items: &[McqItem]) -> (Vec<Vec<Candidate>>, Vec<Answer>) {
    let golds: HashMap<&str, &Answer> = items
        .iter()
        .filter_map(|i| i.gold.as_ref().map(|g| (i.id.as_str(), g)))
        .collect();
    let mut pools = Vec::new();
    let mut gs = Vec::new();
    for tr in traces.iter().filter(|t| !t.failed()) {
        let (Some(gold), Some(r)) = (golds.get(tr.item_id.as_str()), tr.rounds.first()) else {
            continue;
        };
        let pool = match &r.ranking {
            Some(order) => order.iter().map(|&i| r.candidates[i].clone()).collect(),
            None => r.candidates.clone(),
        };
        pools.push(pool);
        gs.push((*gold).clone());
    }
    (pools, gs)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Config(format!("{}: {e}", path.display()))
}

pub fn write_items_csv(report: &RunReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record([
        "item_id",
        "final_answer",
        "gold",
        "correct",
        "failed",
        "termination",
        "rounds",
        "retrievals",
        "prompt_tokens",
        "completion_tokens",
    ])
    .map_err(|e| csv_err(path, e))?;
    for r in &report.items {
        let term = serde_json::to_value(r.termination)?;
        w.write_record([
            r.item_id.clone(),
            r.final_answer.clone(),
            r.gold.clone().unwrap_or_default(),
            r.correct.map(|c| c.to_string()).unwrap_or_default(),
            r.failed.to_string(),
            term.as_str().unwrap_or_default().to_string(),
            r.rounds.to_string(),
            r.retrievals.to_string(),
            r.usage.prompt_tokens.to_string(),
            r.usage.completion_tokens.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_accuracy_by_round_csv(report: &RunReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["round", "accuracy", "correct", "evaluated"])
        .map_err(|e| csv_err(path, e))?;
    for r in &report.accuracy_by_round {
        w.write_record([
            r.round.to_string(),
            format!("{:.4}", r.accuracy),
            r.correct.to_string(),
            r.evaluated.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `k,recall_at_k` rows for k = 1..=pool size; the last row is Pass@N.
pub fn write_recall_csv(pools: &[Vec<Candidate>], golds: &[Answer], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["k", "recall_at_k"]).map_err(|e| csv_err(path, e))?;
    let n = pools.iter().map(Vec::len).max().unwrap_or(0);
    for k in 1..=n {
        w.write_record([k.to_string(), format!("{:.4}", recall_at_k(pools, golds, k))])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One line per candidate for building verifier training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateDump {
    pub item_id: String,
    pub question: String,
    pub candidate_text: String,
    /// Parsed label(s), `null` when the answer did not parse.
    pub predicted: Option<String>,
    pub gold: String,
}

/// Every candidate of every round, for items that carry a gold label.
pub fn candidate_dumps(traces: &[EpisodeTrace], items: &[McqItem]) -> Vec<CandidateDump> {
    let by_id: HashMap<&str, &McqItem> = items.iter().map(|i| (i.id.as_str(), i)).collect();
    let mut out = Vec::new();
    for tr in traces {
        let Some(item) = by_id.get(tr.item_id.as_str()) else {
            continue;
        };
        let Some(gold) = &item.gold else {
            continue;
        };
        let question = item.scoring_text();
        for c in tr.rounds.iter().flat_map(|r| &r.candidates) {
            out.push(CandidateDump {
                item_id: item.id.clone(),
                question: question.clone(),
                candidate_text: c.text.clone(),
                predicted: c.answer.as_ref().map(Answer::to_string),
                gold: gold.to_string(),
            });
        }
    }
    out
}

pub fn write_jsonl<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads every `*.jsonl` trace in `dir`, sorted by file name.
pub fn load_traces(dir: &Path) -> Result<Vec<EpisodeTrace>> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let raw = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            EpisodeTrace::from_jsonl(&raw).map_err(|e| match e {
                Error::Record { line, message, .. } => Error::record(p, line, message),
                other => other,
            })
        })
        .collect()
}
