use std::collections::{BTreeSet, HashSet};
use std::sync::OnceLock;

use regex::Regex;

use crate::item::{Answer, AnswerMode};
use crate::retrieval::QuerySet;

fn answer_tag() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?is)<answer>(.*?)</answer>").unwrap())
}

fn single_label() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\(?([A-Z])\)?(?:\s*[.:)\-]\s*.*)?$").unwrap())
}

fn query_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)^[\s`*>#-]*\[\s*query\s*(\d+)\s*\][`*:\s]*(.*)$").unwrap())
}

fn label_token(tok: &str) -> Option<char> {
    let t = tok.trim_matches(|c: char| c == '(' || c == ')' || c == '.');
    let mut cs = t.chars();
    match (cs.next(), cs.next()) {
        (Some(c), None) if c.is_ascii_uppercase() => Some(c),
        _ => None,
    }
}

/// Answer in the last `<answer>...</answer>` tag, if it names valid options.
pub fn parse_answer(text: &str, labels: &BTreeSet<char>, mode: AnswerMode) -> Option<Answer> {
    let inner = answer_tag().captures_iter(text).last()?.get(1)?.as_str().trim();
    match mode {
        AnswerMode::Single => {
            let c = single_label().captures(inner)?.get(1)?.as_str().chars().next()?;
            labels.contains(&c).then(|| Answer::single(c))
        }
        AnswerMode::Multi => {
            let picked: BTreeSet<char> = inner
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|t| !t.is_empty())
                .map(label_token)
                .collect::<Option<_>>()?;
            (!picked.is_empty() && picked.is_subset(labels)).then(|| Answer::set(picked))
        }
    }
}

/// `[Query k] ...` lines in index order, trimmed and de-duplicated, capped
/// at `k_max`. Falls back to the question itself when nothing parses.
pub fn parse_queries(text: &str, k_max: usize, round: usize, question: &str) -> QuerySet {
    let mut found: Vec<(usize, String)> = text
        .lines()
        .filter_map(|line| {
            let caps = query_line().captures(line)?;
            let idx: usize = caps[1].parse().ok()?;
            let q = caps[2].trim().trim_matches('`').trim().to_string();
            (!q.is_empty()).then_some((idx, q))
        })
        .collect();
    found.sort_by_key(|(i, _)| *i);

    let mut seen = HashSet::new();
    let mut queries: Vec<String> = found
        .into_iter()
        .map(|(_, q)| q)
        .filter(|q| seen.insert(q.to_lowercase()))
        .take(k_max.max(1))
        .collect();
    if queries.is_empty() {
        queries.push(question.trim().to_string());
    }
    QuerySet { round, queries }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: u8) -> BTreeSet<char> {
        (0..n).map(|i| (b'A' + i) as char).collect()
    }

    #[test]
    fn extracts_tagged_label() {
        let got = parse_answer("...therefore <answer>C</answer>", &labels(5), AnswerMode::Single);
        assert_eq!(got, Some(Answer::single('C')));
    }

    #[test]
    fn last_tag_wins() {
        let got = parse_answer("<answer>A</answer> ... <answer>B</answer>", &labels(4), AnswerMode::Single);
        assert_eq!(got, Some(Answer::single('B')));
    }

    #[test]
    fn invalid_label_is_none() {
        assert_eq!(parse_answer("<answer>Z</answer>", &labels(4), AnswerMode::Single), None);
        assert_eq!(parse_answer("no tag, just C", &labels(4), AnswerMode::Single), None);
        assert_eq!(parse_answer("<answer>A, B</answer>", &labels(4), AnswerMode::Single), None);
    }

    #[test]
    fn tolerates_decorated_single_labels() {
        for s in ["<answer> C </answer>", "<answer>(C)</answer>", "<answer>C. Heparin</answer>", "<ANSWER>C</ANSWER>"] {
            assert_eq!(parse_answer(s, &labels(4), AnswerMode::Single), Some(Answer::single('C')), "{s}");
        }
    }

    #[test]
    fn multi_mode_sets() {
        let got = parse_answer("<answer>A, C</answer>", &labels(5), AnswerMode::Multi);
        assert_eq!(got, Some(Answer::set(['A', 'C'])));
        assert_eq!(
            parse_answer("<answer>C A</answer>", &labels(5), AnswerMode::Multi),
            Some(Answer::set(['A', 'C']))
        );
        assert_eq!(parse_answer("<answer>A, Q</answer>", &labels(5), AnswerMode::Multi), None);
        assert_eq!(parse_answer("<answer></answer>", &labels(5), AnswerMode::Multi), None);
    }

    #[test]
    fn queries_in_index_order() {
        let text = "Some analysis.\n[Query 2] beta blocker asthma\n[Query 1] aspirin dose\n[Query 3] x\n[Query 4] y\n";
        let qs = parse_queries(text, 4, 1, "question?");
        assert_eq!(qs.queries, ["aspirin dose", "beta blocker asthma", "x", "y"]);
    }

    #[test]
    fn query_fallback_to_question() {
        let qs = parse_queries("I think the answer is B.", 4, 2, " What is X? ");
        assert_eq!(qs.queries, ["What is X?"]);
        assert_eq!(qs.round, 2);
    }

    #[test]
    fn queries_truncated_and_deduped() {
        let text = (1..=6).map(|i| format!("[Query {i}] q{i}")).collect::<Vec<_>>().join("\n");
        assert_eq!(parse_queries(&text, 4, 1, "").queries, ["q1", "q2", "q3", "q4"]);
        let text = "[Query 1] same\n[Query 2] Same\n[Query 3] other";
        assert_eq!(parse_queries(text, 4, 1, "").queries, ["same", "other"]);
        let text = "**[Query 1]** `markdown decorated`";
        assert_eq!(parse_queries(text, 4, 1, "").queries, ["markdown decorated"]);
    }
}
