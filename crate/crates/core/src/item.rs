//! Multiple-choice items and answer labels.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// A parsed answer: one option label in single mode, a set in multi mode.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Answer(BTreeSet<char>);

impl Answer {
    pub fn single(label: char) -> Self {
        Self(BTreeSet::from([label]))
    }

    pub fn set(labels: impl IntoIterator<Item = char>) -> Self {
        Self(labels.into_iter().collect())
    }

    pub fn labels(&self) -> &BTreeSet<char> {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Parses `"B"` or `"A,C"`.
    pub fn parse(s: &str) -> Option<Self> {
        let labels: BTreeSet<char> = s
            .split(',')
            .map(str::trim)
            .map(|p| {
                let mut cs = p.chars();
                match (cs.next(), cs.next()) {
                    (Some(c), None) if c.is_ascii_uppercase() => Some(c),
                    _ => None,
                }
            })
            .collect::<Option<_>>()?;
        (!labels.is_empty()).then_some(Self(labels))
    }
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for c in &self.0 {
            if !first {
                f.write_str(",")?;
            }
            write!(f, "{c}")?;
            first = false;
        }
        Ok(())
    }
}

impl Serialize for Answer {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Answer {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        Answer::parse(&raw).ok_or_else(|| serde::de::Error::custom(format!("invalid answer `{raw}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerMode {
    #[default]
    Single,
    Multi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McqItem {
    pub id: String,
    pub question: String,
    pub options: BTreeMap<char, String>,
    pub gold: Option<Answer>,
    #[serde(default)]
    pub answer_mode: AnswerMode,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tags: BTreeMap<String, serde_json::Value>,
}

impl McqItem {
    pub fn labels(&self) -> BTreeSet<char> {
        self.options.keys().copied().collect()
    }

    pub fn is_correct(&self, answer: Option<&Answer>) -> Option<bool> {
        let gold = self.gold.as_ref()?;
        Some(answer == Some(gold))
    }

    /// Options rendered one per line as `A. text`.
    pub fn render_options(&self) -> String {
        self.options
            .iter()
            .map(|(k, v)| format!("{k}. {v}"))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Question plus options, the text a verifier scores answers against.
    pub fn scoring_text(&self) -> String {
        format!("{}\n{}", self.question, self.render_options())
    }

    pub fn validate(&self) -> Result<()> {
        if self.question.trim().is_empty() {
            return Err(Error::Config("empty question".into()));
        }
        let n = self.options.len();
        if !(3..=10).contains(&n) {
            return Err(Error::Config(format!("{n} options, expected 3 to 10")));
        }
        for (i, label) in self.options.keys().enumerate() {
            let want = (b'A' + i as u8) as char;
            if *label != want {
                return Err(Error::Config(format!(
                    "option labels must run A, B, C, ... (found `{label}` where `{want}` was expected)"
                )));
            }
        }
        if let Some(gold) = &self.gold {
            if let Some(bad) = gold.labels().iter().find(|l| !self.options.contains_key(l)) {
                return Err(Error::Config(format!("gold label `{bad}` is not an option")));
            }
            if self.answer_mode == AnswerMode::Single && gold.labels().len() != 1 {
                return Err(Error::Config("single-answer item has several gold labels".into()));
            }
        }
        Ok(())
    }
}
