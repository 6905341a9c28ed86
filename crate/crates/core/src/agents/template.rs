//! Minimal `{{placeholder}}` templates with `{{#section}}...{{/section}}`
//! blocks. A section renders once per list item, once for a true flag, and
//! not at all for a false flag or empty list. A line holding only a section
//! tag disappears along with its newline.

use std::collections::HashMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Text(String),
    Var(String),
    Section(String, Vec<Node>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    nodes: Vec<Node>,
}

#[derive(Debug, Clone)]
pub enum Value {
    Text(String),
    Flag(bool),
    List(Vec<Vars>),
}

pub type Vars = HashMap<String, Value>;

enum Tok {
    Text(String),
    Var(String),
    Open(String),
    Close(String),
}

fn tag_name(raw: &str) -> Result<&str> {
    let name = raw.trim();
    if name.is_empty() || !name.chars().all(|c| c.is_alphanumeric() || c == '_') {
        return Err(Error::Template(format!("bad tag `{{{{{raw}}}}}`")));
    }
    Ok(name)
}

fn standalone(line: &str) -> Option<Tok> {
    let t = line.trim();
    let inner = t.strip_prefix("{{")?.strip_suffix("}}")?;
    if inner.contains("{{") || inner.contains("}}") {
        return None;
    }
    if let Some(n) = inner.strip_prefix('#') {
        return Some(Tok::Open(n.trim().to_string()));
    }
    inner.strip_prefix('/').map(|n| Tok::Close(n.trim().to_string()))
}

fn lex(src: &str) -> Result<Vec<Tok>> {
    let mut toks = Vec::new();
    for line in src.split_inclusive('\n') {
        let (body, nl) = match line.strip_suffix('\n') {
            Some(b) => (b, true),
            None => (line, false),
        };
        if let Some(tok) = standalone(body) {
            toks.push(tok);
            continue;
        }
        let mut rest = body;
        while let Some(start) = rest.find("{{") {
            if start > 0 {
                toks.push(Tok::Text(rest[..start].to_string()));
            }
            let after = &rest[start + 2..];
            let end = after
                .find("}}")
                .ok_or_else(|| Error::Template("unclosed `{{`".into()))?;
            let inner = &after[..end];
            toks.push(if let Some(n) = inner.strip_prefix('#') {
                Tok::Open(tag_name(n)?.to_string())
            } else if let Some(n) = inner.strip_prefix('/') {
                Tok::Close(tag_name(n)?.to_string())
            } else {
                Tok::Var(tag_name(inner)?.to_string())
            });
            rest = &after[end + 2..];
        }
        if !rest.is_empty() {
            toks.push(Tok::Text(rest.to_string()));
        }
        if nl {
            toks.push(Tok::Text("\n".into()));
        }
    }
    Ok(toks)
}

fn build(toks: &mut std::vec::IntoIter<Tok>, open: Option<&str>) -> Result<Vec<Node>> {
    let mut nodes = Vec::new();
    while let Some(tok) = toks.next() {
        match tok {
            Tok::Text(t) => match nodes.last_mut() {
                Some(Node::Text(prev)) => prev.push_str(&t),
                _ => nodes.push(Node::Text(t)),
            },
            Tok::Var(v) => nodes.push(Node::Var(v)),
            Tok::Open(name) => {
                let children = build(toks, Some(&name))?;
                nodes.push(Node::Section(name, children));
            }
            Tok::Close(name) => {
                return match open {
                    Some(o) if o == name => Ok(nodes),
                    _ => Err(Error::Template(format!("unexpected `{{{{/{name}}}}}`"))),
                };
            }
        }
    }
    match open {
        Some(o) => Err(Error::Template(format!("section `{o}` is never closed"))),
        None => Ok(nodes),
    }
}

impl Template {
    pub fn parse(src: &str) -> Result<Self> {
        let mut toks = lex(src)?.into_iter();
        Ok(Self {
            nodes: build(&mut toks, None)?,
        })
    }

    pub fn render(&self, vars: &Vars) -> Result<String> {
        let mut out = String::new();
        render_nodes(&self.nodes, &[vars], &mut out)?;
        Ok(out)
    }

    /// Every placeholder and section name the template refers to.
    pub fn names(&self) -> Vec<String> {
        fn walk(nodes: &[Node], out: &mut Vec<String>) {
            for n in nodes {
                match n {
                    Node::Text(_) => {}
                    Node::Var(v) => out.push(v.clone()),
                    Node::Section(s, c) => {
                        out.push(s.clone());
                        walk(c, out);
                    }
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.nodes, &mut out);
        out
    }
}

fn lookup<'a>(scopes: &[&'a Vars], name: &str) -> Option<&'a Value> {
    scopes.iter().rev().find_map(|s| s.get(name))
}

fn render_nodes(nodes: &[Node], scopes: &[&Vars], out: &mut String) -> Result<()> {
    for node in nodes {
        match node {
            Node::Text(t) => out.push_str(t),
            Node::Var(name) => match lookup(scopes, name) {
                Some(Value::Text(s)) => out.push_str(s),
                Some(_) => return Err(Error::Template(format!("`{name}` is not a text value"))),
                None => return Err(Error::Placeholder(name.clone())),
            },
            Node::Section(name, children) => match lookup(scopes, name) {
                Some(Value::Flag(true)) => render_nodes(children, scopes, out)?,
                Some(Value::Flag(false)) => {}
                Some(Value::List(items)) => {
                    for item in items {
                        let mut inner = scopes.to_vec();
                        inner.push(item);
                        render_nodes(children, &inner, out)?;
                    }
                }
                Some(Value::Text(_)) => {
                    return Err(Error::Template(format!("section `{name}` bound to text")))
                }
                None => return Err(Error::Placeholder(name.clone())),
            },
        }
    }
    Ok(())
}

pub fn text(s: impl Into<String>) -> Value {
    Value::Text(s.into())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars(pairs: &[(&str, Value)]) -> Vars {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn substitutes_and_reports_missing() {
        let t = Template::parse("Q: {{question}}\n").unwrap();
        assert_eq!(t.render(&vars(&[("question", text("why?"))])).unwrap(), "Q: why?\n");
        let err = t.render(&Vars::new()).unwrap_err();
        assert!(matches!(err, Error::Placeholder(ref p) if p == "question"));
    }

    #[test]
    fn standalone_section_lines_vanish() {
        let t = Template::parse("a\n{{#on}}\nb\n{{/on}}\nc\n").unwrap();
        assert_eq!(t.render(&vars(&[("on", Value::Flag(true))])).unwrap(), "a\nb\nc\n");
        assert_eq!(t.render(&vars(&[("on", Value::Flag(false))])).unwrap(), "a\nc\n");
    }

    #[test]
    fn lists_repeat_with_item_scope() {
        let t = Template::parse("{{#xs}}\n{{i}}. {{v}} ({{outer}})\n{{/xs}}").unwrap();
        let items = vec![
            vars(&[("i", text("1")), ("v", text("a"))]),
            vars(&[("i", text("2")), ("v", text("b"))]),
        ];
        let out = t
            .render(&vars(&[("xs", Value::List(items)), ("outer", text("o"))]))
            .unwrap();
        assert_eq!(out, "1. a (o)\n2. b (o)\n");
    }

    #[test]
    fn unbalanced_sections_are_rejected() {
        assert!(Template::parse("{{#a}}x").is_err());
        assert!(Template::parse("x{{/a}}").is_err());
        assert!(Template::parse("{{#a}}x{{/b}}").is_err());
        assert!(Template::parse("{{ oops").is_err());
    }
}
