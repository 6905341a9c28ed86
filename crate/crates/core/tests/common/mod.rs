#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use marag::agents::Candidate;
use marag::item::{Answer, AnswerMode, McqItem};

/// What a test server saw: request path and raw body, in arrival order.
#[derive(Default)]
pub struct Recorded {
    pub requests: Mutex<Vec<(String, String)>>,
    pub count: AtomicUsize,
}

/// Minimal HTTP/1.1 server on an ephemeral port. `handler` gets the
/// zero-based request index, the path and the body, and returns the status
/// and JSON body. Runs until the test process exits.
pub fn serve<F>(handler: F) -> (String, Arc<Recorded>)
where
    F: Fn(usize, &str, &str) -> (u16, String) + Send + Sync + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let rec = Arc::new(Recorded::default());
    let rec2 = rec.clone();
    let handler = Arc::new(handler);
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let rec = rec2.clone();
            let handler = handler.clone();
            thread::spawn(move || {
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut request_line = String::new();
                if reader.read_line(&mut request_line).is_err() {
                    return;
                }
                let path = request_line.split_whitespace().nth(1).unwrap_or("/").to_string();
                let mut len = 0usize;
                loop {
                    let mut h = String::new();
                    if reader.read_line(&mut h).is_err() || h == "\r\n" || h.is_empty() {
                        break;
                    }
                    let lower = h.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap_or(0);
                    }
                }
                let mut body = vec![0u8; len];
                let _ = reader.read_exact(&mut body);
                let body = String::from_utf8_lossy(&body).to_string();
                let idx = rec.count.fetch_add(1, Ordering::SeqCst);
                rec.requests.lock().unwrap().push((path.clone(), body.clone()));
                let (status, out) = handler(idx, &path, &body);
                let resp = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{out}",
                    out.len()
                );
                let _ = stream.write_all(resp.as_bytes());
            });
        }
    });
    (format!("http://{addr}"), rec)
}

/// BM25 straight from the definition: raw term counts, no index.
pub fn bm25_reference(docs: &[(String, String)], query: &str, k1: f64, b: f64) -> BTreeMap<String, f64> {
    let toks = |s: &str| -> Vec<String> {
        s.to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect()
    };
    let doc_toks: Vec<Vec<String>> = docs.iter().map(|(_, t)| toks(t)).collect();
    let n = docs.len() as f64;
    let avgdl = doc_toks.iter().map(|d| d.len() as f64).sum::<f64>() / n;
    let mut q: Vec<String> = toks(query);
    q.sort();
    q.dedup();
    let mut out = BTreeMap::new();
    for (i, (id, _)) in docs.iter().enumerate() {
        let dl = doc_toks[i].len() as f64;
        let mut score = 0.0;
        let mut overlap = false;
        for term in &q {
            let tf = doc_toks[i].iter().filter(|t| *t == term).count() as f64;
            if tf == 0.0 {
                continue;
            }
            overlap = true;
            let df = doc_toks.iter().filter(|d| d.contains(term)).count() as f64;
            let idf = ((n - df + 0.5) / (df + 0.5)).ln().max(0.0);
            score += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / avgdl));
        }
        if overlap {
            out.insert(id.clone(), score);
        }
    }
    out
}

pub fn item(id: &str, n_options: usize, gold: char) -> McqItem {
    McqItem {
        id: id.into(),
        question: format!("Which option is right for case {id}?"),
        options: (0..n_options)
            .map(|i| ((b'A' + i as u8) as char, format!("option {i}")))
            .collect(),
        gold: Some(Answer::single(gold)),
        answer_mode: AnswerMode::Single,
        tags: BTreeMap::new(),
    }
}

pub fn answer_text(label: char, tag: &str) -> String {
    format!("Reasoning {tag}. <answer>{label}</answer>")
}

/// Plain plurality with the smallest-label tie-break; no scores involved.
pub fn plurality(labels: &[Option<char>]) -> Option<char> {
    let mut counts: HashMap<char, usize> = HashMap::new();
    for l in labels.iter().flatten() {
        *counts.entry(*l).or_default() += 1;
    }
    let top = *counts.values().max()?;
    counts.into_iter().filter(|(_, n)| *n == top).map(|(l, _)| l).min()
}

pub fn candidates(labels: &[Option<char>]) -> Vec<Candidate> {
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| Candidate::new(format!("c{i}"), l.map(Answer::single)))
        .collect()
}
