mod common;

use std::collections::{BTreeSet, HashSet};
use std::sync::Arc;

use proptest::prelude::*;

use marag::agents::{hybrid_scores, parse_answer, rank_history, rank_order, Candidate, ScoreKind};
use marag::engine::consensus_gate;
use marag::eval::{pass_at_n, recall_at_k};
use marag::index::{tokenize, Document, InvertedIndex};
use marag::item::{Answer, AnswerMode};
use marag::retrieval::{next_document_context, ContextDoc, ContextMode, DocumentContext, Provenance, QuerySet, RetrievalBudgets, Retriever};

const VOCAB: &[&str] = &[
    "fever", "rash", "child", "aspirin", "insulin", "heart", "kidney", "liver", "dose", "acute", "chronic", "pain",
];

fn text_strategy() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(VOCAB), 1..12).prop_map(|w| w.join(" "))
}

fn corpus_strategy() -> impl Strategy<Value = Vec<(String, String, String)>> {
    prop::collection::vec((0..4usize, text_strategy()), 1..25).prop_map(|docs| {
        docs.into_iter()
            .enumerate()
            .map(|(i, (sc, t))| (format!("d{i:03}"), format!("sc{sc}"), t))
            .collect()
    })
}

fn build(docs: &[(String, String, String)]) -> InvertedIndex {
    let mut idx = InvertedIndex::new();
    idx.add_documents(docs.iter().map(|(id, sc, t)| Document::new(id.clone(), sc.clone(), "", t.clone())).collect())
        .unwrap();
    idx
}

fn cdoc(id: String) -> ContextDoc {
    ContextDoc {
        doc: Document::new(id.clone(), "c", "", id),
        provenance: Provenance {
            source_query: Some(0),
            pre_rerank_rank: 1,
            rerank_score: None,
        },
    }
}

proptest! {
    #[test]
    fn tokens_are_lowercase_alphanumeric(s in "\\PC{0,60}") {
        for t in tokenize(&s) {
            prop_assert!(!t.is_empty());
            prop_assert!(t.chars().all(char::is_alphanumeric));
            prop_assert_eq!(t.to_lowercase(), t.clone());
        }
        let again = tokenize(&tokenize(&s).join(" "));
        prop_assert_eq!(again, tokenize(&s));
    }

    #[test]
    fn search_matches_reference(docs in corpus_strategy(), q in text_strategy()) {
        let idx = build(&docs);
        let pairs: Vec<(String, String)> = docs.iter().map(|(id, _, t)| (id.clone(), t.clone())).collect();
        let want = common::bm25_reference(&pairs, &q, 1.2, 0.75);
        let hits = idx.search(&q, None, docs.len());
        prop_assert_eq!(hits.len(), want.len());
        for (i, h) in hits.iter().enumerate() {
            prop_assert_eq!(h.rank, i + 1);
            prop_assert!((h.score - want[&h.doc_id]).abs() < 1e-9);
            if i > 0 {
                let prev = &hits[i - 1];
                prop_assert!(prev.score > h.score || (prev.score == h.score && prev.doc_id < h.doc_id));
            }
        }
    }

    #[test]
    fn filtered_search_uses_sub_corpus_statistics(docs in corpus_strategy(), q in text_strategy()) {
        let idx = build(&docs);
        let sub: Vec<(String, String)> = docs.iter().filter(|d| d.1 == "sc0").map(|(id, _, t)| (id.clone(), t.clone())).collect();
        let hits = idx.search(&q, Some("sc0"), 100);
        if sub.is_empty() {
            prop_assert!(hits.is_empty());
        } else {
            let want = common::bm25_reference(&sub, &q, 1.2, 0.75);
            prop_assert_eq!(hits.len(), want.len());
            for h in &hits {
                prop_assert!((h.score - want[&h.doc_id]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn snapshot_round_trip_preserves_search(docs in corpus_strategy(), q in text_strategy()) {
        let idx = build(&docs);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("snap");
        idx.save_snapshot(&p).unwrap();
        let back = InvertedIndex::load_snapshot(&p).unwrap();
        prop_assert_eq!(back.search(&q, None, 10), idx.search(&q, None, 10));
        prop_assert_eq!(back.stats(), idx.stats());
    }

    #[test]
    fn round_budgets_hold(docs in corpus_strategy(), qs in prop::collection::vec(text_strategy(), 1..5), per_query in 1..4usize, global in 1..10usize) {
        let r = Retriever::new(Arc::new(build(&docs)));
        let budgets = RetrievalBudgets { per_corpus_k: 32, per_query, global };
        let out = r.retrieve_round(&QuerySet { round: 1, queries: qs.clone() }, budgets);
        prop_assert!(out.docs.len() <= global);
        let ids: HashSet<_> = out.docs.iter().map(|d| d.doc.doc_id.clone()).collect();
        prop_assert_eq!(ids.len(), out.docs.len());
        for qi in 0..qs.len() {
            let n = out.docs.iter().filter(|d| d.provenance.source_query == Some(qi)).count();
            prop_assert!(n <= per_query);
        }
        // source queries appear in query order
        let srcs: Vec<usize> = out.docs.iter().map(|d| d.provenance.source_query.unwrap()).collect();
        prop_assert!(srcs.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn context_never_exceeds_budget(
        mode in prop::sample::select(vec![ContextMode::None, ContextMode::Static, ContextMode::Dynamic, ContextMode::Hybrid]),
        init in prop::collection::vec(0..20u8, 0..10),
        new in prop::collection::vec(0..20u8, 0..12),
        budget in 1..10usize,
    ) {
        let mut seen = HashSet::new();
        let initial = DocumentContext {
            round: 1,
            docs: init.into_iter().filter(|i| seen.insert(*i)).map(|i| cdoc(format!("x{i}"))).take(budget).collect(),
        };
        let newly: Vec<ContextDoc> = new.into_iter().map(|i| cdoc(format!("x{i}"))).collect();
        let next = next_document_context(mode, &initial, &initial, &newly, budget);
        prop_assert!(next.len() <= budget);
        let ids: HashSet<_> = next.doc_ids().into_iter().collect();
        prop_assert_eq!(ids.len(), next.len());
        if mode == ContextMode::Dynamic {
            let other = DocumentContext { round: 1, docs: vec![cdoc("zz".into())] };
            prop_assert_eq!(next_document_context(mode, &initial, &other, &newly, budget).doc_ids(), next.doc_ids());
        }
    }

    #[test]
    fn ranking_is_a_permutation_and_transform_invariant(
        scores in prop::collection::vec(prop::option::weighted(0.9, -5.0..5.0f64), 1..20),
        a in 0.1..10.0f64,
        c in -10.0..10.0f64,
    ) {
        let mk = |f: &dyn Fn(f64) -> f64| -> Vec<Candidate> {
            scores.iter().enumerate().map(|(i, s)| {
                let mut cand = Candidate::new(format!("c{i}"), None);
                cand.scores.intrinsic = s.map(f);
                cand
            }).collect()
        };
        let base = mk(&|x| x);
        let order = rank_order(&base, ScoreKind::Intrinsic);
        let mut sorted = order.clone();
        sorted.sort();
        prop_assert_eq!(sorted, (0..scores.len()).collect::<Vec<_>>());
        let g = |x: f64| a * x.powi(3) + a * x + c;
        prop_assert_eq!(rank_order(&mk(&g), ScoreKind::Intrinsic), order.clone());

        let hist = rank_history(1, base.clone(), ScoreKind::Intrinsic);
        prop_assert_eq!(hist.entries.len(), base.len());
        for (pos, e) in hist.entries.iter().enumerate() {
            prop_assert_eq!(&e.text, &base[order[pos]].text);
            prop_assert!(e.display_score.unwrap() <= 10);
            if e.scores.intrinsic.is_none() {
                prop_assert_eq!(e.display_score, Some(0));
            }
        }
    }

    #[test]
    fn hybrid_stays_in_range(pairs in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64), 1..12)) {
        let (i, e): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        for h in hybrid_scores(&i, &e) {
            prop_assert!((0.0..=2.0).contains(&h));
        }
    }

    #[test]
    fn gate_is_monotone_in_epsilon(labels in prop::collection::vec(prop::option::weighted(0.85, 0..4u8), 1..12), e1 in 0.01..1.0f64, e2 in 0.01..1.0f64) {
        let labels: Vec<Option<char>> = labels.into_iter().map(|l| l.map(|x| (b'A' + x) as char)).collect();
        let cands = common::candidates(&labels);
        let (lo, hi) = if e1 < e2 { (e1, e2) } else { (e2, e1) };
        if consensus_gate(&cands, hi).is_stop() {
            prop_assert!(consensus_gate(&cands, lo).is_stop());
        }
    }

    #[test]
    fn rendered_answers_parse_back(n in 3..10u8, pick in prop::collection::btree_set(0..10u8, 1..4), noise in "[a-z ]{0,40}") {
        let labels: BTreeSet<char> = (0..n).map(|i| (b'A' + i) as char).collect();
        let chosen: Vec<char> = pick.into_iter().filter(|i| *i < n).map(|i| (b'A' + i) as char).collect();
        prop_assume!(!chosen.is_empty());
        let single = format!("{noise} <answer>{}</answer>", chosen[0]);
        prop_assert_eq!(parse_answer(&single, &labels, AnswerMode::Single), Some(Answer::single(chosen[0])));
        let set = Answer::set(chosen.iter().copied());
        let multi = format!("{noise} <answer>{set}</answer>");
        prop_assert_eq!(parse_answer(&multi, &labels, AnswerMode::Multi), Some(set));
    }

    #[test]
    fn recall_is_monotone_and_ends_at_pass(pools in prop::collection::vec(prop::collection::vec(prop::option::of(0..4u8), 1..10), 1..20)) {
        let pools: Vec<Vec<Candidate>> = pools.iter().map(|p| {
            common::candidates(&p.iter().map(|l| l.map(|x| (b'A' + x) as char)).collect::<Vec<_>>())
        }).collect();
        let golds = vec![Answer::single('A'); pools.len()];
        let max = pools.iter().map(Vec::len).max().unwrap();
        let mut prev = 0.0;
        for k in 1..=max {
            let r = recall_at_k(&pools, &golds, k);
            prop_assert!(r >= prev);
            prev = r;
        }
        prop_assert_eq!(prev, pass_at_n(&pools, &golds));
    }
}
