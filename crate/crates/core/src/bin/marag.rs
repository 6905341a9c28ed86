use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use marag::config::RunConfig;
use marag::engine::EpisodeTrace;
use marag::eval::{self, RunReport};
use marag::retrieval::ContextMode;
use marag::agents::ScoreKind;
use marag::InvertedIndex;

#[derive(Parser)]
#[command(name = "marag", version, about = "Multi-round agentic RAG for multiple-choice QA")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Corpus index management.
    Index {
        #[command(subcommand)]
        cmd: IndexCmd,
    },
    /// Answer one question and print a trace summary.
    Run {
        #[arg(long)]
        question_file: PathBuf,
        /// Directory for the episode trace and request log.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[command(flatten)]
        opts: RunOpts,
    },
    /// Run a dataset and write report files.
    Bench {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Write every sampled candidate as JSONL for verifier training.
        #[arg(long)]
        dump_candidates: Option<PathBuf>,
        #[command(flatten)]
        opts: RunOpts,
    },
    /// Recompute report files from a directory of saved traces.
    Report {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum IndexCmd {
    /// Ingest corpus JSONL files and write a snapshot.
    Build {
        #[arg(long = "corpus", required = true)]
        corpora: Vec<PathBuf>,
        /// Tag every ingested record with this sub-corpus.
        #[arg(long)]
        sub_corpus: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Flags that override the run config.
#[derive(Args)]
struct RunOpts {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scripted mock backend instead of the HTTP endpoint.
    #[arg(long)]
    mock: Option<PathBuf>,
    #[arg(long = "corpus")]
    corpora: Vec<PathBuf>,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    context_mode: Option<ContextMode>,
    #[arg(long)]
    score: Option<ScoreKind>,
    #[arg(long)]
    max_rounds: Option<usize>,
    #[arg(long)]
    num_candidates: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    analysis_mode: bool,
    #[arg(long)]
    scorer_url: Option<String>,
    #[arg(long)]
    reranker_url: Option<String>,
}

impl RunOpts {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(m) = &self.mock {
            cfg.backend.mock_script = Some(m.clone());
        }
        if !self.corpora.is_empty() {
            cfg.corpus.paths = self.corpora.clone();
        }
        if let Some(i) = &self.index {
            cfg.corpus.index = Some(i.clone());
        }
        let l = &mut cfg.loop_;
        if let Some(v) = self.context_mode {
            l.context_mode = v;
        }
        if let Some(v) = self.score {
            l.score = v;
        }
        if let Some(v) = self.max_rounds {
            l.max_rounds = v;
        }
        if let Some(v) = self.num_candidates {
            l.num_candidates = v;
        }
        if let Some(v) = self.epsilon {
            l.epsilon = v;
        }
        if let Some(v) = self.seed {
            l.sampling.seed = Some(v);
        }
        if self.analysis_mode {
            l.analysis_mode = true;
        }
        if let Some(v) = self.parallelism {
            cfg.parallelism = v;
        }
        if let Some(u) = &self.scorer_url {
            cfg.scorer.url = Some(u.clone());
        }
        if let Some(u) = &self.reranker_url {
            cfg.corpus.reranker_url = Some(u.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Distinguishes bad configuration (exit 1) from episode failures (exit 2).
enum Outcome {
    Ok,
    PartialFailure,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::PartialFailure) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {}", render_chain(&e));
            ExitCode::from(1)
        }
    }
}

/// Like `{:#}`, but library errors already embed their cause in the
/// message, so skip causes the previous link already printed.
fn render_chain(e: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut prev = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !prev.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
        prev = msg;
    }
    out
}

fn dispatch(cli: Cli) -> Result<Outcome> {
    match cli.cmd {
        Command::Index {
            cmd: IndexCmd::Build { corpora, sub_corpus, out },
        } => index_build(&corpora, sub_corpus.as_deref(), &out),
        Command::Run {
            question_file,
            trace,
            opts,
        } => run(&question_file, trace.as_deref(), &opts),
        Command::Bench {
            dataset,
            out,
            dump_candidates,
            opts,
        } => bench(&dataset, &out, dump_candidates.as_deref(), &opts),
        Command::Report { traces, dataset, out } => report(&traces, &dataset, &out),
    }
}

fn index_build(corpora: &[PathBuf], sub_corpus: Option<&str>, out: &Path) -> Result<Outcome> {
    let mut index = InvertedIndex::new();
    for p in corpora {
        index.ingest_corpus(p, sub_corpus)?;
    }
    index.save_snapshot(out)?;
    let stats = index.stats();
    println!(
        "indexed {} docs, {} terms, avg length {:.1}",
        stats.num_docs, stats.num_terms, stats.avg_doc_len
    );
    for (name, n) in &stats.per_sub_corpus_counts {
        println!("  {name}: {n}");
    }
    Ok(Outcome::Ok)
}

fn run(question_file: &Path, trace_dir: Option<&Path>, opts: &RunOpts) -> Result<Outcome> {
    let cfg = opts.resolve()?;
    let item = eval::load_question(question_file)?;
    let engine = cfg.build_engine()?;
    let trace = engine.run_episode(&item);
    print_summary(&trace);

    if let Some(dir) = trace_dir.or(cfg.trace_dir.as_deref()) {
        let path = trace.write_to_dir(dir)?;
        engine.gateway().write_request_log(&dir.join("requests.jsonl"))?;
        info!("trace written to {}", path.display());
    }
    Ok(if trace.failed() {
        Outcome::PartialFailure
    } else {
        Outcome::Ok
    })
}

fn print_summary(trace: &EpisodeTrace) {
    println!("item {}", trace.item_id);
    for r in &trace.rounds {
        let mut votes: BTreeMap<String, usize> = BTreeMap::new();
        for c in &r.candidates {
            let label = c.answer.as_ref().map_or_else(|| "-".to_string(), |a| a.to_string());
            *votes.entry(label).or_default() += 1;
        }
        let votes: Vec<String> = votes.iter().map(|(k, v)| format!("{k}:{v}")).collect();
        let gate = if r.gate.is_stop() { "stop" } else { "continue" };
        println!(
            "  round {}  votes [{}]  gate {}  docs in {}  queries {}  retrieved {}",
            r.round,
            votes.join(" "),
            gate,
            r.context_doc_ids.len(),
            r.queries.as_ref().map_or(0, Vec::len),
            r.retrieved_doc_ids.len()
        );
        for w in &r.warnings {
            println!("    warning: {w}");
        }
    }
    let term = serde_json::to_value(trace.termination).unwrap_or_default();
    println!(
        "final {}  ({}, {} rounds)",
        trace.final_label(),
        term.as_str().unwrap_or_default(),
        trace.rounds.len()
    );
    if let Some(e) = &trace.error {
        println!("error: {e}");
    }
}

fn write_reports(report: &RunReport, traces: &[EpisodeTrace], items: &[marag::McqItem], out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("report.json"), serde_json::to_string_pretty(report)?)?;
    eval::write_items_csv(report, &out.join("items.csv"))?;
    eval::write_accuracy_by_round_csv(report, &out.join("accuracy_by_round.csv"))?;
    let (pools, golds) = eval::ranked_first_round_pools(traces, items);
    eval::write_recall_csv(&pools, &golds, &out.join("recall_at_k.csv"))?;
    println!(
        "accuracy {:.2}% ({}/{}), failed {}, mean rounds {:.2}",
        report.accuracy, report.correct, report.evaluated, report.failed, report.mean_rounds
    );
    for w in &report.warnings {
        warn!("{w}");
    }
    Ok(())
}

fn bench(dataset: &Path, out: &Path, dump: Option<&Path>, opts: &RunOpts) -> Result<Outcome> {
    let cfg = opts.resolve()?;
    let items = eval::load_dataset(dataset)?;
    if items.is_empty() {
        bail!("dataset {} is empty", dataset.display());
    }
    let engine = cfg.build_engine()?;
    let traces = engine.run_batch(&items, cfg.parallelism);

    let trace_dir = cfg.trace_dir.clone().unwrap_or_else(|| out.join("traces"));
    for t in &traces {
        t.write_to_dir(&trace_dir)?;
    }
    let mut report = eval::evaluate(&traces, &items);
    report.config = Some(serde_json::to_value(&cfg)?);
    write_reports(&report, &traces, &items, out)?;
    if let Some(p) = dump {
        eval::write_jsonl(&eval::candidate_dumps(&traces, &items), p)?;
    }
    Ok(if report.failed > 0 {
        Outcome::PartialFailure
    } else {
        Outcome::Ok
    })
}

fn report(trace_dir: &Path, dataset: &Path, out: &Path) -> Result<Outcome> {
    let items = eval::load_dataset(dataset)?;
    let traces = eval::load_traces(trace_dir)?;
    if traces.is_empty() {
        bail!("no traces found in {}", trace_dir.display());
    }
    let report = eval::evaluate(&traces, &items);
    write_reports(&report, &traces, &items, out)?;
    Ok(Outcome::Ok)
}
