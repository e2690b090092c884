//! Scoring of predicted SPARQL queries: BLEU on the query text and
//! execution-based accuracy and F1 on the answers.

mod bleu;
mod exec;
mod mock;

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bleu::{bleu, corpus_bleu, tokenize as bleu_tokenize, BleuStats, MAX_ORDER};
pub use exec::{
    canonical_term, local_id, parse_sparql_json, AnswerCache, AnswerSet, CachedExecutor, ExecFailure, ExecOutcome,
    ExecStatus, HttpSparqlEndpoint, SparqlExecutor,
};
pub use mock::{answers_document, MockEntry, MockMap, MockSparqlServer};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Set precision, recall and F1 over canonical answers. Two empty sets agree
/// perfectly; F1 is `2|P∩G| / (|P|+|G|)`, which is symmetric by construction.
pub fn answer_f1(pred: &AnswerSet, gold: &AnswerSet) -> Prf {
    let (p, g) = (pred.as_set(), gold.as_set());
    if p.is_empty() && g.is_empty() {
        return Prf {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        };
    }
    let tp = p.intersection(&g).count() as f64;
    let ratio = |num: f64, den: usize| if den == 0 { 0.0 } else { num / den as f64 };
    Prf {
        precision: ratio(tp, p.len()),
        recall: ratio(tp, g.len()),
        f1: 2.0 * tp / (p.len() + g.len()) as f64,
    }
}

/// 1 when the canonical answer sets are identical, else 0.
pub fn answer_accuracy(pred: &AnswerSet, gold: &AnswerSet) -> f64 {
    if pred.as_set() == gold.as_set() {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldEntry {
    pub uid: String,
    pub sparql: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryScore {
    pub uid: String,
    pub bleu: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub pred_status: ExecStatus,
    pub gold_status: ExecStatus,
    /// Both answer sets empty, scored as agreement.
    #[serde(default)]
    pub both_empty: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub entries: usize,
    pub corpus_bleu: f64,
    pub mean_bleu: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub pred_status: BTreeMap<String, usize>,
    pub gold_status: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub endpoint: String,
    pub timeout_ms: u64,
    #[serde(default)]
    pub answer_cache: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_entry: Vec<EntryScore>,
    pub aggregate: Aggregate,
    pub config: EvalConfig,
    /// Set when the endpoint was unreachable and scoring went ahead anyway.
    #[serde(default)]
    pub partial: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub workers: usize,
    /// Return a report even when the endpoint could not be reached at all.
    pub allow_partial: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            workers: 4,
            allow_partial: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("SPARQL endpoint {endpoint} is unreachable ({failed} executions failed); rerun with partial reports allowed to score anyway")]
    Unreachable {
        endpoint: String,
        failed: usize,
        partial: Box<EvalReport>,
    },
}

fn status_key(s: ExecStatus) -> String {
    serde_json::to_value(s)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn score_entry(uid: &str, pred: Option<&str>, gold_query: &str, pred_out: Option<&ExecOutcome>, gold_out: &ExecOutcome) -> EntryScore {
    let mut s = EntryScore {
        uid: uid.to_string(),
        bleu: pred.map_or(0.0, |p| bleu(p, gold_query)),
        accuracy: 0.0,
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
        pred_status: ExecStatus::Ok,
        gold_status: ExecStatus::Ok,
        both_empty: false,
        message: None,
    };
    if let Err(f) = gold_out {
        s.gold_status = f.status;
        s.message = Some(format!("gold: {}", f.message));
    }
    match pred_out {
        None => s.pred_status = ExecStatus::Missing,
        Some(Err(f)) => {
            s.pred_status = f.status;
            s.message.get_or_insert_with(|| format!("prediction: {}", f.message));
        }
        Some(Ok(p)) => {
            if let Ok(g) = gold_out {
                let prf = answer_f1(p, g);
                s.accuracy = answer_accuracy(p, g);
                s.precision = prf.precision;
                s.recall = prf.recall;
                s.f1 = prf.f1;
                s.both_empty = p.as_set().is_empty() && g.as_set().is_empty();
            }
        }
    }
    s
}

/// Scores every gold entry. Missing predictions and failed executions score
/// zero and carry their status. Each distinct query runs once.
pub fn evaluate_run(
    predictions: &BTreeMap<String, String>,
    gold: &[GoldEntry],
    executor: &dyn SparqlExecutor,
    config: EvalConfig,
    opts: EvalOptions,
) -> Result<EvalReport, EvalError> {
    use rayon::prelude::*;

    let mut distinct: Vec<&str> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for g in gold {
        let queries = std::iter::once(g.sparql.as_str()).chain(predictions.get(&g.uid).map(String::as_str));
        for q in queries {
            let key = crate::framenet::normalize_space(q);
            if seen.insert(key) {
                distinct.push(q);
            }
        }
    }
    let run = || -> Vec<ExecOutcome> { distinct.par_iter().map(|q| executor.execute(q)).collect() };
    let outcomes = match rayon::ThreadPoolBuilder::new().num_threads(opts.workers.max(1)).build() {
        Ok(pool) => pool.install(run),
        Err(_) => run(),
    };
    let unreachable = outcomes
        .iter()
        .filter(|o| matches!(o, Err(f) if f.status == ExecStatus::Unreachable))
        .count();
    let by_query: HashMap<String, ExecOutcome> = distinct
        .iter()
        .map(|q| crate::framenet::normalize_space(q))
        .zip(outcomes)
        .collect();

    let per_entry: Vec<EntryScore> = gold
        .iter()
        .map(|g| {
            let pred = predictions.get(&g.uid).map(String::as_str);
            let gold_out = &by_query[&crate::framenet::normalize_space(&g.sparql)];
            let pred_out = pred.map(|p| &by_query[&crate::framenet::normalize_space(p)]);
            score_entry(&g.uid, pred, &g.sparql, pred_out, gold_out)
        })
        .collect();

    let n = per_entry.len();
    let mean = |f: &dyn Fn(&EntryScore) -> f64| if n == 0 { 0.0 } else { per_entry.iter().map(f).sum::<f64>() / n as f64 };
    let mut aggregate = Aggregate {
        entries: n,
        corpus_bleu: corpus_bleu(
            gold.iter()
                .map(|g| (predictions.get(&g.uid).map_or("", String::as_str), g.sparql.as_str())),
        ),
        mean_bleu: mean(&|e| e.bleu),
        accuracy: mean(&|e| e.accuracy),
        precision: mean(&|e| e.precision),
        recall: mean(&|e| e.recall),
        f1: mean(&|e| e.f1),
        ..Default::default()
    };
    for e in &per_entry {
        *aggregate.pred_status.entry(status_key(e.pred_status)).or_default() += 1;
        *aggregate.gold_status.entry(status_key(e.gold_status)).or_default() += 1;
    }
    let fully_unreachable = !by_query.is_empty() && unreachable == by_query.len();
    let report = EvalReport {
        per_entry,
        aggregate,
        config,
        partial: fully_unreachable,
    };
    if fully_unreachable && !opts.allow_partial {
        return Err(EvalError::Unreachable {
            endpoint: executor.endpoint(),
            failed: unreachable,
            partial: Box::new(report),
        });
    }
    Ok(report)
}

impl EvalReport {
    /// Aggregate table with BLEU, accuracy and F1 columns (percent scale).
    pub fn render_table(&self) -> String {
        let a = &self.aggregate;
        let mut out = String::new();
        let _ = writeln!(out, "{:>8} {:>10} {:>9} {:>8} {:>8}", "Entries", "BLEU", "BLEU-avg", "Accuracy", "F1");
        let _ = writeln!(
            out,
            "{:>8} {:>10.2} {:>9.2} {:>8.2} {:>8.2}",
            a.entries,
            a.corpus_bleu,
            a.mean_bleu,
            100.0 * a.accuracy,
            100.0 * a.f1
        );
        let statuses: Vec<String> = a.pred_status.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let _ = writeln!(out, "prediction status: {}", statuses.join(" "));
        out
    }
}
