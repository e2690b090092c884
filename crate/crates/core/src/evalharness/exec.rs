//! Query execution against SPARQL endpoints, with a JSON-lines answer cache.

use std::collections::{BTreeSet, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::framenet::normalize_space;
use crate::transport::{send_with_retry, HttpRequest, RateLimited, RetryPolicy, Transport, TransportError};

/// Canonical answers of one query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "values", rename_all = "snake_case")]
pub enum AnswerSet {
    Bindings(BTreeSet<String>),
    Boolean(bool),
}

impl AnswerSet {
    pub fn bindings<I, S>(values: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        AnswerSet::Bindings(values.into_iter().map(Into::into).collect())
    }

    /// Values compared by the metrics; a boolean is a one-element set.
    pub fn as_set(&self) -> BTreeSet<String> {
        match self {
            AnswerSet::Bindings(v) => v.clone(),
            AnswerSet::Boolean(b) => BTreeSet::from([b.to_string()]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecStatus {
    Ok,
    Missing,
    ExecError,
    Timeout,
    Malformed,
    Unreachable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecFailure {
    pub status: ExecStatus,
    pub message: String,
}

impl ExecFailure {
    pub fn new(status: ExecStatus, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    /// Whether re-running the same query could plausibly give another result.
    pub fn is_transient(&self) -> bool {
        matches!(self.status, ExecStatus::Timeout | ExecStatus::Unreachable | ExecStatus::Malformed)
    }
}

pub type ExecOutcome = Result<AnswerSet, ExecFailure>;

pub trait SparqlExecutor: Send + Sync {
    fn endpoint(&self) -> String;
    fn execute(&self, query: &str) -> ExecOutcome;
}

/// Local name of an IRI: the part after the last `/` or `#`.
pub fn local_id(iri: &str) -> &str {
    iri.rsplit(['/', '#']).next().unwrap_or(iri)
}

/// URIs reduce to local ids, typed literals keep their datatype's local name,
/// language-tagged literals keep their tag.
pub fn canonical_term(term: &Value) -> Option<String> {
    let obj = term.as_object()?;
    let value = obj.get("value")?.as_str()?;
    let kind = obj.get("type").and_then(Value::as_str).unwrap_or("literal");
    Some(match kind {
        "uri" => local_id(value).to_string(),
        "bnode" => format!("_:{value}"),
        _ => {
            if let Some(lang) = obj.get("xml:lang").and_then(Value::as_str) {
                format!("{value}@{lang}")
            } else if let Some(dt) = obj.get("datatype").and_then(Value::as_str) {
                format!("{value}^^{}", local_id(dt))
            } else {
                value.to_string()
            }
        }
    })
}

/// Parses a SPARQL 1.1 JSON results document. Each binding row becomes the
/// tab-joined canonical values of the projected variables.
pub fn parse_sparql_json(body: &[u8]) -> Result<AnswerSet, String> {
    let doc: Value = serde_json::from_slice(body).map_err(|e| e.to_string())?;
    if let Some(b) = doc.get("boolean") {
        return b.as_bool().map(AnswerSet::Boolean).ok_or_else(|| "non-boolean `boolean`".into());
    }
    let vars: Vec<&str> = doc
        .pointer("/head/vars")
        .and_then(Value::as_array)
        .ok_or("missing head.vars")?
        .iter()
        .filter_map(Value::as_str)
        .collect();
    let rows = doc
        .pointer("/results/bindings")
        .and_then(Value::as_array)
        .ok_or("missing results.bindings")?;
    let mut out = BTreeSet::new();
    for row in rows {
        let cells: Vec<String> = vars
            .iter()
            .map(|v| row.get(*v).and_then(canonical_term).unwrap_or_default())
            .collect();
        out.insert(cells.join("\t"));
    }
    Ok(AnswerSet::Bindings(out))
}

/// Standard SPARQL protocol endpoint queried by form-encoded POST.
pub struct HttpSparqlEndpoint {
    url: String,
    timeout: Duration,
    retry: RetryPolicy,
    transport: RateLimited<Box<dyn Transport>>,
}

impl HttpSparqlEndpoint {
    pub fn new(url: &str, transport: Box<dyn Transport>, timeout: Duration, requests_per_second: f64) -> Self {
        Self {
            url: url.to_string(),
            timeout,
            retry: RetryPolicy::none(),
            transport: RateLimited::new(transport, requests_per_second),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }
}

impl SparqlExecutor for HttpSparqlEndpoint {
    fn endpoint(&self) -> String {
        self.url.clone()
    }

    fn execute(&self, query: &str) -> ExecOutcome {
        if query.trim().is_empty() {
            return Err(ExecFailure::new(ExecStatus::ExecError, "empty query"));
        }
        let req = HttpRequest::post_form(&self.url, &[("query", query)])
            .header("Accept", "application/sparql-results+json")
            .timeout(self.timeout);
        let resp = match send_with_retry(&self.transport, &req, self.retry) {
            Ok(r) => r,
            Err(TransportError::Timeout) => return Err(ExecFailure::new(ExecStatus::Timeout, "query timed out")),
            Err(e) => return Err(ExecFailure::new(ExecStatus::Unreachable, e.to_string())),
        };
        if !resp.is_success() {
            let text = resp.text();
            return Err(ExecFailure::new(
                ExecStatus::ExecError,
                format!("HTTP {}: {}", resp.status, text.chars().take(200).collect::<String>()),
            ));
        }
        parse_sparql_json(&resp.body).map_err(|m| ExecFailure::new(ExecStatus::Malformed, m))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheLine {
    endpoint: String,
    query: String,
    #[serde(flatten)]
    outcome: CachedOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum CachedOutcome {
    Answer(AnswerSet),
    Failure(ExecFailure),
}

type CacheKey = (String, String);

/// Answers keyed by (endpoint, whitespace-normalized query). Transient
/// failures such as timeouts are never stored.
#[derive(Debug, Default)]
pub struct AnswerCache {
    entries: RwLock<HashMap<CacheKey, ExecOutcome>>,
    file: Mutex<Option<PathBuf>>,
}

impl AnswerCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: &Path) -> std::io::Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            for line in fs::read_to_string(path)?.lines().filter(|l| !l.trim().is_empty()) {
                match serde_json::from_str::<CacheLine>(line) {
                    Ok(c) => {
                        let outcome = match c.outcome {
                            CachedOutcome::Answer(a) => Ok(a),
                            CachedOutcome::Failure(f) => Err(f),
                        };
                        entries.insert((c.endpoint, c.query), outcome);
                    }
                    Err(e) => log::warn!("skipping bad answer-cache line: {e}"),
                }
            }
        }
        Ok(Self {
            entries: RwLock::new(entries),
            file: Mutex::new(Some(path.to_path_buf())),
        })
    }

    pub fn key(endpoint: &str, query: &str) -> CacheKey {
        (endpoint.to_string(), normalize_space(query))
    }

    pub fn get(&self, endpoint: &str, query: &str) -> Option<ExecOutcome> {
        self.entries.read().expect("cache poisoned").get(&Self::key(endpoint, query)).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn path(&self) -> Option<PathBuf> {
        self.file.lock().expect("cache poisoned").clone()
    }

    pub fn put(&self, endpoint: &str, query: &str, outcome: &ExecOutcome) -> std::io::Result<()> {
        if matches!(outcome, Err(f) if f.is_transient()) {
            return Ok(());
        }
        let key = Self::key(endpoint, query);
        let file = self.file.lock().expect("cache poisoned");
        if let Some(path) = file.as_ref() {
            let line = CacheLine {
                endpoint: key.0.clone(),
                query: key.1.clone(),
                outcome: match outcome {
                    Ok(a) => CachedOutcome::Answer(a.clone()),
                    Err(f) => CachedOutcome::Failure(f.clone()),
                },
            };
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            writeln!(f, "{}", serde_json::to_string(&line).expect("cache line serializes"))?;
        }
        self.entries.write().expect("cache poisoned").insert(key, outcome.clone());
        Ok(())
    }

    /// Rewrites the backing file with one line per key in key order, so
    /// the file no longer depends on the order answers arrived in.
    pub fn compact(&self) -> std::io::Result<()> {
        let file = self.file.lock().expect("cache poisoned");
        let Some(path) = file.as_ref() else {
            return Ok(());
        };
        let entries = self.entries.read().expect("cache poisoned");
        let mut keys: Vec<&CacheKey> = entries.keys().collect();
        keys.sort();
        let mut out = Vec::new();
        for key in keys {
            let line = CacheLine {
                endpoint: key.0.clone(),
                query: key.1.clone(),
                outcome: match &entries[key] {
                    Ok(a) => CachedOutcome::Answer(a.clone()),
                    Err(f) => CachedOutcome::Failure(f.clone()),
                },
            };
            out.extend(serde_json::to_vec(&line).expect("cache line serializes"));
            out.push(b'\n');
        }
        crate::io::atomic_write(path, &out)
    }
}

/// Executor that consults an [`AnswerCache`] before the wrapped endpoint.
pub struct CachedExecutor<'a> {
    inner: &'a dyn SparqlExecutor,
    cache: &'a AnswerCache,
    hits: std::sync::atomic::AtomicUsize,
    misses: std::sync::atomic::AtomicUsize,
}

impl<'a> CachedExecutor<'a> {
    pub fn new(inner: &'a dyn SparqlExecutor, cache: &'a AnswerCache) -> Self {
        Self {
            inner,
            cache,
            hits: Default::default(),
            misses: Default::default(),
        }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(std::sync::atomic::Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(std::sync::atomic::Ordering::Relaxed)
    }
}

impl SparqlExecutor for CachedExecutor<'_> {
    fn endpoint(&self) -> String {
        self.inner.endpoint()
    }

    fn execute(&self, query: &str) -> ExecOutcome {
        let endpoint = self.inner.endpoint();
        if let Some(hit) = self.cache.get(&endpoint, query) {
            self.hits.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
            return hit;
        }
        self.misses.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        let outcome = self.inner.execute(query);
        if let Err(e) = self.cache.put(&endpoint, query, &outcome) {
            log::warn!("answer cache write failed: {e}");
        }
        outcome
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn canonical_terms() {
        assert_eq!(canonical_term(&json!({"type":"uri","value":"http://www.wikidata.org/entity/Q5"})).unwrap(), "Q5");
        assert_eq!(
            canonical_term(&json!({"type":"literal","value":"3","datatype":"http://www.w3.org/2001/XMLSchema#integer"})).unwrap(),
            "3^^integer"
        );
        assert_eq!(canonical_term(&json!({"type":"literal","value":"Rome","xml:lang":"en"})).unwrap(), "Rome@en");
        assert_eq!(canonical_term(&json!({"type":"literal","value":"x"})).unwrap(), "x");
    }

    #[test]
    fn parses_bindings_and_booleans() {
        let body = json!({
            "head": {"vars": ["x", "y"]},
            "results": {"bindings": [
                {"x": {"type":"uri","value":"http://www.wikidata.org/entity/Q1"}, "y": {"type":"literal","value":"a"}},
                {"x": {"type":"uri","value":"http://www.wikidata.org/entity/Q2"}},
                {"x": {"type":"uri","value":"http://www.wikidata.org/entity/Q1"}, "y": {"type":"literal","value":"a"}}
            ]}
        });
        let a = parse_sparql_json(body.to_string().as_bytes()).unwrap();
        assert_eq!(a, AnswerSet::bindings(["Q1\ta", "Q2\t"]));
        assert_eq!(parse_sparql_json(br#"{"head":{},"boolean":true}"#).unwrap(), AnswerSet::Boolean(true));
        assert!(parse_sparql_json(b"<html>").is_err());
        assert!(parse_sparql_json(b"{}").is_err());
    }

    struct Counting(std::sync::atomic::AtomicUsize, ExecOutcome);

    impl SparqlExecutor for Counting {
        fn endpoint(&self) -> String {
            "mock".into()
        }
        fn execute(&self, _: &str) -> ExecOutcome {
            self.0.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            self.1.clone()
        }
    }

    #[test]
    fn cache_persists_answers_but_not_timeouts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("answers.jsonl");
        let cache = AnswerCache::open(&path).unwrap();
        let ok = Counting(Default::default(), Ok(AnswerSet::bindings(["a"])));
        let exec = CachedExecutor::new(&ok, &cache);
        let _ = exec.execute("SELECT  ?x {}");
        let _ = exec.execute("SELECT ?x {}");
        assert_eq!(ok.0.load(std::sync::atomic::Ordering::SeqCst), 1);
        assert_eq!((exec.hits(), exec.misses()), (1, 1));

        let slow = Counting(Default::default(), Err(ExecFailure::new(ExecStatus::Timeout, "t")));
        let exec = CachedExecutor::new(&slow, &cache);
        let _ = exec.execute("ASK {}");
        let _ = exec.execute("ASK {}");
        assert_eq!(slow.0.load(std::sync::atomic::Ordering::SeqCst), 2);

        let reopened = AnswerCache::open(&path).unwrap();
        assert_eq!(reopened.len(), 1);
        assert_eq!(reopened.get("mock", "SELECT ?x {}"), Some(Ok(AnswerSet::bindings(["a"]))));
    }

    #[test]
    fn compaction_orders_lines_by_key() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("answers.jsonl");
        let cache = AnswerCache::open(&path).unwrap();
        for q in ["SELECT ?c {}", "SELECT ?a {}", "SELECT ?b {}", "SELECT ?a {}"] {
            cache.put("e", q, &Ok(AnswerSet::bindings([q]))).unwrap();
        }
        cache.compact().unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let queries: Vec<String> = text
            .lines()
            .map(|l| serde_json::from_str::<Value>(l).unwrap()["query"].as_str().unwrap().to_string())
            .collect();
        assert_eq!(queries, ["SELECT ?a {}", "SELECT ?b {}", "SELECT ?c {}"]);
        assert_eq!(AnswerCache::open(&path).unwrap().len(), 3);
    }
}
