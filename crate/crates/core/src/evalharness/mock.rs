//! Static-map SPARQL endpoint for offline evaluation.
//!
//! The map file is JSON: `{"queries": [{"query": "...", ...}]}` where each
//! entry carries one of `result` (a SPARQL JSON results document), `answers`
//! (a list of ids or literals, served as bindings of `?x`), `boolean`, or
//! `error` with an optional HTTP `status`; `delay_ms` postpones the reply.
//! Queries are matched after whitespace normalization; unknown queries get
//! HTTP 400.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::framenet::normalize_space;
use crate::transport::percent_decode;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockEntry {
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answers: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boolean: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay_ms: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockMap {
    pub queries: Vec<MockEntry>,
}

impl MockMap {
    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

fn is_wikidata_id(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some('P' | 'Q' | 'L')) && s.len() > 1 && chars.all(|c| c.is_ascii_digit())
}

/// SPARQL JSON results for a list of answers bound to `?x`.
pub fn answers_document(answers: &[String]) -> Value {
    let bindings: Vec<Value> = answers
        .iter()
        .map(|a| {
            if is_wikidata_id(a) {
                json!({"x": {"type": "uri", "value": format!("http://www.wikidata.org/entity/{a}")}})
            } else {
                json!({"x": {"type": "literal", "value": a}})
            }
        })
        .collect();
    json!({"head": {"vars": ["x"]}, "results": {"bindings": bindings}})
}

struct Reply {
    status: u16,
    body: String,
    delay: Duration,
}

fn reply_for(entry: &MockEntry) -> Reply {
    let delay = Duration::from_millis(entry.delay_ms.unwrap_or(0));
    let (status, body) = if let Some(err) = &entry.error {
        (entry.status.unwrap_or(400), err.clone())
    } else if let Some(b) = entry.boolean {
        (200, json!({"head": {}, "boolean": b}).to_string())
    } else if let Some(r) = &entry.result {
        (200, r.to_string())
    } else {
        (200, answers_document(entry.answers.as_deref().unwrap_or(&[])).to_string())
    };
    Reply { status, body, delay }
}

/// Extracts the `query` parameter from a form body or URL query string.
fn query_param(encoded: &str) -> Option<String> {
    encoded
        .split('&')
        .filter_map(|kv| kv.split_once('='))
        .find(|(k, _)| *k == "query")
        .map(|(_, v)| percent_decode(v))
}

pub struct MockSparqlServer {
    url: String,
    server: Arc<tiny_http::Server>,
    worker: Option<JoinHandle<()>>,
}

impl MockSparqlServer {
    /// Serves `map` on `addr` (use port 0 for an ephemeral port).
    pub fn start(map: MockMap, addr: &str) -> std::io::Result<Self> {
        let server = tiny_http::Server::http(addr).map_err(std::io::Error::other)?;
        let local = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::other("mock endpoint is not bound to an IP address"))?;
        let url = format!("http://{local}/sparql");
        let table: Arc<HashMap<String, MockEntry>> = Arc::new(
            map.queries
                .into_iter()
                .map(|e| (normalize_space(&e.query), e))
                .collect(),
        );
        let server = Arc::new(server);
        let srv = Arc::clone(&server);
        let worker = std::thread::spawn(move || {
            for mut request in srv.incoming_requests() {
                let table = Arc::clone(&table);
                std::thread::spawn(move || {
                    let mut body = String::new();
                    let _ = request.as_reader().read_to_string(&mut body);
                    let from_url = request.url().split_once('?').and_then(|(_, q)| query_param(q));
                    let query = query_param(&body).or(from_url);
                    let reply = match query.map(|q| normalize_space(&q)).and_then(|q| table.get(&q).cloned()) {
                        Some(entry) => reply_for(&entry),
                        None => Reply {
                            status: 400,
                            body: "unknown query".into(),
                            delay: Duration::ZERO,
                        },
                    };
                    if !reply.delay.is_zero() {
                        std::thread::sleep(reply.delay);
                    }
                    let content_type = if reply.status == 200 {
                        "application/sparql-results+json"
                    } else {
                        "text/plain"
                    };
                    let header = tiny_http::Header::from_bytes("Content-Type", content_type).expect("static header");
                    let response = tiny_http::Response::from_string(reply.body)
                        .with_status_code(reply.status)
                        .with_header(header);
                    let _ = request.respond(response);
                });
            }
        });
        Ok(Self {
            url,
            server,
            worker: Some(worker),
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    /// Blocks serving requests until the process exits.
    pub fn wait(mut self) {
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

impl Drop for MockSparqlServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}
