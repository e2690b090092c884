//! Labels and descriptions of Wikidata properties and classes, fetched from
//! the `wbgetentities` API and kept in a JSON-lines cache.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sparqltool::{UriError, WikidataUri};
use crate::transport::{send_with_retry, HttpRequest, RateLimited, RetryPolicy, Transport, TransportError};

pub const DEFAULT_WIKIDATA_API: &str = "https://www.wikidata.org/w/api.php";

/// `wbgetentities` accepts at most this many ids per request.
const MAX_IDS_PER_REQUEST: usize = 50;

#[derive(Debug, Error)]
pub enum KbError {
    #[error(transparent)]
    InvalidUri(#[from] UriError),
    #[error("network failure: {0}")]
    Network(#[from] TransportError),
    #[error("Wikidata API answered HTTP {0}")]
    Http(u16),
    #[error("malformed API response: {0}")]
    Malformed(String),
    #[error("offline mode: `{0}` is not in the descriptor cache")]
    CacheMiss(String),
    #[error("descriptor cache I/O: {0}")]
    Io(#[from] std::io::Error),
}

impl KbError {
    /// Service-side failures, as opposed to bad input or a cache miss.
    pub fn is_service_failure(&self) -> bool {
        matches!(self, KbError::Network(_) | KbError::Http(_))
    }

    /// Copy of the error for fan-out to every id of a failed batch.
    fn duplicate(&self) -> KbError {
        match self {
            KbError::InvalidUri(e) => KbError::Malformed(e.to_string()),
            KbError::Network(e) => KbError::Network(e.clone()),
            KbError::Http(code) => KbError::Http(*code),
            KbError::Malformed(m) => KbError::Malformed(m.clone()),
            KbError::CacheMiss(m) => KbError::CacheMiss(m.clone()),
            KbError::Io(e) => KbError::Io(std::io::Error::new(e.kind(), e.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptorKind {
    Relation,
    Class,
    Entity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptorStatus {
    Ok,
    MissingDescription,
    MissingLabel,
    NotFound,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbDescriptor {
    /// Canonical entity IRI, e.g. `http://www.wikidata.org/entity/P31`.
    pub uri: String,
    pub kind: DescriptorKind,
    pub label: String,
    pub description: String,
    pub fetched_at: DateTime<Utc>,
    pub status: DescriptorStatus,
}

impl KbDescriptor {
    pub fn new(
        uri: &WikidataUri,
        kind: DescriptorKind,
        label: &str,
        description: &str,
        fetched_at: DateTime<Utc>,
    ) -> Self {
        let label = label.trim().to_string();
        let description = description.trim().to_string();
        let status = match (label.is_empty(), description.is_empty()) {
            (false, false) => DescriptorStatus::Ok,
            (false, true) => DescriptorStatus::MissingDescription,
            (true, _) => DescriptorStatus::MissingLabel,
        };
        Self {
            uri: uri.entity_iri(),
            kind,
            label,
            description,
            fetched_at,
            status,
        }
    }

    pub fn not_found(uri: &WikidataUri, kind: DescriptorKind, fetched_at: DateTime<Utc>) -> Self {
        Self {
            uri: uri.entity_iri(),
            kind,
            label: String::new(),
            description: String::new(),
            fetched_at,
            status: DescriptorStatus::NotFound,
        }
    }

    pub fn id(&self) -> &str {
        self.uri.rsplit('/').next().unwrap_or(&self.uri)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedText {
    pub text: String,
    /// Set when the description was empty and only the label was rendered.
    pub degraded: bool,
}

/// `"<label>. <description>"`, or the label alone when there is no
/// description.
pub fn render_descriptor_text(d: &KbDescriptor) -> RenderedText {
    let label = crate::framenet::normalize_space(&d.label);
    let description = crate::framenet::normalize_space(&d.description);
    match (label.is_empty(), description.is_empty()) {
        (false, false) => RenderedText {
            text: format!("{label}. {description}"),
            degraded: false,
        },
        (false, true) => RenderedText {
            text: label,
            degraded: true,
        },
        (true, _) => RenderedText {
            text: description,
            degraded: true,
        },
    }
}

/// Cache key: the entity IRI, so `wdt:P31` and `p:P31` share one entry.
fn cache_key(uri: &WikidataUri) -> String {
    uri.entity_iri()
}

/// JSON-lines descriptor cache. New descriptors are appended; [`compact`]
/// rewrites the file with one line per URI.
///
/// [`compact`]: DescriptorCache::compact
#[derive(Debug)]
pub struct DescriptorCache {
    snapshot: RwLock<Arc<HashMap<String, KbDescriptor>>>,
    writer: Mutex<Option<PathBuf>>,
}

impl DescriptorCache {
    pub fn in_memory() -> Self {
        Self {
            snapshot: RwLock::new(Arc::new(HashMap::new())),
            writer: Mutex::new(None),
        }
    }

    /// Opens (or creates on first write) a cache file. Later lines win over
    /// earlier ones for the same URI.
    pub fn open(path: &Path) -> Result<Self, KbError> {
        let mut entries = HashMap::new();
        if path.exists() {
            for rec in crate::io::read_jsonl::<KbDescriptor>(path)? {
                match rec.value {
                    Ok(d) => {
                        entries.insert(d.uri.clone(), d);
                    }
                    Err(e) => log::warn!(
                        "{}: ignoring unreadable cache line {}: {e}",
                        path.display(),
                        rec.index
                    ),
                }
            }
        }
        Ok(Self {
            snapshot: RwLock::new(Arc::new(entries)),
            writer: Mutex::new(Some(path.to_path_buf())),
        })
    }

    pub fn snapshot(&self) -> Arc<HashMap<String, KbDescriptor>> {
        Arc::clone(&self.snapshot.read().expect("cache lock poisoned"))
    }

    pub fn get(&self, uri: &WikidataUri) -> Option<KbDescriptor> {
        self.snapshot().get(&cache_key(uri)).cloned()
    }

    pub fn len(&self) -> usize {
        self.snapshot().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert_many(&self, descriptors: &[KbDescriptor]) -> Result<(), KbError> {
        if descriptors.is_empty() {
            return Ok(());
        }
        let writer = self.writer.lock().expect("cache writer poisoned");
        if let Some(path) = writer.as_ref() {
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir)?;
            }
            let mut file = OpenOptions::new().create(true).append(true).open(path)?;
            let bytes = crate::io::to_jsonl(descriptors).map_err(|e| KbError::Malformed(e.to_string()))?;
            file.write_all(&bytes)?;
        }
        let mut next: HashMap<String, KbDescriptor> = (*self.snapshot()).clone();
        for d in descriptors {
            next.insert(d.uri.clone(), d.clone());
        }
        *self.snapshot.write().expect("cache lock poisoned") = Arc::new(next);
        Ok(())
    }

    pub fn insert(&self, descriptor: KbDescriptor) -> Result<(), KbError> {
        self.insert_many(std::slice::from_ref(&descriptor))
    }

    /// Rewrites the backing file with one line per URI, sorted by URI.
    pub fn compact(&self) -> Result<(), KbError> {
        let writer = self.writer.lock().expect("cache writer poisoned");
        if let Some(path) = writer.as_ref() {
            let snap = self.snapshot();
            let mut all: Vec<&KbDescriptor> = snap.values().collect();
            all.sort_by(|a, b| a.uri.cmp(&b.uri));
            let bytes = crate::io::to_jsonl(all).map_err(|e| KbError::Malformed(e.to_string()))?;
            crate::io::atomic_write(path, &bytes)?;
        }
        Ok(())
    }

    pub fn path(&self) -> Option<PathBuf> {
        self.writer.lock().expect("cache writer poisoned").clone()
    }
}

/// Anything that can answer descriptor lookups.
pub trait DescriptorSource: Send + Sync {
    fn descriptor(&self, uri: &WikidataUri, kind: DescriptorKind) -> Result<KbDescriptor, KbError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct WikidataConfig {
    pub api_url: String,
    pub language: String,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    pub requests_per_second: f64,
    pub max_in_flight: usize,
}

impl Default for WikidataConfig {
    fn default() -> Self {
        Self {
            api_url: DEFAULT_WIKIDATA_API.to_string(),
            language: "en".to_string(),
            timeout: Duration::from_secs(20),
            retry: RetryPolicy::default(),
            requests_per_second: 5.0,
            max_in_flight: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum EntityLookup {
    Found { label: String, description: String },
    Missing,
}

#[derive(Deserialize)]
struct ApiResponse {
    #[serde(default)]
    entities: Option<HashMap<String, ApiEntity>>,
    #[serde(default)]
    error: Option<ApiError>,
}

#[derive(Deserialize)]
struct ApiError {
    code: String,
    #[serde(default)]
    info: String,
}

#[derive(Deserialize)]
struct ApiEntity {
    #[serde(default)]
    missing: Option<serde_json::Value>,
    #[serde(default)]
    labels: HashMap<String, ApiText>,
    #[serde(default)]
    descriptions: HashMap<String, ApiText>,
}

#[derive(Deserialize)]
struct ApiText {
    value: String,
}

/// Rate-limited `wbgetentities` client.
pub struct WikidataClient {
    config: WikidataConfig,
    transport: RateLimited<Box<dyn Transport>>,
}

impl WikidataClient {
    pub fn new(config: WikidataConfig, transport: Box<dyn Transport>) -> Self {
        let transport = RateLimited::new(transport, config.requests_per_second);
        Self { config, transport }
    }

    pub fn config(&self) -> &WikidataConfig {
        &self.config
    }

    fn request_url(&self, ids: &[&str]) -> String {
        let lang = crate::transport::percent_encode(&self.config.language);
        format!(
            "{}?action=wbgetentities&format=json&props=labels%7Cdescriptions&languages={lang}&ids={}",
            self.config.api_url,
            crate::transport::percent_encode(&ids.join("|"))
        )
    }

    fn lookup(&self, ids: &[&str]) -> Result<HashMap<String, EntityLookup>, KbError> {
        let request = HttpRequest::get(self.request_url(ids)).timeout(self.config.timeout);
        let response = send_with_retry(&self.transport, &request, self.config.retry)?;
        if !response.is_success() {
            return Err(KbError::Http(response.status));
        }
        let parsed: ApiResponse = serde_json::from_slice(&response.body)
            .map_err(|e| KbError::Malformed(e.to_string()))?;
        if let Some(err) = parsed.error {
            if err.code == "no-such-entity" {
                if ids.len() == 1 {
                    return Ok(HashMap::from([(ids[0].to_string(), EntityLookup::Missing)]));
                }
                // one bad id poisons the batch; fall back to single lookups
                let mut out = HashMap::new();
                for id in ids {
                    out.extend(self.lookup(&[id])?);
                }
                return Ok(out);
            }
            return Err(KbError::Malformed(format!("{}: {}", err.code, err.info)));
        }
        let entities = parsed
            .entities
            .ok_or_else(|| KbError::Malformed("response has no `entities` object".into()))?;
        let lang = &self.config.language;
        let mut out = HashMap::new();
        for id in ids {
            let entity = entities
                .get(*id)
                .ok_or_else(|| KbError::Malformed(format!("entity {id} absent from response")))?;
            let lookup = if entity.missing.is_some() {
                EntityLookup::Missing
            } else {
                EntityLookup::Found {
                    label: entity.labels.get(lang).map(|t| t.value.clone()).unwrap_or_default(),
                    description: entity
                        .descriptions
                        .get(lang)
                        .map(|t| t.value.clone())
                        .unwrap_or_default(),
                }
            };
            out.insert(id.to_string(), lookup);
        }
        Ok(out)
    }
}

/// Cache-first descriptor fetcher. In offline mode a cache miss is an error
/// and no request is ever issued.
pub struct KbFetcher {
    cache: DescriptorCache,
    client: Option<WikidataClient>,
}

impl KbFetcher {
    pub fn online(cache: DescriptorCache, client: WikidataClient) -> Self {
        Self {
            cache,
            client: Some(client),
        }
    }

    pub fn offline(cache: DescriptorCache) -> Self {
        Self { cache, client: None }
    }

    pub fn cache(&self) -> &DescriptorCache {
        &self.cache
    }

    pub fn is_offline(&self) -> bool {
        self.client.is_none()
    }

    /// Parses `raw` and returns its descriptor from cache or the API.
    pub fn fetch_descriptor(&self, raw: &str, kind: DescriptorKind) -> Result<KbDescriptor, KbError> {
        let uri = WikidataUri::parse(raw)?;
        self.descriptor(&uri, kind)
    }

    /// Fetches many descriptors, batching cache misses into multi-id requests
    /// issued with at most `max_in_flight` concurrent requests. Results are
    /// returned in input order.
    pub fn fetch_many(
        &self,
        uris: &[(WikidataUri, DescriptorKind)],
    ) -> Vec<Result<KbDescriptor, KbError>> {
        let mut misses: Vec<usize> = Vec::new();
        let mut seen_keys: HashMap<String, usize> = HashMap::new();
        for (i, (uri, _)) in uris.iter().enumerate() {
            if self.cache.get(uri).is_none() && !seen_keys.contains_key(&cache_key(uri)) {
                seen_keys.insert(cache_key(uri), i);
                misses.push(i);
            }
        }
        if let Some(client) = &self.client {
            let batches: Vec<&[usize]> = misses.chunks(MAX_IDS_PER_REQUEST).collect();
            let workers = client.config.max_in_flight.max(1);
            let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build();
            let run = |batch: &&[usize]| -> Result<(), (Vec<usize>, KbError)> {
                let ids: Vec<&str> = batch.iter().map(|&i| uris[i].0.id.as_str()).collect();
                let found = client.lookup(&ids).map_err(|e| (batch.to_vec(), e))?;
                let now = Utc::now();
                let descriptors: Vec<KbDescriptor> = batch
                    .iter()
                    .map(|&i| {
                        let (uri, kind) = &uris[i];
                        match found.get(&uri.id) {
                            Some(EntityLookup::Found { label, description }) => {
                                KbDescriptor::new(uri, *kind, label, description, now)
                            }
                            _ => KbDescriptor::not_found(uri, *kind, now),
                        }
                    })
                    .collect();
                self.cache
                    .insert_many(&descriptors)
                    .map_err(|e| (batch.to_vec(), e))
            };
            let failures: Vec<(Vec<usize>, KbError)> = match pool {
                Ok(pool) => pool.install(|| {
                    use rayon::prelude::*;
                    batches.par_iter().filter_map(|b| run(b).err()).collect()
                }),
                Err(_) => batches.iter().filter_map(|b| run(b).err()).collect(),
            };
            let mut failed: HashMap<String, &KbError> = HashMap::new();
            for (batch, err) in &failures {
                for &i in batch {
                    failed.insert(cache_key(&uris[i].0), err);
                }
            }
            return uris
                .iter()
                .map(|(uri, _)| match failed.get(&cache_key(uri)) {
                    Some(err) => Err(err.duplicate()),
                    None => self
                        .cache
                        .get(uri)
                        .ok_or_else(|| KbError::CacheMiss(uri.prefixed())),
                })
                .collect();
        }
        uris.iter()
            .map(|(uri, _)| self.cache.get(uri).ok_or_else(|| KbError::CacheMiss(uri.prefixed())))
            .collect()
    }
}

impl DescriptorSource for KbFetcher {
    fn descriptor(&self, uri: &WikidataUri, kind: DescriptorKind) -> Result<KbDescriptor, KbError> {
        if let Some(hit) = self.cache.get(uri) {
            return Ok(hit);
        }
        let Some(client) = &self.client else {
            return Err(KbError::CacheMiss(uri.prefixed()));
        };
        let found = client.lookup(&[uri.id.as_str()])?;
        let now = Utc::now();
        let descriptor = match found.get(&uri.id) {
            Some(EntityLookup::Found { label, description }) => {
                KbDescriptor::new(uri, kind, label, description, now)
            }
            _ => KbDescriptor::not_found(uri, kind, now),
        };
        self.cache.insert(descriptor.clone())?;
        Ok(descriptor)
    }
}
