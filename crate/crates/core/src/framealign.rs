//! Frame detection: the relations and classes of each query are described
//! through the knowledge base, embedded, and matched against the frame index.

use std::collections::HashMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedindex::{embed_texts, EmbeddingProvider, EmbeddingVector, VectorIndex};
use crate::kbclient::{render_descriptor_text, DescriptorKind, DescriptorSource, DescriptorStatus};
use crate::sparqltool::{extract_uris_with, ExtractOptions, WikidataUri};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub k: usize,
    pub threshold: f64,
    pub dedupe_frames: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            k: 1,
            threshold: 0.0,
            dedupe_frames: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("k must be at least 1")]
    ZeroK,
    #[error("threshold {0} is outside [-1, 1]")]
    Threshold(f64),
}

impl AlignConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.k == 0 {
            return Err(ConfigError::ZeroK);
        }
        if !(-1.0..=1.0).contains(&self.threshold) {
            return Err(ConfigError::Threshold(self.threshold));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvokedFrame {
    pub frame_id: String,
    /// Prefixed form of the relation or class, e.g. `wdt:P1365`.
    pub triggering_uri: String,
    pub score: f64,
}

/// Outcome of detection for one query.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub frames: Vec<EvokedFrame>,
    /// URIs with no usable descriptor (not found or without a label).
    pub skipped: Vec<String>,
    /// Hits dropped for scoring below the threshold.
    pub below_threshold: usize,
    /// URIs rendered from a label alone because the description was empty.
    pub degraded: usize,
}

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("query does not parse: {0}")]
    Parse(#[from] crate::sparqltool::SparqlError),
    #[error("descriptor for {uri}: {source}")]
    Descriptor {
        uri: String,
        #[source]
        source: crate::kbclient::KbError,
    },
    #[error("embedding: {0}")]
    Embed(#[from] crate::embedindex::EmbedError),
    #[error("index: {0}")]
    Index(#[from] crate::embedindex::IndexError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Shared read-only state for detecting frames over many queries. Descriptor
/// embeddings are memoized since relations repeat heavily across a corpus.
pub struct Aligner<'a> {
    index: &'a VectorIndex,
    provider: &'a dyn EmbeddingProvider,
    kb: &'a dyn DescriptorSource,
    cfg: AlignConfig,
    extract: ExtractOptions,
    memo: Mutex<HashMap<String, EmbeddingVector>>,
}

impl<'a> Aligner<'a> {
    pub fn new(
        index: &'a VectorIndex,
        provider: &'a dyn EmbeddingProvider,
        kb: &'a dyn DescriptorSource,
        cfg: AlignConfig,
    ) -> Result<Self, ConfigError> {
        cfg.validate()?;
        Ok(Self {
            index,
            provider,
            kb,
            cfg,
            extract: ExtractOptions::default(),
            memo: Mutex::new(HashMap::new()),
        })
    }

    pub fn with_extract_options(mut self, extract: ExtractOptions) -> Self {
        self.extract = extract;
        self
    }

    pub fn config(&self) -> &AlignConfig {
        &self.cfg
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, DetectError> {
        if let Some(v) = self.memo.lock().expect("memo poisoned").get(text) {
            return Ok(v.clone());
        }
        let v = embed_texts(self.provider, &[text])?.remove(0);
        self.memo
            .lock()
            .expect("memo poisoned")
            .insert(text.to_string(), v.clone());
        Ok(v)
    }

    pub fn detect(&self, query: &str) -> Result<Detection, DetectError> {
        let uris = extract_uris_with(query, &self.extract)?;
        let mut out = Detection::default();
        let targets: Vec<(&WikidataUri, DescriptorKind)> = uris
            .relations
            .iter()
            .map(|u| (u, DescriptorKind::Relation))
            .chain(uris.classes.iter().map(|u| (u, DescriptorKind::Class)))
            .collect();
        for (uri, kind) in targets {
            let name = uri.prefixed();
            let descriptor = self
                .kb
                .descriptor(uri, kind)
                .map_err(|source| DetectError::Descriptor {
                    uri: name.clone(),
                    source,
                })?;
            if descriptor.status == DescriptorStatus::NotFound || descriptor.label.trim().is_empty() {
                out.skipped.push(name);
                continue;
            }
            let rendered = render_descriptor_text(&descriptor);
            if rendered.degraded {
                out.degraded += 1;
            }
            let query_vec = self.embed(&rendered.text)?;
            for hit in self.index.search(&query_vec, self.cfg.k)? {
                if hit.score >= self.cfg.threshold {
                    out.frames.push(EvokedFrame {
                        frame_id: hit.item_id,
                        triggering_uri: name.clone(),
                        score: hit.score,
                    });
                } else {
                    out.below_threshold += 1;
                }
            }
        }
        if self.cfg.dedupe_frames {
            out.frames = dedupe(out.frames);
        }
        out.frames.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.frame_id.cmp(&b.frame_id))
                .then_with(|| a.triggering_uri.cmp(&b.triggering_uri))
        });
        Ok(out)
    }
}

/// Keeps the highest-scoring occurrence of each frame; on equal scores the
/// earlier triggering URI wins.
fn dedupe(frames: Vec<EvokedFrame>) -> Vec<EvokedFrame> {
    let mut best: Vec<EvokedFrame> = Vec::new();
    let mut pos: HashMap<String, usize> = HashMap::new();
    for f in frames {
        match pos.get(&f.frame_id) {
            Some(&i) if best[i].score >= f.score => {}
            Some(&i) => best[i] = f,
            None => {
                pos.insert(f.frame_id.clone(), best.len());
                best.push(f);
            }
        }
    }
    best
}

/// One-shot detection for a single query.
pub fn detect_frames(
    query: &str,
    index: &VectorIndex,
    provider: &dyn EmbeddingProvider,
    kb: &dyn DescriptorSource,
    cfg: &AlignConfig,
) -> Result<Detection, DetectError> {
    Aligner::new(index, provider, kb, cfg.clone())?.detect(query)
}

/// Anything that carries an id and a SPARQL query.
pub trait QueryEntry: Sync {
    fn uid(&self) -> &str;
    fn sparql(&self) -> &str;
}

impl QueryEntry for (String, String) {
    fn uid(&self) -> &str {
        &self.0
    }
    fn sparql(&self) -> &str {
        &self.1
    }
}

/// Per-entry output line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignRecord {
    pub uid: String,
    pub frames: Vec<EvokedFrame>,
    pub skipped: Vec<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentStats {
    pub entries: usize,
    pub entries_with_frames: usize,
    pub evoked_frames: usize,
    pub skipped_uris: usize,
    pub below_threshold: usize,
    pub degraded_descriptors: usize,
    pub descriptor_errors: usize,
    pub provider_errors: usize,
    pub parse_errors: usize,
}

/// Aligns every entry on a pool of `workers` threads. Output order follows
/// input order; failures are recorded per entry.
pub fn align_corpus<E: QueryEntry>(
    entries: &[E],
    aligner: &Aligner<'_>,
    workers: usize,
) -> (Vec<AlignRecord>, AlignmentStats) {
    use rayon::prelude::*;

    let run = || -> Vec<(AlignRecord, Option<Detection>, Option<&'static str>)> {
        entries
            .par_iter()
            .map(|e| match aligner.detect(e.sparql()) {
                Ok(d) => (
                    AlignRecord {
                        uid: e.uid().to_string(),
                        frames: d.frames.clone(),
                        skipped: d.skipped.clone(),
                        error: None,
                    },
                    Some(d),
                    None,
                ),
                Err(err) => {
                    let class = match err {
                        DetectError::Parse(_) => "parse",
                        DetectError::Descriptor { .. } => "descriptor",
                        DetectError::Embed(_) | DetectError::Index(_) | DetectError::Config(_) => "provider",
                    };
                    (
                        AlignRecord {
                            uid: e.uid().to_string(),
                            frames: Vec::new(),
                            skipped: Vec::new(),
                            error: Some(err.to_string()),
                        },
                        None,
                        Some(class),
                    )
                }
            })
            .collect()
    };
    let results = match rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build() {
        Ok(pool) => pool.install(run),
        Err(_) => run(),
    };

    let mut stats = AlignmentStats {
        entries: entries.len(),
        ..Default::default()
    };
    let mut records = Vec::with_capacity(results.len());
    for (record, detection, failure) in results {
        if let Some(d) = detection {
            stats.evoked_frames += d.frames.len();
            stats.skipped_uris += d.skipped.len();
            stats.below_threshold += d.below_threshold;
            stats.degraded_descriptors += d.degraded;
            if !d.frames.is_empty() {
                stats.entries_with_frames += 1;
            }
        }
        match failure {
            Some("parse") => stats.parse_errors += 1,
            Some("descriptor") => stats.descriptor_errors += 1,
            Some(_) => stats.provider_errors += 1,
            None => {}
        }
        records.push(record);
    }
    (records, stats)
}
