//! Embedding providers and an exact cosine-similarity vector index.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::framenet::{normalize_space, render_frame_text, FrameInventory};
use crate::transport::{send_with_retry, HttpRequest, RetryPolicy, Transport, TransportError};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding provider unreachable: {0}")]
    Unreachable(#[from] TransportError),
    #[error("embedding provider returned HTTP {0}")]
    Http(u16),
    #[error("malformed embedding response: {0}")]
    BadResponse(String),
    #[error("provider declared dimension {declared} but returned {actual}")]
    DimensionMismatch { declared: usize, actual: usize },
}

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("vector dimension {actual} does not match index dimension {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("duplicate item id `{0}`")]
    DuplicateId(String),
    #[error("invalid item id `{0}`")]
    InvalidId(String),
    #[error("vector has non-finite components")]
    NonFinite,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("cannot build an index from an empty inventory")]
    EmptyInventory,
    #[error("index was built with provider `{index}`, not `{provider}`")]
    ProviderMismatch { index: String, provider: String },
    #[error("embedding failed after {indexed} items (checkpoint: {checkpoint:?}): {source}")]
    Provider {
        indexed: usize,
        checkpoint: Option<PathBuf>,
        #[source]
        source: EmbedError,
    },
    #[error("index file {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("index I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// A dense embedding. Components are kept in `f64`; indexes store `f32`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self(self.0.iter().map(|v| v * c).collect())
    }
}

impl From<Vec<f64>> for EmbeddingVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Turns texts into fixed-dimension vectors. Implementations must be
/// deterministic for a given text.
pub trait EmbeddingProvider: Send + Sync {
    /// Stable identity recorded in persisted indexes.
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError>;
}

impl<P: EmbeddingProvider + ?Sized> EmbeddingProvider for Box<P> {
    fn id(&self) -> String {
        (**self).id()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        (**self).embed_batch(texts)
    }
}

impl<P: EmbeddingProvider + ?Sized> EmbeddingProvider for std::sync::Arc<P> {
    fn id(&self) -> String {
        (**self).id()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        (**self).embed_batch(texts)
    }
}

fn check_dims(provider: &dyn EmbeddingProvider, vectors: &[EmbeddingVector]) -> Result<(), EmbedError> {
    for v in vectors {
        if v.dim() != provider.dim() {
            return Err(EmbedError::DimensionMismatch {
                declared: provider.dim(),
                actual: v.dim(),
            });
        }
        if !v.is_finite() {
            return Err(EmbedError::BadResponse("non-finite vector component".into()));
        }
    }
    Ok(())
}

pub fn embed_text(provider: &dyn EmbeddingProvider, text: &str) -> Result<EmbeddingVector, EmbedError> {
    let mut out = embed_texts(provider, &[text])?;
    Ok(out.remove(0))
}

/// Whitespace-normalizes and embeds `texts`, verifying the declared
/// dimension of every returned vector.
pub fn embed_texts(
    provider: &dyn EmbeddingProvider,
    texts: &[&str],
) -> Result<Vec<EmbeddingVector>, EmbedError> {
    let normalized: Vec<String> = texts.iter().map(|t| normalize_space(t)).collect();
    if normalized.iter().any(String::is_empty) {
        return Err(EmbedError::EmptyText);
    }
    let refs: Vec<&str> = normalized.iter().map(String::as_str).collect();
    let vectors = provider.embed_batch(&refs)?;
    if vectors.len() != texts.len() {
        return Err(EmbedError::BadResponse(format!(
            "expected {} vectors, got {}",
            texts.len(),
            vectors.len()
        )));
    }
    check_dims(provider, &vectors)?;
    Ok(vectors)
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8], seed: u64) -> u64 {
    let mut h = FNV_OFFSET ^ seed;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Offline deterministic provider: word tokens and character trigrams are
/// hashed into signed buckets and the result is L2-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashFoldProvider {
    dim: usize,
}

impl HashFoldProvider {
    pub const TRIGRAM_WEIGHT: f64 = 0.5;

    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "hash-fold dimension must be positive");
        Self { dim }
    }

    fn fold(&self, feature: &str, weight: f64, acc: &mut [f64]) {
        let h = fnv1a(feature.as_bytes(), 0);
        let bucket = (h % self.dim as u64) as usize;
        let sign = if fnv1a(feature.as_bytes(), 0x9e37_79b9_7f4a_7c15) >> 63 == 0 { 1.0 } else { -1.0 };
        acc[bucket] += sign * weight;
    }

    pub fn embed_one(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let lower = text.to_lowercase();
        let mut acc = vec![0.0; self.dim];
        let mut any = false;
        for token in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            any = true;
            self.fold(&format!("w:{token}"), 1.0, &mut acc);
            let padded: Vec<char> = format!("^{token}$").chars().collect();
            for tri in padded.windows(3) {
                let tri: String = tri.iter().collect();
                self.fold(&format!("c:{tri}"), Self::TRIGRAM_WEIGHT, &mut acc);
            }
        }
        if !any {
            return Err(EmbedError::EmptyText);
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            // every feature cancelled out; fall back to a fixed unit vector
            acc[0] = 1.0;
        } else {
            acc.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(EmbeddingVector(acc))
    }
}

impl EmbeddingProvider for HashFoldProvider {
    fn id(&self) -> String {
        format!("hash-fold/v1/{}", self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        texts.iter().map(|t| self.embed_one(t)).collect()
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// Client for an embedding service speaking
/// `POST {"texts": [...]}` → `{"vectors": [[...], ...]}`.
pub struct HttpEmbeddingProvider {
    url: String,
    dim: usize,
    batch_size: usize,
    timeout: Duration,
    retry: RetryPolicy,
    transport: Box<dyn Transport>,
}

impl HttpEmbeddingProvider {
    pub fn new(url: &str, dim: usize, transport: Box<dyn Transport>) -> Self {
        Self {
            url: url.to_string(),
            dim,
            batch_size: 32,
            timeout: Duration::from_secs(60),
            retry: RetryPolicy::default(),
            transport,
        }
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn id(&self) -> String {
        format!("http:{}#{}", self.url, self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.batch_size) {
            let body = serde_json::to_value(EmbedRequest { texts: chunk })
                .map_err(|e| EmbedError::BadResponse(e.to_string()))?;
            let request = HttpRequest::post_json(&self.url, &body).timeout(self.timeout);
            let response = send_with_retry(&self.transport, &request, self.retry)?;
            if !response.is_success() {
                return Err(EmbedError::Http(response.status));
            }
            let parsed: EmbedResponse = serde_json::from_slice(&response.body)
                .map_err(|e| EmbedError::BadResponse(e.to_string()))?;
            if parsed.vectors.len() != chunk.len() {
                return Err(EmbedError::BadResponse(format!(
                    "sent {} texts, received {} vectors",
                    chunk.len(),
                    parsed.vectors.len()
                )));
            }
            out.extend(parsed.vectors.into_iter().map(EmbeddingVector));
        }
        check_dims(self, &out)?;
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub item_id: String,
    pub score: f64,
}

/// Exact brute-force cosine index. Rows are stored as `f32`, which is also
/// the on-disk representation; scoring runs in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    provider: String,
    ids: Vec<String>,
    positions: HashMap<String, usize>,
    data: Vec<f32>,
    norms: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexHeader {
    format: String,
    version: u32,
    dim: usize,
    provider: String,
    count: usize,
    dtype: String,
}

const INDEX_FORMAT: &str = "frase-vectors";

impl VectorIndex {
    pub fn new(dim: usize, provider: &str) -> Self {
        Self {
            dim,
            provider: provider.to_string(),
            ids: Vec::new(),
            positions: HashMap::new(),
            data: Vec::new(),
            norms: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn provider(&self) -> &str {
        &self.provider
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, id: &str) -> bool {
        self.positions.contains_key(id)
    }

    pub fn row(&self, pos: usize) -> &[f32] {
        &self.data[pos * self.dim..(pos + 1) * self.dim]
    }

    pub fn check_provider(&self, provider: &dyn EmbeddingProvider) -> Result<(), IndexError> {
        if provider.id() != self.provider || provider.dim() != self.dim {
            return Err(IndexError::ProviderMismatch {
                index: self.provider.clone(),
                provider: provider.id(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, item_id: &str, vector: &EmbeddingVector) -> Result<(), IndexError> {
        if vector.dim() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                actual: vector.dim(),
            });
        }
        if item_id.is_empty() || item_id.contains(['\n', '\r']) {
            return Err(IndexError::InvalidId(item_id.to_string()));
        }
        if self.positions.contains_key(item_id) {
            return Err(IndexError::DuplicateId(item_id.to_string()));
        }
        let row: Vec<f32> = vector.values().iter().map(|&v| v as f32).collect();
        if row.iter().any(|v| !v.is_finite()) {
            return Err(IndexError::NonFinite);
        }
        let norm = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        self.positions.insert(item_id.to_string(), self.ids.len());
        self.ids.push(item_id.to_string());
        self.data.extend_from_slice(&row);
        self.norms.push(norm);
        Ok(())
    }

    /// The `k` highest-cosine items, best first; equal scores are ordered by
    /// ascending item id.
    pub fn search(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<SearchHit>, IndexError> {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        if query.dim() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                actual: query.dim(),
            });
        }
        if !query.is_finite() {
            return Err(IndexError::NonFinite);
        }
        let qnorm = query.norm();
        let mut scored: Vec<(f64, usize)> = (0..self.len())
            .map(|pos| {
                let denom = qnorm * self.norms[pos];
                let score = if denom == 0.0 {
                    0.0
                } else {
                    let dot: f64 = self
                        .row(pos)
                        .iter()
                        .zip(query.values())
                        .map(|(&a, &b)| f64::from(a) * b)
                        .sum();
                    (dot / denom).clamp(-1.0, 1.0)
                };
                (score, pos)
            })
            .collect();
        let by_rank = |a: &(f64, usize), b: &(f64, usize)| {
            b.0.total_cmp(&a.0).then_with(|| self.ids[a.1].cmp(&self.ids[b.1]))
        };
        let k = k.min(scored.len());
        if k < scored.len() && k > 0 {
            scored.select_nth_unstable_by(k - 1, by_rank);
            scored.truncate(k);
        }
        scored.sort_by(by_rank);
        Ok(scored
            .into_iter()
            .map(|(score, pos)| SearchHit {
                item_id: self.ids[pos].clone(),
                score,
            })
            .collect())
    }

    fn ids_path(path: &Path) -> PathBuf {
        let mut name = path.as_os_str().to_owned();
        name.push(".ids");
        PathBuf::from(name)
    }

    /// Serialized bytes of the vector file: one JSON header line followed by
    /// little-endian `f32` rows.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = IndexHeader {
            format: INDEX_FORMAT.into(),
            version: 1,
            dim: self.dim,
            provider: self.provider.clone(),
            count: self.len(),
            dtype: "f32le".into(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        out.reserve(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Writes the vector file at `path` and the id manifest at `path.ids`.
    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let mut ids = self.ids.join("\n");
        if !ids.is_empty() {
            ids.push('\n');
        }
        crate::io::atomic_write(&Self::ids_path(path), ids.as_bytes())?;
        crate::io::atomic_write(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let format_err = |message: String| IndexError::Format {
            path: path.to_path_buf(),
            message,
        };
        let bytes = fs::read(path)?;
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| format_err("missing header line".into()))?;
        let header: IndexHeader =
            serde_json::from_slice(&bytes[..newline]).map_err(|e| format_err(e.to_string()))?;
        if header.format != INDEX_FORMAT || header.version != 1 || header.dtype != "f32le" {
            return Err(format_err(format!(
                "unsupported format {} v{} {}",
                header.format, header.version, header.dtype
            )));
        }
        let body = &bytes[newline + 1..];
        if body.len() != header.count * header.dim * 4 {
            return Err(format_err(format!(
                "expected {} bytes of vectors, found {}",
                header.count * header.dim * 4,
                body.len()
            )));
        }
        let ids_text = fs::read_to_string(Self::ids_path(path))?;
        let ids: Vec<&str> = ids_text.lines().collect();
        if ids.len() != header.count {
            return Err(format_err(format!(
                "id manifest lists {} ids for {} vectors",
                ids.len(),
                header.count
            )));
        }
        let mut index = VectorIndex::new(header.dim, &header.provider);
        for (i, id) in ids.iter().enumerate() {
            let row: Vec<f64> = body[i * header.dim * 4..(i + 1) * header.dim * 4]
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            index.add(id, &EmbeddingVector(row))?;
        }
        Ok(index)
    }
}

#[derive(Debug, Clone, Default)]
pub struct BuildOptions {
    pub batch_size: usize,
    /// Where partial progress is saved when the provider fails, and resumed
    /// from on the next build.
    pub checkpoint: Option<PathBuf>,
}

/// Embeds every frame's rendered text into a fresh index keyed by frame id.
pub fn build_frame_index(
    inventory: &FrameInventory,
    provider: &dyn EmbeddingProvider,
    opts: &BuildOptions,
) -> Result<VectorIndex, IndexError> {
    if inventory.is_empty() {
        return Err(IndexError::EmptyInventory);
    }
    let mut index = VectorIndex::new(provider.dim(), &provider.id());
    if let Some(cp) = opts.checkpoint.as_deref().filter(|p| p.exists()) {
        match VectorIndex::load(cp) {
            Ok(partial)
                if partial.provider == index.provider
                    && partial.dim == index.dim
                    && partial.ids.iter().all(|id| inventory.get(id).is_some()) =>
            {
                log::info!("resuming index build from {} ({} items)", cp.display(), partial.len());
                index = partial;
            }
            _ => log::warn!("ignoring incompatible checkpoint {}", cp.display()),
        }
    }

    let pending: Vec<_> = inventory.frames().filter(|f| !index.contains(&f.id)).collect();
    let batch = opts.batch_size.max(1);
    for chunk in pending.chunks(batch) {
        let texts: Vec<String> = chunk.iter().map(|f| render_frame_text(f)).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        match embed_texts(provider, &refs) {
            Ok(vectors) => {
                for (frame, v) in chunk.iter().zip(&vectors) {
                    index.add(&frame.id, v)?;
                }
            }
            Err(source) => {
                if let Some(cp) = &opts.checkpoint {
                    index.save(cp)?;
                }
                return Err(IndexError::Provider {
                    indexed: index.len(),
                    checkpoint: opts.checkpoint.clone(),
                    source,
                });
            }
        }
    }
    if let Some(cp) = &opts.checkpoint {
        if cp.exists() {
            fs::remove_file(cp)?;
            let _ = fs::remove_file(VectorIndex::ids_path(cp));
        }
    }
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::framenet::{Frame, FrameElement, CoreStatus};
    use rand::{Rng, SeedableRng};
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn unit(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector(values.to_vec())
    }

    #[test]
    fn hash_fold_is_deterministic_and_normalized() {
        let p = HashFoldProvider::new(64);
        let a = embed_text(&p, "replaces. person, state or item replaced").unwrap();
        let b = embed_text(&p, "replaces.  person, state or item replaced").unwrap();
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() < 1e-12);
        assert_eq!(a.dim(), 64);
    }

    #[test]
    fn hash_fold_separates_different_texts() {
        let p = HashFoldProvider::new(128);
        let a = embed_text(&p, "instance of").unwrap();
        let b = embed_text(&p, "country of citizenship").unwrap();
        let mut idx = VectorIndex::new(128, &p.id());
        idx.add("a", &a).unwrap();
        let hit = &idx.search(&b, 1).unwrap()[0];
        assert!(hit.score < 1.0);
    }

    #[test]
    fn empty_text_is_rejected() {
        let p = HashFoldProvider::new(8);
        assert!(matches!(embed_text(&p, "   "), Err(EmbedError::EmptyText)));
        assert!(matches!(embed_text(&p, "..."), Err(EmbedError::EmptyText)));
    }

    #[test]
    fn add_rejects_duplicates_and_wrong_dims() {
        let mut idx = VectorIndex::new(2, "t");
        idx.add("a", &unit(&[1.0, 0.0])).unwrap();
        assert_eq!(idx.len(), 1);
        assert!(matches!(idx.add("a", &unit(&[0.0, 1.0])), Err(IndexError::DuplicateId(_))));
        assert!(matches!(
            idx.add("b", &unit(&[1.0, 0.0, 0.0])),
            Err(IndexError::DimensionMismatch { .. })
        ));
        assert!(matches!(idx.add("c", &unit(&[f64::NAN, 0.0])), Err(IndexError::NonFinite)));
        assert_eq!(idx.len(), 1);
    }

    #[test]
    fn search_identity_and_orthogonality() {
        let mut idx = VectorIndex::new(3, "t");
        idx.add("x", &unit(&[0.3, -0.2, 0.9])).unwrap();
        let hits = idx.search(&unit(&[0.3, -0.2, 0.9]), 1).unwrap();
        assert_eq!(hits[0].item_id, "x");
        assert!((hits[0].score - 1.0).abs() < 1e-9);

        let mut idx = VectorIndex::new(2, "t");
        idx.add("y", &unit(&[1.0, 0.0])).unwrap();
        let hits = idx.search(&unit(&[0.0, 2.0]), 1).unwrap();
        assert!(hits[0].score.abs() < 1e-9);
    }

    #[test]
    fn search_validates_arguments() {
        let mut idx = VectorIndex::new(2, "t");
        idx.add("y", &unit(&[1.0, 0.0])).unwrap();
        assert!(matches!(idx.search(&unit(&[1.0, 0.0]), 0), Err(IndexError::ZeroK)));
        assert!(matches!(
            idx.search(&unit(&[1.0]), 1),
            Err(IndexError::DimensionMismatch { .. })
        ));
        assert_eq!(idx.search(&unit(&[1.0, 0.0]), 10).unwrap().len(), 1);
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let mut idx = VectorIndex::new(2, "t");
        for id in ["c", "a", "b"] {
            idx.add(id, &unit(&[1.0, 1.0])).unwrap();
        }
        let ids: Vec<_> = idx.search(&unit(&[2.0, 2.0]), 3).unwrap().into_iter().map(|h| h.item_id).collect();
        assert_eq!(ids, vec!["a", "b", "c"]);
    }

    #[test]
    fn add_n_random_items() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut idx = VectorIndex::new(16, "t");
        for i in 0..257 {
            let v: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            idx.add(&format!("item{i}"), &EmbeddingVector(v)).unwrap();
        }
        assert_eq!(idx.len(), 257);
    }

    #[test]
    fn persistence_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frames.idx");
        let p = HashFoldProvider::new(32);
        let mut idx = VectorIndex::new(32, &p.id());
        for t in ["alpha", "beta gamma", "delta"] {
            idx.add(t, &embed_text(&p, t).unwrap()).unwrap();
        }
        idx.save(&path).unwrap();
        let loaded = VectorIndex::load(&path).unwrap();
        assert_eq!(loaded, idx);
        let q = embed_text(&p, "beta").unwrap();
        assert_eq!(loaded.search(&q, 3).unwrap(), idx.search(&q, 3).unwrap());
        // header then 3 * 32 * 4 bytes of little-endian floats
        let bytes = fs::read(&path).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(bytes.len() - nl - 1, 3 * 32 * 4);
        let first = f32::from_le_bytes(bytes[nl + 1..nl + 5].try_into().unwrap());
        assert_eq!(first, idx.row(0)[0]);
    }

    #[test]
    fn load_rejects_truncated_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.idx");
        let mut idx = VectorIndex::new(2, "t");
        idx.add("a", &unit(&[1.0, 2.0])).unwrap();
        idx.save(&path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, bytes).unwrap();
        assert!(matches!(VectorIndex::load(&path), Err(IndexError::Format { .. })));
    }

    fn inventory(n: usize) -> FrameInventory {
        FrameInventory::from_frames(
            "test",
            (0..n).map(|i| Frame {
                id: format!("F{i}"),
                label: format!("Frame number {i}"),
                definition: format!("definition {i}"),
                elements: vec![FrameElement::new("Agent", "", CoreStatus::Core)],
            }),
        )
        .unwrap()
    }

    #[test]
    fn build_is_deterministic_and_dimension_scoped() {
        let inv = inventory(20);
        let a = build_frame_index(&inv, &HashFoldProvider::new(64), &BuildOptions::default()).unwrap();
        let b = build_frame_index(&inv, &HashFoldProvider::new(64), &BuildOptions::default()).unwrap();
        assert_eq!(a.len(), 20);
        assert_eq!(a.to_bytes(), b.to_bytes());

        let c = build_frame_index(&inv, &HashFoldProvider::new(32), &BuildOptions::default()).unwrap();
        assert_ne!(a.provider(), c.provider());
        let q = embed_text(&HashFoldProvider::new(64), "Frame").unwrap();
        assert!(matches!(c.search(&q, 1), Err(IndexError::DimensionMismatch { .. })));
        assert!(c.check_provider(&HashFoldProvider::new(64)).is_err());
    }

    #[test]
    fn empty_inventory_is_rejected() {
        let err = build_frame_index(&inventory(0), &HashFoldProvider::new(8), &BuildOptions::default());
        assert!(matches!(err, Err(IndexError::EmptyInventory)));
    }

    /// Fails every batch after the first `ok_batches`.
    struct Failing {
        inner: HashFoldProvider,
        ok_batches: usize,
        calls: AtomicUsize,
    }

    impl EmbeddingProvider for Failing {
        fn id(&self) -> String {
            self.inner.id()
        }
        fn dim(&self) -> usize {
            self.inner.dim()
        }
        fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
            if self.calls.fetch_add(1, Ordering::SeqCst) >= self.ok_batches {
                return Err(EmbedError::Http(503));
            }
            self.inner.embed_batch(texts)
        }
    }

    #[test]
    fn provider_failure_checkpoints_and_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let cp = dir.path().join("frames.idx.partial");
        let opts = BuildOptions {
            batch_size: 4,
            checkpoint: Some(cp.clone()),
        };
        let inv = inventory(10);
        let failing = Failing {
            inner: HashFoldProvider::new(16),
            ok_batches: 2,
            calls: AtomicUsize::new(0),
        };
        match build_frame_index(&inv, &failing, &opts) {
            Err(IndexError::Provider { indexed, .. }) => assert_eq!(indexed, 8),
            other => panic!("expected provider failure, got {other:?}"),
        }
        assert!(cp.exists());
        let resumed = build_frame_index(&inv, &HashFoldProvider::new(16), &opts).unwrap();
        assert!(!cp.exists());
        let fresh = build_frame_index(&inv, &HashFoldProvider::new(16), &BuildOptions::default()).unwrap();
        assert_eq!(resumed.to_bytes(), fresh.to_bytes());
    }
}
