//! The ten pipeline stages. Each reads its inputs from the configuration and
//! from upstream artifacts in the output dir, writes its own artifacts
//! atomically, and records itself in the manifest.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use frase::argmap::{AnnotatorBackend, GenerationBackend, LexicalBackend};
use frase::dataset::{
    annotate_entries, build_lcq3, build_prompt, load_lcq2, make_original_split, make_unknown_template_split,
    make_variant, split_stats, template_overlap, AnnotationRecord, Lcq2Entry, Lcq3Entry, Provenance, SplitName,
    SplitSpec, Subset, UnknownTemplateOptions, Variant,
};
use frase::embedindex::{
    build_frame_index, BuildOptions, EmbedError, EmbeddingProvider, HashFoldProvider, HttpEmbeddingProvider,
    IndexError, VectorIndex,
};
use frase::evalharness::{
    evaluate_run, AnswerCache, CachedExecutor, EvalConfig, EvalError, EvalOptions, ExecOutcome, GoldEntry,
    HttpSparqlEndpoint, MockMap, MockSparqlServer, SparqlExecutor,
};
use frase::framealign::{align_corpus, AlignConfig, AlignRecord, Aligner, AlignmentStats};
use frase::framenet::{load_frame_inventory, FrameInventory, InventoryFormat};
use frase::kbclient::{DescriptorCache, DescriptorKind, DescriptorStatus, KbDescriptor, KbError, KbFetcher, WikidataClient, WikidataConfig};
use frase::sparqltool::extract_uris;
use frase::transport::ReqwestTransport;

use crate::config::PipelineConfig;
use crate::error::{CliError, InputContext};
use crate::manifest::{hash_value, input_digest, Manifest, StageRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    IngestFramenet,
    FetchDescriptors,
    BuildIndex,
    DetectFrames,
    Annotate,
    BuildLcq3,
    Split,
    Stats,
    Prompts,
    Eval,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::IngestFramenet => "ingest-framenet",
            Stage::FetchDescriptors => "fetch-descriptors",
            Stage::BuildIndex => "build-index",
            Stage::DetectFrames => "detect-frames",
            Stage::Annotate => "annotate",
            Stage::BuildLcq3 => "build-lcq3",
            Stage::Split => "split",
            Stage::Stats => "stats",
            Stage::Prompts => "prompts",
            Stage::Eval => "eval",
        }
    }

    fn upstream(self, cfg: &PipelineConfig) -> Vec<Stage> {
        match self {
            Stage::IngestFramenet | Stage::FetchDescriptors => vec![],
            Stage::BuildIndex => vec![Stage::IngestFramenet],
            Stage::DetectFrames => vec![Stage::BuildIndex, Stage::FetchDescriptors],
            Stage::Annotate => vec![Stage::DetectFrames, Stage::IngestFramenet],
            Stage::BuildLcq3 => vec![Stage::Annotate],
            Stage::Split => vec![Stage::BuildLcq3],
            Stage::Stats | Stage::Prompts => vec![Stage::Split],
            Stage::Eval if cfg.eval.subset == "all" => vec![Stage::BuildLcq3],
            Stage::Eval => vec![Stage::BuildLcq3, Stage::Split],
        }
    }
}

pub const FRAMES: &str = "frames.jsonl";
pub const FRAMES_META: &str = "frames.meta.json";
pub const DESCRIPTORS: &str = "descriptors.jsonl";
pub const ALIGNMENTS: &str = "alignments.jsonl";
pub const ALIGNMENT_STATS: &str = "alignment_stats.json";
pub const ANNOTATIONS: &str = "annotations.jsonl";
pub const LCQ3: &str = "lcq3.jsonl";
pub const EVAL_REPORT: &str = "eval_report.json";
pub const EVAL_TABLE: &str = "eval_report.txt";
pub const EVAL_PARTIAL: &str = "eval_report.partial.json";

const CHUNK: usize = 256;

/// Outcome of one stage, printed as a summary line.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub stage: Stage,
    pub config_hash: String,
    pub outputs: Vec<String>,
    pub summary: Value,
}

impl Outcome {
    pub fn json_line(&self) -> String {
        let mut v = json!({
            "stage": self.stage.name(),
            "status": "ok",
            "config_hash": self.config_hash,
            "outputs": self.outputs,
        });
        if let (Value::Object(m), Value::Object(s)) = (&mut v, &self.summary) {
            for (k, x) in s {
                m.insert(k.clone(), x.clone());
            }
        }
        v.to_string()
    }

    pub fn human_line(&self) -> String {
        let mut parts = Vec::new();
        if let Value::Object(s) = &self.summary {
            for (k, v) in s {
                match v {
                    Value::Object(_) | Value::Array(_) => {}
                    Value::String(x) => parts.push(format!("{k}={x}")),
                    other => parts.push(format!("{k}={other}")),
                }
            }
        }
        format!("{}: {} -> {}", self.stage.name(), parts.join(" "), self.outputs.join(", "))
    }
}

pub struct Pipeline {
    cfg: PipelineConfig,
    manifest: Manifest,
    digests: RefCell<HashMap<PathBuf, String>>,
    hashes: RefCell<HashMap<Stage, String>>,
    written: Vec<(String, String)>,
}

fn json_err(e: serde_json::Error) -> CliError {
    CliError::input(format!("serialization failed: {e}"))
}

fn to_jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> Result<Vec<u8>, CliError> {
    frase::io::to_jsonl(items).map_err(json_err)
}

fn pretty<T: Serialize>(v: &T) -> Result<Vec<u8>, CliError> {
    let mut b = serde_json::to_vec_pretty(v).map_err(json_err)?;
    b.push(b'\n');
    Ok(b)
}

fn embed_is_service(e: &EmbedError) -> bool {
    matches!(e, EmbedError::Unreachable(_) | EmbedError::Http(_) | EmbedError::BadResponse(_))
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self, CliError> {
        std::fs::create_dir_all(cfg.output_dir())
            .map_err(|e| CliError::input(format!("cannot create {}: {e}", cfg.output_dir().display())))?;
        let manifest = Manifest::load(cfg.output_dir())?;
        Ok(Self {
            cfg,
            manifest,
            digests: RefCell::default(),
            hashes: RefCell::default(),
            written: Vec::new(),
        })
    }

    fn out(&self, rel: &str) -> PathBuf {
        self.cfg.output_dir().join(rel)
    }

    fn digest(&self, path: &Path) -> Result<String, CliError> {
        if let Some(d) = self.digests.borrow().get(path) {
            return Ok(d.clone());
        }
        let d = input_digest(path)?;
        self.digests.borrow_mut().insert(path.to_path_buf(), d.clone());
        Ok(d)
    }

    fn inventory_format(&self) -> Result<InventoryFormat, CliError> {
        match &self.cfg.framenet.format {
            Some(f) => f.parse().input_ctx("framenet.format"),
            None if self.cfg.framenet_path()?.is_dir() => Ok(InventoryFormat::FramenetXmlDir),
            None => Ok(InventoryFormat::JsonLines),
        }
    }

    pub fn embedding_provider(&self) -> Result<Box<dyn EmbeddingProvider>, CliError> {
        let e = &self.cfg.embed;
        Ok(match e.provider.as_str() {
            "http" => {
                let url = self
                    .cfg
                    .services
                    .embed_url
                    .as_deref()
                    .ok_or_else(|| CliError::input("embed.provider = \"http\" needs an embedding URL (FRASE_EMBED_URL)"))?;
                Box::new(
                    HttpEmbeddingProvider::new(url, e.dim, Box::new(ReqwestTransport::default()))
                        .with_batch_size(e.batch_size.max(1))
                        .with_timeout(Duration::from_millis(e.timeout_ms)),
                )
            }
            _ => Box::new(HashFoldProvider::new(e.dim)),
        })
    }

    fn annotator(&self) -> Result<Box<dyn AnnotatorBackend>, CliError> {
        let a = &self.cfg.annotate;
        Ok(match a.backend.as_str() {
            "http" => {
                let url = self
                    .cfg
                    .services
                    .gen_url
                    .as_deref()
                    .ok_or_else(|| CliError::input("annotate.backend = \"http\" needs a generation URL (FRASE_GEN_URL)"))?;
                Box::new(
                    GenerationBackend::new(url, Box::new(ReqwestTransport::default()))
                        .with_max_tokens(a.max_tokens)
                        .with_timeout(Duration::from_millis(a.timeout_ms)),
                )
            }
            _ => Box::new(LexicalBackend::default()),
        })
    }

    fn wikidata_api(&self) -> String {
        self.cfg
            .services
            .wikidata_api
            .clone()
            .unwrap_or_else(|| frase::kbclient::DEFAULT_WIKIDATA_API.to_string())
    }

    fn split_file(&self) -> String {
        format!("splits/{}.json", self.cfg.split.name.replace('-', "_"))
    }

    fn endpoint_label(&self) -> Result<String, CliError> {
        if let Some(url) = &self.cfg.services.sparql_endpoint {
            return Ok(url.clone());
        }
        if let Some(map) = &self.cfg.eval.mock_map {
            let name = map.file_name().unwrap_or_default().to_string_lossy();
            return Ok(format!("mock:{name}#{}", &self.digest(map)?[..12]));
        }
        Err(CliError::input(
            "no SPARQL endpoint configured (FRASE_SPARQL_ENDPOINT, --sparql-endpoint or eval.mock_map)",
        ))
    }

    /// Hash of everything that determines a stage's outputs under the current
    /// configuration, chained through its upstream stages.
    pub fn stage_hash(&self, stage: Stage) -> Result<String, CliError> {
        if let Some(h) = self.hashes.borrow().get(&stage) {
            return Ok(h.clone());
        }
        let cfg = &self.cfg;
        let v = match stage {
            Stage::IngestFramenet => json!({
                "format": self.inventory_format()?.to_string(),
                "version": cfg.framenet.version,
                "input": self.digest(cfg.framenet_path()?)?,
            }),
            Stage::FetchDescriptors => json!({
                "lcq2": self.digest(cfg.lcq2_path()?)?,
                "api": self.wikidata_api(),
                "language": cfg.kb.language,
                "seed": match &cfg.kb.seed { Some(p) => Some(self.digest(p)?), None => None },
            }),
            Stage::BuildIndex => json!({
                "frames": self.stage_hash(Stage::IngestFramenet)?,
                "provider": self.embedding_provider()?.id(),
            }),
            Stage::DetectFrames => json!({
                "index": self.stage_hash(Stage::BuildIndex)?,
                "descriptors": self.stage_hash(Stage::FetchDescriptors)?,
                "lcq2": self.digest(cfg.lcq2_path()?)?,
                "align": cfg.align,
            }),
            Stage::Annotate => json!({
                "alignments": self.stage_hash(Stage::DetectFrames)?,
                "frames": self.stage_hash(Stage::IngestFramenet)?,
                "backend": self.annotator()?.id(),
                "max_tokens": if cfg.annotate.backend == "http" { Some(cfg.annotate.max_tokens) } else { None },
            }),
            Stage::BuildLcq3 => json!({ "annotations": self.stage_hash(Stage::Annotate)? }),
            Stage::Split => json!({
                "lcq3": self.stage_hash(Stage::BuildLcq3)?,
                "name": cfg.split.name.replace('-', "_"),
                "seed": cfg.split.seed,
                "relax_validation": cfg.split.relax_validation,
                "held_out_fraction": cfg.split.held_out_fraction,
            }),
            Stage::Stats | Stage::Prompts => json!({
                "split": self.stage_hash(Stage::Split)?,
                "variant": cfg.split.variant,
            }),
            Stage::Eval => json!({
                "lcq3": self.stage_hash(Stage::BuildLcq3)?,
                "split": if cfg.eval.subset == "all" { None } else { Some(self.stage_hash(Stage::Split)?) },
                "subset": cfg.eval.subset,
                "predictions": match &cfg.eval.predictions { Some(p) => Some(self.digest(p)?), None => None },
                "endpoint": self.endpoint_label()?,
                "timeout_ms": cfg.eval.timeout_ms,
            }),
        };
        let h = hash_value(&json!({ "stage": stage.name(), "pipeline": env!("CARGO_PKG_VERSION"), "inputs": v }));
        self.hashes.borrow_mut().insert(stage, h.clone());
        Ok(h)
    }

    /// Verifies every ancestor of `stage`, earliest first, so the error
    /// names the first stale or missing stage.
    fn check_upstream(&self, stage: Stage) -> Result<(), CliError> {
        let mut ancestors = Vec::new();
        let mut todo = stage.upstream(&self.cfg);
        while let Some(s) = todo.pop() {
            if !ancestors.contains(&s) {
                ancestors.push(s);
                todo.extend(s.upstream(&self.cfg));
            }
        }
        ancestors.sort();
        for s in ancestors {
            self.manifest.require(self.cfg.output_dir(), s.name(), &self.stage_hash(s)?)?;
        }
        Ok(())
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        frase::io::atomic_write(&self.out(rel), bytes)
            .map_err(|e| CliError::input(format!("cannot write {rel}: {e}")))?;
        self.written.push((rel.to_string(), frase::io::sha256_hex(bytes)));
        Ok(())
    }

    /// Registers a file some library call already wrote.
    fn record_file(&mut self, rel: &str) -> Result<(), CliError> {
        let d = frase::io::sha256_file(&self.out(rel)).input_ctx(rel)?;
        self.written.push((rel.to_string(), d));
        Ok(())
    }

    fn finish(&mut self, stage: Stage, summary: Value) -> Result<Outcome, CliError> {
        let config_hash = self.stage_hash(stage)?;
        let outputs: BTreeMap<String, String> = std::mem::take(&mut self.written).into_iter().collect();
        let names: Vec<String> = outputs.keys().cloned().collect();
        self.manifest.stages.insert(
            stage.name().to_string(),
            StageRecord {
                config_hash: config_hash.clone(),
                outputs,
                summary: summary.clone(),
            },
        );
        self.manifest.save(self.cfg.output_dir())?;
        Ok(Outcome {
            stage,
            config_hash,
            outputs: names,
            summary,
        })
    }

    fn read_jsonl<T: DeserializeOwned>(&self, rel: &str) -> Result<Vec<T>, CliError> {
        frase::io::read_jsonl_strict(&self.out(rel)).input_ctx(rel)
    }

    fn load_inventory(&self) -> Result<FrameInventory, CliError> {
        load_frame_inventory(&self.out(FRAMES), InventoryFormat::JsonLines, &self.cfg.framenet.version)
            .input_ctx(FRAMES)
    }

    fn load_entries(&self) -> Result<Vec<Lcq2Entry>, CliError> {
        let path = self.cfg.lcq2_path()?;
        load_lcq2(path).input_ctx(path.display())
    }

    pub fn run(&mut self, stage: Stage) -> Result<Outcome, CliError> {
        self.check_upstream(stage)?;
        self.written.clear();
        match stage {
            Stage::IngestFramenet => self.ingest_framenet(),
            Stage::FetchDescriptors => self.fetch_descriptors(),
            Stage::BuildIndex => self.build_index(),
            Stage::DetectFrames => self.detect_frames(),
            Stage::Annotate => self.annotate(),
            Stage::BuildLcq3 => self.build_lcq3(),
            Stage::Split => self.split(),
            Stage::Stats => self.stats(),
            Stage::Prompts => self.prompts(),
            Stage::Eval => self.eval(),
        }
    }

    fn ingest_framenet(&mut self) -> Result<Outcome, CliError> {
        let path = self.cfg.framenet_path()?.to_path_buf();
        let inv = load_frame_inventory(&path, self.inventory_format()?, &self.cfg.framenet.version)
            .input_ctx(path.display())?;
        if inv.is_empty() {
            return Err(CliError::input(format!("{}: no usable frames", path.display())));
        }
        self.write(FRAMES, &to_jsonl(inv.frames())?)?;
        let meta = json!({ "frames": inv.len(), "source": inv.source_meta });
        self.write(FRAMES_META, &pretty(&meta)?)?;
        let m = &inv.source_meta;
        self.finish(
            Stage::IngestFramenet,
            json!({
                "frames": inv.len(),
                "skipped": m.skipped,
                "missing_definitions": m.missing_definitions,
                "frames_without_elements": m.frames_without_elements,
            }),
        )
    }

    fn fetch_descriptors(&mut self) -> Result<Outcome, CliError> {
        let entries = self.load_entries()?;
        let mut requests = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut parse_errors = 0usize;
        for e in &entries {
            match extract_uris(&e.sparql) {
                Ok(u) => {
                    let kinds = u.relations.iter().map(|r| (r, DescriptorKind::Relation));
                    for (uri, kind) in kinds.chain(u.classes.iter().map(|c| (c, DescriptorKind::Class))) {
                        if seen.insert(uri.entity_iri()) {
                            requests.push((uri.clone(), kind));
                        }
                    }
                }
                Err(err) => {
                    parse_errors += 1;
                    log::warn!("{}: query does not parse: {err}", e.uid);
                }
            }
        }
        let cache_path = self.cfg.cache_dir().join("descriptors.jsonl");
        let cache = DescriptorCache::open(&cache_path).input_ctx(cache_path.display())?;
        if let Some(seed) = &self.cfg.kb.seed {
            let seeded: Vec<KbDescriptor> = frase::io::read_jsonl_strict(seed).input_ctx(seed.display())?;
            let fresh: Vec<KbDescriptor> = seeded
                .into_iter()
                .filter(|d| !cache.snapshot().contains_key(&d.uri))
                .collect();
            cache.insert_many(&fresh).input_ctx("descriptor cache")?;
        }
        let fetcher = if self.cfg.kb.offline {
            KbFetcher::offline(cache)
        } else {
            let kb = &self.cfg.kb;
            let client = WikidataClient::new(
                WikidataConfig {
                    api_url: self.wikidata_api(),
                    language: kb.language.clone(),
                    timeout: Duration::from_millis(kb.timeout_ms),
                    requests_per_second: kb.requests_per_second,
                    max_in_flight: kb.max_in_flight.max(1),
                    ..WikidataConfig::default()
                },
                Box::new(ReqwestTransport::default()),
            );
            KbFetcher::online(cache, client)
        };
        let results = fetcher.fetch_many(&requests);
        fetcher.cache().compact().input_ctx("descriptor cache")?;

        let (mut found, mut missing, mut service) = (Vec::new(), Vec::new(), Vec::new());
        for ((uri, _), r) in requests.iter().zip(results) {
            match r {
                Ok(d) => found.push(d),
                Err(e) if e.is_service_failure() => service.push(format!("{}: {e}", uri.prefixed())),
                Err(KbError::CacheMiss(id)) => missing.push(id),
                Err(e) => missing.push(format!("{}: {e}", uri.prefixed())),
            }
        }
        if !service.is_empty() {
            return Err(CliError::service(format!(
                "Wikidata lookups failed for {} of {} descriptors (first: {}); fetched descriptors are cached, rerun to resume",
                service.len(),
                requests.len(),
                service[0]
            )));
        }
        for m in &missing {
            log::warn!("descriptor unavailable: {m}");
        }
        found.sort_by(|a, b| a.uri.cmp(&b.uri));
        let count = |s: DescriptorStatus| found.iter().filter(|d| d.status == s).count();
        let summary = json!({
            "entries": entries.len(),
            "requested": requests.len(),
            "descriptors": found.len(),
            "not_found": count(DescriptorStatus::NotFound),
            "degraded": count(DescriptorStatus::MissingDescription) + count(DescriptorStatus::MissingLabel),
            "unavailable": missing.len(),
            "parse_errors": parse_errors,
        });
        self.write(DESCRIPTORS, &to_jsonl(&found)?)?;
        self.finish(Stage::FetchDescriptors, summary)
    }

    fn build_index(&mut self) -> Result<Outcome, CliError> {
        let inv = self.load_inventory()?;
        let provider = self.embedding_provider()?;
        let checkpoint = self.cfg.cache_dir().join("index.checkpoint");
        let opts = BuildOptions {
            batch_size: self.cfg.embed.batch_size.max(1),
            checkpoint: Some(checkpoint),
        };
        let index = build_frame_index(&inv, provider.as_ref(), &opts).map_err(|e| match &e {
            IndexError::Provider { source, .. } if embed_is_service(source) => CliError::service(e.to_string()),
            _ => CliError::input(e.to_string()),
        })?;
        let path = self.cfg.index_path();
        index.save(&path).input_ctx(path.display())?;
        let rel = self.cfg.paths.index.to_string_lossy().replace('\\', "/");
        self.record_file(&rel)?;
        self.record_file(&format!("{rel}.ids"))?;
        self.finish(
            Stage::BuildIndex,
            json!({ "frames": index.len(), "dim": index.dim(), "provider": index.provider() }),
        )
    }

    fn detect_frames(&mut self) -> Result<Outcome, CliError> {
        let index = VectorIndex::load(&self.cfg.index_path()).input_ctx("frame index")?;
        let provider = self.embedding_provider()?;
        index.check_provider(provider.as_ref()).input_ctx("frame index")?;
        let cache = DescriptorCache::in_memory();
        let descriptors: Vec<KbDescriptor> = self.read_jsonl(DESCRIPTORS)?;
        cache.insert_many(&descriptors).input_ctx(DESCRIPTORS)?;
        let kb = KbFetcher::offline(cache);
        let a = &self.cfg.align;
        let cfg = AlignConfig {
            k: a.k,
            threshold: a.threshold,
            dedupe_frames: a.dedupe_frames,
        };
        let aligner = Aligner::new(&index, provider.as_ref(), &kb, cfg).input_ctx("align")?;
        let entries = self.load_entries()?;
        let workers = self.cfg.workers;
        let hash = self.stage_hash(Stage::DetectFrames)?;

        let chunks: Vec<(Vec<AlignRecord>, AlignmentStats)> =
            self.resumable("alignments.partial.jsonl", &hash, &entries, |chunk| {
                let (records, stats) = align_corpus(chunk, &aligner, workers);
                if stats.provider_errors > 0 {
                    let first = records.iter().find_map(|r| r.error.clone()).unwrap_or_default();
                    return Err(CliError::service(format!(
                        "embedding failed for {} entries (first: {first}); completed chunks are kept, rerun to resume",
                        stats.provider_errors
                    )));
                }
                Ok((records, stats))
            })?;
        let mut stats = AlignmentStats::default();
        let mut records = Vec::with_capacity(entries.len());
        for (r, s) in chunks {
            records.extend(r);
            add_stats(&mut stats, &s);
        }
        self.write(ALIGNMENTS, &to_jsonl(&records)?)?;
        self.write(ALIGNMENT_STATS, &pretty(&stats)?)?;
        self.drop_partial("alignments.partial.jsonl");
        self.finish(Stage::DetectFrames, serde_json::to_value(&stats).map_err(json_err)?)
    }

    fn annotate(&mut self) -> Result<Outcome, CliError> {
        let inv = self.load_inventory()?;
        let alignments: Vec<AlignRecord> = self.read_jsonl(ALIGNMENTS)?;
        let entries = self.load_entries()?;
        let backend = self.annotator()?;
        let workers = self.cfg.workers;
        let hash = self.stage_hash(Stage::Annotate)?;
        let chunks: Vec<Vec<AnnotationRecord>> = self.resumable("annotations.partial.jsonl", &hash, &entries, |chunk| {
            let records = annotate_entries(chunk, &alignments, &inv, backend.as_ref(), workers);
            if let Some(bad) = records.iter().find(|r| r.service_error) {
                return Err(CliError::service(format!(
                    "annotator failed on {}: {}; completed chunks are kept, rerun to resume",
                    bad.uid,
                    bad.error.clone().unwrap_or_default()
                )));
            }
            Ok(records)
        })?;
        let records: Vec<AnnotationRecord> = chunks.into_iter().flatten().collect();
        let summary = json!({
            "records": records.len(),
            "annotations": records.iter().map(|r| r.annotations.len()).sum::<usize>(),
            "repairs": records.iter().map(|r| r.repairs.len()).sum::<usize>(),
            "errors": records.iter().filter(|r| r.error.is_some()).count(),
        });
        self.write(ANNOTATIONS, &to_jsonl(&records)?)?;
        self.drop_partial("annotations.partial.jsonl");
        self.finish(Stage::Annotate, summary)
    }

    /// Runs `f` over `CHUNK`-sized slices of `items`, appending each finished
    /// chunk to a partial file so an interrupted run resumes where it stopped.
    fn resumable<I, T, F>(&self, partial: &str, hash: &str, items: &[I], mut f: F) -> Result<Vec<T>, CliError>
    where
        T: Serialize + DeserializeOwned,
        F: FnMut(&[I]) -> Result<T, CliError>,
    {
        let path = self.out(partial);
        let header = json!({ "config_hash": hash }).to_string();
        let mut done: Vec<T> = Vec::new();
        if let Ok(text) = std::fs::read_to_string(&path) {
            let mut lines = text.lines();
            if lines.next() == Some(header.as_str()) {
                for line in lines {
                    match serde_json::from_str(line) {
                        Ok(chunk) => done.push(chunk),
                        Err(_) => break,
                    }
                }
                log::info!("{partial}: resuming after {} completed chunks", done.len());
            }
        }
        let mut file = std::fs::File::create(&path).input_ctx(partial)?;
        writeln!(file, "{header}").input_ctx(partial)?;
        for chunk in &done {
            writeln!(file, "{}", serde_json::to_string(chunk).map_err(json_err)?).input_ctx(partial)?;
        }
        for slice in items.chunks(CHUNK).skip(done.len()) {
            let out = f(slice)?;
            writeln!(file, "{}", serde_json::to_string(&out).map_err(json_err)?).input_ctx(partial)?;
            file.flush().input_ctx(partial)?;
            done.push(out);
        }
        Ok(done)
    }

    fn drop_partial(&self, partial: &str) {
        let _ = std::fs::remove_file(self.out(partial));
    }

    fn build_lcq3(&mut self) -> Result<Outcome, CliError> {
        let inv = self.load_inventory()?;
        let entries = self.load_entries()?;
        let alignments: Vec<AlignRecord> = self.read_jsonl(ALIGNMENTS)?;
        let annotations: Vec<AnnotationRecord> = self.read_jsonl(ANNOTATIONS)?;
        let provenance = Provenance::new(&self.stage_hash(Stage::BuildLcq3)?);
        let lcq3 = build_lcq3(&entries, &alignments, &annotations, &inv, &provenance).input_ctx("build-lcq3")?;
        let summary = json!({
            "entries": lcq3.len(),
            "with_frames": lcq3.iter().filter(|e| !e.evoked.is_empty()).count(),
            "flagged": lcq3.iter().filter(|e| !e.flags.is_empty()).count(),
            "unknown_links": lcq3.iter().map(|e| e.unknown_links.len()).sum::<usize>(),
        });
        self.write(LCQ3, &to_jsonl(&lcq3)?)?;
        self.finish(Stage::BuildLcq3, summary)
    }

    fn load_lcq3(&self) -> Result<Vec<Lcq3Entry>, CliError> {
        self.read_jsonl(LCQ3)
    }

    fn load_split(&self) -> Result<SplitSpec, CliError> {
        let rel = self.split_file();
        let text = std::fs::read_to_string(self.out(&rel)).input_ctx(&rel)?;
        serde_json::from_str(&text).input_ctx(&rel)
    }

    fn variant(&self) -> Result<Variant, CliError> {
        self.cfg.split.variant.parse().map_err(CliError::input)
    }

    fn split(&mut self) -> Result<Outcome, CliError> {
        let lcq3 = self.load_lcq3()?;
        let base: Vec<Lcq2Entry> = lcq3.iter().map(|e| e.base.clone()).collect();
        let s = &self.cfg.split;
        let name: SplitName = s.name.parse().map_err(CliError::input)?;
        let mut spec = match name {
            SplitName::Original => make_original_split(&base, s.seed, None),
            SplitName::UnknownTemplate => make_unknown_template_split(
                &base,
                s.seed,
                UnknownTemplateOptions {
                    held_out_fraction: s.held_out_fraction,
                    relax_validation: s.relax_validation,
                    ..Default::default()
                },
            ),
        }
        .input_ctx("split")?;
        spec.variant = self.variant()?;
        let (val_overlap, test_overlap) = template_overlap(&spec, &base);
        if name == SplitName::UnknownTemplate
            && (!test_overlap.is_empty() || (!spec.relaxed_validation && !val_overlap.is_empty()))
        {
            return Err(CliError::input("unknown-template split leaks training templates into evaluation"));
        }
        let [train_t, val_t, test_t] = spec.templates(&base);
        let counts = spec.counts();
        let summary = json!({
            "split": s.name.replace('-', "_"),
            "train": counts[0],
            "validation": counts[1],
            "test": counts[2],
            "templates": { "train": train_t.len(), "validation": val_t.len(), "test": test_t.len() },
            "held_out_templates": spec.held_out_templates.len(),
            "template_overlap": { "validation": val_overlap.len(), "test": test_overlap.len() },
        });
        let rel = self.split_file();
        self.write(&rel, &pretty(&spec)?)?;
        self.finish(Stage::Split, summary)
    }

    fn stats(&mut self) -> Result<Outcome, CliError> {
        let lcq3 = self.load_lcq3()?;
        let spec = self.load_split()?;
        let variant = self.variant()?;
        let materialized = make_variant(&lcq3, &spec, variant);
        let report = split_stats(&spec, &materialized);
        let stem = format!("stats/{}_{}", self.cfg.split.name.replace('-', "_"), self.cfg.split.variant);
        self.write(&format!("{stem}.txt"), report.render_table().as_bytes())?;
        self.write(&format!("{stem}.csv"), report.to_csv().as_bytes())?;
        self.write(&format!("{stem}.json"), &pretty(&report)?)?;
        let mut summary = serde_json::Map::new();
        summary.insert("entries".into(), json!(report.total_entries));
        summary.insert("templates".into(), json!(report.total_templates));
        for s in &report.subsets {
            let name = s.subset.as_str();
            summary.insert(format!("{name}_entries"), json!(s.entries));
            summary.insert(format!("{name}_avg_query_length"), json!(round2(s.query_length.mean)));
        }
        self.finish(Stage::Stats, Value::Object(summary))
    }

    fn prompts(&mut self) -> Result<Outcome, CliError> {
        let lcq3 = self.load_lcq3()?;
        let spec = self.load_split()?;
        let materialized = make_variant(&lcq3, &spec, self.variant()?);
        let dir = format!("prompts/{}/{}", self.cfg.split.name.replace('-', "_"), self.cfg.split.variant);
        let mut written = 0usize;
        for with_frames in [false, true] {
            for subset in Subset::ALL {
                let prompts: Vec<_> = materialized
                    .subset(subset)
                    .iter()
                    .map(|r| build_prompt(r, with_frames))
                    .collect();
                written += prompts.len();
                let kind = if with_frames { "frames" } else { "plain" };
                self.write(&format!("{dir}/{kind}/{}.jsonl", subset.as_str()), &to_jsonl(&prompts)?)?;
            }
        }
        self.finish(
            Stage::Prompts,
            json!({ "records": materialized.len(), "prompts": written, "dropped": materialized.dropped }),
        )
    }

    fn eval(&mut self) -> Result<Outcome, CliError> {
        let lcq3 = self.load_lcq3()?;
        let gold: Vec<GoldEntry> = if self.cfg.eval.subset == "all" {
            lcq3.iter()
                .map(|e| GoldEntry {
                    uid: e.base.uid.clone(),
                    sparql: e.base.sparql.clone(),
                })
                .collect()
        } else {
            let spec = self.load_split()?;
            let wanted = Subset::ALL
                .into_iter()
                .find(|s| s.as_str() == self.cfg.eval.subset)
                .expect("validated subset");
            lcq3.iter()
                .filter(|e| spec.subset_of(&e.base.uid) == Some(wanted))
                .map(|e| GoldEntry {
                    uid: e.base.uid.clone(),
                    sparql: e.base.sparql.clone(),
                })
                .collect()
        };
        let pred_path = self
            .cfg
            .eval
            .predictions
            .clone()
            .ok_or_else(|| CliError::input("no predictions configured (eval.predictions or --predictions)"))?;
        let predictions = load_predictions(&pred_path)?;

        let label = self.endpoint_label()?;
        let timeout = Duration::from_millis(self.cfg.eval.timeout_ms);
        let mut _server = None;
        let url = match (&self.cfg.services.sparql_endpoint, &self.cfg.eval.mock_map) {
            (Some(url), _) => url.clone(),
            (None, Some(map)) => {
                let map = MockMap::load(map).input_ctx(map.display())?;
                let server = MockSparqlServer::start(map, "127.0.0.1:0")
                    .map_err(|e| CliError::service(format!("cannot start mock endpoint: {e}")))?;
                let url = server.url().to_string();
                _server = Some(server);
                url
            }
            (None, None) => unreachable!("endpoint_label checked the configuration"),
        };
        let endpoint = Labeled {
            label: label.clone(),
            inner: HttpSparqlEndpoint::new(
                &url,
                Box::new(ReqwestTransport::default()),
                timeout,
                self.cfg.eval.requests_per_second,
            ),
        };
        let cache_rel = self.cfg.paths.cache_dir.join("answers.jsonl");
        let cache = AnswerCache::open(&self.out(&cache_rel.to_string_lossy())).input_ctx("answer cache")?;
        let executor = CachedExecutor::new(&endpoint, &cache);
        let config = EvalConfig {
            endpoint: label,
            timeout_ms: self.cfg.eval.timeout_ms,
            answer_cache: Some(cache_rel.to_string_lossy().replace('\\', "/")),
        };
        let opts = EvalOptions {
            workers: self.cfg.workers,
            allow_partial: self.cfg.eval.allow_partial,
        };
        let result = evaluate_run(&predictions, &gold, &executor, config, opts);
        cache.compact().input_ctx("answer cache")?;
        let report = match result {
            Ok(r) => r,
            Err(EvalError::Unreachable { endpoint, failed, partial }) => {
                let bytes = pretty(&*partial)?;
                frase::io::atomic_write(&self.out(EVAL_PARTIAL), &bytes).input_ctx(EVAL_PARTIAL)?;
                return Err(CliError::service(format!(
                    "SPARQL endpoint {endpoint} is unreachable ({failed} executions failed); partial report in {EVAL_PARTIAL}, set eval.allow_partial to accept it"
                )));
            }
        };
        log::info!("answer cache: {} hits, {} misses", executor.hits(), executor.misses());
        self.write(EVAL_REPORT, &pretty(&report)?)?;
        self.write(EVAL_TABLE, report.render_table().as_bytes())?;
        let a = &report.aggregate;
        self.finish(
            Stage::Eval,
            json!({
                "entries": a.entries,
                "bleu": round2(a.corpus_bleu),
                "mean_bleu": round2(a.mean_bleu),
                "accuracy": round4(a.accuracy),
                "f1": round4(a.f1),
                "partial": report.partial,
                "missing": a.pred_status.get("missing").copied().unwrap_or(0),
            }),
        )
    }
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn round4(x: f64) -> f64 {
    (x * 10_000.0).round() / 10_000.0
}

fn add_stats(total: &mut AlignmentStats, s: &AlignmentStats) {
    total.entries += s.entries;
    total.entries_with_frames += s.entries_with_frames;
    total.evoked_frames += s.evoked_frames;
    total.skipped_uris += s.skipped_uris;
    total.below_threshold += s.below_threshold;
    total.degraded_descriptors += s.degraded_descriptors;
    total.descriptor_errors += s.descriptor_errors;
    total.provider_errors += s.provider_errors;
    total.parse_errors += s.parse_errors;
}

/// Reports a stable endpoint name so cache keys and reports do not depend
/// on ephemeral ports.
struct Labeled {
    label: String,
    inner: HttpSparqlEndpoint,
}

impl SparqlExecutor for Labeled {
    fn endpoint(&self) -> String {
        self.label.clone()
    }
    fn execute(&self, query: &str) -> ExecOutcome {
        self.inner.execute(query)
    }
}

/// Predictions as JSON lines of `{"uid", "sparql"}` or one JSON object
/// mapping uid to query.
pub fn load_predictions(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = std::fs::read_to_string(path).input_ctx(path.display())?;
    let uid_of = |v: &Value| match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    };
    if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(&text) {
        if !map.contains_key("uid") {
            return map
                .into_iter()
                .map(|(k, v)| match v {
                    Value::String(q) => Ok((k, q)),
                    _ => Err(CliError::input(format!("{}: prediction for {k} is not a string", path.display()))),
                })
                .collect();
        }
    }
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |m: &str| CliError::input(format!("{}:{}: {m}", path.display(), i + 1));
        let v: Value = serde_json::from_str(line).map_err(|e| bad(&e.to_string()))?;
        let uid = v.get("uid").and_then(uid_of).ok_or_else(|| bad("missing uid"))?;
        let q = v
            .get("sparql")
            .or_else(|| v.get("query"))
            .and_then(Value::as_str)
            .ok_or_else(|| bad("missing sparql"))?;
        if out.insert(uid.clone(), q.to_string()).is_some() {
            return Err(bad(&format!("duplicate prediction for {uid}")));
        }
    }
    Ok(out)
}
