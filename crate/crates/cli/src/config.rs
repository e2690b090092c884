//! Pipeline configuration: a TOML file, overridden by environment variables,
//! overridden by command-line flags.

use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub services: Services,
    pub framenet: FramenetSection,
    pub kb: KbSection,
    pub embed: EmbedSection,
    pub align: AlignSection,
    pub annotate: AnnotateSection,
    pub split: SplitSection,
    pub eval: EvalSection,
    /// Worker threads for alignment, annotation and query execution.
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            services: Services::default(),
            framenet: FramenetSection::default(),
            kb: KbSection::default(),
            embed: EmbedSection::default(),
            align: AlignSection::default(),
            annotate: AnnotateSection::default(),
            split: SplitSection::default(),
            eval: EvalSection::default(),
            workers: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// FrameNet inventory: a JSON-lines file or a directory of frame XML.
    pub framenet: Option<PathBuf>,
    /// LC-QuAD 2.0 file (JSON array or JSON lines).
    pub lcq2: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Relative to the output dir.
    pub cache_dir: PathBuf,
    /// Relative to the output dir.
    pub index: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            framenet: None,
            lcq2: None,
            output_dir: PathBuf::from("frase-out"),
            cache_dir: PathBuf::from("cache"),
            index: PathBuf::from("frames.index"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Services {
    pub wikidata_api: Option<String>,
    pub embed_url: Option<String>,
    pub gen_url: Option<String>,
    pub sparql_endpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FramenetSection {
    /// `json-lines` or `framenet-xml-dir`; guessed from the path when unset.
    pub format: Option<String>,
    pub version: String,
}

impl Default for FramenetSection {
    fn default() -> Self {
        Self {
            format: None,
            version: "1.7".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KbSection {
    /// Never contact Wikidata; descriptors must already be cached.
    pub offline: bool,
    /// Descriptor JSON-lines file merged into the cache before fetching.
    pub seed: Option<PathBuf>,
    pub language: String,
    pub requests_per_second: f64,
    pub max_in_flight: usize,
    pub timeout_ms: u64,
}

impl Default for KbSection {
    fn default() -> Self {
        Self {
            offline: false,
            seed: None,
            language: "en".into(),
            requests_per_second: 5.0,
            max_in_flight: 4,
            timeout_ms: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedSection {
    /// `hash-fold` (offline) or `http` (uses `services.embed_url`).
    pub provider: String,
    pub dim: usize,
    pub batch_size: usize,
    pub timeout_ms: u64,
}

impl Default for EmbedSection {
    fn default() -> Self {
        Self {
            provider: "hash-fold".into(),
            dim: 256,
            batch_size: 64,
            timeout_ms: 30_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignSection {
    pub k: usize,
    pub threshold: f64,
    pub dedupe_frames: bool,
}

impl Default for AlignSection {
    fn default() -> Self {
        Self {
            k: 1,
            threshold: 0.0,
            dedupe_frames: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotateSection {
    /// `lexical` (offline) or `http` (uses `services.gen_url`).
    pub backend: String,
    pub max_tokens: u32,
    pub timeout_ms: u64,
}

impl Default for AnnotateSection {
    fn default() -> Self {
        Self {
            backend: "lexical".into(),
            max_tokens: 512,
            timeout_ms: 60_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    /// `original` or `unknown_template`.
    pub name: String,
    pub seed: u64,
    /// `raw`, `reformulated` or `combined`.
    pub variant: String,
    pub relax_validation: bool,
    pub held_out_fraction: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            name: "original".into(),
            seed: 13,
            variant: "raw".into(),
            relax_validation: false,
            held_out_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// JSON lines of `{"uid", "sparql"}`, or a JSON object uid -> query.
    pub predictions: Option<PathBuf>,
    /// Serve this static map in-process when no endpoint is configured.
    pub mock_map: Option<PathBuf>,
    /// `all`, or a subset of the configured split.
    pub subset: String,
    pub timeout_ms: u64,
    pub requests_per_second: f64,
    pub allow_partial: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            predictions: None,
            mock_map: None,
            subset: "all".into(),
            timeout_ms: 30_000,
            requests_per_second: 0.0,
            allow_partial: false,
        }
    }
}

/// Values taken from flags or the environment; `None` leaves the file value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub framenet: Option<PathBuf>,
    pub lcq2: Option<PathBuf>,
    pub wikidata_api: Option<String>,
    pub embed_url: Option<String>,
    pub gen_url: Option<String>,
    pub sparql_endpoint: Option<String>,
    pub workers: Option<usize>,
    pub offline: bool,
}

impl PipelineConfig {
    /// Reads `path` (if any), resolving relative paths against its directory,
    /// then applies overrides and validates.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::input(format!("cannot read config {}: {e}", p.display())))?;
                let mut cfg: PipelineConfig = toml::from_str(&text)
                    .map_err(|e| CliError::input(format!("invalid config {}: {e}", p.display())))?;
                let base = p.parent().unwrap_or(Path::new("."));
                cfg.resolve_against(base);
                cfg
            }
            None => PipelineConfig::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_against(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.paths.framenet, &mut self.paths.lcq2, &mut self.kb.seed, &mut self.eval.predictions, &mut self.eval.mock_map]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        fix(&mut self.paths.output_dir);
    }

    fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.output_dir {
            self.paths.output_dir = v.clone();
        }
        if let Some(v) = &o.framenet {
            self.paths.framenet = Some(v.clone());
        }
        if let Some(v) = &o.lcq2 {
            self.paths.lcq2 = Some(v.clone());
        }
        for (slot, value) in [
            (&mut self.services.wikidata_api, &o.wikidata_api),
            (&mut self.services.embed_url, &o.embed_url),
            (&mut self.services.gen_url, &o.gen_url),
            (&mut self.services.sparql_endpoint, &o.sparql_endpoint),
        ] {
            if value.is_some() {
                slot.clone_from(value);
            }
        }
        if let Some(w) = o.workers {
            self.workers = w;
        }
        if o.offline {
            self.kb.offline = true;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::input(m));
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        for (name, p) in [("cache_dir", &self.paths.cache_dir), ("index", &self.paths.index)] {
            if p.is_absolute() || p.components().any(|c| matches!(c, Component::ParentDir)) {
                return bad(format!("paths.{name} must be relative to the output dir: {}", p.display()));
            }
        }
        if !matches!(self.embed.provider.as_str(), "hash-fold" | "http") {
            return bad(format!("unknown embedding provider `{}`", self.embed.provider));
        }
        if self.embed.dim == 0 {
            return bad("embed.dim must be positive".into());
        }
        if !matches!(self.annotate.backend.as_str(), "lexical" | "http") {
            return bad(format!("unknown annotator backend `{}`", self.annotate.backend));
        }
        if self.align.k == 0 {
            return bad("align.k must be at least 1".into());
        }
        if !(-1.0..=1.0).contains(&self.align.threshold) {
            return bad(format!("align.threshold {} outside [-1, 1]", self.align.threshold));
        }
        if !(0.0..1.0).contains(&self.split.held_out_fraction) || self.split.held_out_fraction == 0.0 {
            return bad("split.held_out_fraction must lie in (0, 1)".into());
        }
        self.split
            .name
            .parse::<frase::dataset::SplitName>()
            .map_err(|e| CliError::input(format!("split.name: {e}")))?;
        self.split
            .variant
            .parse::<frase::dataset::Variant>()
            .map_err(|e| CliError::input(format!("split.variant: {e}")))?;
        if !matches!(self.eval.subset.as_str(), "all" | "train" | "validation" | "test") {
            return bad(format!("unknown eval subset `{}`", self.eval.subset));
        }
        Ok(())
    }

    pub fn output_dir(&self) -> &Path {
        &self.paths.output_dir
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.paths.output_dir.join(&self.paths.cache_dir)
    }

    pub fn index_path(&self) -> PathBuf {
        self.paths.output_dir.join(&self.paths.index)
    }

    pub fn framenet_path(&self) -> Result<&Path, CliError> {
        self.paths
            .framenet
            .as_deref()
            .ok_or_else(|| CliError::input("no FrameNet inventory configured (paths.framenet or --framenet)"))
    }

    pub fn lcq2_path(&self) -> Result<&Path, CliError> {
        self.paths
            .lcq2
            .as_deref()
            .ok_or_else(|| CliError::input("no LC-QuAD 2.0 file configured (paths.lcq2 or --lcq2)"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_env_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frase.toml");
        std::fs::write(
            &path,
            "workers = 2\n[paths]\nlcq2 = \"data/lcq2.json\"\noutput_dir = \"out\"\n[services]\nembed_url = \"http://file\"\n",
        )
        .unwrap();
        let cfg = PipelineConfig::load(Some(&path), &Overrides::default()).unwrap();
        assert_eq!(cfg.workers, 2);
        assert_eq!(cfg.paths.lcq2.as_deref(), Some(dir.path().join("data/lcq2.json").as_path()));
        assert_eq!(cfg.output_dir(), dir.path().join("out"));
        assert_eq!(cfg.services.embed_url.as_deref(), Some("http://file"));

        let o = Overrides {
            embed_url: Some("http://flag".into()),
            workers: Some(8),
            ..Default::default()
        };
        let cfg = PipelineConfig::load(Some(&path), &o).unwrap();
        assert_eq!(cfg.services.embed_url.as_deref(), Some("http://flag"));
        assert_eq!(cfg.workers, 8);
    }

    #[test]
    fn rejects_unknown_keys_and_escaping_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frase.toml");
        std::fs::write(&path, "[paths]\nbogus = 1\n").unwrap();
        assert!(PipelineConfig::load(Some(&path), &Overrides::default()).is_err());
        std::fs::write(&path, "[paths]\ncache_dir = \"../elsewhere\"\n").unwrap();
        assert!(PipelineConfig::load(Some(&path), &Overrides::default()).is_err());
        std::fs::write(&path, "[split]\nname = \"random\"\n").unwrap();
        assert!(PipelineConfig::load(Some(&path), &Overrides::default()).is_err());
    }
}
