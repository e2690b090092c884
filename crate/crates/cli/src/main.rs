mod config;
mod error;
mod manifest;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Overrides, PipelineConfig};
use error::{CliError, ErrorKind, InputContext};
use pipeline::{Pipeline, Stage};

/// Frame-semantic enrichment of text-to-SPARQL data.
#[derive(Parser, Debug)]
#[command(name = "frase", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML configuration file.
    #[arg(long, short, global = true, env = "FRASE_CONFIG")]
    config: Option<PathBuf>,
    /// Directory all artifacts are written to.
    #[arg(long, global = true, env = "FRASE_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
    /// FrameNet inventory (JSON lines or a frame XML directory).
    #[arg(long, global = true)]
    framenet: Option<PathBuf>,
    /// LC-QuAD 2.0 file.
    #[arg(long, global = true)]
    lcq2: Option<PathBuf>,
    #[arg(long, global = true, env = "FRASE_WIKIDATA_API")]
    wikidata_api: Option<String>,
    #[arg(long, global = true, env = "FRASE_EMBED_URL")]
    embed_url: Option<String>,
    #[arg(long, global = true, env = "FRASE_GEN_URL")]
    gen_url: Option<String>,
    #[arg(long, global = true, env = "FRASE_SPARQL_ENDPOINT")]
    sparql_endpoint: Option<String>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Never contact Wikidata; use cached descriptors only.
    #[arg(long, global = true)]
    offline: bool,
    /// Print summaries as JSON.
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Normalize a FrameNet inventory.
    IngestFramenet,
    /// Fetch labels and descriptions of every relation and class in the corpus.
    FetchDescriptors,
    /// Embed every frame into the vector index.
    BuildIndex,
    /// Align each query's relations and classes with frames.
    DetectFrames {
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, allow_hyphen_values = true)]
        threshold: Option<f64>,
    },
    /// Map frame elements to question spans.
    Annotate,
    /// Join alignments and annotations into the enriched dataset.
    BuildLcq3,
    /// Assign entries to train/validation/test.
    Split {
        /// `original` or `unknown_template`.
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Draw validation from training templates (unknown_template only).
        #[arg(long)]
        relax_validation: bool,
    },
    /// Per-subset size, template and length statistics.
    Stats {
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        variant: Option<String>,
    },
    /// Instruction-tuning records with and without frame annotations.
    Prompts {
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        variant: Option<String>,
    },
    /// Score predicted queries with BLEU and execution accuracy/F1.
    Eval {
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Serve this static answer map instead of a live endpoint.
        #[arg(long)]
        mock_map: Option<PathBuf>,
        /// `all`, `train`, `validation` or `test`.
        #[arg(long)]
        subset: Option<String>,
        /// Write a report even if the endpoint cannot be reached.
        #[arg(long)]
        allow_partial: bool,
        #[arg(long)]
        split: Option<String>,
    },
    /// Serve a static SPARQL answer map over HTTP until interrupted.
    ServeMock {
        #[arg(long)]
        map: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8890")]
        addr: String,
    },
}

fn overrides(g: &Global) -> Overrides {
    Overrides {
        output_dir: g.output_dir.clone(),
        framenet: g.framenet.clone(),
        lcq2: g.lcq2.clone(),
        wikidata_api: g.wikidata_api.clone(),
        embed_url: g.embed_url.clone(),
        gen_url: g.gen_url.clone(),
        sparql_endpoint: g.sparql_endpoint.clone(),
        workers: g.workers,
        offline: g.offline,
    }
}

/// Applies subcommand flags to the loaded configuration.
fn stage_config(cmd: &Command, cfg: &mut PipelineConfig) -> Option<Stage> {
    let set_split = |cfg: &mut PipelineConfig, split: &Option<String>| {
        if let Some(s) = split {
            cfg.split.name = s.clone();
        }
    };
    let set_variant = |cfg: &mut PipelineConfig, variant: &Option<String>| {
        if let Some(v) = variant {
            cfg.split.variant = v.clone();
        }
    };
    Some(match cmd {
        Command::IngestFramenet => Stage::IngestFramenet,
        Command::FetchDescriptors => Stage::FetchDescriptors,
        Command::BuildIndex => Stage::BuildIndex,
        Command::DetectFrames { k, threshold } => {
            if let Some(k) = k {
                cfg.align.k = *k;
            }
            if let Some(t) = threshold {
                cfg.align.threshold = *t;
            }
            Stage::DetectFrames
        }
        Command::Annotate => Stage::Annotate,
        Command::BuildLcq3 => Stage::BuildLcq3,
        Command::Split {
            split,
            seed,
            relax_validation,
        } => {
            set_split(cfg, split);
            if let Some(s) = seed {
                cfg.split.seed = *s;
            }
            cfg.split.relax_validation |= relax_validation;
            Stage::Split
        }
        Command::Stats { split, variant } => {
            set_split(cfg, split);
            set_variant(cfg, variant);
            Stage::Stats
        }
        Command::Prompts { split, variant } => {
            set_split(cfg, split);
            set_variant(cfg, variant);
            Stage::Prompts
        }
        Command::Eval {
            predictions,
            mock_map,
            subset,
            allow_partial,
            split,
        } => {
            if predictions.is_some() {
                cfg.eval.predictions.clone_from(predictions);
            }
            if mock_map.is_some() {
                cfg.eval.mock_map.clone_from(mock_map);
            }
            if let Some(s) = subset {
                cfg.eval.subset = s.clone();
            }
            set_split(cfg, split);
            cfg.eval.allow_partial |= allow_partial;
            Stage::Eval
        }
        Command::ServeMock { .. } => return None,
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Command::ServeMock { map, addr } = &cli.command {
        let map = frase::evalharness::MockMap::load(map).input_ctx(map.display())?;
        let server = frase::evalharness::MockSparqlServer::start(map, addr)
            .map_err(|e| CliError::service(format!("cannot listen on {addr}: {e}")))?;
        println!("{}", server.url());
        server.wait();
        return Ok(());
    }
    let mut cfg = PipelineConfig::load(cli.global.config.as_deref(), &overrides(&cli.global))?;
    let stage = stage_config(&cli.command, &mut cfg).expect("pipeline stage");
    // flags may have changed validated fields
    cfg.validate()?;
    let mut pipeline = Pipeline::new(cfg)?;
    let outcome = pipeline.run(stage)?;
    if cli.global.json {
        println!("{}", outcome.json_line());
    } else {
        println!("{}", outcome.human_line());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(ErrorKind::Usage.exit_code() as u8),
            };
        }
    };
    let json = cli.global.json;
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if json {
                let kind = match e.kind {
                    ErrorKind::Usage => "usage",
                    ErrorKind::Input => "input",
                    ErrorKind::Service => "service",
                };
                println!("{}", serde_json::json!({"status": "error", "kind": kind, "error": e.message}));
            }
            eprintln!("error: {e}");
            ExitCode::from(e.kind.exit_code() as u8)
        }
    }
}
