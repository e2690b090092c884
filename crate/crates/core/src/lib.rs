//! Frame-based semantic enrichment for question → SPARQL datasets.
//!
//! The pipeline aligns the Wikidata relations and classes of each query with
//! FrameNet frames through embedding similarity, maps frame elements onto
//! question spans, and produces enriched datasets, generalization splits,
//! training prompts and execution-based evaluation reports.

pub mod framenet;
pub mod io;
pub mod kbclient;
pub mod sparqltool;
pub mod transport;
pub mod embedindex;
pub mod framealign;
pub mod argmap;
pub mod dataset;
pub mod evalharness;
