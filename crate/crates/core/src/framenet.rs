//! FrameNet frame inventory: loading and text rendering.
//!
//! Two source layouts are understood: the FrameNet release's `frame/`
//! directory (one XML document per frame) and a JSON-lines file with one
//! frame per line. Only label, definition and frame elements are kept.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FrameNetError {
    #[error("cannot read frame inventory at {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown inventory format `{0}` (expected framenet-xml-dir or json-lines)")]
    UnknownFormat(String),
    #[error("invalid frame `{frame}`: {reason}")]
    InvalidFrame { frame: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CoreStatus {
    Core,
    Peripheral,
    ExtraThematic,
    #[default]
    Unknown,
}

impl CoreStatus {
    /// Lenient parse covering both our serialization and FrameNet's `coreType`
    /// attribute values.
    pub fn parse_lenient(raw: &str) -> Self {
        match raw.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "core" | "core-unexpressed" => CoreStatus::Core,
            "peripheral" => CoreStatus::Peripheral,
            "extra-thematic" | "extrathematic" => CoreStatus::ExtraThematic,
            _ => CoreStatus::Unknown,
        }
    }

    /// Core and unknown elements are candidates for question unknowns.
    pub fn is_core_like(self) -> bool {
        matches!(self, CoreStatus::Core | CoreStatus::Unknown)
    }
}

fn deserialize_core_status<'de, D>(d: D) -> Result<CoreStatus, D::Error>
where
    D: serde::Deserializer<'de>,
{
    let raw: Option<String> = Option::deserialize(d)?;
    Ok(raw.map(|r| CoreStatus::parse_lenient(&r)).unwrap_or_default())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameElement {
    pub name: String,
    #[serde(default)]
    pub definition: String,
    #[serde(default, deserialize_with = "deserialize_core_status")]
    pub core_status: CoreStatus,
}

impl FrameElement {
    pub fn new(name: &str, definition: &str, core_status: CoreStatus) -> Self {
        Self {
            name: name.to_string(),
            definition: definition.to_string(),
            core_status,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub id: String,
    pub label: String,
    #[serde(default)]
    pub definition: String,
    #[serde(default)]
    pub elements: Vec<FrameElement>,
}

impl Frame {
    pub fn validate(&self) -> Result<(), FrameNetError> {
        let invalid = |reason: &str| FrameNetError::InvalidFrame {
            frame: self.id.clone(),
            reason: reason.to_string(),
        };
        if self.id.trim().is_empty() {
            return Err(invalid("empty id"));
        }
        if self.label.trim().is_empty() {
            return Err(invalid("empty label"));
        }
        let mut seen = HashSet::new();
        for el in &self.elements {
            if el.name.trim().is_empty() {
                return Err(invalid("frame element with empty name"));
            }
            if !seen.insert(el.name.as_str()) {
                return Err(invalid(&format!("duplicate frame element `{}`", el.name)));
            }
        }
        Ok(())
    }

    pub fn element(&self, name: &str) -> Option<&FrameElement> {
        self.elements.iter().find(|e| e.name == name)
    }

    pub fn element_names(&self) -> impl Iterator<Item = &str> {
        self.elements.iter().map(|e| e.name.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InventoryFormat {
    FramenetXmlDir,
    JsonLines,
}

impl FromStr for InventoryFormat {
    type Err = FrameNetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "framenet-xml-dir" | "xml" => Ok(InventoryFormat::FramenetXmlDir),
            "json-lines" | "jsonl" => Ok(InventoryFormat::JsonLines),
            other => Err(FrameNetError::UnknownFormat(other.to_string())),
        }
    }
}

impl fmt::Display for InventoryFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InventoryFormat::FramenetXmlDir => "framenet-xml-dir",
            InventoryFormat::JsonLines => "json-lines",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MalformedRecord {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceMeta {
    pub version: String,
    pub skipped: usize,
    pub missing_definitions: usize,
    pub frames_without_elements: usize,
    pub malformed: Vec<MalformedRecord>,
}

#[derive(Debug, Clone, Default)]
pub struct FrameInventory {
    frames: IndexMap<String, Frame>,
    pub source_meta: SourceMeta,
}

impl FrameInventory {
    pub fn new(version: &str) -> Self {
        Self {
            frames: IndexMap::new(),
            source_meta: SourceMeta {
                version: version.to_string(),
                ..SourceMeta::default()
            },
        }
    }

    pub fn from_frames(
        version: &str,
        frames: impl IntoIterator<Item = Frame>,
    ) -> Result<Self, FrameNetError> {
        let mut inv = Self::new(version);
        for frame in frames {
            inv.insert(frame)?;
        }
        Ok(inv)
    }

    /// Adds a frame, rejecting invalid frames and duplicate ids.
    pub fn insert(&mut self, frame: Frame) -> Result<(), FrameNetError> {
        frame.validate()?;
        if self.frames.contains_key(&frame.id) {
            return Err(FrameNetError::InvalidFrame {
                frame: frame.id,
                reason: "duplicate frame id".into(),
            });
        }
        if frame.definition.trim().is_empty() {
            self.source_meta.missing_definitions += 1;
        }
        if frame.elements.is_empty() {
            self.source_meta.frames_without_elements += 1;
        }
        self.frames.insert(frame.id.clone(), frame);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Frame> {
        self.frames.get(id)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> impl Iterator<Item = &Frame> {
        self.frames.values()
    }

    fn skip(&mut self, index: usize, reason: String) {
        log::warn!("skipping malformed frame record {index}: {reason}");
        self.source_meta.skipped += 1;
        self.source_meta.malformed.push(MalformedRecord { index, reason });
    }
}

pub fn load_frame_inventory(
    path: &Path,
    format: InventoryFormat,
    version: &str,
) -> Result<FrameInventory, FrameNetError> {
    match format {
        InventoryFormat::JsonLines => load_json_lines(path, version),
        InventoryFormat::FramenetXmlDir => load_xml_dir(path, version),
    }
}

fn load_json_lines(path: &Path, version: &str) -> Result<FrameInventory, FrameNetError> {
    let text = fs::read_to_string(path).map_err(|source| FrameNetError::Unreadable {
        path: path.to_path_buf(),
        source,
    })?;
    let mut inv = FrameInventory::new(version);
    let lines = text.lines().filter(|l| !l.trim().is_empty());
    for (index, line) in lines.enumerate() {
        match serde_json::from_str::<Frame>(line) {
            Ok(frame) => {
                if let Err(e) = inv.insert(frame) {
                    inv.skip(index, e.to_string());
                }
            }
            Err(e) => inv.skip(index, e.to_string()),
        }
    }
    Ok(inv)
}

fn load_xml_dir(path: &Path, version: &str) -> Result<FrameInventory, FrameNetError> {
    let unreadable = |source| FrameNetError::Unreadable {
        path: path.to_path_buf(),
        source,
    };
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(unreadable)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "xml"))
        .collect();
    files.sort();

    let mut inv = FrameInventory::new(version);
    for (index, file) in files.iter().enumerate() {
        let parsed = fs::read_to_string(file)
            .map_err(|e| e.to_string())
            .and_then(|xml| parse_frame_xml(&xml));
        match parsed {
            Ok(frame) => {
                if let Err(e) = inv.insert(frame) {
                    inv.skip(index, format!("{}: {e}", file.display()));
                }
            }
            Err(e) => inv.skip(index, format!("{}: {e}", file.display())),
        }
    }
    Ok(inv)
}

/// Parses one FrameNet frame document. The frame name doubles as its id.
pub fn parse_frame_xml(xml: &str) -> Result<Frame, String> {
    let doc = roxmltree::Document::parse(xml).map_err(|e| e.to_string())?;
    let root = doc.root_element();
    if root.tag_name().name() != "frame" {
        return Err(format!("root element is <{}>, not <frame>", root.tag_name().name()));
    }
    let name = root
        .attribute("name")
        .ok_or_else(|| "frame without name attribute".to_string())?;

    let definition = root
        .children()
        .find(|n| n.is_element() && n.tag_name().name() == "definition")
        .and_then(|n| n.text())
        .map(clean_definition)
        .unwrap_or_default();

    let elements = root
        .children()
        .filter(|n| n.is_element() && n.tag_name().name() == "FE")
        .map(|fe| {
            let def = fe
                .children()
                .find(|n| n.tag_name().name() == "definition")
                .and_then(|n| n.text())
                .map(clean_definition)
                .unwrap_or_default();
            FrameElement {
                name: fe.attribute("name").unwrap_or_default().to_string(),
                definition: def,
                core_status: CoreStatus::parse_lenient(fe.attribute("coreType").unwrap_or("")),
            }
        })
        .collect();

    Ok(Frame {
        id: name.to_string(),
        label: name.to_string(),
        definition,
        elements,
    })
}

/// Strips FrameNet's inline definition markup (`<def-root>`, `<fen>`, ...),
/// dropping `<ex>` example sentences entirely.
pub fn clean_definition(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut rest = raw;
    let mut in_example = 0usize;
    while let Some(open) = rest.find('<') {
        if in_example == 0 {
            out.push_str(&rest[..open]);
        }
        let Some(close) = rest[open..].find('>') else {
            if in_example == 0 {
                out.push_str(&rest[open..]);
            }
            rest = "";
            break;
        };
        let tag = &rest[open + 1..open + close];
        if tag == "ex" || tag.starts_with("ex ") {
            in_example += 1;
        } else if tag == "/ex" {
            in_example = in_example.saturating_sub(1);
        }
        rest = &rest[open + close + 1..];
    }
    if in_example == 0 {
        out.push_str(rest);
    }
    let unescaped = out
        .replace("&lt;", "<")
        .replace("&gt;", ">")
        .replace("&quot;", "\"")
        .replace("&apos;", "'")
        .replace("&amp;", "&");
    normalize_space(&unescaped)
}

pub fn normalize_space(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Renders a frame as `"<label>. <definition> Elements: <e1>; <e2>"`.
pub fn render_frame_text(frame: &Frame) -> String {
    let mut out = format!("{}.", normalize_space(&frame.label));
    let definition = normalize_space(&frame.definition);
    if !definition.is_empty() {
        out.push(' ');
        out.push_str(&definition);
    }
    if !frame.elements.is_empty() {
        let names: Vec<String> = frame.elements.iter().map(|e| normalize_space(&e.name)).collect();
        out.push_str(" Elements: ");
        out.push_str(&names.join("; "));
    }
    out
}
