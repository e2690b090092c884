//! Argument mapping: fills the elements of each evoked frame with spans of
//! the question, through a pluggable annotator whose output is validated and
//! repaired before use.

use std::collections::{BTreeSet, HashSet};
use std::time::Duration;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::framealign::EvokedFrame;
use crate::framenet::{Frame, FrameInventory};
use crate::sparqltool::{classify_query_form, select_variables, QueryForm};
use crate::transport::{send_with_retry, HttpRequest, RetryPolicy, Transport, TransportError};

pub const PROMPT_TEMPLATE_V1: &str = include_str!("../assets/argmap_prompt_v1.txt");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanMapping {
    pub element_name: String,
    pub span_text: String,
    /// Byte offsets into the question, end exclusive; `-1` when the span was
    /// located by text only.
    pub char_start: i64,
    pub char_end: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameAnnotation {
    pub frame_id: String,
    pub mappings: Vec<SpanMapping>,
    pub unfilled: Vec<String>,
}

impl FrameAnnotation {
    pub fn mapping(&self, element: &str) -> Option<&SpanMapping> {
        self.mappings.iter().find(|m| m.element_name == element)
    }
}

/// Checks the span-substring and element-partition invariants of `ann`
/// against `question` and `frame`; returns the first violation.
pub fn check_annotation(question: &str, frame: &Frame, ann: &FrameAnnotation) -> Result<(), String> {
    let mut seen = HashSet::new();
    for m in &ann.mappings {
        if m.span_text.is_empty() {
            return Err(format!("empty span for {}", m.element_name));
        }
        if m.char_start >= 0 || m.char_end >= 0 {
            let (s, e) = (m.char_start as usize, m.char_end as usize);
            if m.char_start < 0 || e > question.len() || s > e || question.get(s..e) != Some(m.span_text.as_str()) {
                return Err(format!("offsets {s}..{e} do not select `{}`", m.span_text));
            }
        }
        if !seen.insert(m.element_name.as_str()) {
            return Err(format!("{} mapped twice", m.element_name));
        }
    }
    for u in &ann.unfilled {
        if !seen.insert(u.as_str()) {
            return Err(format!("{u} both mapped and unfilled, or listed twice"));
        }
    }
    let names: HashSet<&str> = frame.element_names().collect();
    if seen != names {
        return Err(format!("elements {seen:?} do not partition {names:?}"));
    }
    Ok(())
}

/// Parsed but unvalidated annotator output:
/// `{"frame": "<id>", "elements": {"<name>": "<span>" | null}}`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawAnnotation {
    pub frame: Option<String>,
    pub elements: IndexMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RawParseError {
    #[error("no JSON object found in annotator output")]
    NoObject,
    #[error("annotator output lacks an `elements` object")]
    NoElements,
}

/// Finds the first balanced `{...}` in `text` that parses as a JSON object.
fn first_json_object(text: &str) -> Option<serde_json::Map<String, Value>> {
    let bytes = text.as_bytes();
    let mut start = 0;
    while let Some(off) = text[start..].find('{') {
        let open = start + off;
        let (mut depth, mut in_str, mut escaped) = (0usize, false, false);
        let mut close = None;
        for (i, &b) in bytes.iter().enumerate().skip(open) {
            if in_str {
                match b {
                    _ if escaped => escaped = false,
                    b'\\' => escaped = true,
                    b'"' => in_str = false,
                    _ => {}
                }
                continue;
            }
            match b {
                b'"' => in_str = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        close = Some(i);
                        break;
                    }
                }
                _ => {}
            }
        }
        if let Some(close) = close {
            if let Ok(Value::Object(map)) = serde_json::from_str(&text[open..=close]) {
                return Some(map);
            }
        }
        start = open + 1;
    }
    None
}

pub fn parse_raw_annotation(text: &str) -> Result<RawAnnotation, RawParseError> {
    let map = first_json_object(text).ok_or(RawParseError::NoObject)?;
    let frame = map.get("frame").and_then(Value::as_str).map(str::to_string);
    match map.get("elements") {
        Some(Value::Object(els)) => Ok(RawAnnotation {
            frame,
            elements: els.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
        }),
        _ => Err(RawParseError::NoElements),
    }
}

/// One correction applied while validating annotator output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "repair", rename_all = "snake_case")]
pub enum Repair {
    FrameMismatch { expected: String, found: String },
    UnknownElement { element: String },
    ElementRenamed { from: String, to: String },
    EmptySpan { element: String },
    NonStringSpan { element: String },
    SpanNotFound { element: String, span: String },
    SpanCaseAdjusted { element: String, from: String, to: String },
    /// The span occurs several times; offsets point at the first occurrence.
    AmbiguousSpan { element: String, occurrences: usize },
    MissingElement { element: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidatedAnnotation {
    pub annotation: FrameAnnotation,
    pub repairs: Vec<Repair>,
}

fn locate(question: &str, span: &str) -> Option<(usize, bool)> {
    if let Some(pos) = question.find(span) {
        return Some((pos, false));
    }
    // ASCII lowercasing keeps byte offsets intact
    question
        .to_ascii_lowercase()
        .find(&span.to_ascii_lowercase())
        .map(|pos| (pos, true))
}

/// Enforces the frame's element set and the question's text on a raw
/// annotation. Total: every input yields a sound annotation.
pub fn validate_annotation(question: &str, frame: &Frame, raw: &RawAnnotation) -> ValidatedAnnotation {
    let mut repairs = Vec::new();
    if let Some(found) = &raw.frame {
        if found != &frame.id && found != &frame.label {
            repairs.push(Repair::FrameMismatch {
                expected: frame.id.clone(),
                found: found.clone(),
            });
        }
    }

    // resolve raw keys to frame element names, exact match first
    let mut assigned: IndexMap<&str, &Value> = IndexMap::new();
    for (key, value) in &raw.elements {
        let target = frame
            .element(key)
            .map(|e| e.name.as_str())
            .or_else(|| {
                let mut hits = frame.elements.iter().filter(|e| e.name.eq_ignore_ascii_case(key.trim()));
                match (hits.next(), hits.next()) {
                    (Some(e), None) => Some(e.name.as_str()),
                    _ => None,
                }
            });
        match target {
            Some(name) if assigned.contains_key(name) => repairs.push(Repair::UnknownElement { element: key.clone() }),
            Some(name) => {
                if name != key {
                    repairs.push(Repair::ElementRenamed {
                        from: key.clone(),
                        to: name.to_string(),
                    });
                }
                assigned.insert(name, value);
            }
            None => repairs.push(Repair::UnknownElement { element: key.clone() }),
        }
    }

    let mut mappings = Vec::new();
    let mut unfilled = Vec::new();
    for element in &frame.elements {
        let name = element.name.clone();
        let Some(value) = assigned.get(element.name.as_str()) else {
            repairs.push(Repair::MissingElement { element: name.clone() });
            unfilled.push(name);
            continue;
        };
        let span = match value {
            Value::Null => {
                unfilled.push(name);
                continue;
            }
            Value::String(s) => s.trim(),
            _ => {
                repairs.push(Repair::NonStringSpan { element: name.clone() });
                unfilled.push(name);
                continue;
            }
        };
        if span.is_empty() {
            repairs.push(Repair::EmptySpan { element: name.clone() });
            unfilled.push(name);
            continue;
        }
        match locate(question, span) {
            Some((start, adjusted)) => {
                let end = start + span.len();
                let text = &question[start..end];
                if adjusted {
                    repairs.push(Repair::SpanCaseAdjusted {
                        element: name.clone(),
                        from: span.to_string(),
                        to: text.to_string(),
                    });
                }
                let occurrences = question.matches(text).count();
                if occurrences > 1 {
                    repairs.push(Repair::AmbiguousSpan {
                        element: name.clone(),
                        occurrences,
                    });
                }
                mappings.push(SpanMapping {
                    element_name: name,
                    span_text: text.to_string(),
                    char_start: start as i64,
                    char_end: end as i64,
                });
            }
            None => {
                repairs.push(Repair::SpanNotFound {
                    element: name.clone(),
                    span: span.to_string(),
                });
                unfilled.push(name);
            }
        }
    }
    ValidatedAnnotation {
        annotation: FrameAnnotation {
            frame_id: frame.id.clone(),
            mappings,
            unfilled,
        },
        repairs,
    }
}

const STOPWORDS: &[&str] = &[
    "a", "about", "after", "also", "an", "and", "any", "are", "as", "at", "be", "been", "before", "by", "did",
    "do", "does", "for", "from", "give", "had", "has", "have", "her", "his", "how", "in", "into", "is", "it",
    "its", "me", "name", "of", "on", "one", "or", "so", "tell", "than", "that", "the", "their", "there",
    "these", "this", "those", "to", "under", "was", "were", "what", "when", "where", "which", "who", "whom",
    "whose", "with",
];

fn is_stopword(token: &str) -> bool {
    STOPWORDS.binary_search(&token).is_ok()
}

/// Lowercased word tokens of `text` with their byte ranges.
fn word_tokens(text: &str) -> Vec<(usize, usize, String)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices().chain(std::iter::once((text.len(), ' '))) {
        match (c.is_alphanumeric(), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i, text[s..i].to_lowercase()));
                start = None;
            }
            _ => {}
        }
    }
    out
}

/// A token plus the semantic tags it implies.
fn token_features(token: &str) -> Vec<String> {
    if is_stopword(token) {
        return Vec::new();
    }
    let mut f = vec![token.to_string()];
    if token.chars().all(|c| c.is_ascii_digit()) {
        if (3..=4).contains(&token.len()) {
            f.extend(["time", "date", "year"].map(String::from));
        } else {
            f.extend(["number", "quantity"].map(String::from));
        }
    }
    f
}

/// Splits element names such as `Time`, `Place_of_birth` or `newLeader`.
fn name_tokens(name: &str) -> Vec<String> {
    let mut spaced = String::new();
    let mut prev_lower = false;
    for c in name.chars() {
        if c.is_uppercase() && prev_lower {
            spaced.push(' ');
        }
        prev_lower = c.is_lowercase();
        spaced.push(c);
    }
    word_tokens(&spaced).into_iter().map(|(_, _, t)| t).collect()
}

fn element_keywords(name: &str, definition: &str) -> BTreeSet<String> {
    name_tokens(name)
        .into_iter()
        .chain(word_tokens(definition).into_iter().map(|(_, _, t)| t))
        .filter(|t| !is_stopword(t))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LexicalConfig {
    pub max_n: usize,
    pub jaccard_threshold: f64,
}

impl Default for LexicalConfig {
    fn default() -> Self {
        Self {
            max_n: 4,
            jaccard_threshold: 0.5,
        }
    }
}

pub fn lexical_baseline_annotate(question: &str, frame: &Frame) -> FrameAnnotation {
    lexical_baseline_annotate_with(question, frame, LexicalConfig::default())
}

/// Maps each element to the longest question n-gram (not starting or ending
/// with a stopword) whose features reach the Jaccard threshold against the
/// element's keywords. Keywords are restricted to those the question can
/// express at all, so long definitions do not dilute the score.
pub fn lexical_baseline_annotate_with(question: &str, frame: &Frame, cfg: LexicalConfig) -> FrameAnnotation {
    let tokens = word_tokens(question);
    let feats: Vec<Vec<String>> = tokens.iter().map(|(_, _, t)| token_features(t)).collect();
    let question_feats: BTreeSet<&str> = feats.iter().flatten().map(String::as_str).collect();

    let mut mappings = Vec::new();
    let mut unfilled = Vec::new();
    for element in &frame.elements {
        let all_keywords = element_keywords(&element.name, &element.definition);
        let keywords: BTreeSet<&str> = all_keywords
            .iter()
            .map(String::as_str)
            .filter(|k| question_feats.contains(k))
            .collect();
        // (n, score, start index)
        let mut best: Option<(usize, f64, usize)> = None;
        if !keywords.is_empty() {
            for start in 0..tokens.len() {
                for n in 1..=cfg.max_n.min(tokens.len() - start) {
                    let end = start + n - 1;
                    if is_stopword(&tokens[start].2) || is_stopword(&tokens[end].2) {
                        continue;
                    }
                    let gram: BTreeSet<&str> = feats[start..=end].iter().flatten().map(String::as_str).collect();
                    let inter = gram.intersection(&keywords).count();
                    let union = gram.union(&keywords).count();
                    let score = inter as f64 / union as f64;
                    if inter == 0 || score < cfg.jaccard_threshold {
                        continue;
                    }
                    let better = match best {
                        None => true,
                        Some((bn, bs, _)) => n > bn || (n == bn && score > bs),
                    };
                    if better {
                        best = Some((n, score, start));
                    }
                }
            }
        }
        match best {
            Some((n, _, start)) => {
                let (s, e) = (tokens[start].0, tokens[start + n - 1].1);
                mappings.push(SpanMapping {
                    element_name: element.name.clone(),
                    span_text: question[s..e].to_string(),
                    char_start: s as i64,
                    char_end: e as i64,
                });
            }
            None => unfilled.push(element.name.clone()),
        }
    }
    FrameAnnotation {
        frame_id: frame.id.clone(),
        mappings,
        unfilled,
    }
}

/// Annotation in the backend wire format.
pub fn to_raw_json(ann: &FrameAnnotation, frame: &Frame) -> Value {
    let elements: serde_json::Map<String, Value> = frame
        .elements
        .iter()
        .map(|e| {
            let v = ann
                .mapping(&e.name)
                .map(|m| Value::String(m.span_text.clone()))
                .unwrap_or(Value::Null);
            (e.name.clone(), v)
        })
        .collect();
    serde_json::json!({ "frame": frame.id, "elements": elements })
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("annotator unreachable: {0}")]
    Unreachable(#[from] TransportError),
    #[error("annotator answered HTTP {0}")]
    Http(u16),
    #[error("malformed annotator response: {0}")]
    Malformed(String),
}

/// Produces raw annotation text for one (question, frame) pair.
pub trait AnnotatorBackend: Send + Sync {
    fn id(&self) -> String;
    fn generate(&self, question: &str, frame: &Frame) -> Result<String, BackendError>;
}

/// Offline annotator built on [`lexical_baseline_annotate`].
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalBackend {
    pub config: LexicalConfig,
}

impl AnnotatorBackend for LexicalBackend {
    fn id(&self) -> String {
        format!("lexical/v1/n{}/j{}", self.config.max_n, self.config.jaccard_threshold)
    }

    fn generate(&self, question: &str, frame: &Frame) -> Result<String, BackendError> {
        let ann = lexical_baseline_annotate_with(question, frame, self.config);
        Ok(to_raw_json(&ann, frame).to_string())
    }
}

pub fn render_prompt(question: &str, frame: &Frame) -> String {
    let elements = frame
        .elements
        .iter()
        .map(|e| {
            if e.definition.is_empty() {
                format!("- {}", e.name)
            } else {
                format!("- {}: {}", e.name, crate::framenet::normalize_space(&e.definition))
            }
        })
        .collect::<Vec<_>>()
        .join("\n");
    PROMPT_TEMPLATE_V1
        .replace("{frame}", &frame.id)
        .replace("{definition}", &crate::framenet::normalize_space(&frame.definition))
        .replace("{elements}", &elements)
        .replace("{question}", question)
}

/// Text-generation service: `POST {prompt, max_tokens}` → `{text}`.
pub struct GenerationBackend {
    url: String,
    max_tokens: u32,
    timeout: Duration,
    retry: RetryPolicy,
    transport: Box<dyn Transport>,
}

impl GenerationBackend {
    pub fn new(url: &str, transport: Box<dyn Transport>) -> Self {
        Self {
            url: url.to_string(),
            max_tokens: 256,
            timeout: Duration::from_secs(120),
            retry: RetryPolicy::default(),
            transport,
        }
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }
}

impl AnnotatorBackend for GenerationBackend {
    fn id(&self) -> String {
        format!("gen:{}#prompt-v1", self.url)
    }

    fn generate(&self, question: &str, frame: &Frame) -> Result<String, BackendError> {
        let body = serde_json::json!({
            "prompt": render_prompt(question, frame),
            "max_tokens": self.max_tokens,
        });
        let req = HttpRequest::post_json(&self.url, &body).timeout(self.timeout);
        let resp = send_with_retry(&self.transport, &req, self.retry)?;
        if !resp.is_success() {
            return Err(BackendError::Http(resp.status));
        }
        let v: Value = serde_json::from_slice(&resp.body).map_err(|e| BackendError::Malformed(e.to_string()))?;
        v.get("text")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendError::Malformed("response lacks `text`".into()))
    }
}

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("frame `{0}` is not in the inventory")]
    UnknownFrame(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("annotator output for frame `{frame}` unparseable after retry: {source}")]
    Unparseable {
        frame: String,
        #[source]
        source: RawParseError,
    },
}

impl AnnotateError {
    pub fn is_service_failure(&self) -> bool {
        matches!(self, AnnotateError::Backend(BackendError::Unreachable(_) | BackendError::Http(_)))
    }
}

/// One validated annotation per distinct evoked frame, in evoked order.
pub fn annotate(
    question: &str,
    evoked: &[EvokedFrame],
    inventory: &FrameInventory,
    backend: &dyn AnnotatorBackend,
) -> Result<Vec<ValidatedAnnotation>, AnnotateError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for ev in evoked {
        if !seen.insert(ev.frame_id.as_str()) {
            continue;
        }
        let frame = inventory
            .get(&ev.frame_id)
            .ok_or_else(|| AnnotateError::UnknownFrame(ev.frame_id.clone()))?;
        let raw = match parse_raw_annotation(&backend.generate(question, frame)?) {
            Ok(raw) => raw,
            Err(_) => parse_raw_annotation(&backend.generate(question, frame)?).map_err(|source| {
                AnnotateError::Unparseable {
                    frame: frame.id.clone(),
                    source,
                }
            })?,
        };
        out.push(validate_annotation(question, frame, &raw));
    }
    Ok(out)
}

/// Correspondence between an unfilled frame element and a query unknown.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "link", rename_all = "snake_case")]
pub enum UnknownLink {
    Paired { frame_id: String, element: String, variable: String },
    UnpairedElement { frame_id: String, element: String },
    UnpairedVariable { variable: String },
    Ask { fully_grounded: bool },
}

/// Pairs unfilled core elements with projection variables positionally for
/// SELECT/COUNT queries; ASK queries get a single grounding flag.
pub fn link_unfilled_to_unknowns(
    annotations: &[FrameAnnotation],
    query: &str,
    inventory: &FrameInventory,
) -> Vec<UnknownLink> {
    match classify_query_form(query) {
        QueryForm::Ask => vec![UnknownLink::Ask {
            fully_grounded: annotations.iter().all(|a| a.unfilled.is_empty()),
        }],
        QueryForm::Select | QueryForm::Count => {
            let elements: Vec<(&str, &str)> = annotations
                .iter()
                .flat_map(|a| {
                    let frame = inventory.get(&a.frame_id);
                    a.unfilled.iter().filter(move |u| {
                        frame
                            .and_then(|f| f.element(u))
                            .is_none_or(|e| e.core_status.is_core_like())
                    })
                    .map(move |u| (a.frame_id.as_str(), u.as_str()))
                })
                .collect();
            let vars = select_variables(query).unwrap_or_default();
            let n = elements.len().max(vars.len());
            (0..n)
                .map(|i| match (elements.get(i), vars.get(i)) {
                    (Some((f, e)), Some(v)) => UnknownLink::Paired {
                        frame_id: f.to_string(),
                        element: e.to_string(),
                        variable: v.clone(),
                    },
                    (Some((f, e)), None) => UnknownLink::UnpairedElement {
                        frame_id: f.to_string(),
                        element: e.to_string(),
                    },
                    (None, Some(v)) => UnknownLink::UnpairedVariable { variable: v.clone() },
                    (None, None) => unreachable!(),
                })
                .collect()
        }
        QueryForm::Other => Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::framenet::{CoreStatus, FrameElement};

    const Q: &str = "What dynasty replaced the Yuan dynasty?";

    fn replacing() -> Frame {
        Frame {
            id: "Replacing".into(),
            label: "Replacing".into(),
            definition: "An Agent substitutes a New entity for an Old one.".into(),
            elements: vec![
                FrameElement::new("Agent", "The one who replaces.", CoreStatus::Core),
                FrameElement::new("Old", "The entity that is replaced.", CoreStatus::Core),
                FrameElement::new("New", "The entity that takes the place of the Old.", CoreStatus::Core),
                FrameElement::new("Time", "The time/date when the replacement happens.", CoreStatus::Peripheral),
            ],
        }
    }

    fn identicality() -> Frame {
        Frame {
            id: "Identicality".into(),
            label: "Identicality".into(),
            definition: "A Current_instance is identical to a Previous_instance, both of a Type.".into(),
            elements: vec![
                FrameElement::new("Current_instance", "", CoreStatus::Core),
                FrameElement::new("Previous_instance", "", CoreStatus::Core),
                FrameElement::new("Type", "", CoreStatus::Core),
            ],
        }
    }

    fn raw(text: &str) -> RawAnnotation {
        parse_raw_annotation(text).unwrap()
    }

    #[test]
    fn worked_example_old_maps_to_yuan_dynasty() {
        let v = validate_annotation(
            Q,
            &replacing(),
            &raw(r#"{"frame":"Replacing","elements":{"Old":"Yuan dynasty","New":null,"Agent":null,"Time":null}}"#),
        );
        let m = v.annotation.mapping("Old").unwrap();
        assert_eq!(m.span_text, "Yuan dynasty");
        assert_eq!(&Q[m.char_start as usize..m.char_end as usize], "Yuan dynasty");
        assert_eq!(v.annotation.unfilled, vec!["Agent", "New", "Time"]);
        assert!(v.repairs.is_empty());
    }

    #[test]
    fn worked_example_type_is_case_adjusted_to_question_text() {
        let v = validate_annotation(
            Q,
            &identicality(),
            &raw(r#"{"frame":"Identicality","elements":{"Type":"Dynasty"}}"#),
        );
        let m = v.annotation.mapping("Type").unwrap();
        assert_eq!(m.span_text, "dynasty");
        assert_eq!(m.char_start, 5);
        assert_eq!(v.annotation.unfilled, vec!["Current_instance", "Previous_instance"]);
        assert!(v.repairs.contains(&Repair::SpanCaseAdjusted {
            element: "Type".into(),
            from: "Dynasty".into(),
            to: "dynasty".into()
        }));
        assert!(v.repairs.iter().any(|r| matches!(r, Repair::AmbiguousSpan { occurrences: 2, .. })));
    }

    #[test]
    fn unknown_element_is_dropped() {
        let v = validate_annotation(Q, &replacing(), &raw(r#"{"elements":{"Foo":"Yuan"}}"#));
        assert!(v.annotation.mappings.is_empty());
        assert!(v.repairs.contains(&Repair::UnknownElement { element: "Foo".into() }));
    }

    #[test]
    fn absent_span_is_dropped() {
        let v = validate_annotation(Q, &replacing(), &raw(r#"{"elements":{"Old":"Yuang dynasty"}}"#));
        assert!(v.annotation.mapping("Old").is_none());
        assert!(v.annotation.unfilled.contains(&"Old".to_string()));
        assert!(v.repairs.iter().any(|r| matches!(r, Repair::SpanNotFound { .. })));
    }

    #[test]
    fn omitted_element_becomes_unfilled() {
        let v = validate_annotation(Q, &replacing(), &raw(r#"{"elements":{"Old":"Yuan dynasty"}}"#));
        assert!(v.annotation.unfilled.contains(&"New".to_string()));
        assert!(v.repairs.contains(&Repair::MissingElement { element: "New".into() }));
        check_annotation(Q, &replacing(), &v.annotation).unwrap();
    }

    #[test]
    fn non_string_and_empty_spans_are_repaired() {
        let v = validate_annotation(Q, &replacing(), &raw(r#"{"elements":{"Old":["Yuan"],"New":"  ","agent":"dynasty"}}"#));
        assert!(v.repairs.contains(&Repair::NonStringSpan { element: "Old".into() }));
        assert!(v.repairs.contains(&Repair::EmptySpan { element: "New".into() }));
        assert!(v.repairs.contains(&Repair::ElementRenamed { from: "agent".into(), to: "Agent".into() }));
        check_annotation(Q, &replacing(), &v.annotation).unwrap();
    }

    #[test]
    fn raw_parsing_tolerates_chatter() {
        let r = raw("Sure! Here it is: {\"frame\": \"Replacing\", \"elements\": {\"Old\": \"a } b\"}} done");
        assert_eq!(r.frame.as_deref(), Some("Replacing"));
        assert_eq!(r.elements["Old"], Value::String("a } b".into()));
        assert_eq!(parse_raw_annotation("no json"), Err(RawParseError::NoObject));
        assert_eq!(parse_raw_annotation("{\"frame\": 1}"), Err(RawParseError::NoElements));
        assert_eq!(parse_raw_annotation("{bad {\"elements\":{}}").unwrap().elements.len(), 0);
    }

    #[test]
    fn lexical_baseline_maps_year_to_time() {
        // Time keywords {time, date, replacement, happens} ∩ question
        // features = {time, date}; the n-gram "1271" has features
        // {1271, time, date, year}, Jaccard 2/4 = 0.5.
        let q = "Which dynasty was established in 1271?";
        let ann = lexical_baseline_annotate(q, &replacing());
        let m = ann.mapping("Time").unwrap();
        assert_eq!(m.span_text, "1271");
        assert_eq!((m.char_start, m.char_end), (33, 37));
        check_annotation(q, &replacing(), &ann).unwrap();
    }

    #[test]
    fn lexical_baseline_no_overlap_leaves_everything_unfilled() {
        let ann = lexical_baseline_annotate("Zzz qqq?", &replacing());
        assert!(ann.mappings.is_empty());
        assert_eq!(ann.unfilled.len(), 4);
    }

    #[test]
    fn lexical_baseline_prefers_longest_ngram() {
        let frame = Frame {
            id: "F".into(),
            label: "F".into(),
            definition: String::new(),
            elements: vec![FrameElement::new("Old_dynasty", "", CoreStatus::Core)],
        };
        // keywords {old, dynasty}: "old dynasty" scores 1.0 but the longer
        // "old dynasty replaced" still reaches 2/3 and wins on length
        let q = "Was the old dynasty replaced?";
        let ann = lexical_baseline_annotate(q, &frame);
        assert_eq!(ann.mapping("Old_dynasty").unwrap().span_text, "old dynasty replaced");
        let strict = LexicalConfig { jaccard_threshold: 0.7, ..Default::default() };
        let ann_strict = lexical_baseline_annotate_with(q, &frame, strict);
        assert_eq!(ann_strict.mapping("Old_dynasty").unwrap().span_text, "old dynasty");
        assert_eq!(ann, lexical_baseline_annotate(q, &frame));
    }

    #[test]
    fn lexical_backend_round_trips_through_validation() {
        let q = "Which dynasty was established in 1271?";
        let text = LexicalBackend::default().generate(q, &replacing()).unwrap();
        let v = validate_annotation(q, &replacing(), &raw(&text));
        assert_eq!(v.annotation, lexical_baseline_annotate(q, &replacing()));
        assert!(v.repairs.is_empty());
    }

    struct Scripted(std::sync::Mutex<Vec<&'static str>>);

    impl AnnotatorBackend for Scripted {
        fn id(&self) -> String {
            "scripted".into()
        }
        fn generate(&self, _: &str, _: &Frame) -> Result<String, BackendError> {
            Ok(self.0.lock().unwrap().remove(0).to_string())
        }
    }

    fn inv() -> FrameInventory {
        FrameInventory::from_frames("t", vec![replacing(), identicality()]).unwrap()
    }

    fn evoked(ids: &[&str]) -> Vec<EvokedFrame> {
        ids.iter()
            .map(|id| EvokedFrame {
                frame_id: id.to_string(),
                triggering_uri: "wdt:P1".into(),
                score: 1.0,
            })
            .collect()
    }

    #[test]
    fn annotate_retries_once_on_unparseable_output() {
        let backend = Scripted(std::sync::Mutex::new(vec!["garbage", r#"{"elements":{"Old":"Yuan dynasty"}}"#]));
        let out = annotate(Q, &evoked(&["Replacing"]), &inv(), &backend).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].annotation.mapping("Old").unwrap().span_text, "Yuan dynasty");

        let backend = Scripted(std::sync::Mutex::new(vec!["garbage", "still garbage"]));
        let err = annotate(Q, &evoked(&["Replacing"]), &inv(), &backend).unwrap_err();
        assert!(matches!(err, AnnotateError::Unparseable { .. }));
    }

    #[test]
    fn annotate_empty_and_unknown_frames() {
        let backend = LexicalBackend::default();
        assert!(annotate(Q, &[], &inv(), &backend).unwrap().is_empty());
        assert!(matches!(
            annotate(Q, &evoked(&["Nope"]), &inv(), &backend),
            Err(AnnotateError::UnknownFrame(_))
        ));
        let out = annotate(Q, &evoked(&["Replacing", "Identicality", "Replacing"]), &inv(), &backend).unwrap();
        assert_eq!(out.len(), 2);
    }

    fn ann(frame: &str, unfilled: &[&str]) -> FrameAnnotation {
        FrameAnnotation {
            frame_id: frame.into(),
            mappings: Vec::new(),
            unfilled: unfilled.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn single_unfilled_pairs_with_single_variable() {
        let links = link_unfilled_to_unknowns(&[ann("Replacing", &["New"])], "SELECT ?x WHERE { ?x wdt:P1365 wd:Q7313 }", &inv());
        assert_eq!(
            links,
            vec![UnknownLink::Paired {
                frame_id: "Replacing".into(),
                element: "New".into(),
                variable: "x".into()
            }]
        );
    }

    #[test]
    fn surplus_elements_are_flagged() {
        let links = link_unfilled_to_unknowns(&[ann("Replacing", &["Agent", "New"])], "SELECT ?x WHERE { ?x wdt:P1365 wd:Q7313 }", &inv());
        assert_eq!(links.len(), 2);
        assert!(matches!(links[0], UnknownLink::Paired { .. }));
        assert!(matches!(&links[1], UnknownLink::UnpairedElement { element, .. } if element == "New"));
    }

    #[test]
    fn peripheral_elements_are_not_unknowns() {
        let links = link_unfilled_to_unknowns(&[ann("Replacing", &["Time"])], "SELECT ?x ?y WHERE { ?x wdt:P1365 ?y }", &inv());
        assert_eq!(
            links,
            vec![
                UnknownLink::UnpairedVariable { variable: "x".into() },
                UnknownLink::UnpairedVariable { variable: "y".into() }
            ]
        );
    }

    #[test]
    fn ask_queries_report_grounding() {
        let q = "ASK { wd:Q7313 wdt:P1365 wd:Q9903 }";
        assert_eq!(
            link_unfilled_to_unknowns(&[ann("Replacing", &[])], q, &inv()),
            vec![UnknownLink::Ask { fully_grounded: true }]
        );
        assert_eq!(
            link_unfilled_to_unknowns(&[ann("Replacing", &["Agent"])], q, &inv()),
            vec![UnknownLink::Ask { fully_grounded: false }]
        );
    }

    #[test]
    fn prompt_contains_frame_and_question() {
        let p = render_prompt(Q, &replacing());
        assert!(p.contains("Frame: Replacing"));
        assert!(p.contains("- Old: The entity that is replaced."));
        assert!(p.contains("Question: What dynasty replaced the Yuan dynasty?"));
        assert!(!p.contains("{question}"));
    }

    #[test]
    fn stopwords_are_sorted_for_binary_search() {
        assert!(STOPWORDS.windows(2).all(|w| w[0] < w[1]));
    }
}
