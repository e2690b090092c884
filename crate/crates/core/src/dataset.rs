//! LC-QuAD 2.0 ingestion, frame-enriched dataset generation, generalization
//! splits, question variants, split statistics and prompt assembly.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::argmap::{annotate, link_unfilled_to_unknowns, AnnotatorBackend, FrameAnnotation, Repair, UnknownLink};
use crate::framealign::{AlignRecord, EvokedFrame, QueryEntry};
use crate::framenet::FrameInventory;
use crate::sparqltool::{extract_template, query_length};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid JSON: {0}")]
    Json(String),
    #[error("record {index}: {reason}")]
    Schema { index: usize, reason: String },
    #[error("duplicate uid `{0}`")]
    DuplicateUid(String),
    #[error("{source_name} refers to uid `{uid}` which is not in the dataset")]
    UidMismatch { uid: String, source_name: String },
    #[error("entry `{uid}` annotates frame `{frame}` which was not evoked")]
    UnevokedFrame { uid: String, frame: String },
    #[error("cannot split an empty dataset")]
    Empty,
    #[error("need at least 3 template groups, found {0}")]
    TooFewTemplates(usize),
    #[error("explicit split counts {counts:?} do not sum to {total}")]
    BadCounts { counts: [usize; 3], total: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateSource {
    Dataset,
    Derived,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lcq2Entry {
    pub uid: String,
    pub raw_question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reformulated_question: Option<String>,
    pub sparql: String,
    pub template_id: String,
    pub template_source: TemplateSource,
}

impl QueryEntry for Lcq2Entry {
    fn uid(&self) -> &str {
        &self.uid
    }
    fn sparql(&self) -> &str {
        &self.sparql
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionVariant {
    Raw,
    Reformulated,
}

impl Lcq2Entry {
    pub fn question(&self, variant: QuestionVariant) -> Option<&str> {
        match variant {
            QuestionVariant::Raw => Some(&self.raw_question),
            QuestionVariant::Reformulated => self.reformulated_question.as_deref(),
        }
    }
}

fn string_field(obj: &serde_json::Map<String, Value>, keys: &[&str]) -> Option<String> {
    keys.iter().find_map(|k| match obj.get(*k) {
        Some(Value::String(s)) => Some(s.clone()),
        Some(Value::Number(n)) => Some(n.to_string()),
        _ => None,
    })
}

/// Placeholder values LC-QuAD 2.0 uses where no paraphrase was written.
fn is_blank_question(s: &str) -> bool {
    let t = s.trim();
    t.is_empty() || t.eq_ignore_ascii_case("n/a") || t == "[]" || t.eq_ignore_ascii_case("none")
}

/// Maps one LC-QuAD 2.0 record (or an already normalized record) onto an
/// entry. The template-generated question is `NNQT_question`, the manual
/// rewrite is `question`, and the Wikidata query is `sparql_wikidata`.
pub fn parse_lcq2_record(index: usize, record: &Value) -> Result<Lcq2Entry, DatasetError> {
    let schema = |reason: &str| DatasetError::Schema {
        index,
        reason: reason.to_string(),
    };
    let obj = record.as_object().ok_or_else(|| schema("record is not an object"))?;
    let uid = string_field(obj, &["uid"]).ok_or_else(|| schema("missing uid"))?;
    let sparql = string_field(obj, &["sparql_wikidata", "sparql"])
        .filter(|s| !s.trim().is_empty())
        .ok_or_else(|| schema("missing sparql"))?;
    let raw_question = string_field(obj, &["NNQT_question", "raw_question"])
        .filter(|s| !is_blank_question(s))
        .ok_or_else(|| schema("missing raw question"))?;
    let reformulated_question = if obj.contains_key("reformulated_question") {
        string_field(obj, &["reformulated_question"])
    } else {
        string_field(obj, &["question"])
    }
    .filter(|s| !is_blank_question(s));
    let (template_id, template_source) = match string_field(obj, &["template_id"]) {
        Some(t) if !t.trim().is_empty() => (t, TemplateSource::Dataset),
        _ => {
            let derived = extract_template(&sparql)
                .map(|t| t.id())
                .unwrap_or_else(|_| "T-unparseable".to_string());
            (derived, TemplateSource::Derived)
        }
    };
    Ok(Lcq2Entry {
        uid,
        raw_question,
        reformulated_question,
        sparql,
        template_id,
        template_source,
    })
}

/// Loads a JSON array or JSON-lines file of LC-QuAD 2.0 records.
pub fn load_lcq2(path: &Path) -> Result<Vec<Lcq2Entry>, DatasetError> {
    let text = fs::read_to_string(path)?;
    let records: Vec<Value> = if text.trim_start().starts_with('[') {
        serde_json::from_str(&text).map_err(|e| DatasetError::Json(e.to_string()))?
    } else {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| DatasetError::Schema {
                    index: i,
                    reason: e.to_string(),
                })
            })
            .collect::<Result<_, _>>()?
    };
    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let e = parse_lcq2_record(i, r)?;
        if !seen.insert(e.uid.clone()) {
            return Err(DatasetError::DuplicateUid(e.uid));
        }
        entries.push(e);
    }
    Ok(entries)
}

/// Annotator output for one question variant of one entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub uid: String,
    pub variant: QuestionVariant,
    pub annotations: Vec<FrameAnnotation>,
    #[serde(default)]
    pub repairs: Vec<Repair>,
    #[serde(default)]
    pub error: Option<String>,
    /// The backend could not be reached or refused the request; the record
    /// should be retried rather than kept.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub service_error: bool,
}

/// Annotates every available question variant of every aligned entry.
/// Entries whose alignment is missing or failed produce no records.
pub fn annotate_entries(
    entries: &[Lcq2Entry],
    alignments: &[AlignRecord],
    inventory: &FrameInventory,
    backend: &dyn AnnotatorBackend,
    workers: usize,
) -> Vec<AnnotationRecord> {
    use rayon::prelude::*;

    let by_uid: HashMap<&str, &AlignRecord> = alignments.iter().map(|a| (a.uid.as_str(), a)).collect();
    let run = || -> Vec<Vec<AnnotationRecord>> {
        entries
            .par_iter()
            .map(|entry| {
                let Some(align) = by_uid.get(entry.uid.as_str()).filter(|a| a.error.is_none()) else {
                    return Vec::new();
                };
                [QuestionVariant::Raw, QuestionVariant::Reformulated]
                    .into_iter()
                    .filter_map(|v| entry.question(v).map(|q| (v, q)))
                    .map(|(variant, question)| match annotate(question, &align.frames, inventory, backend) {
                        Ok(validated) => AnnotationRecord {
                            uid: entry.uid.clone(),
                            variant,
                            repairs: validated.iter().flat_map(|v| v.repairs.clone()).collect(),
                            annotations: validated.into_iter().map(|v| v.annotation).collect(),
                            error: None,
                            service_error: false,
                        },
                        Err(e) => AnnotationRecord {
                            uid: entry.uid.clone(),
                            variant,
                            annotations: Vec::new(),
                            repairs: Vec::new(),
                            service_error: e.is_service_failure(),
                            error: Some(e.to_string()),
                        },
                    })
                    .collect()
            })
            .collect()
    };
    let nested = match rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build() {
        Ok(pool) => pool.install(run),
        Err(_) => run(),
    };
    nested.into_iter().flatten().collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub pipeline_version: String,
    pub config_hash: String,
}

impl Provenance {
    pub fn new(config_hash: &str) -> Self {
        Self {
            pipeline_version: concat!("frase/", env!("CARGO_PKG_VERSION")).to_string(),
            config_hash: config_hash.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryFlag {
    MissingAlignment,
    AlignmentError,
    MissingAnnotation,
    AnnotationError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantAnnotations {
    pub variant: QuestionVariant,
    pub annotations: Vec<FrameAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lcq3Entry {
    #[serde(flatten)]
    pub base: Lcq2Entry,
    pub evoked: Vec<EvokedFrame>,
    pub annotations: Vec<VariantAnnotations>,
    pub unknown_links: Vec<UnknownLink>,
    pub flags: Vec<EntryFlag>,
    pub provenance: Provenance,
}

impl Lcq3Entry {
    pub fn annotations_for(&self, variant: QuestionVariant) -> Option<&[FrameAnnotation]> {
        self.annotations
            .iter()
            .find(|a| a.variant == variant)
            .map(|a| a.annotations.as_slice())
    }
}

/// Joins entries with their alignment and annotation records. Records for
/// unknown uids are an error; missing records are flagged on the entry.
pub fn build_lcq3(
    entries: &[Lcq2Entry],
    alignments: &[AlignRecord],
    annotations: &[AnnotationRecord],
    inventory: &FrameInventory,
    provenance: &Provenance,
) -> Result<Vec<Lcq3Entry>, DatasetError> {
    let uids: HashSet<&str> = entries.iter().map(|e| e.uid.as_str()).collect();
    let mut align_by: HashMap<&str, &AlignRecord> = HashMap::new();
    for a in alignments {
        if !uids.contains(a.uid.as_str()) {
            return Err(DatasetError::UidMismatch {
                uid: a.uid.clone(),
                source_name: "alignment output".into(),
            });
        }
        align_by.insert(&a.uid, a);
    }
    let mut ann_by: HashMap<&str, Vec<&AnnotationRecord>> = HashMap::new();
    for a in annotations {
        if !uids.contains(a.uid.as_str()) {
            return Err(DatasetError::UidMismatch {
                uid: a.uid.clone(),
                source_name: "annotation output".into(),
            });
        }
        ann_by.entry(&a.uid).or_default().push(a);
    }

    let mut out = Vec::with_capacity(entries.len());
    for entry in entries {
        let mut flags = Vec::new();
        let evoked = match align_by.get(entry.uid.as_str()) {
            None => {
                flags.push(EntryFlag::MissingAlignment);
                Vec::new()
            }
            Some(a) if a.error.is_some() => {
                flags.push(EntryFlag::AlignmentError);
                Vec::new()
            }
            Some(a) => a.frames.clone(),
        };
        let evoked_ids: HashSet<&str> = evoked.iter().map(|f| f.frame_id.as_str()).collect();
        let mut per_variant: Vec<VariantAnnotations> = Vec::new();
        let records = ann_by.get(entry.uid.as_str()).cloned().unwrap_or_default();
        for variant in [QuestionVariant::Raw, QuestionVariant::Reformulated] {
            if entry.question(variant).is_none() {
                continue;
            }
            match records.iter().find(|r| r.variant == variant) {
                None => {
                    if !flags.contains(&EntryFlag::MissingAnnotation) {
                        flags.push(EntryFlag::MissingAnnotation);
                    }
                }
                Some(r) if r.error.is_some() => {
                    if !flags.contains(&EntryFlag::AnnotationError) {
                        flags.push(EntryFlag::AnnotationError);
                    }
                }
                Some(r) => {
                    for a in &r.annotations {
                        if !evoked_ids.contains(a.frame_id.as_str()) {
                            return Err(DatasetError::UnevokedFrame {
                                uid: entry.uid.clone(),
                                frame: a.frame_id.clone(),
                            });
                        }
                    }
                    per_variant.push(VariantAnnotations {
                        variant,
                        annotations: r.annotations.clone(),
                    });
                }
            }
        }
        let link_source = per_variant
            .iter()
            .find(|v| v.variant == QuestionVariant::Raw)
            .or(per_variant.first());
        let unknown_links = link_source
            .map(|v| link_unfilled_to_unknowns(&v.annotations, &entry.sparql, inventory))
            .unwrap_or_default();
        out.push(Lcq3Entry {
            base: entry.clone(),
            evoked,
            annotations: per_variant,
            unknown_links,
            flags,
            provenance: provenance.clone(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Original,
    UnknownTemplate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Raw,
    Reformulated,
    Combined,
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "raw" => Ok(Variant::Raw),
            "reformulated" => Ok(Variant::Reformulated),
            "combined" => Ok(Variant::Combined),
            other => Err(format!("unknown variant `{other}` (raw, reformulated, combined)")),
        }
    }
}

impl std::str::FromStr for SplitName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.replace('-', "_").as_str() {
            "original" => Ok(SplitName::Original),
            "unknown_template" => Ok(SplitName::UnknownTemplate),
            other => Err(format!("unknown split `{other}` (original, unknown_template)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Train,
    Validation,
    Test,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::Train, Subset::Validation, Subset::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Subset::Train => "train",
            Subset::Validation => "validation",
            Subset::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub name: SplitName,
    pub variant: Variant,
    pub seed: u64,
    pub assignments: BTreeMap<String, Subset>,
    /// Templates withheld from training (unknown-template splits only).
    #[serde(default)]
    pub held_out_templates: Vec<String>,
    /// Validation drawn from training templates instead of held-out ones.
    #[serde(default)]
    pub relaxed_validation: bool,
}

impl SplitSpec {
    pub fn subset_of(&self, uid: &str) -> Option<Subset> {
        self.assignments.get(uid).copied()
    }

    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for s in self.assignments.values() {
            c[*s as usize] += 1;
        }
        c
    }

    /// Template ids present in each subset.
    pub fn templates(&self, entries: &[Lcq2Entry]) -> [BTreeSet<String>; 3] {
        let mut t: [BTreeSet<String>; 3] = Default::default();
        for e in entries {
            if let Some(s) = self.subset_of(&e.uid) {
                t[s as usize].insert(e.template_id.clone());
            }
        }
        t
    }
}

/// Splits `total` into shares of `ratios` by largest remainder. Equal
/// remainders favour the later subset.
pub fn largest_remainder(total: usize, ratios: [f64; 3]) -> [usize; 3] {
    let sum: f64 = ratios.iter().sum();
    let quotas = ratios.map(|r| total as f64 * r / sum);
    let mut counts = quotas.map(|q| q.floor() as usize);
    let mut left = total - counts.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let (fa, fb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        fb.total_cmp(&fa).then(b.cmp(&a))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Seeded uniform shuffle cut 80/10/10, or at an explicit count triple.
pub fn make_original_split(
    entries: &[Lcq2Entry],
    seed: u64,
    counts: Option<[usize; 3]>,
) -> Result<SplitSpec, DatasetError> {
    if entries.is_empty() {
        return Err(DatasetError::Empty);
    }
    let sizes = match counts {
        Some(c) if c.iter().sum::<usize>() != entries.len() => {
            return Err(DatasetError::BadCounts {
                counts: c,
                total: entries.len(),
            })
        }
        Some(c) => c,
        None => largest_remainder(entries.len(), [0.8, 0.1, 0.1]),
    };
    let mut uids: Vec<&str> = entries.iter().map(|e| e.uid.as_str()).collect();
    uids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignments = BTreeMap::new();
    for (i, uid) in uids.into_iter().enumerate() {
        let subset = if i < sizes[0] {
            Subset::Train
        } else if i < sizes[0] + sizes[1] {
            Subset::Validation
        } else {
            Subset::Test
        };
        assignments.insert(uid.to_string(), subset);
    }
    Ok(SplitSpec {
        name: SplitName::Original,
        variant: Variant::Raw,
        seed,
        assignments,
        held_out_templates: Vec::new(),
        relaxed_validation: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnknownTemplateOptions {
    /// Share of template groups withheld from training.
    pub held_out_fraction: f64,
    /// Draw validation from training templates; held-out entries all go to test.
    pub relax_validation: bool,
    pub restarts: usize,
}

impl Default for UnknownTemplateOptions {
    fn default() -> Self {
        Self {
            held_out_fraction: 0.2,
            relax_validation: false,
            restarts: 64,
        }
    }
}

/// Picks `h` of `sizes` whose sum is closest to `target`, by seeded random
/// restarts each refined with best-improvement swaps.
fn choose_groups(sizes: &[usize], h: usize, target: usize, restarts: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let cost = |sum: usize| sum.abs_diff(target);
    let mut best: Option<(usize, Vec<usize>)> = None;
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    for _ in 0..restarts.max(1) {
        order.shuffle(rng);
        let mut chosen: Vec<usize> = order[..h].to_vec();
        let mut rest: Vec<usize> = order[h..].to_vec();
        let mut sum: usize = chosen.iter().map(|&g| sizes[g]).sum();
        loop {
            let mut improvement: Option<(usize, usize, usize)> = None;
            for (ci, &c) in chosen.iter().enumerate() {
                for (ri, &r) in rest.iter().enumerate() {
                    let new_sum = sum - sizes[c] + sizes[r];
                    let current = improvement.map_or(cost(sum), |(_, _, s)| cost(s));
                    if cost(new_sum) < current {
                        improvement = Some((ci, ri, new_sum));
                    }
                }
            }
            match improvement {
                Some((ci, ri, new_sum)) => {
                    std::mem::swap(&mut chosen[ci], &mut rest[ri]);
                    sum = new_sum;
                }
                None => break,
            }
        }
        if best.as_ref().is_none_or(|(c, _)| cost(sum) < *c) {
            chosen.sort_unstable();
            best = Some((cost(sum), chosen));
        }
        if best.as_ref().is_some_and(|(c, _)| *c == 0) {
            break;
        }
    }
    best.map(|(_, c)| c).unwrap_or_default()
}

/// Withholds whole template groups from training so that validation and test
/// contain only unseen templates.
pub fn make_unknown_template_split(
    entries: &[Lcq2Entry],
    seed: u64,
    opts: UnknownTemplateOptions,
) -> Result<SplitSpec, DatasetError> {
    let mut groups: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for e in entries {
        groups.entry(&e.template_id).or_default().push(&e.uid);
    }
    let g = groups.len();
    if g < 3 {
        return Err(DatasetError::TooFewTemplates(g));
    }
    let names: Vec<&str> = groups.keys().copied().collect();
    let sizes: Vec<usize> = groups.values().map(Vec::len).collect();
    let h = ((opts.held_out_fraction * g as f64).round() as usize).clamp(1, g - 1);
    let n = entries.len();
    let target_share = if opts.relax_validation { 0.1 } else { 0.2 };
    let target = (target_share * n as f64).round() as usize;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let held: BTreeSet<usize> = choose_groups(&sizes, h, target, opts.restarts, &mut rng).into_iter().collect();

    let mut train: Vec<&str> = Vec::new();
    let mut held_out: Vec<&str> = Vec::new();
    for (i, members) in groups.values().enumerate() {
        if held.contains(&i) {
            held_out.extend(members);
        } else {
            train.extend(members);
        }
    }
    let mut assignments = BTreeMap::new();
    if opts.relax_validation {
        train.shuffle(&mut rng);
        let n_val = ((0.1 * n as f64).round() as usize).min(train.len().saturating_sub(1));
        for (i, uid) in train.iter().enumerate() {
            let s = if i < n_val { Subset::Validation } else { Subset::Train };
            assignments.insert(uid.to_string(), s);
        }
        for uid in held_out {
            assignments.insert(uid.to_string(), Subset::Test);
        }
    } else {
        held_out.shuffle(&mut rng);
        let n_val = held_out.len() / 2;
        for uid in train {
            assignments.insert(uid.to_string(), Subset::Train);
        }
        for (i, uid) in held_out.iter().enumerate() {
            let s = if i < n_val { Subset::Validation } else { Subset::Test };
            assignments.insert(uid.to_string(), s);
        }
    }
    Ok(SplitSpec {
        name: SplitName::UnknownTemplate,
        variant: Variant::Raw,
        seed,
        assignments,
        held_out_templates: held.iter().map(|&i| names[i].to_string()).collect(),
        relaxed_validation: opts.relax_validation,
    })
}

/// Template ids shared between training and each evaluation subset; empty
/// for a valid unknown-template split.
pub fn template_overlap(split: &SplitSpec, entries: &[Lcq2Entry]) -> (BTreeSet<String>, BTreeSet<String>) {
    let [train, val, test] = split.templates(entries);
    (
        train.intersection(&val).cloned().collect(),
        train.intersection(&test).cloned().collect(),
    )
}

/// Read access shared by plain and enriched entries.
pub trait DatasetEntry {
    fn base(&self) -> &Lcq2Entry;
    fn annotations_for(&self, _variant: QuestionVariant) -> Option<&[FrameAnnotation]> {
        None
    }
}

impl DatasetEntry for Lcq2Entry {
    fn base(&self) -> &Lcq2Entry {
        self
    }
}

impl DatasetEntry for Lcq3Entry {
    fn base(&self) -> &Lcq2Entry {
        &self.base
    }
    fn annotations_for(&self, variant: QuestionVariant) -> Option<&[FrameAnnotation]> {
        Lcq3Entry::annotations_for(self, variant)
    }
}

/// One question/query pair of a materialized variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRecord {
    pub id: String,
    pub uid: String,
    pub question_variant: QuestionVariant,
    pub question: String,
    pub sparql: String,
    pub template_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<Vec<FrameAnnotation>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MaterializedSplit {
    pub train: Vec<VariantRecord>,
    pub validation: Vec<VariantRecord>,
    pub test: Vec<VariantRecord>,
    /// Entries dropped for lacking a reformulated question.
    pub dropped: usize,
}

impl MaterializedSplit {
    pub fn subset(&self, s: Subset) -> &[VariantRecord] {
        match s {
            Subset::Train => &self.train,
            Subset::Validation => &self.validation,
            Subset::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Expands each assigned entry into variant records, keeping input order
/// within each subset. Entries without a reformulation are dropped and
/// counted, never replaced by the raw question.
pub fn make_variant<E: DatasetEntry>(entries: &[E], split: &SplitSpec, variant: Variant) -> MaterializedSplit {
    let mut out = MaterializedSplit::default();
    let wanted: &[QuestionVariant] = match variant {
        Variant::Raw => &[QuestionVariant::Raw],
        Variant::Reformulated => &[QuestionVariant::Reformulated],
        Variant::Combined => &[QuestionVariant::Raw, QuestionVariant::Reformulated],
    };
    for entry in entries {
        let base = entry.base();
        let Some(subset) = split.subset_of(&base.uid) else {
            continue;
        };
        for &qv in wanted {
            let Some(question) = base.question(qv) else {
                out.dropped += 1;
                continue;
            };
            let id = match variant {
                Variant::Combined => format!("{}#{}", base.uid, if qv == QuestionVariant::Raw { "raw" } else { "reformulated" }),
                _ => base.uid.clone(),
            };
            let record = VariantRecord {
                id,
                uid: base.uid.clone(),
                question_variant: qv,
                question: question.to_string(),
                sparql: base.sparql.clone(),
                template_id: base.template_id.clone(),
                annotations: entry.annotations_for(qv).map(<[FrameAnnotation]>::to_vec),
            };
            match subset {
                Subset::Train => out.train.push(record),
                Subset::Validation => out.validation.push(record),
                Subset::Test => out.test.push(record),
            }
        }
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub min: usize,
    pub mean: f64,
    pub max: usize,
    pub histogram: BTreeMap<usize, usize>,
}

impl LengthStats {
    pub fn from_lengths(lengths: impl IntoIterator<Item = usize>) -> Self {
        let mut s = LengthStats::default();
        let (mut n, mut total) = (0usize, 0usize);
        for l in lengths {
            if n == 0 || l < s.min {
                s.min = l;
            }
            s.max = s.max.max(l);
            total += l;
            n += 1;
            *s.histogram.entry(l).or_default() += 1;
        }
        if n > 0 {
            s.mean = total as f64 / n as f64;
        }
        s
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SubsetStats {
    pub subset: String,
    pub entries: usize,
    pub templates: usize,
    /// Templates absent from training.
    pub unseen_templates: usize,
    /// Records whose template is absent from training.
    pub unseen_entries: usize,
    /// Whitespace word counts of the SPARQL queries.
    pub query_length: LengthStats,
    /// Whitespace word counts of the questions.
    pub question_length: LengthStats,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub split: Option<SplitName>,
    pub variant: Option<Variant>,
    pub total_entries: usize,
    pub total_templates: usize,
    pub subsets: Vec<SubsetStats>,
    pub dropped: usize,
}

pub fn split_stats(split: &SplitSpec, materialized: &MaterializedSplit) -> StatsReport {
    let train_templates: HashSet<&str> = materialized.train.iter().map(|r| r.template_id.as_str()).collect();
    let mut all_templates: HashSet<&str> = HashSet::new();
    let subsets = Subset::ALL
        .iter()
        .map(|&s| {
            let records = materialized.subset(s);
            let templates: HashSet<&str> = records.iter().map(|r| r.template_id.as_str()).collect();
            all_templates.extend(&templates);
            SubsetStats {
                subset: s.as_str().to_string(),
                entries: records.len(),
                templates: templates.len(),
                unseen_templates: templates.iter().filter(|t| !train_templates.contains(*t)).count(),
                unseen_entries: records
                    .iter()
                    .filter(|r| !train_templates.contains(r.template_id.as_str()))
                    .count(),
                query_length: LengthStats::from_lengths(records.iter().map(|r| query_length(&r.sparql))),
                question_length: LengthStats::from_lengths(records.iter().map(|r| query_length(&r.question))),
            }
        })
        .collect();
    StatsReport {
        split: Some(split.name),
        variant: Some(split.variant),
        total_entries: materialized.len(),
        total_templates: all_templates.len(),
        subsets,
        dropped: materialized.dropped,
    }
}

impl StatsReport {
    /// Plain-text table with one column per subset.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<26}{:>10}{:>10}{:>12}{:>10}",
            "", "Total", "Train", "Validation", "Test"
        );
        let col = |f: &dyn Fn(&SubsetStats) -> String| -> Vec<String> { self.subsets.iter().map(f).collect() };
        let mut row = |name: &str, total: String, cells: Vec<String>| {
            let _ = write!(out, "{name:<26}{total:>10}");
            for (i, c) in cells.iter().enumerate() {
                let w = if i == 1 { 12 } else { 10 };
                let _ = write!(out, "{c:>w$}");
            }
            out.push('\n');
        };
        row("Global templates", self.total_templates.to_string(), col(&|s| s.templates.to_string()));
        row("Entries", self.total_entries.to_string(), col(&|s| s.entries.to_string()));
        row("Unseen templates", "-".into(), col(&|s| s.unseen_templates.to_string()));
        row("Avg query length", "-".into(), col(&|s| format!("{:.1}", s.query_length.mean)));
        row("Min/max query length", "-".into(), col(&|s| format!("{}/{}", s.query_length.min, s.query_length.max)));
        row("Avg question length", "-".into(), col(&|s| format!("{:.1}", s.question_length.mean)));
        out
    }

    /// Histogram rows `subset,metric,length,count` for plotting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("subset,metric,length,count\n");
        for s in &self.subsets {
            for (metric, stats) in [("query_length", &s.query_length), ("question_length", &s.question_length)] {
                for (len, count) in &stats.histogram {
                    let _ = writeln!(out, "{},{metric},{len},{count}", s.subset);
                }
            }
        }
        out
    }
}

pub const PROMPT_INSTRUCTION: &str = "Generate a SPARQL query corresponding to the input question. \
When frame annotations follow the question, use the evoked frames and their elements as additional context.";

pub const EMPTY_FRAMES_MARKER: &str = "Frames: none";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub instruction: String,
    pub input: String,
    pub output: String,
}

/// Deterministic text block for a list of frame annotations.
pub fn serialize_annotations(annotations: &[FrameAnnotation]) -> String {
    if annotations.is_empty() {
        return EMPTY_FRAMES_MARKER.to_string();
    }
    let mut out = String::from("Frames:");
    for a in annotations {
        let mapped = a
            .mappings
            .iter()
            .map(|m| format!("{}={}", m.element_name, serde_json::to_string(&m.span_text).expect("string")))
            .collect::<Vec<_>>()
            .join("; ");
        let _ = write!(out, "\n- {} | {} | unfilled: {}", a.frame_id, mapped, a.unfilled.join(", "));
    }
    out
}

pub fn build_prompt(record: &VariantRecord, with_frames: bool) -> PromptRecord {
    let input = if with_frames {
        let annotations = record.annotations.as_deref().unwrap_or(&[]);
        format!("{}\n\n{}", record.question, serialize_annotations(annotations))
    } else {
        record.question.clone()
    };
    PromptRecord {
        instruction: PROMPT_INSTRUCTION.to_string(),
        input,
        output: record.sparql.clone(),
    }
}
