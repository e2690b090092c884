//! Lightweight SPARQL analysis: URI extraction by kind, query templates,
//! query form classification and length statistics.
//!
//! This is deliberately not a SPARQL 1.1 parser. The tokenizer understands
//! the constructs used by template-generated KBQA datasets (SELECT, ASK,
//! COUNT, FILTER, ORDER BY, LIMIT, qualifiers); anything else passes through
//! templating verbatim.

mod lexer;
mod uri;

use std::collections::HashMap;

use indexmap::IndexSet;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use lexer::{tokenize, Token, TokenKind};
pub use uri::{Namespace, PrefixTable, UriError, WikidataUri};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("SPARQL parse error at byte {offset}: {message}")]
pub struct SparqlError {
    pub offset: usize,
    pub message: String,
}

impl SparqlError {
    pub(crate) fn at(offset: usize, message: &str) -> Self {
        Self {
            offset,
            message: message.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SelectError {
    #[error(transparent)]
    Parse(#[from] SparqlError),
    #[error("query form is {0:?}; projection variables only exist for SELECT/COUNT queries")]
    NotSelect(QueryForm),
}

/// Property ids whose objects are treated as classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractOptions {
    pub class_predicates: Vec<String>,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        Self {
            class_predicates: vec!["P31".into(), "P279".into()],
        }
    }
}

/// Wikidata URIs mentioned in a query, partitioned by role. Each set keeps
/// first-occurrence order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedUris {
    pub relations: IndexSet<WikidataUri>,
    pub classes: IndexSet<WikidataUri>,
    pub entities: IndexSet<WikidataUri>,
}

impl ExtractedUris {
    /// Relations followed by classes: the URIs that take part in frame
    /// detection.
    pub fn alignable(&self) -> impl Iterator<Item = &WikidataUri> {
        self.relations.iter().chain(self.classes.iter())
    }

    pub fn is_empty(&self) -> bool {
        self.relations.is_empty() && self.classes.is_empty() && self.entities.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryForm {
    Select,
    Ask,
    Count,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryTemplate {
    pub canonical_text: String,
    pub form: QueryForm,
    pub placeholder_count: usize,
}

impl QueryTemplate {
    /// Short stable identifier derived from the canonical text.
    pub fn id(&self) -> String {
        format!("T{}", &crate::io::sha256_hex(self.canonical_text.as_bytes())[..12])
    }
}

/// Collects `PREFIX p: <iri>` declarations on top of the built-in table.
fn prefixes_for(tokens: &[Token<'_>]) -> PrefixTable {
    let mut table = PrefixTable::default();
    for w in tokens.windows(3) {
        if w[0].is_word("PREFIX") && w[1].kind == TokenKind::PrefixedName && w[2].kind == TokenKind::Iri {
            let prefix = w[1].text.trim_end_matches(':');
            table.insert(prefix, &w[2].text[1..w[2].text.len() - 1]);
        }
    }
    table
}

fn wikidata_uri(tok: &Token<'_>, prefixes: &PrefixTable) -> Option<WikidataUri> {
    match tok.kind {
        TokenKind::PrefixedName | TokenKind::Iri => WikidataUri::parse_with(tok.text, prefixes).ok(),
        _ => None,
    }
}

/// A triple pattern found by walking group graph patterns. Predicates hold
/// every step of a property path.
struct Triple<'t, 'a> {
    predicates: Vec<&'t Token<'a>>,
    object: &'t Token<'a>,
}

const CLAUSE_WORDS: &[&str] = &[
    "FILTER", "BIND", "OPTIONAL", "MINUS", "UNION", "SERVICE", "GRAPH", "ORDER", "GROUP", "LIMIT",
    "OFFSET", "HAVING", "WHERE", "ASK", "NOT", "EXISTS",
];

fn skip_balanced(tokens: &[Token<'_>], mut i: usize, open: &str, close: &str) -> usize {
    let mut depth = 0usize;
    while i < tokens.len() {
        if tokens[i].is_punct(open) {
            depth += 1;
        } else if tokens[i].is_punct(close) {
            depth = depth.saturating_sub(1);
            if depth == 0 {
                return i + 1;
            }
        }
        i += 1;
    }
    i
}

fn triples<'t, 'a>(tokens: &'t [Token<'a>]) -> Vec<Triple<'t, 'a>> {
    #[derive(PartialEq)]
    enum State {
        Subject,
        Predicate,
        Object,
        AfterObject,
    }
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut state = State::Subject;
    let mut predicates: Vec<&Token<'a>> = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let tok = &tokens[i];
        if tok.is_punct("{") {
            depth += 1;
            state = State::Subject;
            i += 1;
            continue;
        }
        if tok.is_punct("}") {
            depth = depth.saturating_sub(1);
            state = State::Subject;
            i += 1;
            continue;
        }
        if depth == 0 {
            i += 1;
            continue;
        }
        if tok.kind == TokenKind::Word && !tok.is_term() {
            let upper = tok.text.to_ascii_uppercase();
            if upper == "VALUES" {
                // skip the data block entirely
                let mut j = i + 1;
                while j < tokens.len() && !tokens[j].is_punct("{") {
                    j += 1;
                }
                i = skip_balanced(tokens, j, "{", "}");
                state = State::Subject;
                continue;
            }
            if upper == "SELECT" {
                while i < tokens.len() && !tokens[i].is_punct("{") {
                    i += 1;
                }
                continue;
            }
            if CLAUSE_WORDS.contains(&upper.as_str()) || i + 1 < tokens.len() && tokens[i + 1].is_punct("(") {
                state = State::Subject;
                i += 1;
                if i < tokens.len() && tokens[i].is_punct("(") {
                    i = skip_balanced(tokens, i, "(", ")");
                }
                continue;
            }
            i += 1;
            continue;
        }
        if tok.kind == TokenKind::Punct {
            match tok.text {
                "." => state = State::Subject,
                ";" => state = State::Predicate,
                "," => state = State::Object,
                "(" => {
                    i = skip_balanced(tokens, i, "(", ")");
                    state = State::Subject;
                    continue;
                }
                _ => {}
            }
            i += 1;
            continue;
        }
        // term
        match state {
            State::Subject | State::AfterObject => {
                state = State::Predicate;
                i += 1;
            }
            State::Predicate => {
                predicates.clear();
                predicates.push(tok);
                i += 1;
                loop {
                    while i < tokens.len()
                        && (tokens[i].is_punct("*") || tokens[i].is_punct("+") || tokens[i].is_punct("?"))
                    {
                        i += 1;
                    }
                    if i + 1 < tokens.len()
                        && (tokens[i].is_punct("/") || tokens[i].is_punct("|"))
                    {
                        let mut j = i + 1;
                        if tokens[j].is_punct("^") {
                            j += 1;
                        }
                        if j < tokens.len() && tokens[j].is_term() {
                            predicates.push(&tokens[j]);
                            i = j + 1;
                            continue;
                        }
                    }
                    break;
                }
                state = State::Object;
            }
            State::Object => {
                out.push(Triple {
                    predicates: predicates.clone(),
                    object: tok,
                });
                state = State::AfterObject;
                i += 1;
            }
        }
    }
    out
}

pub fn extract_uris(query: &str) -> Result<ExtractedUris, SparqlError> {
    extract_uris_with(query, &ExtractOptions::default())
}

/// Partitions the Wikidata URIs of `query` into relations (`wdt:`, `p:`,
/// `ps:`, `pq:`), classes (objects of the configured class predicates) and
/// entities (remaining `wd:` items). The three sets are disjoint.
pub fn extract_uris_with(query: &str, opts: &ExtractOptions) -> Result<ExtractedUris, SparqlError> {
    let tokens = tokenize(query)?;
    let prefixes = prefixes_for(&tokens);

    let mut class_set: IndexSet<WikidataUri> = IndexSet::new();
    for t in triples(&tokens) {
        let is_class_pred = t.predicates.iter().any(|p| {
            wikidata_uri(p, &prefixes)
                .is_some_and(|u| u.namespace.is_relation() && opts.class_predicates.contains(&u.id))
        });
        if is_class_pred {
            if let Some(obj) = wikidata_uri(t.object, &prefixes) {
                if obj.namespace == Namespace::Entity {
                    class_set.insert(obj);
                }
            }
        }
    }

    let mut out = ExtractedUris::default();
    for tok in &tokens {
        let Some(u) = wikidata_uri(tok, &prefixes) else {
            continue;
        };
        if u.namespace.is_relation() {
            out.relations.insert(u);
        } else if class_set.contains(&u) {
            out.classes.insert(u);
        } else {
            out.entities.insert(u);
        }
    }
    Ok(out)
}

fn literal_type(tok: &Token<'_>) -> String {
    match tok.kind {
        TokenKind::Number => {
            if tok.text.contains(['e', 'E']) {
                "double".into()
            } else if tok.text.contains('.') {
                "decimal".into()
            } else {
                "integer".into()
            }
        }
        TokenKind::Word => "boolean".into(),
        _ => {
            if let Some(pos) = tok.text.rfind("^^") {
                let dt = tok.text[pos + 2..].trim_start_matches('<').trim_end_matches('>');
                dt.rsplit(['#', ':', '/']).next().unwrap_or(dt).to_string()
            } else if tok.text.ends_with(['\'', '"']) {
                "string".into()
            } else {
                "langString".into()
            }
        }
    }
}

pub fn extract_template(query: &str) -> Result<QueryTemplate, SparqlError> {
    extract_template_with(query, &ExtractOptions::default())
}

/// Abstracts a query into its template: Wikidata URIs become `<ENT_i>`,
/// `<REL_i>`, `<CLS_i>` (first-occurrence numbering per kind), literals
/// become `<LIT:type>`, variables become `?v0, ?v1, ...`, keywords are
/// uppercased and tokens are joined by single spaces.
pub fn extract_template_with(
    query: &str,
    opts: &ExtractOptions,
) -> Result<QueryTemplate, SparqlError> {
    let tokens = tokenize(query)?;
    let prefixes = prefixes_for(&tokens);
    let uris = extract_uris_with(query, opts)?;

    let mut numbering: HashMap<(char, WikidataUri), usize> = HashMap::new();
    let mut counters: HashMap<char, usize> = HashMap::new();
    let mut variables: HashMap<String, usize> = HashMap::new();
    let mut placeholder_count = 0;
    let mut parts: Vec<String> = Vec::with_capacity(tokens.len());

    for tok in &tokens {
        let part = match tok.kind {
            TokenKind::PrefixedName | TokenKind::Iri => match wikidata_uri(tok, &prefixes) {
                Some(u) => {
                    let (tag, label) = if u.namespace.is_relation() {
                        ('R', "REL")
                    } else if uris.classes.contains(&u) {
                        ('C', "CLS")
                    } else {
                        ('E', "ENT")
                    };
                    let next = counters.entry(tag).or_insert(0);
                    let idx = *numbering.entry((tag, u)).or_insert_with(|| {
                        *next += 1;
                        *next - 1
                    });
                    placeholder_count += 1;
                    format!("<{label}_{idx}>")
                }
                None => tok.text.to_string(),
            },
            TokenKind::String | TokenKind::Number => {
                placeholder_count += 1;
                format!("<LIT:{}>", literal_type(tok))
            }
            TokenKind::Word if tok.text.eq_ignore_ascii_case("true") || tok.text.eq_ignore_ascii_case("false") => {
                placeholder_count += 1;
                format!("<LIT:{}>", literal_type(tok))
            }
            TokenKind::Placeholder => {
                placeholder_count += 1;
                tok.text.to_string()
            }
            TokenKind::Variable => {
                let next = variables.len();
                let idx = *variables.entry(tok.text[1..].to_string()).or_insert(next);
                format!("?v{idx}")
            }
            TokenKind::Word if tok.text == "a" => "a".to_string(),
            TokenKind::Word => tok.text.to_ascii_uppercase(),
            TokenKind::Punct => tok.text.to_string(),
        };
        parts.push(part);
    }

    Ok(QueryTemplate {
        canonical_text: parts.join(" "),
        form: form_of(&tokens),
        placeholder_count,
    })
}

fn form_of(tokens: &[Token<'_>]) -> QueryForm {
    for (i, tok) in tokens.iter().enumerate() {
        if tok.kind != TokenKind::Word {
            continue;
        }
        match tok.text.to_ascii_uppercase().as_str() {
            "ASK" => return QueryForm::Ask,
            "SELECT" => {
                let projection = tokens[i + 1..]
                    .iter()
                    .take_while(|t| !t.is_word("WHERE") && !t.is_punct("{"));
                let mut projection = projection;
                return if projection.any(|t| t.is_word("COUNT")) {
                    QueryForm::Count
                } else {
                    QueryForm::Select
                };
            }
            "CONSTRUCT" | "DESCRIBE" => return QueryForm::Other,
            _ => {}
        }
    }
    QueryForm::Other
}

/// Keyword-driven form detection; COUNT inside the SELECT projection yields
/// [`QueryForm::Count`]. Untokenizable input falls back to a word scan.
pub fn classify_query_form(query: &str) -> QueryForm {
    match tokenize(query) {
        Ok(tokens) => form_of(&tokens),
        Err(_) => {
            let upper = query.to_ascii_uppercase();
            let words: Vec<&str> = upper
                .split(|c: char| !c.is_ascii_alphanumeric())
                .filter(|w| !w.is_empty())
                .collect();
            match words.iter().position(|w| matches!(*w, "SELECT" | "ASK" | "CONSTRUCT" | "DESCRIBE")) {
                Some(i) if words[i] == "ASK" => QueryForm::Ask,
                Some(i) if words[i] == "SELECT" => {
                    let head = words[i..].iter().take_while(|w| **w != "WHERE");
                    let mut head = head;
                    if head.any(|w| *w == "COUNT") {
                        QueryForm::Count
                    } else {
                        QueryForm::Select
                    }
                }
                _ => QueryForm::Other,
            }
        }
    }
}

/// Number of whitespace-delimited tokens.
pub fn query_length(query: &str) -> usize {
    query.split_whitespace().count()
}

/// Projection variables (without sigil) in order. `SELECT *` expands to
/// every variable of the pattern in first-occurrence order.
pub fn select_variables(query: &str) -> Result<Vec<String>, SelectError> {
    let tokens = tokenize(query)?;
    let form = form_of(&tokens);
    if !matches!(form, QueryForm::Select | QueryForm::Count) {
        return Err(SelectError::NotSelect(form));
    }
    let select_at = tokens
        .iter()
        .position(|t| t.is_word("SELECT"))
        .expect("select form implies SELECT keyword");
    let mut vars: Vec<String> = Vec::new();
    let mut star = false;
    let mut i = select_at + 1;
    while i < tokens.len() && !tokens[i].is_word("WHERE") && !tokens[i].is_punct("{") {
        let tok = &tokens[i];
        if tok.is_punct("*") {
            star = true;
        } else if tok.is_punct("(") {
            let end = skip_balanced(&tokens, i, "(", ")");
            // `( expr AS ?name )`
            if let Some(as_pos) = (i..end).rev().find(|&j| tokens[j].is_word("AS")) {
                if let Some(v) = tokens.get(as_pos + 1).filter(|t| t.kind == TokenKind::Variable) {
                    vars.push(v.text[1..].to_string());
                }
            }
            i = end;
            continue;
        } else if tok.kind == TokenKind::Variable {
            vars.push(tok.text[1..].to_string());
        }
        i += 1;
    }
    if star {
        let mut seen = IndexSet::new();
        for tok in &tokens[i..] {
            if tok.kind == TokenKind::Variable {
                seen.insert(tok.text[1..].to_string());
            }
        }
        vars = seen.into_iter().collect();
    }
    Ok(vars)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(set: &IndexSet<WikidataUri>) -> Vec<&str> {
        set.iter().map(|u| u.id.as_str()).collect()
    }

    #[test]
    fn extracts_relations_classes_entities() {
        let q = "SELECT ?x WHERE { ?x wdt:P1365 wd:Q123 . ?x wdt:P31 wd:Q164950 }";
        let u = extract_uris(q).unwrap();
        assert_eq!(ids(&u.relations), vec!["P1365", "P31"]);
        assert_eq!(ids(&u.entities), vec!["Q123"]);
        assert_eq!(ids(&u.classes), vec!["Q164950"]);
    }

    #[test]
    fn empty_ask_has_no_uris() {
        assert!(extract_uris("ASK { }").unwrap().is_empty());
    }

    #[test]
    fn unbalanced_quote_reports_offset() {
        let err = extract_uris("SELECT ?x WHERE { ?x rdfs:label \"Yuan }").unwrap_err();
        assert_eq!(err.offset, 32);
    }

    #[test]
    fn classes_via_paths_lists_and_statements() {
        let q = "SELECT ?x WHERE { ?x wdt:P31/wdt:P279* wd:Q5 ; wdt:P27 wd:Q30 . \
                 ?x p:P31 ?s . ?s ps:P31 wd:Q6256 . ?y wdt:P31 wd:Q515 , wd:Q1549591 }";
        let u = extract_uris(q).unwrap();
        assert_eq!(ids(&u.classes), vec!["Q5", "Q6256", "Q515", "Q1549591"]);
        assert_eq!(ids(&u.entities), vec!["Q30"]);
        let rel: Vec<String> = u.relations.iter().map(|r| r.prefixed()).collect();
        assert_eq!(rel, vec!["wdt:P31", "wdt:P279", "wdt:P27", "p:P31", "ps:P31"]);
    }

    #[test]
    fn class_predicates_are_configurable() {
        let q = "SELECT ?x WHERE { ?x wdt:P31 wd:Q5 . ?x wdt:P361 wd:Q9 }";
        let opts = ExtractOptions {
            class_predicates: vec!["P361".into()],
        };
        let u = extract_uris_with(q, &opts).unwrap();
        assert_eq!(ids(&u.classes), vec!["Q9"]);
        assert_eq!(ids(&u.entities), vec!["Q5"]);
    }

    #[test]
    fn full_iris_and_declared_prefixes() {
        let q = "PREFIX e: <http://www.wikidata.org/entity/> \
                 SELECT ?x WHERE { ?x <http://www.wikidata.org/prop/direct/P31> e:Q5 }";
        let u = extract_uris(q).unwrap();
        assert_eq!(ids(&u.relations), vec!["P31"]);
        assert_eq!(ids(&u.classes), vec!["Q5"]);
    }

    #[test]
    fn filter_and_values_do_not_confuse_triples() {
        let q = "SELECT ?x WHERE { VALUES ?c { wd:Q1 wd:Q2 } ?x wdt:P31 ?c . \
                 FILTER(contains(lcase(?l), 'wd:Q3')) ?x wdt:P17 wd:Q4 }";
        let u = extract_uris(q).unwrap();
        assert_eq!(ids(&u.entities), vec!["Q1", "Q2", "Q4"]);
        assert!(u.classes.is_empty());
    }

    #[test]
    fn templates_ignore_uris_variables_and_literals() {
        let a = extract_template("SELECT ?a WHERE { ?a wdt:P361 wd:Q1 }").unwrap();
        let b = extract_template("SELECT ?z WHERE { ?z wdt:P17 wd:Q90 }").unwrap();
        assert_eq!(a.canonical_text, "SELECT ?v0 WHERE { ?v0 <REL_0> <ENT_0> }");
        assert_eq!(a, b);
        assert_eq!(a.form, QueryForm::Select);
        assert_eq!(a.placeholder_count, 2);
    }

    #[test]
    fn template_literals_and_keywords() {
        let t = extract_template(
            "select distinct ?x where { ?x wdt:P31 wd:Q5 . ?x wdt:P569 ?d . \
             filter(contains(lcase(?l), 'yuan') && ?d > '1900-01-01'^^xsd:dateTime) } limit 5",
        )
        .unwrap();
        assert_eq!(
            t.canonical_text,
            "SELECT DISTINCT ?v0 WHERE { ?v0 <REL_0> <CLS_0> . ?v0 <REL_1> ?v1 . \
             FILTER ( CONTAINS ( LCASE ( ?v2 ) , <LIT:string> ) && ?v1 > <LIT:dateTime> ) } LIMIT <LIT:integer>"
        );
    }

    #[test]
    fn template_reuses_indices_for_repeated_uris() {
        let t = extract_template("ASK { wd:Q5 wdt:P31 wd:Q5 }").unwrap();
        assert_eq!(t.form, QueryForm::Ask);
        // Q5 is the object of P31, so it is a class in both positions
        assert_eq!(t.canonical_text, "ASK { <CLS_0> <REL_0> <CLS_0> }");
    }

    #[test]
    fn template_is_idempotent() {
        let q = "SELECT (COUNT(?obj) AS ?value) { wd:Q1 p:P39 ?s . ?s ps:P39 ?obj . ?s pq:P580 ?t . FILTER(YEAR(?t) = 1996) }";
        let once = extract_template(q).unwrap();
        let twice = extract_template(&once.canonical_text).unwrap();
        assert_eq!(once.canonical_text, twice.canonical_text);
        assert_eq!(once.form, QueryForm::Count);
    }

    #[test]
    fn query_forms() {
        assert_eq!(classify_query_form("SELECT ?x WHERE { }"), QueryForm::Select);
        assert_eq!(classify_query_form("ask { }"), QueryForm::Ask);
        assert_eq!(
            classify_query_form("SELECT (COUNT(?x) AS ?c) WHERE { ?x wdt:P31 wd:Q5 }"),
            QueryForm::Count
        );
        assert_eq!(classify_query_form("DESCRIBE wd:Q5"), QueryForm::Other);
        assert_eq!(classify_query_form("nonsense"), QueryForm::Other);
        assert_eq!(classify_query_form("SELECT (COUNT(?x WHERE {"), QueryForm::Count);
    }

    #[test]
    fn query_lengths() {
        // SELECT ?x WHERE { ?x wdt:P31 wd:Q5 } has eight whitespace tokens
        assert_eq!(query_length("SELECT ?x WHERE { ?x wdt:P31 wd:Q5 }"), 8);
        assert_eq!(query_length(""), 0);
        assert_eq!(query_length("   SELECT  "), 1);
        assert_eq!(query_length("a\tb\n c"), 3);
    }

    #[test]
    fn projection_variables() {
        assert_eq!(select_variables("SELECT ?a ?b WHERE { ?a ?p ?b }").unwrap(), vec!["a", "b"]);
        assert_eq!(
            select_variables("SELECT * WHERE { ?x wdt:P31 ?y }").unwrap(),
            vec!["x", "y"]
        );
        assert_eq!(
            select_variables("SELECT (COUNT(?x) AS ?c) WHERE { ?x wdt:P31 wd:Q5 }").unwrap(),
            vec!["c"]
        );
        assert_eq!(
            select_variables("SELECT DISTINCT ?answer WHERE { wd:Q1 wdt:P2 ?answer }").unwrap(),
            vec!["answer"]
        );
        assert!(matches!(
            select_variables("ASK { wd:Q1 wdt:P31 wd:Q5 }"),
            Err(SelectError::NotSelect(QueryForm::Ask))
        ));
    }
}
