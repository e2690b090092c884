use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum UriError {
    #[error("invalid Wikidata URI `{0}`")]
    Invalid(String),
    #[error("unknown prefix in `{0}`")]
    UnknownPrefix(String),
}

/// The Wikidata namespaces that carry entity or property identifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Namespace {
    /// `wd:` entity namespace
    Entity,
    /// `wdt:` truthy statements
    Direct,
    /// `p:` statement nodes
    Prop,
    /// `ps:` statement values
    Statement,
    /// `pq:` qualifiers
    Qualifier,
}

impl Namespace {
    pub const ALL: [Namespace; 5] = [
        Namespace::Entity,
        Namespace::Direct,
        Namespace::Prop,
        Namespace::Statement,
        Namespace::Qualifier,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            Namespace::Entity => "wd",
            Namespace::Direct => "wdt",
            Namespace::Prop => "p",
            Namespace::Statement => "ps",
            Namespace::Qualifier => "pq",
        }
    }

    pub fn iri(self) -> &'static str {
        match self {
            Namespace::Entity => "http://www.wikidata.org/entity/",
            Namespace::Direct => "http://www.wikidata.org/prop/direct/",
            Namespace::Prop => "http://www.wikidata.org/prop/",
            Namespace::Statement => "http://www.wikidata.org/prop/statement/",
            Namespace::Qualifier => "http://www.wikidata.org/prop/qualifier/",
        }
    }

    pub fn is_relation(self) -> bool {
        !matches!(self, Namespace::Entity)
    }

    fn from_iri(iri: &str) -> Option<Namespace> {
        Namespace::ALL.into_iter().find(|ns| ns.iri() == iri)
    }
}

/// A Wikidata identifier qualified by its namespace, e.g. `wdt:P31`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WikidataUri {
    pub namespace: Namespace,
    pub id: String,
}

pub(crate) fn is_wikidata_id(id: &str) -> bool {
    let mut chars = id.chars();
    matches!(chars.next(), Some('P' | 'Q' | 'L'))
        && id.len() > 1
        && chars.all(|c| c.is_ascii_digit())
}

impl WikidataUri {
    pub fn new(namespace: Namespace, id: &str) -> Result<Self, UriError> {
        if !is_wikidata_id(id) {
            return Err(UriError::Invalid(format!("{}:{id}", namespace.prefix())));
        }
        Ok(Self {
            namespace,
            id: id.to_string(),
        })
    }

    /// Parses a prefixed name, an absolute IRI (bracketed or not), or a bare
    /// `P`/`Q` id. Bare property ids land in `wdt:`, bare items in `wd:`.
    pub fn parse(raw: &str) -> Result<Self, UriError> {
        Self::parse_with(raw, &PrefixTable::default())
    }

    pub fn parse_with(raw: &str, prefixes: &PrefixTable) -> Result<Self, UriError> {
        let s = raw.trim();
        let s = s
            .strip_prefix('<')
            .and_then(|r| r.strip_suffix('>'))
            .unwrap_or(s);
        if is_wikidata_id(s) {
            let ns = if s.starts_with('P') {
                Namespace::Direct
            } else {
                Namespace::Entity
            };
            return Self::new(ns, s);
        }
        if s.starts_with("http://") || s.starts_with("https://") {
            let s = s.replacen("https://", "http://", 1);
            let cut = s.rfind('/').ok_or_else(|| UriError::Invalid(raw.to_string()))?;
            let ns = Namespace::from_iri(&s[..=cut])
                .ok_or_else(|| UriError::Invalid(raw.to_string()))?;
            return Self::new(ns, &s[cut + 1..]).map_err(|_| UriError::Invalid(raw.to_string()));
        }
        let (prefix, local) = s
            .split_once(':')
            .ok_or_else(|| UriError::Invalid(raw.to_string()))?;
        let ns_iri = prefixes
            .resolve(prefix)
            .ok_or_else(|| UriError::UnknownPrefix(raw.to_string()))?;
        let ns = Namespace::from_iri(ns_iri).ok_or_else(|| UriError::Invalid(raw.to_string()))?;
        Self::new(ns, local).map_err(|_| UriError::Invalid(raw.to_string()))
    }

    pub fn prefixed(&self) -> String {
        format!("{}:{}", self.namespace.prefix(), self.id)
    }

    pub fn iri(&self) -> String {
        format!("{}{}", self.namespace.iri(), self.id)
    }

    /// The IRI of the underlying entity, independent of which property
    /// namespace referenced it.
    pub fn entity_iri(&self) -> String {
        format!("{}{}", Namespace::Entity.iri(), self.id)
    }

    pub fn is_property(&self) -> bool {
        self.id.starts_with('P')
    }
}

impl fmt::Display for WikidataUri {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.namespace.prefix(), self.id)
    }
}

impl Serialize for WikidataUri {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.prefixed())
    }
}

impl<'de> Deserialize<'de> for WikidataUri {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        WikidataUri::parse(&raw).map_err(serde::de::Error::custom)
    }
}

/// Prefix → namespace IRI table. The built-ins cover the Wikidata prefixes
/// plus `rdfs`; queries may add their own via `PREFIX` declarations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefixTable {
    map: BTreeMap<String, String>,
}

impl Default for PrefixTable {
    fn default() -> Self {
        let mut map: BTreeMap<String, String> = Namespace::ALL
            .iter()
            .map(|ns| (ns.prefix().to_string(), ns.iri().to_string()))
            .collect();
        map.insert(
            "rdfs".into(),
            "http://www.w3.org/2000/01/rdf-schema#".into(),
        );
        Self { map }
    }
}

impl PrefixTable {
    pub fn insert(&mut self, prefix: &str, iri: &str) {
        self.map.insert(prefix.to_string(), iri.to_string());
    }

    pub fn resolve(&self, prefix: &str) -> Option<&str> {
        self.map.get(prefix).map(String::as_str)
    }
}
