use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound on the entity inventory.
pub const MAX_ENTITIES: usize = 160;
pub const DEFAULT_DOMAINS: usize = 5;

/// A set of entity surface strings, iterated in sorted order.
pub type EntitySet = BTreeSet<String>;

/// Closed entity inventory. Class index `k` is the position of the entity
/// in sorted surface order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityVocabulary {
    names: Vec<String>,
    domains: Vec<usize>,
    index: HashMap<String, usize>,
    domain_count: usize,
    max_len: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    #[serde(default = "default_domains")]
    domains: usize,
    entities: BTreeMap<String, usize>,
}

fn default_domains() -> usize {
    DEFAULT_DOMAINS
}

impl EntityVocabulary {
    pub fn new(entries: BTreeMap<String, usize>, domain_count: usize) -> Result<Self> {
        if domain_count == 0 || domain_count > DEFAULT_DOMAINS {
            return Err(Error::InvalidVocabulary(format!(
                "domain count {domain_count} outside 1..={DEFAULT_DOMAINS}"
            )));
        }
        if entries.len() > MAX_ENTITIES {
            return Err(Error::InvalidVocabulary(format!(
                "{} entities exceed the limit of {MAX_ENTITIES}",
                entries.len()
            )));
        }
        let mut names = Vec::with_capacity(entries.len());
        let mut domains = Vec::with_capacity(entries.len());
        for (name, domain) in entries {
            if name.is_empty() {
                return Err(Error::InvalidVocabulary("empty entity string".into()));
            }
            if domain >= domain_count {
                return Err(Error::InvalidVocabulary(format!(
                    "entity {name:?} has domain {domain}, expected < {domain_count}"
                )));
            }
            names.push(name);
            domains.push(domain);
        }
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        let max_len = names.iter().map(|n| n.chars().count()).max().unwrap_or(0);
        Ok(EntityVocabulary {
            names,
            domains,
            index,
            domain_count,
            max_len,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn domain_count(&self) -> usize {
        self.domain_count
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, k: usize) -> &str {
        &self.names[k]
    }

    pub fn domain(&self, k: usize) -> usize {
        self.domains[k]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Length in characters of the longest entity string.
    pub fn max_entity_chars(&self) -> usize {
        self.max_len
    }

    /// Multi-hot vector over the vocabulary. Unknown names are an error.
    pub fn multi_hot<'a>(&self, names: impl IntoIterator<Item = &'a String>) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.len()];
        for n in names {
            let k = self
                .index_of(n)
                .ok_or_else(|| Error::UnknownEntity(n.clone()))?;
            out[k] = 1.0;
        }
        Ok(out)
    }

    /// Multi-hot vector over domain ids.
    pub fn domain_multi_hot<'a>(
        &self,
        names: impl IntoIterator<Item = &'a String>,
    ) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.domain_count];
        for n in names {
            let k = self
                .index_of(n)
                .ok_or_else(|| Error::UnknownEntity(n.clone()))?;
            out[self.domains[k]] = 1.0;
        }
        Ok(out)
    }

    pub fn to_map(&self) -> BTreeMap<String, usize> {
        self.names
            .iter()
            .cloned()
            .zip(self.domains.iter().copied())
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let json = serde_json::to_string_pretty(&VocabFile {
            domains: self.domain_count,
            entities: self.to_map(),
        })?;
        Ok(json + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(text)?;
        Self::new(file.entities, file.domains)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
