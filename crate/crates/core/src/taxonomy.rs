//! Two-level biological hierarchy (genus -> class) with the dataset
//! rebalancing rules: rare genera merge into "else", classes outside the five
//! named ones fall back to "Others".

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

/// Catch-all genus for rare taxa.
pub const ELSE_GENUS: &str = "else";
/// Catch-all class; always one of the six class names.
pub const OTHERS_CLASS: &str = "Others";
/// Exact number of biological classes (five named plus "Others").
pub const NUM_CLASSES: usize = 6;

/// Immutable genus -> class map over an ordered genus set and exactly six
/// classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Taxonomy {
    genera: Vec<String>,
    classes: Vec<String>,
    class_of: Vec<usize>, // per genus, index into classes
}

impl Taxonomy {
    /// Build from an ordered class list and (genus, declared class) pairs.
    ///
    /// A genus declared with a class outside the listed six maps to "Others".
    pub fn new(classes: Vec<String>, genus_class_pairs: Vec<(String, String)>) -> Result<Self> {
        if classes.len() != NUM_CLASSES {
            return Err(Error::Config(format!(
                "taxonomy needs exactly {NUM_CLASSES} classes, got {}",
                classes.len()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &classes {
            if c.is_empty() {
                return Err(Error::Config("empty class name".into()));
            }
            if !seen.insert(c.clone()) {
                return Err(Error::Config(format!("duplicate class name {c:?}")));
            }
        }
        let others_idx = classes
            .iter()
            .position(|c| c == OTHERS_CLASS)
            .ok_or_else(|| Error::Config(format!("class list must include {OTHERS_CLASS:?}")))?;

        let mut genera = Vec::with_capacity(genus_class_pairs.len());
        let mut class_of = Vec::with_capacity(genus_class_pairs.len());
        let mut genus_seen = std::collections::BTreeSet::new();
        for (genus, class) in genus_class_pairs {
            if genus.is_empty() {
                return Err(Error::Config("empty genus name".into()));
            }
            if !genus_seen.insert(genus.clone()) {
                return Err(Error::Config(format!("duplicate genus {genus:?}")));
            }
            let idx = classes.iter().position(|c| *c == class).unwrap_or(others_idx);
            genera.push(genus);
            class_of.push(idx);
        }
        if !genera.iter().any(|g| g == ELSE_GENUS) {
            return Err(Error::Config(format!(
                "taxonomy must contain the {ELSE_GENUS:?} genus"
            )));
        }
        Ok(Taxonomy { genera, classes, class_of })
    }

    pub fn genera(&self) -> &[String] {
        &self.genera
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn num_genera(&self) -> usize {
        self.genera.len()
    }

    pub fn genus_index(&self, genus: &str) -> Option<usize> {
        self.genera.iter().position(|g| g == genus)
    }

    pub fn class_index(&self, class: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == class)
    }

    pub fn contains_genus(&self, genus: &str) -> bool {
        self.genus_index(genus).is_some()
    }

    /// The unique class of a genus.
    pub fn genus_to_class(&self, genus: &str) -> Result<&str> {
        let idx = self
            .genus_index(genus)
            .ok_or_else(|| Error::Lookup(format!("unknown genus {genus:?}")))?;
        Ok(&self.classes[self.class_of[idx]])
    }

    /// Class index of a genus given by index; panics on out-of-range.
    pub fn class_index_of_genus(&self, genus_idx: usize) -> usize {
        self.class_of[genus_idx]
    }

    /// Map genus labels to class labels, preserving length and order.
    /// Fails atomically on the first unknown genus.
    pub fn roll_up_labels(&self, genus_labels: &[String]) -> Result<Vec<String>> {
        genus_labels
            .iter()
            .map(|g| self.genus_to_class(g).map(str::to_owned))
            .collect()
    }

    /// Canonical sidecar text: class list line, header, then genus rows in
    /// declaration order.
    pub fn to_sidecar(&self) -> String {
        let mut out = format!("#classes={}\n", self.classes.join(","));
        out.push_str("genus,class\n");
        for (g, &ci) in self.genera.iter().zip(&self.class_of) {
            out.push_str(&format!("{},{}\n", g, self.classes[ci]));
        }
        out
    }

    /// Parse the sidecar format written by [`Taxonomy::to_sidecar`].
    pub fn from_sidecar(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Ingestion("empty taxonomy sidecar".into()))?;
        let classes_csv = first
            .strip_prefix("#classes=")
            .ok_or_else(|| Error::Ingestion(format!("taxonomy sidecar must start with #classes=, got {first:?}")))?;
        let classes: Vec<String> = classes_csv.split(',').map(|s| s.trim().to_owned()).collect();
        let header = lines
            .next()
            .ok_or_else(|| Error::Ingestion("taxonomy sidecar missing header".into()))?;
        if header.trim() != "genus,class" {
            return Err(Error::Ingestion(format!(
                "taxonomy sidecar header must be genus,class, got {header:?}"
            )));
        }
        let mut pairs = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (g, c) = line.split_once(',').ok_or_else(|| {
                Error::Ingestion(format!("taxonomy row {} is not genus,class: {line:?}", n + 3))
            })?;
            pairs.push((g.trim().to_owned(), c.trim().to_owned()));
        }
        Taxonomy::new(classes, pairs)
    }

    /// Content fingerprint used to tie checkpoints to the taxonomy they were
    /// trained against.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_sidecar().as_bytes());
        hex_string(&h.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-genus instance counts over a set of annotations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenusCensus {
    pub counts: BTreeMap<String, u64>,
}

impl GenusCensus {
    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts = BTreeMap::new();
        for l in labels {
            *counts.entry(l.to_owned()).or_insert(0) += 1;
        }
        GenusCensus { counts }
    }

    /// Ensure every taxonomy genus has an entry (zero for unobserved).
    pub fn zero_fill(mut self, taxonomy: &Taxonomy) -> Self {
        for g in taxonomy.genera() {
            self.counts.entry(g.clone()).or_insert(0);
        }
        self
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }
}

/// Relabel genera with fewer than `threshold` instances to "else".
///
/// Returns the reduced taxonomy (declaration order preserved) and the total
/// relabel map over the census genera. Comparison is strict: a genus at
/// exactly `threshold` is retained.
pub fn merge_rare_genera(
    census: &GenusCensus,
    taxonomy: &Taxonomy,
    threshold: u64,
) -> Result<(Taxonomy, BTreeMap<String, String>)> {
    for genus in census.counts.keys() {
        if !taxonomy.contains_genus(genus) {
            return Err(Error::Ingestion(format!(
                "census genus {genus:?} unknown to taxonomy"
            )));
        }
    }
    let mut relabel = BTreeMap::new();
    for (genus, &count) in &census.counts {
        let target = if genus == ELSE_GENUS || count >= threshold {
            genus.clone()
        } else {
            ELSE_GENUS.to_owned()
        };
        relabel.insert(genus.clone(), target);
    }
    let retained: Vec<(String, String)> = taxonomy
        .genera()
        .iter()
        .filter(|g| {
            g.as_str() == ELSE_GENUS
                || matches!(census.counts.get(*g), Some(&c) if c >= threshold)
        })
        .map(|g| (g.clone(), taxonomy.genus_to_class(g).unwrap().to_owned()))
        .collect();
    let merged = Taxonomy::new(taxonomy.classes().to_vec(), retained)?;
    Ok((merged, relabel))
}

/// Apply a relabel map to a census, summing merged counts.
pub fn relabel_census(census: &GenusCensus, relabel: &BTreeMap<String, String>) -> GenusCensus {
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for (genus, &count) in &census.counts {
        let target = relabel.get(genus).cloned().unwrap_or_else(|| genus.clone());
        *counts.entry(target).or_insert(0) += count;
    }
    GenusCensus { counts }
}
