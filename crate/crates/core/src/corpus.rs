//! World-building corpus: Event, Inhabitant and Thing fragments that ground
//! the NPC's knowledge of its world.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    Event,
    Inhabitant,
    Thing,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Event, Category::Inhabitant, Category::Thing];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Event => "Event",
            Category::Inhabitant => "Inhabitant",
            Category::Thing => "Thing",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or(())
    }
}

/// Whitespace-delimited token count.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    pub category: Category,
    pub title: String,
    pub body: String,
    pub word_count: usize,
    pub tags: BTreeSet<String>,
}

impl CorpusEntry {
    pub fn new(
        id: impl Into<String>,
        category: Category,
        title: impl Into<String>,
        body: impl Into<String>,
        tags: impl IntoIterator<Item = impl Into<String>>,
    ) -> Self {
        let body = body.into();
        Self {
            id: id.into(),
            category,
            title: title.into(),
            word_count: word_count(&body),
            body,
            tags: tags.into_iter().map(Into::into).collect(),
        }
    }

    pub fn has_any_tag(&self, tags: &BTreeSet<String>) -> bool {
        self.tags.iter().any(|t| tags.contains(t))
    }
}

/// An entry as read from a document, before validation.
///
/// `category` is kept as the raw string so an unknown value can be reported
/// against the entry id rather than as a generic parse failure.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EntryDraft {
    pub id: String,
    pub category: String,
    pub title: String,
    pub body: String,
    #[serde(default)]
    pub tags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word_count: Option<usize>,
}

impl From<&CorpusEntry> for EntryDraft {
    fn from(e: &CorpusEntry) -> Self {
        Self {
            id: e.id.clone(),
            category: e.category.as_str().to_string(),
            title: e.title.clone(),
            body: e.body.clone(),
            tags: e.tags.iter().cloned().collect(),
            word_count: Some(e.word_count),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CorpusError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("no entries")]
    NoEntries,
    #[error("entry #{index} has an empty id")]
    EmptyId { index: usize },
    #[error("entry {id}: unknown category {category:?}")]
    UnknownCategory { id: String, category: String },
    #[error("duplicate entry id {0}")]
    DuplicateId(String),
    #[error("entry {id}: declared word_count {declared} but body has {actual} words")]
    WordCountMismatch {
        id: String,
        declared: usize,
        actual: usize,
    },
}

/// Immutable after construction; share freely between sessions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WorldCorpus {
    entries: Vec<CorpusEntry>,
    total_words: usize,
    per_category_counts: BTreeMap<Category, usize>,
}

impl WorldCorpus {
    pub fn from_drafts(drafts: Vec<EntryDraft>) -> Result<Self, CorpusError> {
        let mut entries = Vec::with_capacity(drafts.len());
        for (index, d) in drafts.into_iter().enumerate() {
            if d.id.trim().is_empty() {
                return Err(CorpusError::EmptyId { index });
            }
            let category = d
                .category
                .parse::<Category>()
                .map_err(|_| CorpusError::UnknownCategory {
                    id: d.id.clone(),
                    category: d.category.clone(),
                })?;
            let entry = CorpusEntry::new(d.id, category, d.title, d.body, d.tags);
            if let Some(declared) = d.word_count {
                if declared != entry.word_count {
                    return Err(CorpusError::WordCountMismatch {
                        id: entry.id,
                        declared,
                        actual: entry.word_count,
                    });
                }
            }
            entries.push(entry);
        }
        Self::new(entries)
    }

    pub fn new(entries: Vec<CorpusEntry>) -> Result<Self, CorpusError> {
        if entries.is_empty() {
            return Err(CorpusError::NoEntries);
        }
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.id.as_str()) {
                return Err(CorpusError::DuplicateId(e.id.clone()));
            }
        }
        let mut per_category_counts: BTreeMap<Category, usize> =
            Category::ALL.into_iter().map(|c| (c, 0)).collect();
        let mut total_words = 0;
        for e in &entries {
            *per_category_counts.entry(e.category).or_default() += 1;
            total_words += e.word_count;
        }
        Ok(Self {
            entries,
            total_words,
            per_category_counts,
        })
    }

    pub fn entries(&self) -> &[CorpusEntry] {
        &self.entries
    }

    pub fn total_words(&self) -> usize {
        self.total_words
    }

    pub fn count(&self, category: Category) -> usize {
        self.per_category_counts.get(&category).copied().unwrap_or(0)
    }

    pub fn per_category_counts(&self) -> &BTreeMap<Category, usize> {
        &self.per_category_counts
    }

    pub fn get(&self, id: &str) -> Option<&CorpusEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn drafts(&self) -> Vec<EntryDraft> {
        self.entries.iter().map(EntryDraft::from).collect()
    }

    /// Checks the corpus against authoring thresholds. Never fails; an empty
    /// report means the corpus is compliant.
    pub fn validate(&self, policy: &CorpusPolicy) -> ValidationReport {
        let mut violations = Vec::new();
        if self.total_words < policy.min_words {
            violations.push(Violation::TooFewWords {
                total: self.total_words,
                min: policy.min_words,
            });
        }
        for category in Category::ALL {
            let count = self.count(category);
            if count < policy.min_per_category {
                violations.push(Violation::TooFewEntries {
                    category,
                    count,
                    min: policy.min_per_category,
                });
            }
        }
        ValidationReport { violations }
    }

    /// Entries tagged with any of `level_tags`, in corpus order, taken while
    /// the running word total stays within `word_budget`. Stops at the first
    /// entry that would overflow.
    pub fn select_story_context(
        &self,
        level_tags: &BTreeSet<String>,
        word_budget: usize,
    ) -> Vec<&CorpusEntry> {
        let mut used = 0;
        let mut out = Vec::new();
        for e in self.entries.iter().filter(|e| e.has_any_tag(level_tags)) {
            if used + e.word_count > word_budget {
                break;
            }
            used += e.word_count;
            out.push(e);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusPolicy {
    pub min_words: usize,
    pub min_per_category: usize,
}

impl Default for CorpusPolicy {
    fn default() -> Self {
        Self {
            min_words: 8000,
            min_per_category: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Violation {
    TooFewWords {
        total: usize,
        min: usize,
    },
    TooFewEntries {
        category: Category,
        count: usize,
        min: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::TooFewWords { total, min } => write!(f, "total words {total} < {min}"),
            Violation::TooFewEntries {
                category,
                count,
                min,
            } => write!(f, "category {category} has {count} entries < {min}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_compliant(&self) -> bool {
        self.violations.is_empty()
    }
}
