//! ICD code registry with description, synonym and hierarchy knowledge.
//!
//! The registry is parsed from a tab-separated table with the header
//! `code\tdescription\tsynonyms\tparent`. Synonyms are pipe-separated and an
//! empty parent cell means the parent is derived by dropping one trailing
//! character from the normalized code. Parents that are not themselves rows
//! in the file become virtual category nodes.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::code::{CodeError, CodeId};

pub const TAXONOMY_HEADER: [&str; 4] = ["code", "description", "synonyms", "parent"];

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("taxonomy is empty")]
    Empty,
    #[error("line {line}: expected header `code\\tdescription\\tsynonyms\\tparent`")]
    BadHeader { line: usize },
    #[error("line {line}: expected 4 tab-separated columns, found {found}")]
    ColumnCount { line: usize, found: usize },
    #[error("line {line}: {source}")]
    InvalidCode {
        line: usize,
        #[source]
        source: CodeError,
    },
    #[error("line {line}: code {code} has an empty description")]
    EmptyDescription { line: usize, code: CodeId },
    #[error("line {line}: code {code} already defined on line {first}")]
    DuplicateDefinition {
        line: usize,
        first: usize,
        code: CodeId,
    },
    #[error("parent chain of {code} is cyclic")]
    CyclicHierarchy { code: CodeId },
    #[error("code {0} not found in taxonomy")]
    NotFound(CodeId),
}

/// The three knowledge forms for one code: description, synonyms and
/// its position in the hierarchy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KnowledgeCard {
    pub code: CodeId,
    pub description: String,
    pub synonyms: Vec<String>,
    pub parent: Option<CodeId>,
    /// Set when `parent` has no row of its own in the taxonomy file.
    pub parent_is_virtual: bool,
    pub siblings: Vec<CodeId>,
    pub chapter: String,
}

impl KnowledgeCard {
    /// Card for a code that the taxonomy does not define.
    pub fn empty(code: &CodeId) -> Self {
        Self {
            code: code.clone(),
            description: String::new(),
            synonyms: Vec::new(),
            parent: code.truncated_parent(),
            parent_is_virtual: true,
            siblings: Vec::new(),
            chapter: code.chapter(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Taxonomy {
    cards: BTreeMap<CodeId, KnowledgeCard>,
    chapters: BTreeMap<String, BTreeSet<CodeId>>,
    virtual_nodes: BTreeSet<CodeId>,
}

struct Row {
    code: CodeId,
    description: String,
    synonyms: Vec<String>,
    parent: Option<CodeId>,
}

impl Taxonomy {
    pub fn parse(source: &str) -> Result<Self, TaxonomyError> {
        let mut lines = source
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
            .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));

        let Some((header_line, header)) = lines.next() else {
            return Err(TaxonomyError::Empty);
        };
        let cols: Vec<_> = header.split('\t').map(|c| c.trim().to_ascii_lowercase()).collect();
        if cols != TAXONOMY_HEADER {
            return Err(TaxonomyError::BadHeader { line: header_line });
        }

        let mut rows: Vec<Row> = Vec::new();
        let mut seen: BTreeMap<CodeId, usize> = BTreeMap::new();
        for (line, text) in lines {
            let cols: Vec<&str> = text.split('\t').collect();
            if cols.len() != 4 {
                return Err(TaxonomyError::ColumnCount {
                    line,
                    found: cols.len(),
                });
            }
            let code = CodeId::parse(cols[0]).map_err(|source| TaxonomyError::InvalidCode { line, source })?;
            if let Some(&first) = seen.get(&code) {
                return Err(TaxonomyError::DuplicateDefinition { line, first, code });
            }
            let description = cols[1].trim().to_string();
            if description.is_empty() {
                return Err(TaxonomyError::EmptyDescription { line, code });
            }
            let synonyms = cols[2]
                .split('|')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect();
            let parent = match cols[3].trim() {
                "" => None,
                p => Some(CodeId::parse(p).map_err(|source| TaxonomyError::InvalidCode { line, source })?),
            };
            seen.insert(code.clone(), line);
            rows.push(Row {
                code,
                description,
                synonyms,
                parent,
            });
        }
        if rows.is_empty() {
            return Err(TaxonomyError::Empty);
        }
        Self::from_rows(rows)
    }

    fn from_rows(rows: Vec<Row>) -> Result<Self, TaxonomyError> {
        let mut cards = BTreeMap::new();
        for row in rows {
            let parent = row.parent.or_else(|| row.code.truncated_parent());
            let chapter = row.code.chapter();
            cards.insert(
                row.code.clone(),
                KnowledgeCard {
                    code: row.code,
                    description: row.description,
                    synonyms: row.synonyms,
                    parent,
                    parent_is_virtual: false,
                    siblings: Vec::new(),
                    chapter,
                },
            );
        }

        let mut tax = Taxonomy {
            cards,
            chapters: BTreeMap::new(),
            virtual_nodes: BTreeSet::new(),
        };

        // Virtual nodes: every ancestor reachable from a card that has no row.
        let codes: Vec<CodeId> = tax.cards.keys().cloned().collect();
        for code in &codes {
            let mut visited = BTreeSet::new();
            let mut cur = tax.parent_any(code);
            visited.insert(code.clone());
            while let Some(p) = cur {
                if !visited.insert(p.clone()) {
                    return Err(TaxonomyError::CyclicHierarchy { code: code.clone() });
                }
                if !tax.cards.contains_key(&p) {
                    tax.virtual_nodes.insert(p.clone());
                }
                cur = tax.parent_any(&p);
            }
        }

        let mut children: BTreeMap<CodeId, BTreeSet<CodeId>> = BTreeMap::new();
        for card in tax.cards.values() {
            if let Some(p) = &card.parent {
                children.entry(p.clone()).or_default().insert(card.code.clone());
            }
            tax.chapters
                .entry(card.chapter.clone())
                .or_default()
                .insert(card.code.clone());
        }
        let virtual_nodes = tax.virtual_nodes.clone();
        for card in tax.cards.values_mut() {
            if let Some(p) = &card.parent {
                card.parent_is_virtual = virtual_nodes.contains(p);
                card.siblings = children[p].iter().filter(|c| **c != card.code).cloned().collect();
            }
        }
        Ok(tax)
    }

    /// Parent of any code, defined or not: the card's parent when the code
    /// has a row, otherwise the truncation parent.
    fn parent_any(&self, code: &CodeId) -> Option<CodeId> {
        match self.cards.get(code) {
            Some(card) => card.parent.clone(),
            None => code.truncated_parent(),
        }
    }

    fn card(&self, code: &CodeId) -> Result<&KnowledgeCard, TaxonomyError> {
        self.cards.get(code).ok_or_else(|| TaxonomyError::NotFound(code.clone()))
    }

    pub fn contains(&self, code: &CodeId) -> bool {
        self.cards.contains_key(code)
    }

    pub fn is_virtual(&self, code: &CodeId) -> bool {
        self.virtual_nodes.contains(code)
    }

    pub fn len(&self) -> usize {
        self.cards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cards.is_empty()
    }

    /// Defined codes in sorted order.
    pub fn codes(&self) -> impl Iterator<Item = &CodeId> {
        self.cards.keys()
    }

    pub fn cards(&self) -> impl Iterator<Item = &KnowledgeCard> {
        self.cards.values()
    }

    pub fn chapters(&self) -> &BTreeMap<String, BTreeSet<CodeId>> {
        &self.chapters
    }

    pub fn virtual_nodes(&self) -> &BTreeSet<CodeId> {
        &self.virtual_nodes
    }

    pub fn parent_of(&self, code: &CodeId) -> Result<Option<CodeId>, TaxonomyError> {
        Ok(self.card(code)?.parent.clone())
    }

    /// Codes sharing `code`'s parent, excluding `code`, sorted.
    pub fn siblings_of(&self, code: &CodeId) -> Result<Vec<CodeId>, TaxonomyError> {
        Ok(self.card(code)?.siblings.clone())
    }

    pub fn knowledge_of(&self, code: &CodeId) -> Result<KnowledgeCard, TaxonomyError> {
        self.card(code).cloned()
    }

    pub fn chapter_of(&self, code: &CodeId) -> Result<String, TaxonomyError> {
        Ok(self.card(code)?.chapter.clone())
    }

    /// The card for `code`, or an empty card when the taxonomy lacks it.
    pub fn knowledge_or_empty(&self, code: &CodeId) -> KnowledgeCard {
        self.cards
            .get(code)
            .cloned()
            .unwrap_or_else(|| KnowledgeCard::empty(code))
    }

    /// Ancestor chain of any code (defined, virtual or unknown), nearest first.
    pub fn ancestors(&self, code: &CodeId) -> Vec<CodeId> {
        let mut out = Vec::new();
        let mut cur = self.parent_any(code);
        while let Some(p) = cur {
            if out.contains(&p) || p == *code {
                break;
            }
            cur = self.parent_any(&p);
            out.push(p);
        }
        out
    }

    /// Parent of the parent, if both exist.
    pub fn grandparent_of(&self, code: &CodeId) -> Option<CodeId> {
        self.parent_any(code).and_then(|p| self.parent_any(&p))
    }

    pub fn is_descendant_of(&self, code: &CodeId, ancestor: &CodeId) -> bool {
        self.ancestors(code).iter().any(|a| a == ancestor)
    }
}
