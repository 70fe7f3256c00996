//! Multi-label note corpus with frequency, inverted and co-occurrence indexes.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::code::CodeId;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate note id {id:?}")]
    DuplicateNote { id: String },
    #[error("note {id:?}: {reason}")]
    InvalidNote { id: String, reason: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    #[default]
    Real,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Note {
    pub id: String,
    pub text: String,
    pub codes: BTreeSet<CodeId>,
    #[serde(default)]
    pub origin: Origin,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<CodeId>,
}

impl Note {
    pub fn real(id: impl Into<String>, text: impl Into<String>, codes: impl IntoIterator<Item = CodeId>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            codes: codes.into_iter().collect(),
            origin: Origin::Real,
            anchor: None,
        }
    }

    fn validate(&self) -> Result<(), CorpusError> {
        let invalid = |reason| CorpusError::InvalidNote {
            id: self.id.clone(),
            reason,
        };
        if self.codes.is_empty() {
            return Err(invalid("empty code list"));
        }
        match (self.origin, &self.anchor) {
            (Origin::Synthetic, None) => Err(invalid("synthetic note without anchor")),
            (Origin::Synthetic, Some(a)) if !self.codes.contains(a) => {
                Err(invalid("anchor is not one of the note's codes"))
            }
            (Origin::Real, Some(_)) => Err(invalid("real note carries an anchor")),
            _ => Ok(()),
        }
    }
}

/// Wire form of a note line; `codes` is a list so duplicates can be reported.
#[derive(Deserialize)]
struct NoteRecord {
    id: String,
    text: String,
    codes: Vec<CodeId>,
    #[serde(default)]
    origin: Origin,
    #[serde(default)]
    anchor: Option<CodeId>,
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    notes: Vec<Note>,
    by_id: HashMap<String, usize>,
    freq: BTreeMap<CodeId, usize>,
    inverted: BTreeMap<CodeId, Vec<usize>>,
    cooc: BTreeMap<CodeId, BTreeMap<CodeId, usize>>,
    warnings: Vec<String>,
}

impl Corpus {
    /// Load a JSONL corpus. Blank lines are skipped; line numbers in errors
    /// are 1-based.
    pub fn from_jsonl(source: &str) -> Result<Self, CorpusError> {
        let mut notes = Vec::new();
        let mut warnings = Vec::new();
        for (i, line) in source.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: NoteRecord = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            let total = record.codes.len();
            let codes: BTreeSet<CodeId> = record.codes.into_iter().collect();
            if codes.len() != total {
                let msg = format!(
                    "line {}: note {:?} lists {} duplicate code(s); loaded as a set",
                    i + 1,
                    record.id,
                    total - codes.len()
                );
                log::warn!("{msg}");
                warnings.push(msg);
            }
            notes.push(Note {
                id: record.id,
                text: record.text,
                codes,
                origin: record.origin,
                anchor: record.anchor,
            });
        }
        let mut corpus = Self::from_notes(notes)?;
        corpus.warnings = warnings;
        Ok(corpus)
    }

    pub fn from_notes(notes: Vec<Note>) -> Result<Self, CorpusError> {
        let mut corpus = Corpus::default();
        for note in notes {
            corpus.push(note)?;
        }
        Ok(corpus)
    }

    fn push(&mut self, note: Note) -> Result<(), CorpusError> {
        note.validate()?;
        if self.by_id.contains_key(&note.id) {
            return Err(CorpusError::DuplicateNote { id: note.id });
        }
        let idx = self.notes.len();
        self.by_id.insert(note.id.clone(), idx);
        for code in &note.codes {
            *self.freq.entry(code.clone()).or_default() += 1;
            self.inverted.entry(code.clone()).or_default().push(idx);
        }
        let codes: Vec<&CodeId> = note.codes.iter().collect();
        for (i, a) in codes.iter().enumerate() {
            for b in &codes[i + 1..] {
                *self.cooc.entry((*a).clone()).or_default().entry((*b).clone()).or_default() += 1;
                *self.cooc.entry((*b).clone()).or_default().entry((*a).clone()).or_default() += 1;
            }
        }
        self.notes.push(note);
        Ok(())
    }

    /// Extended corpus: these notes followed by `synthetic`, indexes rebuilt.
    pub fn merge(&self, synthetic: Vec<Note>) -> Result<Self, CorpusError> {
        let mut merged = self.clone();
        for note in synthetic {
            merged.push(note)?;
        }
        Ok(merged)
    }

    pub fn notes(&self) -> &[Note] {
        &self.notes
    }

    pub fn len(&self) -> usize {
        self.notes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }

    pub fn note(&self, id: &str) -> Option<&Note> {
        self.by_id.get(id).map(|&i| &self.notes[i])
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Occurrence count of `code` (0 for unseen codes).
    pub fn freq(&self, code: &CodeId) -> usize {
        self.freq.get(code).copied().unwrap_or(0)
    }

    pub fn frequencies(&self) -> &BTreeMap<CodeId, usize> {
        &self.freq
    }

    /// Notes containing `code`, in insertion order.
    pub fn notes_with(&self, code: &CodeId) -> impl Iterator<Item = &Note> {
        self.inverted
            .get(code)
            .into_iter()
            .flatten()
            .map(|&i| &self.notes[i])
    }

    /// Positions in [`Corpus::notes`] of notes containing `code`, ascending.
    pub fn note_indices(&self, code: &CodeId) -> &[usize] {
        self.inverted.get(code).map_or(&[], Vec::as_slice)
    }

    /// Ids of notes containing `code`, in insertion order.
    pub fn notes_containing(&self, code: &CodeId) -> Vec<&str> {
        self.notes_with(code).map(|n| n.id.as_str()).collect()
    }

    /// Joint count of an unordered pair; 0 for `a == b`.
    pub fn cooc(&self, a: &CodeId, b: &CodeId) -> usize {
        if a == b {
            return 0;
        }
        self.cooc.get(a).and_then(|m| m.get(b)).copied().unwrap_or(0)
    }

    /// Co-occurrence partners of `code`, sorted by code.
    pub fn partners(&self, code: &CodeId) -> impl Iterator<Item = (&CodeId, usize)> {
        self.cooc.get(code).into_iter().flatten().map(|(c, &n)| (c, n))
    }

    /// Top-`k` partners by joint count, ties broken by code.
    pub fn cooccurrence_top(&self, code: &CodeId, k: usize) -> Vec<(CodeId, usize)> {
        let mut ranked: Vec<(CodeId, usize)> = self.partners(code).map(|(c, n)| (c.clone(), n)).collect();
        // partners() is already code-ordered, so a stable sort keeps the tie-break.
        ranked.sort_by(|a, b| b.1.cmp(&a.1));
        ranked.truncate(k);
        ranked
    }

    /// Serialize notes back to JSONL, one note per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for note in &self.notes {
            out.push_str(&serde_json::to_string(note).expect("note serializes"));
            out.push('\n');
        }
        out
    }
}
