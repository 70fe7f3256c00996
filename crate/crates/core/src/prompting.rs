//! Knowledge-injected prompt assembly.
//!
//! A [`PromptBundle`] gathers, for one anchored code set, the definition and
//! synonyms of every code, hierarchy cues for the anchor, co-occurrence cues
//! and excerpts of real notes whose code sets overlap the target set. A
//! [`PromptTemplate`] renders the bundle into text through `{{...}}`
//! placeholders.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchoring::AnchoredCodeSet;
use crate::code::CodeId;
use crate::corpus::{Corpus, Origin};
use crate::taxonomy::Taxonomy;

pub const DEFAULT_TEMPLATE: &str = include_str!("../templates/discharge_summary.txt");
pub const DEFAULT_TEMPLATE_ID: &str = "discharge_summary";

pub const DEFAULT_INSTRUCTIONS: &str = "Write a realistic, de-identified hospital discharge summary of roughly 400 to 700 words for a single adult patient. \
Use the section headings typical of discharge summaries: Chief Complaint, History of Present Illness, Hospital Course, Discharge Diagnoses and Discharge Instructions. \
Explicitly document every diagnosis listed above in clinical language, so that each one is supported by the text. \
Do not mention ICD codes in the note.";

/// Header lines that open each rendered section. Generators and the mock
/// backend locate sections by these.
pub const DEFINITIONS_HEADER: &str = "### Code definitions";
pub const SYNONYMS_HEADER: &str = "### Synonyms";
pub const HIERARCHY_HEADER: &str = "### Hierarchy";
pub const COMORBIDITIES_HEADER: &str = "### Known comorbidities";
pub const EXAMPLES_HEADER: &str = "### Example excerpts";

pub(crate) const NO_DESCRIPTION: &str = "(no description available)";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("unknown template placeholder {{{{{0}}}}}")]
    UnknownPlaceholder(String),
    #[error("template is missing the required {{{{codes}}}} placeholder")]
    MissingCodes,
    #[error("unterminated placeholder at byte {0}")]
    Unterminated(usize),
    #[error("prompt for {anchor} needs {chars} characters even with optional sections removed (limit {limit})")]
    TooLong {
        anchor: CodeId,
        chars: usize,
        limit: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    pub max_excerpts: usize,
    pub excerpt_chars: usize,
    pub max_prompt_chars: usize,
    /// Skip the note the code set was cloned or substituted from.
    pub exclude_source: bool,
    pub max_siblings: usize,
    pub max_comorbidities: usize,
    pub instructions: String,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            max_excerpts: 2,
            excerpt_chars: 1500,
            max_prompt_chars: 8000,
            exclude_source: true,
            max_siblings: 3,
            max_comorbidities: 5,
            instructions: DEFAULT_INSTRUCTIONS.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub codeset: AnchoredCodeSet,
    /// Anchor first, then the remaining codes in order.
    pub definitions: Vec<(CodeId, String)>,
    pub synonyms: Vec<(CodeId, Vec<String>)>,
    pub hierarchy_cues: Vec<String>,
    pub comorbidity_cues: Vec<String>,
    pub example_excerpts: Vec<(String, String)>,
    pub instructions: String,
}

impl PromptBundle {
    /// Codes in prompt order: anchor first.
    pub fn ordered_codes(&self) -> impl Iterator<Item = &CodeId> {
        self.definitions.iter().map(|(c, _)| c)
    }
}

fn describe(taxonomy: &Taxonomy, code: &CodeId) -> String {
    let card = taxonomy.knowledge_or_empty(code);
    if card.description.is_empty() {
        code.to_string()
    } else {
        format!("{code} ({})", card.description)
    }
}

fn truncate_chars(text: &str, max: usize) -> &str {
    match text.char_indices().nth(max) {
        Some((i, _)) => &text[..i],
        None => text,
    }
}

/// The `limit` real notes with the highest Jaccard overlap of code sets
/// with `codes` (ties by note id), as `(id, intersection, union)`. Notes
/// with no overlap are never returned.
pub fn overlapping_notes<'a>(
    corpus: &'a Corpus,
    codes: &[&CodeId],
    exclude: Option<&str>,
    limit: usize,
) -> Vec<(&'a str, usize, usize)> {
    let notes = corpus.notes();
    let mut counts = vec![0usize; notes.len()];
    let mut touched = Vec::new();
    for code in codes {
        for &i in corpus.note_indices(code) {
            if counts[i] == 0 {
                touched.push(i);
            }
            counts[i] += 1;
        }
    }
    let mut ranked: Vec<(&str, usize, usize)> = touched
        .into_iter()
        .map(|i| (&notes[i], counts[i]))
        .filter(|(n, _)| n.origin == Origin::Real && Some(n.id.as_str()) != exclude)
        .map(|(n, inter)| (n.id.as_str(), inter, codes.len() + n.codes.len() - inter))
        .collect();
    // inter_a / union_a vs inter_b / union_b by cross-multiplication.
    let order = |a: &(&str, usize, usize), b: &(&str, usize, usize)| match (b.1 * a.2).cmp(&(a.1 * b.2)) {
        Ordering::Equal => a.0.cmp(b.0),
        o => o,
    };
    if limit < ranked.len() {
        if limit == 0 {
            return Vec::new();
        }
        ranked.select_nth_unstable_by(limit - 1, order);
        ranked.truncate(limit);
    }
    ranked.sort_by(order);
    ranked
}

pub fn build_prompt(cs: &AnchoredCodeSet, taxonomy: &Taxonomy, corpus: &Corpus, cfg: &PromptConfig) -> PromptBundle {
    let anchor = &cs.anchor;
    let ordered: Vec<&CodeId> = std::iter::once(anchor)
        .chain(cs.codes.iter().filter(|c| *c != anchor))
        .collect();

    let mut definitions = Vec::with_capacity(ordered.len());
    let mut synonyms = Vec::new();
    for code in &ordered {
        let card = taxonomy.knowledge_or_empty(code);
        if card.description.is_empty() {
            log::warn!("code {code} has no taxonomy entry; prompting without a definition");
        }
        definitions.push(((*code).clone(), card.description));
        if !card.synonyms.is_empty() {
            synonyms.push(((*code).clone(), card.synonyms));
        }
    }

    let card = taxonomy.knowledge_or_empty(anchor);
    let mut hierarchy_cues = Vec::new();
    if let Some(parent) = &card.parent {
        hierarchy_cues.push(format!("{anchor} belongs to the parent category {}.", describe(taxonomy, parent)));
    }
    let siblings: Vec<String> = card
        .siblings
        .iter()
        .take(cfg.max_siblings)
        .map(|s| describe(taxonomy, s))
        .collect();
    if !siblings.is_empty() {
        hierarchy_cues.push(format!("Related codes under the same parent: {}.", siblings.join("; ")));
    }
    let same_chapter: Vec<String> = ordered[1..]
        .iter()
        .filter(|c| taxonomy.knowledge_or_empty(c).chapter == card.chapter)
        .map(|c| c.to_string())
        .collect();
    if same_chapter.is_empty() {
        hierarchy_cues.push(format!("{anchor} is in ICD chapter {}.", card.chapter));
    } else {
        hierarchy_cues.push(format!(
            "{anchor} shares ICD chapter {} (same organ system) with {}.",
            card.chapter,
            same_chapter.join(", ")
        ));
    }

    // Zero-shot anchors have no co-occurrence record; the replaced sibling's
    // comorbidities stand in for them.
    let mut cooc_source = anchor;
    let mut top = corpus.cooccurrence_top(anchor, cfg.max_comorbidities);
    if top.is_empty() {
        if let Some(donor) = &cs.replaced_sibling {
            cooc_source = donor;
            top = corpus.cooccurrence_top(donor, cfg.max_comorbidities);
        }
    }
    let comorbidity_cues = top
        .iter()
        .map(|(code, n)| {
            let notes = if *n == 1 { "note" } else { "notes" };
            format!("{} co-occurs with {cooc_source} in {n} real {notes}.", describe(taxonomy, code))
        })
        .collect();

    let exclude = cfg.exclude_source.then_some(cs.source_note.as_str());
    let example_excerpts = overlapping_notes(corpus, &ordered, exclude, cfg.max_excerpts)
        .into_iter()
        .map(|(id, _, _)| {
            let text = &corpus.note(id).expect("indexed note").text;
            (id.to_string(), truncate_chars(text, cfg.excerpt_chars).to_string())
        })
        .collect();

    PromptBundle {
        codeset: cs.clone(),
        definitions,
        synonyms,
        hierarchy_cues,
        comorbidity_cues,
        example_excerpts,
        instructions: cfg.instructions.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Definitions,
    Synonyms,
    Hierarchy,
    Comorbidities,
    Examples,
    Codes,
    Instructions,
}

impl Slot {
    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "definitions" => Slot::Definitions,
            "synonyms" => Slot::Synonyms,
            "hierarchy" => Slot::Hierarchy,
            "comorbidities" => Slot::Comorbidities,
            "examples" => Slot::Examples,
            "codes" => Slot::Codes,
            "instructions" => Slot::Instructions,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Part {
    Text(String),
    Slot(Slot),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    id: String,
    parts: Vec<Part>,
}

impl PromptTemplate {
    pub fn parse(id: impl Into<String>, text: &str) -> Result<Self, PromptError> {
        let mut parts = Vec::new();
        let mut rest = text;
        let mut offset = 0;
        let mut has_codes = false;
        while let Some(start) = rest.find("{{") {
            if start > 0 {
                parts.push(Part::Text(rest[..start].to_string()));
            }
            let after = &rest[start + 2..];
            let end = after.find("}}").ok_or(PromptError::Unterminated(offset + start))?;
            let name = after[..end].trim();
            let slot = Slot::from_name(name).ok_or_else(|| PromptError::UnknownPlaceholder(name.to_string()))?;
            has_codes |= slot == Slot::Codes;
            parts.push(Part::Slot(slot));
            let consumed = start + 2 + end + 2;
            offset += consumed;
            rest = &rest[consumed..];
        }
        if !rest.is_empty() {
            parts.push(Part::Text(rest.to_string()));
        }
        if !has_codes {
            return Err(PromptError::MissingCodes);
        }
        Ok(Self { id: id.into(), parts })
    }

    pub fn default_template() -> Self {
        Self::parse(DEFAULT_TEMPLATE_ID, DEFAULT_TEMPLATE).expect("bundled template is valid")
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn render(&self, bundle: &PromptBundle) -> String {
        let mut out = String::new();
        for part in &self.parts {
            match part {
                Part::Text(t) => out.push_str(t),
                Part::Slot(slot) => out.push_str(&section(bundle, *slot)),
            }
        }
        collapse_blank_lines(&out)
    }
}

fn bullet_section(header: &str, lines: impl Iterator<Item = String>) -> String {
    let mut out = String::new();
    for line in lines {
        if out.is_empty() {
            out.push_str(header);
            out.push('\n');
        }
        out.push_str("- ");
        out.push_str(&line);
        out.push('\n');
    }
    out
}

fn section(b: &PromptBundle, slot: Slot) -> String {
    match slot {
        Slot::Codes => b.ordered_codes().map(ToString::to_string).collect::<Vec<_>>().join(", "),
        Slot::Instructions => b.instructions.clone(),
        Slot::Definitions => bullet_section(
            DEFINITIONS_HEADER,
            b.definitions.iter().map(|(c, d)| {
                let d = if d.is_empty() { NO_DESCRIPTION } else { d.as_str() };
                format!("{c}: {d}")
            }),
        ),
        Slot::Synonyms => bullet_section(
            SYNONYMS_HEADER,
            b.synonyms.iter().map(|(c, s)| format!("{c}: {}", s.join("; "))),
        ),
        Slot::Hierarchy => bullet_section(HIERARCHY_HEADER, b.hierarchy_cues.iter().cloned()),
        Slot::Comorbidities => bullet_section(COMORBIDITIES_HEADER, b.comorbidity_cues.iter().cloned()),
        Slot::Examples => {
            let mut out = String::new();
            for (i, (id, text)) in b.example_excerpts.iter().enumerate() {
                if i == 0 {
                    out.push_str(EXAMPLES_HEADER);
                    out.push('\n');
                }
                out.push_str(&format!("[Excerpt {} from note {id}]\n{text}\n\n", i + 1));
            }
            out
        }
    }
}

fn collapse_blank_lines(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut newlines = 0;
    for ch in text.chars() {
        if ch == '\n' {
            newlines += 1;
            if newlines > 2 {
                continue;
            }
        } else {
            newlines = 0;
        }
        out.push(ch);
    }
    out
}

/// Render `bundle`, shedding optional content until the prompt fits in
/// `max_chars`: excerpts are shortened and dropped first, then
/// co-occurrence cues, hierarchy cues and synonyms. Definitions, codes and
/// instructions are never removed.
pub fn render_within_budget(
    bundle: &PromptBundle,
    template: &PromptTemplate,
    max_chars: usize,
) -> Result<(String, PromptBundle), PromptError> {
    let mut b = bundle.clone();
    loop {
        let text = template.render(&b);
        let len = text.chars().count();
        if len <= max_chars {
            return Ok((text, b));
        }
        let over = len - max_chars;
        if let Some((_, last)) = b.example_excerpts.last_mut() {
            let keep = last.chars().count().saturating_sub(over);
            if keep >= 200 {
                *last = truncate_chars(last, keep).to_string();
            } else {
                b.example_excerpts.pop();
            }
        } else if !b.comorbidity_cues.is_empty() {
            b.comorbidity_cues.clear();
        } else if !b.hierarchy_cues.is_empty() {
            b.hierarchy_cues.clear();
        } else if !b.synonyms.is_empty() {
            b.synonyms.clear();
        } else {
            return Err(PromptError::TooLong {
                anchor: b.codeset.anchor.clone(),
                chars: len,
                limit: max_chars,
            });
        }
    }
}

/// One line of a prompt batch file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub anchor: CodeId,
    pub replicate: u32,
    pub codes: Vec<CodeId>,
    pub prompt: String,
    pub template_id: String,
}
