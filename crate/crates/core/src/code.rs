//! ICD code identifiers.
//!
//! Codes are stored normalized (uppercase, no dot) so that `N18.23` and
//! `n1823` compare equal, while the dot position seen on input is kept for
//! display. Both ICD-10-like (`J96.11`) and ICD-9-like (`428.0`, `E812.0`)
//! shapes are accepted; shape detection is per code.

use std::cmp::Ordering;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid ICD code {input:?}: {reason}")]
pub struct CodeError {
    pub input: String,
    pub reason: &'static str,
}

/// Which code family a code's shape belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CodeSystem {
    /// Letter + 2 alphanumerics + up to 4 more.
    Icd10,
    /// Three digits + up to 2 more, or `E` + 3 digits + optional digit.
    Icd9,
}

#[derive(Clone)]
pub struct CodeId {
    norm: String,
    /// Index in the normalized form where display inserts the dot.
    dot: u8,
    system: CodeSystem,
}

impl CodeId {
    pub fn parse(input: &str) -> Result<Self, CodeError> {
        let err = |reason| CodeError {
            input: input.to_string(),
            reason,
        };
        let raw = input.trim().to_ascii_uppercase();
        if raw.is_empty() {
            return Err(err("empty code"));
        }
        let (norm, dot) = match raw.find('.') {
            Some(pos) => {
                if raw[pos + 1..].contains('.') {
                    return Err(err("more than one dot"));
                }
                if pos + 1 == raw.len() {
                    return Err(err("trailing dot"));
                }
                let mut norm = raw.clone();
                norm.remove(pos);
                (norm, Some(pos))
            }
            None => (raw, None),
        };
        if !norm.bytes().all(|b| b.is_ascii_alphanumeric()) {
            return Err(err("non-alphanumeric character"));
        }
        let bytes = norm.as_bytes();
        let system = if bytes[0].is_ascii_digit() {
            if !(3..=5).contains(&norm.len()) || !bytes.iter().all(u8::is_ascii_digit) {
                return Err(err("ICD-9 codes are 3 digits plus up to 2 more"));
            }
            if dot.is_some_and(|p| p != 3) {
                return Err(err("ICD-9 dot must follow the 3-digit category"));
            }
            CodeSystem::Icd9
        } else if bytes[0] == b'E' && dot == Some(4) {
            // ICD-9 external-cause codes (E812.0); undotted E-codes read as ICD-10.
            if !(4..=5).contains(&norm.len()) || !bytes[1..].iter().all(u8::is_ascii_digit) {
                return Err(err("ICD-9 E-codes are E + 3 digits + optional digit"));
            }
            CodeSystem::Icd9
        } else if bytes[0].is_ascii_alphabetic() {
            if !(3..=7).contains(&norm.len()) {
                return Err(err("ICD-10 codes are 3 to 7 characters"));
            }
            if dot.is_some_and(|p| p != 3) {
                return Err(err("ICD-10 dot must follow the 3-character category"));
            }
            CodeSystem::Icd10
        } else {
            return Err(err("unrecognized code shape"));
        };
        let dot = dot.unwrap_or(if system == CodeSystem::Icd9 && bytes[0] == b'E' { 4 } else { 3 });
        Ok(Self {
            norm,
            dot: dot as u8,
            system,
        })
    }

    /// Normalized form: uppercase, dot removed.
    pub fn as_normalized(&self) -> &str {
        &self.norm
    }

    pub fn system(&self) -> CodeSystem {
        self.system
    }

    pub fn len(&self) -> usize {
        self.norm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norm.is_empty()
    }

    /// Length of a category root for this code's shape.
    fn root_len(&self) -> usize {
        if self.dot == 4 {
            4
        } else {
            3
        }
    }

    /// True for 3-character categories (4 for ICD-9 E-codes).
    pub fn is_category_root(&self) -> bool {
        self.norm.len() <= self.root_len()
    }

    /// Parent by truncation: drop one trailing character. `None` for roots.
    pub fn truncated_parent(&self) -> Option<CodeId> {
        if self.is_category_root() {
            return None;
        }
        Some(CodeId {
            norm: self.norm[..self.norm.len() - 1].to_string(),
            dot: self.dot,
            system: self.system,
        })
    }

    /// Top-level grouping: leading letter for ICD-10-like codes, the
    /// standard chapter range for ICD-9-like codes.
    pub fn chapter(&self) -> String {
        match self.system {
            CodeSystem::Icd10 => self.norm[..1].to_string(),
            CodeSystem::Icd9 if self.norm.starts_with('E') => "E000-E999".to_string(),
            CodeSystem::Icd9 => {
                let category: u32 = self.norm[..3].parse().expect("validated digits");
                icd9_chapter(category).to_string()
            }
        }
    }
}

const ICD9_CHAPTERS: &[(u32, u32)] = &[
    (1, 139),
    (140, 239),
    (240, 279),
    (280, 289),
    (290, 319),
    (320, 389),
    (390, 459),
    (460, 519),
    (520, 579),
    (580, 629),
    (630, 679),
    (680, 709),
    (710, 739),
    (740, 759),
    (760, 779),
    (780, 799),
    (800, 999),
];

fn icd9_chapter(category: u32) -> &'static str {
    const LABELS: &[&str] = &[
        "001-139", "140-239", "240-279", "280-289", "290-319", "320-389", "390-459", "460-519",
        "520-579", "580-629", "630-679", "680-709", "710-739", "740-759", "760-779", "780-799",
        "800-999",
    ];
    ICD9_CHAPTERS
        .iter()
        .position(|&(lo, hi)| (lo..=hi).contains(&category))
        .map(|i| LABELS[i])
        // 000 is not assigned in ICD-9-CM; group it with the first chapter.
        .unwrap_or(LABELS[0])
}

impl fmt::Display for CodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = self.dot as usize;
        if p < self.norm.len() {
            write!(f, "{}.{}", &self.norm[..p], &self.norm[p..])
        } else {
            f.write_str(&self.norm)
        }
    }
}

impl fmt::Debug for CodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CodeId({self})")
    }
}

impl PartialEq for CodeId {
    fn eq(&self, other: &Self) -> bool {
        self.norm == other.norm
    }
}

impl Eq for CodeId {}

impl Hash for CodeId {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.norm.hash(state);
    }
}

impl PartialOrd for CodeId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for CodeId {
    fn cmp(&self, other: &Self) -> Ordering {
        self.norm.cmp(&other.norm)
    }
}

impl FromStr for CodeId {
    type Err = CodeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl Serialize for CodeId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CodeId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        CodeId::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
pub(crate) fn code(s: &str) -> CodeId {
    CodeId::parse(s).unwrap()
}
