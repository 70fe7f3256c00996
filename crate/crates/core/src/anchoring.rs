//! Anchored code-set construction.
//!
//! Few-shot anchors clone the full code set of a real note that contains
//! them. Zero-shot anchors borrow a real note from a donor code found
//! through the hierarchy and swap the donor out for the anchor, keeping
//! every co-occurring code.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::code::CodeId;
use crate::corpus::{Corpus, Note, Origin};
use crate::planner::{AllocationPlan, Strategy};
use crate::seed::rng_for;
use crate::taxonomy::{Taxonomy, TaxonomyError};

#[derive(Debug, Error)]
pub enum AnchorError {
    #[error("{anchor} has {freq} real occurrence(s); use {expected} instead")]
    WrongStrategy {
        anchor: CodeId,
        freq: usize,
        expected: &'static str,
    },
    #[error("no donor code with real notes found for zero-shot code {0}")]
    NoDonor(CodeId),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetStrategy {
    Clone,
    Substitute,
}

/// Where a substitution donor was found.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DonorTier {
    /// Shares the anchor's parent.
    Sibling,
    /// Descends from the anchor's grandparent.
    Family,
    /// Same chapter only.
    Chapter,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchoredCodeSet {
    pub anchor: CodeId,
    pub codes: BTreeSet<CodeId>,
    pub strategy: SetStrategy,
    pub source_note: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replaced_sibling: Option<CodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub donor_tier: Option<DonorTier>,
    #[serde(default)]
    pub replicate: u32,
}

fn real_sources<'a>(corpus: &'a Corpus, code: &CodeId) -> Vec<&'a Note> {
    corpus
        .notes_with(code)
        .filter(|n| n.origin == Origin::Real)
        .collect()
}

pub fn clone_codeset<R: Rng + ?Sized>(
    corpus: &Corpus,
    taxonomy: &Taxonomy,
    anchor: &CodeId,
    rng: &mut R,
) -> Result<AnchoredCodeSet, AnchorError> {
    let sources = real_sources(corpus, anchor);
    if sources.is_empty() {
        return Err(AnchorError::WrongStrategy {
            anchor: anchor.clone(),
            freq: 0,
            expected: "substitution",
        });
    }
    let chapter = taxonomy.knowledge_or_empty(anchor).chapter;
    let same_system: Vec<&Note> = sources
        .iter()
        .copied()
        .filter(|n| {
            n.codes
                .iter()
                .any(|c| c != anchor && taxonomy.knowledge_or_empty(c).chapter == chapter)
        })
        .collect();
    let pool = if same_system.is_empty() { &sources } else { &same_system };
    let source = pool.choose(rng).expect("non-empty pool");
    Ok(AnchoredCodeSet {
        anchor: anchor.clone(),
        codes: source.codes.clone(),
        strategy: SetStrategy::Clone,
        source_note: source.id.clone(),
        replaced_sibling: None,
        donor_tier: None,
        replicate: 0,
    })
}

/// Donor candidates for a zero-shot anchor from the first non-empty
/// fallback tier, sorted by code.
pub fn donor_candidates(
    corpus: &Corpus,
    taxonomy: &Taxonomy,
    anchor: &CodeId,
) -> Result<Option<(DonorTier, Vec<CodeId>)>, AnchorError> {
    let has_real = |c: &CodeId| corpus.notes_with(c).any(|n| n.origin == Origin::Real);

    let siblings: Vec<CodeId> = taxonomy
        .siblings_of(anchor)?
        .into_iter()
        .filter(|c| has_real(c))
        .collect();
    if !siblings.is_empty() {
        return Ok(Some((DonorTier::Sibling, siblings)));
    }

    let observed: Vec<&CodeId> = corpus
        .frequencies()
        .keys()
        .filter(|c| *c != anchor && has_real(c))
        .collect();

    if let Some(gp) = taxonomy.grandparent_of(anchor) {
        let family: Vec<CodeId> = observed
            .iter()
            .filter(|c| taxonomy.is_descendant_of(c, &gp))
            .map(|c| (*c).clone())
            .collect();
        if !family.is_empty() {
            return Ok(Some((DonorTier::Family, family)));
        }
    }

    let chapter = taxonomy.chapter_of(anchor)?;
    let same_chapter: Vec<CodeId> = observed
        .iter()
        .filter(|c| taxonomy.knowledge_or_empty(c).chapter == chapter)
        .map(|c| (*c).clone())
        .collect();
    if !same_chapter.is_empty() {
        return Ok(Some((DonorTier::Chapter, same_chapter)));
    }
    Ok(None)
}

/// `(source \ {donor}) ∪ {anchor}`.
pub fn swap_donor(source: &BTreeSet<CodeId>, donor: &CodeId, anchor: &CodeId) -> BTreeSet<CodeId> {
    let mut codes = source.clone();
    codes.remove(donor);
    codes.insert(anchor.clone());
    codes
}

pub fn substitute_codeset<R: Rng + ?Sized>(
    corpus: &Corpus,
    taxonomy: &Taxonomy,
    anchor: &CodeId,
    rng: &mut R,
) -> Result<AnchoredCodeSet, AnchorError> {
    let freq = real_sources(corpus, anchor).len();
    if freq > 0 {
        return Err(AnchorError::WrongStrategy {
            anchor: anchor.clone(),
            freq,
            expected: "cloning",
        });
    }
    let (tier, candidates) =
        donor_candidates(corpus, taxonomy, anchor)?.ok_or_else(|| AnchorError::NoDonor(anchor.clone()))?;
    let donor = candidates.choose(rng).expect("non-empty candidates");
    let notes = real_sources(corpus, donor);
    let source = notes.choose(rng).expect("donor has real notes");
    Ok(AnchoredCodeSet {
        anchor: anchor.clone(),
        codes: swap_donor(&source.codes, donor, anchor),
        strategy: SetStrategy::Substitute,
        source_note: source.id.clone(),
        replaced_sibling: Some(donor.clone()),
        donor_tier: Some(tier),
        replicate: 0,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedCode {
    pub code: CodeId,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CodesetBatch {
    /// Ordered by (code, replicate).
    pub codesets: Vec<AnchoredCodeSet>,
    pub skipped: Vec<SkippedCode>,
}

/// Code sets for one plan entry, drawn from that code's own seeded stream.
fn codesets_for(
    corpus: &Corpus,
    taxonomy: &Taxonomy,
    code: &CodeId,
    strategy: Strategy,
    count: u32,
    seed: u64,
) -> Result<Vec<AnchoredCodeSet>, AnchorError> {
    let mut rng = rng_for(seed, code.as_normalized());
    (0..count)
        .map(|replicate| {
            let cs = match strategy {
                Strategy::Clone => clone_codeset(corpus, taxonomy, code, &mut rng),
                Strategy::Substitute => substitute_codeset(corpus, taxonomy, code, &mut rng),
                Strategy::None => unreachable!("zero-budget entries are filtered"),
            };
            cs.map(|cs| AnchoredCodeSet { replicate, ..cs })
        })
        .collect()
}

pub fn build_codesets(plan: &AllocationPlan, corpus: &Corpus, taxonomy: &Taxonomy, seed: u64) -> CodesetBatch {
    let mut batch = CodesetBatch::default();
    for entry in plan.entries.iter().filter(|e| e.n_synthetic > 0) {
        if entry.strategy == Strategy::None {
            continue;
        }
        match codesets_for(corpus, taxonomy, &entry.code, entry.strategy, entry.n_synthetic, seed) {
            Ok(sets) => batch.codesets.extend(sets),
            Err(e) => {
                log::warn!("skipping {}: {e}", entry.code);
                batch.skipped.push(SkippedCode {
                    code: entry.code.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    batch
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::code::code;
    use crate::planner::{build_plan, AllocationParams, PlanEntry, PlanTotals, Tier};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn taxonomy(codes: &[&str]) -> Taxonomy {
        let body: String = codes.iter().map(|c| format!("{c}\tdescription of {c}\t\t\n")).collect();
        Taxonomy::parse(&format!("code\tdescription\tsynonyms\tparent\n{body}")).unwrap()
    }

    fn note(id: &str, codes: &[&str]) -> Note {
        Note::real(id, format!("text {id}"), codes.iter().map(|c| code(c)))
    }

    fn set(codes: &[&str]) -> BTreeSet<CodeId> {
        codes.iter().map(|c| code(c)).collect()
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn clone_respiratory_failure_example() {
        let t = taxonomy(&["J96.11", "J44.1", "I50.23", "E11.9"]);
        let c = Corpus::from_notes(vec![note("n1", &["J96.11", "J44.1", "I50.23", "E11.9"])]).unwrap();
        let cs = clone_codeset(&c, &t, &code("J96.11"), &mut rng()).unwrap();
        assert_eq!(cs.codes, set(&["J96.11", "J44.1", "I50.23", "E11.9"]));
        assert_eq!(cs.strategy, SetStrategy::Clone);
        assert_eq!(cs.source_note, "n1");
        assert_eq!(cs.replaced_sibling, None);
    }

    #[test]
    fn clone_single_candidate_always_chosen() {
        let t = taxonomy(&["J96.11", "I10"]);
        let c = Corpus::from_notes(vec![note("a", &["I10"]), note("b", &["J96.11", "I10"])]).unwrap();
        for seed in 0..20 {
            let cs = clone_codeset(&c, &t, &code("J96.11"), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(cs.source_note, "b");
        }
    }

    #[test]
    fn clone_prefers_same_chapter() {
        let t = taxonomy(&["J96.11", "J44.1", "I10", "E11.9"]);
        let c = Corpus::from_notes(vec![
            note("a", &["J96.11", "I10"]),
            note("b", &["J96.11", "J44.1"]),
            note("c", &["J96.11", "E11.9"]),
        ])
        .unwrap();
        for seed in 0..30 {
            let cs = clone_codeset(&c, &t, &code("J96.11"), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(cs.source_note, "b");
        }
    }

    #[test]
    fn clone_zero_shot_is_wrong_strategy() {
        let t = taxonomy(&["J96.11"]);
        let c = Corpus::default();
        assert!(matches!(
            clone_codeset(&c, &t, &code("J96.11"), &mut rng()),
            Err(AnchorError::WrongStrategy { .. })
        ));
    }

    #[test]
    fn substitute_ckd_example() {
        let t = taxonomy(&["N18.23", "N18.29", "E11.39", "I50.19", "I10"]);
        let c = Corpus::from_notes(vec![note("n1", &["E11.39", "N18.29", "I50.19", "I10"])]).unwrap();
        let cs = substitute_codeset(&c, &t, &code("N18.23"), &mut rng()).unwrap();
        assert_eq!(cs.codes, set(&["N18.23", "E11.39", "I50.19", "I10"]));
        assert_eq!(cs.replaced_sibling, Some(code("N18.29")));
        assert_eq!(cs.donor_tier, Some(DonorTier::Sibling));
        assert_eq!(cs.source_note, "n1");
    }

    #[test]
    fn substitute_falls_back_to_family_then_chapter() {
        let t = taxonomy(&["N18.23", "N18.31", "N17.0", "I10"]);
        let c = Corpus::from_notes(vec![note("n1", &["N18.31", "I10"]), note("n2", &["N17.0", "I10"])]).unwrap();
        let cs = substitute_codeset(&c, &t, &code("N18.23"), &mut rng()).unwrap();
        assert_eq!(cs.donor_tier, Some(DonorTier::Family));
        assert_eq!(cs.replaced_sibling, Some(code("N18.31")));

        let c = Corpus::from_notes(vec![note("n2", &["N17.0", "I10"])]).unwrap();
        let cs = substitute_codeset(&c, &t, &code("N18.23"), &mut rng()).unwrap();
        assert_eq!(cs.donor_tier, Some(DonorTier::Chapter));
        assert_eq!(cs.codes, set(&["N18.23", "I10"]));
    }

    #[test]
    fn substitute_without_donor() {
        let t = taxonomy(&["N18.23", "I10"]);
        let c = Corpus::from_notes(vec![note("n1", &["I10"])]).unwrap();
        assert!(matches!(
            substitute_codeset(&c, &t, &code("N18.23"), &mut rng()),
            Err(AnchorError::NoDonor(_))
        ));
    }

    #[test]
    fn substitute_rejects_seen_and_unknown_anchor() {
        let t = taxonomy(&["N18.23", "N18.29"]);
        let c = Corpus::from_notes(vec![note("n1", &["N18.23"])]).unwrap();
        assert!(matches!(
            substitute_codeset(&c, &t, &code("N18.23"), &mut rng()),
            Err(AnchorError::WrongStrategy { .. })
        ));
        assert!(matches!(
            substitute_codeset(&c, &t, &code("Q01.1"), &mut rng()),
            Err(AnchorError::Taxonomy(TaxonomyError::NotFound(_)))
        ));
    }

    #[test]
    fn swap_when_anchor_already_present() {
        let source = set(&["N18.23", "N18.29", "I10"]);
        let out = swap_donor(&source, &code("N18.29"), &code("N18.23"));
        assert_eq!(out.len(), source.len() - 1);
        assert!(out.contains(&code("N18.23")));
        assert!(!out.contains(&code("N18.29")));
    }

    fn plan(entries: Vec<PlanEntry>) -> AllocationPlan {
        AllocationPlan {
            params: AllocationParams::default(),
            totals: PlanTotals::default(),
            entries,
        }
    }

    #[test]
    fn build_with_replacement() {
        let t = taxonomy(&["X01.1", "I10"]);
        let c = Corpus::from_notes(vec![note("a", &["X01.1", "I10"]), note("b", &["X01.1"])]).unwrap();
        let p = plan(vec![PlanEntry {
            code: code("X01.1"),
            tier: Tier::UltraTail,
            n_real: 2,
            n_synthetic: 3,
            strategy: Strategy::Clone,
        }]);
        let batch = build_codesets(&p, &c, &t, 42);
        assert_eq!(batch.codesets.len(), 3);
        assert!(batch.codesets.iter().all(|cs| ["a", "b"].contains(&cs.source_note.as_str())));
        assert_eq!(batch.codesets.iter().map(|cs| cs.replicate).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn build_empty_and_deterministic() {
        let t = taxonomy(&["N18.23", "N18.29", "N18.3", "I10", "Q01.1"]);
        let c = Corpus::from_notes(vec![
            note("a", &["N18.29", "I10"]),
            note("b", &["N18.29", "N18.3"]),
            note("c", &["N18.3", "I10"]),
        ])
        .unwrap();
        let p = build_plan(&c, &t, &AllocationParams::default(), None).unwrap();
        let one = build_codesets(&p, &c, &t, 42);
        let two = build_codesets(&p, &c, &t, 42);
        assert_eq!(one, two);
        assert_eq!(one.skipped.len(), 1);
        assert_eq!(one.skipped[0].code, code("Q01.1"));
        let mut keys: Vec<_> = one.codesets.iter().map(|cs| (cs.anchor.clone(), cs.replicate)).collect();
        let sorted = {
            let mut k = keys.clone();
            k.sort();
            k
        };
        assert_eq!(keys, sorted);
        keys.dedup();
        assert_eq!(keys.len(), one.codesets.len());

        let zero = plan(vec![PlanEntry {
            code: code("N18.3"),
            tier: Tier::Medium,
            n_real: 150,
            n_synthetic: 0,
            strategy: Strategy::None,
        }]);
        assert!(build_codesets(&zero, &c, &t, 42).codesets.is_empty());
    }

    #[test]
    fn per_code_streams_independent_of_plan_contents() {
        let t = taxonomy(&["N18.23", "N18.29", "N18.22", "I10", "E11.9"]);
        let c = Corpus::from_notes(vec![
            note("a", &["N18.29", "I10"]),
            note("b", &["N18.29", "E11.9"]),
            note("c", &["N18.29"]),
        ])
        .unwrap();
        let p = build_plan(&c, &t, &AllocationParams::default(), None).unwrap();
        let full = build_codesets(&p, &c, &t, 9);
        let only: Vec<PlanEntry> = p.entries.iter().filter(|e| e.code == code("N18.23")).cloned().collect();
        let single = build_codesets(&plan(only), &c, &t, 9);
        let from_full: Vec<_> = full.codesets.into_iter().filter(|cs| cs.anchor == code("N18.23")).collect();
        assert_eq!(from_full, single.codesets);
    }
}
