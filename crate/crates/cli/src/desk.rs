//! Seeded generator for the small desk corpus shipped under `data/desk`.
//!
//! Every real note carries at most one code observed fewer than 100 times,
//! so cloned and substituted code sets never drag a second rare code along.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use lta_core::{CodeId, Note};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub const DEFAULT_SEED: u64 = 20_240_601;
pub const NOTES: usize = 2000;
pub const HELD_OUT: usize = 200;

const CATEGORIES: &[(&str, &str, &str)] = &[
    ("A41", "Sepsis due to other organisms", "sepsis"),
    ("B20", "Human immunodeficiency virus disease", "HIV disease"),
    ("C34", "Malignant neoplasm of bronchus and lung", "lung cancer"),
    ("C50", "Malignant neoplasm of breast", "breast cancer"),
    ("D50", "Iron deficiency anemia", "iron deficiency"),
    ("D69", "Purpura and other hemorrhagic conditions", "bleeding disorder"),
    ("E03", "Other hypothyroidism", "hypothyroidism"),
    ("E11", "Type 2 diabetes mellitus", "T2DM"),
    ("E78", "Disorders of lipoprotein metabolism", "dyslipidemia"),
    ("E87", "Other disorders of fluid and electrolyte balance", "electrolyte imbalance"),
    ("F10", "Alcohol related disorders", "alcohol use"),
    ("F32", "Major depressive disorder, single episode", "depression"),
    ("G40", "Epilepsy and recurrent seizures", "seizure disorder"),
    ("G93", "Other disorders of brain", "encephalopathy"),
    ("I21", "Acute myocardial infarction", "heart attack"),
    ("I25", "Chronic ischemic heart disease", "coronary artery disease"),
    ("I26", "Pulmonary embolism", "pulmonary embolus"),
    ("I48", "Atrial fibrillation and flutter", "atrial fibrillation"),
    ("I50", "Heart failure", "cardiac failure"),
    ("I63", "Cerebral infarction", "ischemic stroke"),
    ("I70", "Atherosclerosis", "arterial plaque disease"),
    ("J18", "Pneumonia, unspecified organism", "pneumonia"),
    ("J44", "Chronic obstructive pulmonary disease", "COPD"),
    ("J45", "Asthma", "reactive airway disease"),
    ("J96", "Respiratory failure", "respiratory insufficiency"),
    ("K21", "Gastro-esophageal reflux disease", "acid reflux"),
    ("K57", "Diverticular disease of intestine", "diverticulosis"),
    ("K70", "Alcoholic liver disease", "alcoholic hepatopathy"),
    ("K74", "Fibrosis and cirrhosis of liver", "liver cirrhosis"),
    ("K85", "Acute pancreatitis", "pancreatic inflammation"),
    ("L89", "Pressure ulcer", "decubitus ulcer"),
    ("M06", "Other rheumatoid arthritis", "rheumatoid disease"),
    ("M17", "Osteoarthritis of knee", "knee arthritis"),
    ("M81", "Osteoporosis without current pathological fracture", "bone loss"),
    ("N17", "Acute kidney failure", "acute kidney injury"),
    ("N18", "Chronic kidney disease", "CKD"),
    ("N39", "Other disorders of urinary system", "urinary disorder"),
    ("N40", "Benign prostatic hyperplasia", "enlarged prostate"),
    ("R07", "Pain in throat and chest", "chest pain"),
    ("R41", "Symptoms involving cognitive functions and awareness", "altered mental status"),
    ("R65", "Systemic inflammatory response syndrome", "SIRS"),
    ("S72", "Fracture of femur", "femoral fracture"),
    ("T81", "Complications of procedures", "procedural complication"),
    ("Z79", "Long term drug therapy", "chronic medication use"),
    ("Z95", "Presence of cardiac implants and grafts", "cardiac device"),
    ("Z99", "Dependence on enabling machines and devices", "device dependence"),
];

const QUALIFIERS: &[&str] = &[
    "acute",
    "chronic",
    "acute on chronic",
    "with complication",
    "without complication",
    "recurrent",
    "mild",
    "moderate",
    "severe",
    "unspecified",
];

const FIVE_CHAR_QUALIFIERS: &[&str] = &["with hypoxia", "with hypercapnia", "bilateral", "left side", "right side"];

#[derive(Debug, Clone, Serialize)]
struct TaxonomyRow {
    code: CodeId,
    description: String,
    synonyms: Vec<String>,
}

/// Output of [`generate`]: file contents keyed by their file names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeskData {
    pub taxonomy_tsv: String,
    pub notes_jsonl: String,
    pub test_gold_jsonl: String,
    pub test_scores_jsonl: String,
}

impl DeskData {
    pub const FILES: [&'static str; 4] = ["taxonomy.tsv", "notes.jsonl", "test_gold.jsonl", "test_scores.jsonl"];

    pub fn files(&self) -> [(&'static str, &str); 4] {
        [
            (Self::FILES[0], &self.taxonomy_tsv),
            (Self::FILES[1], &self.notes_jsonl),
            (Self::FILES[2], &self.test_gold_jsonl),
            (Self::FILES[3], &self.test_scores_jsonl),
        ]
    }
}

fn build_taxonomy(rng: &mut ChaCha8Rng) -> Vec<TaxonomyRow> {
    let mut rows = Vec::new();
    for &(cat, name, synonym) in CATEGORIES {
        let n4 = rng.gen_range(3..=5);
        let mut digits: Vec<usize> = index::sample(rng, QUALIFIERS.len(), n4).into_vec();
        digits.sort_unstable();
        // one four-character code per category gets five-character children
        let parent_digit = digits[rng.gen_range(0..digits.len())];
        for &d in &digits {
            let q = QUALIFIERS[d];
            let digit = if d == QUALIFIERS.len() - 1 { 9 } else { d };
            let code = CodeId::parse(&format!("{cat}.{digit}")).expect("valid generated code");
            rows.push(TaxonomyRow {
                code,
                description: format!("{name}, {q}"),
                synonyms: vec![format!("{synonym}, {q}")],
            });
            if d == parent_digit {
                let k = rng.gen_range(2..=3);
                for (j, q5) in FIVE_CHAR_QUALIFIERS.iter().take(k).enumerate() {
                    rows.push(TaxonomyRow {
                        code: CodeId::parse(&format!("{cat}.{digit}{}", j + 1)).expect("valid generated code"),
                        description: format!("{name}, {q}, {q5}"),
                        synonyms: vec![format!("{synonym}, {q}, {q5}")],
                    });
                }
            }
        }
    }
    rows.sort_by(|a, b| a.code.cmp(&b.code));
    rows
}

fn taxonomy_tsv(rows: &[TaxonomyRow]) -> String {
    let mut out = String::from("code\tdescription\tsynonyms\tparent\n");
    for r in rows {
        writeln!(out, "{}\t{}\t{}\t", r.code, r.description, r.synonyms.join("|")).unwrap();
    }
    out
}

const AGES: std::ops::RangeInclusive<u32> = 34..=91;
const OPENERS: &[&str] = &[
    "presented to the emergency department with",
    "was admitted from clinic for evaluation of",
    "was transferred from an outside hospital with",
    "presented with several days of",
];
const COMPLAINTS: &[&str] = &[
    "dyspnea",
    "fever and chills",
    "abdominal pain",
    "fatigue",
    "lower extremity swelling",
    "confusion",
    "chest pressure",
];
const PLANS: &[&str] = &[
    "Follow up with primary care within one week.",
    "Repeat laboratory studies in five days.",
    "Continue home medications as reconciled.",
    "Return precautions were reviewed with the patient and family.",
];

fn note_text(rng: &mut ChaCha8Rng, codes: &BTreeSet<CodeId>, rows: &[TaxonomyRow]) -> String {
    let desc = |c: &CodeId| {
        rows.binary_search_by(|r| r.code.cmp(c))
            .map(|i| rows[i].description.to_lowercase())
            .expect("note codes come from the taxonomy")
    };
    let mut listed: Vec<&CodeId> = codes.iter().collect();
    listed.shuffle(rng);
    let age = rng.gen_range(AGES);
    let sex = if rng.gen_bool(0.5) { "male" } else { "female" };
    let mut text = format!(
        "DISCHARGE SUMMARY\n\nHistory of Present Illness:\n{age} year old {sex} who {} {}.\n\nHospital Course:\n",
        OPENERS.choose(rng).unwrap(),
        COMPLAINTS.choose(rng).unwrap()
    );
    for c in &listed {
        writeln!(text, "- {}: managed during this admission.", desc(c)).unwrap();
    }
    text.push_str("\nDischarge Diagnoses:\n");
    for (i, c) in listed.iter().enumerate() {
        writeln!(text, "{}. {}", i + 1, desc(c)).unwrap();
    }
    write!(text, "\nPlan:\n{}\n", PLANS.choose(rng).unwrap()).unwrap();
    text
}

#[derive(Serialize)]
struct GoldRow<'a> {
    id: &'a str,
    gold: &'a BTreeSet<CodeId>,
}

#[derive(Serialize)]
struct ScoreRow<'a> {
    id: &'a str,
    scores: std::collections::BTreeMap<&'a CodeId, f64>,
}

struct Roles<'a> {
    head: Vec<&'a CodeId>,
    medium: Vec<&'a CodeId>,
    tail: Vec<&'a CodeId>,
    few: Vec<&'a CodeId>,
}

/// Head and medium codes fill a few "common" categories; the remaining
/// categories hold only tail, few-shot and zero-shot codes. Each rare
/// category keeps one observed four-character code, so every zero-shot
/// code finds its donor among rare codes and the swap removes the only
/// rare code of the borrowed note.
fn assign_roles<'a>(rng: &mut ChaCha8Rng, rows: &'a [TaxonomyRow]) -> Roles<'a> {
    let mut categories: Vec<Vec<&CodeId>> = Vec::new();
    for r in rows {
        match categories.last_mut() {
            Some(cat) if cat[0].as_normalized()[..3] == r.code.as_normalized()[..3] => cat.push(&r.code),
            _ => categories.push(vec![&r.code]),
        }
    }
    categories.shuffle(rng);

    let mut common: Vec<&CodeId> = Vec::new();
    let mut required: Vec<&CodeId> = Vec::new();
    let mut optional: Vec<&CodeId> = Vec::new();
    for mut cat in categories {
        if common.len() < 45 {
            common.extend(cat);
            continue;
        }
        let fours: Vec<usize> = (0..cat.len()).filter(|&i| cat[i].len() == 4).collect();
        required.push(cat.remove(*fours.choose(rng).unwrap()));
        optional.extend(cat);
    }
    common.shuffle(rng);
    required.shuffle(rng);
    optional.shuffle(rng);

    let mut few: Vec<&CodeId> = common.split_off(45);
    let medium = common.split_off(5);
    let head = common;
    let mut rare = required;
    rare.extend(optional);
    let tail: Vec<&CodeId> = rare.drain(..30).collect();
    let wanted = 150usize.saturating_sub(few.len());
    few.extend(rare.drain(..wanted));
    Roles { head, medium, tail, few }
}

/// Build the desk corpus: about 300 taxonomy codes, 2,000 real training
/// notes and a 200-note held-out split with noisy classifier scores.
pub fn generate(seed: u64) -> DeskData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = build_taxonomy(&mut rng);
    let roles = assign_roles(&mut rng, &rows);
    let (head, medium, tail, few) = (&roles.head[..], &roles.medium[..], &roles.tail[..], &roles.few[..]);

    let mut note_codes: Vec<BTreeSet<CodeId>> = vec![BTreeSet::new(); NOTES];
    for c in head {
        let n = rng.gen_range(1000..=1300);
        for i in index::sample(&mut rng, NOTES, n) {
            note_codes[i].insert((*c).clone());
        }
    }
    for c in medium {
        let n = rng.gen_range(100..=300);
        for i in index::sample(&mut rng, NOTES, n) {
            note_codes[i].insert((*c).clone());
        }
    }
    let mut rare: Vec<&CodeId> = Vec::new();
    for c in tail {
        rare.extend(std::iter::repeat(*c).take(rng.gen_range(10..=50)));
    }
    for c in few {
        rare.extend(std::iter::repeat(*c).take(rng.gen_range(1..=9)));
    }
    assert!(rare.len() <= NOTES, "rare occurrences must fit one per note");
    let slots = index::sample(&mut rng, NOTES, rare.len());
    for (slot, c) in slots.into_iter().zip(rare) {
        note_codes[slot].insert(c.clone());
    }
    for set in note_codes.iter_mut().filter(|s| s.is_empty()) {
        set.insert((*head.choose(&mut rng).unwrap()).clone());
    }

    let mut notes_jsonl = String::new();
    for (i, set) in note_codes.into_iter().enumerate() {
        let text = note_text(&mut rng, &set, &rows);
        let note = Note::real(format!("note-{i:04}"), text, set);
        notes_jsonl.push_str(&serde_json::to_string(&note).unwrap());
        notes_jsonl.push('\n');
    }

    let observed: Vec<&CodeId> = head.iter().chain(medium).chain(tail).chain(few).copied().collect();
    let mut test_gold_jsonl = String::new();
    let mut test_scores_jsonl = String::new();
    for i in 0..HELD_OUT {
        let id = format!("test-{i:03}");
        let mut gold: BTreeSet<CodeId> = head
            .iter()
            .filter(|_| rng.gen_bool(0.55))
            .map(|c| (*c).clone())
            .collect();
        let n = rng.gen_range(1..=3);
        for c in medium.choose_multiple(&mut rng, n) {
            gold.insert((*c).clone());
        }
        if rng.gen_bool(0.5) {
            gold.insert((*observed.choose(&mut rng).unwrap()).clone());
        }
        let mut scores = std::collections::BTreeMap::new();
        for c in &gold {
            scores.insert(c, (rng.gen_range(0.3..1.0f64) * 1000.0).round() / 1000.0);
        }
        for c in observed.choose_multiple(&mut rng, 8) {
            scores.entry(*c).or_insert((rng.gen_range(0.0..0.7f64) * 1000.0).round() / 1000.0);
        }
        test_gold_jsonl.push_str(&serde_json::to_string(&GoldRow { id: &id, gold: &gold }).unwrap());
        test_gold_jsonl.push('\n');
        test_scores_jsonl.push_str(&serde_json::to_string(&ScoreRow { id: &id, scores }).unwrap());
        test_scores_jsonl.push('\n');
    }

    DeskData {
        taxonomy_tsv: taxonomy_tsv(&rows),
        notes_jsonl,
        test_gold_jsonl,
        test_scores_jsonl,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use lta_core::planner::{stratify, Tier};
    use lta_core::{Corpus, Taxonomy};

    #[test]
    fn shape_and_rare_code_rule() {
        let data = generate(DEFAULT_SEED);
        let tax = Taxonomy::parse(&data.taxonomy_tsv).unwrap();
        let corpus = Corpus::from_jsonl(&data.notes_jsonl).unwrap();
        assert_eq!(corpus.len(), NOTES);
        assert!((250..=350).contains(&tax.len()), "{} codes", tax.len());
        for note in corpus.notes() {
            let rare = note.codes.iter().filter(|c| corpus.freq(c) < 100).count();
            assert!(rare <= 1, "{} has {rare} rare codes", note.id);
        }
        let mut tiers = std::collections::BTreeMap::new();
        for c in tax.codes() {
            *tiers.entry(stratify(corpus.freq(c))).or_insert(0) += 1;
        }
        assert_eq!(tiers[&Tier::Head], 5);
        assert_eq!(tiers[&Tier::Medium], 40);
        assert_eq!(tiers[&Tier::Tail], 30);
        assert!(tiers[&Tier::UltraTail] > 150);
        assert_eq!(data, generate(DEFAULT_SEED));
    }
}
