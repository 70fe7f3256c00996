//! Frequency tiers, log-inverse synthetic budgets and allocation plans.
//!
//! The per-code budget is
//!
//! ```text
//! n_synthetic(c) = min(alpha * M / log(n_real + 5), M)
//! ```
//!
//! with zero-shot codes (`n_real = 0`) pinned to `M`. Generation only
//! targets tail and ultra-tail codes; head and medium codes may appear in a
//! plan but always with a zero budget.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::code::CodeId;
use crate::corpus::Corpus;
use crate::taxonomy::Taxonomy;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("invalid allocation parameters: {0}")]
    InvalidParams(&'static str),
    #[error("target codes unknown to both corpus and taxonomy: {}", join(.0))]
    UnknownCodes(Vec<CodeId>),
}

fn join(codes: &[CodeId]) -> String {
    codes.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Head,
    Medium,
    Tail,
    UltraTail,
}

impl Tier {
    pub const ALL: [Tier; 4] = [Tier::Head, Tier::Medium, Tier::Tail, Tier::UltraTail];

    pub fn as_str(self) -> &'static str {
        match self {
            Tier::Head => "head",
            Tier::Medium => "medium",
            Tier::Tail => "tail",
            Tier::UltraTail => "ultra_tail",
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn stratify(n_real: usize) -> Tier {
    match n_real {
        1000.. => Tier::Head,
        100..=999 => Tier::Medium,
        10..=99 => Tier::Tail,
        _ => Tier::UltraTail,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LogBase {
    #[default]
    Natural,
    Base10,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    #[default]
    Ceil,
    Floor,
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AllocationParams {
    pub alpha: f64,
    pub max_per_code: u32,
    pub log_base: LogBase,
    pub rounding: Rounding,
}

impl Default for AllocationParams {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            max_per_code: 50,
            log_base: LogBase::Natural,
            rounding: Rounding::Ceil,
        }
    }
}

impl AllocationParams {
    pub fn validate(&self) -> Result<(), PlanError> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(PlanError::InvalidParams("alpha must be a positive finite number"));
        }
        if self.max_per_code < 1 {
            return Err(PlanError::InvalidParams("max_per_code must be at least 1"));
        }
        Ok(())
    }
}

/// Unclamped, unrounded formula value `alpha * M / log(n_real + 5)`.
pub fn allocation_raw(n_real: usize, p: &AllocationParams) -> f64 {
    let x = n_real as f64 + 5.0;
    let log = match p.log_base {
        LogBase::Natural => x.ln(),
        LogBase::Base10 => x.log10(),
    };
    p.alpha * f64::from(p.max_per_code) / log
}

/// Synthetic-note budget for a code seen `n_real` times.
pub fn allocate(n_real: usize, p: &AllocationParams) -> u32 {
    let m = p.max_per_code;
    if n_real == 0 {
        return m;
    }
    let v = allocation_raw(n_real, p).min(f64::from(m));
    let rounded = match p.rounding {
        Rounding::Ceil => v.ceil(),
        Rounding::Floor => v.floor(),
        Rounding::Nearest => v.round(),
    };
    (rounded as u32).min(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Clone,
    Substitute,
    None,
}

impl Strategy {
    pub fn for_frequency(n_real: usize) -> Self {
        match n_real {
            0 => Strategy::Substitute,
            1..=99 => Strategy::Clone,
            _ => Strategy::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub code: CodeId,
    pub tier: Tier,
    pub n_real: usize,
    pub n_synthetic: u32,
    pub strategy: Strategy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct PlanTotals {
    /// Entries with a non-zero budget.
    pub codes: usize,
    pub notes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub params: AllocationParams,
    /// Sorted by code.
    pub entries: Vec<PlanEntry>,
    pub totals: PlanTotals,
}

impl AllocationPlan {
    pub fn entry(&self, code: &CodeId) -> Option<&PlanEntry> {
        self.entries
            .binary_search_by(|e| e.code.cmp(code))
            .ok()
            .map(|i| &self.entries[i])
    }
}

/// Default augmentation universe: taxonomy codes seen fewer than 100 times
/// (zero-shot codes included).
pub fn default_targets(corpus: &Corpus, taxonomy: &Taxonomy) -> BTreeSet<CodeId> {
    taxonomy
        .codes()
        .filter(|c| corpus.freq(c) < 100)
        .cloned()
        .collect()
}

pub fn build_plan(
    corpus: &Corpus,
    taxonomy: &Taxonomy,
    params: &AllocationParams,
    targets: Option<&BTreeSet<CodeId>>,
) -> Result<AllocationPlan, PlanError> {
    params.validate()?;
    let defaults;
    let targets = match targets {
        Some(t) => t,
        None => {
            defaults = default_targets(corpus, taxonomy);
            &defaults
        }
    };
    let unknown: Vec<CodeId> = targets
        .iter()
        .filter(|c| corpus.freq(c) == 0 && !taxonomy.contains(c))
        .cloned()
        .collect();
    if !unknown.is_empty() {
        return Err(PlanError::UnknownCodes(unknown));
    }

    let entries: Vec<PlanEntry> = targets
        .iter()
        .map(|code| {
            let n_real = corpus.freq(code);
            let strategy = Strategy::for_frequency(n_real);
            let n_synthetic = match strategy {
                Strategy::None => 0,
                _ => allocate(n_real, params),
            };
            PlanEntry {
                code: code.clone(),
                tier: stratify(n_real),
                n_real,
                n_synthetic,
                strategy,
            }
        })
        .collect();
    let totals = PlanTotals {
        codes: entries.iter().filter(|e| e.n_synthetic > 0).count(),
        notes: entries.iter().map(|e| u64::from(e.n_synthetic)).sum(),
    };
    Ok(AllocationPlan {
        params: *params,
        entries,
        totals,
    })
}

/// Histogram layout for before/after sample-count distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BinSpec {
    /// Width of linear-scale bins; 1 gives one row per exact count.
    pub linear_width: usize,
    /// Log-scale bins are `0`, then `[base^i, base^(i+1) - 1]`.
    pub log_base: usize,
    /// Only codes whose real count is at most this are histogrammed.
    pub max_real: Option<usize>,
}

impl Default for BinSpec {
    fn default() -> Self {
        Self {
            linear_width: 1,
            log_base: 2,
            max_real: Some(99),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Linear,
    Log,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistributionRow {
    pub bin: String,
    pub real_count: usize,
    pub extended_count: usize,
    pub scale: Scale,
}

fn range_label(lo: usize, hi: usize) -> String {
    if lo == hi {
        lo.to_string()
    } else {
        format!("{lo}-{hi}")
    }
}

/// Per-code sample counts in both corpora, binned on linear and log scales.
pub fn emit_distribution(real: &Corpus, extended: &Corpus, bins: &BinSpec) -> Vec<DistributionRow> {
    let width = bins.linear_width.max(1);
    let base = bins.log_base.max(2);
    let codes: BTreeSet<&CodeId> = real
        .frequencies()
        .keys()
        .chain(extended.frequencies().keys())
        .collect();
    let counts: Vec<(usize, usize)> = codes
        .into_iter()
        .map(|c| (real.freq(c), extended.freq(c)))
        .filter(|(r, _)| bins.max_real.map_or(true, |m| *r <= m))
        .collect();
    let max = counts.iter().map(|&(r, e)| r.max(e)).max();

    let mut rows = Vec::new();
    let Some(max) = max else {
        return rows;
    };

    let mut linear: BTreeMap<usize, (usize, usize)> = (0..=max / width).map(|b| (b, (0, 0))).collect();
    for &(r, e) in &counts {
        linear.get_mut(&(r / width)).unwrap().0 += 1;
        linear.get_mut(&(e / width)).unwrap().1 += 1;
    }
    rows.extend(linear.into_iter().map(|(b, (r, e))| DistributionRow {
        bin: range_label(b * width, b * width + width - 1),
        real_count: r,
        extended_count: e,
        scale: Scale::Linear,
    }));

    let mut edges = vec![(0usize, 0usize)];
    let mut lo = 1usize;
    while lo <= max {
        let hi = lo.saturating_mul(base) - 1;
        edges.push((lo, hi));
        lo = lo.saturating_mul(base);
    }
    let log_bin = |n: usize| edges.iter().position(|&(lo, hi)| (lo..=hi).contains(&n)).unwrap();
    let mut log_counts = vec![(0usize, 0usize); edges.len()];
    for &(r, e) in &counts {
        log_counts[log_bin(r)].0 += 1;
        log_counts[log_bin(e)].1 += 1;
    }
    rows.extend(edges.iter().zip(log_counts).map(|(&(lo, hi), (r, e))| DistributionRow {
        bin: range_label(lo, hi),
        real_count: r,
        extended_count: e,
        scale: Scale::Log,
    }));
    rows
}

/// CSV with header `bin,real_count,extended_count,scale`.
pub fn distribution_csv(rows: &[DistributionRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(["bin", "real_count", "extended_count", "scale"])
            .expect("in-memory write");
    }
    for row in rows {
        w.serialize(row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::code::code;
    use crate::corpus::{Note, Origin};

    // Frozen from a 40-digit evaluation of alpha * M / ln(n + 5).
    const RAW_N1: f64 = 13.952_765_663_781_181;
    const RAW_N10: f64 = 9.231_734_326_721_377;
    const RAW_N95: f64 = 5.428_681_023_790_648;

    #[test]
    fn tiers() {
        assert_eq!(stratify(1000), Tier::Head);
        assert_eq!(stratify(999), Tier::Medium);
        assert_eq!(stratify(100), Tier::Medium);
        assert_eq!(stratify(99), Tier::Tail);
        assert_eq!(stratify(10), Tier::Tail);
        assert_eq!(stratify(9), Tier::UltraTail);
        assert_eq!(stratify(0), Tier::UltraTail);
    }

    #[test]
    fn allocation_examples() {
        let p = AllocationParams::default();
        assert_eq!(allocate(0, &p), 50);
        assert!((allocation_raw(10, &p) - RAW_N10).abs() < 1e-12);
        assert!((allocation_raw(95, &p) - RAW_N95).abs() < 1e-12);
        assert!((allocation_raw(1, &p) - RAW_N1).abs() < 1e-12);
        assert_eq!(allocate(10, &p), 10);
        assert_eq!(allocate(95, &p), 6);
        assert_eq!(allocate(1, &p), 14);
    }

    #[test]
    fn rounding_modes() {
        let floor = AllocationParams {
            rounding: Rounding::Floor,
            ..Default::default()
        };
        let nearest = AllocationParams {
            rounding: Rounding::Nearest,
            ..Default::default()
        };
        assert_eq!(allocate(10, &floor), 9);
        assert_eq!(allocate(10, &nearest), 9);
        assert_eq!(allocate(95, &nearest), 5);
        assert_eq!(allocate(0, &floor), 50);
    }

    #[test]
    fn clamps_to_max() {
        let p = AllocationParams {
            alpha: 10.0,
            ..Default::default()
        };
        assert_eq!(allocate(1, &p), 50);
    }

    #[test]
    fn monotone_and_bounded() {
        for base in [LogBase::Natural, LogBase::Base10] {
            let p = AllocationParams {
                log_base: base,
                ..Default::default()
            };
            let mut prev = allocate(0, &p);
            for n in 1..=10_000 {
                let raw = allocation_raw(n, &p);
                assert!(raw < 50.0, "n={n} raw={raw}");
                let a = allocate(n, &p);
                assert!(a <= prev && a >= 1);
                prev = a;
            }
        }
    }

    #[test]
    fn invalid_params() {
        let p = AllocationParams {
            alpha: 0.0,
            ..Default::default()
        };
        assert!(p.validate().is_err());
        let p = AllocationParams {
            max_per_code: 0,
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }

    fn fixture() -> (Corpus, Taxonomy) {
        let taxonomy = Taxonomy::parse(
            "code\tdescription\tsynonyms\tparent\n\
             X01.1\tfew shot\t\t\n\
             Y01.1\tzero shot\t\t\n\
             M01.1\tmedium\t\t\n",
        )
        .unwrap();
        let mut notes = Vec::new();
        for i in 0..500 {
            let mut codes = vec![code("M01.1")];
            if i < 7 {
                codes.push(code("X01.1"));
            }
            notes.push(Note::real(format!("n{i}"), "", codes));
        }
        (Corpus::from_notes(notes).unwrap(), taxonomy)
    }

    #[test]
    fn plan_entries() {
        let (corpus, taxonomy) = fixture();
        let p = AllocationParams::default();
        let plan = build_plan(&corpus, &taxonomy, &p, None).unwrap();
        assert_eq!(plan.entries.len(), 2);
        let x = plan.entry(&code("X01.1")).unwrap();
        assert_eq!((x.tier, x.strategy, x.n_synthetic), (Tier::UltraTail, Strategy::Clone, allocate(7, &p)));
        let y = plan.entry(&code("Y01.1")).unwrap();
        assert_eq!((y.tier, y.strategy, y.n_synthetic), (Tier::UltraTail, Strategy::Substitute, 50));
        assert_eq!(plan.totals.codes, 2);
        assert_eq!(plan.totals.notes, u64::from(allocate(7, &p)) + 50);

        let all: BTreeSet<CodeId> = taxonomy.codes().cloned().collect();
        let plan = build_plan(&corpus, &taxonomy, &p, Some(&all)).unwrap();
        let m = plan.entry(&code("M01.1")).unwrap();
        assert_eq!((m.tier, m.strategy, m.n_synthetic), (Tier::Medium, Strategy::None, 0));
        for e in &plan.entries {
            assert_eq!(e.tier, stratify(corpus.freq(&e.code)));
        }
    }

    #[test]
    fn unknown_targets() {
        let (corpus, taxonomy) = fixture();
        let targets: BTreeSet<CodeId> = [code("Q99.9"), code("X01.1"), code("A00")].into();
        let err = build_plan(&corpus, &taxonomy, &AllocationParams::default(), Some(&targets)).unwrap_err();
        match err {
            PlanError::UnknownCodes(codes) => assert_eq!(codes, vec![code("A00"), code("Q99.9")]),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn plan_serialization_is_deterministic() {
        let (corpus, taxonomy) = fixture();
        let p = AllocationParams::default();
        let a = serde_json::to_string(&build_plan(&corpus, &taxonomy, &p, None).unwrap()).unwrap();
        let b = serde_json::to_string(&build_plan(&corpus, &taxonomy, &p, None).unwrap()).unwrap();
        assert_eq!(a, b);
        let back: AllocationPlan = serde_json::from_str(&a).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), a);
    }

    fn synthetic(id: &str, anchor: &str) -> Note {
        Note {
            id: id.into(),
            text: String::new(),
            codes: [code(anchor)].into(),
            origin: Origin::Synthetic,
            anchor: Some(code(anchor)),
        }
    }

    #[test]
    fn distribution_counts() {
        let real = Corpus::from_notes(vec![Note::real("r1", "", [code("A01")])]).unwrap();
        let syn: Vec<Note> = (0..50).map(|i| synthetic(&format!("s{i}"), "B01")).collect();
        let ext = real.merge(syn).unwrap();
        let rows = emit_distribution(&real, &ext, &BinSpec::default());
        let lin = |bin: &str| rows.iter().find(|r| r.scale == Scale::Linear && r.bin == bin).unwrap();
        assert_eq!(lin("0").real_count, 1);
        assert_eq!(lin("0").extended_count, 0);
        assert_eq!(lin("1").real_count, 1);
        assert_eq!(lin("1").extended_count, 1);
        assert_eq!(lin("50").extended_count, 1);
        assert_eq!(lin("50").real_count, 0);
        let log = |bin: &str| rows.iter().find(|r| r.scale == Scale::Log && r.bin == bin).unwrap();
        assert_eq!(log("0").real_count, 1);
        assert_eq!(log("32-63").extended_count, 1);
        for scale in [Scale::Linear, Scale::Log] {
            let (r, e) = rows
                .iter()
                .filter(|x| x.scale == scale)
                .fold((0, 0), |acc, x| (acc.0 + x.real_count, acc.1 + x.extended_count));
            assert_eq!((r, e), (2, 2));
        }
    }

    #[test]
    fn distribution_identity_and_csv() {
        let real = Corpus::from_notes(vec![
            Note::real("r1", "", [code("A01"), code("B01")]),
            Note::real("r2", "", [code("A01")]),
        ])
        .unwrap();
        let rows = emit_distribution(&real, &real, &BinSpec { linear_width: 2, ..Default::default() });
        assert!(rows.iter().all(|r| r.real_count == r.extended_count));
        assert_eq!(rows[0].bin, "0-1");
        let csv = distribution_csv(&rows);
        assert!(csv.starts_with("bin,real_count,extended_count,scale\n"));
        assert!(csv.contains("0-1,1,1,linear\n"));
        assert_eq!(distribution_csv(&[]), "bin,real_count,extended_count,scale\n");
    }
}
