//! Multi-label evaluation metrics: micro/macro F1, micro/macro ROC AUC and
//! Precision@K, with per-tier breakdowns.
//!
//! Scores missing from a sample's score map count as 0.0.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::code::CodeId;
use crate::planner::Tier;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_KS: &[usize] = &[8, 15];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("no samples to evaluate")]
    Empty,
    #[error("duplicate sample id {0:?}")]
    DuplicateSample(String),
    #[error("sample {id:?}: gold code {code} is not in the label space")]
    GoldOutsideLabelSpace { id: String, code: CodeId },
    #[error("sample {id:?}: score for {code} is outside the label space")]
    ScoreOutsideLabelSpace { id: String, code: CodeId },
    #[error("sample {id:?}: score {score} for {code} is not in [0, 1]")]
    ScoreRange { id: String, code: CodeId, score: f64 },
    #[error("threshold {0} must lie strictly between 0 and 1")]
    Threshold(f64),
    #[error("gold and score samples do not align: {0}")]
    Misaligned(String),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("no tier given for label {0}")]
    MissingTier(CodeId),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Which labels macro averages run over.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MacroMode {
    /// Every label in the label space; labels never seen nor predicted score 0.
    #[default]
    FullLabelSpace,
    /// Only labels with at least one gold positive.
    GoldPresent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoldMatrix {
    samples: Vec<(String, BTreeSet<CodeId>)>,
    label_space: Vec<CodeId>,
}

impl GoldMatrix {
    pub fn new(
        samples: Vec<(String, BTreeSet<CodeId>)>,
        label_space: impl IntoIterator<Item = CodeId>,
    ) -> Result<Self, EvalError> {
        let label_space: Vec<CodeId> = label_space.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        let labels: BTreeSet<&CodeId> = label_space.iter().collect();
        let mut seen = BTreeSet::new();
        for (id, gold) in &samples {
            if !seen.insert(id.as_str()) {
                return Err(EvalError::DuplicateSample(id.clone()));
            }
            if let Some(code) = gold.iter().find(|c| !labels.contains(c)) {
                return Err(EvalError::GoldOutsideLabelSpace {
                    id: id.clone(),
                    code: code.clone(),
                });
            }
        }
        Ok(Self { samples, label_space })
    }

    /// Parses `{"id", "gold": [codes]}` lines. The label space is the union
    /// of `extra_labels` and every gold code.
    pub fn from_jsonl(text: &str, extra_labels: impl IntoIterator<Item = CodeId>) -> Result<Self, EvalError> {
        #[derive(Deserialize)]
        struct Row {
            id: String,
            gold: BTreeSet<CodeId>,
        }
        let mut samples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: Row = serde_json::from_str(line).map_err(|e| EvalError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            samples.push((row.id, row.gold));
        }
        let mut labels: BTreeSet<CodeId> = extra_labels.into_iter().collect();
        labels.extend(samples.iter().flat_map(|(_, g)| g.iter().cloned()));
        Self::new(samples, labels)
    }

    pub fn samples(&self) -> &[(String, BTreeSet<CodeId>)] {
        &self.samples
    }

    /// Sorted, deduplicated.
    pub fn label_space(&self) -> &[CodeId] {
        &self.label_space
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    samples: Vec<(String, BTreeMap<CodeId, f64>)>,
    threshold: f64,
}

impl ScoreMatrix {
    pub fn new(samples: Vec<(String, BTreeMap<CodeId, f64>)>, threshold: f64) -> Result<Self, EvalError> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(EvalError::Threshold(threshold));
        }
        let mut seen = BTreeSet::new();
        for (id, scores) in &samples {
            if !seen.insert(id.as_str()) {
                return Err(EvalError::DuplicateSample(id.clone()));
            }
            if let Some((code, &score)) = scores.iter().find(|(_, s)| !(0.0..=1.0).contains(*s)) {
                return Err(EvalError::ScoreRange {
                    id: id.clone(),
                    code: code.clone(),
                    score,
                });
            }
        }
        Ok(Self { samples, threshold })
    }

    /// Parses `{"id", "scores": {code: float}}` lines.
    pub fn from_jsonl(text: &str, threshold: f64) -> Result<Self, EvalError> {
        #[derive(Deserialize)]
        struct Row {
            id: String,
            scores: BTreeMap<CodeId, f64>,
        }
        let mut samples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: Row = serde_json::from_str(line).map_err(|e| EvalError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            samples.push((row.id, row.scores));
        }
        Self::new(samples, threshold)
    }

    pub fn samples(&self) -> &[(String, BTreeMap<CodeId, f64>)] {
        &self.samples
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }
}

/// Gold and score rows paired by sample id, in gold order.
struct Aligned<'a> {
    rows: Vec<(&'a BTreeSet<CodeId>, &'a BTreeMap<CodeId, f64>)>,
    labels: &'a [CodeId],
    threshold: f64,
}

impl<'a> Aligned<'a> {
    fn new(g: &'a GoldMatrix, s: &'a ScoreMatrix) -> Result<Self, EvalError> {
        if g.samples.is_empty() {
            return Err(EvalError::Empty);
        }
        if g.samples.len() != s.samples.len() {
            return Err(EvalError::Misaligned(format!(
                "{} gold samples, {} scored samples",
                g.samples.len(),
                s.samples.len()
            )));
        }
        let by_id: HashMap<&str, &BTreeMap<CodeId, f64>> =
            s.samples.iter().map(|(id, sc)| (id.as_str(), sc)).collect();
        let labels: BTreeSet<&CodeId> = g.label_space.iter().collect();
        let mut rows = Vec::with_capacity(g.samples.len());
        for (id, gold) in &g.samples {
            let scores = by_id
                .get(id.as_str())
                .ok_or_else(|| EvalError::Misaligned(format!("no scores for sample {id:?}")))?;
            if let Some(code) = scores.keys().find(|c| !labels.contains(c)) {
                return Err(EvalError::ScoreOutsideLabelSpace {
                    id: id.clone(),
                    code: code.clone(),
                });
            }
            rows.push((gold, *scores));
        }
        Ok(Self {
            rows,
            labels: &g.label_space,
            threshold: s.threshold,
        })
    }

    fn score(scores: &BTreeMap<CodeId, f64>, code: &CodeId) -> f64 {
        scores.get(code).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Confusion {
    tp: usize,
    fp: usize,
    fn_: usize,
}

impl Confusion {
    fn f1(self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

fn f1_over(a: &Aligned<'_>, labels: &[&CodeId], mode: MacroMode) -> (f64, f64) {
    let mut pooled = Confusion::default();
    let mut per_label = Vec::with_capacity(labels.len());
    for code in labels {
        let mut c = Confusion::default();
        for (gold, scores) in &a.rows {
            let truth = gold.contains(*code);
            let pred = Aligned::score(scores, code) >= a.threshold;
            match (truth, pred) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (true, false) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        pooled.tp += c.tp;
        pooled.fp += c.fp;
        pooled.fn_ += c.fn_;
        if mode == MacroMode::FullLabelSpace || c.tp + c.fn_ > 0 {
            per_label.push(c.f1());
        }
    }
    let macro_f1 = if per_label.is_empty() {
        0.0
    } else {
        per_label.iter().sum::<f64>() / per_label.len() as f64
    };
    (pooled.f1(), macro_f1)
}

/// ROC AUC by the rank statistic: average ranks over tied scores, then
/// `(R_pos - P(P+1)/2) / (P * N)`. `None` without both classes.
pub fn rank_auc(pairs: &mut [(f64, bool)]) -> Option<f64> {
    let pos = pairs.iter().filter(|p| p.1).count();
    let neg = pairs.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j + 1 < pairs.len() && pairs[j + 1].0 == pairs[i].0 {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mean_rank = (i + j + 2) as f64 / 2.0;
        let positives = pairs[i..=j].iter().filter(|p| p.1).count();
        rank_sum += mean_rank * positives as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos as f64 * neg as f64))
}

struct AucResult {
    micro: Option<f64>,
    macro_: Option<f64>,
    skipped: Vec<CodeId>,
}

fn auc_over(a: &Aligned<'_>, labels: &[&CodeId]) -> AucResult {
    let mut pooled = Vec::with_capacity(labels.len() * a.rows.len());
    let mut per_label = Vec::new();
    let mut skipped = Vec::new();
    for code in labels {
        let mut pairs: Vec<(f64, bool)> = a
            .rows
            .iter()
            .map(|(gold, scores)| (Aligned::score(scores, code), gold.contains(*code)))
            .collect();
        pooled.extend_from_slice(&pairs);
        match rank_auc(&mut pairs) {
            Some(v) => per_label.push(v),
            None => skipped.push((*code).clone()),
        }
    }
    AucResult {
        micro: rank_auc(&mut pooled),
        macro_: (!per_label.is_empty()).then(|| per_label.iter().sum::<f64>() / per_label.len() as f64),
        skipped,
    }
}

/// `(micro, macro)` F1 at the score matrix's threshold, macro over the
/// full label space.
pub fn f1_scores(g: &GoldMatrix, s: &ScoreMatrix) -> Result<(f64, f64), EvalError> {
    f1_scores_with(g, s, MacroMode::FullLabelSpace)
}

pub fn f1_scores_with(g: &GoldMatrix, s: &ScoreMatrix, mode: MacroMode) -> Result<(f64, f64), EvalError> {
    let a = Aligned::new(g, s)?;
    let labels: Vec<&CodeId> = a.labels.iter().collect();
    Ok(f1_over(&a, &labels, mode))
}

/// `(micro, macro, skipped)` AUC. Macro skips labels lacking a positive or
/// a negative; either average is `None` when undefined.
pub fn auc_scores(g: &GoldMatrix, s: &ScoreMatrix) -> Result<(Option<f64>, Option<f64>, Vec<CodeId>), EvalError> {
    let a = Aligned::new(g, s)?;
    let labels: Vec<&CodeId> = a.labels.iter().collect();
    let r = auc_over(&a, &labels);
    Ok((r.micro, r.macro_, r.skipped))
}

fn p_at_k_over(a: &Aligned<'_>, k: usize) -> f64 {
    let total: f64 = a
        .rows
        .iter()
        .map(|(gold, scores)| {
            let mut ranked: Vec<(&CodeId, f64)> = a.labels.iter().map(|c| (c, Aligned::score(scores, c))).collect();
            ranked.sort_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.cmp(y.0)));
            let hits = ranked.iter().take(k).filter(|(c, _)| gold.contains(*c)).count();
            hits as f64 / k as f64
        })
        .sum();
    total / a.rows.len() as f64
}

/// Mean over samples of `|top-k ∩ gold| / k`; ties rank by code.
pub fn precision_at_k(g: &GoldMatrix, s: &ScoreMatrix, k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    Ok(p_at_k_over(&Aligned::new(g, s)?, k))
}

fn round4<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64((v * 1e4).round() / 1e4)
}

fn round4_opt<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(v) => round4(v, s),
        None => s.serialize_none(),
    }
}

fn round4_map<S: Serializer>(m: &BTreeMap<usize, f64>, s: S) -> Result<S::Ok, S::Error> {
    use serde::ser::SerializeMap;
    let mut map = s.serialize_map(Some(m.len()))?;
    for (k, v) in m {
        map.serialize_entry(k, &((v * 1e4).round() / 1e4))?;
    }
    map.end()
}

/// F1 and AUC over one label subset. Values are full precision in memory
/// and rounded to 4 decimals when serialized.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricBlock {
    pub labels: usize,
    #[serde(serialize_with = "round4_opt")]
    pub auc_micro: Option<f64>,
    #[serde(serialize_with = "round4_opt")]
    pub auc_macro: Option<f64>,
    #[serde(serialize_with = "round4")]
    pub f1_micro: f64,
    #[serde(serialize_with = "round4")]
    pub f1_macro: f64,
    pub skipped_labels: Vec<CodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub samples: usize,
    pub threshold: f64,
    pub macro_mode: MacroMode,
    #[serde(flatten)]
    pub overall: MetricBlock,
    #[serde(serialize_with = "round4_map")]
    pub p_at_k: BTreeMap<usize, f64>,
    /// Tiers with at least one label; P@K is sample-level and not split.
    pub per_tier: BTreeMap<Tier, MetricBlock>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn block(a: &Aligned<'_>, labels: &[&CodeId], mode: MacroMode) -> MetricBlock {
    let (f1_micro, f1_macro) = f1_over(a, labels, mode);
    let auc = auc_over(a, labels);
    MetricBlock {
        labels: labels.len(),
        auc_micro: auc.micro,
        auc_macro: auc.macro_,
        f1_micro,
        f1_macro,
        skipped_labels: auc.skipped,
    }
}

pub fn evaluate(
    g: &GoldMatrix,
    s: &ScoreMatrix,
    tiers: &BTreeMap<CodeId, Tier>,
    ks: &[usize],
    mode: MacroMode,
) -> Result<MetricReport, EvalError> {
    let a = Aligned::new(g, s)?;
    if ks.contains(&0) {
        return Err(EvalError::ZeroK);
    }
    let mut by_tier: BTreeMap<Tier, Vec<&CodeId>> = BTreeMap::new();
    for code in a.labels {
        let tier = tiers.get(code).ok_or_else(|| EvalError::MissingTier(code.clone()))?;
        by_tier.entry(*tier).or_default().push(code);
    }
    let all: Vec<&CodeId> = a.labels.iter().collect();
    Ok(MetricReport {
        samples: a.rows.len(),
        threshold: a.threshold,
        macro_mode: mode,
        overall: block(&a, &all, mode),
        p_at_k: ks.iter().map(|&k| (k, p_at_k_over(&a, k))).collect(),
        per_tier: by_tier.iter().map(|(t, labels)| (*t, block(&a, labels, mode))).collect(),
    })
}
