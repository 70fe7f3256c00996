//! Pipeline stages and their on-disk artifacts.
//!
//! Every stage reads its inputs from the output directory (or from memory
//! when chained by `run-all`) and writes one documented artifact. JSON files
//! and every JSONL line carry `schema_version`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use lta_core::anchoring::{build_codesets, AnchoredCodeSet, SkippedCode};
use lta_core::evalkit::{evaluate, GoldMatrix, MetricReport, ScoreMatrix};
use lta_core::generation::{
    run_batch, FailureRecord, GeneratorBackend, HttpBackend, MockBackend, SyntheticNote,
};
use lta_core::planner::{build_plan, distribution_csv, emit_distribution, stratify, AllocationPlan, Tier};
use lta_core::prompting::{build_prompt, render_within_budget, PromptRecord, PromptTemplate};
use lta_core::{CodeId, Corpus, Note, Taxonomy};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{BackendKind, PipelineConfig};

pub const SCHEMA_VERSION: u32 = 1;

pub const STATS_FILE: &str = "stats.json";
pub const PLAN_FILE: &str = "plan.json";
pub const CODESETS_FILE: &str = "codesets.jsonl";
pub const CODESETS_SKIPPED_FILE: &str = "codesets_skipped.jsonl";
pub const PROMPTS_FILE: &str = "prompts.jsonl";
pub const PROMPTS_SKIPPED_FILE: &str = "prompts_skipped.jsonl";
pub const SYNTHETIC_FILE: &str = "synthetic.jsonl";
pub const FAILURES_FILE: &str = "failures.jsonl";
pub const EXTENDED_FILE: &str = "extended.jsonl";
pub const DISTRIBUTION_FILE: &str = "distribution.csv";
pub const REPORT_FILE: &str = "report.json";

/// Stage failure, split by exit code.
#[derive(Debug)]
pub enum StageError {
    /// Missing, unreadable or malformed input (exit 2).
    Input(anyhow::Error),
    Runtime(anyhow::Error),
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StageError::Input(e) | StageError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl std::error::Error for StageError {}

type StageResult<T> = Result<T, StageError>;

fn input<E: Into<anyhow::Error>>(e: E) -> StageError {
    StageError::Input(e.into())
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> StageError {
    StageError::Runtime(e.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Complete,
    /// Some generation requests failed; see the failure report.
    PartialFailure,
}

#[derive(Serialize, Deserialize)]
struct Versioned<T> {
    schema_version: u32,
    #[serde(flatten)]
    item: T,
}

fn read_text(path: &Path) -> StageResult<String> {
    fs::read_to_string(path).map_err(|e| input(anyhow!("cannot read {}: {e}", path.display())))
}

fn check_version(v: u32, path: &Path, line: Option<usize>) -> StageResult<()> {
    if v == SCHEMA_VERSION {
        return Ok(());
    }
    let at = line.map(|l| format!(" line {l}")).unwrap_or_default();
    Err(input(anyhow!(
        "{}{at}: unsupported schema_version {v} (expected {SCHEMA_VERSION})",
        path.display()
    )))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> StageResult<T> {
    let text = read_text(path)?;
    let v: Versioned<T> =
        serde_json::from_str(&text).map_err(|e| input(anyhow!("{}: {e}", path.display())))?;
    check_version(v.schema_version, path, None)?;
    Ok(v.item)
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> StageResult<Vec<T>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Versioned<T> =
            serde_json::from_str(line).map_err(|e| input(anyhow!("{} line {}: {e}", path.display(), i + 1)))?;
        check_version(v.schema_version, path, Some(i + 1))?;
        out.push(v.item);
    }
    Ok(out)
}

fn json_string<T: Serialize>(item: &T) -> String {
    let mut s = serde_json::to_string_pretty(&Versioned {
        schema_version: SCHEMA_VERSION,
        item,
    })
    .expect("artifact serializes");
    s.push('\n');
    s
}

fn jsonl_string<T: Serialize>(items: &[T]) -> String {
    let mut s = String::new();
    for item in items {
        s.push_str(
            &serde_json::to_string(&Versioned {
                schema_version: SCHEMA_VERSION,
                item,
            })
            .expect("artifact serializes"),
        );
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierRow {
    pub tier: Tier,
    pub codes: usize,
    /// Code occurrences summed over the tier's codes.
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsReport {
    pub notes: usize,
    pub taxonomy_codes: usize,
    pub distinct_codes: usize,
    /// Taxonomy codes that never occur in the corpus.
    pub taxonomy_only_codes: usize,
    pub tiers: Vec<TierRow>,
}

pub fn compute_stats(corpus: &Corpus, taxonomy: &Taxonomy) -> StatsReport {
    let codes: BTreeSet<&CodeId> = taxonomy.codes().chain(corpus.frequencies().keys()).collect();
    let mut tiers: BTreeMap<Tier, (usize, usize)> = Tier::ALL.iter().map(|t| (*t, (0, 0))).collect();
    for c in &codes {
        let n = corpus.freq(c);
        let row = tiers.get_mut(&stratify(n)).unwrap();
        row.0 += 1;
        row.1 += n;
    }
    StatsReport {
        notes: corpus.len(),
        taxonomy_codes: taxonomy.len(),
        distinct_codes: codes.len(),
        taxonomy_only_codes: taxonomy.codes().filter(|c| corpus.freq(c) == 0).count(),
        tiers: Tier::ALL
            .iter()
            .map(|t| TierRow {
                tier: *t,
                codes: tiers[t].0,
                samples: tiers[t].1,
            })
            .collect(),
    }
}

impl StatsReport {
    pub fn table(&self) -> String {
        let mut s = format!("{:<11} {:>7} {:>9}\n", "tier", "codes", "samples");
        for r in &self.tiers {
            s.push_str(&format!("{:<11} {:>7} {:>9}\n", r.tier.as_str(), r.codes, r.samples));
        }
        s.push_str(&format!(
            "{} notes, {} distinct codes ({} taxonomy-only)\n",
            self.notes, self.distinct_codes, self.taxonomy_only_codes
        ));
        s
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CodesetOutput {
    pub codesets: Vec<AnchoredCodeSet>,
    pub skipped: Vec<SkippedCode>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSkip {
    pub anchor: CodeId,
    pub replicate: u32,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PromptOutput {
    pub prompts: Vec<PromptRecord>,
    pub skipped: Vec<PromptSkip>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenerateOutput {
    pub notes: Vec<SyntheticNote>,
    pub failures: Vec<FailureRecord>,
    pub below_gate: usize,
}

/// Loaded configuration plus the real corpus and taxonomy.
pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub dry_run: bool,
    pub taxonomy: Taxonomy,
    pub corpus: Corpus,
}

impl Pipeline {
    pub fn load(cfg: PipelineConfig, dry_run: bool) -> StageResult<Self> {
        cfg.validate().map_err(input)?;
        let tax_path = &cfg.paths.taxonomy;
        let taxonomy = Taxonomy::parse(&read_text(tax_path)?)
            .with_context(|| format!("parsing taxonomy {}", tax_path.display()))
            .map_err(input)?;
        let corpus_path = &cfg.paths.corpus;
        let corpus = Corpus::from_jsonl(&read_text(corpus_path)?)
            .with_context(|| format!("parsing corpus {}", corpus_path.display()))
            .map_err(input)?;
        for w in corpus.warnings() {
            log::warn!("{}: {w}", corpus_path.display());
        }
        Ok(Self {
            cfg,
            dry_run,
            taxonomy,
            corpus,
        })
    }

    pub fn out_path(&self, file: &str) -> PathBuf {
        self.cfg.paths.out_dir.join(file)
    }

    fn write(&self, file: &str, contents: &str) -> StageResult<()> {
        if self.dry_run {
            return Ok(());
        }
        let dir = &self.cfg.paths.out_dir;
        fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))
            .map_err(runtime)?;
        let path = self.out_path(file);
        fs::write(&path, contents)
            .with_context(|| format!("writing {}", path.display()))
            .map_err(runtime)
    }

    pub fn stats(&self) -> StageResult<StatsReport> {
        let stats = compute_stats(&self.corpus, &self.taxonomy);
        print!("{}", stats.table());
        self.write(STATS_FILE, &json_string(&stats))?;
        Ok(stats)
    }

    pub fn plan(&self) -> StageResult<AllocationPlan> {
        let plan = build_plan(&self.corpus, &self.taxonomy, &self.cfg.allocation, None).map_err(input)?;
        println!(
            "plan: {} target codes, {} synthetic notes",
            plan.totals.codes, plan.totals.notes
        );
        self.write(PLAN_FILE, &json_string(&plan))?;
        Ok(plan)
    }

    pub fn codesets(&self, plan: Option<AllocationPlan>) -> StageResult<CodesetOutput> {
        let plan = match plan {
            Some(p) => p,
            None => read_json(&self.out_path(PLAN_FILE))?,
        };
        let seed = self.cfg.require_seed().map_err(input)?;
        let batch = build_codesets(&plan, &self.corpus, &self.taxonomy, seed);
        for s in &batch.skipped {
            log::warn!("no code sets for {}: {}", s.code, s.reason);
        }
        println!(
            "codesets: {} built, {} codes skipped",
            batch.codesets.len(),
            batch.skipped.len()
        );
        self.write(CODESETS_FILE, &jsonl_string(&batch.codesets))?;
        self.write(CODESETS_SKIPPED_FILE, &jsonl_string(&batch.skipped))?;
        Ok(CodesetOutput {
            codesets: batch.codesets,
            skipped: batch.skipped,
        })
    }

    fn template(&self) -> StageResult<PromptTemplate> {
        match &self.cfg.paths.template {
            None => Ok(PromptTemplate::default_template()),
            Some(path) => {
                let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("custom").to_string();
                PromptTemplate::parse(id, &read_text(path)?)
                    .with_context(|| format!("template {}", path.display()))
                    .map_err(input)
            }
        }
    }

    pub fn prompts(&self, codesets: Option<&[AnchoredCodeSet]>) -> StageResult<PromptOutput> {
        let loaded;
        let codesets = match codesets {
            Some(c) => c,
            None => {
                loaded = read_jsonl::<AnchoredCodeSet>(&self.out_path(CODESETS_FILE))?;
                &loaded
            }
        };
        let template = self.template()?;
        let pc = &self.cfg.prompt;
        let mut out = PromptOutput::default();
        for cs in codesets {
            let bundle = build_prompt(cs, &self.taxonomy, &self.corpus, pc);
            match render_within_budget(&bundle, &template, pc.max_prompt_chars) {
                Ok((prompt, fitted)) => out.prompts.push(PromptRecord {
                    anchor: cs.anchor.clone(),
                    replicate: cs.replicate,
                    codes: fitted.ordered_codes().cloned().collect(),
                    prompt,
                    template_id: template.id().to_string(),
                }),
                Err(e) => {
                    log::warn!("{e}");
                    out.skipped.push(PromptSkip {
                        anchor: cs.anchor.clone(),
                        replicate: cs.replicate,
                        reason: e.to_string(),
                    });
                }
            }
        }
        println!(
            "prompts: {} rendered, {} over budget",
            out.prompts.len(),
            out.skipped.len()
        );
        self.write(PROMPTS_FILE, &jsonl_string(&out.prompts))?;
        self.write(PROMPTS_SKIPPED_FILE, &jsonl_string(&out.skipped))?;
        Ok(out)
    }

    fn backend(&self) -> StageResult<Box<dyn GeneratorBackend>> {
        Ok(match self.cfg.generation.backend {
            BackendKind::Mock => Box::new(MockBackend),
            BackendKind::Http => Box::new(HttpBackend::from_env(self.cfg.generation.url.as_deref()).map_err(input)?),
        })
    }

    pub fn generate(
        &self,
        prompts: Option<&[PromptRecord]>,
        codesets: Option<&[AnchoredCodeSet]>,
    ) -> StageResult<GenerateOutput> {
        let (loaded_p, loaded_c);
        let prompts = match prompts {
            Some(p) => p,
            None => {
                loaded_p = read_jsonl::<PromptRecord>(&self.out_path(PROMPTS_FILE))?;
                &loaded_p
            }
        };
        let codesets = match codesets {
            Some(c) => c,
            None => {
                loaded_c = read_jsonl::<AnchoredCodeSet>(&self.out_path(CODESETS_FILE))?;
                &loaded_c
            }
        };
        let seed = self.cfg.require_seed().map_err(input)?;
        let by_key: BTreeMap<(&CodeId, u32), &AnchoredCodeSet> =
            codesets.iter().map(|cs| ((&cs.anchor, cs.replicate), cs)).collect();
        let mut texts = Vec::with_capacity(prompts.len());
        let mut matched = Vec::with_capacity(prompts.len());
        for p in prompts {
            let cs = by_key.get(&(&p.anchor, p.replicate)).ok_or_else(|| {
                input(anyhow!(
                    "prompt for {} replicate {} has no matching code set",
                    p.anchor,
                    p.replicate
                ))
            })?;
            texts.push(p.prompt.clone());
            matched.push((*cs).clone());
        }

        let out = if self.dry_run {
            println!("generate: {} requests (dry run, nothing sent)", texts.len());
            GenerateOutput::default()
        } else {
            let backend = self.backend()?;
            let rt = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .map_err(runtime)?;
            let batch = rt
                .block_on(run_batch(
                    &texts,
                    &matched,
                    backend.as_ref(),
                    &self.taxonomy,
                    &self.cfg.generation.params,
                    seed,
                ))
                .map_err(runtime)?;
            println!(
                "generate: {} notes, {} failures, {} below the alignment gate",
                batch.notes.len(),
                batch.failures.len(),
                batch.below_gate
            );
            GenerateOutput {
                notes: batch.notes,
                failures: batch.failures,
                below_gate: batch.below_gate,
            }
        };
        self.write(SYNTHETIC_FILE, &jsonl_string(&out.notes))?;
        self.write(FAILURES_FILE, &jsonl_string(&out.failures))?;
        Ok(out)
    }

    pub fn merge(&self, synthetic: Option<Vec<Note>>) -> StageResult<Corpus> {
        let synthetic = match synthetic {
            Some(s) => s,
            None => read_jsonl::<SyntheticNote>(&self.out_path(SYNTHETIC_FILE))?
                .into_iter()
                .map(|s| s.note)
                .collect(),
        };
        let added = synthetic.len();
        let extended = self.corpus.merge(synthetic).map_err(input)?;
        println!(
            "merge: {} real + {added} synthetic = {} notes",
            self.corpus.len(),
            extended.len()
        );
        self.write(EXTENDED_FILE, &jsonl_string(extended.notes()))?;
        Ok(extended)
    }

    pub fn distribution(&self, extended: Option<&Corpus>) -> StageResult<String> {
        let loaded;
        let extended = match extended {
            Some(c) => c,
            None => {
                let notes = read_jsonl::<Note>(&self.out_path(EXTENDED_FILE))?;
                loaded = Corpus::from_notes(notes).map_err(input)?;
                &loaded
            }
        };
        let rows = emit_distribution(&self.corpus, extended, &self.cfg.distribution);
        let csv = distribution_csv(&rows);
        println!("distribution: {} rows", rows.len());
        self.write(DISTRIBUTION_FILE, &csv)?;
        Ok(csv)
    }

    pub fn evaluate(&self) -> StageResult<MetricReport> {
        let ev = &self.cfg.evaluation;
        let gold_path = ev
            .gold
            .as_ref()
            .ok_or_else(|| input(anyhow!("evaluation.gold is not set")))?;
        let scores_path = ev
            .scores
            .as_ref()
            .ok_or_else(|| input(anyhow!("evaluation.scores is not set")))?;
        let gold = GoldMatrix::from_jsonl(&read_text(gold_path)?, self.taxonomy.codes().cloned())
            .with_context(|| format!("gold labels {}", gold_path.display()))
            .map_err(input)?;
        let scores = ScoreMatrix::from_jsonl(&read_text(scores_path)?, ev.threshold)
            .with_context(|| format!("scores {}", scores_path.display()))
            .map_err(input)?;
        let tiers: BTreeMap<CodeId, Tier> = gold
            .label_space()
            .iter()
            .map(|c| (c.clone(), stratify(self.corpus.freq(c))))
            .collect();
        let report = evaluate(&gold, &scores, &tiers, &ev.ks, ev.macro_mode).map_err(input)?;
        println!(
            "evaluate: {} samples, micro-F1 {:.4}, macro-F1 {:.4}",
            report.samples, report.overall.f1_micro, report.overall.f1_macro
        );
        self.write(REPORT_FILE, &json_string(&report))?;
        Ok(report)
    }

    /// Every stage in order, passing artifacts in memory. Evaluation runs
    /// only when gold labels and scores are configured.
    pub fn run_all(&self) -> StageResult<Status> {
        self.stats()?;
        let plan = self.plan()?;
        let cs = self.codesets(Some(plan))?;
        let prompts = self.prompts(Some(&cs.codesets))?;
        let generated = self.generate(Some(&prompts.prompts), Some(&cs.codesets))?;
        let failed = !generated.failures.is_empty();
        let extended = self.merge(Some(generated.notes.into_iter().map(|n| n.note).collect()))?;
        self.distribution(Some(&extended))?;
        let ev = &self.cfg.evaluation;
        if ev.gold.is_some() && ev.scores.is_some() {
            self.evaluate()?;
        }
        Ok(if failed {
            Status::PartialFailure
        } else {
            Status::Complete
        })
    }
}
