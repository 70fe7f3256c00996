//! Pipeline configuration file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use lta_core::evalkit::{MacroMode, DEFAULT_KS, DEFAULT_THRESHOLD};
use lta_core::generation::GenerationConfig;
use lta_core::planner::{AllocationParams, BinSpec};
use lta_core::prompting::PromptConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub paths: Paths,
    #[serde(default)]
    pub allocation: AllocationParams,
    #[serde(default)]
    pub prompt: PromptConfig,
    #[serde(default)]
    pub generation: GenerationSection,
    #[serde(default)]
    pub distribution: BinSpec,
    #[serde(default)]
    pub evaluation: EvaluationSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub taxonomy: PathBuf,
    pub corpus: PathBuf,
    pub out_dir: PathBuf,
    /// Prompt template; the built-in discharge summary template when absent.
    pub template: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationSection {
    #[serde(default)]
    pub backend: BackendKind,
    /// Endpoint for the HTTP backend; falls back to `LTA_API_URL`.
    pub url: Option<String>,
    #[serde(flatten)]
    pub params: GenerationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub gold: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub threshold: f64,
    pub ks: Vec<usize>,
    pub macro_mode: MacroMode,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            gold: None,
            scores: None,
            threshold: DEFAULT_THRESHOLD,
            ks: DEFAULT_KS.to_vec(),
            macro_mode: MacroMode::default(),
        }
    }
}

impl PipelineConfig {
    /// Load a TOML config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: Self = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_relative_to(base);
        Ok(cfg)
    }

    pub fn resolve_relative_to(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.taxonomy);
        fix(&mut self.paths.corpus);
        fix(&mut self.paths.out_dir);
        if let Some(t) = self.paths.template.as_mut() {
            fix(t);
        }
        if let Some(g) = self.evaluation.gold.as_mut() {
            fix(g);
        }
        if let Some(s) = self.evaluation.scores.as_mut() {
            fix(s);
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.allocation.validate()?;
        let g = &self.generation.params;
        if g.max_in_flight == 0 {
            bail!("generation.max_in_flight must be at least 1");
        }
        if !(0.0..=1.0).contains(&g.min_alignment) {
            bail!("generation.min_alignment must lie in [0, 1]");
        }
        if g.timeout_secs <= 0.0 {
            bail!("generation.timeout_secs must be positive");
        }
        if self.evaluation.ks.contains(&0) {
            bail!("evaluation.ks entries must be at least 1");
        }
        Ok(())
    }

    /// Seed for stochastic stages.
    pub fn require_seed(&self) -> anyhow::Result<u64> {
        self.seed
            .context("a seed is required for this stage; set `seed` in the config or pass --seed")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        seed = 7
        [paths]
        taxonomy = "tax.tsv"
        corpus = "notes.jsonl"
        out_dir = "out"
    "#;

    #[test]
    fn defaults_fill_missing_sections() {
        let cfg: PipelineConfig = toml::from_str(MINIMAL).unwrap();
        assert_eq!(cfg.allocation, AllocationParams::default());
        assert_eq!(cfg.prompt, PromptConfig::default());
        assert_eq!(cfg.generation.backend, BackendKind::Mock);
        assert_eq!(cfg.generation.params, GenerationConfig::default());
        assert_eq!(cfg.evaluation.ks, vec![8, 15]);
        cfg.validate().unwrap();
    }

    #[test]
    fn relative_paths_follow_config_dir() {
        let mut cfg: PipelineConfig = toml::from_str(MINIMAL).unwrap();
        cfg.resolve_relative_to(Path::new("/etc/lta"));
        assert_eq!(cfg.paths.taxonomy, Path::new("/etc/lta/tax.tsv"));
        assert_eq!(cfg.paths.out_dir, Path::new("/etc/lta/out"));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(toml::from_str::<PipelineConfig>(&format!("{MINIMAL}\n[evaluation]\nkz = [1]")).is_err());
        let mut cfg: PipelineConfig = toml::from_str(MINIMAL).unwrap();
        cfg.generation.params.max_in_flight = 0;
        assert!(cfg.validate().is_err());
        cfg.seed = None;
        assert!(cfg.require_seed().is_err());
    }

    #[test]
    fn generation_params_are_flat() {
        let cfg: PipelineConfig = toml::from_str(&format!(
            "{MINIMAL}\n[generation]\nbackend = \"http\"\nmax_in_flight = 3\n[generation.decode]\ntemperature = 0.2"
        ))
        .unwrap();
        assert_eq!(cfg.generation.backend, BackendKind::Http);
        assert_eq!(cfg.generation.params.max_in_flight, 3);
        assert_eq!(cfg.generation.params.decode.temperature, 0.2);
    }
}
