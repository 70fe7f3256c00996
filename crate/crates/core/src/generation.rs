//! Note generation: pluggable backends, retry and regeneration policy,
//! code-note alignment scoring and bounded-concurrency batches.

use std::collections::HashSet;
use std::time::Duration;

use async_trait::async_trait;
use backon::{BackoffBuilder, ExponentialBuilder};
use futures::stream::{self, StreamExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchoring::AnchoredCodeSet;
use crate::code::CodeId;
use crate::corpus::{Note, Origin};
use crate::prompting::{DEFINITIONS_HEADER, SYNONYMS_HEADER};
use crate::seed::{derive_seed, sha256_hex};
use crate::taxonomy::Taxonomy;

pub const API_KEY_ENV: &str = "LTA_API_KEY";
pub const API_URL_ENV: &str = "LTA_API_URL";

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum BackendError {
    /// Worth retrying: timeouts, connection resets, 429 and 5xx responses.
    #[error("transient backend failure: {0}")]
    Transient(String),
    #[error("backend failure: {0}")]
    Fatal(String),
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum GenerationError {
    #[error("generation failed for {anchor} replicate {replicate} after {attempts} backend call(s): {reason}")]
    Failed {
        anchor: CodeId,
        replicate: u32,
        attempts: u32,
        reason: String,
    },
    #[error("empty prompt for {0}")]
    EmptyPrompt(CodeId),
    #[error("{prompts} prompts but {codesets} code sets")]
    Misaligned { prompts: usize, codesets: usize },
    #[error("backend configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeParams {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            max_tokens: 1024,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GenerationRequest<'a> {
    pub prompt: &'a str,
    pub params: &'a DecodeParams,
    /// Per-attempt seed; backends without seeding ignore it.
    pub seed: u64,
}

/// A text generator. Implementations must tolerate concurrent calls.
#[async_trait]
pub trait GeneratorBackend: Send + Sync {
    fn id(&self) -> &str;
    async fn generate(&self, req: GenerationRequest<'_>) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub decode: DecodeParams,
    pub min_alignment: f64,
    /// Extra generation rounds allowed when a note misses `min_alignment`.
    pub max_regen: u32,
    pub max_in_flight: usize,
    pub timeout_secs: f64,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    /// Retries of a single call after transient failures.
    pub max_retries: u32,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            decode: DecodeParams::default(),
            min_alignment: 0.5,
            max_regen: 2,
            max_in_flight: 8,
            timeout_secs: 60.0,
            base_delay_ms: 200,
            max_delay_ms: 10_000,
            max_retries: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticNote {
    #[serde(flatten)]
    pub note: Note,
    pub prompt_hash: String,
    pub backend: String,
    /// Generation rounds used, 1 when the first note passed the gate.
    pub attempt: u32,
    pub alignment: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub anchor: CodeId,
    pub replicate: u32,
    pub reason: String,
    pub attempts: u32,
}

/// Id of the synthetic note for one code-set replicate.
pub fn note_id(anchor: &CodeId, replicate: u32) -> String {
    format!("syn-{anchor}-{replicate}")
}

const STOPWORDS: &[&str] = &[
    "about", "above", "after", "again", "against", "also", "been", "before", "being", "below", "between", "both",
    "does", "doing", "down", "during", "each", "from", "further", "have", "having", "here", "into", "more", "most",
    "other", "over", "same", "should", "some", "such", "than", "that", "their", "them", "then", "there", "these",
    "they", "this", "those", "through", "under", "until", "very", "were", "what", "when", "where", "which", "while",
    "with", "without", "would",
];

fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

fn content_words(phrase: &str) -> Vec<String> {
    let mut words: Vec<String> = tokens(phrase)
        .filter(|w| w.chars().count() >= 4 && !STOPWORDS.contains(&w.as_str()))
        .collect();
    words.sort();
    words.dedup();
    words
}

fn phrase_matches(phrase: &str, text_lower: &str, text_words: &HashSet<String>) -> bool {
    let words = content_words(phrase);
    if words.is_empty() {
        let p = phrase.trim().to_lowercase();
        return !p.is_empty() && text_lower.contains(&p);
    }
    let hits = words.iter().filter(|w| text_words.contains(*w)).count();
    hits * 10 >= words.len() * 6
}

/// Fraction of `cs.codes` evidenced in `text`: a code counts when its
/// description or one of its synonyms has at least 60% of its content
/// words (4+ letters, stopwords removed) present in the text. Codes
/// without any knowledge fall back to their code string.
pub fn validate_alignment(text: &str, cs: &AnchoredCodeSet, taxonomy: &Taxonomy) -> f64 {
    if cs.codes.is_empty() || text.trim().is_empty() {
        return 0.0;
    }
    let lower = text.to_lowercase();
    let words: HashSet<String> = tokens(text).collect();
    let matched = cs
        .codes
        .iter()
        .filter(|code| {
            let card = taxonomy.knowledge_or_empty(code);
            let mut phrases: Vec<String> = std::iter::once(card.description)
                .chain(card.synonyms)
                .filter(|p| !p.trim().is_empty())
                .collect();
            if phrases.is_empty() {
                phrases.push(code.to_string());
            }
            phrases.iter().any(|p| phrase_matches(p, &lower, &words))
        })
        .count();
    matched as f64 / cs.codes.len() as f64
}

/// `(code, text)` bullet lines of a rendered prompt section.
fn parse_section<'a>(prompt: &'a str, header: &str) -> Vec<(&'a str, &'a str)> {
    let mut lines = prompt.lines().skip_while(|l| l.trim() != header);
    if lines.next().is_none() {
        return Vec::new();
    }
    lines
        .map_while(|l| l.strip_prefix("- "))
        .filter_map(|l| l.split_once(": "))
        .collect()
}

const AGES: &[u32] = &[48, 55, 61, 67, 72, 79, 84];
const PRESENTATIONS: &[&str] = &[
    "progressive shortness of breath",
    "generalized weakness",
    "worsening fatigue",
    "chest discomfort",
    "poor oral intake",
];
const COURSE: &[&str] = &[
    "{d} was confirmed during the admission and managed with appropriate therapy.",
    "The team addressed {d}; the treatment plan was adjusted and the patient responded well.",
    "{d} was evaluated by the consulting service and medications were optimized.",
    "For {d}, the patient was monitored closely and remained stable.",
];

/// Deterministic stand-in generator. It reads the definitions (and
/// synonyms) back out of a rendered prompt and weaves every description
/// into a templated discharge summary. Prompts without a definitions
/// section get a generic note that mentions no diagnosis.
pub fn mock_generate(prompt: &str, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let defs = parse_section(prompt, DEFINITIONS_HEADER);
    let syns = parse_section(prompt, SYNONYMS_HEADER);
    let age = AGES.choose(&mut rng).unwrap();
    let sex = if rng.gen_bool(0.5) { "man" } else { "woman" };

    if defs.is_empty() {
        return format!(
            "Chief Complaint:\n{}\n\nHistory of Present Illness:\nThe patient is a {age}-year-old {sex} admitted for evaluation.\n\n\
             Hospital Course:\nThe patient was observed and treated supportively.\n\n\
             Discharge Diagnoses:\nSee attending documentation.\n",
            PRESENTATIONS.choose(&mut rng).unwrap()
        );
    }

    let descriptions: Vec<String> = defs
        .iter()
        .map(|(code, d)| {
            if *d == crate::prompting::NO_DESCRIPTION {
                (*code).to_string()
            } else {
                (*d).to_string()
            }
        })
        .collect();
    let mut out = String::new();
    out.push_str("Chief Complaint:\n");
    out.push_str(PRESENTATIONS.choose(&mut rng).unwrap());
    out.push_str("\n\nHistory of Present Illness:\n");
    out.push_str(&format!(
        "The patient is a {age}-year-old {sex} admitted with {}.",
        descriptions[0]
    ));
    if descriptions.len() > 1 {
        out.push_str(&format!(" Past history is notable for {}.", descriptions[1..].join("; ")));
    }
    out.push_str("\n\nHospital Course:\n");
    for (i, (code, _)) in defs.iter().enumerate() {
        let line = COURSE.choose(&mut rng).unwrap().replace("{d}", &descriptions[i]);
        out.push_str(&line);
        if let Some((_, s)) = syns.iter().find(|(c, _)| c == code) {
            let first = s.split("; ").next().unwrap_or(s);
            out.push_str(&format!(" Also documented as {first}."));
        }
        out.push('\n');
    }
    out.push_str("\nDischarge Diagnoses:\n");
    for (i, d) in descriptions.iter().enumerate() {
        out.push_str(&format!("{}. {d}\n", i + 1));
    }
    out
}

/// Backend wrapping [`mock_generate`].
#[derive(Debug, Clone, Copy, Default)]
pub struct MockBackend;

#[async_trait]
impl GeneratorBackend for MockBackend {
    fn id(&self) -> &str {
        "mock"
    }

    async fn generate(&self, req: GenerationRequest<'_>) -> Result<String, BackendError> {
        Ok(mock_generate(req.prompt, req.seed))
    }
}

#[derive(Serialize)]
struct HttpRequest<'a> {
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
}

#[derive(Deserialize)]
struct HttpResponse {
    text: String,
}

/// Vendor-neutral HTTP backend: POSTs `{"prompt", "max_tokens",
/// "temperature"}` and reads `{"text"}` from the response.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    client: reqwest::Client,
    url: String,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(url: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            client: reqwest::Client::new(),
            url: url.into(),
            api_key,
        }
    }

    /// Reads the URL from `LTA_API_URL` (unless `url` is given) and the
    /// bearer token from `LTA_API_KEY`.
    pub fn from_env(url: Option<&str>) -> Result<Self, GenerationError> {
        let url = match url {
            Some(u) => u.to_string(),
            None => std::env::var(API_URL_ENV)
                .map_err(|_| GenerationError::Config(format!("{API_URL_ENV} is not set")))?,
        };
        Ok(Self::new(url, std::env::var(API_KEY_ENV).ok()))
    }
}

#[async_trait]
impl GeneratorBackend for HttpBackend {
    fn id(&self) -> &str {
        "http"
    }

    async fn generate(&self, req: GenerationRequest<'_>) -> Result<String, BackendError> {
        let body = HttpRequest {
            prompt: req.prompt,
            max_tokens: req.params.max_tokens,
            temperature: req.params.temperature,
        };
        let mut builder = self.client.post(&self.url).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder
            .send()
            .await
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            let msg = format!("HTTP {status}");
            return Err(if status.is_server_error() || status.as_u16() == 429 || status.as_u16() == 408 {
                BackendError::Transient(msg)
            } else {
                BackendError::Fatal(msg)
            });
        }
        let parsed: HttpResponse = resp
            .json()
            .await
            .map_err(|e| BackendError::Fatal(format!("bad response body: {e}")))?;
        Ok(parsed.text)
    }
}

/// One backend call with timeout and exponential backoff on transient
/// failures. Returns the text or the failure reason, plus the call count.
async fn call_with_retries(
    backend: &dyn GeneratorBackend,
    req: GenerationRequest<'_>,
    cfg: &GenerationConfig,
) -> (Result<String, String>, u32) {
    let mut delays = ExponentialBuilder::default()
        .with_min_delay(Duration::from_millis(cfg.base_delay_ms))
        .with_max_delay(Duration::from_millis(cfg.max_delay_ms.max(cfg.base_delay_ms)))
        .with_max_times(cfg.max_retries as usize)
        .with_jitter_seed(req.seed)
        .build();
    let timeout = Duration::from_secs_f64(cfg.timeout_secs.max(0.001));
    let mut calls = 0;
    loop {
        calls += 1;
        let reason = match tokio::time::timeout(timeout, backend.generate(req)).await {
            Ok(Ok(text)) => return (Ok(text), calls),
            Ok(Err(BackendError::Fatal(m))) => return (Err(m), calls),
            Ok(Err(BackendError::Transient(m))) => m,
            Err(_) => format!("timed out after {:.3}s", timeout.as_secs_f64()),
        };
        match delays.next() {
            Some(d) => {
                log::debug!("transient failure ({reason}); retrying in {d:?}");
                tokio::time::sleep(d).await;
            }
            None => return (Err(format!("retries exhausted: {reason}")), calls),
        }
    }
}

/// Generate one note for `cs`, regenerating while alignment stays below
/// `cfg.min_alignment` (at most `cfg.max_regen` extra rounds) and keeping
/// the best-scoring text.
pub async fn generate_one(
    prompt: &str,
    cs: &AnchoredCodeSet,
    backend: &dyn GeneratorBackend,
    taxonomy: &Taxonomy,
    cfg: &GenerationConfig,
    seed: u64,
) -> Result<SyntheticNote, GenerationError> {
    if prompt.trim().is_empty() {
        return Err(GenerationError::EmptyPrompt(cs.anchor.clone()));
    }
    let fail = |attempts, reason| GenerationError::Failed {
        anchor: cs.anchor.clone(),
        replicate: cs.replicate,
        attempts,
        reason,
    };
    let mut best: Option<(String, f64, u32)> = None;
    let mut calls = 0;
    for round in 0..=cfg.max_regen {
        let req = GenerationRequest {
            prompt,
            params: &cfg.decode,
            seed: derive_seed(seed, &format!("round{round}")),
        };
        let (result, n) = call_with_retries(backend, req, cfg).await;
        calls += n;
        let text = match result {
            Ok(t) => t,
            // A transport failure after a below-gate note still leaves that note.
            Err(reason) if best.as_ref().is_some_and(|b| !b.0.trim().is_empty()) => {
                log::warn!("{}: keeping earlier attempt after failure: {reason}", cs.anchor);
                break;
            }
            Err(reason) => return Err(fail(calls, reason)),
        };
        let alignment = validate_alignment(&text, cs, taxonomy);
        if best.as_ref().map_or(true, |b| alignment > b.1) {
            best = Some((text, alignment, round + 1));
        }
        if alignment >= cfg.min_alignment {
            best.as_mut().unwrap().2 = round + 1;
            break;
        }
        if let Some(b) = best.as_mut() {
            b.2 = round + 1;
        }
    }
    let (text, alignment, attempt) = best.expect("at least one round ran");
    if text.trim().is_empty() {
        return Err(fail(calls, "empty generation".to_string()));
    }
    Ok(SyntheticNote {
        note: Note {
            id: note_id(&cs.anchor, cs.replicate),
            text,
            codes: cs.codes.clone(),
            origin: Origin::Synthetic,
            anchor: Some(cs.anchor.clone()),
        },
        prompt_hash: sha256_hex(prompt),
        backend: backend.id().to_string(),
        attempt,
        alignment,
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchOutcome {
    /// In input order.
    pub notes: Vec<SyntheticNote>,
    pub failures: Vec<FailureRecord>,
    /// Notes kept although no attempt reached the alignment gate.
    pub below_gate: usize,
}

/// Generate notes for aligned `prompts`/`codesets` with at most
/// `cfg.max_in_flight` requests outstanding. Output order follows input
/// order whatever the completion order; failures are reported, not raised.
pub async fn run_batch(
    prompts: &[String],
    codesets: &[AnchoredCodeSet],
    backend: &dyn GeneratorBackend,
    taxonomy: &Taxonomy,
    cfg: &GenerationConfig,
    seed: u64,
) -> Result<BatchOutcome, GenerationError> {
    if prompts.len() != codesets.len() {
        return Err(GenerationError::Misaligned {
            prompts: prompts.len(),
            codesets: codesets.len(),
        });
    }
    let mut results: Vec<(usize, Result<SyntheticNote, GenerationError>)> =
        stream::iter(prompts.iter().zip(codesets).enumerate())
            .map(|(i, (prompt, cs))| async move {
                let item_seed = derive_seed(seed, &format!("{}#{}", cs.anchor.as_normalized(), cs.replicate));
                (i, generate_one(prompt, cs, backend, taxonomy, cfg, item_seed).await)
            })
            .buffer_unordered(cfg.max_in_flight.max(1))
            .collect()
            .await;
    results.sort_by_key(|(i, _)| *i);

    let mut out = BatchOutcome::default();
    for ((_, result), cs) in results.into_iter().zip(codesets) {
        match result {
            Ok(note) => {
                if note.alignment < cfg.min_alignment {
                    out.below_gate += 1;
                }
                out.notes.push(note);
            }
            Err(GenerationError::Failed {
                attempts, reason, ..
            }) => out.failures.push(FailureRecord {
                anchor: cs.anchor.clone(),
                replicate: cs.replicate,
                reason,
                attempts,
            }),
            Err(e) => out.failures.push(FailureRecord {
                anchor: cs.anchor.clone(),
                replicate: cs.replicate,
                reason: e.to_string(),
                attempts: 0,
            }),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchoring::SetStrategy;
    use crate::code::code;
    use crate::corpus::Corpus;
    use crate::prompting::{build_prompt, PromptConfig, PromptTemplate};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    fn taxonomy() -> Taxonomy {
        Taxonomy::parse(
            "code\tdescription\tsynonyms\tparent\n\
             N18.23\tChronic kidney disease stage 3\tCKD stage 3\t\n\
             N18.29\tChronic kidney disease stage 2\t\t\n\
             I10\tEssential (primary) hypertension\tHTN\t\n\
             E11.9\tType 2 diabetes mellitus without complications\t\t\n",
        )
        .unwrap()
    }

    fn codeset(codes: &[&str]) -> AnchoredCodeSet {
        AnchoredCodeSet {
            anchor: code(codes[0]),
            codes: codes.iter().map(|c| code(c)).collect(),
            strategy: SetStrategy::Clone,
            source_note: "n1".into(),
            replaced_sibling: None,
            donor_tier: None,
            replicate: 0,
        }
    }

    fn prompt_for(cs: &AnchoredCodeSet) -> String {
        let b = build_prompt(cs, &taxonomy(), &Corpus::default(), &PromptConfig::default());
        PromptTemplate::default_template().render(&b)
    }

    fn fast() -> GenerationConfig {
        GenerationConfig {
            base_delay_ms: 1,
            max_delay_ms: 5,
            ..Default::default()
        }
    }

    #[test]
    fn alignment_content_word_rule() {
        let t = taxonomy();
        let cs = codeset(&["N18.23", "I10"]);
        assert_eq!(validate_alignment("chronic kidney disease stage 3", &cs, &t), 0.5);
        assert_eq!(validate_alignment("", &cs, &t), 0.0);
        let all = "Chronic kidney disease stage 3. Essential (primary) hypertension.";
        assert_eq!(validate_alignment(all, &cs, &t), 1.0);
        // 2 of 3 content words (chronic, kidney, disease, stage -> 3/4 = 75%)
        assert_eq!(validate_alignment("kidney disease stage", &cs, &t), 0.5);
        // 2 of 4 = 50% is below 60%
        assert_eq!(validate_alignment("kidney disease", &cs, &t), 0.0);
        // synonym with no content words matches as a phrase
        assert_eq!(validate_alignment("history of htn", &cs, &t), 0.5);
    }

    #[test]
    fn alignment_unknown_code_uses_code_string() {
        let cs = codeset(&["Z99.89"]);
        assert_eq!(validate_alignment("status Z99.89 noted", &cs, &taxonomy()), 1.0);
        assert_eq!(validate_alignment("nothing relevant", &cs, &taxonomy()), 0.0);
    }

    #[test]
    fn mock_mentions_every_definition() {
        let cs = codeset(&["N18.23", "I10", "E11.9"]);
        let prompt = prompt_for(&cs);
        let text = mock_generate(&prompt, 1);
        for d in [
            "Chronic kidney disease stage 3",
            "Essential (primary) hypertension",
            "Type 2 diabetes mellitus without complications",
        ] {
            assert!(text.contains(d), "{d} missing from {text}");
        }
        for h in ["History of Present Illness", "Hospital Course", "Discharge Diagnoses"] {
            assert!(text.contains(h));
        }
        assert_eq!(text, mock_generate(&prompt, 1));
        assert_eq!(validate_alignment(&text, &cs, &taxonomy()), 1.0);
    }

    #[test]
    fn mock_without_definitions_is_generic() {
        let cs = codeset(&["N18.23", "I10"]);
        let prompt = prompt_for(&cs).replace(DEFINITIONS_HEADER, "### Removed");
        let text = mock_generate(&prompt, 3);
        assert!(text.contains("Hospital Course"));
        assert_eq!(validate_alignment(&text, &cs, &taxonomy()), 0.0);
    }

    /// Replays a fixed script of responses, then repeats the last one.
    struct Scripted {
        script: Mutex<Vec<Result<String, BackendError>>>,
        calls: AtomicUsize,
    }

    impl Scripted {
        fn new(mut script: Vec<Result<String, BackendError>>) -> Self {
            script.reverse();
            Self {
                script: Mutex::new(script),
                calls: AtomicUsize::new(0),
            }
        }
    }

    #[async_trait]
    impl GeneratorBackend for Scripted {
        fn id(&self) -> &str {
            "scripted"
        }
        async fn generate(&self, _req: GenerationRequest<'_>) -> Result<String, BackendError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let mut s = self.script.lock().unwrap();
            if s.len() > 1 {
                s.pop().unwrap()
            } else {
                s[0].clone()
            }
        }
    }

    #[tokio::test]
    async fn mock_note_has_full_alignment() {
        let cs = codeset(&["N18.23", "I10"]);
        let prompt = prompt_for(&cs);
        let note = generate_one(&prompt, &cs, &MockBackend, &taxonomy(), &fast(), 5).await.unwrap();
        assert_eq!(note.alignment, 1.0);
        assert_eq!(note.attempt, 1);
        assert_eq!(note.note.id, "syn-N18.23-0");
        assert_eq!(note.note.origin, Origin::Synthetic);
        assert_eq!(note.note.anchor, Some(code("N18.23")));
        assert_eq!(note.prompt_hash, sha256_hex(&prompt));
        assert_eq!(note.backend, "mock");
    }

    #[tokio::test]
    async fn empty_twice_then_valid() {
        let cs = codeset(&["N18.23", "I10"]);
        let good = "Chronic kidney disease stage 3 and essential hypertension.".to_string();
        let backend = Scripted::new(vec![Ok(String::new()), Ok(String::new()), Ok(good.clone())]);
        let note = generate_one("p", &cs, &backend, &taxonomy(), &fast(), 0).await.unwrap();
        assert_eq!(note.attempt, 3);
        assert_eq!(note.note.text, good);
        assert_eq!(note.alignment, 1.0);
    }

    #[tokio::test]
    async fn keeps_best_when_gate_never_met() {
        let cs = codeset(&["N18.23", "I10", "E11.9"]);
        let backend = Scripted::new(vec![
            Ok("essential hypertension".into()),
            Ok("nothing".into()),
            Ok("nothing".into()),
        ]);
        let note = generate_one("p", &cs, &backend, &taxonomy(), &fast(), 0).await.unwrap();
        assert_eq!(note.note.text, "essential hypertension");
        assert_eq!(note.attempt, 3);
        assert!((note.alignment - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(backend.calls.load(Ordering::SeqCst), 3);
    }

    #[tokio::test]
    async fn always_empty_is_a_failure() {
        let cs = codeset(&["N18.23"]);
        let backend = Scripted::new(vec![Ok(String::new())]);
        let err = generate_one("p", &cs, &backend, &taxonomy(), &fast(), 0).await.unwrap_err();
        assert!(matches!(err, GenerationError::Failed { attempts: 3, .. }), "{err}");
    }

    #[tokio::test]
    async fn transient_failures_are_retried() {
        let cs = codeset(&["I10"]);
        let backend = Scripted::new(vec![
            Err(BackendError::Transient("503".into())),
            Err(BackendError::Transient("503".into())),
            Ok("Essential primary hypertension".into()),
        ]);
        let note = generate_one("p", &cs, &backend, &taxonomy(), &fast(), 0).await.unwrap();
        assert_eq!(note.attempt, 1);
        assert_eq!(backend.calls.load(Ordering::SeqCst), 3);
    }

    #[tokio::test]
    async fn exhausted_and_fatal_failures() {
        let cs = codeset(&["I10"]);
        let backend = Scripted::new(vec![Err(BackendError::Transient("reset".into()))]);
        let err = generate_one("p", &cs, &backend, &taxonomy(), &fast(), 0).await.unwrap_err();
        // first call + max_retries
        assert!(matches!(err, GenerationError::Failed { attempts: 4, .. }), "{err}");

        let backend = Scripted::new(vec![Err(BackendError::Fatal("401".into()))]);
        let err = generate_one("p", &cs, &backend, &taxonomy(), &fast(), 0).await.unwrap_err();
        assert!(matches!(err, GenerationError::Failed { attempts: 1, .. }));

        assert!(matches!(
            generate_one("  ", &cs, &MockBackend, &taxonomy(), &fast(), 0).await,
            Err(GenerationError::EmptyPrompt(_))
        ));
    }

    struct Slow;

    #[async_trait]
    impl GeneratorBackend for Slow {
        fn id(&self) -> &str {
            "slow"
        }
        async fn generate(&self, _req: GenerationRequest<'_>) -> Result<String, BackendError> {
            tokio::time::sleep(Duration::from_secs(5)).await;
            Ok("late".into())
        }
    }

    #[tokio::test]
    async fn timeouts_count_as_transient() {
        let cfg = GenerationConfig {
            timeout_secs: 0.01,
            max_retries: 1,
            ..fast()
        };
        let err = generate_one("p", &codeset(&["I10"]), &Slow, &taxonomy(), &cfg, 0).await.unwrap_err();
        match err {
            GenerationError::Failed { attempts, reason, .. } => {
                assert_eq!(attempts, 2);
                assert!(reason.contains("timed out"));
            }
            e => panic!("{e}"),
        }
    }

    /// Fails hard for one anchor, otherwise delegates to the mock.
    struct FailsFor(CodeId);

    #[async_trait]
    impl GeneratorBackend for FailsFor {
        fn id(&self) -> &str {
            "mock"
        }
        async fn generate(&self, req: GenerationRequest<'_>) -> Result<String, BackendError> {
            if req.prompt.contains(&format!("Target diagnosis codes: {}", self.0)) {
                return Err(BackendError::Fatal("rejected".into()));
            }
            MockBackend.generate(req).await
        }
    }

    #[tokio::test]
    async fn batch_order_and_isolation() {
        let t = taxonomy();
        let anchors = ["N18.23", "N18.29", "I10", "E11.9"];
        let mut codesets = Vec::new();
        for r in 0..10u32 {
            let mut cs = codeset(&[anchors[r as usize % 4], "I10"]);
            cs.replicate = r;
            codesets.push(cs);
        }
        let prompts: Vec<String> = codesets.iter().map(prompt_for).collect();
        let cfg = GenerationConfig {
            max_in_flight: 4,
            ..fast()
        };
        let out = run_batch(&prompts, &codesets, &MockBackend, &t, &cfg, 42).await.unwrap();
        assert_eq!(out.notes.len(), 10);
        assert!(out.failures.is_empty());
        let ids: Vec<String> = out.notes.iter().map(|n| n.note.id.clone()).collect();
        let expected: Vec<String> = codesets.iter().map(|cs| note_id(&cs.anchor, cs.replicate)).collect();
        assert_eq!(ids, expected);

        let mut one_bad = codesets.clone();
        one_bad[3] = codeset(&["Z99.89"]);
        one_bad[3].replicate = 3;
        let mut bad_prompts = prompts.clone();
        bad_prompts[3] = prompt_for(&one_bad[3]);
        let out = run_batch(&bad_prompts, &one_bad, &FailsFor(code("Z99.89")), &t, &cfg, 42).await.unwrap();
        assert_eq!(out.notes.len(), 9);
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].anchor, code("Z99.89"));
        assert_eq!(out.failures[0].replicate, 3);

        let empty = run_batch(&[], &[], &MockBackend, &t, &cfg, 42).await.unwrap();
        assert!(empty.notes.is_empty() && empty.failures.is_empty());
        assert!(matches!(
            run_batch(&prompts[..2], &codesets, &MockBackend, &t, &cfg, 42).await,
            Err(GenerationError::Misaligned { .. })
        ));
    }

    #[test]
    fn synthetic_note_json_shape() {
        let cs = codeset(&["N18.23", "I10"]);
        let note = SyntheticNote {
            note: Note {
                id: "syn-N18.23-0".into(),
                text: "t".into(),
                codes: cs.codes.clone(),
                origin: Origin::Synthetic,
                anchor: Some(code("N18.23")),
            },
            prompt_hash: "ab".into(),
            backend: "mock".into(),
            attempt: 1,
            alignment: 1.0,
        };
        let json = serde_json::to_value(&note).unwrap();
        assert_eq!(json["origin"], "synthetic");
        assert_eq!(json["anchor"], "N18.23");
        assert_eq!(json["codes"], serde_json::json!(["I10", "N18.23"]));
        assert_eq!(json["alignment"], 1.0);
        // loadable as a plain corpus note
        let corpus = Corpus::from_jsonl(&json.to_string()).unwrap();
        assert_eq!(corpus.notes()[0], note.note);
    }
}
