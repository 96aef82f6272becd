//! Run orchestration: trial dispatch, append-only persistence, resumption,
//! sweeps, and report generation.
//!
//! A run directory holds `run.json` (the manifest), `records.jsonl` (one
//! [`TrialRecord`] per line, in canonical `(seed, item)` order) and
//! `summary.json`. Records are written through a reorder buffer, so the file
//! is always a prefix of the finished file regardless of concurrency.

mod config;
pub mod report;
mod search;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};

use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    BackendError, BackendsConfig, ChatBackend, ChatRequest, ContentPart, DecodeMode, Embedder, TrialContext,
};
use crate::dataset::{load_dataset, ClassLabel, CueConflictItem, DatasetError, DatasetManifest};
use crate::extraction::{
    build_extraction_prompt, caption_stats, embed_classify, mentioned_labels, parse_extraction_reply,
    parse_vqa_response, CaptionAnalysis, CaptionStats, ClassVectors, RefusalPhrases, Resolution,
    SimpleTokenCounter, TokenCounter, VqaParse,
};
use crate::metrics::{
    classify_outcome, confidence_profile, default_letter_map, BiasReport, ConfidenceProfile, NonAnswer, Outcome,
    OutcomeCounts,
};
use crate::prompts::{PromptVariant, Task};
use crate::steering::{ImageCache, SteeringError};

pub use config::{DecodeSetting, RunConfig, SweepConfig};
pub use search::{run_search, search_with, SearchRunConfig};

pub const RECORDS_FILE: &str = "records.jsonl";
pub const MANIFEST_FILE: &str = "run.json";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed JSON in {path}: {message}")]
    Json { path: PathBuf, message: String },
    #[error("dataset manifest mismatch: {expected} vs {found}")]
    ManifestMismatch { expected: String, found: String },
    #[error(transparent)]
    Search(#[from] crate::steering::SearchError),
    #[error("output directory holds a different run ({0}); refusing to mix records")]
    ForeignRun(String),
}

/// What the parser made of a trial's reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum TrialParse {
    Vqa(VqaParse),
    Captioning {
        analysis: CaptionAnalysis,
        extraction_reply: String,
    },
}

/// One model interaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub run_id: String,
    pub item_id: String,
    pub seed: u64,
    pub shape: ClassLabel,
    pub texture: ClassLabel,
    pub prompt_hash: String,
    pub perturbation_hash: String,
    pub raw_reply: Option<String>,
    pub parse: Option<TrialParse>,
    pub outcome: Option<Outcome>,
    pub profile: Option<ConfidenceProfile>,
    pub latency_ms: u64,
    pub error: Option<String>,
}

impl TrialRecord {
    /// Exactly one of parse/error, and an outcome iff parsed.
    pub fn is_consistent(&self) -> bool {
        self.parse.is_some() != self.error.is_some() && self.outcome.is_some() == self.parse.is_some()
    }

    pub fn caption_analysis(&self) -> Option<&CaptionAnalysis> {
        match &self.parse {
            Some(TrialParse::Captioning { analysis, .. }) => Some(analysis),
            _ => None,
        }
    }
}

/// `run.json`: everything needed to interpret the records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub run_id: String,
    pub name: String,
    pub config_hash: String,
    pub dataset_hash: String,
    pub dataset_items: usize,
    pub dataset_excluded: usize,
    pub backend: String,
    pub prompt_text: String,
    pub prompt_hash: String,
    pub perturbation_hash: String,
    /// Hash of every shipped prompt variant, for cross-run auditing.
    pub golden_prompt_hashes: BTreeMap<String, String>,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    /// `None` for the pooled summary.
    pub seed: Option<u64>,
    pub n_total: u64,
    pub n_attempted: u64,
    pub n_errors: u64,
    /// Over attempted (non-error) trials.
    pub report: Option<BiasReport>,
    pub accuracy_of_attempted: Option<f64>,
    pub accuracy_of_total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<CaptionStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub name: String,
    pub complete: bool,
    pub expected_trials: usize,
    pub recorded_trials: usize,
    /// Trials dispatched by this invocation.
    pub new_trials: usize,
    pub per_seed: Vec<SeedSummary>,
    pub pooled: SeedSummary,
}

/// Resolved model handles for a run.
#[derive(Clone)]
pub struct RunBackends {
    pub chat: Arc<dyn ChatBackend>,
    pub embedder: Option<Arc<dyn Embedder>>,
    pub extractor: Option<Arc<dyn ChatBackend>>,
}

impl RunBackends {
    pub fn chat_only(chat: Arc<dyn ChatBackend>) -> Self {
        Self {
            chat,
            embedder: None,
            extractor: None,
        }
    }

    pub fn resolve(config: &RunConfig, registry: &BackendsConfig) -> Result<Self, RunError> {
        let chat = registry.chat_backend(&config.backend)?;
        let embedder = config.embedder.as_deref().map(|n| registry.embedder(n)).transpose()?;
        let extractor = config.extractor.as_deref().map(|n| registry.chat_backend(n)).transpose()?;
        Ok(Self {
            chat,
            embedder,
            extractor,
        })
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Stop once this many records exist in total (simulates an interrupted run).
    pub stop_after: Option<usize>,
}

/// Load the dataset and backends named by `config`, then run.
pub fn run_eval(config: &RunConfig, registry: &BackendsConfig) -> Result<RunSummary, RunError> {
    config.validate()?;
    let backends = RunBackends::resolve(config, registry)?;
    let manifest = load_dataset(&config.dataset_dir)?;
    run_with(config, &manifest, &backends, RunOptions::default())
}

pub fn run_id_for(config: &RunConfig, dataset_hash: &str) -> String {
    let h = crate::prompts::prompt_hash(&format!("{}:{dataset_hash}", config.config_hash()));
    h[..16].to_string()
}

/// Run `config` over an already loaded manifest.
pub fn run_with(
    config: &RunConfig,
    manifest: &DatasetManifest,
    backends: &RunBackends,
    options: RunOptions,
) -> Result<RunSummary, RunError> {
    config.validate()?;
    if manifest.is_empty() {
        return Err(DatasetError::EmptyDataset(manifest.source_dir.clone()).into());
    }
    let env = TrialEnv::new(config, manifest, backends)?;
    std::fs::create_dir_all(&config.output_dir)?;
    let run_manifest = env.manifest(config, manifest);
    write_or_check_manifest(&config.output_dir, &run_manifest)?;

    let plan: Vec<(u64, &CueConflictItem)> = config
        .seeds
        .iter()
        .flat_map(|&s| manifest.items.iter().map(move |it| (s, it)))
        .collect();
    let records_path = config.output_dir.join(RECORDS_FILE);
    let mut records = load_valid_prefix(&records_path, &env.run_id, &plan)?;
    let done = records.len();
    let target = options.stop_after.map_or(plan.len(), |n| n.min(plan.len())).max(done);
    let pending = &plan[done..target];
    log::info!(
        "run {}: {} of {} trials recorded, dispatching {}",
        env.run_id,
        done,
        plan.len(),
        pending.len()
    );

    let mut file = OpenOptions::new().create(true).append(true).open(&records_path)?;
    if !pending.is_empty() {
        dispatch(&env, pending, backends.chat.concurrency_limit().min(config.concurrency), |rec| {
            let mut line = serde_json::to_string(&rec).expect("records always serialize");
            line.push('\n');
            file.write_all(line.as_bytes())?;
            records.push(rec);
            Ok(())
        })?;
        file.sync_data()?;
    }

    let summary = summarize(&env.run_id, &config.display_name(), &config.seeds, plan.len(), &records, pending.len());
    let json = serde_json::to_string_pretty(&summary).expect("summaries always serialize");
    std::fs::write(config.output_dir.join(SUMMARY_FILE), json + "\n")?;
    Ok(summary)
}

/// Run trials on up to `workers` threads; `sink` sees them in `pending` order.
fn dispatch(
    env: &TrialEnv<'_>,
    pending: &[(u64, &CueConflictItem)],
    workers: usize,
    mut sink: impl FnMut(TrialRecord) -> std::io::Result<()>,
) -> Result<(), RunError> {
    let workers = workers.clamp(1, pending.len().max(1));
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel::<(usize, TrialRecord)>();
    std::thread::scope(|scope| -> Result<(), RunError> {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, abort) = (&next, &abort);
            scope.spawn(move || loop {
                if abort.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(seed, item)) = pending.get(i) else {
                    break;
                };
                if tx.send((i, env.run_trial(item, seed))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut buffer = BTreeMap::new();
        let mut expected = 0;
        for (i, rec) in rx {
            buffer.insert(i, rec);
            while let Some(rec) = buffer.remove(&expected) {
                if let Err(e) = sink(rec) {
                    abort.store(true, Ordering::SeqCst);
                    return Err(e.into());
                }
                expected += 1;
            }
        }
        Ok(())
    })
}

/// Keep the longest prefix of well-formed records that match the plan; cut the rest.
fn load_valid_prefix(
    path: &Path,
    run_id: &str,
    plan: &[(u64, &CueConflictItem)],
) -> Result<Vec<TrialRecord>, RunError> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut records = Vec::new();
    let mut valid_len = 0;
    let mut start = 0;
    while let Some(nl) = bytes[start..].iter().position(|b| *b == b'\n') {
        let line = &bytes[start..start + nl];
        let Ok(rec) = serde_json::from_slice::<TrialRecord>(line) else {
            break;
        };
        let Some(&(seed, item)) = plan.get(records.len()) else {
            break;
        };
        if rec.run_id != run_id || rec.seed != seed || rec.item_id != item.item_id {
            break;
        }
        records.push(rec);
        start += nl + 1;
        valid_len = start;
    }
    if valid_len < bytes.len() {
        log::warn!(
            "truncating {} from {} to {} bytes",
            path.display(),
            bytes.len(),
            valid_len
        );
        let f = OpenOptions::new().write(true).open(path)?;
        f.set_len(valid_len as u64)?;
    }
    Ok(records)
}

fn write_or_check_manifest(dir: &Path, manifest: &RunManifest) -> Result<(), RunError> {
    let path = dir.join(MANIFEST_FILE);
    if let Ok(text) = std::fs::read_to_string(&path) {
        let existing: RunManifest = serde_json::from_str(&text).map_err(|e| RunError::Json {
            path: path.clone(),
            message: e.to_string(),
        })?;
        if existing.run_id != manifest.run_id {
            return Err(RunError::ForeignRun(existing.run_id));
        }
    }
    let json = serde_json::to_string_pretty(manifest).expect("manifests always serialize");
    std::fs::write(path, json + "\n")?;
    Ok(())
}

/// Per-seed and pooled summaries over canonical-order records.
pub fn summarize(
    run_id: &str,
    name: &str,
    seeds: &[u64],
    expected: usize,
    records: &[TrialRecord],
    new_trials: usize,
) -> RunSummary {
    let per_seed = seeds
        .iter()
        .map(|&s| seed_summary(Some(s), records.iter().filter(|r| r.seed == s)))
        .collect();
    RunSummary {
        run_id: run_id.to_string(),
        name: name.to_string(),
        complete: records.len() == expected,
        expected_trials: expected,
        recorded_trials: records.len(),
        new_trials,
        per_seed,
        pooled: seed_summary(None, records.iter()),
    }
}

pub fn seed_summary<'a>(seed: Option<u64>, records: impl Iterator<Item = &'a TrialRecord>) -> SeedSummary {
    let mut counts = OutcomeCounts::default();
    let (mut total, mut errors) = (0u64, 0u64);
    let mut captions = Vec::new();
    for r in records {
        total += 1;
        match r.outcome {
            Some(o) => counts.add(o),
            None => errors += 1,
        }
        if let Some(a) = r.caption_analysis() {
            captions.push(a.clone());
        }
    }
    let report = BiasReport::from_counts(counts).ok();
    SeedSummary {
        seed,
        n_total: total,
        n_attempted: total - errors,
        n_errors: errors,
        accuracy_of_attempted: report.as_ref().map(|r| r.cue_accuracy),
        accuracy_of_total: if total == 0 {
            0.0
        } else {
            counts.cue_hits() as f64 / total as f64
        },
        report,
        caption: caption_stats(&captions).ok(),
    }
}

/// Shared, read-only state for executing trials.
struct TrialEnv<'a> {
    config: &'a RunConfig,
    backends: &'a RunBackends,
    run_id: String,
    dataset_hash: String,
    prompt_text: String,
    prompt_hash: String,
    perturbation_hash: String,
    logprob_k: Option<u32>,
    class_vectors: Option<ClassVectors>,
    refusals: RefusalPhrases,
    tokens: SimpleTokenCounter,
    cache: Option<ImageCache>,
}

impl<'a> TrialEnv<'a> {
    fn new(config: &'a RunConfig, manifest: &DatasetManifest, backends: &'a RunBackends) -> Result<Self, RunError> {
        let prompt_text = config
            .prompt
            .spec()
            .render()
            .map_err(|e| RunError::Config(e.to_string()))?;
        let dataset_hash = manifest.content_hash();
        let logprob_k = match (config.task, config.logprob_k) {
            (Task::Vqa, Some(k)) if backends.chat.supports_logprobs() => Some(k),
            (Task::Vqa, Some(_)) => {
                log::warn!(
                    "{} reports no logprobs; confidence profiles will be missing",
                    backends.chat.name()
                );
                None
            }
            _ => None,
        };
        let class_vectors = match (config.task, &backends.embedder) {
            (Task::Captioning, Some(e)) => Some(ClassVectors::build(e.as_ref())?),
            (Task::Captioning, None) => return Err(RunError::Config("captioning needs an embedder".into())),
            _ => None,
        };
        if config.task == Task::Captioning && backends.extractor.is_none() {
            return Err(RunError::Config("captioning needs an extractor backend".into()));
        }
        let refusals = match &config.refusal_phrases {
            Some(p) => RefusalPhrases::load(p)?,
            None => RefusalPhrases::default(),
        };
        let cache = config.image_cache_dir.as_ref().map(ImageCache::new).transpose()?;
        Ok(Self {
            run_id: run_id_for(config, &dataset_hash),
            dataset_hash,
            prompt_hash: crate::prompts::prompt_hash(&prompt_text),
            prompt_text,
            perturbation_hash: config.perturbation.hash(),
            config,
            backends,
            logprob_k,
            class_vectors,
            refusals,
            tokens: SimpleTokenCounter,
            cache,
        })
    }

    fn manifest(&self, config: &RunConfig, dataset: &DatasetManifest) -> RunManifest {
        RunManifest {
            format: "cuebias-run/1".into(),
            run_id: self.run_id.clone(),
            name: config.display_name(),
            config_hash: config.config_hash(),
            dataset_hash: self.dataset_hash.clone(),
            dataset_items: dataset.len(),
            dataset_excluded: dataset.excluded_count,
            backend: config.backend.clone(),
            prompt_text: self.prompt_text.clone(),
            prompt_hash: self.prompt_hash.clone(),
            perturbation_hash: self.perturbation_hash.clone(),
            golden_prompt_hashes: PromptVariant::GOLDEN
                .iter()
                .map(|v| (v.to_string(), v.spec().hash().expect("golden prompts render")))
                .collect(),
            config: config.clone(),
        }
    }

    fn run_trial(&self, item: &CueConflictItem, seed: u64) -> TrialRecord {
        let mut rec = TrialRecord {
            run_id: self.run_id.clone(),
            item_id: item.item_id.clone(),
            seed,
            shape: item.shape,
            texture: item.texture,
            prompt_hash: self.prompt_hash.clone(),
            perturbation_hash: self.perturbation_hash.clone(),
            raw_reply: None,
            parse: None,
            outcome: None,
            profile: None,
            latency_ms: 0,
            error: None,
        };
        let result = match self.config.task {
            Task::Vqa => self.vqa_trial(item, seed, &mut rec),
            Task::Captioning => self.caption_trial(item, seed, &mut rec),
        };
        if let Err(e) = result {
            log::debug!("trial {} seed {seed} failed: {e}", item.item_id);
            rec.error = Some(e);
            rec.parse = None;
            rec.outcome = None;
            rec.profile = None;
        }
        rec
    }

    fn image_part(&self, item: &CueConflictItem) -> Result<ContentPart, String> {
        let spec = &self.config.perturbation;
        if let (Some(w), Some(h)) = (item.width, item.height) {
            spec.check_size(w, h).map_err(|e| e.to_string())?;
        }
        if !self.backends.chat.wants_pixels() {
            return Ok(ContentPart::ImageRef {
                item_id: item.item_id.clone(),
                perturbation: spec.label(),
            });
        }
        let encode = || -> Result<Vec<u8>, SteeringError> {
            let img = item.load_image().map_err(|e| SteeringError::Io(std::io::Error::other(e.to_string())))?;
            spec.apply(&img, &item.item_id)?.to_png()
        };
        let png = match &self.cache {
            Some(c) => c.get_or_insert(&item.item_id, spec, encode),
            None => encode(),
        }
        .map_err(|e| e.to_string())?;
        Ok(ContentPart::ImagePng {
            data: base64::engine::general_purpose::STANDARD.encode(png),
        })
    }

    fn request(&self, parts: Vec<ContentPart>, trial_seed: u64) -> ChatRequest {
        let mut req = ChatRequest::single_turn(parts);
        req.temperature = self.config.temperature;
        req.max_tokens = self.config.max_tokens;
        req.decode = match self.config.decode {
            DecodeSetting::Greedy => DecodeMode::Greedy,
            DecodeSetting::Sample => DecodeMode::Sample { seed: Some(trial_seed) },
        };
        req
    }

    fn vqa_trial(&self, item: &CueConflictItem, seed: u64, rec: &mut TrialRecord) -> Result<(), String> {
        let ctx = TrialContext::for_item(item, self.config.perturbation, seed);
        let image = self.image_part(item)?;
        let mut req = self.request(
            vec![
                image,
                ContentPart::Text {
                    text: self.prompt_text.clone(),
                },
            ],
            ctx.trial_seed,
        );
        req.logprob_k = self.logprob_k;
        let reply = self.backends.chat.chat(&req, &ctx).map_err(|e| e.to_string())?;
        rec.latency_ms = reply.latency_ms;
        let parse = parse_vqa_response(&reply.text, &self.refusals);
        let flags = NonAnswer {
            refused: parse.resolution == Resolution::Refusal,
            invalid: parse.resolution == Resolution::Unrecoverable,
            generic: false,
        };
        rec.outcome = Some(classify_outcome(parse.predicted(), item, flags).map_err(|e| e.to_string())?);
        rec.profile = reply.first_token_top_logprobs.as_ref().map(|lp| {
            let pairs: Vec<(&str, f64)> = lp.iter().map(|t| (t.token.as_str(), t.logprob)).collect();
            confidence_profile(&pairs, default_letter_map)
        });
        rec.raw_reply = Some(reply.text);
        rec.parse = Some(TrialParse::Vqa(parse));
        Ok(())
    }

    fn caption_trial(&self, item: &CueConflictItem, seed: u64, rec: &mut TrialRecord) -> Result<(), String> {
        let ctx = TrialContext::for_item(item, self.config.perturbation, seed);
        let image = self.image_part(item)?;
        let req = self.request(
            vec![
                image,
                ContentPart::Text {
                    text: self.prompt_text.clone(),
                },
            ],
            ctx.trial_seed,
        );
        let reply = self.backends.chat.chat(&req, &ctx).map_err(|e| e.to_string())?;
        rec.latency_ms = reply.latency_ms;
        let caption = reply.text;
        rec.raw_reply = Some(caption.clone());

        let embedder = self.backends.embedder.as_ref().expect("checked at setup");
        let classes = self.class_vectors.as_ref().expect("checked at setup");
        let extractor = self.backends.extractor.as_ref().expect("checked at setup");
        let embedding_label = embed_classify(&caption, classes, embedder.as_ref()).map_err(|e| e.to_string())?;
        let mut ext_req = ChatRequest::single_turn(vec![ContentPart::Text {
            text: build_extraction_prompt(&caption),
        }]);
        ext_req.max_tokens = 64;
        let ext_reply = extractor.chat(&ext_req, &ctx).map_err(|e| format!("extraction: {e}"))?;
        let extraction = parse_extraction_reply(&ext_reply.text);
        let analysis = CaptionAnalysis::new(embedding_label, &extraction, self.tokens.count(&caption));

        let refused = mentioned_labels(&caption).is_empty() && self.refusals.matches(&caption);
        let outcome = if refused {
            Outcome::Refusal
        } else if self.config.generic_as_miss && analysis.generic {
            Outcome::Generic
        } else {
            classify_outcome(Some(embedding_label), item, NonAnswer::default()).map_err(|e| e.to_string())?
        };
        rec.outcome = Some(outcome);
        rec.parse = Some(TrialParse::Captioning {
            analysis,
            extraction_reply: ext_reply.text,
        });
        Ok(())
    }
}

/// Run every grid point of a sweep in turn.
pub fn run_sweep(sweep: &SweepConfig, registry: &BackendsConfig) -> Result<Vec<RunSummary>, RunError> {
    let grid = sweep.expand();
    for c in &grid {
        c.validate()?;
    }
    let manifest = load_dataset(&sweep.base.dataset_dir)?;
    let mut out = Vec::with_capacity(grid.len());
    for c in &grid {
        let backends = RunBackends::resolve(c, registry)?;
        out.push(run_with(c, &manifest, &backends, RunOptions::default())?);
    }
    Ok(out)
}

/// Item ids in a set of records, sorted.
pub fn item_ids(records: &[TrialRecord]) -> BTreeSet<&str> {
    records.iter().map(|r| r.item_id.as_str()).collect()
}

/// Read a records file written by [`run_with`].
pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<TrialRecord>, RunError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| RunError::Json {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}
