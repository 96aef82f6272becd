//! Prompt search where each candidate is scored by a full dataset run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{run_with, RunBackends, RunConfig, RunError, RunOptions};
use crate::backends::{BackendsConfig, ChatBackend};
use crate::dataset::{load_dataset, DatasetManifest};
use crate::prompts::{PromptVariant, NEUTRAL_VQA_INSTRUCTION};
use crate::steering::{run_prompt_search, Evaluation, Objective, SearchConfig, SearchError, SearchState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRunConfig {
    pub dataset_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backends_file: Option<PathBuf>,
    /// The model whose bias is steered.
    pub backend: String,
    /// The model proposing prompts.
    pub optimizer: String,
    pub objective: Objective,
    pub budget: u32,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub accuracy_floor: Option<f64>,
    #[serde(default)]
    pub optimizer_temperature: f64,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
}

fn default_concurrency() -> usize {
    8
}

impl SearchRunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, RunError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| RunError::Config(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.dataset_dir, &mut cfg.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(p) = cfg.backends_file.as_mut().filter(|p| p.is_relative()) {
            *p = base.join(&*p);
        }
        Ok(cfg)
    }

    fn candidate_config(&self, instruction: &str, dir: PathBuf) -> RunConfig {
        let prompt = if instruction == NEUTRAL_VQA_INSTRUCTION {
            PromptVariant::VqaDefault
        } else {
            PromptVariant::VqaCustom(instruction.to_string())
        };
        let mut c = RunConfig::new(&self.dataset_dir, &self.backend, prompt, self.seeds.clone(), dir);
        c.concurrency = self.concurrency;
        c
    }
}

/// Run the search; each evaluation is persisted as its own run under `output_dir`.
pub fn search_with(
    cfg: &SearchRunConfig,
    manifest: &DatasetManifest,
    vlm: &RunBackends,
    optimizer: &dyn ChatBackend,
) -> Result<SearchState, SearchError> {
    let mut n = 0usize;
    let mut evaluate = |instruction: &str| -> Result<Evaluation, String> {
        let dir = cfg.output_dir.join(format!("eval-{n:02}"));
        n += 1;
        let rc = cfg.candidate_config(instruction, dir);
        let s = run_with(&rc, manifest, vlm, RunOptions::default()).map_err(|e| e.to_string())?;
        let report = s.pooled.report.ok_or("no trial produced an answer")?;
        Ok(Evaluation {
            shape_bias: report.shape_bias,
            cue_accuracy: report.cue_accuracy,
        })
    };
    let mut sc = SearchConfig::new(cfg.objective, cfg.budget);
    sc.accuracy_floor = cfg.accuracy_floor;
    sc.temperature = cfg.optimizer_temperature;
    let result = run_prompt_search(optimizer, &mut evaluate, &sc);
    let state = match &result {
        Ok(s) => Some(s),
        Err(SearchError::OptimizerUnavailable { state, .. }) => Some(state.as_ref()),
        Err(_) => None,
    };
    if let Some(s) = state {
        if let Err(e) = s.save(&cfg.output_dir) {
            log::error!("could not persist search transcript: {e}");
        }
    }
    result
}

pub fn run_search(cfg: &SearchRunConfig, registry: &BackendsConfig) -> Result<SearchState, RunError> {
    let manifest = load_dataset(&cfg.dataset_dir)?;
    let vlm = RunBackends::chat_only(registry.chat_backend(&cfg.backend)?);
    let optimizer = registry.chat_backend(&cfg.optimizer)?;
    Ok(search_with(cfg, &manifest, &vlm, optimizer.as_ref())?)
}
