use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::RunError;
use crate::prompts::{PromptVariant, Task};
use crate::steering::PerturbationSpec;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeSetting {
    #[default]
    Greedy,
    /// Sampled at `temperature` with the trial seed passed to the backend.
    Sample,
}

/// One evaluation: a backend, a prompt, a perturbation, and a list of seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub dataset_dir: PathBuf,
    /// Backends document; the CLI may supply one instead.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backends_file: Option<PathBuf>,
    pub backend: String,
    pub task: Task,
    pub prompt: PromptVariant,
    #[serde(default)]
    pub perturbation: PerturbationSpec,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default)]
    pub decode: DecodeSetting,
    pub seeds: Vec<u64>,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    pub output_dir: PathBuf,
    /// Top-k first-token logprobs to request (VQA only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprob_k: Option<u32>,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    /// Captioning: embedder name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedder: Option<String>,
    /// Captioning: backend that extracts mentioned classes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extractor: Option<String>,
    /// Captioning: score captions naming no class as `Generic` instead of by embedding.
    #[serde(default)]
    pub generic_as_miss: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_cache_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refusal_phrases: Option<PathBuf>,
}

fn default_concurrency() -> usize {
    8
}

fn default_max_tokens() -> u32 {
    256
}

impl RunConfig {
    /// Minimal VQA config with defaults for everything optional.
    pub fn new(
        dataset_dir: impl Into<PathBuf>,
        backend: impl Into<String>,
        prompt: PromptVariant,
        seeds: Vec<u64>,
        output_dir: impl Into<PathBuf>,
    ) -> Self {
        Self {
            name: None,
            dataset_dir: dataset_dir.into(),
            backends_file: None,
            backend: backend.into(),
            task: prompt.task(),
            prompt,
            perturbation: PerturbationSpec::None,
            temperature: 0.0,
            decode: DecodeSetting::Greedy,
            seeds,
            concurrency: default_concurrency(),
            output_dir: output_dir.into(),
            logprob_k: None,
            max_tokens: default_max_tokens(),
            embedder: None,
            extractor: None,
            generic_as_miss: false,
            image_cache_dir: None,
            refusal_phrases: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, RunError> {
        toml::from_str(text).map_err(|e| RunError::Config(e.to_string()))
    }

    /// Parse a file; relative paths inside resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, RunError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset_dir);
        fix(&mut self.output_dir);
        for p in [&mut self.backends_file, &mut self.image_cache_dir, &mut self.refusal_phrases]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::Config(m));
        if self.seeds.is_empty() {
            return bad("seed list is empty".into());
        }
        let mut uniq = self.seeds.clone();
        uniq.sort_unstable();
        uniq.dedup();
        if uniq.len() != self.seeds.len() {
            return bad("seed list contains duplicates".into());
        }
        if self.prompt.task() != self.task {
            return bad(format!("prompt `{}` does not belong to task {:?}", self.prompt, self.task));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return bad(format!("temperature {} must be nonnegative", self.temperature));
        }
        if self.concurrency == 0 {
            return bad("concurrency must be at least 1".into());
        }
        if self.task == Task::Captioning && (self.embedder.is_none() || self.extractor.is_none()) {
            return bad("captioning runs need `embedder` and `extractor`".into());
        }
        self.perturbation
            .validate()
            .map_err(|e| RunError::Config(e.to_string()))?;
        self.prompt.spec().render().map_err(|e| RunError::Config(e.to_string()))?;
        Ok(())
    }

    /// Hash of every setting that can change a trial's result.
    ///
    /// Paths, the run name and the concurrency limit are excluded: moving a
    /// run or changing its parallelism must not invalidate it.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.name = None;
        c.dataset_dir = PathBuf::new();
        c.backends_file = None;
        c.output_dir = PathBuf::new();
        c.image_cache_dir = None;
        c.refusal_phrases = None;
        c.concurrency = 0;
        let json = serde_json::to_string(&c).expect("run configs always serialize");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn display_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            self.output_dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "run".into())
        })
    }
}

/// Grid over temperatures, perturbations and prompt variants; empty axes
/// keep the base value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub base: RunConfig,
    #[serde(default)]
    pub temperatures: Vec<f64>,
    #[serde(default)]
    pub perturbations: Vec<PerturbationSpec>,
    #[serde(default)]
    pub prompts: Vec<PromptVariant>,
}

impl SweepConfig {
    pub fn from_toml(text: &str) -> Result<Self, RunError> {
        toml::from_str(text).map_err(|e| RunError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RunError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.base.resolve_paths(path.parent().unwrap_or(Path::new("")));
        Ok(cfg)
    }

    /// One config per grid point, each writing to its own subdirectory.
    pub fn expand(&self) -> Vec<RunConfig> {
        let temps = if self.temperatures.is_empty() {
            vec![self.base.temperature]
        } else {
            self.temperatures.clone()
        };
        let perts = if self.perturbations.is_empty() {
            vec![self.base.perturbation]
        } else {
            self.perturbations.clone()
        };
        let prompts = if self.prompts.is_empty() {
            vec![self.base.prompt.clone()]
        } else {
            self.prompts.clone()
        };
        let mut out = Vec::new();
        for prompt in &prompts {
            for pert in &perts {
                for &t in &temps {
                    let mut c = self.base.clone();
                    c.prompt = prompt.clone();
                    c.task = prompt.task();
                    c.perturbation = *pert;
                    c.temperature = t;
                    if t > 0.0 && self.base.decode == DecodeSetting::Greedy {
                        c.decode = DecodeSetting::Sample;
                    }
                    let label = format!("{}__{}__t{t}", sanitize(&prompt.to_string()), sanitize(&pert.label()));
                    c.output_dir = self.base.output_dir.join(&label);
                    c.name = Some(label);
                    out.push(c);
                }
            }
        }
        out
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const DOC: &str = r#"
dataset_dir = "data"
backend = "sim"
task = "vqa"
prompt = "vqa-default"
seeds = [0, 1]
output_dir = "out"
perturbation = { kind = "patch_shuffle", patch_px = 28 }
"#;

    #[test]
    fn parses_and_resolves() {
        let mut c = RunConfig::from_toml(DOC).unwrap();
        c.resolve_paths(Path::new("/tmp/exp"));
        assert_eq!(c.dataset_dir, Path::new("/tmp/exp/data"));
        assert_eq!(c.perturbation, PerturbationSpec::PatchShuffle { patch_px: 28, seed: 0 });
        assert_eq!(c.concurrency, 8);
        c.validate().unwrap();
    }

    #[test]
    fn hash_ignores_paths_and_concurrency() {
        let a = RunConfig::from_toml(DOC).unwrap();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        b.concurrency = 1;
        assert_eq!(a.config_hash(), b.config_hash());
        b.temperature = 0.5;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = RunConfig::from_toml(DOC).unwrap();
        c.seeds.clear();
        assert!(c.validate().is_err());
        let mut c = RunConfig::from_toml(DOC).unwrap();
        c.task = Task::Captioning;
        assert!(c.validate().is_err());
        let mut c = RunConfig::from_toml(DOC).unwrap();
        c.seeds = vec![1, 1];
        assert!(c.validate().is_err());
    }

    #[test]
    fn sweep_expands_grid() {
        let s = SweepConfig {
            base: RunConfig::from_toml(DOC).unwrap(),
            temperatures: vec![0.0, 0.5],
            perturbations: vec![],
            prompts: vec![PromptVariant::VqaDefault, PromptVariant::VqaShape],
        };
        let grid = s.expand();
        assert_eq!(grid.len(), 4);
        assert_eq!(grid[1].decode, DecodeSetting::Sample);
        let mut dirs: Vec<_> = grid.iter().map(|c| c.output_dir.clone()).collect();
        dirs.dedup();
        assert_eq!(dirs.len(), 4);
    }
}
