//! A deterministic fake VLM for offline end-to-end tests.
//!
//! The simulator reads perturbation metadata instead of pixels. Its decay laws
//! (power law in patch size, exponential in noise variance) are plumbing chosen
//! for monotone, closed-form behavior; they make no claim about real models.
//!
//! Every draw comes from a fixed slot of a counter-based stream keyed by the
//! trial seed, so two requests that differ only in prompt or perturbation
//! share their random numbers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    BackendError, ChatBackend, ChatReply, ChatRequest, FinishReason, TokenLogprob, TrialContext,
};
use crate::dataset::{ClassLabel, CueConflictItem};
use crate::extraction::{mentioned_labels, EXTRACTION_PREAMBLE};
use crate::prompts::{option_lines, OptionStyle, ANSWER_DIRECTLY, CAPTION_INSTRUCTION};
use crate::rng::CounterRng;
use crate::steering::PerturbationSpec;

const SLOT_REFUSAL: u64 = 0;
const SLOT_CUE: u64 = 1;
const SLOT_MISS: u64 = 2;
const SLOT_MISS_CLASS: u64 = 3;
const SLOT_STYLE: u64 = 4;
const SLOT_CONFIDENCE: u64 = 5;
const SLOT_SECOND: u64 = 6;
const SLOT_TEMPLATE: u64 = 7;
const SLOT_CAPTION_GENERIC: u64 = 8;
const SLOT_CAPTION_BOTH: u64 = 9;

#[derive(Debug, Error, PartialEq)]
#[error("invalid simulator config: {0}")]
pub struct SimulatorConfigError(pub String);

/// Distribution over VQA reply styles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StyleMix {
    /// `H. cat.`
    pub letter_label: f64,
    /// `cat.`
    pub label_only: f64,
    /// A sentence naming the class.
    pub explanation: f64,
    /// Text naming no class.
    pub gibberish: f64,
}

impl Default for StyleMix {
    fn default() -> Self {
        Self {
            letter_label: 0.8,
            label_only: 0.1,
            explanation: 0.08,
            gibberish: 0.02,
        }
    }
}

impl StyleMix {
    pub fn letters_only() -> Self {
        Self {
            letter_label: 1.0,
            label_only: 0.0,
            explanation: 0.0,
            gibberish: 0.0,
        }
    }

    fn weights(&self) -> [f64; 4] {
        [self.letter_label, self.label_only, self.explanation, self.gibberish]
    }

    fn pick(&self, u: f64) -> Style {
        let mut acc = 0.0;
        let styles = [Style::LetterLabel, Style::LabelOnly, Style::Explanation, Style::Gibberish];
        for (w, s) in self.weights().into_iter().zip(styles) {
            acc += w;
            if u < acc {
                return s;
            }
        }
        styles.into_iter().zip(self.weights()).rev().find(|(_, w)| *w > 0.0).map_or(Style::LetterLabel, |(s, _)| s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Style {
    LetterLabel,
    LabelOnly,
    Explanation,
    Gibberish,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulatorConfig {
    pub theta_shape: f64,
    pub keyword_gain_shape: f64,
    pub keyword_gain_texture: f64,
    /// Whole-word, case-insensitive triggers in the instruction.
    pub shape_keywords: Vec<String>,
    pub texture_keywords: Vec<String>,
    pub shape_decay_alpha: f64,
    pub texture_decay_lambda: f64,
    pub miss_floor: f64,
    pub style_mix: StyleMix,
    pub refusal_rate: f64,
    pub temperature_noise_gain: f64,
    /// Top-1 probability when answering the shape label.
    pub confidence_shape: f64,
    /// Top-1 probability when answering the texture label.
    pub confidence_texture: f64,
    /// Probability that the runner-up token is the other cue's letter.
    pub second_cue_rate: f64,
    pub caption_generic_rate: f64,
    /// Fraction of captions that also mention the non-chosen cue.
    pub caption_both_rate: f64,
    /// Side length assumed when an item carries no size.
    pub default_image_px: u32,
    pub supports_logprobs: bool,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self {
            theta_shape: 0.7,
            keyword_gain_shape: 0.2,
            keyword_gain_texture: 0.2,
            shape_keywords: vec!["shape".into()],
            texture_keywords: vec!["texture".into()],
            shape_decay_alpha: 1.0,
            texture_decay_lambda: 5.0,
            miss_floor: 0.05,
            style_mix: StyleMix::default(),
            refusal_rate: 0.0,
            temperature_noise_gain: 0.1,
            confidence_shape: 0.92,
            confidence_texture: 0.87,
            second_cue_rate: 0.8,
            caption_generic_rate: 0.05,
            caption_both_rate: 0.1,
            default_image_px: 224,
            supports_logprobs: true,
        }
    }
}

impl SimulatorConfig {
    pub fn validate(&self) -> Result<(), SimulatorConfigError> {
        let probs = [
            ("theta_shape", self.theta_shape),
            ("miss_floor", self.miss_floor),
            ("refusal_rate", self.refusal_rate),
            ("confidence_shape", self.confidence_shape),
            ("confidence_texture", self.confidence_texture),
            ("second_cue_rate", self.second_cue_rate),
            ("caption_generic_rate", self.caption_generic_rate),
            ("caption_both_rate", self.caption_both_rate),
            ("style_mix.letter_label", self.style_mix.letter_label),
            ("style_mix.label_only", self.style_mix.label_only),
            ("style_mix.explanation", self.style_mix.explanation),
            ("style_mix.gibberish", self.style_mix.gibberish),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimulatorConfigError(format!("{name} = {p} is not in [0, 1]")));
            }
        }
        let nonneg = [
            ("keyword_gain_shape", self.keyword_gain_shape),
            ("keyword_gain_texture", self.keyword_gain_texture),
            ("shape_decay_alpha", self.shape_decay_alpha),
            ("texture_decay_lambda", self.texture_decay_lambda),
            ("temperature_noise_gain", self.temperature_noise_gain),
        ];
        for (name, v) in nonneg {
            if !v.is_finite() || v < 0.0 {
                return Err(SimulatorConfigError(format!("{name} = {v} must be a nonnegative real")));
            }
        }
        let sum: f64 = self.style_mix.weights().iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(SimulatorConfigError(format!("style_mix sums to {sum}, not 1")));
        }
        if self.default_image_px == 0 {
            return Err(SimulatorConfigError("default_image_px must be positive".into()));
        }
        Ok(())
    }

    /// Preference after keyword gains, clamped to `[0, 1]`.
    pub fn effective_theta(&self, instruction: &str) -> f64 {
        let lower = instruction.to_lowercase();
        let has = |kws: &[String]| {
            kws.iter()
                .any(|k| lower.split(|c: char| !c.is_alphanumeric()).any(|w| w == k.to_lowercase()))
        };
        let mut theta = self.theta_shape;
        if has(&self.shape_keywords) {
            theta += self.keyword_gain_shape;
        }
        if has(&self.texture_keywords) {
            theta -= self.keyword_gain_texture;
        }
        theta.clamp(0.0, 1.0)
    }

    /// Probability of answering the shape label among cue answers.
    pub fn shape_probability(&self, theta: f64, perturbation: &PerturbationSpec, image_px: u32) -> f64 {
        let (mut s, mut t) = (theta, 1.0 - theta);
        match *perturbation {
            PerturbationSpec::PatchShuffle { patch_px, .. } => {
                let ratio = (f64::from(patch_px) / f64::from(image_px.max(1))).min(1.0);
                s *= ratio.powf(self.shape_decay_alpha);
            }
            PerturbationSpec::GaussianNoise { variance, .. } => {
                t *= (-self.texture_decay_lambda * variance).exp();
            }
            PerturbationSpec::None => {}
        }
        if s + t == 0.0 {
            0.5
        } else {
            s / (s + t)
        }
    }

    pub fn miss_probability(&self, temperature: f64) -> f64 {
        (self.miss_floor + self.temperature_noise_gain * temperature).clamp(0.0, 1.0)
    }
}

/// Which registered template a prompt renders.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Template {
    Vqa { instruction: String },
    Captioning,
    Extraction { caption: String },
}

fn recognize(text: &str) -> Result<Template, BackendError> {
    if let Some(rest) = text.strip_prefix(EXTRACTION_PREAMBLE) {
        let caption = rest
            .rfind("Message: ")
            .map(|i| rest[i + "Message: ".len()..].to_string())
            .ok_or_else(|| BackendError::UnknownTemplate("extraction prompt without a message".into()))?;
        return Ok(Template::Extraction { caption });
    }
    let letter = option_lines(OptionStyle::LetterLabel);
    let clip = option_lines(OptionStyle::ClipStyle);
    let lines: Vec<&str> = text.lines().collect();
    let has_options = [&letter, &clip]
        .iter()
        .any(|opts| opts.iter().all(|o| lines.contains(&o.as_str())));
    if has_options || lines.contains(&ANSWER_DIRECTLY) {
        let instruction = lines
            .iter()
            .filter(|l| **l != ANSWER_DIRECTLY && !letter.iter().chain(&clip).any(|o| o == *l))
            .copied()
            .collect::<Vec<_>>()
            .join("\n");
        return Ok(Template::Vqa { instruction });
    }
    if text.starts_with(CAPTION_INSTRUCTION) {
        return Ok(Template::Captioning);
    }
    let head: String = text.chars().take(60).collect();
    Err(BackendError::UnknownTemplate(head))
}

/// Per-trial metadata the simulator reads in place of pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct SimMeta<'a> {
    pub item: &'a CueConflictItem,
    pub perturbation: &'a PerturbationSpec,
}

/// The class the simulated model "sees", or `None` on refusal.
fn decide(
    rng: &CounterRng,
    meta: &SimMeta<'_>,
    theta: f64,
    temperature: f64,
    config: &SimulatorConfig,
) -> Option<ClassLabel> {
    if rng.uniform_at(SLOT_REFUSAL) < config.refusal_rate {
        return None;
    }
    let side = meta.item.width.unwrap_or(config.default_image_px);
    let p_shape = config.shape_probability(theta, meta.perturbation, side);
    let cue = if rng.uniform_at(SLOT_CUE) < p_shape {
        meta.item.shape
    } else {
        meta.item.texture
    };
    if rng.uniform_at(SLOT_MISS) < config.miss_probability(temperature) {
        let others: Vec<ClassLabel> = ClassLabel::ALL
            .into_iter()
            .filter(|c| *c != meta.item.shape && *c != meta.item.texture)
            .collect();
        return Some(others[rng.below_at(SLOT_MISS_CLASS, others.len())]);
    }
    Some(cue)
}

const REFUSAL_TEXT: &str = "I'm sorry, but I can't help with identifying the content of this image.";
const GIBBERISH: [&str; 3] = ["zxqv blorp wum", "~~ ... ~~", "lorem ipsum dolor sit amet"];
const EXPLANATIONS: [&str; 2] = ["The image features a {}.", "This looks like a {} to me."];
const GENERIC_CAPTIONS: [&str; 2] = [
    "An abstract picture with unusual colors and patterns.",
    "A blurry scene that is hard to make out.",
];

/// One simulated completion. Deterministic in all arguments; `seed` is the trial seed.
pub fn simulate_reply(
    request: &ChatRequest,
    meta: Option<SimMeta<'_>>,
    config: &SimulatorConfig,
    seed: u64,
) -> Result<ChatReply, BackendError> {
    request.validate()?;
    if request.logprob_k.is_some() && !config.supports_logprobs {
        return Err(BackendError::Unsupported("simulator configured without logprobs".into()));
    }
    let rng = CounterRng::new(seed);
    let template = recognize(&request.user_text())?;
    let need_meta = || meta.clone().ok_or_else(|| BackendError::InvalidRequest("trial carries no item metadata".into()));
    let temperature = request.effective_temperature();
    match template {
        Template::Extraction { caption } => {
            let labels = mentioned_labels(&caption);
            let text = if labels.is_empty() {
                "X".to_string()
            } else {
                labels.iter().map(|c| c.letter().to_string()).collect::<Vec<_>>().join(", ")
            };
            Ok(ChatReply::text(text))
        }
        Template::Captioning => {
            let meta = need_meta()?;
            let text = match decide(&rng, &meta, config.theta_shape, temperature, config) {
                None => REFUSAL_TEXT.to_string(),
                Some(_) if rng.uniform_at(SLOT_CAPTION_GENERIC) < config.caption_generic_rate => {
                    GENERIC_CAPTIONS[rng.below_at(SLOT_TEMPLATE, GENERIC_CAPTIONS.len())].to_string()
                }
                Some(c) => {
                    let other = if c == meta.item.shape { meta.item.texture } else { meta.item.shape };
                    if rng.uniform_at(SLOT_CAPTION_BOTH) < config.caption_both_rate {
                        format!("A photo of a {c}. The {c} resembles a {other}.")
                    } else {
                        format!("A photo of a {c}.")
                    }
                }
            };
            Ok(ChatReply::text(text))
        }
        Template::Vqa { instruction } => {
            let meta = need_meta()?;
            let theta = config.effective_theta(&instruction);
            let answer = decide(&rng, &meta, theta, temperature, config);
            let style = config.style_mix.pick(rng.uniform_at(SLOT_STYLE));
            let text = match (answer, style) {
                (None, _) => REFUSAL_TEXT.to_string(),
                (Some(_), Style::Gibberish) => GIBBERISH[rng.below_at(SLOT_TEMPLATE, GIBBERISH.len())].to_string(),
                (Some(c), Style::LetterLabel) => format!("{}. {c}.", c.letter()),
                (Some(c), Style::LabelOnly) => format!("{c}."),
                (Some(c), Style::Explanation) => {
                    EXPLANATIONS[rng.below_at(SLOT_TEMPLATE, EXPLANATIONS.len())].replace("{}", c.name())
                }
            };
            let first_token_top_logprobs = request.logprob_k.map(|k| {
                let answer = answer.filter(|_| style != Style::Gibberish);
                top_logprobs(&rng, answer, &meta, k as usize, config)
            });
            Ok(ChatReply {
                text,
                first_token_top_logprobs,
                finish_reason: FinishReason::Stop,
                latency_ms: 0,
            })
        }
    }
}

/// Near-binary first-token distribution: the answer letter takes most mass.
fn top_logprobs(
    rng: &CounterRng,
    answer: Option<ClassLabel>,
    meta: &SimMeta<'_>,
    k: usize,
    config: &SimulatorConfig,
) -> Vec<TokenLogprob> {
    if k == 0 {
        return Vec::new();
    }
    let Some(answer) = answer else {
        return vec![TokenLogprob {
            token: "Sorry".into(),
            logprob: (0.95f64).ln(),
        }];
    };
    let base = if answer == meta.item.shape {
        config.confidence_shape
    } else if answer == meta.item.texture {
        config.confidence_texture
    } else {
        0.9
    };
    let jitter = (rng.uniform_at(SLOT_CONFIDENCE) - 0.5) * 0.1;
    let p1 = (base + jitter).clamp(0.5, 0.999);
    let rest = 1.0 - p1;

    let mut tokens = vec![(answer, p1)];
    let other_cue = if answer == meta.item.shape { meta.item.texture } else { meta.item.shape };
    let second = if rng.uniform_at(SLOT_SECOND) < config.second_cue_rate {
        other_cue
    } else {
        ClassLabel::ALL
            .into_iter()
            .find(|c| *c != answer && *c != other_cue)
            .expect("sixteen classes")
    };
    if k >= 2 {
        tokens.push((second, rest * 0.6));
        let fillers: Vec<ClassLabel> = ClassLabel::ALL
            .into_iter()
            .filter(|c| *c != answer && *c != second)
            .take(k - 2)
            .collect();
        let share = rest * 0.3 / fillers.len().max(1) as f64;
        tokens.extend(fillers.into_iter().map(|c| (c, share)));
    }
    tokens
        .into_iter()
        .map(|(c, p)| TokenLogprob {
            token: c.letter().to_string(),
            logprob: p.ln(),
        })
        .collect()
}

/// [`ChatBackend`] wrapper around [`simulate_reply`].
#[derive(Debug, Clone)]
pub struct SimulatorBackend {
    name: String,
    config: SimulatorConfig,
    concurrency: usize,
}

impl SimulatorBackend {
    pub fn new(config: SimulatorConfig) -> Result<Self, SimulatorConfigError> {
        config.validate()?;
        Ok(Self {
            name: "simulator".into(),
            config,
            concurrency: 64,
        })
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_concurrency(mut self, limit: usize) -> Self {
        self.concurrency = limit.max(1);
        self
    }

    pub fn config(&self) -> &SimulatorConfig {
        &self.config
    }
}

impl ChatBackend for SimulatorBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn chat(&self, request: &ChatRequest, ctx: &TrialContext) -> Result<ChatReply, BackendError> {
        let meta = ctx.item.as_ref().map(|item| SimMeta {
            item,
            perturbation: &ctx.perturbation,
        });
        simulate_reply(request, meta, &self.config, ctx.trial_seed)
    }

    fn supports_logprobs(&self) -> bool {
        self.config.supports_logprobs
    }

    fn wants_pixels(&self) -> bool {
        false
    }

    fn concurrency_limit(&self) -> usize {
        self.concurrency
    }
}
