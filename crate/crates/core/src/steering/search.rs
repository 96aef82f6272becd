//! LLM-driven prompt search.
//!
//! An optimizer model proposes VQA instructions; each one is evaluated on the
//! dataset and the measured accuracy and shape bias are fed back as the next
//! user turn. The conversation is seeded with a fixed instruction and a mock
//! exchange for the neutral prompt.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, ChatBackend, ChatMessage, ChatRequest, DecodeMode, Role, TrialContext};
use crate::prompts::NEUTRAL_VQA_INSTRUCTION;

pub const CANDIDATE_MARKER: &str = "PROMPT: ";

/// Sent after an optimizer turn without an extractable prompt.
pub const NUDGE: &str = "Please respond with a single new line starting with 'PROMPT: '.";

const ENCOURAGEMENTS: [&str; 2] = ["What is your next prompt?", "Can you improve this?"];

const INSTRUCTION_MINIMIZE: &str = "Your task is to help me design an ideal image classification prompt for a vision/language model to MINIMIZE the shape bias without significantly hurting accuracy. The provided photos show natural objects modified to contain shape and texture of conflicting object classes. E.g., it could be a photo of an elephant (shape) with dog fur (texture). The model should classify the image as 'dog' based on the texture of the object and ignore the shape. The model's accuracy is the percentage of correctly classified images. The shape bias is the ratio of how often the model classified based on shape over texture. You can test your prompt by outputting a single new line starting with 'PROMPT: '. Do not list options - the system will provide them automatically. Try to keep the prompt as short and simple as possible but be creative. It might be reasonable to summarize insights of previous attempts and to outline your goals before responding with a new prompt, but make sure that only the prompt starts with 'PROMPT:'. In response to the prompt you will be told the accuracy and shape bias. Then you will refine the prompt and we will continue until I say stop. Let's go!";

const INSTRUCTION_MAXIMIZE: &str = "Your task is to help me design an ideal image classification prompt for a vision/language model to MAXIMIZE the shape bias without significantly hurting accuracy. The provided photos show natural objects modified to contain shape and texture of conflicting object classes. E.g., it could be a photo of an elephant (shape) with dog fur (texture). The model should classify the image as 'elephant' based on the shape of the object and ignore the texture. The model's accuracy is the percentage of correctly classified images. The shape bias is the ratio of how often the model classified based on shape over texture. You can test your prompt by outputting a single new line starting with 'PROMPT: '. Do not list options - the system will provide them automatically. Try to keep the prompt as short and simple as possible but be creative. It might be reasonable to summarize insights of previous attempts and to outline your goals before responding with a new prompt, but make sure that only the prompt starts with 'PROMPT:'. In response to the prompt you will be told the accuracy and shape bias. Then you will refine the prompt and we will continue until I say stop. Let's go!";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    MaximizeShape,
    MinimizeShape,
}

pub fn optimizer_instruction(objective: Objective) -> &'static str {
    match objective {
        Objective::MinimizeShape => INSTRUCTION_MINIMIZE,
        Objective::MaximizeShape => INSTRUCTION_MAXIMIZE,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub shape_bias: Option<f64>,
    pub cue_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub prompt: String,
    pub evaluation: Option<Evaluation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Candidate {
    pub fn shape_bias(&self) -> Option<f64> {
        self.evaluation.and_then(|e| e.shape_bias)
    }

    pub fn cue_accuracy(&self) -> Option<f64> {
        self.evaluation.map(|e| e.cue_accuracy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    BudgetExhausted,
    OptimizerQuit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub objective: Objective,
    /// Maximum optimizer turns.
    pub budget: u32,
    /// Defaults to neutral cue accuracy minus 0.10.
    #[serde(default)]
    pub accuracy_floor: Option<f64>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
}

fn default_temperature() -> f64 {
    0.0
}

fn default_max_tokens() -> u32 {
    512
}

impl SearchConfig {
    pub fn new(objective: Objective, budget: u32) -> Self {
        Self {
            objective,
            budget,
            accuracy_floor: None,
            temperature: default_temperature(),
            max_tokens: default_max_tokens(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchState {
    pub objective: Objective,
    pub budget: u32,
    pub accuracy_floor: f64,
    pub neutral: Evaluation,
    pub conversation: Vec<Turn>,
    pub candidates: Vec<Candidate>,
    /// Index into `candidates`.
    pub best: Option<usize>,
    pub turns_used: u32,
    pub stop_reason: Option<StopReason>,
}

impl SearchState {
    pub fn best_candidate(&self) -> Option<&Candidate> {
        self.best.map(|i| &self.candidates[i])
    }

    /// Optimal candidate among those meeting the accuracy floor; earliest wins ties.
    pub fn select_best(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, c) in self.candidates.iter().enumerate() {
            let (Some(sb), Some(acc)) = (c.shape_bias(), c.cue_accuracy()) else {
                continue;
            };
            if acc < self.accuracy_floor {
                continue;
            }
            let better = match (best, self.objective) {
                (None, _) => true,
                (Some((_, b)), Objective::MinimizeShape) => sb < b,
                (Some((_, b)), Objective::MaximizeShape) => sb > b,
            };
            if better {
                best = Some((i, sb));
            }
        }
        best.map(|(i, _)| i)
    }

    /// Feedback lines sent to the optimizer, excluding the mock exchange.
    pub fn feedback_lines(&self) -> Vec<&str> {
        self.conversation
            .iter()
            .skip(3)
            .filter(|t| t.role == Role::User && t.text.starts_with("Prompt: "))
            .map(|t| t.text.as_str())
            .collect()
    }

    pub fn transcript(&self) -> String {
        let mut out = String::new();
        for t in &self.conversation {
            let who = match t.role {
                Role::System => "SYSTEM",
                Role::User => "USER",
                Role::Assistant => "ASSISTANT",
            };
            out.push_str(&format!("### {who}\n{}\n\n", t.text));
        }
        out
    }

    /// Write `search.json` and `transcript.txt` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> std::io::Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(dir.join("search.json"), json + "\n")?;
        std::fs::write(dir.join("transcript.txt"), self.transcript())
    }

    fn messages(&self) -> Vec<ChatMessage> {
        self.conversation
            .iter()
            .map(|t| ChatMessage::text(t.role, t.text.clone()))
            .collect()
    }

    fn push(&mut self, role: Role, text: impl Into<String>) {
        self.conversation.push(Turn {
            role,
            text: text.into(),
        });
    }
}

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("search budget must be at least 1")]
    InvalidBudget,
    #[error("evaluating the neutral prompt failed: {0}")]
    NeutralEvaluation(String),
    #[error("optimizer unavailable after {} turns: {source}", state.turns_used)]
    OptimizerUnavailable {
        source: BackendError,
        state: Box<SearchState>,
    },
}

/// Text after the marker on the last line that starts with it, trimmed.
pub fn extract_candidate_prompt(optimizer_text: &str) -> Option<String> {
    optimizer_text
        .lines()
        .rev()
        .find_map(|l| l.strip_prefix(CANDIDATE_MARKER))
        .map(|p| p.trim().to_string())
        .filter(|p| !p.is_empty())
}

/// Percent with at most two decimals and no trailing zeros: `0.509 -> "50.9"`.
fn percent(x: f64) -> String {
    let s = format!("{:.2}", x * 100.0);
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

pub fn feedback_line(prompt: &str, evaluation: &Evaluation, encouragement: &str) -> String {
    let sb = evaluation.shape_bias.map_or_else(|| "n/a".to_string(), percent);
    format!(
        "Prompt: {prompt}, Accuracy: {} %, Shape Bias: {sb} %. {encouragement}",
        percent(evaluation.cue_accuracy)
    )
}

fn failure_line(prompt: &str, error: &str, encouragement: &str) -> String {
    format!("Prompt: {prompt}, Evaluation failed ({error}). {encouragement}")
}

/// Drive the optimizer for at most `config.budget` turns.
///
/// `evaluate` receives the candidate instruction (options are appended by the
/// caller's prompt builder) and returns the measured metrics.
pub fn run_prompt_search(
    optimizer: &dyn ChatBackend,
    evaluate: &mut dyn FnMut(&str) -> Result<Evaluation, String>,
    config: &SearchConfig,
) -> Result<SearchState, SearchError> {
    if config.budget == 0 {
        return Err(SearchError::InvalidBudget);
    }
    let neutral = evaluate(NEUTRAL_VQA_INSTRUCTION).map_err(SearchError::NeutralEvaluation)?;
    let mut state = SearchState {
        objective: config.objective,
        budget: config.budget,
        accuracy_floor: config.accuracy_floor.unwrap_or(neutral.cue_accuracy - 0.10),
        neutral,
        conversation: Vec::new(),
        candidates: Vec::new(),
        best: None,
        turns_used: 0,
        stop_reason: None,
    };
    state.push(Role::User, optimizer_instruction(config.objective));
    state.push(Role::Assistant, format!("{CANDIDATE_MARKER}{NEUTRAL_VQA_INSTRUCTION}"));
    state.push(Role::User, feedback_line(NEUTRAL_VQA_INSTRUCTION, &neutral, ENCOURAGEMENTS[0]));

    let ctx = TrialContext::bare("prompt-search");
    let mut misses = 0;
    while state.turns_used < config.budget {
        let request = ChatRequest {
            messages: state.messages(),
            temperature: config.temperature,
            max_tokens: config.max_tokens,
            logprob_k: None,
            decode: if config.temperature > 0.0 {
                DecodeMode::Sample { seed: None }
            } else {
                DecodeMode::Greedy
            },
        };
        let reply = match optimizer.chat(&request, &ctx) {
            Ok(r) => r,
            Err(source) => {
                state.best = state.select_best();
                return Err(SearchError::OptimizerUnavailable {
                    source,
                    state: Box::new(state),
                });
            }
        };
        state.turns_used += 1;
        state.push(Role::Assistant, reply.text.clone());
        let Some(prompt) = extract_candidate_prompt(&reply.text) else {
            misses += 1;
            if misses >= 2 {
                state.stop_reason = Some(StopReason::OptimizerQuit);
                break;
            }
            state.push(Role::User, NUDGE);
            continue;
        };
        misses = 0;
        let encouragement = ENCOURAGEMENTS[(state.candidates.len() + 1) % ENCOURAGEMENTS.len()];
        match evaluate(&prompt) {
            Ok(e) => {
                state.push(Role::User, feedback_line(&prompt, &e, encouragement));
                state.candidates.push(Candidate {
                    prompt,
                    evaluation: Some(e),
                    error: None,
                });
            }
            Err(err) => {
                log::warn!("evaluation of `{prompt}` failed: {err}");
                state.push(Role::User, failure_line(&prompt, &err, encouragement));
                state.candidates.push(Candidate {
                    prompt,
                    evaluation: None,
                    error: Some(err),
                });
            }
        }
    }
    if state.stop_reason.is_none() {
        state.stop_reason = Some(StopReason::BudgetExhausted);
    }
    state.best = state.select_best();
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::ScriptedBackend;

    #[test]
    fn marker_extraction() {
        assert_eq!(
            extract_candidate_prompt("PROMPT: Which option best describes the image?").as_deref(),
            Some("Which option best describes the image?")
        );
        assert_eq!(
            extract_candidate_prompt("I think...\nPROMPT: A\nPROMPT: B").as_deref(),
            Some("B")
        );
        assert_eq!(extract_candidate_prompt("no marker here"), None);
        assert_eq!(extract_candidate_prompt("prompt: lower case"), None);
        assert_eq!(extract_candidate_prompt("PROMPT:   "), None);
    }

    #[test]
    fn feedback_matches_mock_exchange() {
        let e = Evaluation {
            shape_bias: Some(0.5943),
            cue_accuracy: 0.8258,
        };
        assert_eq!(
            feedback_line("[...]", &e, "What is your next prompt?"),
            "Prompt: [...], Accuracy: 82.58 %, Shape Bias: 59.43 %. What is your next prompt?"
        );
        let e = Evaluation {
            shape_bias: Some(0.509),
            cue_accuracy: 0.7825,
        };
        assert_eq!(
            feedback_line("[...]", &e, "Can you improve this?"),
            "Prompt: [...], Accuracy: 78.25 %, Shape Bias: 50.9 %. Can you improve this?"
        );
    }

    fn fixed_eval(prompt: &str) -> Result<Evaluation, String> {
        let sb = if prompt.contains("texture") { 0.5 } else { 0.7 };
        Ok(Evaluation {
            shape_bias: Some(sb),
            cue_accuracy: 0.8,
        })
    }

    #[test]
    fn silent_optimizer_quits_after_two_turns() {
        let opt = ScriptedBackend::new(vec![]).with_fallback("I am done.");
        let state = run_prompt_search(&opt, &mut fixed_eval, &SearchConfig::new(Objective::MinimizeShape, 10)).unwrap();
        assert_eq!(state.turns_used, 2);
        assert_eq!(state.stop_reason, Some(StopReason::OptimizerQuit));
        assert!(state.candidates.is_empty());
        assert_eq!(state.best, None);
    }

    #[test]
    fn budget_one_evaluates_once() {
        let opt = ScriptedBackend::new(vec!["PROMPT: a".into(), "PROMPT: b".into()]);
        let mut calls = 0;
        let mut eval = |p: &str| {
            calls += 1;
            fixed_eval(p)
        };
        let state = run_prompt_search(&opt, &mut eval, &SearchConfig::new(Objective::MinimizeShape, 1)).unwrap();
        // One neutral evaluation plus one candidate.
        assert_eq!(calls, 2);
        assert_eq!(state.candidates.len(), 1);
        assert_eq!(state.stop_reason, Some(StopReason::BudgetExhausted));
    }

    #[test]
    fn seeded_conversation_and_isolation_of_turns() {
        let opt = ScriptedBackend::new(vec!["PROMPT: focus on texture".into()]);
        let state = run_prompt_search(&opt, &mut fixed_eval, &SearchConfig::new(Objective::MinimizeShape, 1)).unwrap();
        let req = &opt.requests()[0];
        assert_eq!(req.messages.len(), 3);
        assert!(req.messages[0].text_content().contains("MINIMIZE"));
        assert_eq!(
            req.messages[1].text_content(),
            "PROMPT: Which option best describes the image?"
        );
        assert_eq!(
            req.messages[2].text_content(),
            "Prompt: Which option best describes the image?, Accuracy: 80 %, Shape Bias: 70 %. What is your next prompt?"
        );
        assert_eq!(
            state.feedback_lines(),
            vec!["Prompt: focus on texture, Accuracy: 80 %, Shape Bias: 50 %. Can you improve this?"]
        );
        assert_eq!(state.best_candidate().unwrap().prompt, "focus on texture");
    }

    #[test]
    fn evaluation_failure_is_recorded_and_search_continues() {
        let opt = ScriptedBackend::new(vec!["PROMPT: bad".into(), "PROMPT: texture".into()]);
        let mut eval = |p: &str| {
            if p == "bad" {
                Err("backend down".to_string())
            } else {
                fixed_eval(p)
            }
        };
        let state = run_prompt_search(&opt, &mut eval, &SearchConfig::new(Objective::MinimizeShape, 2)).unwrap();
        assert_eq!(state.candidates.len(), 2);
        assert_eq!(state.candidates[0].error.as_deref(), Some("backend down"));
        assert_eq!(state.best, Some(1));
    }

    #[test]
    fn floor_excludes_inaccurate_candidates() {
        let opt = ScriptedBackend::new(vec!["PROMPT: texture only".into(), "PROMPT: texture ok".into()]);
        let mut eval = |p: &str| {
            Ok(match p {
                "texture only" => Evaluation {
                    shape_bias: Some(0.1),
                    cue_accuracy: 0.3,
                },
                "texture ok" => Evaluation {
                    shape_bias: Some(0.4),
                    cue_accuracy: 0.78,
                },
                _ => Evaluation {
                    shape_bias: Some(0.7),
                    cue_accuracy: 0.8,
                },
            })
        };
        let state = run_prompt_search(&opt, &mut eval, &SearchConfig::new(Objective::MinimizeShape, 2)).unwrap();
        assert!((state.accuracy_floor - 0.7).abs() < 1e-12);
        assert_eq!(state.best_candidate().unwrap().prompt, "texture ok");
    }
}
