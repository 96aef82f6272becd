//! Prompt construction.
//!
//! All prompts are template substitutions. Lines are joined with a single `\n`
//! and no trailing newline is emitted. The rendered text of every named variant
//! is pinned by a golden file under `prompts/`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::ClassLabel;

pub const NEUTRAL_VQA_INSTRUCTION: &str = "Which option best describes the image?";
pub const DESCRIBE_OBJECT_INSTRUCTION: &str = "Describe the object in the image:";
pub const ANSWER_DIRECTLY: &str = "Answer with the option's letter from the given choices directly.";
pub const CAPTION_INSTRUCTION: &str = "Describe the image.";
pub const CAPTION_SUFFIX_SHORT: &str = "Keep your response short.";
pub const CAPTION_SUFFIX_PRECISE: &str = "Be precise.";

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("a VQA prompt without options needs an instruction")]
    MissingInstruction,
    #[error("expected a {expected:?} spec")]
    WrongTask { expected: Task },
    #[error("unknown prompt variant `{0}`")]
    UnknownVariant(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Vqa,
    Captioning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptionStyle {
    /// `A. airplane`
    LetterLabel,
    /// `A. a photo of a airplane`
    ClipStyle,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptSpec {
    pub task: Task,
    pub instruction: String,
    pub option_style: OptionStyle,
    /// VQA: closing line after the options. Captioning: sentence after the instruction.
    pub suffix: Option<String>,
    pub biased_term: Option<String>,
}

impl PromptSpec {
    pub fn neutral_vqa() -> Self {
        Self::vqa_with_instruction(NEUTRAL_VQA_INSTRUCTION)
    }

    pub fn vqa_with_instruction(instruction: impl Into<String>) -> Self {
        Self {
            task: Task::Vqa,
            instruction: instruction.into(),
            option_style: OptionStyle::LetterLabel,
            suffix: Some(ANSWER_DIRECTLY.to_string()),
            biased_term: None,
        }
    }

    pub fn biased_vqa(term: &str) -> Self {
        Self {
            biased_term: Some(term.to_string()),
            ..Self::vqa_with_instruction(build_biased_instruction(term))
        }
    }

    pub fn caption(variant: CaptionSuffix) -> Self {
        Self {
            task: Task::Captioning,
            instruction: CAPTION_INSTRUCTION.to_string(),
            option_style: OptionStyle::None,
            suffix: variant.text().map(str::to_string),
            biased_term: None,
        }
    }

    pub fn render(&self) -> Result<String, PromptError> {
        match self.task {
            Task::Vqa => build_vqa_prompt(self),
            Task::Captioning => Ok(match &self.suffix {
                Some(s) if !s.is_empty() => format!("{} {}", self.instruction, s),
                _ => self.instruction.clone(),
            }),
        }
    }

    /// Hex SHA-256 of the rendered prompt.
    pub fn hash(&self) -> Result<String, PromptError> {
        Ok(prompt_hash(&self.render()?))
    }
}

pub fn prompt_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// The sixteen option lines in alphabetical class order.
pub fn option_lines(style: OptionStyle) -> Vec<String> {
    ClassLabel::ALL
        .iter()
        .filter_map(|c| match style {
            OptionStyle::LetterLabel => Some(format!("{}. {}", c.letter(), c.name())),
            OptionStyle::ClipStyle => Some(format!("{}. a photo of a {}", c.letter(), c.name())),
            OptionStyle::None => None,
        })
        .collect()
}

pub fn build_vqa_prompt(spec: &PromptSpec) -> Result<String, PromptError> {
    if spec.task != Task::Vqa {
        return Err(PromptError::WrongTask { expected: Task::Vqa });
    }
    if spec.instruction.is_empty() && spec.option_style == OptionStyle::None {
        return Err(PromptError::MissingInstruction);
    }
    let mut lines = Vec::with_capacity(18);
    if !spec.instruction.is_empty() {
        lines.push(spec.instruction.clone());
    }
    lines.extend(option_lines(spec.option_style));
    if let Some(s) = spec.suffix.as_deref().filter(|s| !s.is_empty()) {
        lines.push(s.to_string());
    }
    Ok(lines.join("\n"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionSuffix {
    Short,
    NoSuffix,
    Precise,
}

impl CaptionSuffix {
    fn text(self) -> Option<&'static str> {
        match self {
            CaptionSuffix::Short => Some(CAPTION_SUFFIX_SHORT),
            CaptionSuffix::NoSuffix => None,
            CaptionSuffix::Precise => Some(CAPTION_SUFFIX_PRECISE),
        }
    }
}

pub fn build_caption_prompt(variant: CaptionSuffix) -> String {
    PromptSpec::caption(variant)
        .render()
        .expect("caption prompts always render")
}

pub fn build_biased_instruction(term: &str) -> String {
    format!("Identify the primary {term} in the image.")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasTerm {
    Shape,
    Texture,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynonymSet {
    pub term: BiasTerm,
    pub synonyms: Vec<String>,
}

const SHAPE_SYNONYMS: [&str; 12] = [
    "architecture", "aspect", "body", "configuration", "contour", "format", "frame", "model",
    "outline", "pattern", "shadow", "silhouette",
];

const TEXTURE_SYNONYMS: [&str; 16] = [
    "balance", "character", "composition", "consistency", "fabric", "feeling", "make-up",
    "nature", "pattern", "quality", "sense", "smoothness", "structure", "surface", "taste",
    "touch",
];

impl SynonymSet {
    pub fn shape() -> Self {
        Self {
            term: BiasTerm::Shape,
            synonyms: SHAPE_SYNONYMS.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn texture() -> Self {
        Self {
            term: BiasTerm::Texture,
            synonyms: TEXTURE_SYNONYMS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

pub fn synonym_sweep(set: &SynonymSet) -> Vec<PromptSpec> {
    set.synonyms.iter().map(|s| PromptSpec::biased_vqa(s)).collect()
}

/// Named prompt variants selectable from configs and the CLI.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum PromptVariant {
    VqaDefault,
    VqaClip,
    VqaDescribeObject,
    VqaDescribeObjectClip,
    VqaEmptyInstruction,
    VqaShape,
    VqaTexture,
    /// `vqa-biased:<term>`
    VqaBiased(String),
    /// `vqa-custom:<instruction>`
    VqaCustom(String),
    CaptionShort,
    CaptionNoSuffix,
    CaptionPrecise,
}

impl PromptVariant {
    /// Variants with a shipped golden file.
    pub const GOLDEN: [PromptVariant; 10] = [
        PromptVariant::VqaDefault,
        PromptVariant::VqaClip,
        PromptVariant::VqaDescribeObject,
        PromptVariant::VqaDescribeObjectClip,
        PromptVariant::VqaEmptyInstruction,
        PromptVariant::VqaShape,
        PromptVariant::VqaTexture,
        PromptVariant::CaptionShort,
        PromptVariant::CaptionNoSuffix,
        PromptVariant::CaptionPrecise,
    ];

    pub fn spec(&self) -> PromptSpec {
        let clip = |mut s: PromptSpec| {
            s.option_style = OptionStyle::ClipStyle;
            s
        };
        match self {
            PromptVariant::VqaDefault => PromptSpec::neutral_vqa(),
            PromptVariant::VqaClip => clip(PromptSpec::neutral_vqa()),
            PromptVariant::VqaDescribeObject => PromptSpec::vqa_with_instruction(DESCRIBE_OBJECT_INSTRUCTION),
            PromptVariant::VqaDescribeObjectClip => {
                clip(PromptSpec::vqa_with_instruction(DESCRIBE_OBJECT_INSTRUCTION))
            }
            PromptVariant::VqaEmptyInstruction => PromptSpec::vqa_with_instruction(""),
            PromptVariant::VqaShape => PromptSpec::biased_vqa("shape"),
            PromptVariant::VqaTexture => PromptSpec::biased_vqa("texture"),
            PromptVariant::VqaBiased(t) => PromptSpec::biased_vqa(t),
            PromptVariant::VqaCustom(i) => PromptSpec::vqa_with_instruction(i.clone()),
            PromptVariant::CaptionShort => PromptSpec::caption(CaptionSuffix::Short),
            PromptVariant::CaptionNoSuffix => PromptSpec::caption(CaptionSuffix::NoSuffix),
            PromptVariant::CaptionPrecise => PromptSpec::caption(CaptionSuffix::Precise),
        }
    }

    pub fn task(&self) -> Task {
        self.spec().task
    }
}

impl fmt::Display for PromptVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PromptVariant::VqaDefault => f.write_str("vqa-default"),
            PromptVariant::VqaClip => f.write_str("vqa-clip"),
            PromptVariant::VqaDescribeObject => f.write_str("vqa-describe-object"),
            PromptVariant::VqaDescribeObjectClip => f.write_str("vqa-describe-object-clip"),
            PromptVariant::VqaEmptyInstruction => f.write_str("vqa-empty"),
            PromptVariant::VqaShape => f.write_str("vqa-shape"),
            PromptVariant::VqaTexture => f.write_str("vqa-texture"),
            PromptVariant::VqaBiased(t) => write!(f, "vqa-biased:{t}"),
            PromptVariant::VqaCustom(i) => write!(f, "vqa-custom:{i}"),
            PromptVariant::CaptionShort => f.write_str("caption-short"),
            PromptVariant::CaptionNoSuffix => f.write_str("caption-none"),
            PromptVariant::CaptionPrecise => f.write_str("caption-precise"),
        }
    }
}

impl FromStr for PromptVariant {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(t) = s.strip_prefix("vqa-biased:") {
            return Ok(PromptVariant::VqaBiased(t.to_string()));
        }
        if let Some(i) = s.strip_prefix("vqa-custom:") {
            return Ok(PromptVariant::VqaCustom(i.to_string()));
        }
        PromptVariant::GOLDEN
            .iter()
            .find(|v| v.to_string() == s)
            .cloned()
            .ok_or_else(|| PromptError::UnknownVariant(s.to_string()))
    }
}

impl Serialize for PromptVariant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PromptVariant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_vqa_lines() {
        let p = build_vqa_prompt(&PromptSpec::neutral_vqa()).unwrap();
        let lines: Vec<_> = p.lines().collect();
        assert_eq!(lines.len(), 18);
        assert_eq!(lines[0], "Which option best describes the image?");
        assert_eq!(lines[1], "A. airplane");
        assert_eq!(lines[16], "P. truck");
        assert_eq!(lines[17], "Answer with the option's letter from the given choices directly.");
        assert!(!p.ends_with('\n'));
    }

    #[test]
    fn clip_style_options() {
        let p = PromptVariant::VqaClip.spec().render().unwrap();
        assert_eq!(p.lines().nth(1), Some("A. a photo of a airplane"));
    }

    #[test]
    fn empty_instruction_renders_options_only() {
        let p = PromptVariant::VqaEmptyInstruction.spec().render().unwrap();
        assert_eq!(p.lines().next(), Some("A. airplane"));
        assert_eq!(p.lines().count(), 17);
        let mut spec = PromptSpec::vqa_with_instruction("");
        spec.option_style = OptionStyle::None;
        assert_eq!(build_vqa_prompt(&spec), Err(PromptError::MissingInstruction));
    }

    #[test]
    fn caption_variants() {
        assert_eq!(build_caption_prompt(CaptionSuffix::Short), "Describe the image. Keep your response short.");
        assert_eq!(build_caption_prompt(CaptionSuffix::NoSuffix), "Describe the image.");
        assert_eq!(build_caption_prompt(CaptionSuffix::Precise), "Describe the image. Be precise.");
    }

    #[test]
    fn biased_instructions() {
        assert_eq!(build_biased_instruction("shape"), "Identify the primary shape in the image.");
        assert_eq!(build_biased_instruction("texture"), "Identify the primary texture in the image.");
        assert_eq!(build_biased_instruction("silhouette"), "Identify the primary silhouette in the image.");
    }

    #[test]
    fn synonym_sets() {
        let shape = SynonymSet::shape();
        let texture = SynonymSet::texture();
        assert_eq!(shape.synonyms[..4], ["architecture", "aspect", "body", "configuration"]);
        assert_eq!(texture.synonyms[..4], ["balance", "character", "composition", "consistency"]);
        let specs = synonym_sweep(&shape);
        assert_eq!(specs.len(), 12);
        assert_eq!(synonym_sweep(&texture).len(), 16);
        assert_eq!(specs[11].instruction, "Identify the primary silhouette in the image.");
        assert_eq!(specs[11].biased_term.as_deref(), Some("silhouette"));
        let empty = SynonymSet { term: BiasTerm::Shape, synonyms: vec![] };
        assert!(synonym_sweep(&empty).is_empty());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in PromptVariant::GOLDEN {
            assert_eq!(v.to_string().parse::<PromptVariant>().unwrap(), v);
        }
        assert_eq!(
            "vqa-biased:outline".parse::<PromptVariant>().unwrap(),
            PromptVariant::VqaBiased("outline".into())
        );
        assert!("nope".parse::<PromptVariant>().is_err());
    }
}
