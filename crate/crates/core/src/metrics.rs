//! Cue accuracy, shape bias, confidence analysis and error consistency.
//!
//! Counting is done on integers; fractions are derived from the counts at the
//! end so that `cue = shape + texture` holds exactly on the count level.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ClassLabel, CueConflictItem, DatasetManifest};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no outcomes to aggregate")]
    EmptyInput,
    #[error("a predicted label cannot coexist with a non-answer flag")]
    ContradictoryFlags,
    #[error("unknown item `{0}`")]
    UnknownItem(String),
    #[error("trial on `{0}` carries no confidence profile")]
    MissingProfile(String),
    #[error("pattern lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

/// What a single trial amounted to, relative to the item's two cues.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "label", rename_all = "snake_case")]
pub enum Outcome {
    ShapeHit,
    TextureHit,
    OtherClass(ClassLabel),
    Generic,
    Invalid,
    Refusal,
}

impl Outcome {
    pub fn is_shape_hit(self) -> bool {
        matches!(self, Outcome::ShapeHit)
    }
}

/// Non-answer markers accompanying an unparseable reply.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NonAnswer {
    pub refused: bool,
    pub invalid: bool,
    pub generic: bool,
}

pub fn classify_outcome(
    predicted: Option<ClassLabel>,
    item: &CueConflictItem,
    flags: NonAnswer,
) -> Result<Outcome, MetricsError> {
    let flag_count = [flags.refused, flags.invalid, flags.generic]
        .iter()
        .filter(|f| **f)
        .count();
    match predicted {
        Some(_) if flag_count > 0 => Err(MetricsError::ContradictoryFlags),
        Some(p) if p == item.shape => Ok(Outcome::ShapeHit),
        Some(p) if p == item.texture => Ok(Outcome::TextureHit),
        Some(p) => Ok(Outcome::OtherClass(p)),
        None if flag_count > 1 => Err(MetricsError::ContradictoryFlags),
        None if flags.refused => Ok(Outcome::Refusal),
        None if flags.generic => Ok(Outcome::Generic),
        None => Ok(Outcome::Invalid),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub shape_hits: u64,
    pub texture_hits: u64,
    pub misses: u64,
}

/// Integer tallies behind a [`BiasReport`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub shape_hits: u64,
    pub texture_hits: u64,
    pub other_class: u64,
    pub refusals: u64,
    pub invalid: u64,
    pub generic: u64,
}

impl OutcomeCounts {
    pub fn add(&mut self, outcome: Outcome) {
        match outcome {
            Outcome::ShapeHit => self.shape_hits += 1,
            Outcome::TextureHit => self.texture_hits += 1,
            Outcome::OtherClass(_) => self.other_class += 1,
            Outcome::Refusal => self.refusals += 1,
            Outcome::Invalid => self.invalid += 1,
            Outcome::Generic => self.generic += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.shape_hits + self.texture_hits + self.other_class + self.refusals + self.invalid + self.generic
    }

    pub fn cue_hits(&self) -> u64 {
        self.shape_hits + self.texture_hits
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub n_trials: u64,
    pub counts: OutcomeCounts,
    pub shape_accuracy: f64,
    pub texture_accuracy: f64,
    pub cue_accuracy: f64,
    /// `None` when no trial hit either cue; serialized as `null`.
    pub shape_bias: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_class: BTreeMap<ClassLabel, ClassCounts>,
    pub refusal_count: u64,
    pub invalid_count: u64,
    pub generic_count: u64,
}

impl BiasReport {
    pub fn from_counts(counts: OutcomeCounts) -> Result<Self, MetricsError> {
        let n = counts.total();
        if n == 0 {
            return Err(MetricsError::EmptyInput);
        }
        let nf = n as f64;
        let cue = counts.cue_hits();
        Ok(Self {
            n_trials: n,
            counts,
            shape_accuracy: counts.shape_hits as f64 / nf,
            texture_accuracy: counts.texture_hits as f64 / nf,
            cue_accuracy: cue as f64 / nf,
            shape_bias: (cue > 0).then(|| counts.shape_hits as f64 / cue as f64),
            per_class: BTreeMap::new(),
            refusal_count: counts.refusals,
            invalid_count: counts.invalid,
            generic_count: counts.generic,
        })
    }

    pub fn texture_bias(&self) -> Option<f64> {
        self.shape_bias.map(|s| 1.0 - s)
    }
}

/// Lookup from item id to item.
pub struct ItemIndex<'a> {
    map: HashMap<&'a str, &'a CueConflictItem>,
}

impl<'a> ItemIndex<'a> {
    pub fn new(items: impl IntoIterator<Item = &'a CueConflictItem>) -> Self {
        Self {
            map: items.into_iter().map(|it| (it.item_id.as_str(), it)).collect(),
        }
    }

    pub fn from_manifest(manifest: &'a DatasetManifest) -> Self {
        Self::new(&manifest.items)
    }

    pub fn get(&self, item_id: &str) -> Result<&'a CueConflictItem, MetricsError> {
        self.map
            .get(item_id)
            .copied()
            .ok_or_else(|| MetricsError::UnknownItem(item_id.to_string()))
    }
}

pub fn compute_bias_report<S: AsRef<str>>(outcomes: &[(S, Outcome)]) -> Result<BiasReport, MetricsError> {
    let mut counts = OutcomeCounts::default();
    for (_, o) in outcomes {
        counts.add(*o);
    }
    BiasReport::from_counts(counts)
}

/// Like [`compute_bias_report`], also filling `per_class` by the items' shape class.
pub fn compute_bias_report_with_items<S: AsRef<str>>(
    outcomes: &[(S, Outcome)],
    items: &ItemIndex<'_>,
) -> Result<BiasReport, MetricsError> {
    let mut report = compute_bias_report(outcomes)?;
    for (id, o) in outcomes {
        let item = items.get(id.as_ref())?;
        let bucket = report.per_class.entry(item.shape).or_default();
        match o {
            Outcome::ShapeHit => bucket.shape_hits += 1,
            Outcome::TextureHit => bucket.texture_hits += 1,
            _ => bucket.misses += 1,
        }
    }
    Ok(report)
}

/// One report per shape class; classes without trials are absent.
pub fn classwise_report<S: AsRef<str>>(
    outcomes: &[(S, Outcome)],
    items: &ItemIndex<'_>,
) -> Result<BTreeMap<ClassLabel, BiasReport>, MetricsError> {
    let mut buckets: BTreeMap<ClassLabel, OutcomeCounts> = BTreeMap::new();
    for (id, o) in outcomes {
        let item = items.get(id.as_ref())?;
        buckets.entry(item.shape).or_default().add(*o);
    }
    buckets
        .into_iter()
        .map(|(k, c)| BiasReport::from_counts(c).map(|r| (k, r)))
        .collect()
}

/// A probability slot: one of the 16 option letters, or the null class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptionSlot {
    Letter(ClassLabel),
    Null,
}

impl OptionSlot {
    pub const NULL_INDEX: usize = ClassLabel::COUNT;

    fn index(self) -> usize {
        match self {
            OptionSlot::Letter(c) => c.index(),
            OptionSlot::Null => Self::NULL_INDEX,
        }
    }

    fn from_index(i: usize) -> Self {
        ClassLabel::from_index(i).map_or(OptionSlot::Null, OptionSlot::Letter)
    }

    pub fn label(self) -> Option<ClassLabel> {
        match self {
            OptionSlot::Letter(c) => Some(c),
            OptionSlot::Null => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceProfile {
    /// Letters A..P followed by the null class.
    pub per_option: Vec<f64>,
    pub top1: OptionSlot,
    pub top1_prob: f64,
    pub top2: OptionSlot,
    pub top2_prob: f64,
}

impl ConfidenceProfile {
    pub fn prob(&self, slot: OptionSlot) -> f64 {
        self.per_option[slot.index()]
    }
}

/// Interpret a first-token string as an option letter: a single `A`..`P`,
/// surrounding whitespace ignored.
pub fn default_letter_map(token: &str) -> Option<ClassLabel> {
    let mut chars = token.trim().chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) if c.is_ascii_alphabetic() => ClassLabel::from_letter(c),
        _ => None,
    }
}

/// Softmax over the returned top-k first-token logprobs, folded onto option letters.
pub fn confidence_profile<S: AsRef<str>>(
    top_logprobs: &[(S, f64)],
    letter_map: impl Fn(&str) -> Option<ClassLabel>,
) -> ConfidenceProfile {
    let finite = top_logprobs.iter().filter(|(_, l)| l.is_finite());
    let max = finite.clone().map(|(_, l)| *l).fold(f64::NEG_INFINITY, f64::max);
    let mut mass = vec![0.0; ClassLabel::COUNT + 1];
    if max.is_finite() {
        for (tok, lp) in finite {
            let w = (lp - max).exp();
            let slot = letter_map(tok.as_ref()).map_or(OptionSlot::NULL_INDEX, |c| c.index());
            mass[slot] += w;
        }
    }
    let total: f64 = mass.iter().sum();
    if total > 0.0 {
        mass.iter_mut().for_each(|m| *m /= total);
    } else {
        mass[OptionSlot::NULL_INDEX] = 1.0;
    }

    // Stable order: higher probability first, then lower slot index (null is last).
    let mut order: Vec<usize> = (0..mass.len()).collect();
    order.sort_by(|&a, &b| mass[b].total_cmp(&mass[a]).then(a.cmp(&b)));
    ConfidenceProfile {
        top1: OptionSlot::from_index(order[0]),
        top1_prob: mass[order[0]],
        top2: OptionSlot::from_index(order[1]),
        top2_prob: mass[order[1]],
        per_option: mass,
    }
}

/// An outcome with its optional first-token confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfiledOutcome {
    pub item_id: String,
    pub outcome: Outcome,
    pub profile: Option<ConfidenceProfile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub retained_n: u64,
    pub shape_bias: Option<f64>,
    /// Shape hits over retained trials.
    pub shape_frac: Option<f64>,
    /// Texture hits over retained trials.
    pub texture_frac: Option<f64>,
}

/// Outcomes whose top-1 confidence is at least `threshold`.
pub fn filter_by_confidence(
    trials: &[ProfiledOutcome],
    threshold: f64,
) -> Result<Vec<(&str, Outcome)>, MetricsError> {
    let mut kept = Vec::new();
    for t in trials {
        let p = t
            .profile
            .as_ref()
            .ok_or_else(|| MetricsError::MissingProfile(t.item_id.clone()))?;
        if p.top1_prob >= threshold {
            kept.push((t.item_id.as_str(), t.outcome));
        }
    }
    Ok(kept)
}

pub fn threshold_sweep(
    trials: &[ProfiledOutcome],
    thresholds: &[f64],
) -> Result<Vec<SweepPoint>, MetricsError> {
    if trials.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    thresholds
        .iter()
        .map(|&threshold| {
            let kept = filter_by_confidence(trials, threshold)?;
            Ok(match compute_bias_report(&kept) {
                Ok(r) => SweepPoint {
                    threshold,
                    retained_n: r.n_trials,
                    shape_bias: r.shape_bias,
                    shape_frac: Some(r.shape_accuracy),
                    texture_frac: Some(r.texture_accuracy),
                },
                Err(_) => SweepPoint {
                    threshold,
                    retained_n: 0,
                    shape_bias: None,
                    shape_frac: None,
                    texture_frac: None,
                },
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Top2Overlap {
    pub n: u64,
    /// Top-2 letters are exactly the item's {shape, texture}.
    pub both_cues_ratio: f64,
    /// The second-ranked slot is neither cue.
    pub second_not_conflicting_ratio: f64,
}

pub fn top2_cue_overlap(
    trials: &[ProfiledOutcome],
    items: &ItemIndex<'_>,
) -> Result<Top2Overlap, MetricsError> {
    if trials.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let (mut both, mut second_other) = (0u64, 0u64);
    for t in trials {
        let p = t
            .profile
            .as_ref()
            .ok_or_else(|| MetricsError::MissingProfile(t.item_id.clone()))?;
        let item = items.get(&t.item_id)?;
        let cues = [Some(item.shape), Some(item.texture)];
        let (a, b) = (p.top1.label(), p.top2.label());
        if a.is_some() && b.is_some() && a != b && cues.contains(&a) && cues.contains(&b) {
            both += 1;
        }
        if !cues.contains(&b) {
            second_other += 1;
        }
    }
    let n = trials.len() as u64;
    Ok(Top2Overlap {
        n,
        both_cues_ratio: both as f64 / n as f64,
        second_not_conflicting_ratio: second_other as f64 / n as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorConsistencyResult {
    pub c_obs: f64,
    pub c_exp: f64,
    /// `None` when `c_exp = 1` (both patterns constant and equal).
    pub kappa: Option<f64>,
    pub n: usize,
}

/// Cohen's kappa between two per-item shape-correctness patterns.
pub fn error_consistency(a: &[bool], b: &[bool]) -> Result<ErrorConsistencyResult, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let n = a.len();
    let nf = n as f64;
    let agree = a.iter().zip(b).filter(|(x, y)| x == y).count();
    let p1 = a.iter().filter(|x| **x).count() as f64 / nf;
    let p2 = b.iter().filter(|x| **x).count() as f64 / nf;
    let c_obs = agree as f64 / nf;
    let c_exp = p1 * p2 + (1.0 - p1) * (1.0 - p2);
    let kappa = (c_exp < 1.0).then(|| (c_obs - c_exp) / (1.0 - c_exp));
    Ok(ErrorConsistencyResult { c_obs, c_exp, kappa, n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ClassLabel::*;

    fn item(s: &str) -> CueConflictItem {
        CueConflictItem::from_stem(s).unwrap()
    }

    #[test]
    fn classify_definitions() {
        let it = item("cat1-dog1");
        let none = NonAnswer::default();
        assert_eq!(classify_outcome(Some(Cat), &it, none), Ok(Outcome::ShapeHit));
        assert_eq!(classify_outcome(Some(Dog), &it, none), Ok(Outcome::TextureHit));
        assert_eq!(classify_outcome(Some(Oven), &it, none), Ok(Outcome::OtherClass(Oven)));
        let refused = NonAnswer { refused: true, ..none };
        assert_eq!(classify_outcome(None, &it, refused), Ok(Outcome::Refusal));
        assert_eq!(classify_outcome(Some(Cat), &it, refused), Err(MetricsError::ContradictoryFlags));
        let two = NonAnswer { refused: true, generic: true, ..none };
        assert_eq!(classify_outcome(None, &it, two), Err(MetricsError::ContradictoryFlags));
        assert_eq!(classify_outcome(None, &it, none), Ok(Outcome::Invalid));
    }

    #[test]
    fn report_arithmetic() {
        let o = [
            ("a", Outcome::ShapeHit),
            ("b", Outcome::ShapeHit),
            ("c", Outcome::ShapeHit),
            ("d", Outcome::TextureHit),
            ("e", Outcome::OtherClass(Oven)),
        ];
        let r = compute_bias_report(&o).unwrap();
        assert_eq!(r.n_trials, 5);
        assert!((r.cue_accuracy - 0.8).abs() < 1e-12);
        assert!((r.shape_bias.unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn all_refusals_leave_bias_undefined() {
        let o = vec![("a", Outcome::Refusal); 4];
        let r = compute_bias_report(&o).unwrap();
        assert_eq!(r.cue_accuracy, 0.0);
        assert_eq!(r.shape_bias, None);
        assert_eq!(r.refusal_count, 4);
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["shape_bias"].is_null());
    }

    #[test]
    fn empty_outcomes_error() {
        let o: [(&str, Outcome); 0] = [];
        assert_eq!(compute_bias_report(&o), Err(MetricsError::EmptyInput));
    }

    #[test]
    fn classwise_single_bucket() {
        let items = [item("cat1-dog1"), item("cat2-car1"), item("dog1-cat1")];
        let idx = ItemIndex::new(&items);
        let o = [("cat1-dog1", Outcome::ShapeHit), ("cat2-car1", Outcome::ShapeHit)];
        let m = classwise_report(&o, &idx).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m[&Cat].shape_bias, Some(1.0));
        assert_eq!(
            classwise_report(&[("nope1-cat1", Outcome::ShapeHit)], &idx),
            Err(MetricsError::UnknownItem("nope1-cat1".into()))
        );
    }

    #[test]
    fn profile_single_token() {
        let p = confidence_profile(&[("H", 0.0)], default_letter_map);
        assert_eq!(p.prob(OptionSlot::Letter(Cat)), 1.0);
        assert_eq!(p.top1, OptionSlot::Letter(Cat));
        assert_eq!(p.top2_prob, 0.0);
        // tie among zeros: lowest index wins
        assert_eq!(p.top2, OptionSlot::Letter(Airplane));
    }

    #[test]
    fn profile_symmetric_pair() {
        let p = confidence_profile(&[("A", -1.3), ("B", -1.3)], default_letter_map);
        assert_eq!(p.prob(OptionSlot::Letter(Airplane)), 0.5);
        assert_eq!(p.prob(OptionSlot::Letter(Bear)), 0.5);
        assert_eq!((p.top1, p.top2), (OptionSlot::Letter(Airplane), OptionSlot::Letter(Bear)));
    }

    #[test]
    fn profile_null_mass() {
        let toks = [("A", 0.6f64.ln()), ("the", 0.4f64.ln())];
        let p = confidence_profile(&toks, default_letter_map);
        // brute normalization oracle
        let z: f64 = toks.iter().map(|(_, l)| l.exp()).sum();
        assert!((p.prob(OptionSlot::Letter(Airplane)) - 0.6f64 / z).abs() < 1e-12);
        assert!((p.prob(OptionSlot::Null) - 0.4f64 / z).abs() < 1e-12);
        assert!((p.prob(OptionSlot::Null) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn profile_without_letters_is_all_null() {
        let p = confidence_profile::<&str>(&[], default_letter_map);
        assert_eq!(p.prob(OptionSlot::Null), 1.0);
        assert_eq!(p.top1, OptionSlot::Null);
    }

    #[test]
    fn kappa_disjoint_halves() {
        let a: Vec<bool> = (0..100).map(|i| i < 50).collect();
        let b: Vec<bool> = a.iter().map(|x| !x).collect();
        let r = error_consistency(&a, &b).unwrap();
        assert_eq!(r.c_obs, 0.0);
        assert_eq!(r.c_exp, 0.5);
        assert_eq!(r.kappa, Some(-1.0));
    }

    #[test]
    fn kappa_identical_and_constant() {
        let a: Vec<bool> = (0..10).map(|i| i < 2).collect();
        assert_eq!(error_consistency(&a, &a).unwrap().kappa, Some(1.0));
        let c = vec![true; 5];
        assert_eq!(error_consistency(&c, &c).unwrap().kappa, None);
        assert_eq!(
            error_consistency(&c, &a).unwrap_err(),
            MetricsError::LengthMismatch(5, 10)
        );
    }
}
