//! Vision steering transforms and the language-steering prompt search.
//!
//! Both transforms operate on float RGB in `[0, 1]` and never change image
//! dimensions. Perturbed images travel to backends as lossless PNG.

mod search;

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng::{derive_seed, CounterRng};

pub use search::{
    extract_candidate_prompt, feedback_line, optimizer_instruction, run_prompt_search, Candidate, Evaluation,
    Objective, SearchConfig, SearchError, SearchState, StopReason, Turn, CANDIDATE_MARKER, NUDGE,
};

#[derive(Debug, Error)]
pub enum SteeringError {
    #[error("{width}x{height} image is not divisible into {patch_px}px patches")]
    NotDivisible { width: u32, height: u32, patch_px: u32 },
    #[error("patch size must be at least 1 pixel")]
    ZeroPatch,
    #[error("noise variance must be nonnegative and finite, got {0}")]
    NegativeVariance(f64),
    #[error("image encoding failed: {0}")]
    Encode(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Interleaved RGB, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl FloatImage {
    pub fn new(width: u32, height: u32, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width as usize * height as usize * 3, "buffer size mismatch");
        Self { width, height, data }
    }

    pub fn filled(width: u32, height: u32, value: f32) -> Self {
        Self::new(width, height, vec![value; width as usize * height as usize * 3])
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let data = img.as_raw().iter().map(|v| f32::from(*v) / 255.0).collect();
        Self::new(img.width(), img.height(), data)
    }

    /// Quantize to 8 bits per channel (round to nearest).
    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        RgbImage::from_raw(self.width, self.height, raw).expect("buffer size checked at construction")
    }

    pub fn to_png(&self) -> Result<Vec<u8>, SteeringError> {
        let mut out = Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    /// Index of the red channel of pixel `(x, y)` in `data`.
    pub fn pixel_offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * 3
    }
}

/// Split into `patch_px`-square tiles and permute them uniformly at random.
///
/// Tiles are numbered row-major. Output tile `k` is input tile `perm[k]`,
/// where `perm` is the identity shuffled by a Fisher-Yates pass over
/// `CounterRng::new(seed)`.
pub fn patch_shuffle(image: &FloatImage, patch_px: u32, seed: u64) -> Result<FloatImage, SteeringError> {
    let perm = tile_permutation(image.width, image.height, patch_px, seed)?;
    let cols = image.width / patch_px;
    let mut out = image.clone();
    let row_len = patch_px as usize * 3;
    for (dst, &src) in perm.iter().enumerate() {
        let (dx, dy) = ((dst as u32 % cols) * patch_px, (dst as u32 / cols) * patch_px);
        let (sx, sy) = ((src as u32 % cols) * patch_px, (src as u32 / cols) * patch_px);
        for r in 0..patch_px {
            let d = out.pixel_offset(dx, dy + r);
            let s = image.pixel_offset(sx, sy + r);
            out.data[d..d + row_len].copy_from_slice(&image.data[s..s + row_len]);
        }
    }
    Ok(out)
}

/// The tile permutation [`patch_shuffle`] applies.
pub fn tile_permutation(width: u32, height: u32, patch_px: u32, seed: u64) -> Result<Vec<usize>, SteeringError> {
    if patch_px == 0 {
        return Err(SteeringError::ZeroPatch);
    }
    if !width.is_multiple_of(patch_px) || !height.is_multiple_of(patch_px) {
        return Err(SteeringError::NotDivisible {
            width,
            height,
            patch_px,
        });
    }
    let n = (width / patch_px) as usize * (height / patch_px) as usize;
    let mut perm: Vec<usize> = (0..n).collect();
    CounterRng::new(seed).shuffle(&mut perm);
    Ok(perm)
}

/// The additive noise field, before clamping.
pub fn noise_field(len: usize, variance: f64, seed: u64) -> Result<Vec<f64>, SteeringError> {
    if !variance.is_finite() || variance < 0.0 {
        return Err(SteeringError::NegativeVariance(variance));
    }
    if variance == 0.0 {
        return Ok(vec![0.0; len]);
    }
    let normal = Normal::new(0.0, variance.sqrt()).expect("std dev is finite and positive");
    let mut rng = CounterRng::new(seed);
    Ok((0..len).map(|_| normal.sample(&mut rng)).collect())
}

/// Add `N(0, variance)` to every channel of every pixel, then clamp to `[0, 1]`.
pub fn gaussian_noise(image: &FloatImage, variance: f64, seed: u64) -> Result<FloatImage, SteeringError> {
    let field = noise_field(image.data.len(), variance, seed)?;
    let data = image
        .data
        .iter()
        .zip(field)
        .map(|(v, n)| (f64::from(*v) + n).clamp(0.0, 1.0) as f32)
        .collect();
    Ok(FloatImage::new(image.width, image.height, data))
}

/// Declarative image perturbation. `seed` is a run-level value; the per-image
/// stream is derived from it and the item id.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PerturbationSpec {
    #[default]
    None,
    PatchShuffle {
        patch_px: u32,
        #[serde(default)]
        seed: u64,
    },
    GaussianNoise {
        variance: f64,
        #[serde(default)]
        seed: u64,
    },
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<(), SteeringError> {
        match *self {
            PerturbationSpec::None => Ok(()),
            PerturbationSpec::PatchShuffle { patch_px: 0, .. } => Err(SteeringError::ZeroPatch),
            PerturbationSpec::PatchShuffle { .. } => Ok(()),
            PerturbationSpec::GaussianNoise { variance, .. } if !variance.is_finite() || variance < 0.0 => {
                Err(SteeringError::NegativeVariance(variance))
            }
            PerturbationSpec::GaussianNoise { .. } => Ok(()),
        }
    }

    /// Compact label, e.g. `patch_shuffle:28:0`.
    pub fn label(&self) -> String {
        match self {
            PerturbationSpec::None => "none".into(),
            PerturbationSpec::PatchShuffle { patch_px, seed } => format!("patch_shuffle:{patch_px}:{seed}"),
            PerturbationSpec::GaussianNoise { variance, seed } => format!("gaussian_noise:{variance}:{seed}"),
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("perturbation specs always serialize");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Check the spec against an image size without touching pixels.
    pub fn check_size(&self, width: u32, height: u32) -> Result<(), SteeringError> {
        self.validate()?;
        match *self {
            PerturbationSpec::PatchShuffle { patch_px, .. } if !width.is_multiple_of(patch_px) || !height.is_multiple_of(patch_px) => {
                Err(SteeringError::NotDivisible {
                    width,
                    height,
                    patch_px,
                })
            }
            _ => Ok(()),
        }
    }

    pub fn apply(&self, image: &FloatImage, item_id: &str) -> Result<FloatImage, SteeringError> {
        match *self {
            PerturbationSpec::None => Ok(image.clone()),
            PerturbationSpec::PatchShuffle { patch_px, seed } => {
                patch_shuffle(image, patch_px, derive_seed(seed, item_id))
            }
            PerturbationSpec::GaussianNoise { variance, seed } => {
                gaussian_noise(image, variance, derive_seed(seed, item_id))
            }
        }
    }
}

/// On-disk store of perturbed PNGs keyed by `(item_id, spec hash)`.
#[derive(Debug, Clone)]
pub struct ImageCache {
    dir: PathBuf,
}

impl ImageCache {
    pub fn new(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn path_for(&self, item_id: &str, spec: &PerturbationSpec) -> PathBuf {
        self.dir.join(format!("{item_id}-{}.png", &spec.hash()[..16]))
    }

    /// Cached PNG bytes, computing and storing them on a miss.
    pub fn get_or_insert(
        &self,
        item_id: &str,
        spec: &PerturbationSpec,
        compute: impl FnOnce() -> Result<Vec<u8>, SteeringError>,
    ) -> Result<Vec<u8>, SteeringError> {
        let path = self.path_for(item_id, spec);
        if let Ok(bytes) = std::fs::read(&path) {
            return Ok(bytes);
        }
        let bytes = compute()?;
        write_atomic(&path, &bytes)?;
        Ok(bytes)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Every pixel carries its own coordinates so tile moves are traceable.
    fn coords_image(w: u32, h: u32) -> FloatImage {
        let mut data = Vec::new();
        for y in 0..h {
            for x in 0..w {
                data.extend([x as f32 / w as f32, y as f32 / h as f32, 0.25]);
            }
        }
        FloatImage::new(w, h, data)
    }

    #[test]
    fn full_size_patch_is_identity() {
        let img = coords_image(32, 32);
        for seed in 0..5 {
            assert_eq!(patch_shuffle(&img, 32, seed).unwrap(), img);
        }
    }

    #[test]
    fn shuffle_rejects_indivisible_sizes() {
        let img = coords_image(30, 30);
        assert!(matches!(
            patch_shuffle(&img, 7, 0),
            Err(SteeringError::NotDivisible { patch_px: 7, .. })
        ));
        assert!(matches!(patch_shuffle(&img, 0, 0), Err(SteeringError::ZeroPatch)));
    }

    #[test]
    fn shuffle_moves_whole_tiles() {
        let img = coords_image(224, 224);
        let out = patch_shuffle(&img, 28, 7).unwrap();
        let perm = tile_permutation(224, 224, 28, 7).unwrap();
        assert_eq!(perm.len(), 64);
        let mut sorted = perm.clone();
        sorted.sort();
        assert_eq!(sorted, (0..64).collect::<Vec<_>>());
        for (dst, &src) in perm.iter().enumerate() {
            let (dx, dy) = ((dst % 8) as u32 * 28, (dst / 8) as u32 * 28);
            let (sx, sy) = ((src % 8) as u32 * 28, (src / 8) as u32 * 28);
            for (ox, oy) in [(0, 0), (27, 0), (13, 27)] {
                let d = out.pixel_offset(dx + ox, dy + oy);
                let s = img.pixel_offset(sx + ox, sy + oy);
                assert_eq!(out.data[d..d + 3], img.data[s..s + 3]);
            }
        }
    }

    #[test]
    fn noise_is_seeded_and_clamped() {
        let img = FloatImage::filled(16, 16, 0.9);
        let a = gaussian_noise(&img, 0.3, 1).unwrap();
        let b = gaussian_noise(&img, 0.3, 1).unwrap();
        let c = gaussian_noise(&img, 0.3, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(gaussian_noise(&img, 0.0, 5).unwrap(), img);
        assert!(matches!(
            gaussian_noise(&img, -0.1, 0),
            Err(SteeringError::NegativeVariance(_))
        ));
    }

    #[test]
    fn spec_serde_and_hash() {
        let s = PerturbationSpec::PatchShuffle { patch_px: 28, seed: 3 };
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, r#"{"kind":"patch_shuffle","patch_px":28,"seed":3}"#);
        assert_eq!(serde_json::from_str::<PerturbationSpec>(&json).unwrap(), s);
        assert_ne!(s.hash(), PerturbationSpec::None.hash());
        assert_eq!(s.hash(), s.hash());
    }

    #[test]
    fn png_round_trip_is_lossless_at_8_bits() {
        let img = coords_image(8, 8);
        let png = img.to_png().unwrap();
        let back = image::load_from_memory(&png).unwrap().to_rgb8();
        assert_eq!(back, img.to_rgb8());
    }
}
