//! Cue-conflict dataset ingestion.
//!
//! Files follow the `<shape><i>-<texture><j>.<ext>` naming of the public
//! cue-conflict release. Items whose shape and texture classes coincide carry
//! no conflict and are excluded at load time.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::steering::FloatImage;

/// The 16 cue-conflict super-classes, in alphabetical (= option letter) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Airplane,
    Bear,
    Bicycle,
    Bird,
    Boat,
    Bottle,
    Car,
    Cat,
    Chair,
    Clock,
    Dog,
    Elephant,
    Keyboard,
    Knife,
    Oven,
    Truck,
}

impl ClassLabel {
    pub const COUNT: usize = 16;

    pub const ALL: [ClassLabel; 16] = [
        ClassLabel::Airplane,
        ClassLabel::Bear,
        ClassLabel::Bicycle,
        ClassLabel::Bird,
        ClassLabel::Boat,
        ClassLabel::Bottle,
        ClassLabel::Car,
        ClassLabel::Cat,
        ClassLabel::Chair,
        ClassLabel::Clock,
        ClassLabel::Dog,
        ClassLabel::Elephant,
        ClassLabel::Keyboard,
        ClassLabel::Knife,
        ClassLabel::Oven,
        ClassLabel::Truck,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    /// Option letter `A`..`P`.
    pub fn letter(self) -> char {
        (b'A' + self as u8) as char
    }

    /// Case-insensitive option letter lookup.
    pub fn from_letter(letter: char) -> Option<Self> {
        let upper = letter.to_ascii_uppercase();
        if upper.is_ascii_uppercase() {
            Self::from_index((upper as u8 - b'A') as usize)
        } else {
            None
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Airplane => "airplane",
            ClassLabel::Bear => "bear",
            ClassLabel::Bicycle => "bicycle",
            ClassLabel::Bird => "bird",
            ClassLabel::Boat => "boat",
            ClassLabel::Bottle => "bottle",
            ClassLabel::Car => "car",
            ClassLabel::Cat => "cat",
            ClassLabel::Chair => "chair",
            ClassLabel::Clock => "clock",
            ClassLabel::Dog => "dog",
            ClassLabel::Elephant => "elephant",
            ClassLabel::Keyboard => "keyboard",
            ClassLabel::Knife => "knife",
            ClassLabel::Oven => "oven",
            ClassLabel::Truck => "truck",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassLabel {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ClassLabel::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| DatasetError::UnknownClass(s.to_string()))
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error("malformed item name `{0}` (expected `<class><digits>-<class><digits>`)")]
    MalformedName(String),
    #[error("no parseable images in {0}")]
    EmptyDataset(PathBuf),
    #[error("{} file(s) failed to load: {}", .0.len(), summarize(.0))]
    Files(Vec<FileError>),
    #[error("duplicate item id `{0}`")]
    DuplicateItem(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image decode error: {0}")]
    Decode(#[from] image::ImageError),
}

#[derive(Debug)]
pub struct FileError {
    pub path: PathBuf,
    pub message: String,
}

fn summarize(errors: &[FileError]) -> String {
    errors
        .iter()
        .take(5)
        .map(|e| format!("{}: {}", e.path.display(), e.message))
        .collect::<Vec<_>>()
        .join("; ")
}

/// One benchmark image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CueConflictItem {
    pub item_id: String,
    #[serde(skip)]
    pub image_ref: PathBuf,
    pub shape: ClassLabel,
    pub texture: ClassLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
}

impl CueConflictItem {
    /// Build an item from a file stem, without touching the filesystem.
    pub fn from_stem(stem: &str) -> Result<Self, DatasetError> {
        let (shape, texture) = parse_item_filename(stem)?;
        Ok(Self {
            item_id: stem.to_string(),
            image_ref: PathBuf::new(),
            shape,
            texture,
            width: None,
            height: None,
        })
    }

    pub fn with_size(mut self, width: u32, height: u32) -> Self {
        self.width = Some(width);
        self.height = Some(height);
        self
    }

    pub fn is_conflicting(&self) -> bool {
        self.shape != self.texture
    }

    /// Decode the backing file to float RGB in `[0, 1]`.
    pub fn load_image(&self) -> Result<FloatImage, DatasetError> {
        let img = image::open(&self.image_ref)?.to_rgb8();
        Ok(FloatImage::from_rgb8(&img))
    }
}

/// Split `<class><digits>-<class><digits>` into its two labels.
pub fn parse_item_filename(name: &str) -> Result<(ClassLabel, ClassLabel), DatasetError> {
    let malformed = || DatasetError::MalformedName(name.to_string());
    let mut parts = name.split('-');
    let (Some(first), Some(second), None) = (parts.next(), parts.next(), parts.next()) else {
        return Err(malformed());
    };
    let label = |token: &str| -> Result<ClassLabel, DatasetError> {
        let class = token.trim_end_matches(|c: char| c.is_ascii_digit());
        let digits = &token[class.len()..];
        if class.is_empty() || digits.is_empty() || !class.chars().all(|c| c.is_ascii_lowercase()) {
            return Err(malformed());
        }
        class.parse()
    };
    Ok((label(first)?, label(second)?))
}

const RASTER_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "gif", "tif", "tiff", "webp"];

/// Retained items plus the bookkeeping needed to audit the exclusion rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub items: Vec<CueConflictItem>,
    pub excluded_count: usize,
    pub source_dir: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    format: String,
    filename_convention: String,
    retained_count: usize,
    excluded_count: usize,
}

const MANIFEST_FORMAT: &str = "cue-conflict-manifest/1";
const FILENAME_CONVENTION: &str = "<shape><i>-<texture><j>.<ext>";

impl DatasetManifest {
    /// Assemble a manifest from already-built items, applying the exclusion rule.
    pub fn from_items(items: Vec<CueConflictItem>, source_dir: impl Into<PathBuf>) -> Self {
        let manifest = Self {
            items,
            excluded_count: 0,
            source_dir: source_dir.into(),
        };
        filter_same_cue(manifest)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn raw_count(&self) -> usize {
        self.items.len() + self.excluded_count
    }

    pub fn get(&self, item_id: &str) -> Option<&CueConflictItem> {
        self.items
            .binary_search_by(|it| it.item_id.as_str().cmp(item_id))
            .ok()
            .map(|i| &self.items[i])
            .or_else(|| self.items.iter().find(|it| it.item_id == item_id))
    }

    /// Header line plus one `{item_id, shape, texture}` record per item.
    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        let header = ManifestHeader {
            format: MANIFEST_FORMAT.to_string(),
            filename_convention: FILENAME_CONVENTION.to_string(),
            retained_count: self.items.len(),
            excluded_count: self.excluded_count,
        };
        writeln!(out, "{}", serde_json::to_string(&header)?)?;
        for item in &self.items {
            let rec = ItemRecord {
                item_id: &item.item_id,
                shape: item.shape,
                texture: item.texture,
            };
            writeln!(out, "{}", serde_json::to_string(&rec)?)?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("manifest JSON is UTF-8")
    }

    /// Content hash over the serialized manifest (independent of `source_dir`).
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_jsonl().as_bytes()))
    }
}

#[derive(Serialize)]
struct ItemRecord<'a> {
    item_id: &'a str,
    shape: ClassLabel,
    texture: ClassLabel,
}

/// Drop same-class items, accumulating them into `excluded_count`.
pub fn filter_same_cue(mut manifest: DatasetManifest) -> DatasetManifest {
    let before = manifest.items.len();
    manifest.items.retain(CueConflictItem::is_conflicting);
    manifest.excluded_count += before - manifest.items.len();
    manifest
}

/// Scan `dir` for raster files, decode each, and build the filtered manifest.
///
/// Any unparseable name or undecodable file aborts the whole load; the error
/// lists every failing file.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<DatasetManifest, DatasetError> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| RASTER_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    paths.sort_by(|a, b| a.file_name().cmp(&b.file_name()));

    let mut items = Vec::with_capacity(paths.len());
    let mut failures = Vec::new();
    let mut seen = HashSet::new();
    for path in paths {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        match load_item(&path, &stem) {
            Ok(item) => {
                if !seen.insert(item.item_id.clone()) {
                    failures.push(FileError {
                        path,
                        message: DatasetError::DuplicateItem(stem).to_string(),
                    });
                    continue;
                }
                items.push(item)
            }
            Err(e) => failures.push(FileError {
                path,
                message: e.to_string(),
            }),
        }
    }
    if !failures.is_empty() {
        return Err(DatasetError::Files(failures));
    }
    if items.is_empty() {
        return Err(DatasetError::EmptyDataset(dir.to_path_buf()));
    }
    log::debug!("loaded {} raw items from {}", items.len(), dir.display());
    Ok(DatasetManifest::from_items(items, dir))
}

fn load_item(path: &Path, stem: &str) -> Result<CueConflictItem, DatasetError> {
    let mut item = CueConflictItem::from_stem(stem)?;
    let img = image::open(path)?;
    item.image_ref = path.to_path_buf();
    Ok(item.with_size(img.width(), img.height()))
}
