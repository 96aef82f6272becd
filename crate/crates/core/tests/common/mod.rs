//! Shared builders for integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use cuebias::backends::{ChatBackend, ReplayBackend};
use cuebias::dataset::{ClassLabel, CueConflictItem, DatasetManifest};
use cuebias::runner::{RunConfig, TrialRecord};
use cuebias::simulator::{SimulatorBackend, SimulatorConfig};

/// Every ordered pair of distinct classes, `per_pair` items each (`240 * per_pair` items).
pub fn pair_stems(per_pair: usize) -> Vec<String> {
    let mut out = Vec::new();
    for s in ClassLabel::ALL {
        for t in ClassLabel::ALL {
            if s == t {
                continue;
            }
            for k in 1..=per_pair {
                out.push(format!("{}{k}-{}{k}", s.name(), t.name()));
            }
        }
    }
    out
}

pub fn manifest_from_stems(stems: &[String]) -> DatasetManifest {
    let items = stems
        .iter()
        .map(|s| CueConflictItem::from_stem(s).unwrap().with_size(224, 224))
        .collect();
    DatasetManifest::from_items(items, "synthetic")
}

/// 1200 items: the size of the filtered cue-conflict set.
pub fn manifest_1200() -> DatasetManifest {
    manifest_from_stems(&pair_stems(5))
}

pub fn sim(config: SimulatorConfig) -> Arc<dyn ChatBackend> {
    Arc::new(SimulatorBackend::new(config).unwrap())
}

pub fn default_sim() -> Arc<dyn ChatBackend> {
    sim(SimulatorConfig::default())
}

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn replay(name: &str) -> Arc<dyn ChatBackend> {
    Arc::new(ReplayBackend::load(name, fixture(name)).unwrap())
}

pub fn vqa_config(backend: &str, seeds: Vec<u64>, out: &Path) -> RunConfig {
    RunConfig::new("synthetic", backend, cuebias::prompts::PromptVariant::VqaDefault, seeds, out)
}

/// Writes small noise PNGs named after `stems`.
pub fn write_png_dataset(dir: &Path, stems: &[&str], side: u32) {
    std::fs::create_dir_all(dir).unwrap();
    for (n, stem) in stems.iter().enumerate() {
        let img = image::RgbImage::from_fn(side, side, |x, y| {
            let v = ((x * 7 + y * 13 + n as u32 * 31) % 256) as u8;
            image::Rgb([v, v.wrapping_mul(3), 255 - v])
        });
        img.save(dir.join(format!("{stem}.png"))).unwrap();
    }
}

pub fn records_bytes(dir: &Path) -> Vec<u8> {
    std::fs::read(dir.join(cuebias::runner::RECORDS_FILE)).unwrap()
}

pub fn read_records(dir: &Path) -> Vec<TrialRecord> {
    cuebias::runner::read_records(dir.join(cuebias::runner::RECORDS_FILE)).unwrap()
}
