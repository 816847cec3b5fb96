//! Procedural corpora of complete shapes with simulated partial scans, and
//! train/val/test splits.
//!
//! Layout: `corpus.json`, `shapes/<name>.tsdf` (complete) and
//! `scans/<name>.tsdf` (partial). Conditioning images are rendered on load
//! from the complete shape at the recorded scan pose.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Manifest;
use super::config::RunConfig;
use crate::denoiser::{ImageCondition, TrainingExample};
use crate::error::{io_err, validation, Result};
use crate::grid::{
    load_grid, save_grid, simulate_partial_scan, synthesize, CameraPose, ShapeSpec, TsdfGrid,
};
use crate::render::{render_field, NormalImage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub name: String,
    pub spec: ShapeSpec,
    pub scan_azimuth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub resolution: usize,
    pub thresh: f32,
    pub scan_elevation: f64,
    pub scan_radius: f64,
    pub scan_image_size: usize,
    pub entries: Vec<CorpusEntry>,
}

impl CorpusManifest {
    pub fn scan_pose(&self, e: &CorpusEntry, image_size: usize) -> CameraPose {
        CameraPose::orbit(
            self.resolution,
            e.scan_azimuth,
            self.scan_elevation,
            self.scan_radius,
            image_size,
        )
    }
}

/// One loaded shape with its partial scan.
#[derive(Clone, Debug)]
pub struct CorpusItem {
    pub entry: CorpusEntry,
    pub complete: TsdfGrid,
    pub partial: TsdfGrid,
}

/// Normal render of the complete shape from the pose of its scan.
pub fn conditioning_image(m: &CorpusManifest, item: &CorpusItem, size: usize) -> NormalImage {
    render_field(&item.complete, &m.scan_pose(&item.entry, size)).normals
}

/// Builds the corpus in memory, scanning each shape from a random azimuth.
/// Without `specs`, shape `i` is `ShapeSpec::random` with a seed derived from
/// `corpus_seed`; with `specs`, shape `i` is `specs[i % specs.len()]`.
pub fn build_corpus(
    cfg: &RunConfig,
    specs: Option<&[ShapeSpec]>,
) -> Result<(CorpusManifest, Vec<CorpusItem>)> {
    if specs.is_some_and(|s| s.is_empty()) {
        return Err(validation("the spec list is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.corpus_seed);
    let mut manifest = CorpusManifest {
        resolution: cfg.resolution,
        thresh: cfg.thresh,
        scan_elevation: cfg.scan_elevation,
        scan_radius: cfg.scan_radius,
        scan_image_size: cfg.scan_image_size,
        entries: Vec::with_capacity(cfg.corpus_size),
    };
    let mut items = Vec::with_capacity(cfg.corpus_size);
    for i in 0..cfg.corpus_size {
        let entry = CorpusEntry {
            name: format!("shape{i:04}"),
            spec: match specs {
                Some(s) => s[i % s.len()].clone(),
                None => ShapeSpec::random(rng.gen(), cfg.resolution),
            },
            scan_azimuth: rng.gen_range(0.0..360.0),
        };
        let complete = synthesize(&entry.spec, cfg.resolution, cfg.thresh)?;
        let partial =
            simulate_partial_scan(&complete, &manifest.scan_pose(&entry, cfg.scan_image_size))?;
        manifest.entries.push(entry.clone());
        items.push(CorpusItem {
            entry,
            complete,
            partial,
        });
    }
    Ok((manifest, items))
}

fn shape_path(dir: &Path, name: &str) -> PathBuf {
    dir.join("shapes").join(format!("{name}.tsdf"))
}

fn scan_path(dir: &Path, name: &str) -> PathBuf {
    dir.join("scans").join(format!("{name}.tsdf"))
}

/// Generates the corpus and writes it under `dir` with a manifest sidecar.
pub fn generate_corpus(
    cfg: &RunConfig,
    specs: Option<&[ShapeSpec]>,
    dir: &Path,
) -> Result<CorpusManifest> {
    let (manifest, items) = build_corpus(cfg, specs)?;
    for sub in ["shapes", "scans"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| io_err(&d, e))?;
    }
    for item in &items {
        save_grid(&item.complete, &shape_path(dir, &item.entry.name))?;
        save_grid(&item.partial, &scan_path(dir, &item.entry.name))?;
    }
    let path = dir.join("corpus.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| io_err(&path, e))?;
    Manifest::write(&path, cfg, &[])?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<CorpusManifest> {
    let path = dir.join("corpus.json");
    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads the named entries (all when `names` is `None`).
pub fn load_items(
    dir: &Path,
    m: &CorpusManifest,
    names: Option<&[String]>,
) -> Result<Vec<CorpusItem>> {
    let entries: Vec<&CorpusEntry> = match names {
        None => m.entries.iter().collect(),
        Some(names) => names
            .iter()
            .map(|n| {
                m.entries
                    .iter()
                    .find(|e| &e.name == n)
                    .ok_or_else(|| validation(format!("{n} is not in the corpus")))
            })
            .collect::<Result<_>>()?,
    };
    entries
        .into_iter()
        .map(|e| {
            Ok(CorpusItem {
                entry: e.clone(),
                complete: load_grid(&shape_path(dir, &e.name))?,
                partial: load_grid(&scan_path(dir, &e.name))?,
            })
        })
        .collect()
}

/// Training triples with images rendered at `image_size`.
pub fn training_examples(
    m: &CorpusManifest,
    items: &[CorpusItem],
    image_size: usize,
) -> Vec<TrainingExample> {
    items
        .iter()
        .map(|it| TrainingExample {
            complete: it.complete.clone(),
            partial: it.partial.clone(),
            image: Some(ImageCondition::Image(conditioning_image(m, it, image_size))),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Deterministic shuffled partition with sizes `round(r_train n)`,
/// `round(r_val n)` and the remainder.
pub fn split_names(names: &[String], ratios: [f64; 3], seed: u64) -> Result<Split> {
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || ratios.iter().any(|r| *r < 0.0) {
        return Err(validation(format!(
            "split ratios must be nonnegative and sum to 1, got {sum}"
        )));
    }
    let n = names.len();
    if n < 3 {
        return Err(validation(format!(
            "splitting needs at least 3 shapes, got {n}"
        )));
    }
    let mut sorted = names.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != n {
        return Err(validation("shape names are not unique"));
    }
    sorted.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((ratios[0] * n as f64).round() as usize).min(n);
    let n_val = ((ratios[1] * n as f64).round() as usize).min(n - n_train);
    let mut test = sorted.split_off(n_train + n_val);
    let mut val = sorted.split_off(n_train);
    let mut train = sorted;
    for v in [&mut train, &mut val, &mut test] {
        v.sort();
    }
    Ok(Split { train, val, test })
}

/// Splits the corpus in `dir` and writes `train.txt`, `val.txt`, `test.txt`.
pub fn split_corpus(dir: &Path, ratios: [f64; 3], seed: u64) -> Result<Split> {
    let m = load_manifest(dir)?;
    let names: Vec<String> = m.entries.iter().map(|e| e.name.clone()).collect();
    let split = split_names(&names, ratios, seed)?;
    for (file, list) in [
        ("train.txt", &split.train),
        ("val.txt", &split.val),
        ("test.txt", &split.test),
    ] {
        let path = dir.join(file);
        let mut text = list.join("\n");
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    }
    Ok(split)
}

pub fn read_split_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}
