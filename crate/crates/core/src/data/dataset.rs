use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::image::{normalize, resize_bilinear};
use super::pnm::decode_image;
use super::taxonomy::Level;

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.7;

const IMAGE_EXTENSIONS: [&str; 3] = ["pgm", "ppm", "pnm"];

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// `[1, size, size]`, values in [-1, 1].
    pub pixels: Tensor,
    pub label: usize,
    /// Empty for images that never touched disk.
    pub source_path: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Partition {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    items: Vec<LabeledImage>,
    class_names: Vec<String>,
    partition: Option<Vec<Partition>>,
}

impl Dataset {
    pub fn new(class_names: Vec<String>, items: Vec<LabeledImage>) -> Result<Self> {
        if class_names.len() < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {class_names:?}"
            )));
        }
        if let Some(bad) = items.iter().find(|it| it.label >= class_names.len()) {
            return Err(Error::Index(format!(
                "label {} outside {} classes ({})",
                bad.label,
                class_names.len(),
                bad.source_path.display()
            )));
        }
        Ok(Dataset {
            items,
            class_names,
            partition: None,
        })
    }

    pub fn items(&self) -> &[LabeledImage] {
        &self.items
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn partition(&self) -> Option<&[Partition]> {
        self.partition.as_deref()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for item in &self.items {
            counts[item.label] += 1;
        }
        counts
    }

    /// Items tagged `which`; errors if the dataset has not been split.
    pub fn subset(&self, which: Partition) -> Result<Vec<&LabeledImage>> {
        let tags = self
            .partition
            .as_ref()
            .ok_or_else(|| Error::Split("dataset has not been split".into()))?;
        Ok(self
            .items
            .iter()
            .zip(tags)
            .filter(|(_, &t)| t == which)
            .map(|(it, _)| it)
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: usize,
    /// Dropped by the confidence threshold.
    pub filtered: usize,
    pub skipped: Vec<SkippedFile>,
    /// Subfolders that do not name a class at the requested level.
    pub ignored_folders: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub level: Level,
    pub image_size: usize,
    pub min_confidence: Option<f64>,
    pub metadata: Option<PathBuf>,
}

impl LoadOptions {
    pub fn new(level: Level, image_size: usize) -> Self {
        LoadOptions {
            level,
            image_size,
            min_confidence: None,
            metadata: None,
        }
    }
}

#[derive(Deserialize)]
struct MetadataRow {
    filename: String,
    confidence: f64,
}

fn read_metadata(path: &Path) -> Result<HashMap<String, f64>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut rows = HashMap::new();
    for row in reader.deserialize::<MetadataRow>() {
        let row = row.map_err(|e| csv_error(path, e))?;
        rows.insert(row.filename, row.confidence);
    }
    Ok(rows)
}

fn csv_error(path: &Path, err: csv::Error) -> Error {
    Error::Decode(format!("{}: {err}", path.display()))
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Confidence for a file, looked up by path relative to the root first and by
/// bare file name second.
fn confidence_of(rows: &HashMap<String, f64>, root: &Path, path: &Path) -> Option<f64> {
    let relative = path
        .strip_prefix(root)
        .ok()
        .map(|p| p.to_string_lossy().replace('\\', "/"));
    relative.and_then(|r| rows.get(&r).copied()).or_else(|| {
        path.file_name()
            .and_then(|n| rows.get(&*n.to_string_lossy()).copied())
    })
}

fn load_one(path: &Path, label: usize, image_size: usize) -> Result<LabeledImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let grid = decode_image(&bytes)?;
    let grid = resize_bilinear(&grid, image_size)?;
    Ok(LabeledImage {
        pixels: normalize(&grid),
        label,
        source_path: path.to_path_buf(),
    })
}

/// Reads a folder-per-class tree into an unsplit dataset.
///
/// Images that fail to decode are skipped and listed in the report.
/// Files absent from the metadata CSV are kept.
pub fn load_image_folder(root: &Path, options: &LoadOptions) -> Result<(Dataset, LoadReport)> {
    if options.image_size == 0 {
        return Err(Error::Contract("image size must be positive".into()));
    }
    let expected = options.level.class_names();
    let mut report = LoadReport::default();

    let mut present = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry
            .file_type()
            .map_err(|e| Error::io(entry.path(), e))?
            .is_dir()
        {
            present.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    present.sort();
    let missing: Vec<&str> = expected
        .iter()
        .copied()
        .filter(|name| !present.iter().any(|p| p == name))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Layout(format!(
            "{} is missing class folder(s) {missing:?}; expected {expected:?}",
            root.display()
        )));
    }
    for name in &present {
        if !expected.contains(&name.as_str()) {
            log::warn!(
                "ignoring folder {name:?}: not a class at level {}",
                options.level
            );
            report.ignored_folders.push(name.clone());
        }
    }

    let metadata = match (&options.metadata, options.min_confidence) {
        (Some(path), Some(_)) => Some(read_metadata(path)?),
        (None, Some(_)) => {
            return Err(Error::Config(
                "a confidence threshold needs a metadata file".into(),
            ))
        }
        _ => None,
    };

    let mut files = Vec::new();
    for (label, name) in expected.iter().enumerate() {
        let dir = root.join(name);
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_file() && has_image_extension(&path) {
                files.push((path, label));
            }
        }
    }
    files.sort();

    if let (Some(rows), Some(threshold)) = (&metadata, options.min_confidence) {
        let before = files.len();
        files.retain(|(path, _)| confidence_of(rows, root, path).is_none_or(|c| c >= threshold));
        report.filtered = before - files.len();
    }

    let decoded: Vec<_> = files
        .par_iter()
        .map(|(path, label)| (path, load_one(path, *label, options.image_size)))
        .collect();
    let mut items = Vec::with_capacity(decoded.len());
    for (path, outcome) in decoded {
        match outcome {
            Ok(item) => items.push(item),
            Err(Error::Decode(reason)) => {
                log::warn!("skipping {}: {reason}", path.display());
                report.skipped.push(SkippedFile {
                    path: path.clone(),
                    reason,
                });
            }
            Err(other) => return Err(other),
        }
    }
    report.loaded = items.len();
    let names = expected.iter().map(|s| s.to_string()).collect();
    Ok((Dataset::new(names, items)?, report))
}

/// Number of training items for a class of `n` items.
pub fn train_count(n: usize, train_fraction: f64) -> usize {
    // The small bias keeps products like 0.7 * 10 from landing just under
    // an integer.
    ((train_fraction * n as f64) + 1e-9).floor() as usize
}

/// Tags each item train or test, class by class, with a seeded shuffle.
pub fn stratified_split(dataset: Dataset, train_fraction: f64, seed: u64) -> Result<Dataset> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Contract(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    assign_partition(dataset, seed, 2, |n| train_count(n, train_fraction))
}

/// Like [`stratified_split`] but with exactly `train_per_class` training
/// items per class; every class needs at least one more item than that.
pub fn split_fixed(dataset: Dataset, train_per_class: usize, seed: u64) -> Result<Dataset> {
    assign_partition(dataset, seed, train_per_class + 1, |_| train_per_class)
}

fn assign_partition(
    dataset: Dataset,
    seed: u64,
    min_items: usize,
    train_size: impl Fn(usize) -> usize,
) -> Result<Dataset> {
    let counts = dataset.class_counts();
    if let Some((class, &n)) = counts
        .iter()
        .enumerate()
        .find(|(_, &n)| n < min_items.max(2))
    {
        return Err(Error::Split(format!(
            "class {:?} has {n} item(s); at least {} are needed",
            dataset.class_names[class],
            min_items.max(2)
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tags = vec![Partition::Test; dataset.items.len()];
    for class in 0..counts.len() {
        let mut members: Vec<usize> = (0..dataset.items.len())
            .filter(|&i| dataset.items[i].label == class)
            .collect();
        members.shuffle(&mut rng);
        for &i in &members[..train_size(members.len())] {
            tags[i] = Partition::Train;
        }
    }
    Ok(Dataset {
        partition: Some(tags),
        ..dataset
    })
}
