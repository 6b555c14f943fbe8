//! Dataset discovery, evaluation-split repartitioning, class balancing and
//! normalization statistics.
//!
//! Expected layout: `<root>/{train,val,test}/{NORMAL,PNEUMONIA}/*.{jpeg,jpg,png}`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{decode_gray_levels, GrayImage};
use crate::seed::Rng;

const IMAGE_EXTENSIONS: [&str; 3] = ["jpeg", "jpg", "png"];

/// Class label; the numeric value is the model's output index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Norm = 0,
    Pneumonia = 1,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Norm, Label::Pneumonia];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        match i {
            0 => Some(Label::Norm),
            1 => Some(Label::Pneumonia),
            _ => None,
        }
    }

    /// Class directory name in the on-disk layout.
    pub fn dir_name(self) -> &'static str {
        match self {
            Label::Norm => "NORMAL",
            Label::Pneumonia => "PNEUMONIA",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Norm => "norm",
            Label::Pneumonia => "pneumonia",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Parse(format!("unknown split {other:?}"))),
        }
    }
}

/// One image on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub path: PathBuf,
    pub label: Label,
    /// Split the record is assigned to.
    pub split: Split,
    /// Split directory the file was found in.
    pub origin: Split,
}

/// Ordered records of one split with per-label counts.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetIndex {
    records: Vec<ImageRecord>,
    counts: [usize; 2],
}

impl DatasetIndex {
    /// Fails on duplicate paths.
    pub fn new(records: Vec<ImageRecord>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        let mut counts = [0usize; 2];
        for r in &records {
            if !seen.insert(r.path.as_path()) {
                return Err(Error::Validation(format!(
                    "duplicate path {} in index",
                    r.path.display()
                )));
            }
            counts[r.label.index()] += 1;
        }
        Ok(Self { records, counts })
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<ImageRecord> {
        self.records
    }

    pub fn counts(&self) -> [usize; 2] {
        self.counts
    }

    pub fn count(&self, label: Label) -> usize {
        self.counts[label.index()]
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn sorted_by_path(&self) -> Vec<ImageRecord> {
        let mut records = self.records.clone();
        records.sort_by(|a, b| a.path.cmp(&b.path));
        records
    }
}

/// Result of walking a dataset root.
#[derive(Debug, Clone)]
pub struct ScanReport {
    pub splits: BTreeMap<Split, DatasetIndex>,
    /// Files that carried an image extension but failed to decode.
    pub warnings: Vec<String>,
}

impl ScanReport {
    pub fn split(&self, split: Split) -> &DatasetIndex {
        &self.splits[&split]
    }
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Walk `root` and index every decodable image per split.
pub fn scan_dataset(root: &Path) -> Result<ScanReport> {
    let mut splits = BTreeMap::new();
    let mut warnings = Vec::new();
    for split in Split::ALL {
        let split_dir = root.join(split.dir_name());
        if !split_dir.is_dir() {
            return Err(Error::Config(format!(
                "missing split directory {}",
                split_dir.display()
            )));
        }
        let mut candidates = Vec::new();
        for label in Label::ALL {
            let class_dir = split_dir.join(label.dir_name());
            if !class_dir.is_dir() {
                return Err(Error::Config(format!(
                    "missing class directory {}",
                    class_dir.display()
                )));
            }
            let entries = fs::read_dir(&class_dir).map_err(|e| Error::io(&class_dir, e))?;
            let mut files = Vec::new();
            for entry in entries {
                let entry = entry.map_err(|e| Error::io(&class_dir, e))?;
                let path = entry.path();
                if path.is_file() && has_image_extension(&path) {
                    files.push(path);
                }
            }
            files.sort();
            candidates.extend(files.into_iter().map(|p| (p, label)));
        }

        let checked: Vec<_> = candidates
            .into_par_iter()
            .map(|(path, label)| {
                let ok = image::ImageReader::open(&path)
                    .ok()
                    .and_then(|r| r.with_guessed_format().ok())
                    .map(|r| r.decode().map(|_| ()).map_err(|e| e.to_string()))
                    .unwrap_or_else(|| Err("unreadable".to_string()));
                (path, label, ok)
            })
            .collect();

        let mut records = Vec::with_capacity(checked.len());
        for (path, label, ok) in checked {
            match ok {
                Ok(()) => records.push(ImageRecord {
                    path,
                    label,
                    split,
                    origin: split,
                }),
                Err(reason) => {
                    let msg = format!("skipping undecodable {}: {reason}", path.display());
                    log::warn!("{msg}");
                    warnings.push(msg);
                }
            }
        }
        splits.insert(split, DatasetIndex::new(records)?);
    }
    Ok(ScanReport { splits, warnings })
}

/// Pool the original test and validation splits and divide them into two
/// halves of equal size, stratified by label so both halves keep the pooled
/// class proportions. Returns `(val, test)`.
///
/// An odd pooled size gives the extra record to validation.
pub fn repartition_eval(
    test_index: &DatasetIndex,
    val_index: &DatasetIndex,
    seed: u64,
) -> Result<(DatasetIndex, DatasetIndex)> {
    if test_index.is_empty() || val_index.is_empty() {
        return Err(Error::Validation(
            "repartition needs non-empty test and validation indexes".into(),
        ));
    }
    let mut pooled = test_index.sorted_by_path();
    pooled.extend(val_index.sorted_by_path());
    pooled.sort_by(|a, b| a.path.cmp(&b.path));
    let total = pooled.len();
    if total % 2 == 1 {
        log::warn!("pooled evaluation set has odd size {total}; validation receives the extra record");
    }
    let val_target = total.div_ceil(2);

    let mut rng = Rng::seed_from_u64(seed);
    let mut by_label: [Vec<ImageRecord>; 2] = [Vec::new(), Vec::new()];
    for r in pooled {
        by_label[r.label.index()].push(r);
    }
    let mut val = Vec::with_capacity(val_target);
    let mut test = Vec::with_capacity(total - val_target);
    let mut leftovers = Vec::new();
    for mut class in by_label {
        class.shuffle(&mut rng);
        let half = class.len() / 2;
        if class.len() % 2 == 1 {
            leftovers.push(class.pop().expect("odd class is non-empty"));
        }
        let second = class.split_off(half);
        val.extend(class);
        test.extend(second);
    }
    for r in leftovers {
        if val.len() < val_target {
            val.push(r);
        } else {
            test.push(r);
        }
    }

    let finish = |mut records: Vec<ImageRecord>, split: Split| {
        for r in &mut records {
            r.split = split;
        }
        records.sort_by(|a, b| a.path.cmp(&b.path));
        DatasetIndex::new(records)
    };
    Ok((finish(val, Split::Val)?, finish(test, Split::Test)?))
}

/// Randomly discard majority-class records until both classes have the
/// minority count. Survivors keep their input order.
pub fn rebalance_downsample(index: &DatasetIndex, seed: u64) -> Result<DatasetIndex> {
    for label in Label::ALL {
        if index.count(label) == 0 {
            return Err(Error::EmptyClass(label.name()));
        }
    }
    let target = index.counts.iter().copied().min().unwrap_or(0);
    let mut rng = Rng::seed_from_u64(seed);
    let mut keep: BTreeSet<&Path> = BTreeSet::new();
    for label in Label::ALL {
        let mut members: Vec<&ImageRecord> = index.records.iter().filter(|r| r.label == label).collect();
        if members.len() == target {
            keep.extend(members.iter().map(|r| r.path.as_path()));
            continue;
        }
        members.sort_by(|a, b| a.path.cmp(&b.path));
        for i in index::sample(&mut rng, members.len(), target) {
            keep.insert(members[i].path.as_path());
        }
    }
    let records = index
        .records
        .iter()
        .filter(|r| keep.contains(r.path.as_path()))
        .cloned()
        .collect();
    DatasetIndex::new(records)
}

/// Training-set intensity statistics on the `[0, 1]` scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl NormStats {
    /// Two-pass population statistics over every pixel of in-memory images.
    pub fn from_images(images: &[GrayImage]) -> Result<NormStats> {
        let n: usize = images.iter().map(|i| i.pixels().len()).sum();
        if n == 0 {
            return Err(Error::Validation("no pixels to compute statistics over".into()));
        }
        let sum: f64 = images.iter().flat_map(|i| i.pixels()).map(|&v| f64::from(v)).sum();
        let mean = sum / n as f64;
        let ss: f64 = images
            .iter()
            .flat_map(|i| i.pixels())
            .map(|&v| (f64::from(v) - mean).powi(2))
            .sum();
        Ok(NormStats {
            mean,
            std: (ss / n as f64).sqrt(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<NormStats> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }
}

/// Exact integer moments of grayscale levels (each level counts thirds of
/// an 8-bit step), so accumulation is associative and order-independent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct LevelMoments {
    count: u64,
    sum: u64,
    sum_sq: u128,
}

impl LevelMoments {
    fn of(levels: &[u16]) -> Self {
        let mut m = LevelMoments::default();
        for &v in levels {
            m.count += 1;
            m.sum += u64::from(v);
            m.sum_sq += u128::from(v) * u128::from(v);
        }
        m
    }

    fn merge(self, other: Self) -> Self {
        LevelMoments {
            count: self.count + other.count,
            sum: self.sum + other.sum,
            sum_sq: self.sum_sq + other.sum_sq,
        }
    }
}

/// Mean and population standard deviation of grayscale intensity over all
/// pixels of all images in the index.
pub fn compute_norm_stats(index: &DatasetIndex) -> Result<NormStats> {
    if index.is_empty() {
        return Err(Error::Validation("cannot compute statistics of an empty index".into()));
    }
    let moments = index
        .records
        .par_iter()
        .map(|r| decode_gray_levels(&r.path).map(|levels| LevelMoments::of(&levels)))
        .try_reduce(LevelMoments::default, |a, b| Ok(a.merge(b)))?;
    if moments.count == 0 {
        return Err(Error::Validation("images contain no pixels".into()));
    }
    const SCALE: f64 = 765.0;
    let n = u128::from(moments.count);
    let s = u128::from(moments.sum);
    let mean = moments.sum as f64 / (moments.count as f64 * SCALE);
    let var_num = n * moments.sum_sq - s * s;
    let var = var_num as f64 / ((moments.count as f64).powi(2) * SCALE * SCALE);
    Ok(NormStats { mean, std: var.sqrt() })
}

/// The three prepared splits persisted between pipeline stages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub train: DatasetIndex,
    pub val: DatasetIndex,
    pub test: DatasetIndex,
}

#[derive(Serialize, Deserialize)]
struct ManifestRow {
    path: String,
    label: Label,
    split: Split,
    provenance: Split,
}

impl Manifest {
    pub fn split(&self, split: Split) -> &DatasetIndex {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Tab-separated, one record per line, with a header row.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        {
            let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(&mut buf);
            for split in Split::ALL {
                for r in self.split(split).records() {
                    let p = r
                        .path
                        .to_str()
                        .ok_or_else(|| Error::Validation(format!("non UTF-8 path {}", r.path.display())))?;
                    w.serialize(ManifestRow {
                        path: p.to_string(),
                        label: r.label,
                        split: r.split,
                        provenance: r.origin,
                    })?;
                }
            }
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Manifest> {
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(b'\t')
            .from_path(path)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let mut parts: BTreeMap<Split, Vec<ImageRecord>> = BTreeMap::new();
        for row in reader.deserialize() {
            let row: ManifestRow = row?;
            parts.entry(row.split).or_default().push(ImageRecord {
                path: PathBuf::from(row.path),
                label: row.label,
                split: row.split,
                origin: row.provenance,
            });
        }
        let mut take = |s: Split| DatasetIndex::new(parts.remove(&s).unwrap_or_default());
        Ok(Manifest {
            train: take(Split::Train)?,
            val: take(Split::Val)?,
            test: take(Split::Test)?,
        })
    }
}
