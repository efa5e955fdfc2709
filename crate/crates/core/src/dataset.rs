//! Class taxonomy, image manifests and stratified cross-validation splits.
//!
//! A [`DatasetManifest`] is the record of every image the pipeline touches.
//! Each record carries its provenance (real, augmented, generated) and, for
//! synthetic images, the id of the image it was derived from. Fold
//! construction uses that lineage so synthetic images never train a fold
//! whose test partition holds their ancestor.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::error::{Error, Result};
use crate::util;

pub const MANIFEST_SCHEMA_VERSION: &str = "1.0";

/// File extensions accepted at ingestion (compared case-insensitively).
pub const IMAGE_EXTENSIONS: [&str; 6] = ["png", "jpeg", "jpg", "bmp", "tiff", "tif"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassLabel {
    #[serde(rename = "NORMAL")]
    Normal,
    #[serde(rename = "CNV")]
    Cnv,
    #[serde(rename = "DME")]
    Dme,
    #[serde(rename = "DRUSEN")]
    Drusen,
    #[serde(rename = "CSC")]
    Csc,
    #[serde(rename = "MH")]
    Mh,
    #[serde(rename = "MacTel")]
    MacTel,
    #[serde(rename = "RP")]
    Rp,
    #[serde(rename = "Stargardt")]
    Stargardt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Major,
    Rare,
}

pub const NUM_CLASSES: usize = 9;

impl ClassLabel {
    pub const ALL: [ClassLabel; NUM_CLASSES] = [
        ClassLabel::Normal,
        ClassLabel::Cnv,
        ClassLabel::Dme,
        ClassLabel::Drusen,
        ClassLabel::Csc,
        ClassLabel::Mh,
        ClassLabel::MacTel,
        ClassLabel::Rp,
        ClassLabel::Stargardt,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<ClassLabel> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Normal => "NORMAL",
            ClassLabel::Cnv => "CNV",
            ClassLabel::Dme => "DME",
            ClassLabel::Drusen => "DRUSEN",
            ClassLabel::Csc => "CSC",
            ClassLabel::Mh => "MH",
            ClassLabel::MacTel => "MacTel",
            ClassLabel::Rp => "RP",
            ClassLabel::Stargardt => "Stargardt",
        }
    }

    pub fn tier(self) -> Tier {
        match self {
            ClassLabel::Normal | ClassLabel::Cnv | ClassLabel::Dme | ClassLabel::Drusen => {
                Tier::Major
            }
            _ => Tier::Rare,
        }
    }

    pub fn is_rare(self) -> bool {
        self.tier() == Tier::Rare
    }

    pub fn rare() -> impl Iterator<Item = ClassLabel> {
        Self::ALL.into_iter().filter(|c| c.is_rare())
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ClassLabel::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownClass(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Augmented,
    Generated,
}

impl Provenance {
    pub fn is_synthetic(self) -> bool {
        self != Provenance::Real
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub path: PathBuf,
    pub label: ClassLabel,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ImageRecord {
    pub fn real(id: impl Into<String>, path: impl Into<PathBuf>, label: ClassLabel) -> Self {
        ImageRecord {
            id: id.into(),
            path: path.into(),
            label,
            provenance: Provenance::Real,
            source_id: None,
            seed: None,
        }
    }

    fn check(&self) -> Result<()> {
        match (self.provenance, &self.source_id) {
            (Provenance::Real, Some(_)) => Err(Error::InvalidManifest(format!(
                "real record `{}` must not carry a source_id",
                self.id
            ))),
            (Provenance::Augmented | Provenance::Generated, None) => {
                Err(Error::InvalidManifest(format!(
                    "synthetic record `{}` is missing its source_id",
                    self.id
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Immutable, validated collection of image records.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DatasetManifest {
    schema_version: String,
    global_seed: u64,
    created_at: String,
    notes: String,
    class_counts: BTreeMap<ClassLabel, usize>,
    records: Vec<ImageRecord>,
}

#[derive(Deserialize)]
struct RawManifest {
    schema_version: String,
    global_seed: u64,
    created_at: String,
    #[serde(default)]
    notes: String,
    class_counts: BTreeMap<ClassLabel, usize>,
    records: Vec<ImageRecord>,
}

fn count_classes(records: &[ImageRecord]) -> BTreeMap<ClassLabel, usize> {
    let mut counts = BTreeMap::new();
    for r in records {
        *counts.entry(r.label).or_insert(0) += 1;
    }
    counts
}

impl DatasetManifest {
    pub fn new(records: Vec<ImageRecord>, global_seed: u64, notes: impl Into<String>) -> Result<Self> {
        Self::with_timestamp(records, global_seed, notes, chrono::Utc::now().to_rfc3339())
    }

    pub fn with_timestamp(
        records: Vec<ImageRecord>,
        global_seed: u64,
        notes: impl Into<String>,
        created_at: String,
    ) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for r in &records {
            r.check()?;
            if !seen.insert(r.id.as_str()) {
                return Err(Error::InvalidManifest(format!("duplicate record id `{}`", r.id)));
            }
        }
        Ok(DatasetManifest {
            schema_version: MANIFEST_SCHEMA_VERSION.to_string(),
            global_seed,
            created_at,
            notes: notes.into(),
            class_counts: count_classes(&records),
            records,
        })
    }

    pub fn empty(global_seed: u64) -> Self {
        Self::new(Vec::new(), global_seed, "").expect("empty manifest is valid")
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<ImageRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn global_seed(&self) -> u64 {
        self.global_seed
    }

    pub fn created_at(&self) -> &str {
        &self.created_at
    }

    pub fn notes(&self) -> &str {
        &self.notes
    }

    pub fn schema_version(&self) -> &str {
        &self.schema_version
    }

    pub fn counts(&self) -> &BTreeMap<ClassLabel, usize> {
        &self.class_counts
    }

    pub fn count(&self, label: ClassLabel) -> usize {
        self.class_counts.get(&label).copied().unwrap_or(0)
    }

    /// Number of records per (class, provenance).
    pub fn provenance_histogram(&self) -> BTreeMap<ClassLabel, BTreeMap<String, usize>> {
        let mut hist: BTreeMap<ClassLabel, BTreeMap<String, usize>> = BTreeMap::new();
        for r in &self.records {
            let key = serde_json::to_value(r.provenance)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default();
            *hist.entry(r.label).or_default().entry(key).or_insert(0) += 1;
        }
        hist
    }

    pub fn of_class(&self, label: ClassLabel) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.label == label)
    }

    pub fn get(&self, id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Subset of records satisfying a predicate, keeping order.
    pub fn filter(&self, notes: &str, pred: impl Fn(&ImageRecord) -> bool) -> DatasetManifest {
        let records = self.records.iter().filter(|r| pred(r)).cloned().collect();
        DatasetManifest::new(records, self.global_seed, notes).expect("subset of a valid manifest is valid")
    }

    /// Content equality ignoring the creation timestamp.
    pub fn same_content(&self, other: &DatasetManifest) -> bool {
        self.global_seed == other.global_seed
            && self.notes == other.notes
            && self.records == other.records
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value
            .get("schema_version")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::InvalidManifest("missing schema_version".into()))?;
        if found != MANIFEST_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: found.to_string(),
                expected: MANIFEST_SCHEMA_VERSION.to_string(),
            });
        }
        let raw: RawManifest = serde_json::from_value(value)?;
        let m = DatasetManifest::with_timestamp(raw.records, raw.global_seed, raw.notes, raw.created_at)?;
        debug_assert_eq!(m.schema_version, raw.schema_version);
        if m.class_counts != raw.class_counts {
            return Err(Error::InvalidManifest(
                "cached class_counts do not match the records".into(),
            ));
        }
        Ok(m)
    }
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    util::write_string(path, &manifest.to_json()?)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    DatasetManifest::from_json(&util::read_string(path)?)
        .map_err(|e| e.context(format!("reading manifest {}", path.display())))
}

/// Directory-name to class mapping used by [`scan_directory`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMapping {
    pub dirs: BTreeMap<String, ClassLabel>,
    #[serde(default)]
    pub ignore: BTreeSet<String>,
}

impl ClassMapping {
    /// Maps each class's canonical name, plus its upper- and lower-case forms.
    pub fn canonical() -> Self {
        let mut dirs = BTreeMap::new();
        for c in ClassLabel::ALL {
            dirs.insert(c.name().to_string(), c);
            dirs.insert(c.name().to_uppercase(), c);
            dirs.insert(c.name().to_lowercase(), c);
        }
        ClassMapping {
            dirs,
            ignore: BTreeSet::new(),
        }
    }

    pub fn ignoring(mut self, dir: impl Into<String>) -> Self {
        self.ignore.insert(dir.into());
        self
    }
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.iter().any(|x| x.eq_ignore_ascii_case(e)))
        .unwrap_or(false)
}

fn check_decodable(path: &Path) -> std::result::Result<(), String> {
    let img = image::ImageReader::open(path)
        .and_then(|r| r.with_guessed_format())
        .map_err(|e| e.to_string())?
        .decode()
        .map_err(|e| e.to_string())?;
    use image::ColorType::*;
    match img.color() {
        L8 | La8 | Rgb8 | Rgba8 => Ok(()),
        other => Err(format!("unsupported pixel format {other:?}")),
    }
}

/// Ingest a directory-per-class tree into a manifest of real records.
pub fn scan_directory(root: &Path, mapping: &ClassMapping) -> Result<DatasetManifest> {
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut class_dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        if mapping.ignore.contains(&name) {
            continue;
        }
        let label = *mapping
            .dirs
            .get(&name)
            .ok_or_else(|| Error::UnmappedDirectory(name.clone()))?;
        class_dirs.push((path, label));
    }

    let mut candidates = Vec::new();
    for (dir, label) in class_dirs {
        for entry in WalkDir::new(&dir).sort_by_file_name() {
            let entry = entry.map_err(|e| Error::io(&dir, e.into()))?;
            if entry.file_type().is_file() && has_image_extension(entry.path()) {
                candidates.push((entry.into_path(), label));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.cmp(&b.0));

    let mut records = Vec::with_capacity(candidates.len());
    let mut excluded = Vec::new();
    for (path, label) in candidates {
        match check_decodable(&path) {
            Ok(()) => {
                let rel = path.strip_prefix(root).unwrap_or(&path);
                let id = rel
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy())
                    .collect::<Vec<_>>()
                    .join("/");
                records.push(ImageRecord::real(id, path, label));
            }
            Err(reason) => {
                log::warn!("excluding undecodable image {}: {reason}", path.display());
                excluded.push(path.display().to_string());
            }
        }
    }
    let notes = if excluded.is_empty() {
        format!("scanned {}", root.display())
    } else {
        format!(
            "scanned {}; excluded {} undecodable file(s): {}",
            root.display(),
            excluded.len(),
            excluded.join(", ")
        )
    };
    DatasetManifest::new(records, 0, notes)
}

/// Uniform sample of `n` records of one class, without replacement.
pub fn sample_class(
    manifest: &DatasetManifest,
    label: ClassLabel,
    n: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    let pool: Vec<&ImageRecord> = manifest.of_class(label).collect();
    if n > pool.len() {
        return Err(Error::Shortfall {
            label: label.to_string(),
            requested: n,
            available: pool.len(),
        });
    }
    let mut rng = util::rng(seed);
    let mut picked = rand::seq::index::sample(&mut rng, pool.len(), n).into_vec();
    picked.sort_unstable();
    let records = picked.into_iter().map(|i| pool[i].clone()).collect();
    DatasetManifest::new(records, seed, format!("sampled {n} {label} record(s) with seed {seed}"))
}

/// Assignment of every record to a fold, with lineage-aware partitions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub k: usize,
    pub assignments: BTreeMap<String, usize>,
    pub stratified: bool,
}

/// Real ancestors of a record, following `source_id` links through the manifest.
fn ancestors<'a>(index: &HashMap<&'a str, &'a ImageRecord>, record: &'a ImageRecord) -> Vec<&'a str> {
    let mut out = Vec::new();
    let mut cur = record.source_id.as_deref();
    while let Some(id) = cur {
        if out.contains(&id) {
            break;
        }
        out.push(id);
        cur = index.get(id).and_then(|r| r.source_id.as_deref());
    }
    out
}

impl SplitPlan {
    /// Real records whose assignment is `fold`.
    pub fn test_records<'a>(&self, manifest: &'a DatasetManifest, fold: usize) -> Vec<&'a ImageRecord> {
        manifest
            .records()
            .iter()
            .filter(|r| r.provenance == Provenance::Real && self.assignments.get(&r.id) == Some(&fold))
            .collect()
    }

    /// Training records for `fold`: real records of other folds, plus synthetic
    /// records none of whose ancestors sit in this fold's test partition.
    pub fn train_records<'a>(&self, manifest: &'a DatasetManifest, fold: usize) -> Vec<&'a ImageRecord> {
        let index: HashMap<&str, &ImageRecord> =
            manifest.records().iter().map(|r| (r.id.as_str(), r)).collect();
        let test: BTreeSet<&str> = self
            .test_records(manifest, fold)
            .into_iter()
            .map(|r| r.id.as_str())
            .collect();
        manifest
            .records()
            .iter()
            .filter(|r| match r.provenance {
                Provenance::Real => self.assignments.get(&r.id) != Some(&fold),
                _ => ancestors(&index, r).iter().all(|a| !test.contains(a)),
            })
            .collect()
    }

    pub fn fold_manifests(&self, manifest: &DatasetManifest, fold: usize) -> (DatasetManifest, DatasetManifest) {
        let train: Vec<ImageRecord> = self.train_records(manifest, fold).into_iter().cloned().collect();
        let test: Vec<ImageRecord> = self.test_records(manifest, fold).into_iter().cloned().collect();
        let seed = manifest.global_seed();
        (
            DatasetManifest::new(train, seed, format!("fold {fold} train")).expect("subset is valid"),
            DatasetManifest::new(test, seed, format!("fold {fold} test")).expect("subset is valid"),
        )
    }
}

/// Stratified k-fold assignment of real records; synthetic records follow
/// their real ancestor's fold.
pub fn make_folds(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<SplitPlan> {
    if k < 2 {
        return Err(Error::Precondition(format!(
            "k-fold split needs k >= 2 (got {k}); no train/test separation otherwise"
        )));
    }
    let mut by_class: BTreeMap<ClassLabel, Vec<&ImageRecord>> = BTreeMap::new();
    for r in manifest.records().iter().filter(|r| r.provenance == Provenance::Real) {
        by_class.entry(r.label).or_default().push(r);
    }
    for label in manifest.counts().keys() {
        let n = by_class.get(label).map_or(0, Vec::len);
        if n < k {
            return Err(Error::Precondition(format!(
                "class {label} has {n} real record(s), fewer than k = {k}"
            )));
        }
    }

    let mut assignments = BTreeMap::new();
    let mut offset = 0usize;
    for (label, mut recs) in by_class {
        let mut rng = util::rng(util::derive_seed(seed, label.name()));
        recs.shuffle(&mut rng);
        for (i, r) in recs.iter().enumerate() {
            assignments.insert(r.id.clone(), (offset + i) % k);
        }
        offset = (offset + recs.len()) % k;
    }

    let index: HashMap<&str, &ImageRecord> =
        manifest.records().iter().map(|r| (r.id.as_str(), r)).collect();
    let mut orphan = 0usize;
    for r in manifest.records().iter().filter(|r| r.provenance.is_synthetic()) {
        let fold = ancestors(&index, r)
            .iter()
            .rev()
            .find_map(|a| assignments.get(*a).copied());
        let fold = fold.unwrap_or_else(|| {
            orphan += 1;
            (orphan - 1) % k
        });
        assignments.insert(r.id.clone(), fold);
    }

    Ok(SplitPlan {
        k,
        assignments,
        stratified: true,
    })
}
