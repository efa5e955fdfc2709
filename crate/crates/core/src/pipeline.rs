//! Declarative experiment runs: ingest → augment → gan-train → gan-generate →
//! balance → crossval (+ baseline) → evaluate → train → embed → report, with
//! per-stage seeds, content-hash caching, and a run record.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::augment::{self, AugmentationSpec};
use crate::balance::{self, BalancePlan, BalanceStrategy, ManifestEngine};
use crate::classifier::{self, BackboneConfig, FoldResult, TrainConfig};
use crate::dataset::{self, sample_class, ClassLabel, ClassMapping, DatasetManifest};
use crate::embed::{self, TsneConfig};
use crate::error::{Error, Result};
use crate::metrics::{self, RenderedTables};
use crate::ugatit::{self, TranslationCheckpoint, TranslationConfig};
use crate::util;

pub const EXPERIMENT_SCHEMA_VERSION: &str = "1.0";
pub const DATA_ROOT_ENV: &str = "OCTFEW_DATA_ROOT";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const STAGES: [&str; 11] = [
    "ingest",
    "augment",
    "gan-train",
    "gan-generate",
    "balance",
    "crossval",
    "baseline",
    "evaluate",
    "train",
    "embed",
    "report",
];

/// A builtin strategy name or a full strategy object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StrategyChoice {
    Builtin(String),
    Custom(BalanceStrategy),
}

impl StrategyChoice {
    pub fn resolve(&self, seed: u64) -> Result<BalanceStrategy> {
        match self {
            StrategyChoice::Builtin(name) => balance::builtin_strategy(name, seed),
            StrategyChoice::Custom(s) => Ok(BalanceStrategy { seed, ..s.clone() }),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            StrategyChoice::Builtin(n) => n,
            StrategyChoice::Custom(s) => &s.name,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    /// Subdirectories of the data root to skip.
    pub ignore: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanStageConfig {
    /// Train translation models for classes without a supplied checkpoint.
    pub train: bool,
    pub translation: TranslationConfig,
    /// NORMAL images sampled as domain A (capped at what is available).
    pub domain_a_size: usize,
    /// Rare images are augmented up to this many for domain B.
    pub domain_b_size: usize,
    /// Pre-trained checkpoint directories per class.
    pub checkpoints: BTreeMap<ClassLabel, PathBuf>,
}

impl Default for GanStageConfig {
    fn default() -> Self {
        GanStageConfig {
            train: true,
            translation: TranslationConfig::default(),
            domain_a_size: 2000,
            domain_b_size: 2000,
            checkpoints: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierStageConfig {
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub k: usize,
}

impl Default for ClassifierStageConfig {
    fn default() -> Self {
        ClassifierStageConfig {
            backbone: BackboneConfig::default(),
            train: TrainConfig::default(),
            k: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedStageConfig {
    pub enabled: bool,
    pub tsne: TsneConfig,
    /// Real records embedded, subsampled deterministically above this count.
    pub max_points: usize,
}

impl Default for EmbedStageConfig {
    fn default() -> Self {
        EmbedStageConfig {
            enabled: false,
            tsne: TsneConfig::default(),
            max_points: 1500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: String,
    #[serde(default)]
    pub name: String,
    pub data_root: PathBuf,
    pub output_root: PathBuf,
    pub global_seed: u64,
    pub strategy: StrategyChoice,
    #[serde(default)]
    pub ingest: IngestConfig,
    #[serde(default)]
    pub gan: GanStageConfig,
    #[serde(default)]
    pub classifier: ClassifierStageConfig,
    /// Also cross-validate on the real images alone (the Imb + NoAug row).
    #[serde(default = "yes")]
    pub baseline: bool,
    #[serde(default)]
    pub embed: EmbedStageConfig,
}

fn yes() -> bool {
    true
}

/// One validation problem, located by config field.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigIssue {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

pub fn stage_seed(global_seed: u64, stage: &str) -> u64 {
    util::derive_seed(global_seed, stage)
}

impl ExperimentConfig {
    /// Desk-scale defaults: toy backbone, light GAN preset, 500 images per class.
    pub fn desk(data_root: impl Into<PathBuf>, output_root: impl Into<PathBuf>, global_seed: u64) -> Self {
        let strategy = balance::scaled_strategy("bal_500", 500, 200, 0).expect("valid scaled strategy");
        ExperimentConfig {
            schema_version: EXPERIMENT_SCHEMA_VERSION.into(),
            name: "desk".into(),
            data_root: data_root.into(),
            output_root: output_root.into(),
            global_seed,
            strategy: StrategyChoice::Custom(strategy),
            ingest: IngestConfig::default(),
            gan: GanStageConfig {
                translation: TranslationConfig {
                    iterations: 100,
                    ..TranslationConfig::light(32)
                },
                domain_a_size: 200,
                domain_b_size: 200,
                ..GanStageConfig::default()
            },
            classifier: ClassifierStageConfig {
                backbone: BackboneConfig::toy(),
                train: TrainConfig {
                    epochs: 8,
                    batch_size: 32,
                    learning_rate: 3e-3,
                    ..TrainConfig::default()
                },
                k: 5,
            },
            baseline: true,
            embed: EmbedStageConfig::default(),
        }
    }

    /// Read a config; relative paths are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = util::read_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let found = value
            .get("schema_version")
            .and_then(|v| v.as_str())
            .unwrap_or("<missing>")
            .to_string();
        if found != EXPERIMENT_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found,
                expected: EXPERIMENT_SCHEMA_VERSION.into(),
            });
        }
        let mut cfg: ExperimentConfig = serde_json::from_value(value)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.data_root);
        resolve(&mut cfg.output_root);
        for p in cfg.gan.checkpoints.values_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.classifier.backbone.pretrained_weights.as_mut() {
            resolve(p);
        }
        Ok(cfg)
    }

    /// Apply the data-root environment override.
    pub fn with_env_overrides(mut self) -> Self {
        if let Ok(root) = std::env::var(DATA_ROOT_ENV) {
            if !root.is_empty() {
                self.data_root = PathBuf::from(root);
            }
        }
        self
    }

    pub fn strategy(&self) -> Result<BalanceStrategy> {
        self.strategy.resolve(stage_seed(self.global_seed, "balance"))
    }

    /// Classes the strategy generates images for, with counts.
    pub fn generated_classes(&self) -> Result<BTreeMap<ClassLabel, usize>> {
        Ok(self
            .strategy()?
            .composition_rules
            .iter()
            .filter(|(_, r)| r.generated > 0)
            .map(|(l, r)| (*l, r.generated))
            .collect())
    }

    /// Classes needing a translation model trained in this run.
    pub fn classes_to_train(&self) -> Result<Vec<ClassLabel>> {
        if !self.gan.train {
            return Ok(Vec::new());
        }
        Ok(self
            .generated_classes()?
            .into_keys()
            .filter(|l| !self.gan.checkpoints.contains_key(l))
            .collect())
    }

    /// Every problem found, not just the first.
    pub fn validate(&self) -> std::result::Result<(), Vec<ConfigIssue>> {
        let mut issues = Vec::new();
        let mut issue = |field: &str, message: String| {
            issues.push(ConfigIssue {
                field: field.to_string(),
                message,
            })
        };
        if self.schema_version != EXPERIMENT_SCHEMA_VERSION {
            issue(
                "schema_version",
                format!("found {}, expected {EXPERIMENT_SCHEMA_VERSION}", self.schema_version),
            );
        }
        if !self.data_root.is_dir() {
            issue(
                "data_root",
                format!("{} is not a directory (override with {DATA_ROOT_ENV})", self.data_root.display()),
            );
        }
        if self.output_root.as_os_str().is_empty() {
            issue("output_root", "must not be empty".into());
        }
        match self.strategy() {
            Err(e) => issue("strategy", e.to_string()),
            Ok(s) => {
                if let Err(e) = s.validate() {
                    issue("strategy", e.to_string());
                }
                for (label, rule) in &s.composition_rules {
                    if rule.generated == 0 {
                        continue;
                    }
                    match self.gan.checkpoints.get(label) {
                        Some(p) if !p.join("header.json").is_file() => issue(
                            &format!("gan.checkpoints.{label}"),
                            format!("{} is not a translation checkpoint directory", p.display()),
                        ),
                        None if !self.gan.train => issue(
                            &format!("gan.checkpoints.{label}"),
                            format!(
                                "missing checkpoint for {label}: strategy `{}` generates {} {label} images and gan.train is false",
                                s.name, rule.generated
                            ),
                        ),
                        _ => {}
                    }
                }
            }
        }
        if let Err(e) = self.gan.translation.validate() {
            issue("gan.translation", e.to_string());
        }
        if self.gan.domain_a_size == 0 || self.gan.domain_b_size == 0 {
            issue("gan", "domain sizes must be >= 1".into());
        }
        if let Err(e) = self.classifier.backbone.validate() {
            issue("classifier.backbone", e.to_string());
        }
        if let Some(p) = &self.classifier.backbone.pretrained_weights {
            if !p.join("header.json").is_file() {
                issue(
                    "classifier.backbone.pretrained_weights",
                    format!("{} is not a tensor directory", p.display()),
                );
            }
        }
        if let Err(e) = self.classifier.train.validate() {
            issue("classifier.train", e.to_string());
        }
        if self.classifier.k < 2 {
            issue("classifier.k", format!("k = {} but at least 2 folds are needed", self.classifier.k));
        }
        if self.embed.enabled {
            let t = &self.embed.tsne;
            if !(t.perplexity > 0.0) || t.iterations == 0 {
                issue("embed.tsne", "perplexity must be positive and iterations >= 1".into());
            }
            if (self.embed.max_points as f64) < 3.0 * t.perplexity {
                issue(
                    "embed.max_points",
                    format!("{} points cannot support perplexity {}", self.embed.max_points, t.perplexity),
                );
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(issues)
        }
    }
}

// ---------------------------------------------------------------------------
// Run record

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Completed,
    Cached,
    /// Not required by this config or not selected.
    Skipped,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub seed: u64,
    pub cache_key: Option<String>,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub seconds: f64,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub tool_version: String,
    pub config: ExperimentConfig,
    pub started_at: String,
    pub stages: Vec<StageRecord>,
    pub partial: bool,
    pub error: Option<String>,
}

impl RunRecord {
    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }
}

/// SHA-256 of a file, or of the sorted (relative path, file hash) list of a directory.
pub fn hash_path(path: &Path) -> Result<String> {
    if path.is_file() {
        return util::sha256_file(path);
    }
    if !path.is_dir() {
        return Err(Error::Precondition(format!("{} does not exist", path.display())));
    }
    let mut entries = Vec::new();
    for e in WalkDir::new(path).sort_by_file_name() {
        let e = e.map_err(|e| Error::Precondition(format!("walking {}: {e}", path.display())))?;
        if e.file_type().is_file() {
            let rel = e.path().strip_prefix(path).unwrap_or(e.path());
            let rel = rel.to_string_lossy().replace('\\', "/");
            entries.push(format!("{rel}\t{}", util::sha256_file(e.path())?));
        }
    }
    Ok(util::sha256_hex(entries.join("\n").as_bytes()))
}

// ---------------------------------------------------------------------------
// Layout

/// Paths of every artifact under the output root.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Layout { root: root.to_path_buf() }
    }
    pub fn real(&self) -> PathBuf {
        self.root.join("manifests/real.json")
    }
    pub fn domain_a(&self) -> PathBuf {
        self.root.join("manifests/domain_a.json")
    }
    pub fn domain_b(&self, l: ClassLabel) -> PathBuf {
        self.root.join(format!("manifests/domain_b/{}.json", l.name()))
    }
    pub fn domain_b_images(&self) -> PathBuf {
        self.root.join("images/domain_b")
    }
    pub fn checkpoint(&self, l: ClassLabel) -> PathBuf {
        self.root.join(format!("checkpoints/{}", l.name()))
    }
    pub fn generated(&self, l: ClassLabel) -> PathBuf {
        self.root.join(format!("manifests/generated/{}.json", l.name()))
    }
    pub fn generated_images(&self, l: ClassLabel) -> PathBuf {
        self.root.join(format!("images/generated/{}", l.name()))
    }
    pub fn balanced(&self) -> PathBuf {
        self.root.join("manifests/balanced.json")
    }
    pub fn plan(&self) -> PathBuf {
        self.root.join("manifests/balance_plan.json")
    }
    pub fn balanced_images(&self) -> PathBuf {
        self.root.join("images/balanced")
    }
    pub fn crossval(&self, which: &str) -> PathBuf {
        self.root.join(format!("reports/{which}/crossval.json"))
    }
    pub fn tables(&self) -> PathBuf {
        self.root.join("tables")
    }
    pub fn model(&self) -> PathBuf {
        self.root.join("model")
    }
    pub fn embed(&self) -> PathBuf {
        self.root.join("embed")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.md")
    }
    pub fn record(&self) -> PathBuf {
        self.root.join("run_record.json")
    }
    fn cache(&self, stage: &str) -> PathBuf {
        self.root.join(format!("cache/{stage}.json"))
    }
}

/// Cross-validation output for one method row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossvalReport {
    pub method: String,
    pub folds: Vec<FoldResult>,
}

pub fn write_tables(dir: &Path, tables: &RenderedTables) -> Result<()> {
    util::write_string(&dir.join("metrics.txt"), &tables.metrics_text)?;
    util::write_string(&dir.join("metrics.csv"), &tables.metrics_csv)?;
    util::write_string(&dir.join("per_class.txt"), &tables.per_class_text)?;
    util::write_string(&dir.join("per_class.csv"), &tables.per_class_csv)
}

/// Add the real records of every class the manifest holds only synthetic
/// images of (the rare-class originals of a balanced set). Test partitions
/// are drawn from real records, so without them those classes are never tested.
pub fn with_real_ancestors(manifest: &DatasetManifest, real: &DatasetManifest) -> Result<DatasetManifest> {
    let present: BTreeSet<&str> = manifest.records().iter().map(|r| r.id.as_str()).collect();
    let wanted: BTreeSet<ClassLabel> = manifest
        .records()
        .iter()
        .filter(|r| r.provenance.is_synthetic())
        .map(|r| r.label)
        .filter(|l| !manifest.records().iter().any(|r| r.label == *l && r.provenance == dataset::Provenance::Real))
        .collect();
    let mut records = manifest.records().to_vec();
    records.extend(
        real.records()
            .iter()
            .filter(|r| wanted.contains(&r.label) && !present.contains(r.id.as_str()))
            .cloned(),
    );
    DatasetManifest::new(records, manifest.global_seed(), format!("{} + real originals", manifest.notes()))
}

/// Aggregate cross-validation reports into the metric and per-class tables.
pub fn evaluate_reports(reports: &[CrossvalReport]) -> Result<(Vec<(String, metrics::AggregateReport)>, RenderedTables)> {
    let mut aggregates = Vec::new();
    for r in reports {
        let folds: Vec<_> = r.folds.iter().map(|f| f.report.clone()).collect();
        let agg = metrics::aggregate_folds(&folds).map_err(|e| e.context(format!("method `{}`", r.method)))?;
        aggregates.push((r.method.clone(), agg));
    }
    let per_class: Vec<_> = aggregates
        .iter()
        .map(|(m, a)| (m.clone(), a.per_class_tpr.clone()))
        .collect();
    let tables = metrics::render_table(&aggregates, &per_class)?;
    Ok((aggregates, tables))
}

// ---------------------------------------------------------------------------
// Runner

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Restrict to these stages; `None` runs all that the config needs.
    pub stages: Option<BTreeSet<String>>,
    /// Ignore cached results.
    pub force: bool,
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    outputs: Vec<FileHash>,
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    opts: &'a RunOptions,
    layout: Layout,
    record: RunRecord,
}

type StageBody<'b> = Box<dyn FnOnce() -> Result<String> + 'b>;

impl<'a> Runner<'a> {
    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.layout.root)
            .map(|r| r.to_string_lossy().replace('\\', "/"))
            .unwrap_or_else(|_| p.display().to_string())
    }

    fn hashes(&self, paths: &[PathBuf]) -> Result<Vec<FileHash>> {
        paths
            .iter()
            .map(|p| {
                Ok(FileHash {
                    path: self.rel(p),
                    sha256: hash_path(p).map_err(|e| e.context(format!("hashing {}", p.display())))?,
                })
            })
            .collect()
    }

    fn skip(&mut self, name: &str, note: &str) {
        self.record.stages.push(StageRecord {
            name: name.into(),
            status: StageStatus::Skipped,
            seed: stage_seed(self.cfg.global_seed, name),
            cache_key: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seconds: 0.0,
            note: note.into(),
        });
    }

    fn selected(&self, name: &str) -> bool {
        self.opts.stages.as_ref().is_none_or(|s| s.contains(name))
    }

    fn stage(
        &mut self,
        name: &str,
        inputs: Vec<PathBuf>,
        config: serde_json::Value,
        outputs: Vec<PathBuf>,
        body: StageBody<'_>,
    ) -> Result<()> {
        let seed = stage_seed(self.cfg.global_seed, name);
        let start = Instant::now();
        for p in &inputs {
            if !p.exists() {
                return Err(Error::Precondition(format!(
                    "stage `{name}` needs {} (run the stage that produces it first)",
                    self.rel(p)
                )));
            }
        }
        let input_hashes = self.hashes(&inputs)?;
        let key = util::sha256_hex(
            serde_json::to_string(&serde_json::json!({
                "stage": name,
                "seed": seed,
                "config": config,
                "inputs": input_hashes,
                "tool_version": TOOL_VERSION,
            }))?
            .as_bytes(),
        );
        let cache_path = self.layout.cache(name);
        if !self.opts.force && cache_path.is_file() {
            if let Ok(entry) = util::read_json::<CacheEntry>(&cache_path) {
                if entry.key == key && outputs.iter().all(|p| p.exists()) && self.hashes(&outputs).ok() == Some(entry.outputs.clone()) {
                    log::info!("stage {name}: cached");
                    self.record.stages.push(StageRecord {
                        name: name.into(),
                        status: StageStatus::Cached,
                        seed,
                        cache_key: Some(key),
                        inputs: input_hashes,
                        outputs: entry.outputs,
                        seconds: start.elapsed().as_secs_f64(),
                        note: "inputs and config unchanged".into(),
                    });
                    return Ok(());
                }
            }
        }
        log::info!("stage {name}: running");
        match body() {
            Ok(note) => {
                let output_hashes = self.hashes(&outputs)?;
                util::write_json(
                    &cache_path,
                    &CacheEntry {
                        key: key.clone(),
                        outputs: output_hashes.clone(),
                    },
                )?;
                self.record.stages.push(StageRecord {
                    name: name.into(),
                    status: StageStatus::Completed,
                    seed,
                    cache_key: Some(key),
                    inputs: input_hashes,
                    outputs: output_hashes,
                    seconds: start.elapsed().as_secs_f64(),
                    note,
                });
                Ok(())
            }
            Err(e) => {
                self.record.stages.push(StageRecord {
                    name: name.into(),
                    status: StageStatus::Failed,
                    seed,
                    cache_key: Some(key),
                    inputs: input_hashes,
                    outputs: Vec::new(),
                    seconds: start.elapsed().as_secs_f64(),
                    note: e.to_string(),
                });
                Err(e)
            }
        }
    }
}

fn stage_config<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

/// Execute the configured stages in order and write `run_record.json`.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunRecord> {
    if let Err(issues) = cfg.validate() {
        let list: Vec<String> = issues.iter().map(|i| i.to_string()).collect();
        return Err(Error::Config(list.join("; ")));
    }
    if let Some(sel) = &opts.stages {
        if let Some(bad) = sel.iter().find(|s| !STAGES.contains(&s.as_str())) {
            return Err(Error::Config(format!(
                "unknown stage `{bad}` (stages: {})",
                STAGES.join(", ")
            )));
        }
    }
    util::ensure_dir(&cfg.output_root)?;
    let mut runner = Runner {
        cfg,
        opts,
        layout: Layout::new(&cfg.output_root),
        record: RunRecord {
            tool_version: TOOL_VERSION.into(),
            config: cfg.clone(),
            started_at: chrono::Utc::now().to_rfc3339(),
            stages: Vec::new(),
            partial: false,
            error: None,
        },
    };
    let result = run_stages(&mut runner);
    if let Err(e) = &result {
        runner.record.partial = true;
        runner.record.error = Some(e.to_string());
    }
    util::write_json(&runner.layout.record(), &runner.record)?;
    result.map(|_| runner.record)
}

fn run_stages(r: &mut Runner<'_>) -> Result<()> {
    let cfg = r.cfg;
    let layout = r.layout.clone();
    let strategy = cfg.strategy()?;
    let generated = cfg.generated_classes()?;
    let to_train = cfg.classes_to_train()?;
    let seed = |stage: &str| stage_seed(cfg.global_seed, stage);

    // ingest
    if r.selected("ingest") {
        let out = layout.real();
        let root = cfg.data_root.clone();
        let ignore = cfg.ingest.ignore.clone();
        r.stage(
            "ingest",
            vec![root.clone()],
            stage_config(&cfg.ingest),
            vec![out.clone()],
            Box::new(move || {
                let mut mapping = ClassMapping::canonical();
                for d in ignore {
                    mapping = mapping.ignoring(d);
                }
                let m = dataset::scan_directory(&root, &mapping)?;
                dataset::write_manifest(&m, &out)?;
                Ok(format!("{} real images", m.len()))
            }),
        )?;
    } else {
        r.skip("ingest", "not selected");
    }

    // augment: domain A and per-class domain B for translation training
    if to_train.is_empty() {
        r.skip("augment", "no translation model to train");
    } else if r.selected("augment") {
        let mut outputs = vec![layout.domain_a(), layout.domain_b_images()];
        outputs.extend(to_train.iter().map(|&l| layout.domain_b(l)));
        let (layout2, classes) = (layout.clone(), to_train.clone());
        let s = seed("augment");
        r.stage(
            "augment",
            vec![layout.real()],
            serde_json::json!({"domain_a_size": cfg.gan.domain_a_size, "domain_b_size": cfg.gan.domain_b_size, "classes": classes}),
            outputs,
            Box::new(move || {
                let real = dataset::read_manifest(&layout2.real())?;
                let n_a = cfg.gan.domain_a_size.min(real.count(ClassLabel::Normal));
                let a = sample_class(&real, ClassLabel::Normal, n_a, util::derive_seed(s, "domain_a"))?;
                dataset::write_manifest(&a, &layout2.domain_a())?;
                util::ensure_dir(&layout2.domain_b_images())?;
                for &l in &classes {
                    let src: Vec<_> = real.of_class(l).cloned().collect();
                    let target = cfg.gan.domain_b_size.max(src.len());
                    let recs = augment::augment_to_count(
                        &src,
                        target,
                        &AugmentationSpec::default(),
                        util::derive_seed(s, l.name()),
                        &layout2.domain_b_images(),
                    )?;
                    let m = DatasetManifest::new(recs, s, format!("domain B for {l}"))?;
                    dataset::write_manifest(&m, &layout2.domain_b(l))?;
                }
                Ok(format!("domain A {n_a} NORMAL, domain B for {} class(es)", classes.len()))
            }),
        )?;
    } else {
        r.skip("augment", "not selected");
    }

    // gan-train
    if to_train.is_empty() {
        r.skip("gan-train", "no translation model to train");
    } else if r.selected("gan-train") {
        let mut inputs = vec![layout.domain_a()];
        inputs.extend(to_train.iter().map(|&l| layout.domain_b(l)));
        let outputs: Vec<PathBuf> = to_train.iter().map(|&l| layout.checkpoint(l)).collect();
        let (layout2, classes) = (layout.clone(), to_train.clone());
        let s = seed("gan-train");
        r.stage(
            "gan-train",
            inputs,
            stage_config(&cfg.gan.translation),
            outputs,
            Box::new(move || {
                let a = dataset::read_manifest(&layout2.domain_a())?;
                for &l in &classes {
                    let b = dataset::read_manifest(&layout2.domain_b(l))?;
                    let tc = TranslationConfig {
                        seed: util::derive_seed(s, l.name()),
                        ..cfg.gan.translation.clone()
                    };
                    let dir = layout2.checkpoint(l);
                    if dir.exists() {
                        std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                    }
                    ugatit::train(&a, &b, &tc, Some(&dir)).map_err(|e| e.context(format!("translation model for {l}")))?;
                }
                Ok(format!("{} translation model(s), {} iterations each", classes.len(), cfg.gan.translation.iterations))
            }),
        )?;
    } else {
        r.skip("gan-train", "not selected");
    }

    let checkpoint_dir = |l: ClassLabel| cfg.gan.checkpoints.get(&l).cloned().unwrap_or_else(|| layout.checkpoint(l));

    // gan-generate
    if generated.is_empty() {
        r.skip("gan-generate", "strategy generates no images");
    } else if r.selected("gan-generate") {
        let mut inputs = vec![layout.real()];
        inputs.extend(generated.keys().map(|&l| checkpoint_dir(l)));
        let mut outputs: Vec<PathBuf> = generated.keys().map(|&l| layout.generated(l)).collect();
        outputs.extend(generated.keys().map(|&l| layout.generated_images(l)));
        let layout2 = layout.clone();
        let gen = generated.clone();
        let dirs: BTreeMap<ClassLabel, PathBuf> = generated.keys().map(|&l| (l, checkpoint_dir(l))).collect();
        let s = seed("gan-generate");
        r.stage(
            "gan-generate",
            inputs,
            serde_json::json!({"counts": gen}),
            outputs,
            Box::new(move || {
                let real = dataset::read_manifest(&layout2.real())?;
                let source = real.filter("NORMAL translation sources", |rec| rec.label == ClassLabel::Normal);
                let mut total = 0;
                for (&l, &n) in &gen {
                    let ckpt = TranslationCheckpoint::load(&dirs[&l]).map_err(|e| e.context(format!("checkpoint for {l}")))?;
                    if ckpt.target_class != l {
                        return Err(Error::Precondition(format!(
                            "checkpoint {} translates to {}, not {l}",
                            dirs[&l].display(),
                            ckpt.target_class
                        )));
                    }
                    let img_dir = layout2.generated_images(l);
                    if img_dir.exists() {
                        std::fs::remove_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
                    }
                    let m = ugatit::generate(&ckpt, &source, n, util::derive_seed(s, l.name()), &img_dir)?;
                    dataset::write_manifest(&m, &layout2.generated(l))?;
                    total += m.len();
                }
                Ok(format!("{total} generated images"))
            }),
        )?;
    } else {
        r.skip("gan-generate", "not selected");
    }

    // balance
    if r.selected("balance") {
        let mut inputs = vec![layout.real()];
        inputs.extend(generated.keys().map(|&l| layout.generated(l)));
        let layout2 = layout.clone();
        let strategy2 = strategy.clone();
        let gen_classes: BTreeSet<ClassLabel> = generated.keys().copied().collect();
        r.stage(
            "balance",
            inputs,
            stage_config(&strategy),
            vec![layout.balanced(), layout.plan(), layout.balanced_images()],
            Box::new(move || {
                let real = dataset::read_manifest(&layout2.real())?;
                let plan: BalancePlan = balance::plan_balance(&real, &strategy2, &gen_classes)?;
                util::write_json(&layout2.plan(), &plan)?;
                let mut manifests = BTreeMap::new();
                for &l in &gen_classes {
                    manifests.insert(l, dataset::read_manifest(&layout2.generated(l))?);
                }
                let img_dir = layout2.balanced_images();
                if img_dir.exists() {
                    std::fs::remove_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
                }
                let m = balance::execute(&plan, &real, &ManifestEngine { manifests }, &img_dir)?;
                dataset::write_manifest(&m, &layout2.balanced())?;
                Ok(format!("{} balanced records", m.len()))
            }),
        )?;
    } else {
        r.skip("balance", "not selected");
    }

    let method_balanced = format!("Bal + {}", strategy.name);
    let real_path = layout.real();
    let crossval = |input: PathBuf, out: PathBuf, method: String, stage: &'static str| -> (Vec<PathBuf>, serde_json::Value, Vec<PathBuf>, StageBody<'_>) {
        let s = seed(stage);
        let cc = cfg.classifier.clone();
        let real_path = real_path.clone();
        let mut inputs = vec![input.clone()];
        if input != real_path {
            inputs.push(real_path.clone());
        }
        (
            inputs,
            stage_config(&cc),
            vec![out.clone()],
            Box::new(move || {
                let mut m = dataset::read_manifest(&input)?;
                if input != real_path {
                    m = with_real_ancestors(&m, &dataset::read_manifest(&real_path)?)?;
                }
                let backbone = BackboneConfig {
                    seed: util::derive_seed(s, "backbone"),
                    ..cc.backbone.clone()
                };
                let train = TrainConfig {
                    seed: util::derive_seed(s, "train"),
                    ..cc.train.clone()
                };
                let folds = classifier::cross_validate(&m, cc.k, &backbone, &train)?;
                let mean_ba = folds.iter().map(|f| f.report.balanced_accuracy).sum::<f64>() / folds.len() as f64;
                util::write_json(&out, &CrossvalReport { method, folds })?;
                Ok(format!("mean balanced accuracy {mean_ba:.4}"))
            }),
        )
    };

    // crossval on the balanced set
    if r.selected("crossval") {
        let (i, c, o, b) = crossval(layout.balanced(), layout.crossval("balanced"), method_balanced.clone(), "crossval");
        r.stage("crossval", i, c, o, b)?;
    } else {
        r.skip("crossval", "not selected");
    }

    // baseline: real images only
    if !cfg.baseline {
        r.skip("baseline", "baseline disabled");
    } else if r.selected("baseline") {
        let (i, c, o, b) = crossval(layout.real(), layout.crossval("baseline"), "Imb + NoAug".into(), "baseline");
        r.stage("baseline", i, c, o, b)?;
    } else {
        r.skip("baseline", "not selected");
    }

    // evaluate
    if r.selected("evaluate") {
        let mut inputs = Vec::new();
        if cfg.baseline {
            inputs.push(layout.crossval("baseline"));
        }
        inputs.push(layout.crossval("balanced"));
        let tables = layout.tables();
        let inputs2 = inputs.clone();
        let tables2 = tables.clone();
        r.stage(
            "evaluate",
            inputs,
            serde_json::Value::Null,
            vec![tables],
            Box::new(move || {
                let reports = inputs2
                    .iter()
                    .map(|p| util::read_json::<CrossvalReport>(p))
                    .collect::<Result<Vec<_>>>()?;
                let (aggs, rendered) = evaluate_reports(&reports)?;
                write_tables(&tables2, &rendered)?;
                util::write_json(&tables2.join("aggregates.json"), &aggs)?;
                Ok(format!("{} method row(s)", aggs.len()))
            }),
        )?;
    } else {
        r.skip("evaluate", "not selected");
    }

    // train + embed
    if !cfg.embed.enabled {
        r.skip("train", "embedding disabled");
        r.skip("embed", "embedding disabled");
    } else {
        if r.selected("train") {
            let (layout2, s) = (layout.clone(), seed("train"));
            let cc = cfg.classifier.clone();
            r.stage(
                "train",
                vec![layout.balanced()],
                stage_config(&cc),
                vec![layout.model()],
                Box::new(move || {
                    let m = dataset::read_manifest(&layout2.balanced())?;
                    let backbone = BackboneConfig {
                        seed: util::derive_seed(s, "backbone"),
                        ..cc.backbone.clone()
                    };
                    let train = TrainConfig {
                        seed: util::derive_seed(s, "train"),
                        ..cc.train.clone()
                    };
                    let model = classifier::build_model(&backbone)?;
                    let freeze = backbone.freeze_policy;
                    let trained = classifier::fine_tune(model, &m, None, &train, freeze)?;
                    let dir = layout2.model();
                    if dir.exists() {
                        std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                    }
                    trained.model.save(&dir, &trained.log)?;
                    let last = trained.log.last().map(|l| l.train_accuracy).unwrap_or(0.0);
                    Ok(format!("final training accuracy {last:.4}"))
                }),
            )?;
        } else {
            r.skip("train", "not selected");
        }
        if r.selected("embed") {
            let (layout2, s) = (layout.clone(), seed("embed"));
            let ec = cfg.embed.clone();
            r.stage(
                "embed",
                vec![layout.model(), layout.real()],
                stage_config(&ec),
                vec![layout.embed()],
                Box::new(move || {
                    let (model, _) = classifier::Classifier::load(&layout2.model())?;
                    let real = dataset::read_manifest(&layout2.real())?;
                    let subset = if real.len() > ec.max_points {
                        let mut rng = util::rng(util::derive_seed(s, "subset"));
                        let mut idx = rand::seq::index::sample(&mut rng, real.len(), ec.max_points).into_vec();
                        idx.sort_unstable();
                        let keep: BTreeSet<usize> = idx.into_iter().collect();
                        let recs = real
                            .records()
                            .iter()
                            .enumerate()
                            .filter(|(i, _)| keep.contains(i))
                            .map(|(_, r)| r.clone())
                            .collect();
                        DatasetManifest::new(recs, s, "embedding subset")?
                    } else {
                        real
                    };
                    let features = embed::extract_features(&model, &subset)?;
                    let tsne = TsneConfig { seed: s, ..ec.tsne.clone() };
                    let emb = embed::tsne_3d(&features, &tsne)?;
                    let dir = layout2.embed();
                    embed::export(
                        &emb,
                        &features,
                        &dir.join("embedding.csv"),
                        Some(&dir.join("embedding.png")),
                        "real images",
                    )?;
                    util::write_json(
                        &dir.join("embedding.json"),
                        &serde_json::json!({
                            "manifest": "manifests/real.json",
                            "points": emb.n(),
                            "perplexity": emb.perplexity,
                            "iterations": emb.iterations,
                            "seed": emb.seed,
                            "kl_divergence": emb.kl_divergence,
                            "kl_history": emb.kl_history,
                        }),
                    )?;
                    Ok(format!("{} points, KL {:.4}", emb.n(), emb.kl_divergence))
                }),
            )?;
        } else {
            r.skip("embed", "not selected");
        }
    }

    // report
    if r.selected("report") {
        let tables = layout.tables();
        let report = layout.report();
        let name = cfg.name.clone();
        let strategy_name = strategy.name.clone();
        let summary: Vec<String> = r
            .record
            .stages
            .iter()
            .map(|s| format!("| {} | {:?} | {} |", s.name, s.status, s.note.replace('|', "/")))
            .collect();
        r.stage(
            "report",
            vec![tables.join("metrics.txt"), tables.join("per_class.txt")],
            serde_json::json!({"name": name, "strategy": strategy_name}),
            vec![report.clone()],
            Box::new(move || {
                let metrics_txt = util::read_string(&tables.join("metrics.txt"))?;
                let per_class_txt = util::read_string(&tables.join("per_class.txt"))?;
                let mut md = format!("# Experiment `{name}`\n\nStrategy: `{strategy_name}`\n\n");
                md.push_str("## Metrics (mean ± std over folds)\n\n```\n");
                md.push_str(&metrics_txt);
                md.push_str("```\n\n## Per-class true positive rate (%)\n\n```\n");
                md.push_str(&per_class_txt);
                md.push_str("```\n\n## Stages\n\n| stage | status | note |\n|---|---|---|\n");
                for line in summary {
                    md.push_str(&line);
                    md.push('\n');
                }
                util::write_string(&report, &md)?;
                Ok("report written".into())
            }),
        )?;
    } else {
        r.skip("report", "not selected");
    }
    Ok(())
}
