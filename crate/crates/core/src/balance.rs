//! Per-class dataset composition: sampled real images, augmented copies, and
//! GAN-generated images, resolved into an exact ledger and then executed.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentationSpec};
use crate::dataset::{sample_class, ClassLabel, DatasetManifest, ImageRecord, Provenance};
use crate::error::{Error, Result};
use crate::ugatit::{self, TranslationCheckpoint};
use crate::util;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RealComponent {
    None,
    All,
    Sample(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentedComponent {
    Count(usize),
    /// Whatever is left to reach the target after real and generated.
    Remainder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Composition {
    pub real: RealComponent,
    pub augmented: AugmentedComponent,
    pub generated: usize,
}

impl Composition {
    pub fn sample(n: usize) -> Self {
        Composition {
            real: RealComponent::Sample(n),
            augmented: AugmentedComponent::Count(0),
            generated: 0,
        }
    }

    pub fn native() -> Self {
        Composition {
            real: RealComponent::All,
            augmented: AugmentedComponent::Count(0),
            generated: 0,
        }
    }

    pub fn top_up() -> Self {
        Composition {
            real: RealComponent::All,
            augmented: AugmentedComponent::Remainder,
            generated: 0,
        }
    }

    pub fn synthetic(augmented: usize, generated: usize) -> Self {
        Composition {
            real: RealComponent::None,
            augmented: AugmentedComponent::Count(augmented),
            generated,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceStrategy {
    pub name: String,
    /// `None` keeps the class at whatever the composition resolves to.
    pub per_class_targets: BTreeMap<ClassLabel, Option<usize>>,
    pub composition_rules: BTreeMap<ClassLabel, Composition>,
    #[serde(default)]
    pub augmentation: AugmentationSpec,
    pub seed: u64,
}

pub const BUILTIN_STRATEGIES: [&str; 3] = ["imb_5000", "bal_5000", "bal_10000"];

pub fn builtin_strategy(name: &str, seed: u64) -> Result<BalanceStrategy> {
    let mut targets = BTreeMap::new();
    let mut rules = BTreeMap::new();
    for label in ClassLabel::ALL {
        let (target, rule) = match (name, label.is_rare()) {
            ("imb_5000", false) => (None, Composition::native()),
            ("imb_5000" | "bal_5000", true) => (Some(5000), Composition::synthetic(2000, 3000)),
            ("bal_5000", false) => (Some(5000), Composition::sample(5000)),
            ("bal_10000", true) => (Some(10_000), Composition::synthetic(2000, 8000)),
            ("bal_10000", false) if label == ClassLabel::Drusen => (Some(10_000), Composition::top_up()),
            ("bal_10000", false) => (Some(10_000), Composition::sample(10_000)),
            _ => {
                return Err(Error::Config(format!(
                    "unknown balance strategy `{name}` (expected one of {})",
                    BUILTIN_STRATEGIES.join(", ")
                )))
            }
        };
        targets.insert(label, target);
        rules.insert(label, rule);
    }
    Ok(BalanceStrategy {
        name: name.to_string(),
        per_class_targets: targets,
        composition_rules: rules,
        augmentation: AugmentationSpec::default(),
        seed,
    })
}

/// Scaled-down balanced recipe: majors keep all real images and are topped up
/// by augmentation; rares get `rare_augmented` augmented and the rest generated.
pub fn scaled_strategy(name: &str, target: usize, rare_augmented: usize, seed: u64) -> Result<BalanceStrategy> {
    if rare_augmented > target {
        return Err(Error::Config(format!(
            "rare augmented count {rare_augmented} exceeds target {target}"
        )));
    }
    let mut targets = BTreeMap::new();
    let mut rules = BTreeMap::new();
    for label in ClassLabel::ALL {
        targets.insert(label, Some(target));
        rules.insert(
            label,
            if label.is_rare() {
                Composition::synthetic(rare_augmented, target - rare_augmented)
            } else {
                Composition::top_up()
            },
        );
    }
    Ok(BalanceStrategy {
        name: name.to_string(),
        per_class_targets: targets,
        composition_rules: rules,
        augmentation: AugmentationSpec::default(),
        seed,
    })
}

impl BalanceStrategy {
    pub fn validate(&self) -> Result<()> {
        self.augmentation.validate()?;
        for (label, rule) in &self.composition_rules {
            let target = self.per_class_targets.get(label).copied().flatten();
            let fixed_real = match rule.real {
                RealComponent::Sample(n) => Some(n),
                RealComponent::None => Some(0),
                RealComponent::All => None,
            };
            match (target, fixed_real, rule.augmented) {
                (None, _, AugmentedComponent::Remainder) => {
                    return Err(Error::Config(format!("{label}: remainder augmentation needs a target")))
                }
                (Some(t), Some(r), AugmentedComponent::Count(a)) if r + a + rule.generated != t => {
                    return Err(Error::Config(format!(
                        "{label}: components {r} + {a} + {} do not sum to target {t}",
                        rule.generated
                    )))
                }
                (Some(t), Some(r), AugmentedComponent::Remainder) if r + rule.generated > t => {
                    return Err(Error::Config(format!("{label}: components exceed target {t}")))
                }
                _ => {}
            }
        }
        for label in self.per_class_targets.keys() {
            if !self.composition_rules.contains_key(label) {
                return Err(Error::Config(format!("{label}: target without a composition rule")));
            }
        }
        Ok(())
    }
}

/// Resolved counts for one class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassLedger {
    pub target: usize,
    pub real_available: usize,
    pub real: usize,
    pub real_rule: RealComponent,
    pub augmented: usize,
    pub generated: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalancePlan {
    pub strategy: BalanceStrategy,
    pub ledger: BTreeMap<ClassLabel, ClassLedger>,
}

impl BalancePlan {
    pub fn total(&self) -> usize {
        self.ledger.values().map(|l| l.target).sum()
    }
}

/// Produces translated images for rare classes.
pub trait GenerationEngine: Sync {
    fn classes(&self) -> BTreeSet<ClassLabel>;

    fn generate(&self, label: ClassLabel, n: usize, seed: u64, image_dir: &Path) -> Result<Vec<ImageRecord>>;
}

/// Generation from trained translation checkpoints over a NORMAL source manifest.
pub struct CheckpointEngine {
    pub checkpoints: BTreeMap<ClassLabel, TranslationCheckpoint>,
    pub source: DatasetManifest,
}

impl GenerationEngine for CheckpointEngine {
    fn classes(&self) -> BTreeSet<ClassLabel> {
        self.checkpoints.keys().copied().collect()
    }

    fn generate(&self, label: ClassLabel, n: usize, seed: u64, image_dir: &Path) -> Result<Vec<ImageRecord>> {
        let ckpt = self
            .checkpoints
            .get(&label)
            .ok_or_else(|| Error::Precondition(format!("missing translation checkpoint for {label}")))?;
        if ckpt.target_class != label {
            return Err(Error::Precondition(format!(
                "checkpoint for {label} was trained for {}",
                ckpt.target_class
            )));
        }
        Ok(ugatit::generate(ckpt, &self.source, n, seed, image_dir)?.into_records())
    }
}

/// Serves previously generated manifests, first `n` records per class.
pub struct ManifestEngine {
    pub manifests: BTreeMap<ClassLabel, DatasetManifest>,
}

impl GenerationEngine for ManifestEngine {
    fn classes(&self) -> BTreeSet<ClassLabel> {
        self.manifests.keys().copied().collect()
    }

    fn generate(&self, label: ClassLabel, n: usize, _: u64, _: &Path) -> Result<Vec<ImageRecord>> {
        let m = self
            .manifests
            .get(&label)
            .ok_or_else(|| Error::Precondition(format!("no generated images for {label}")))?;
        if m.len() < n {
            return Err(Error::Shortfall {
                label: label.to_string(),
                requested: n,
                available: m.len(),
            });
        }
        Ok(m.records()[..n].to_vec())
    }
}

/// An engine that cannot generate; for strategies without generated components.
pub struct NoGeneration;

impl GenerationEngine for NoGeneration {
    fn classes(&self) -> BTreeSet<ClassLabel> {
        BTreeSet::new()
    }

    fn generate(&self, label: ClassLabel, _: usize, _: u64, _: &Path) -> Result<Vec<ImageRecord>> {
        Err(Error::Precondition(format!("no generation engine for {label}")))
    }
}

/// Resolve every class's component counts. `generators` lists the classes that
/// have a translation checkpoint.
pub fn plan_balance(
    real: &DatasetManifest,
    strategy: &BalanceStrategy,
    generators: &BTreeSet<ClassLabel>,
) -> Result<BalancePlan> {
    strategy.validate()?;
    if let Some(r) = real.records().iter().find(|r| r.provenance != Provenance::Real) {
        return Err(Error::Precondition(format!(
            "balance input must be real images only; `{}` is {:?}",
            r.id, r.provenance
        )));
    }
    let mut ledger = BTreeMap::new();
    for (&label, rule) in &strategy.composition_rules {
        let available = real.count(label);
        let real_n = match rule.real {
            RealComponent::None => 0,
            RealComponent::All => available,
            RealComponent::Sample(n) => {
                if n > available {
                    return Err(Error::Shortfall {
                        label: label.to_string(),
                        requested: n,
                        available,
                    });
                }
                n
            }
        };
        let target = strategy.per_class_targets.get(&label).copied().flatten();
        let augmented = match (rule.augmented, target) {
            (AugmentedComponent::Count(a), _) => a,
            (AugmentedComponent::Remainder, Some(t)) => t.checked_sub(real_n + rule.generated).ok_or_else(|| {
                Error::Config(format!(
                    "{label}: {real_n} real + {} generated exceed target {t}",
                    rule.generated
                ))
            })?,
            (AugmentedComponent::Remainder, None) => unreachable!("rejected by validate"),
        };
        let total = real_n + augmented + rule.generated;
        if let Some(t) = target {
            if total != t {
                return Err(Error::Config(format!("{label}: resolved {total} records for target {t}")));
            }
        }
        if augmented > 0 && available == 0 {
            return Err(Error::Shortfall {
                label: label.to_string(),
                requested: 1,
                available: 0,
            });
        }
        if rule.generated > 0 && !generators.contains(&label) {
            return Err(Error::Precondition(format!("missing translation checkpoint for {label}")));
        }
        ledger.insert(
            label,
            ClassLedger {
                target: total,
                real_available: available,
                real: real_n,
                real_rule: rule.real,
                augmented,
                generated: rule.generated,
            },
        );
    }
    Ok(BalancePlan {
        strategy: strategy.clone(),
        ledger,
    })
}

pub const INVALID_MARKER: &str = "INVALID";

fn class_records(
    real: &DatasetManifest,
    label: ClassLabel,
    entry: &ClassLedger,
    plan: &BalancePlan,
    engine: &dyn GenerationEngine,
    image_dir: &Path,
) -> Result<Vec<ImageRecord>> {
    let seed = plan.strategy.seed;
    let tag = |what: &str| util::derive_seed(seed, &format!("{}/{what}", label.name()));
    let selected: Vec<ImageRecord> = match entry.real_rule {
        RealComponent::None => Vec::new(),
        RealComponent::All => real.of_class(label).cloned().collect(),
        RealComponent::Sample(n) => sample_class(real, label, n, tag("real"))?.into_records(),
    };
    let mut out = selected.clone();
    if entry.augmented > 0 {
        let sources: Vec<ImageRecord> = if selected.is_empty() {
            real.of_class(label).cloned().collect()
        } else {
            selected
        };
        let n = sources.len();
        let expanded = augment::augment_to_count(
            &sources,
            n + entry.augmented,
            &plan.strategy.augmentation,
            tag("augmented"),
            &image_dir.join("augmented"),
        )?;
        out.extend(expanded.into_iter().skip(n));
    }
    if entry.generated > 0 {
        let generated = engine.generate(label, entry.generated, tag("generated"), &image_dir.join("generated"))?;
        if let Some(r) = generated.iter().find(|r| r.label != label) {
            return Err(Error::Precondition(format!(
                "generation for {label} returned a {} record `{}`",
                r.label, r.id
            )));
        }
        out.extend(generated);
    }
    Ok(out)
}

/// Run the plan, writing synthetic images under `image_dir`. On failure an
/// `INVALID` marker is left in `image_dir`.
pub fn execute(
    plan: &BalancePlan,
    real: &DatasetManifest,
    engine: &dyn GenerationEngine,
    image_dir: &Path,
) -> Result<DatasetManifest> {
    let marker = image_dir.join(INVALID_MARKER);
    util::ensure_dir(image_dir)?;
    if marker.exists() {
        std::fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    }
    let run = || -> Result<DatasetManifest> {
        let mut merged = Vec::with_capacity(plan.total());
        for (&label, entry) in &plan.ledger {
            let recs = class_records(real, label, entry, plan, engine, image_dir)
                .map_err(|e| e.context(format!("balancing {label}")))?;
            log::info!(
                "{label}: {} real, {} augmented, {} generated",
                entry.real,
                entry.augmented,
                entry.generated
            );
            merged.extend(recs);
        }
        resalt_collisions(&mut merged, plan.strategy.seed);
        let manifest = DatasetManifest::new(
            merged,
            plan.strategy.seed,
            format!("balanced with strategy `{}`", plan.strategy.name),
        )?;
        verify(plan, &manifest)?;
        Ok(manifest)
    };
    run().inspect_err(|e| {
        // Best effort: the original error is what matters.
        let _ = util::write_string(&marker, &format!("{e}\n"));
    })
}

/// Rename any repeated id, keeping the first occurrence.
fn resalt_collisions(records: &mut [ImageRecord], seed: u64) {
    let mut seen: HashSet<String> = HashSet::with_capacity(records.len());
    for r in records.iter_mut() {
        let mut salt = 0u64;
        while !seen.insert(r.id.clone()) {
            let s = util::derive_seed(seed ^ salt, &r.id);
            r.id = format!("{}#{s:016x}", r.id);
            salt += 1;
        }
    }
}

/// Check per-class counts and provenance against the ledger.
pub fn verify(plan: &BalancePlan, manifest: &DatasetManifest) -> Result<()> {
    let hist = manifest.provenance_histogram();
    for (label, entry) in &plan.ledger {
        let got = |p: &str| hist.get(label).and_then(|h| h.get(p)).copied().unwrap_or(0);
        let (r, a, g) = (got("real"), got("augmented"), got("generated"));
        if (r, a, g) != (entry.real, entry.augmented, entry.generated) {
            return Err(Error::Precondition(format!(
                "{label}: produced real/augmented/generated {r}/{a}/{g}, ledger says {}/{}/{}",
                entry.real, entry.augmented, entry.generated
            )));
        }
    }
    for label in manifest.counts().keys() {
        if !plan.ledger.contains_key(label) {
            return Err(Error::Precondition(format!("{label} is not in the plan")));
        }
    }
    Ok(())
}

pub fn default_image_dir(out_manifest: &Path) -> PathBuf {
    let stem = out_manifest
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "balanced".into());
    out_manifest
        .parent()
        .unwrap_or(Path::new("."))
        .join(format!("{stem}_images"))
}
