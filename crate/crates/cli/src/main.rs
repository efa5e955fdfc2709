use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use octfew::augment::{self, AugmentationSpec};
use octfew::balance::{self, CheckpointEngine};
use octfew::classifier::{self, FreezePolicy, Prediction};
use octfew::dataset::{self, ClassLabel, ClassMapping, DatasetManifest};
use octfew::embed::{self, TsneConfig};
use octfew::metrics::{self, AggregateReport, MeanStd, MetricReport};
use octfew::pipeline::{self, ClassifierStageConfig, CrossvalReport, ExperimentConfig, RunOptions, RunRecord};
use octfew::synth::{self, BlobSpec};
use octfew::ugatit::{self, TranslationCheckpoint, TranslationConfig};
use octfew::{util, Error};

#[derive(Parser)]
#[command(name = "octfew", version, about = "Few-shot retinal OCT classification pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan a class-per-directory image tree into a manifest.
    Ingest {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Subdirectory to skip (repeatable).
        #[arg(long)]
        ignore: Vec<String>,
    },
    /// Expand one class to a target count with augmented copies.
    Augment {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        class: ClassLabel,
        #[arg(long)]
        target: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Where augmented images go (default: next to the output manifest).
        #[arg(long)]
        img_dir: Option<PathBuf>,
    },
    /// Train a NORMAL → rare-class translation model.
    GanTrain {
        #[arg(long)]
        domain_a: PathBuf,
        #[arg(long)]
        domain_b: PathBuf,
        /// Translation config JSON (default: light preset at 32 px).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Translate NORMAL images with a trained checkpoint.
    GanGenerate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        img_dir: Option<PathBuf>,
    },
    /// Build a balanced training set from real images and checkpoints.
    Balance {
        /// Builtin strategy name or a strategy JSON file.
        #[arg(long)]
        strategy: String,
        #[arg(long)]
        real: PathBuf,
        /// JSON object mapping class names to checkpoint directories.
        #[arg(long)]
        ckpts: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        img_dir: Option<PathBuf>,
    },
    /// Fine-tune a classifier on a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// JSON with `backbone`, `train` and `k` sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stratified k-fold cross-validation.
    Crossval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Real manifest supplying the originals of classes the manifest holds
        /// only synthetic images of.
        #[arg(long)]
        real: Option<PathBuf>,
        /// Method name used as the table row label.
        #[arg(long, default_value = "model")]
        method: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against a manifest, or aggregate cross-validation
    /// reports into metric tables.
    Evaluate {
        /// Predictions JSON written by `predict`.
        #[arg(long, requires = "truth", conflicts_with = "reports")]
        pred: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Cross-validation output directories (or their crossval.json files).
        #[arg(long, num_args = 1..)]
        reports: Vec<PathBuf>,
        /// Report JSON with --pred, table directory with --reports.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Class probabilities for every record of a manifest.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// 3-D t-SNE of penultimate-layer features.
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 30.0)]
        perplexity: f64,
        #[arg(long, default_value_t = 1000)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Run an experiment file end to end.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated subset of stages.
        #[arg(long, value_delimiter = ',')]
        stages: Option<Vec<String>>,
        /// Recompute stages even when cached.
        #[arg(long)]
        force: bool,
        /// Only validate the config.
        #[arg(long)]
        check: bool,
    },
    /// Print the stage summary and metric tables of a finished run.
    Report {
        /// Output root of the run.
        #[arg(long)]
        run: PathBuf,
    },
    /// Write a desk-scale experiment file to start from.
    Init {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data_root: PathBuf,
        #[arg(long)]
        output_root: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic blob-image corpus (one directory per class).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        major: usize,
        #[arg(long, default_value_t = 10)]
        rare: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Validation(String),
    Stage(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let is_config = e.chain().any(|c| {
            matches!(
                c.downcast_ref::<Error>(),
                Some(Error::Config(_) | Error::SchemaVersion { .. } | Error::UnknownClass(_))
            )
        });
        if is_config {
            Failure::Validation(format!("{e:#}"))
        } else {
            Failure::Stage(e)
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn image_dir_for(out: &Path, given: Option<PathBuf>) -> PathBuf {
    given.unwrap_or_else(|| balance::default_image_dir(out))
}

fn load_classifier_config(path: Option<&Path>) -> Result<ClassifierStageConfig, Failure> {
    match path {
        None => Ok(ClassifierStageConfig::default()),
        Some(p) => {
            let cfg: ClassifierStageConfig = util::read_json(p).map_err(|e| Failure::Validation(format!("{}: {e}", p.display())))?;
            cfg.backbone.validate().map_err(|e| Failure::Validation(e.to_string()))?;
            cfg.train.validate().map_err(|e| Failure::Validation(e.to_string()))?;
            Ok(cfg)
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Ingest { root, out, ignore } => {
            let mut mapping = ClassMapping::canonical();
            for d in ignore {
                mapping = mapping.ignoring(d);
            }
            let m = dataset::scan_directory(&root, &mapping)?;
            dataset::write_manifest(&m, &out)?;
            for (label, n) in m.counts() {
                println!("{label}\t{n}");
            }
        }
        Command::Augment {
            manifest,
            class,
            target,
            seed,
            out,
            img_dir,
        } => {
            let m = dataset::read_manifest(&manifest)?;
            let src: Vec<_> = m.of_class(class).cloned().collect();
            let dir = image_dir_for(&out, img_dir);
            let recs = augment::augment_to_count(&src, target, &AugmentationSpec::default(), seed, &dir)?;
            let n = recs.len();
            dataset::write_manifest(&DatasetManifest::new(recs, seed, format!("{class} augmented to {target}"))?, &out)?;
            println!("{class}: {} source, {n} total", src.len());
        }
        Command::GanTrain {
            domain_a,
            domain_b,
            config,
            seed,
            out,
        } => {
            let mut cfg = match &config {
                Some(p) => util::read_json::<TranslationConfig>(p).map_err(|e| Failure::Validation(format!("{}: {e}", p.display())))?,
                None => TranslationConfig::light(32),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate().map_err(|e| Failure::Validation(e.to_string()))?;
            let a = dataset::read_manifest(&domain_a)?;
            let b = dataset::read_manifest(&domain_b)?;
            let ckpt = ugatit::train(&a, &b, &cfg, Some(&out))?;
            let last = ckpt.loss_history.last();
            println!(
                "trained {} iterations for {}; final d_total {:.4} g_total {:.4}",
                ckpt.iteration,
                ckpt.target_class,
                last.map_or(f64::NAN, |l| l.d_total),
                last.map_or(f64::NAN, |l| l.g_total)
            );
        }
        Command::GanGenerate {
            ckpt,
            source,
            count,
            seed,
            out,
            img_dir,
        } => {
            let c = TranslationCheckpoint::load(&ckpt)?;
            let s = dataset::read_manifest(&source)?;
            let s = s.filter("NORMAL translation sources", |r| r.label == ClassLabel::Normal);
            let m = ugatit::generate(&c, &s, count, seed, &image_dir_for(&out, img_dir))?;
            dataset::write_manifest(&m, &out)?;
            println!("{}: {} generated", c.target_class, m.len());
        }
        Command::Balance {
            strategy,
            real,
            ckpts,
            seed,
            out,
            img_dir,
        } => {
            let strat = if Path::new(&strategy).is_file() {
                let s: balance::BalanceStrategy =
                    util::read_json(Path::new(&strategy)).map_err(|e| Failure::Validation(format!("{strategy}: {e}")))?;
                balance::BalanceStrategy { seed, ..s }
            } else {
                balance::builtin_strategy(&strategy, seed).map_err(|e| Failure::Validation(e.to_string()))?
            };
            let real = dataset::read_manifest(&real)?;
            let paths: BTreeMap<ClassLabel, PathBuf> = match &ckpts {
                Some(p) => util::read_json(p).map_err(|e| Failure::Validation(format!("{}: {e}", p.display())))?,
                None => BTreeMap::new(),
            };
            let mut checkpoints = BTreeMap::new();
            for (l, p) in &paths {
                checkpoints.insert(*l, TranslationCheckpoint::load(p).with_context(|| format!("checkpoint for {l}"))?);
            }
            let generators: BTreeSet<ClassLabel> = checkpoints.keys().copied().collect();
            let plan = balance::plan_balance(&real, &strat, &generators).map_err(|e| Failure::Validation(e.to_string()))?;
            let source = real.filter("NORMAL translation sources", |r| r.label == ClassLabel::Normal);
            let engine = CheckpointEngine { checkpoints, source };
            let m = balance::execute(&plan, &real, &engine, &image_dir_for(&out, img_dir))?;
            dataset::write_manifest(&m, &out)?;
            for (label, hist) in m.provenance_histogram() {
                let parts: Vec<String> = hist.iter().map(|(k, v)| format!("{k} {v}")).collect();
                println!("{label}\t{}", parts.join(", "));
            }
        }
        Command::Train { manifest, config, val, out } => {
            let cc = load_classifier_config(config.as_deref())?;
            let m = dataset::read_manifest(&manifest)?;
            let v = val.as_deref().map(dataset::read_manifest).transpose()?;
            let model = classifier::build_model(&cc.backbone)?;
            let freeze: FreezePolicy = cc.backbone.freeze_policy;
            let trained = classifier::fine_tune(model, &m, v.as_ref(), &cc.train, freeze)?;
            trained.model.save(&out, &trained.log)?;
            for e in &trained.log {
                println!("epoch {}\tloss {:.4}\tacc {:.4}", e.epoch, e.train_loss, e.train_accuracy);
            }
        }
        Command::Crossval {
            manifest,
            k,
            config,
            real,
            method,
            out,
        } => {
            let cc = load_classifier_config(config.as_deref())?;
            let k = k.unwrap_or(cc.k);
            let mut m = dataset::read_manifest(&manifest)?;
            if let Some(r) = real {
                m = pipeline::with_real_ancestors(&m, &dataset::read_manifest(&r)?)?;
            }
            let folds = classifier::cross_validate(&m, k, &cc.backbone, &cc.train)?;
            for f in &folds {
                println!("fold {}\tbalanced accuracy {:.4}", f.fold, f.report.balanced_accuracy);
            }
            util::write_json(&out.join("crossval.json"), &CrossvalReport { method, folds })?;
        }
        Command::Evaluate {
            pred,
            truth,
            reports,
            out,
            table,
            csv,
        } => {
            let (aggs, tables) = match (pred, truth) {
                (Some(pred), Some(truth)) => {
                    let preds: Vec<Prediction> = util::read_json(&pred)?;
                    let truth = dataset::read_manifest(&truth)?;
                    let cm = classifier::confusion_for(&preds, &truth, ClassLabel::ALL.len())?;
                    let report = MetricReport::from_confusion(&cm)?;
                    util::write_json(&out, &serde_json::json!({"confusion": cm, "report": report}))?;
                    let agg = single_aggregate(&report);
                    let tables = metrics::render_table(&[("model".to_string(), agg.clone())], &[("model".to_string(), agg.per_class_tpr.clone())])?;
                    (vec![("model".to_string(), agg)], tables)
                }
                _ => {
                    if reports.is_empty() {
                        return Err(Failure::Validation("evaluate needs --pred/--truth or --reports".into()));
                    }
                    let reports = reports
                        .iter()
                        .map(|p| {
                            let f = if p.is_dir() { p.join("crossval.json") } else { p.clone() };
                            util::read_json::<CrossvalReport>(&f)
                        })
                        .collect::<octfew::Result<Vec<_>>>()?;
                    let (aggs, tables) = pipeline::evaluate_reports(&reports)?;
                    pipeline::write_tables(&out, &tables)?;
                    util::write_json(&out.join("aggregates.json"), &aggs)?;
                    (aggs, tables)
                }
            };
            if let Some(t) = table {
                util::write_string(&t, &format!("{}\n{}", tables.metrics_text, tables.per_class_text))?;
            }
            if let Some(c) = csv {
                util::write_string(&c, &tables.metrics_csv)?;
            }
            log::debug!("{} row(s)", aggs.len());
            print!("{}", tables.metrics_text);
        }
        Command::Predict { model, manifest, out } => {
            let (model, _) = classifier::Classifier::load(&model)?;
            let m = dataset::read_manifest(&manifest)?;
            let preds = classifier::predict(&model, &m)?;
            util::write_json(&out, &preds)?;
            println!("{} predictions", preds.len());
        }
        Command::Embed {
            model,
            manifest,
            perplexity,
            iters,
            seed,
            out,
            plot,
        } => {
            let (model, _) = classifier::Classifier::load(&model)?;
            let m = dataset::read_manifest(&manifest)?;
            let features = embed::extract_features(&model, &m)?;
            let cfg = TsneConfig {
                perplexity,
                iterations: iters,
                seed,
                ..TsneConfig::default()
            };
            embed::check_feasible(features.rows, perplexity).map_err(|e| Failure::Validation(e.to_string()))?;
            let emb = embed::tsne_3d(&features, &cfg)?;
            embed::export(&emb, &features, &out, plot.as_deref(), "t-SNE")?;
            util::write_json(
                &out.with_extension("json"),
                &serde_json::json!({
                    "manifest": manifest,
                    "points": emb.n(),
                    "perplexity": emb.perplexity,
                    "iterations": emb.iterations,
                    "seed": emb.seed,
                    "kl_divergence": emb.kl_divergence,
                    "kl_history": emb.kl_history,
                }),
            )?;
            println!("{} points, KL {:.4}", emb.n(), emb.kl_divergence);
        }
        Command::Run {
            config,
            stages,
            force,
            check,
        } => {
            let cfg = ExperimentConfig::load(&config)
                .map_err(|e| Failure::Validation(format!("{}: {e}", config.display())))?
                .with_env_overrides();
            if let Err(issues) = cfg.validate() {
                let lines: Vec<String> = issues.iter().map(|i| format!("{}: {i}", config.display())).collect();
                return Err(Failure::Validation(lines.join("\n")));
            }
            if check {
                println!("{}: ok", config.display());
                return Ok(());
            }
            let opts = RunOptions {
                stages: stages.map(|s| s.into_iter().collect()),
                force,
            };
            let record = pipeline::run(&cfg, &opts)?;
            print_stages(&record);
        }
        Command::Report { run } => {
            let record: RunRecord = util::read_json(&run.join("run_record.json"))?;
            print_stages(&record);
            let tables = run.join("tables");
            for f in ["metrics.txt", "per_class.txt"] {
                if let Ok(t) = util::read_string(&tables.join(f)) {
                    println!();
                    print!("{t}");
                }
            }
        }
        Command::Init {
            out,
            data_root,
            output_root,
            seed,
        } => {
            let cfg = ExperimentConfig::desk(data_root, output_root, seed);
            util::write_json(&out, &cfg)?;
            println!("wrote {}", out.display());
        }
        Command::Synth { out, major, rare, seed } => {
            let m = synth::write_blob_corpus(&out, &synth::desk_counts(major, rare), seed, &BlobSpec::default())?;
            println!("{} images under {}", m.len(), out.display());
        }
    }
    Ok(())
}

fn single_aggregate(r: &MetricReport) -> AggregateReport {
    let m = |v: f64| MeanStd { mean: v, std: 0.0 };
    AggregateReport {
        folds: 1,
        accuracy: m(r.accuracy),
        kappa: m(r.kappa),
        rci: m(r.rci),
        mcc: m(r.mcc),
        balanced_accuracy: m(r.balanced_accuracy),
        per_class_tpr: r.per_class_tpr.clone(),
    }
}

fn print_stages(record: &RunRecord) {
    for s in &record.stages {
        println!("{:<13} {:<9} {:>8.1}s  {}", s.name, format!("{:?}", s.status).to_lowercase(), s.seconds, s.note);
    }
    if record.partial {
        println!("run is partial: {}", record.error.as_deref().unwrap_or("unknown error"));
    }
}
