//! Image classifiers: a backbone described as a graph of named nodes, built
//! into candle parameters, fine-tuned with an optional freeze policy, and
//! evaluated with k-fold cross-validation.
//!
//! Two variants exist. `toy_cnn` is a three-stage CNN for 32 px inputs that
//! keeps every test minutes-scale. `inception_v3_like` follows the
//! Inception-v3 topology (stem, mixed_5b..mixed_7c, global pool, head) with a
//! channel width multiplier, and accepts pretrained trunk weights.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionConfig, CbamConfig, CbamParams, SeConfig, SeParams};
use crate::dataset::{make_folds, DatasetManifest, ImageRecord, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::metrics::{self, ConfusionMatrix, MetricReport};
use crate::nn::{self, Conv2d, Linear, ParamStore, Scope};
use crate::util;

// ---------------------------------------------------------------------------
// Graph description

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: (usize, usize),
}

fn conv(out: usize, k: usize, stride: usize, pad: usize) -> ConvSpec {
    ConvSpec {
        out,
        kernel: (k, k),
        stride,
        padding: (pad, pad),
    }
}

fn conv_hw(out: usize, kernel: (usize, usize), padding: (usize, usize)) -> ConvSpec {
    ConvSpec {
        out,
        kernel,
        stride: 1,
        padding,
    }
}

/// One operation inside an Inception branch. Convolutions are followed by ReLU.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BranchOp {
    Conv(ConvSpec),
    /// 3x3, stride 1, zero padding 1, padding counted in the average.
    AvgPool3,
    MaxPool { kernel: usize, stride: usize },
}

/// A sequence of ops, optionally forking into parallel tails that are concatenated.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Branch {
    pub ops: Vec<BranchOp>,
    #[serde(default)]
    pub fork: Vec<Vec<BranchOp>>,
}

impl Branch {
    fn seq(ops: Vec<BranchOp>) -> Self {
        Branch { ops, fork: Vec::new() }
    }

    fn out_channels(&self, in_c: usize) -> usize {
        let after = ops_out_channels(&self.ops, in_c);
        if self.fork.is_empty() {
            after
        } else {
            self.fork.iter().map(|f| ops_out_channels(f, after)).sum()
        }
    }
}

fn ops_out_channels(ops: &[BranchOp], in_c: usize) -> usize {
    ops.iter().fold(in_c, |c, op| match op {
        BranchOp::Conv(s) => s.out,
        _ => c,
    })
}

fn ops_param_count(ops: &[BranchOp], in_c: usize) -> (usize, usize) {
    let mut c = in_c;
    let mut n = 0;
    for op in ops {
        if let BranchOp::Conv(s) = op {
            n += Conv2d::param_count(c, s.out, s.kernel, true);
            c = s.out;
        }
    }
    (n, c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum NodeKind {
    /// Convolution + ReLU.
    Conv(ConvSpec),
    MaxPool { kernel: usize, stride: usize },
    /// Parallel branches concatenated along channels.
    Mixed { branches: Vec<Branch> },
    GlobalAvgPool,
    /// Fully connected layer on pooled features, optionally with ReLU.
    Dense { out: usize, relu: bool },
    /// Final classification layer (logits).
    Head { classes: usize },
    Se { channels: usize, reduction_ratio: usize },
    Cbam { channels: usize, cfg: CbamConfig },
}

impl NodeKind {
    pub fn out_channels(&self, in_c: usize) -> usize {
        match self {
            NodeKind::Conv(s) => s.out,
            NodeKind::Mixed { branches } => branches.iter().map(|b| b.out_channels(in_c)).sum(),
            NodeKind::Dense { out, .. } => *out,
            NodeKind::Head { classes } => *classes,
            _ => in_c,
        }
    }

    pub fn param_count(&self, in_c: usize) -> usize {
        match self {
            NodeKind::Conv(s) => Conv2d::param_count(in_c, s.out, s.kernel, true),
            NodeKind::Mixed { branches } => branches
                .iter()
                .map(|b| {
                    let (n, c) = ops_param_count(&b.ops, in_c);
                    n + b.fork.iter().map(|f| ops_param_count(f, c).0).sum::<usize>()
                })
                .sum(),
            NodeKind::Dense { out, .. } => Linear::param_count(in_c, *out, true),
            NodeKind::Head { classes } => Linear::param_count(in_c, *classes, true),
            NodeKind::Se {
                channels,
                reduction_ratio,
            } => attention::se_param_count(*channels, *reduction_ratio),
            NodeKind::Cbam { channels, cfg } => attention::cbam_param_count(*channels, cfg),
            NodeKind::MaxPool { .. } | NodeKind::GlobalAvgPool => 0,
        }
    }

    pub fn is_attention(&self) -> bool {
        matches!(self, NodeKind::Se { .. } | NodeKind::Cbam { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub kind: NodeKind,
}

fn node(name: &str, kind: NodeKind) -> Node {
    Node {
        name: name.to_string(),
        kind,
    }
}

/// Named-node description of a backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneGraph {
    pub in_channels: usize,
    pub nodes: Vec<Node>,
    /// Node whose output is the penultimate feature vector.
    pub penultimate: String,
    /// Attention sites used when the config lists none.
    pub default_sites: Vec<String>,
    /// Layers trained under `final_layers_only` (attention nodes always are).
    pub final_layers: Vec<String>,
}

impl BackboneGraph {
    pub fn param_count(&self) -> usize {
        let mut c = self.in_channels;
        let mut n = 0;
        for node in &self.nodes {
            n += node.kind.param_count(c);
            c = node.kind.out_channels(c);
        }
        n
    }

    pub fn count_nodes(&self, pred: impl Fn(&NodeKind) -> bool) -> usize {
        self.nodes.iter().filter(|n| pred(&n.kind)).count()
    }

    pub fn width_of(&self, name: &str) -> Option<usize> {
        let mut c = self.in_channels;
        for node in &self.nodes {
            c = node.kind.out_channels(c);
            if node.name == name {
                return Some(c);
            }
        }
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneVariant {
    InceptionV3Like,
    ToyCnn,
}

impl BackboneVariant {
    pub fn default_input_size(self) -> usize {
        match self {
            BackboneVariant::InceptionV3Like => 299,
            BackboneVariant::ToyCnn => 32,
        }
    }
}

pub fn toy_cnn_graph(num_classes: usize) -> BackboneGraph {
    BackboneGraph {
        in_channels: 3,
        nodes: vec![
            node("stage1", NodeKind::Conv(conv(8, 3, 1, 1))),
            node("pool1", NodeKind::MaxPool { kernel: 2, stride: 2 }),
            node("stage2", NodeKind::Conv(conv(16, 3, 1, 1))),
            node("pool2", NodeKind::MaxPool { kernel: 2, stride: 2 }),
            node("stage3", NodeKind::Conv(conv(32, 3, 1, 1))),
            node("gap", NodeKind::GlobalAvgPool),
            node("features", NodeKind::Dense { out: 64, relu: true }),
            node("head", NodeKind::Head { classes: num_classes }),
        ],
        penultimate: "features".into(),
        default_sites: vec!["stage1".into(), "stage2".into(), "stage3".into()],
        final_layers: vec!["features".into(), "head".into()],
    }
}

pub fn inception_v3_graph(num_classes: usize, width: f64) -> BackboneGraph {
    let w = |c: usize| ((c as f64 * width).round() as usize).max(1);
    let c = |out: usize, k: usize, s: usize, p: usize| BranchOp::Conv(conv(w(out), k, s, p));
    let chw = |out: usize, k: (usize, usize), p: (usize, usize)| BranchOp::Conv(conv_hw(w(out), k, p));
    let max3 = BranchOp::MaxPool { kernel: 3, stride: 2 };

    let inception_a = |pool: usize| NodeKind::Mixed {
        branches: vec![
            Branch::seq(vec![c(64, 1, 1, 0)]),
            Branch::seq(vec![c(48, 1, 1, 0), c(64, 5, 1, 2)]),
            Branch::seq(vec![c(64, 1, 1, 0), c(96, 3, 1, 1), c(96, 3, 1, 1)]),
            Branch::seq(vec![BranchOp::AvgPool3, c(pool, 1, 1, 0)]),
        ],
    };
    let inception_b = NodeKind::Mixed {
        branches: vec![
            Branch::seq(vec![c(384, 3, 2, 0)]),
            Branch::seq(vec![c(64, 1, 1, 0), c(96, 3, 1, 1), c(96, 3, 2, 0)]),
            Branch::seq(vec![max3.clone()]),
        ],
    };
    let inception_c = |c7: usize| NodeKind::Mixed {
        branches: vec![
            Branch::seq(vec![c(192, 1, 1, 0)]),
            Branch::seq(vec![c(c7, 1, 1, 0), chw(c7, (1, 7), (0, 3)), chw(192, (7, 1), (3, 0))]),
            Branch::seq(vec![
                c(c7, 1, 1, 0),
                chw(c7, (7, 1), (3, 0)),
                chw(c7, (1, 7), (0, 3)),
                chw(c7, (7, 1), (3, 0)),
                chw(192, (1, 7), (0, 3)),
            ]),
            Branch::seq(vec![BranchOp::AvgPool3, c(192, 1, 1, 0)]),
        ],
    };
    let inception_d = NodeKind::Mixed {
        branches: vec![
            Branch::seq(vec![c(192, 1, 1, 0), c(320, 3, 2, 0)]),
            Branch::seq(vec![
                c(192, 1, 1, 0),
                chw(192, (1, 7), (0, 3)),
                chw(192, (7, 1), (3, 0)),
                c(192, 3, 2, 0),
            ]),
            Branch::seq(vec![max3.clone()]),
        ],
    };
    let split = || vec![vec![chw(384, (1, 3), (0, 1))], vec![chw(384, (3, 1), (1, 0))]];
    let inception_e = || NodeKind::Mixed {
        branches: vec![
            Branch::seq(vec![c(320, 1, 1, 0)]),
            Branch {
                ops: vec![c(384, 1, 1, 0)],
                fork: split(),
            },
            Branch {
                ops: vec![c(448, 1, 1, 0), c(384, 3, 1, 1)],
                fork: split(),
            },
            Branch::seq(vec![BranchOp::AvgPool3, c(192, 1, 1, 0)]),
        ],
    };

    BackboneGraph {
        in_channels: 3,
        nodes: vec![
            node("conv_1a", NodeKind::Conv(conv(w(32), 3, 2, 0))),
            node("conv_2a", NodeKind::Conv(conv(w(32), 3, 1, 0))),
            node("conv_2b", NodeKind::Conv(conv(w(64), 3, 1, 1))),
            node("pool_1", NodeKind::MaxPool { kernel: 3, stride: 2 }),
            node("conv_3b", NodeKind::Conv(conv(w(80), 1, 1, 0))),
            node("conv_4a", NodeKind::Conv(conv(w(192), 3, 1, 0))),
            node("pool_2", NodeKind::MaxPool { kernel: 3, stride: 2 }),
            node("mixed_5b", inception_a(32)),
            node("mixed_5c", inception_a(64)),
            node("mixed_5d", inception_a(64)),
            node("mixed_6a", inception_b),
            node("mixed_6b", inception_c(128)),
            node("mixed_6c", inception_c(160)),
            node("mixed_6d", inception_c(160)),
            node("mixed_6e", inception_c(192)),
            node("mixed_7a", inception_d),
            node("mixed_7b", inception_e()),
            node("mixed_7c", inception_e()),
            node("gap", NodeKind::GlobalAvgPool),
            node("head", NodeKind::Head { classes: num_classes }),
        ],
        penultimate: "gap".into(),
        default_sites: vec!["mixed_5d".into(), "mixed_6e".into(), "mixed_7c".into()],
        final_layers: vec!["mixed_7a".into(), "mixed_7b".into(), "mixed_7c".into(), "head".into()],
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    FinalLayersOnly,
    #[default]
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub variant: BackboneVariant,
    pub input_size: usize,
    pub num_classes: usize,
    pub pretrained_weights: Option<PathBuf>,
    pub freeze_policy: FreezePolicy,
    pub attention: AttentionConfig,
    /// Channel multiplier for `inception_v3_like` (1.0 = reference widths).
    pub width: f64,
    /// Overrides the graph's default trainable layers under `final_layers_only`.
    pub final_layers: Vec<String>,
    pub normalization: Normalization,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            variant: BackboneVariant::ToyCnn,
            input_size: 32,
            num_classes: NUM_CLASSES,
            pretrained_weights: None,
            freeze_policy: FreezePolicy::Full,
            attention: AttentionConfig::default(),
            width: 1.0,
            final_layers: Vec::new(),
            normalization: Normalization::default(),
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn toy() -> Self {
        Self::default()
    }

    pub fn inception(width: f64) -> Self {
        BackboneConfig {
            variant: BackboneVariant::InceptionV3Like,
            input_size: 299,
            width,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size != self.variant.default_input_size() {
            return Err(Error::Config(format!(
                "input_size {} does not match the {:?} default {}",
                self.input_size,
                self.variant,
                self.variant.default_input_size()
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if !(self.width > 0.0) {
            return Err(Error::Config("width must be positive".into()));
        }
        Ok(())
    }

    /// Base graph with attention inserted per config.
    pub fn graph(&self) -> Result<BackboneGraph> {
        let base = match self.variant {
            BackboneVariant::ToyCnn => toy_cnn_graph(self.num_classes),
            BackboneVariant::InceptionV3Like => inception_v3_graph(self.num_classes, self.width),
        };
        let sites = if self.attention.sites.is_empty() {
            base.default_sites.clone()
        } else {
            self.attention.sites.clone()
        };
        attention::insert_attention(base, self.attention.variant, &sites, &self.attention)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub early_stop_patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            seed: 0,
            early_stop_patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Instantiated model

#[derive(Clone, Debug)]
enum OpLayer {
    Conv(Conv2d),
    AvgPool3,
    MaxPool { kernel: usize, stride: usize },
}

#[derive(Clone, Debug)]
struct BranchLayer {
    ops: Vec<OpLayer>,
    fork: Vec<Vec<OpLayer>>,
}

#[derive(Clone, Debug)]
enum Layer {
    Conv(Conv2d),
    MaxPool { kernel: usize, stride: usize },
    Mixed(Vec<BranchLayer>),
    GlobalAvgPool,
    Dense { lin: Linear, relu: bool },
    Head(Linear),
    Se(SeParams, SeConfig),
    Cbam(CbamParams, CbamConfig),
}

fn build_ops(scope: &Scope, ops: &[BranchOp], in_c: usize) -> Result<(Vec<OpLayer>, usize)> {
    let mut c = in_c;
    let mut out = Vec::with_capacity(ops.len());
    for (i, op) in ops.iter().enumerate() {
        out.push(match op {
            BranchOp::Conv(s) => {
                let layer = Conv2d::new(&scope.pp(&i.to_string()), c, s.out, s.kernel, s.stride, s.padding, true)?;
                c = s.out;
                OpLayer::Conv(layer)
            }
            BranchOp::AvgPool3 => OpLayer::AvgPool3,
            BranchOp::MaxPool { kernel, stride } => OpLayer::MaxPool {
                kernel: *kernel,
                stride: *stride,
            },
        });
    }
    Ok((out, c))
}

fn run_ops(ops: &[OpLayer], x: &Tensor) -> Result<Tensor> {
    let mut x = x.clone();
    for op in ops {
        x = match op {
            OpLayer::Conv(c) => c.forward(&x)?.relu()?,
            OpLayer::AvgPool3 => x
                .pad_with_zeros(2, 1, 1)?
                .pad_with_zeros(3, 1, 1)?
                .avg_pool2d_with_stride(3, 1)?,
            OpLayer::MaxPool { kernel, stride } => x.max_pool2d_with_stride(*kernel, *stride)?,
        };
    }
    Ok(x)
}

/// A backbone graph bound to parameters.
pub struct Classifier {
    config: BackboneConfig,
    graph: BackboneGraph,
    store: ParamStore,
    layers: Vec<(String, Layer)>,
}

impl Classifier {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn graph(&self) -> &BackboneGraph {
        &self.graph
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    fn attention_nodes(&self) -> BTreeSet<String> {
        self.graph
            .nodes
            .iter()
            .filter(|n| n.kind.is_attention())
            .map(|n| n.name.clone())
            .collect()
    }

    /// Names of layers trained under `final_layers_only`.
    pub fn final_layer_names(&self) -> BTreeSet<String> {
        let mut names: BTreeSet<String> = if self.config.final_layers.is_empty() {
            self.graph.final_layers.iter().cloned().collect()
        } else {
            self.config.final_layers.iter().cloned().collect()
        };
        names.extend(self.attention_nodes());
        names
    }

    pub fn is_trainable(&self, param: &str, policy: FreezePolicy) -> bool {
        match policy {
            FreezePolicy::Full => true,
            FreezePolicy::FinalLayersOnly => {
                let layer = param.split('.').next().unwrap_or("");
                self.final_layer_names().contains(layer)
            }
        }
    }

    fn forward_impl(&self, x: &Tensor, stop_at: Option<&str>) -> Result<Tensor> {
        let mut x = x.clone();
        for (name, layer) in &self.layers {
            x = match layer {
                Layer::Conv(c) => c.forward(&x)?.relu()?,
                Layer::MaxPool { kernel, stride } => x.max_pool2d_with_stride(*kernel, *stride)?,
                Layer::Mixed(branches) => {
                    let mut outs = Vec::new();
                    for b in branches {
                        let y = run_ops(&b.ops, &x)?;
                        if b.fork.is_empty() {
                            outs.push(y);
                        } else {
                            for f in &b.fork {
                                outs.push(run_ops(f, &y)?);
                            }
                        }
                    }
                    Tensor::cat(&outs, 1)?
                }
                Layer::GlobalAvgPool => x.mean(3)?.mean(2)?,
                Layer::Dense { lin, relu } => {
                    let y = lin.forward(&x)?;
                    if *relu {
                        y.relu()?
                    } else {
                        y
                    }
                }
                Layer::Head(lin) => lin.forward(&x)?,
                Layer::Se(p, cfg) => attention::se_block(&x, p, cfg)?,
                Layer::Cbam(p, cfg) => attention::cbam_block(&x, p, cfg)?,
            };
            if stop_at == Some(name.as_str()) {
                return Ok(x);
            }
        }
        Ok(x)
    }

    /// Logits for a normalised (B, 3, S, S) batch.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_impl(x, None)
    }

    /// Output of a named node.
    pub fn forward_to(&self, x: &Tensor, node: &str) -> Result<Tensor> {
        if !self.layers.iter().any(|(n, _)| n == node) {
            return Err(Error::UnknownSite(node.to_string()));
        }
        self.forward_impl(x, Some(node))
    }

    pub fn save(&self, dir: &Path, log: &[EpochLog]) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "classifier",
            "config": self.config,
            "log": log,
        });
        nn::save_tensor_dir(dir, meta, &self.store.snapshot()?)
    }

    pub fn load(dir: &Path) -> Result<(Classifier, Vec<EpochLog>)> {
        let (header, tensors) = nn::load_tensor_dir(dir)?;
        if header.meta.get("kind").and_then(|k| k.as_str()) != Some("classifier") {
            return Err(Error::Config(format!("{} is not a classifier directory", dir.display())));
        }
        let mut config: BackboneConfig = serde_json::from_value(header.meta["config"].clone())?;
        config.pretrained_weights = None;
        let log: Vec<EpochLog> = serde_json::from_value(header.meta["log"].clone()).unwrap_or_default();
        let model = build_model(&config)?;
        let expected: BTreeSet<String> = model.store.names().into_iter().collect();
        let found: BTreeSet<String> = tensors.keys().cloned().collect();
        if expected != found {
            return Err(Error::WeightSchema {
                missing: expected.difference(&found).cloned().collect(),
                extra: found.difference(&expected).cloned().collect(),
            });
        }
        model.store.load(&tensors)?;
        Ok((model, log))
    }
}

/// Instantiate a classifier, loading pretrained trunk weights if configured.
pub fn build_model(cfg: &BackboneConfig) -> Result<Classifier> {
    cfg.validate()?;
    let graph = cfg.graph()?;
    let store = ParamStore::new(cfg.seed, DType::F32);
    let root = store.root();
    let mut layers = Vec::with_capacity(graph.nodes.len());
    let mut c = graph.in_channels;
    for n in &graph.nodes {
        let scope = root.pp(&n.name);
        let layer = match &n.kind {
            NodeKind::Conv(s) => Layer::Conv(Conv2d::new(&scope, c, s.out, s.kernel, s.stride, s.padding, true)?),
            NodeKind::MaxPool { kernel, stride } => Layer::MaxPool {
                kernel: *kernel,
                stride: *stride,
            },
            NodeKind::Mixed { branches } => {
                let mut bl = Vec::with_capacity(branches.len());
                for (i, b) in branches.iter().enumerate() {
                    let bs = scope.pp(&format!("b{i}"));
                    let (ops, after) = build_ops(&bs, &b.ops, c)?;
                    let fork = b
                        .fork
                        .iter()
                        .enumerate()
                        .map(|(j, f)| build_ops(&bs.pp(&format!("f{j}")), f, after).map(|r| r.0))
                        .collect::<Result<_>>()?;
                    bl.push(BranchLayer { ops, fork });
                }
                Layer::Mixed(bl)
            }
            NodeKind::GlobalAvgPool => Layer::GlobalAvgPool,
            NodeKind::Dense { out, relu } => Layer::Dense {
                lin: Linear::new(&scope, c, *out, true)?,
                relu: *relu,
            },
            NodeKind::Head { classes } => Layer::Head(Linear::new(&scope, c, *classes, true)?),
            NodeKind::Se {
                channels,
                reduction_ratio,
            } => Layer::Se(
                SeParams::new(&scope, *channels, *reduction_ratio)?,
                SeConfig {
                    reduction_ratio: *reduction_ratio,
                },
            ),
            NodeKind::Cbam { channels, cfg } => Layer::Cbam(CbamParams::new(&scope, *channels, cfg)?, *cfg),
        };
        c = n.kind.out_channels(c);
        layers.push((n.name.clone(), layer));
    }
    let model = Classifier {
        config: cfg.clone(),
        graph,
        store,
        layers,
    };
    if let Some(path) = &cfg.pretrained_weights {
        load_pretrained(&model, path)?;
    }
    Ok(model)
}

/// Load trunk weights. Head and attention parameters are not taken from the file.
fn load_pretrained(model: &Classifier, dir: &Path) -> Result<()> {
    let (_, tensors) = nn::load_tensor_dir(dir)?;
    let skip: BTreeSet<String> = model
        .graph
        .nodes
        .iter()
        .filter(|n| n.kind.is_attention() || matches!(n.kind, NodeKind::Head { .. }))
        .map(|n| n.name.clone())
        .collect();
    let layer_of = |name: &str| name.split('.').next().unwrap_or("").to_string();
    let expected: BTreeSet<String> = model
        .store
        .names()
        .into_iter()
        .filter(|n| !skip.contains(&layer_of(n)))
        .collect();
    let found: BTreeSet<String> = tensors
        .keys()
        .filter(|n| layer_of(n) != "head")
        .cloned()
        .collect();
    if expected != found {
        return Err(Error::WeightSchema {
            missing: expected.difference(&found).cloned().collect(),
            extra: found.difference(&expected).cloned().collect(),
        });
    }
    let trunk: BTreeMap<String, Tensor> = tensors.into_iter().filter(|(n, _)| expected.contains(n)).collect();
    model.store.load(&trunk)
}

// ---------------------------------------------------------------------------
// Data

/// Decoded, normalised CHW images keyed by path.
#[derive(Default, Clone)]
pub struct ImageCache {
    images: HashMap<PathBuf, Arc<Vec<f32>>>,
}

impl ImageCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Decode every record not already cached.
    pub fn load(&mut self, records: &[&ImageRecord], side: usize, norm: &Normalization) -> Result<()> {
        let missing: Vec<&ImageRecord> = records
            .iter()
            .filter(|r| !self.images.contains_key(&r.path))
            .copied()
            .collect();
        let loaded: Vec<(PathBuf, Arc<Vec<f32>>)> = missing
            .par_iter()
            .map(|r| {
                let img = util::load_rgb_sized(&r.path, side as u32)
                    .map_err(|e| e.context(format!("record `{}`", r.id)))?;
                Ok((r.path.clone(), Arc::new(image_to_chw(&img, norm))))
            })
            .collect::<Result<_>>()?;
        self.images.extend(loaded);
        Ok(())
    }

    fn get(&self, r: &ImageRecord) -> Result<&Arc<Vec<f32>>> {
        self.images
            .get(&r.path)
            .ok_or_else(|| Error::Precondition(format!("record `{}` was not loaded", r.id)))
    }

    pub fn batch(&self, records: &[&ImageRecord], side: usize) -> Result<Tensor> {
        let mut data = Vec::with_capacity(records.len() * 3 * side * side);
        for r in records {
            data.extend_from_slice(self.get(r)?);
        }
        Ok(Tensor::from_vec(data, (records.len(), 3, side, side), &Device::Cpu)?)
    }
}

pub fn image_to_chw(img: &image::RgbImage, norm: &Normalization) -> Vec<f32> {
    let (w, h) = img.dimensions();
    let plane = (w * h) as usize;
    let mut out = vec![0f32; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + i] = (px[c] as f32 / 255.0 - norm.mean[c]) / norm.std[c];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

pub struct TrainedModel {
    pub model: Classifier,
    pub log: Vec<EpochLog>,
    /// Epoch whose parameters the model holds.
    pub best_epoch: usize,
}

fn label_tensor(records: &[&ImageRecord]) -> Result<Tensor> {
    let labels: Vec<u32> = records.iter().map(|r| r.label.index() as u32).collect();
    Ok(Tensor::from_vec(labels, records.len(), &Device::Cpu)?)
}

fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    let rows: Vec<Vec<f32>> = logits.to_dtype(DType::F32)?.to_vec2()?;
    Ok(rows.iter().map(|r| argmax_lowest(r.iter().map(|&v| v as f64))).collect())
}

/// Index of the maximum, ties resolved to the lowest index.
pub fn argmax_lowest(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, v) in values.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn evaluate_loss(model: &Classifier, cache: &ImageCache, records: &[&ImageRecord], batch: usize) -> Result<(f64, f64)> {
    let side = model.config.input_size;
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    for chunk in records.chunks(batch.max(1)) {
        let x = cache.batch(chunk, side)?;
        let logits = model.forward(&x)?.detach();
        let loss = nn::scalar(&nn::cross_entropy(&logits, &label_tensor(chunk)?)?)?;
        loss_sum += loss * chunk.len() as f64;
        correct += argmax_rows(&logits)?
            .iter()
            .zip(chunk)
            .filter(|(p, r)| **p == r.label.index())
            .count();
    }
    let n = records.len().max(1) as f64;
    Ok((loss_sum / n, correct as f64 / n))
}

/// Fine-tune on `train`, keeping the best-validation parameters when `val` is given.
pub fn fine_tune(
    model: Classifier,
    train: &DatasetManifest,
    val: Option<&DatasetManifest>,
    cfg: &TrainConfig,
    freeze: FreezePolicy,
) -> Result<TrainedModel> {
    let mut cache = ImageCache::new();
    fine_tune_cached(model, train, val, cfg, freeze, &mut cache)
}

pub fn fine_tune_cached(
    model: Classifier,
    train: &DatasetManifest,
    val: Option<&DatasetManifest>,
    cfg: &TrainConfig,
    freeze: FreezePolicy,
    cache: &mut ImageCache,
) -> Result<TrainedModel> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Precondition("training manifest is empty".into()));
    }
    let classes = model.config.num_classes;
    if let Some(r) = train.records().iter().find(|r| r.label.index() >= classes) {
        return Err(Error::Precondition(format!(
            "record `{}` has class index {} outside a {classes}-way head",
            r.id,
            r.label.index()
        )));
    }
    let side = model.config.input_size;
    let norm = model.config.normalization.clone();
    let train_recs: Vec<&ImageRecord> = train.records().iter().collect();
    cache.load(&train_recs, side, &norm)?;
    let val_recs: Vec<&ImageRecord> = val.map(|v| v.records().iter().collect()).unwrap_or_default();
    cache.load(&val_recs, side, &norm)?;

    let trainable: BTreeMap<String, candle_core::Var> = model
        .store
        .vars()
        .into_iter()
        .filter(|(n, _)| model.is_trainable(n, freeze))
        .collect();
    let mut opt = AdamW::new(
        trainable.values().cloned().collect(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            ..ParamsAdamW::default()
        },
    )?;

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, f64, BTreeMap<String, Tensor>)> = None;
    let mut since_best = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order = train_recs.clone();
        order.shuffle(&mut util::rng(util::derive_seed_index(cfg.seed, epoch as u64)));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let x = cache.batch(chunk, side)?;
            let logits = model.forward(&x)?;
            let loss = nn::cross_entropy(&logits, &label_tensor(chunk)?)?;
            let value = nn::scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    component: format!("cross-entropy (epoch {epoch}, batch {bi})"),
                    iteration: epoch,
                });
            }
            opt.backward_step(&loss)?;
            loss_sum += value * chunk.len() as f64;
            correct += argmax_rows(&logits.detach())?
                .iter()
                .zip(chunk)
                .filter(|(p, r)| **p == r.label.index())
                .count();
        }
        let n = order.len() as f64;
        let (val_loss, val_accuracy) = if val_recs.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate_loss(&model, cache, &val_recs, cfg.batch_size)?;
            (Some(l), Some(a))
        };
        log.push(EpochLog {
            epoch,
            train_loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            val_loss,
            val_accuracy,
        });
        log::debug!("epoch {epoch}: {:?}", log.last());

        if let (Some(vl), Some(va)) = (val_loss, val_accuracy) {
            let better = match &best {
                None => true,
                Some((_, ba, bl, _)) => va > *ba || (va == *ba && vl < *bl),
            };
            if better {
                let snap = trainable
                    .iter()
                    .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
                    .collect::<Result<_>>()?;
                best = Some((epoch, va, vl, snap));
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.early_stop_patience.is_some_and(|p| since_best >= p) {
                    break;
                }
            }
        }
    }

    let best_epoch = match best {
        Some((epoch, _, _, snap)) => {
            model.store.load(&snap)?;
            epoch
        }
        None => log.len() - 1,
    };
    Ok(TrainedModel { model, log, best_epoch })
}

// ---------------------------------------------------------------------------
// Inference

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub probabilities: Vec<f64>,
    pub predicted: usize,
}

/// Softmax in f64 with max subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn predict(model: &Classifier, manifest: &DatasetManifest) -> Result<Vec<Prediction>> {
    let mut cache = ImageCache::new();
    predict_cached(model, manifest, &mut cache)
}

pub fn predict_cached(model: &Classifier, manifest: &DatasetManifest, cache: &mut ImageCache) -> Result<Vec<Prediction>> {
    let side = model.config.input_size;
    let recs: Vec<&ImageRecord> = manifest.records().iter().collect();
    cache.load(&recs, side, &model.config.normalization)?;
    let mut out = Vec::with_capacity(recs.len());
    for chunk in recs.chunks(64) {
        let x = cache.batch(chunk, side)?;
        let logits: Vec<Vec<f64>> = model.forward(&x)?.detach().to_dtype(DType::F64)?.to_vec2()?;
        for (r, l) in chunk.iter().zip(logits) {
            let probabilities = softmax(&l);
            let predicted = argmax_lowest(probabilities.iter().copied());
            out.push(Prediction {
                id: r.id.clone(),
                probabilities,
                predicted,
            });
        }
    }
    Ok(out)
}

/// Confusion matrix of predictions against a manifest's labels (matched by id).
pub fn confusion_for(preds: &[Prediction], truth: &DatasetManifest, k: usize) -> Result<ConfusionMatrix> {
    let by_id: HashMap<&str, &Prediction> = preds.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut y_true = Vec::with_capacity(truth.len());
    let mut y_pred = Vec::with_capacity(truth.len());
    for r in truth.records() {
        let p = by_id
            .get(r.id.as_str())
            .ok_or_else(|| Error::Precondition(format!("no prediction for record `{}`", r.id)))?;
        y_true.push(r.label.index());
        y_pred.push(p.predicted);
    }
    metrics::confusion(&y_true, &y_pred, k)
}

// ---------------------------------------------------------------------------
// Cross-validation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub confusion: ConfusionMatrix,
    pub report: MetricReport,
    pub log: Vec<EpochLog>,
}

/// Train and evaluate one model per fold; each test partition holds only real images.
pub fn cross_validate(
    manifest: &DatasetManifest,
    k: usize,
    backbone: &BackboneConfig,
    train_cfg: &TrainConfig,
) -> Result<Vec<FoldResult>> {
    let plan = make_folds(manifest, k, train_cfg.seed)?;
    let mut cache = ImageCache::new();
    let mut results = Vec::with_capacity(k);
    for fold in 0..k {
        let mut run = || -> Result<FoldResult> {
            let (train, test) = plan.fold_manifests(manifest, fold);
            let bcfg = BackboneConfig {
                seed: util::derive_seed_index(backbone.seed, fold as u64),
                ..backbone.clone()
            };
            let tcfg = TrainConfig {
                seed: util::derive_seed_index(train_cfg.seed, fold as u64),
                ..train_cfg.clone()
            };
            let model = build_model(&bcfg)?;
            let trained = fine_tune_cached(model, &train, None, &tcfg, bcfg.freeze_policy, &mut cache)?;
            let preds = predict_cached(&trained.model, &test, &mut cache)?;
            let confusion = confusion_for(&preds, &test, bcfg.num_classes)?;
            let report = MetricReport::from_confusion(&confusion)?;
            Ok(FoldResult {
                fold,
                train_size: train.len(),
                test_size: test.len(),
                confusion,
                report,
                log: trained.log,
            })
        };
        let r = run().map_err(|e| e.context(format!("fold {fold}")))?;
        log::info!(
            "fold {fold}: acc {:.4} BA {:.4}",
            r.report.accuracy,
            r.report.balanced_accuracy
        );
        results.push(r);
    }
    Ok(results)
}
