//! Squeeze-and-excitation and CBAM attention blocks, and their insertion
//! into a classifier backbone graph.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::classifier::{BackboneGraph, Node, NodeKind};
use crate::error::{Error, Result};
use crate::nn::{self, Init, Scope};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeConfig {
    pub reduction_ratio: usize,
}

impl Default for SeConfig {
    fn default() -> Self {
        SeConfig { reduction_ratio: 16 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CbamConfig {
    pub reduction_ratio: usize,
    pub spatial_kernel: usize,
}

impl Default for CbamConfig {
    fn default() -> Self {
        CbamConfig {
            reduction_ratio: 16,
            spatial_kernel: 7,
        }
    }
}

impl CbamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reduction_ratio == 0 {
            return Err(Error::Config("reduction_ratio must be >= 1".into()));
        }
        if self.spatial_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "spatial_kernel must be odd, got {}",
                self.spatial_kernel
            )));
        }
        Ok(())
    }
}

/// MLP hidden width: floor(C / r), at least 1.
pub fn bottleneck(channels: usize, reduction_ratio: usize) -> usize {
    (channels / reduction_ratio.max(1)).max(1)
}

pub fn se_param_count(channels: usize, reduction_ratio: usize) -> usize {
    let h = bottleneck(channels, reduction_ratio);
    2 * channels * h + h + channels
}

pub fn cbam_param_count(channels: usize, cfg: &CbamConfig) -> usize {
    se_param_count(channels, cfg.reduction_ratio) + 2 * cfg.spatial_kernel * cfg.spatial_kernel
}

/// Two-layer bottleneck MLP: C -> h (ReLU) -> C.
#[derive(Clone, Debug)]
pub struct ChannelMlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl ChannelMlp {
    pub fn new(scope: &Scope, channels: usize, reduction_ratio: usize) -> Result<Self> {
        let h = bottleneck(channels, reduction_ratio);
        Ok(ChannelMlp {
            w1: scope.param("fc1.weight", &[h, channels], Init::FanIn(channels))?,
            b1: scope.param("fc1.bias", &[h], Init::FanIn(channels))?,
            w2: scope.param("fc2.weight", &[channels, h], Init::FanIn(h))?,
            b2: scope.param("fc2.bias", &[channels], Init::FanIn(h))?,
        })
    }

    pub fn channels(&self) -> usize {
        self.w2.dims()[0]
    }

    pub fn hidden(&self) -> usize {
        self.w1.dims()[0]
    }

    fn check(&self, channels: usize, reduction_ratio: usize) -> Result<()> {
        let h = bottleneck(channels, reduction_ratio);
        let ok = self.w1.dims() == [h, channels]
            && self.b1.dims() == [h]
            && self.w2.dims() == [channels, h]
            && self.b2.dims() == [channels];
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "attention MLP expects ({channels} -> {h} -> {channels}), params are w1 {:?}, w2 {:?}",
                self.w1.dims(),
                self.w2.dims()
            )))
        }
    }

    /// (B, C) -> (B, C)
    pub fn forward(&self, v: &Tensor) -> Result<Tensor> {
        let h = v.matmul(&self.w1.t()?)?.broadcast_add(&self.b1)?.relu()?;
        Ok(h.matmul(&self.w2.t()?)?.broadcast_add(&self.b2)?)
    }
}

pub type SeParams = ChannelMlp;

fn check_feature_map(x: &Tensor) -> Result<usize> {
    let (_, c, h, w) = x
        .dims4()
        .map_err(|_| Error::Shape(format!("feature map must be (B, C, H, W), got {:?}", x.dims())))?;
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!("empty feature map {:?}", x.dims())));
    }
    Ok(c)
}

/// Per-channel SE gates in (0, 1), shape (B, C).
pub fn se_scales(x: &Tensor, params: &SeParams, cfg: &SeConfig) -> Result<Tensor> {
    let c = check_feature_map(x)?;
    params.check(c, cfg.reduction_ratio)?;
    let squeezed = x.mean(D::Minus1)?.mean(D::Minus1)?;
    nn::sigmoid(&params.forward(&squeezed)?)
}

pub fn se_block(x: &Tensor, params: &SeParams, cfg: &SeConfig) -> Result<Tensor> {
    let s = se_scales(x, params, cfg)?;
    let (b, c, _, _) = x.dims4()?;
    Ok(x.broadcast_mul(&s.reshape((b, c, 1, 1))?)?)
}

#[derive(Clone, Debug)]
pub struct CbamSpatialParams {
    /// (1, 2, k, k), input channels ordered [mean, max].
    pub kernel: Tensor,
}

impl CbamSpatialParams {
    pub fn new(scope: &Scope, spatial_kernel: usize) -> Result<Self> {
        let fan_in = 2 * spatial_kernel * spatial_kernel;
        Ok(CbamSpatialParams {
            kernel: scope.param("weight", &[1, 2, spatial_kernel, spatial_kernel], Init::FanIn(fan_in))?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct CbamParams {
    pub channel: ChannelMlp,
    pub spatial: CbamSpatialParams,
}

impl CbamParams {
    pub fn new(scope: &Scope, channels: usize, cfg: &CbamConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(CbamParams {
            channel: ChannelMlp::new(&scope.pp("channel"), channels, cfg.reduction_ratio)?,
            spatial: CbamSpatialParams::new(&scope.pp("spatial"), cfg.spatial_kernel)?,
        })
    }
}

/// sigmoid(MLP(avgpool x) + MLP(maxpool x)), shape (B, C).
pub fn cbam_channel(x: &Tensor, params: &ChannelMlp, cfg: &CbamConfig) -> Result<Tensor> {
    let c = check_feature_map(x)?;
    params.check(c, cfg.reduction_ratio)?;
    let avg = x.mean(D::Minus1)?.mean(D::Minus1)?;
    let max = x.max(D::Minus1)?.max(D::Minus1)?;
    nn::sigmoid(&(params.forward(&avg)? + params.forward(&max)?)?)
}

/// sigmoid(conv_k([mean_c x; max_c x])) with same padding, shape (B, 1, H, W).
pub fn cbam_spatial(x: &Tensor, params: &CbamSpatialParams, cfg: &CbamConfig) -> Result<Tensor> {
    check_feature_map(x)?;
    cfg.validate()?;
    let k = cfg.spatial_kernel;
    if params.kernel.dims() != [1, 2, k, k] {
        return Err(Error::Shape(format!(
            "spatial attention kernel must be (1, 2, {k}, {k}), got {:?}",
            params.kernel.dims()
        )));
    }
    let pooled = Tensor::cat(&[x.mean_keepdim(1)?, x.max_keepdim(1)?], 1)?;
    nn::sigmoid(&pooled.conv2d(&params.kernel, k / 2, 1, 1, 1)?)
}

pub fn cbam_block(x: &Tensor, params: &CbamParams, cfg: &CbamConfig) -> Result<Tensor> {
    let (b, c, _, _) = x.dims4()?;
    let w = cbam_channel(x, &params.channel, cfg)?;
    let refined = x.broadcast_mul(&w.reshape((b, c, 1, 1))?)?;
    let map = cbam_spatial(&refined, &params.spatial, cfg)?;
    Ok(refined.broadcast_mul(&map)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AttentionVariant {
    #[default]
    None,
    Se,
    Cbam,
}

/// Trainer-facing attention settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionConfig {
    pub variant: AttentionVariant,
    pub reduction_ratio: usize,
    /// Insertion sites; empty means the backbone's default sites.
    pub sites: Vec<String>,
    pub spatial_kernel: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            variant: AttentionVariant::None,
            reduction_ratio: 16,
            sites: Vec::new(),
            spatial_kernel: 7,
        }
    }
}

/// Interpose an attention node after each named site of the graph.
pub fn insert_attention(
    graph: BackboneGraph,
    variant: AttentionVariant,
    sites: &[String],
    cfg: &AttentionConfig,
) -> Result<BackboneGraph> {
    for s in sites {
        if !graph.nodes.iter().any(|n| &n.name == s) {
            return Err(Error::UnknownSite(s.clone()));
        }
    }
    if variant == AttentionVariant::None {
        return Ok(graph);
    }
    if cfg.reduction_ratio == 0 {
        return Err(Error::Config("attention.reduction_ratio must be >= 1".into()));
    }
    let mut nodes = Vec::with_capacity(graph.nodes.len() + sites.len());
    let mut channels = graph.in_channels;
    for node in graph.nodes {
        channels = node.kind.out_channels(channels);
        let insert = sites.contains(&node.name);
        let name = node.name.clone();
        nodes.push(node);
        if insert {
            let kind = match variant {
                AttentionVariant::Se => NodeKind::Se {
                    channels,
                    reduction_ratio: cfg.reduction_ratio,
                },
                AttentionVariant::Cbam => {
                    let c = CbamConfig {
                        reduction_ratio: cfg.reduction_ratio,
                        spatial_kernel: cfg.spatial_kernel,
                    };
                    c.validate()?;
                    NodeKind::Cbam { channels, cfg: c }
                }
                AttentionVariant::None => unreachable!(),
            };
            let prefix = match variant {
                AttentionVariant::Se => "se",
                _ => "cbam",
            };
            nodes.push(Node {
                name: format!("{name}_{prefix}"),
                kind,
            });
        }
    }
    Ok(BackboneGraph { nodes, ..graph })
}
