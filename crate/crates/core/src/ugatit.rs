//! Unpaired image translation (U-GAT-IT style) from NORMAL scans to one rare
//! class: ResNet generators with CAM attention and AdaLIN decoders, global and
//! local discriminators with CAM heads, least-squares adversarial loss.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use image::RgbImage;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentationSpec};
use crate::dataset::{ClassLabel, DatasetManifest, ImageRecord, Provenance};
use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, Init, Linear, ParamStore, Scope};
use crate::util;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub adversarial: f64,
    pub cycle: f64,
    pub identity: f64,
    pub cam: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            adversarial: 1.0,
            cycle: 10.0,
            identity: 10.0,
            cam: 1000.0,
        }
    }
}

/// Network widths and depths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// Base generator width.
    pub ngf: usize,
    /// Base discriminator width.
    pub ndf: usize,
    /// Residual blocks in each of the encoder and decoder.
    pub res_blocks: usize,
    pub global_layers: usize,
    pub local_layers: usize,
    /// Derive AdaLIN gamma/beta from pooled rather than flattened features.
    pub light: bool,
}

impl Architecture {
    pub fn light() -> Self {
        Architecture {
            ngf: 4,
            ndf: 8,
            res_blocks: 2,
            global_layers: 4,
            local_layers: 3,
            light: true,
        }
    }

    pub fn paper() -> Self {
        Architecture {
            ngf: 64,
            ndf: 64,
            res_blocks: 4,
            global_layers: 7,
            local_layers: 5,
            light: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TranslationConfig {
    pub image_size: usize,
    pub channels: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub loss_weights: LossWeights,
    pub arch: Architecture,
    /// Write a checkpoint every this many iterations when training to a directory.
    pub snapshot_every: Option<usize>,
    pub seed: u64,
}

impl Default for TranslationConfig {
    fn default() -> Self {
        Self::light(32)
    }
}

impl TranslationConfig {
    /// Desk preset for 32-64 px images.
    pub fn light(image_size: usize) -> Self {
        TranslationConfig {
            image_size,
            channels: 3,
            iterations: 200,
            batch_size: 1,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            loss_weights: LossWeights::default(),
            arch: Architecture::light(),
            snapshot_every: None,
            seed: 0,
        }
    }

    /// Full-size preset: 256 px, 200k iterations.
    pub fn paper() -> Self {
        TranslationConfig {
            image_size: 256,
            iterations: 200_000,
            arch: Architecture::paper(),
            snapshot_every: Some(10_000),
            ..Self::light(256)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.batch_size == 0 || self.channels == 0 {
            return Err(Error::Config("batch_size and channels must be >= 1".into()));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of 4",
                self.image_size
            )));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("learning_rate must be positive, weight_decay >= 0".into()));
        }
        let w = &self.loss_weights;
        if [w.adversarial, w.cycle, w.identity, w.cam].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        let a = &self.arch;
        if a.ngf == 0 || a.ndf == 0 || a.global_layers < 2 || a.local_layers < 2 {
            return Err(Error::Config("architecture widths >= 1 and discriminator depth >= 2 required".into()));
        }
        for layers in [a.global_layers, a.local_layers] {
            let side = self.image_size >> (layers - 1);
            if side < 4 || !self.image_size.is_multiple_of(1 << (layers - 1)) {
                return Err(Error::Config(format!(
                    "a {layers}-layer discriminator needs image_size divisible by {} with at least 4 px left",
                    1 << (layers - 1)
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Building blocks

/// `gamma * (rho * IN(x) + (1 - rho) * LN(x)) + beta`.
///
/// `gamma`/`beta` are (B, C) or (C); `rho` is (C).
pub fn adalin(x: &Tensor, gamma: &Tensor, beta: &Tensor, rho: &Tensor) -> Result<Tensor> {
    let (b, c, _, _) = x
        .dims4()
        .map_err(|_| Error::Shape(format!("adalin expects (B, C, H, W), got {:?}", x.dims())))?;
    let affine = |t: &Tensor, what: &str| -> Result<Tensor> {
        match t.dims() {
            [n] if *n == c => Ok(t.reshape((1, c, 1, 1))?),
            [bb, n] if *bb == b && *n == c => Ok(t.reshape((b, c, 1, 1))?),
            d => Err(Error::Shape(format!("adalin {what} has shape {d:?}, expected ({b}, {c}) or ({c})"))),
        }
    };
    let gamma = affine(gamma, "gamma")?;
    let beta = affine(beta, "beta")?;
    if rho.dims() != [c] {
        return Err(Error::Shape(format!("adalin rho has shape {:?}, expected ({c})", rho.dims())));
    }
    let rho = rho.reshape((1, c, 1, 1))?;
    let mixed = nn::instance_norm(x)?
        .broadcast_mul(&rho)?
        .add(&nn::layer_norm(x)?.broadcast_mul(&rho.affine(-1.0, 1.0)?)?)?;
    Ok(mixed.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
}

#[derive(Clone, Debug)]
pub struct CamOutput {
    /// features[c] * w[c], same shape as the input.
    pub weighted_features: Tensor,
    /// Auxiliary classifier score from globally average-pooled features, (B).
    pub logit: Tensor,
    /// sum_c w[c] * features[c], (B, H, W), unnormalised.
    pub attention_map: Tensor,
}

/// Class-activation reweighting of (B, C, H, W) features by a C-vector.
pub fn cam_attention(features: &Tensor, weights: &Tensor) -> Result<CamOutput> {
    let (_, c, _, _) = features
        .dims4()
        .map_err(|_| Error::Shape(format!("cam_attention expects (B, C, H, W), got {:?}", features.dims())))?;
    let w = weights.flatten_all()?;
    if w.dims() != [c] {
        return Err(Error::Shape(format!(
            "cam_attention weights have {} entries, features have {c} channels",
            w.elem_count()
        )));
    }
    let w4 = w.reshape((1, c, 1, 1))?;
    let weighted_features = features.broadcast_mul(&w4)?;
    let pooled = features.mean(3)?.mean(2)?;
    let logit = pooled.broadcast_mul(&w.reshape((1, c))?)?.sum(1)?;
    let attention_map = weighted_features.sum(1)?;
    Ok(CamOutput {
        weighted_features,
        logit,
        attention_map,
    })
}

/// Both CAM branches (average- and max-pooled) fused by a 1x1 convolution.
#[derive(Clone, Debug)]
struct CamHead {
    gap_w: Tensor,
    gmp_w: Tensor,
    fuse: Conv2d,
}

impl CamHead {
    fn new(scope: &Scope, c: usize) -> Result<Self> {
        Ok(CamHead {
            gap_w: scope.param("gap_fc.weight", &[1, c], Init::FanIn(c))?,
            gmp_w: scope.param("gmp_fc.weight", &[1, c], Init::FanIn(c))?,
            fuse: Conv2d::new(&scope.pp("fuse"), 2 * c, c, (1, 1), 1, (0, 0), true)?,
        })
    }

    /// Returns fused features (before activation) and (B, 2) CAM logits.
    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, c, _, _) = x.dims4()?;
        let gap = cam_attention(x, &self.gap_w)?;
        let gmp_w = self.gmp_w.flatten_all()?;
        let x_gmp = x.broadcast_mul(&gmp_w.reshape((1, c, 1, 1))?)?;
        let gmp_logit = x.max(3)?.max(2)?.broadcast_mul(&gmp_w.reshape((1, c))?)?.sum(1)?;
        let logits = Tensor::stack(&[gap.logit, gmp_logit], 1)?.reshape((b, 2))?;
        let fused = self.fuse.forward(&Tensor::cat(&[gap.weighted_features, x_gmp], 1)?)?;
        Ok((fused, logits))
    }
}

fn reflect_conv(x: &Tensor, conv: &Conv2d, pad: usize) -> Result<Tensor> {
    conv.forward(&nn::reflect_pad(x, pad)?)
}

#[derive(Clone, Debug)]
struct ResBlock {
    c1: Conv2d,
    c2: Conv2d,
}

impl ResBlock {
    fn new(scope: &Scope, c: usize) -> Result<Self> {
        Ok(ResBlock {
            c1: Conv2d::new(&scope.pp("conv1"), c, c, (3, 3), 1, (0, 0), false)?,
            c2: Conv2d::new(&scope.pp("conv2"), c, c, (3, 3), 1, (0, 0), false)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = nn::instance_norm(&reflect_conv(x, &self.c1, 1)?)?.relu()?;
        let y = nn::instance_norm(&reflect_conv(&y, &self.c2, 1)?)?;
        Ok((x + y)?)
    }
}

#[derive(Clone, Debug)]
struct AdaResBlock {
    c1: Conv2d,
    rho1: Tensor,
    c2: Conv2d,
    rho2: Tensor,
}

impl AdaResBlock {
    fn new(scope: &Scope, c: usize) -> Result<Self> {
        Ok(AdaResBlock {
            c1: Conv2d::new(&scope.pp("conv1"), c, c, (3, 3), 1, (0, 0), true)?,
            rho1: scope.param("norm1.rho", &[c], Init::Const(0.9))?,
            c2: Conv2d::new(&scope.pp("conv2"), c, c, (3, 3), 1, (0, 0), true)?,
            rho2: scope.param("norm2.rho", &[c], Init::Const(0.9))?,
        })
    }

    fn forward(&self, x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        let y = adalin(&reflect_conv(x, &self.c1, 1)?, gamma, beta, &self.rho1)?.relu()?;
        let y = adalin(&reflect_conv(&y, &self.c2, 1)?, gamma, beta, &self.rho2)?;
        Ok((x + y)?)
    }
}

/// Layer-instance normalisation with learned per-channel affine parameters.
#[derive(Clone, Debug)]
struct Iln {
    rho: Tensor,
    gamma: Tensor,
    beta: Tensor,
}

impl Iln {
    fn new(scope: &Scope, c: usize) -> Result<Self> {
        Ok(Iln {
            rho: scope.param("rho", &[c], Init::Zeros)?,
            gamma: scope.param("gamma", &[c], Init::Const(1.0))?,
            beta: scope.param("beta", &[c], Init::Zeros)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        adalin(x, &self.gamma, &self.beta, &self.rho)
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    stem: Conv2d,
    down: Vec<Conv2d>,
    enc: Vec<ResBlock>,
    cam: CamHead,
    mlp: Vec<Linear>,
    gamma: Linear,
    beta: Linear,
    dec: Vec<AdaResBlock>,
    up: Vec<(Conv2d, Iln)>,
    out: Conv2d,
    light: bool,
}

pub struct GeneratorOutput {
    pub image: Tensor,
    pub cam_logit: Tensor,
    pub heatmap: Tensor,
}

const DOWNSAMPLINGS: usize = 2;

impl Generator {
    pub fn new(scope: &Scope, cfg: &TranslationConfig) -> Result<Self> {
        let a = &cfg.arch;
        let ch = cfg.channels;
        let stem = Conv2d::new(&scope.pp("stem"), ch, a.ngf, (7, 7), 1, (0, 0), false)?;
        let mut c = a.ngf;
        let mut down = Vec::new();
        for i in 0..DOWNSAMPLINGS {
            down.push(Conv2d::new(&scope.pp(&format!("down{i}")), c, c * 2, (3, 3), 2, (0, 0), false)?);
            c *= 2;
        }
        let enc = (0..a.res_blocks)
            .map(|i| ResBlock::new(&scope.pp(&format!("enc{i}")), c))
            .collect::<Result<_>>()?;
        let cam = CamHead::new(&scope.pp("cam"), c)?;
        let side = cfg.image_size >> DOWNSAMPLINGS;
        let mlp_in = if a.light { c } else { c * side * side };
        let mlp = vec![
            Linear::new(&scope.pp("mlp0"), mlp_in, c, false)?,
            Linear::new(&scope.pp("mlp1"), c, c, false)?,
        ];
        let gamma = Linear::new(&scope.pp("gamma"), c, c, false)?;
        let beta = Linear::new(&scope.pp("beta"), c, c, false)?;
        let dec = (0..a.res_blocks)
            .map(|i| AdaResBlock::new(&scope.pp(&format!("dec{i}")), c))
            .collect::<Result<_>>()?;
        let mut up = Vec::new();
        for i in 0..DOWNSAMPLINGS {
            let s = scope.pp(&format!("up{i}"));
            up.push((
                Conv2d::new(&s.pp("conv"), c, c / 2, (3, 3), 1, (0, 0), false)?,
                Iln::new(&s.pp("norm"), c / 2)?,
            ));
            c /= 2;
        }
        let out = Conv2d::new(&scope.pp("out"), c, ch, (7, 7), 1, (0, 0), false)?;
        Ok(Generator {
            stem,
            down,
            enc,
            cam,
            mlp,
            gamma,
            beta,
            dec,
            up,
            out,
            light: a.light,
        })
    }

    /// x in [-1, 1], (B, C, S, S).
    pub fn forward(&self, x: &Tensor) -> Result<GeneratorOutput> {
        let mut h = nn::instance_norm(&reflect_conv(x, &self.stem, 3)?)?.relu()?;
        for d in &self.down {
            h = nn::instance_norm(&reflect_conv(&h, d, 1)?)?.relu()?;
        }
        for b in &self.enc {
            h = b.forward(&h)?;
        }
        let (fused, cam_logit) = self.cam.forward(&h)?;
        let h = fused.relu()?;
        let heatmap = h.sum_keepdim(1)?;
        let pooled = if self.light {
            h.mean(3)?.mean(2)?
        } else {
            h.flatten_from(1)?
        };
        let mut z = pooled;
        for l in &self.mlp {
            z = l.forward(&z)?.relu()?;
        }
        let gamma = self.gamma.forward(&z)?;
        let beta = self.beta.forward(&z)?;
        let mut h = h;
        for b in &self.dec {
            h = b.forward(&h, &gamma, &beta)?;
        }
        for (conv, norm) in &self.up {
            let (_, _, hh, ww) = h.dims4()?;
            let up = h.upsample_nearest2d(hh * 2, ww * 2)?;
            h = norm.forward(&reflect_conv(&up, conv, 1)?)?.relu()?;
        }
        let image = reflect_conv(&h, &self.out, 3)?.tanh()?;
        Ok(GeneratorOutput {
            image,
            cam_logit,
            heatmap,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    convs: Vec<Conv2d>,
    cam: CamHead,
    out: Conv2d,
}

impl Discriminator {
    pub fn new(scope: &Scope, in_c: usize, ndf: usize, layers: usize) -> Result<Self> {
        let mut convs = vec![Conv2d::new(&scope.pp("conv0"), in_c, ndf, (4, 4), 2, (0, 0), true)?];
        let mut c = ndf;
        for i in 1..layers - 1 {
            convs.push(Conv2d::new(&scope.pp(&format!("conv{i}")), c, c * 2, (4, 4), 2, (0, 0), true)?);
            c *= 2;
        }
        convs.push(Conv2d::new(
            &scope.pp(&format!("conv{}", layers - 1)),
            c,
            c * 2,
            (4, 4),
            1,
            (0, 0),
            true,
        )?);
        c *= 2;
        Ok(Discriminator {
            convs,
            cam: CamHead::new(&scope.pp("cam"), c)?,
            out: Conv2d::new(&scope.pp("out"), c, 1, (4, 4), 1, (0, 0), false)?,
        })
    }

    /// Patch logits (B, 1, h, w) and CAM logits (B, 2).
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut h = x.clone();
        for c in &self.convs {
            h = nn::leaky_relu(&reflect_conv(&h, c, 1)?, 0.2)?;
        }
        let (fused, cam_logit) = self.cam.forward(&h)?;
        let h = nn::leaky_relu(&fused, 0.2)?;
        Ok((reflect_conv(&h, &self.out, 1)?, cam_logit))
    }
}

// ---------------------------------------------------------------------------
// Model and training

pub const GEN_AB: &str = "gen_ab";
pub const GEN_BA: &str = "gen_ba";
pub const DIS_GA: &str = "dis_ga";
pub const DIS_LA: &str = "dis_la";
pub const DIS_GB: &str = "dis_gb";
pub const DIS_LB: &str = "dis_lb";

/// Both generators and all four discriminators over one parameter store.
pub struct TranslationModel {
    pub config: TranslationConfig,
    store: ParamStore,
    pub gen_ab: Generator,
    pub gen_ba: Generator,
    pub dis_ga: Discriminator,
    pub dis_la: Discriminator,
    pub dis_gb: Discriminator,
    pub dis_lb: Discriminator,
}

fn is_generator(name: &str) -> bool {
    name.starts_with("gen_")
}

fn is_rho(name: &str) -> bool {
    name.ends_with(".rho")
}

impl TranslationModel {
    pub fn new(config: &TranslationConfig) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(util::derive_seed(config.seed, "init"), DType::F32);
        let root = store.root();
        let a = &config.arch;
        let ch = config.channels;
        Ok(TranslationModel {
            gen_ab: Generator::new(&root.pp(GEN_AB), config)?,
            gen_ba: Generator::new(&root.pp(GEN_BA), config)?,
            dis_ga: Discriminator::new(&root.pp(DIS_GA), ch, a.ndf, a.global_layers)?,
            dis_la: Discriminator::new(&root.pp(DIS_LA), ch, a.ndf, a.local_layers)?,
            dis_gb: Discriminator::new(&root.pp(DIS_GB), ch, a.ndf, a.global_layers)?,
            dis_lb: Discriminator::new(&root.pp(DIS_LB), ch, a.ndf, a.local_layers)?,
            config: config.clone(),
            store,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn generator_vars(&self) -> Vec<Var> {
        self.store.vars_where(is_generator)
    }

    pub fn discriminator_vars(&self) -> Vec<Var> {
        self.store.vars_where(|n| !is_generator(n))
    }

    pub fn rho_values(&self) -> Result<Vec<f32>> {
        let mut out = Vec::new();
        for v in self.store.vars_where(is_rho) {
            out.extend(v.as_tensor().flatten_all()?.to_vec1::<f32>()?);
        }
        Ok(out)
    }

    fn clamp_rho(&self) -> Result<()> {
        for v in self.store.vars_where(is_rho) {
            let clamped = v.as_tensor().clamp(0f32, 1f32)?;
            v.set(&clamped)?;
        }
        Ok(())
    }

    /// Set every discriminator parameter to zero.
    pub fn zero_discriminators(&self) -> Result<()> {
        for v in self.discriminator_vars() {
            v.set(&v.as_tensor().zeros_like()?)?;
        }
        Ok(())
    }

    /// A → B translation of [-1, 1] images.
    pub fn translate(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.gen_ab.forward(x)?.image.detach())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    /// Weighted discriminator objective.
    pub d_total: f64,
    /// Mean of the real-target least-squares terms.
    pub d_real: f64,
    /// Mean of the fake-target least-squares terms.
    pub d_fake: f64,
    /// Weighted generator objective.
    pub g_total: f64,
    /// Sum of the eight unweighted generator adversarial terms.
    pub g_adv: f64,
    pub g_cycle_a: f64,
    pub g_cycle_b: f64,
    pub g_identity_a: f64,
    pub g_identity_b: f64,
    pub g_cam: f64,
}

impl LossRecord {
    fn components(&self) -> [(&'static str, f64); 10] {
        [
            ("d_total", self.d_total),
            ("d_real", self.d_real),
            ("d_fake", self.d_fake),
            ("g_total", self.g_total),
            ("g_adv", self.g_adv),
            ("g_cycle_a", self.g_cycle_a),
            ("g_cycle_b", self.g_cycle_b),
            ("g_identity_a", self.g_identity_a),
            ("g_identity_b", self.g_identity_b),
            ("g_cam", self.g_cam),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.components().iter().all(|(_, v)| v.is_finite())
    }
}

/// Optimizers for one training run.
pub struct TrainingState {
    pub model: TranslationModel,
    opt_g: AdamW,
    opt_d: AdamW,
    pub iteration: usize,
}

impl TrainingState {
    pub fn new(model: TranslationModel) -> Result<Self> {
        let params = ParamsAdamW {
            lr: model.config.learning_rate,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: model.config.weight_decay,
        };
        Ok(TrainingState {
            opt_g: AdamW::new(model.generator_vars(), params.clone())?,
            opt_d: AdamW::new(model.discriminator_vars(), params)?,
            model,
            iteration: 0,
        })
    }
}

fn lsgan_pair(real: &(Tensor, Tensor), fake: &(Tensor, Tensor)) -> Result<(Tensor, Tensor)> {
    let real_loss = (nn::mse_to(&real.0, 1.0)? + nn::mse_to(&real.1, 1.0)?)?;
    let fake_loss = (nn::mse_to(&fake.0, 0.0)? + nn::mse_to(&fake.1, 0.0)?)?;
    Ok((real_loss, fake_loss))
}

fn check_finite(rec: &LossRecord) -> Result<()> {
    if let Some((name, _)) = rec.components().iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite {
            component: (*name).to_string(),
            iteration: rec.iteration,
        });
    }
    Ok(())
}

/// Cycle losses |G_BA(G_AB(a)) - a| and |G_AB(G_BA(b)) - b| for the current parameters.
pub fn cycle_losses(model: &TranslationModel, a: &Tensor, b: &Tensor) -> Result<(f64, f64)> {
    let ab = model.gen_ab.forward(a)?.image;
    let aba = model.gen_ba.forward(&ab)?.image;
    let ba = model.gen_ba.forward(b)?.image;
    let bab = model.gen_ab.forward(&ba)?.image;
    Ok((nn::scalar(&nn::l1(&aba, a)?)?, nn::scalar(&nn::l1(&bab, b)?)?))
}

/// One discriminator update followed by one generator update.
pub fn training_step(state: &mut TrainingState, batch_a: &Tensor, batch_b: &Tensor) -> Result<LossRecord> {
    let m = &state.model;
    let cfg = &m.config;
    let expect = [cfg.channels, cfg.image_size, cfg.image_size];
    for (name, t) in [("batch_a", batch_a), ("batch_b", batch_b)] {
        let d = t.dims();
        if d.len() != 4 || d[0] == 0 || d[1..] != expect {
            return Err(Error::Shape(format!(
                "{name} has shape {d:?}, expected (B >= 1, {}, {}, {})",
                expect[0], expect[1], expect[2]
            )));
        }
    }
    let w = cfg.loss_weights.clone();
    let mut rec = LossRecord {
        iteration: state.iteration,
        ..LossRecord::default()
    };

    // Discriminators
    let fake_ab = m.gen_ab.forward(batch_a)?.image.detach();
    let fake_ba = m.gen_ba.forward(batch_b)?.image.detach();
    let (ga_real, ga_fake) = lsgan_pair(&m.dis_ga.forward(batch_a)?, &m.dis_ga.forward(&fake_ba)?)?;
    let (la_real, la_fake) = lsgan_pair(&m.dis_la.forward(batch_a)?, &m.dis_la.forward(&fake_ba)?)?;
    let (gb_real, gb_fake) = lsgan_pair(&m.dis_gb.forward(batch_b)?, &m.dis_gb.forward(&fake_ab)?)?;
    let (lb_real, lb_fake) = lsgan_pair(&m.dis_lb.forward(batch_b)?, &m.dis_lb.forward(&fake_ab)?)?;
    let real = (((ga_real + la_real)? + gb_real)? + lb_real)?;
    let fake = (((ga_fake + la_fake)? + gb_fake)? + lb_fake)?;
    // Each pair sums a patch term and a CAM term: 8 terms per side.
    rec.d_real = nn::scalar(&real)? / 8.0;
    rec.d_fake = nn::scalar(&fake)? / 8.0;
    let d_loss = ((real + fake)? * w.adversarial)?;
    rec.d_total = nn::scalar(&d_loss)?;
    if !rec.d_total.is_finite() {
        return Err(Error::NonFinite {
            component: "d_total".into(),
            iteration: state.iteration,
        });
    }
    state.opt_d.backward_step(&d_loss)?;

    // Generators
    let m = &state.model;
    let ab = m.gen_ab.forward(batch_a)?;
    let ba = m.gen_ba.forward(batch_b)?;
    let aba = m.gen_ba.forward(&ab.image)?.image;
    let bab = m.gen_ab.forward(&ba.image)?.image;
    let aa = m.gen_ba.forward(batch_a)?;
    let bb = m.gen_ab.forward(batch_b)?;

    let adv = |d: &Discriminator, x: &Tensor| -> Result<Tensor> {
        let (patch, cam) = d.forward(x)?;
        Ok((nn::mse_to(&patch, 1.0)? + nn::mse_to(&cam, 1.0)?)?)
    };
    let g_adv = (((adv(&m.dis_ga, &ba.image)? + adv(&m.dis_la, &ba.image)?)? + adv(&m.dis_gb, &ab.image)?)?
        + adv(&m.dis_lb, &ab.image)?)?;
    let cyc_a = nn::l1(&aba, batch_a)?;
    let cyc_b = nn::l1(&bab, batch_b)?;
    let id_a = nn::l1(&aa.image, batch_a)?;
    let id_b = nn::l1(&bb.image, batch_b)?;
    let cam = (((nn::bce_with_logits_to(&ba.cam_logit, 1.0)? + nn::bce_with_logits_to(&aa.cam_logit, 0.0)?)?
        + nn::bce_with_logits_to(&ab.cam_logit, 1.0)?)?
        + nn::bce_with_logits_to(&bb.cam_logit, 0.0)?)?;

    rec.g_adv = nn::scalar(&g_adv)?;
    rec.g_cycle_a = nn::scalar(&cyc_a)?;
    rec.g_cycle_b = nn::scalar(&cyc_b)?;
    rec.g_identity_a = nn::scalar(&id_a)?;
    rec.g_identity_b = nn::scalar(&id_b)?;
    rec.g_cam = nn::scalar(&cam)?;
    let g_loss = ((((g_adv * w.adversarial)? + ((cyc_a + cyc_b)? * w.cycle)?)? + ((id_a + id_b)? * w.identity)?)?
        + (cam * w.cam)?)?;
    rec.g_total = nn::scalar(&g_loss)?;
    check_finite(&rec)?;
    state.opt_g.backward_step(&g_loss)?;
    state.model.clamp_rho()?;
    state.iteration += 1;
    Ok(rec)
}

// ---------------------------------------------------------------------------
// Data

fn to_unit_range(img: &RgbImage) -> Vec<f32> {
    let (w, h) = img.dimensions();
    let plane = (w * h) as usize;
    let mut out = vec![0f32; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + i] = px[c] as f32 / 127.5 - 1.0;
        }
    }
    out
}

/// Map a (3, S, S) tensor in [-1, 1] to an 8-bit image.
pub fn to_image(t: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let v: Vec<f32> = t.flatten_all()?.to_vec1()?;
    let plane = h * w;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let px = |c: usize| ((v[c * plane + i] + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
        image::Rgb([px(0), px(1), px(2)])
    }))
}

fn load_domain(records: &[ImageRecord], side: usize) -> Result<Vec<Vec<f32>>> {
    records
        .par_iter()
        .map(|r| {
            let img = util::load_rgb_sized(&r.path, side as u32).map_err(|e| e.context(format!("record `{}`", r.id)))?;
            Ok(to_unit_range(&img))
        })
        .collect()
}

fn stack(images: &[&Vec<f32>], side: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * 3 * side * side);
    for i in images {
        data.extend_from_slice(i);
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, side, side), &Device::Cpu)?)
}

// ---------------------------------------------------------------------------
// Checkpoints

pub struct TranslationCheckpoint {
    pub model: TranslationModel,
    pub iteration: usize,
    pub loss_history: Vec<LossRecord>,
    pub target_class: ClassLabel,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    config: TranslationConfig,
    iteration: usize,
    target_class: ClassLabel,
}

const LOSS_HISTORY_FILE: &str = "loss_history.json";

impl TranslationCheckpoint {
    pub fn config(&self) -> &TranslationConfig {
        &self.model.config
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            kind: "translation".into(),
            config: self.model.config.clone(),
            iteration: self.iteration,
            target_class: self.target_class,
        };
        nn::save_tensor_dir(dir, serde_json::to_value(meta)?, &self.model.store.snapshot()?)?;
        util::write_json(&dir.join(LOSS_HISTORY_FILE), &self.loss_history)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (header, tensors) = nn::load_tensor_dir(dir)?;
        let meta: CheckpointMeta = serde_json::from_value(header.meta)?;
        if meta.kind != "translation" {
            return Err(Error::Config(format!("{} is not a translation checkpoint", dir.display())));
        }
        let model = TranslationModel::new(&meta.config)?;
        let expected: std::collections::BTreeSet<String> = model.store.names().into_iter().collect();
        let found: std::collections::BTreeSet<String> = tensors.keys().cloned().collect();
        if expected != found {
            return Err(Error::WeightSchema {
                missing: expected.difference(&found).cloned().collect(),
                extra: found.difference(&expected).cloned().collect(),
            });
        }
        model.store.load(&tensors)?;
        let loss_history: Vec<LossRecord> = util::read_json(&dir.join(LOSS_HISTORY_FILE))?;
        if loss_history.len() != meta.iteration {
            return Err(Error::InvalidManifest(format!(
                "checkpoint records {} losses for {} iterations",
                loss_history.len(),
                meta.iteration
            )));
        }
        Ok(TranslationCheckpoint {
            model,
            iteration: meta.iteration,
            loss_history,
            target_class: meta.target_class,
        })
    }
}

/// Train A (NORMAL) → B (one rare class). With `out`, the final checkpoint and
/// periodic snapshots (`snapshots/iter_NNNNNN`) are written there.
pub fn train(
    domain_a: &DatasetManifest,
    domain_b: &DatasetManifest,
    config: &TranslationConfig,
    out: Option<&Path>,
) -> Result<TranslationCheckpoint> {
    train_observed(domain_a, domain_b, config, out, &mut |_, _| Ok(()))
}

/// [`train`], calling `observer` after every iteration.
pub fn train_observed(
    domain_a: &DatasetManifest,
    domain_b: &DatasetManifest,
    config: &TranslationConfig,
    out: Option<&Path>,
    observer: &mut dyn FnMut(&TrainingState, &LossRecord) -> Result<()>,
) -> Result<TranslationCheckpoint> {
    config.validate()?;
    if domain_a.is_empty() || domain_b.is_empty() {
        return Err(Error::Precondition("both translation domains must be nonempty".into()));
    }
    let target = domain_b.records()[0].label;
    if domain_b.records().iter().any(|r| r.label != target) {
        return Err(Error::Precondition("domain B must contain a single class".into()));
    }
    let side = config.image_size;
    let imgs_a = load_domain(domain_a.records(), side)?;
    let imgs_b = load_domain(domain_b.records(), side)?;
    let mut state = TrainingState::new(TranslationModel::new(config)?)?;
    let mut rng = util::rng(util::derive_seed(config.seed, "batches"));
    let mut history = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let pick = |rng: &mut rand_chacha::ChaCha8Rng, pool: &'_ Vec<Vec<f32>>| -> Vec<usize> {
            (0..config.batch_size).map(|_| rng.random_range(0..pool.len())).collect()
        };
        let ia = pick(&mut rng, &imgs_a);
        let ib = pick(&mut rng, &imgs_b);
        let a = stack(&ia.iter().map(|&i| &imgs_a[i]).collect::<Vec<_>>(), side)?;
        let b = stack(&ib.iter().map(|&i| &imgs_b[i]).collect::<Vec<_>>(), side)?;
        let rec = training_step(&mut state, &a, &b).map_err(|e| e.context(format!("iteration {it}")))?;
        if it % 50 == 0 {
            log::debug!("{target} it {it}: d {:.4} g {:.4} adv {:.4}", rec.d_total, rec.g_total, rec.g_adv);
        }
        observer(&state, &rec)?;
        history.push(rec);
        if let (Some(dir), Some(every)) = (out, config.snapshot_every) {
            if every > 0 && (it + 1) % every == 0 && it + 1 < config.iterations {
                let snap = TranslationCheckpointRef {
                    model: &state.model,
                    iteration: it + 1,
                    loss_history: &history,
                    target_class: target,
                };
                snap.save(&dir.join("snapshots").join(format!("iter_{:06}", it + 1)))?;
            }
        }
    }
    let ckpt = TranslationCheckpoint {
        model: state.model,
        iteration: config.iterations,
        loss_history: history,
        target_class: target,
    };
    if let Some(dir) = out {
        ckpt.save(dir)?;
    }
    Ok(ckpt)
}

struct TranslationCheckpointRef<'a> {
    model: &'a TranslationModel,
    iteration: usize,
    loss_history: &'a [LossRecord],
    target_class: ClassLabel,
}

impl TranslationCheckpointRef<'_> {
    fn save(&self, dir: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            kind: "translation".into(),
            config: self.model.config.clone(),
            iteration: self.iteration,
            target_class: self.target_class,
        };
        nn::save_tensor_dir(dir, serde_json::to_value(meta)?, &self.model.store.snapshot()?)?;
        util::write_json(&dir.join(LOSS_HISTORY_FILE), &self.loss_history)
    }
}

// ---------------------------------------------------------------------------
// Generation

pub fn generated_id(label: ClassLabel, seed: u64, index: usize) -> String {
    format!("gen:{}:{seed:016x}:{index:06}", label.name())
}

pub fn generated_path(image_dir: &Path, label: ClassLabel, seed: u64, index: usize) -> PathBuf {
    image_dir
        .join(label.name())
        .join(format!("gen_{seed:016x}_{index:06}.png"))
}

/// Translate `n` NORMAL images into the checkpoint's class and write them to `image_dir`.
///
/// Sources are drawn without replacement when `n <= |source|`, otherwise with
/// replacement. Each source is jittered with the default augmentation before
/// translation so repeated sources produce distinct outputs.
pub fn generate(
    checkpoint: &TranslationCheckpoint,
    source: &DatasetManifest,
    n: usize,
    seed: u64,
    image_dir: &Path,
) -> Result<DatasetManifest> {
    if source.is_empty() {
        return Err(Error::Precondition("generation source manifest is empty".into()));
    }
    if n == 0 {
        return Err(Error::Precondition("generation count must be >= 1".into()));
    }
    let label = checkpoint.target_class;
    let side = checkpoint.config().image_size;
    let recs = source.records();
    let mut rng = util::rng(util::derive_seed(seed, "sources"));
    let picks: Vec<usize> = if n <= recs.len() {
        let mut v = rand::seq::index::sample(&mut rng, recs.len(), n).into_vec();
        v.sort_unstable();
        v
    } else {
        (0..n).map(|_| rng.random_range(0..recs.len())).collect()
    };

    let mut decoded: BTreeMap<usize, RgbImage> = BTreeMap::new();
    for &p in &picks {
        if let std::collections::btree_map::Entry::Vacant(slot) = decoded.entry(p) {
            let img = util::load_rgb_sized(&recs[p].path, side as u32)
                .map_err(|e| e.context(format!("record `{}`", recs[p].id)))?;
            slot.insert(img);
        }
    }
    let spec = AugmentationSpec::default();
    util::ensure_dir(&image_dir.join(label.name()))?;
    let mut out = Vec::with_capacity(n);
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(32) {
        let inputs: Vec<Vec<f32>> = chunk
            .par_iter()
            .map(|&i| {
                let s = util::derive_seed_index(seed, i as u64);
                to_unit_range(&augment::apply(&decoded[&picks[i]], &augment::sample_params(&spec, s)))
            })
            .collect();
        let x = stack(&inputs.iter().collect::<Vec<_>>(), side)?;
        let y = checkpoint.model.translate(&x)?;
        let images = (0..chunk.len())
            .map(|j| to_image(&y.get(j)?))
            .collect::<Result<Vec<_>>>()?;
        let written: Vec<ImageRecord> = chunk
            .par_iter()
            .zip(images.par_iter())
            .map(|(&i, img)| {
                let s = util::derive_seed_index(seed, i as u64);
                let path = generated_path(image_dir, label, seed, i);
                util::save_png(img, &path)?;
                Ok(ImageRecord {
                    id: generated_id(label, seed, i),
                    path,
                    label,
                    provenance: Provenance::Generated,
                    source_id: Some(recs[picks[i]].id.clone()),
                    seed: Some(s),
                })
            })
            .collect::<Result<_>>()?;
        out.extend(written);
    }
    DatasetManifest::new(
        out,
        seed,
        format!("{n} {} images generated from {} NORMAL sources", label, source.len()),
    )
}
