//! Penultimate-layer features and exact 3D t-SNE, with CSV and scatter-plot export.

use std::path::Path;

use candle_core::DType;
use image::{Rgb, RgbImage};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{Classifier, ImageCache};
use crate::dataset::{ClassLabel, DatasetManifest, ImageRecord, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::font;
use crate::util;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub dims: usize,
    /// Row-major N x D.
    pub data: Vec<f64>,
    pub labels: Vec<ClassLabel>,
    pub ids: Vec<String>,
}

impl FeatureMatrix {
    pub fn new(data: Vec<f64>, dims: usize, labels: Vec<ClassLabel>, ids: Vec<String>) -> Result<Self> {
        if dims == 0 || !data.len().is_multiple_of(dims) {
            return Err(Error::Shape(format!("{} values do not form rows of width {dims}", data.len())));
        }
        let rows = data.len() / dims;
        if labels.len() != rows || ids.len() != rows {
            return Err(Error::Shape(format!(
                "{rows} rows but {} labels and {} ids",
                labels.len(),
                ids.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                component: format!("feature of record `{}`", ids[i / dims]),
                iteration: 0,
            });
        }
        Ok(FeatureMatrix {
            rows,
            dims,
            data,
            labels,
            ids,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dims..(i + 1) * self.dims]
    }
}

/// Penultimate-layer activations, one row per record in manifest order.
pub fn extract_features(model: &Classifier, manifest: &DatasetManifest) -> Result<FeatureMatrix> {
    let layer = model.graph().penultimate.clone();
    if layer.is_empty() {
        return Err(Error::Config("backbone does not name a penultimate layer".into()));
    }
    let side = model.config().input_size;
    let recs: Vec<&ImageRecord> = manifest.records().iter().collect();
    let mut cache = ImageCache::new();
    cache.load(&recs, side, &model.config().normalization)?;
    let mut data = Vec::new();
    let mut dims = 0;
    for chunk in recs.chunks(64) {
        let x = cache.batch(chunk, side)?;
        let f = model.forward_to(&x, &layer)?.detach().flatten_from(1)?.to_dtype(DType::F64)?;
        dims = f.dim(1)?;
        data.extend(f.flatten_all()?.to_vec1::<f64>()?);
    }
    FeatureMatrix::new(
        data,
        dims.max(1),
        recs.iter().map(|r| r.label).collect(),
        recs.iter().map(|r| r.id.clone()).collect(),
    )
}

// ---------------------------------------------------------------------------
// t-SNE

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            seed: 0,
        }
    }
}

pub const KL_EVERY: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingResult {
    /// Row-major N x 3.
    pub coords: Vec<f64>,
    pub perplexity: f64,
    pub iterations: usize,
    pub seed: u64,
    pub kl_divergence: f64,
    /// (iteration count, KL) every `KL_EVERY` iterations.
    pub kl_history: Vec<(usize, f64)>,
}

impl EmbeddingResult {
    pub fn n(&self) -> usize {
        self.coords.len() / 3
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        [self.coords[3 * i], self.coords[3 * i + 1], self.coords[3 * i + 2]]
    }
}

/// Conditional and joint input affinities.
#[derive(Clone, Debug)]
pub struct Affinities {
    pub n: usize,
    /// Row-normalised conditional p_{j|i}, N x N.
    pub conditional: Vec<f64>,
    /// Symmetrised joint P, N x N, sums to 1.
    pub joint: Vec<f64>,
    /// e^H of each conditional row, H in nats.
    pub row_perplexity: Vec<f64>,
}

pub fn squared_distances(x: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let xi = &x[i * d..(i + 1) * d];
        for (j, v) in row.iter_mut().enumerate() {
            let xj = &x[j * d..(j + 1) * d];
            *v = xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum();
        }
    });
    out
}

/// Gaussian row with precision beta; returns (probabilities, entropy in nats).
fn gaussian_row(dist: &[f64], i: usize, beta: f64, out: &mut [f64]) -> f64 {
    // Shift by the smallest off-diagonal distance for numerical range.
    let min = dist
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &v)| v)
        .fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    for (j, (o, &dv)) in out.iter_mut().zip(dist).enumerate() {
        *o = if j == i { 0.0 } else { (-(dv - min) * beta).exp() };
        sum += *o;
    }
    let mut h = 0.0;
    for o in out.iter_mut() {
        *o /= sum;
        if *o > 0.0 {
            h -= *o * o.ln();
        }
    }
    h
}

/// Calibrate each row's bandwidth by bisection so that e^H = perplexity.
pub fn affinities(x: &[f64], n: usize, d: usize, perplexity: f64) -> Result<Affinities> {
    check_feasible(n, perplexity)?;
    let dist = squared_distances(x, n, d);
    let target = perplexity.ln();
    let mut conditional = vec![0.0; n * n];
    let row_perplexity: Vec<f64> = conditional
        .par_chunks_mut(n)
        .enumerate()
        .map(|(i, row)| {
            let di = &dist[i * n..(i + 1) * n];
            let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
            let mut beta = 1.0;
            let mut h = gaussian_row(di, i, beta, row);
            for _ in 0..200 {
                if (h.exp() - perplexity).abs() < 1e-7 {
                    break;
                }
                if h > target {
                    lo = beta;
                    beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
                } else {
                    hi = beta;
                    beta = (beta + lo) / 2.0;
                }
                h = gaussian_row(di, i, beta, row);
            }
            h.exp()
        })
        .collect();
    let mut joint = vec![0.0; n * n];
    let denom = 2.0 * n as f64;
    for i in 0..n {
        for j in 0..n {
            joint[i * n + j] = ((conditional[i * n + j] + conditional[j * n + i]) / denom).max(1e-12);
        }
        joint[i * n + i] = 0.0;
    }
    Ok(Affinities {
        n,
        conditional,
        joint,
        row_perplexity,
    })
}

pub fn check_feasible(n: usize, perplexity: f64) -> Result<()> {
    if !(perplexity > 0.0) || (n as f64) < 3.0 * perplexity {
        return Err(Error::Precondition(format!(
            "t-SNE needs N >= 3 * perplexity; got N = {n}, perplexity = {perplexity} (bound {})",
            3.0 * perplexity
        )));
    }
    Ok(())
}

/// Student-t kernel values 1/(1+|yi-yj|^2) (zero diagonal) and their sum.
fn student_kernel(y: &[f64], n: usize) -> (Vec<f64>, f64) {
    let mut num = vec![0.0; n * n];
    num.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for (j, v) in row.iter_mut().enumerate() {
            if i != j {
                let d: f64 = (0..3).map(|k| (y[3 * i + k] - y[3 * j + k]).powi(2)).sum();
                *v = 1.0 / (1.0 + d);
            }
        }
    });
    let sum = num.chunks(n).map(|r| r.iter().sum::<f64>()).sum();
    (num, sum)
}

/// KL(P || Q) for a 3D embedding `y` (N x 3, row-major).
pub fn kl_divergence(p: &[f64], y: &[f64]) -> f64 {
    let n = y.len() / 3;
    let (num, sum) = student_kernel(y, n);
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            let pij = p[i * n + j];
            if i != j && pij > 0.0 {
                let q = (num[i * n + j] / sum).max(1e-300);
                kl += pij * (pij / q).ln();
            }
        }
    }
    kl
}

/// dKL/dy = 4 sum_j (p_ij - q_ij) (y_i - y_j) / (1 + |y_i - y_j|^2).
pub fn kl_gradient(p: &[f64], y: &[f64]) -> Vec<f64> {
    let n = y.len() / 3;
    let (num, sum) = student_kernel(y, n);
    let mut grad = vec![0.0; 3 * n];
    grad.par_chunks_mut(3).enumerate().for_each(|(i, g)| {
        for j in 0..n {
            if i == j {
                continue;
            }
            let w = num[i * n + j];
            let mult = (p[i * n + j] - w / sum) * w;
            for k in 0..3 {
                g[k] += 4.0 * mult * (y[3 * i + k] - y[3 * j + k]);
            }
        }
    });
    grad
}

pub fn tsne_3d(features: &FeatureMatrix, cfg: &TsneConfig) -> Result<EmbeddingResult> {
    let n = features.rows;
    if features.dims == 0 {
        return Err(Error::Precondition("features have zero width".into()));
    }
    if cfg.iterations == 0 {
        return Err(Error::Config("t-SNE iterations must be >= 1".into()));
    }
    let aff = affinities(&features.data, n, features.dims, cfg.perplexity)?;
    let p = aff.joint;
    let exaggerated: Vec<f64> = p.iter().map(|v| v * cfg.exaggeration).collect();

    let mut rng = util::rng(cfg.seed);
    let init = Normal::new(0.0, 1e-4).expect("valid std");
    let mut y: Vec<f64> = (0..3 * n).map(|_| init.sample(&mut rng)).collect();
    let mut velocity = vec![0.0; 3 * n];
    let mut gains = vec![1.0f64; 3 * n];
    let mut kl_history = Vec::new();

    for it in 0..cfg.iterations {
        let early = it < cfg.exaggeration_iters;
        let grad = kl_gradient(if early { &exaggerated } else { &p }, &y);
        let momentum = if early { 0.5 } else { 0.8 };
        for k in 0..3 * n {
            gains[k] = if (grad[k] > 0.0) != (velocity[k] > 0.0) {
                gains[k] + 0.2
            } else {
                gains[k] * 0.8
            };
            gains[k] = gains[k].max(0.01);
            velocity[k] = momentum * velocity[k] - cfg.learning_rate * gains[k] * grad[k];
            y[k] += velocity[k];
        }
        for k in 0..3 {
            let mean = (0..n).map(|i| y[3 * i + k]).sum::<f64>() / n as f64;
            for i in 0..n {
                y[3 * i + k] -= mean;
            }
        }
        if (it + 1) % KL_EVERY == 0 {
            kl_history.push((it + 1, kl_divergence(&p, &y)));
        }
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            component: format!("t-SNE coordinate of `{}`", features.ids[i / 3]),
            iteration: cfg.iterations,
        });
    }
    let kl = kl_divergence(&p, &y);
    Ok(EmbeddingResult {
        coords: y,
        perplexity: cfg.perplexity,
        iterations: cfg.iterations,
        seed: cfg.seed,
        kl_divergence: kl.max(0.0),
        kl_history,
    })
}

// ---------------------------------------------------------------------------
// Export

pub const CLASS_COLORS: [[u8; 3]; NUM_CLASSES] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotSummary {
    pub panels: usize,
    pub legend_entries: Vec<String>,
    pub width: u32,
    pub height: u32,
}

pub fn write_csv(embedding: &EmbeddingResult, features: &FeatureMatrix, path: &Path) -> Result<()> {
    if embedding.n() != features.rows {
        return Err(Error::Shape(format!(
            "embedding has {} points, features {} rows",
            embedding.n(),
            features.rows
        )));
    }
    util::ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{other:?}")),
    })?;
    w.write_record(["id", "label", "x", "y", "z"])?;
    for i in 0..embedding.n() {
        let [x, y, z] = embedding.point(i);
        w.write_record([
            features.ids[i].clone(),
            features.labels[i].name().to_string(),
            format!("{x}"),
            format!("{y}"),
            format!("{z}"),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

const PANEL: u32 = 480;
const LEGEND_H: u32 = 64;
const TITLE_H: u32 = 24;
const BG: Rgb<u8> = Rgb([255, 255, 255]);
const INK: Rgb<u8> = Rgb([0, 0, 0]);

/// Orthographic view of the point cloud: azimuth 35 degrees, elevation 25 degrees.
fn project(embedding: &EmbeddingResult) -> Vec<(f64, f64, f64)> {
    let (az, el) = (35f64.to_radians(), 25f64.to_radians());
    (0..embedding.n())
        .map(|i| {
            let [x, y, z] = embedding.point(i);
            let u = x * az.cos() - y * az.sin();
            let depth = x * az.sin() + y * az.cos();
            let v = z * el.cos() - depth * el.sin();
            let d = z * el.sin() + depth * el.cos();
            (u, v, d)
        })
        .collect()
}

fn fill_rect(img: &mut RgbImage, x: u32, y: u32, w: u32, h: u32, c: Rgb<u8>) {
    for yy in y..(y + h).min(img.height()) {
        for xx in x..(x + w).min(img.width()) {
            img.put_pixel(xx, yy, c);
        }
    }
}

fn draw_panel(img: &mut RgbImage, ox: u32, embedding: &EmbeddingResult, labels: &[ClassLabel], title: &str) {
    font::draw_text(img, ox + 8, 8, title, 2, INK);
    let pts = project(embedding);
    if pts.is_empty() {
        return;
    }
    let (mut umin, mut umax, mut vmin, mut vmax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(u, v, _) in &pts {
        umin = umin.min(u);
        umax = umax.max(u);
        vmin = vmin.min(v);
        vmax = vmax.max(v);
    }
    let span = (umax - umin).max(vmax - vmin).max(1e-12);
    let margin = 16.0;
    let scale = (PANEL as f64 - 2.0 * margin) / span;
    let top = TITLE_H as f64;
    // Far points first so near points overdraw them.
    let mut order: Vec<usize> = (0..pts.len()).collect();
    order.sort_by(|&a, &b| pts[a].2.total_cmp(&pts[b].2).then(a.cmp(&b)));
    for i in order {
        let (u, v, _) = pts[i];
        let cx = ox as f64 + margin + (u - umin) * scale;
        let cy = top + margin + (vmax - v) * scale;
        let color = Rgb(CLASS_COLORS[labels[i].index()]);
        for dy in -2i32..=2 {
            for dx in -2i32..=2 {
                if dx * dx + dy * dy <= 5 {
                    let (px, py) = (cx as i64 + dx as i64, cy as i64 + dy as i64);
                    if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                        img.put_pixel(px as u32, py as u32, color);
                    }
                }
            }
        }
    }
}

fn draw_legend(img: &mut RgbImage, y0: u32) -> Vec<String> {
    let mut entries = Vec::new();
    let (cols, col_w) = (5u32, img.width() / 5);
    for (k, label) in ClassLabel::ALL.iter().enumerate() {
        let (col, row) = (k as u32 % cols, k as u32 / cols);
        let x = 8 + col * col_w;
        let y = y0 + 8 + row * 24;
        fill_rect(img, x, y, 14, 14, Rgb(CLASS_COLORS[label.index()]));
        font::draw_text(img, x + 20, y, label.name(), 2, INK);
        entries.push(label.name().to_string());
    }
    entries
}

/// Render one or more embeddings side by side with a shared 9-class legend.
pub fn render_panels(panels: &[(&EmbeddingResult, &[ClassLabel], &str)]) -> Result<(RgbImage, PlotSummary)> {
    if panels.is_empty() {
        return Err(Error::Precondition("nothing to plot".into()));
    }
    for (e, labels, _) in panels {
        if e.n() != labels.len() {
            return Err(Error::Shape(format!("{} points but {} labels", e.n(), labels.len())));
        }
    }
    let width = PANEL * panels.len() as u32;
    let height = TITLE_H + PANEL + LEGEND_H;
    let mut img = RgbImage::from_pixel(width, height, BG);
    for (k, (e, labels, title)) in panels.iter().enumerate() {
        draw_panel(&mut img, k as u32 * PANEL, e, labels, title);
    }
    let legend_entries = draw_legend(&mut img, TITLE_H + PANEL);
    Ok((
        img,
        PlotSummary {
            panels: panels.len(),
            legend_entries,
            width,
            height,
        },
    ))
}

/// CSV of coordinates plus a single-panel scatter plot.
pub fn export(
    embedding: &EmbeddingResult,
    features: &FeatureMatrix,
    csv_path: &Path,
    png_path: Option<&Path>,
    title: &str,
) -> Result<Option<PlotSummary>> {
    write_csv(embedding, features, csv_path)?;
    match png_path {
        Some(p) => {
            let (img, summary) = render_panels(&[(embedding, &features.labels, title)])?;
            util::save_png(&img, p)?;
            Ok(Some(summary))
        }
        None => Ok(None),
    }
}

/// Two embeddings side by side, panels titled "(a) ..." and "(b) ...".
pub fn export_comparison(
    a: (&EmbeddingResult, &FeatureMatrix, &str),
    b: (&EmbeddingResult, &FeatureMatrix, &str),
    png_path: &Path,
) -> Result<PlotSummary> {
    let ta = format!("(a) {}", a.2);
    let tb = format!("(b) {}", b.2);
    let (img, summary) = render_panels(&[(a.0, &a.1.labels, &ta), (b.0, &b.1.labels, &tb)])?;
    util::save_png(&img, png_path)?;
    Ok(summary)
}
