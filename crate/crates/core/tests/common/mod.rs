//! Independent reference implementations shared by the integration tests and
//! the acceptance gate. Nothing here calls the code under test.
#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::{BTreeSet, HashMap};

use octfew::dataset::{DatasetManifest, ImageRecord, Provenance, SplitPlan};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// Metrics, straight from the definitions.

pub type Cm = Vec<Vec<u64>>;

fn total(cm: &Cm) -> f64 {
    cm.iter().flatten().map(|&v| v as f64).sum()
}

pub fn naive_accuracy(cm: &Cm) -> Option<f64> {
    let n = total(cm);
    if n == 0.0 {
        return None;
    }
    let mut hits = 0.0;
    for (i, row) in cm.iter().enumerate() {
        hits += row[i] as f64;
    }
    Some(hits / n)
}

pub fn naive_kappa(cm: &Cm) -> Option<f64> {
    let n = total(cm);
    if n == 0.0 {
        return None;
    }
    let k = cm.len();
    let mut p_o = 0.0;
    let mut p_e = 0.0;
    for i in 0..k {
        p_o += cm[i][i] as f64 / n;
        let mut row = 0.0;
        let mut col = 0.0;
        for j in 0..k {
            row += cm[i][j] as f64;
            col += cm[j][i] as f64;
        }
        p_e += (row / n) * (col / n);
    }
    if (1.0 - p_e).abs() < 1e-12 {
        return None;
    }
    Some((p_o - p_e) / (1.0 - p_e))
}

/// Gorodkin's triple-sum form.
pub fn naive_mcc(cm: &Cm) -> Option<f64> {
    let n = total(cm);
    if n == 0.0 {
        return None;
    }
    let k = cm.len();
    let c = |i: usize, j: usize| cm[i][j] as f64;
    let mut cov_xy = 0.0;
    for a in 0..k {
        for b in 0..k {
            for m in 0..k {
                cov_xy += c(a, a) * c(b, m) - c(a, b) * c(m, a);
            }
        }
    }
    let mut cov_xx = 0.0;
    let mut cov_yy = 0.0;
    for a in 0..k {
        let (mut row_a, mut col_a, mut rest_rows, mut rest_cols) = (0.0, 0.0, 0.0, 0.0);
        for b in 0..k {
            row_a += c(a, b);
            col_a += c(b, a);
        }
        for f in (0..k).filter(|&f| f != a) {
            for g in 0..k {
                rest_rows += c(f, g);
                rest_cols += c(g, f);
            }
        }
        cov_xx += row_a * rest_rows;
        cov_yy += col_a * rest_cols;
    }
    if cov_xx == 0.0 || cov_yy == 0.0 {
        return Some(0.0);
    }
    Some(cov_xy / (cov_xx.sqrt() * cov_yy.sqrt()))
}

/// Mutual information over truth entropy, in bits.
pub fn naive_rci(cm: &Cm) -> Option<f64> {
    let n = total(cm);
    if n == 0.0 {
        return None;
    }
    let k = cm.len();
    let pt: Vec<f64> = (0..k).map(|i| cm[i].iter().map(|&v| v as f64).sum::<f64>() / n).collect();
    let pp: Vec<f64> = (0..k).map(|j| (0..k).map(|i| cm[i][j] as f64).sum::<f64>() / n).collect();
    let h_t: f64 = pt.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.log2()).sum();
    if h_t <= 0.0 {
        return None;
    }
    let h_p: f64 = pp.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.log2()).sum();
    let mut h_joint = 0.0;
    for row in cm {
        for &v in row {
            if v > 0 {
                let p = v as f64 / n;
                h_joint -= p * p.log2();
            }
        }
    }
    let mi = (h_t + h_p - h_joint).max(0.0);
    Some((mi / h_t).min(1.0))
}

pub fn naive_balanced_accuracy(cm: &Cm) -> Option<f64> {
    let mut rates = Vec::new();
    for (i, row) in cm.iter().enumerate() {
        let s: u64 = row.iter().sum();
        if s > 0 {
            rates.push(row[i] as f64 / s as f64);
        }
    }
    if rates.is_empty() {
        None
    } else {
        Some(rates.iter().sum::<f64>() / rates.len() as f64)
    }
}

pub fn random_cm(rng: &mut impl Rng, k: usize, max: u64) -> Cm {
    (0..k).map(|_| (0..k).map(|_| rng.random_range(0..=max)).collect()).collect()
}

// ---------------------------------------------------------------------------
// Attention blocks as explicit loops over (B, C, H, W) f64 arrays.

pub struct Mlp<'a> {
    pub w1: &'a [f64],
    pub b1: &'a [f64],
    pub w2: &'a [f64],
    pub b2: &'a [f64],
    pub c: usize,
    pub h: usize,
}

impl Mlp<'_> {
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let hidden: Vec<f64> = (0..self.h)
            .map(|i| {
                let z: f64 = (0..self.c).map(|j| self.w1[i * self.c + j] * v[j]).sum::<f64>() + self.b1[i];
                z.max(0.0)
            })
            .collect();
        (0..self.c)
            .map(|i| (0..self.h).map(|j| self.w2[i * self.h + j] * hidden[j]).sum::<f64>() + self.b2[i])
            .collect()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn at(dims: [usize; 4], b: usize, c: usize, y: usize, x: usize) -> usize {
    ((b * dims[1] + c) * dims[2] + y) * dims[3] + x
}

pub fn se_oracle(x: &[f64], dims: [usize; 4], mlp: &Mlp) -> Vec<f64> {
    let [bn, cn, hn, wn] = dims;
    let mut out = x.to_vec();
    for b in 0..bn {
        let mut squeeze = vec![0.0; cn];
        for (c, s) in squeeze.iter_mut().enumerate() {
            for y in 0..hn {
                for xx in 0..wn {
                    *s += x[at(dims, b, c, y, xx)];
                }
            }
            *s /= (hn * wn) as f64;
        }
        let gate: Vec<f64> = mlp.apply(&squeeze).into_iter().map(sigmoid).collect();
        for c in 0..cn {
            for y in 0..hn {
                for xx in 0..wn {
                    out[at(dims, b, c, y, xx)] *= gate[c];
                }
            }
        }
    }
    out
}

/// `kernel` is (1, 2, k, k) with input channels [mean, max]; zero padding k/2.
pub fn cbam_oracle(x: &[f64], dims: [usize; 4], mlp: &Mlp, kernel: &[f64], k: usize) -> Vec<f64> {
    let [bn, cn, hn, wn] = dims;
    let mut refined = x.to_vec();
    for b in 0..bn {
        let mut avg = vec![0.0; cn];
        let mut max = vec![f64::NEG_INFINITY; cn];
        for c in 0..cn {
            for y in 0..hn {
                for xx in 0..wn {
                    let v = x[at(dims, b, c, y, xx)];
                    avg[c] += v / (hn * wn) as f64;
                    max[c] = max[c].max(v);
                }
            }
        }
        let za = mlp.apply(&avg);
        let zm = mlp.apply(&max);
        for c in 0..cn {
            let g = sigmoid(za[c] + zm[c]);
            for y in 0..hn {
                for xx in 0..wn {
                    refined[at(dims, b, c, y, xx)] *= g;
                }
            }
        }
    }
    let mut out = refined.clone();
    let pad = (k / 2) as isize;
    for b in 0..bn {
        let mut mean_map = vec![0.0; hn * wn];
        let mut max_map = vec![f64::NEG_INFINITY; hn * wn];
        for y in 0..hn {
            for xx in 0..wn {
                for c in 0..cn {
                    let v = refined[at(dims, b, c, y, xx)];
                    mean_map[y * wn + xx] += v / cn as f64;
                    max_map[y * wn + xx] = max_map[y * wn + xx].max(v);
                }
            }
        }
        for y in 0..hn {
            for xx in 0..wn {
                let mut z = 0.0;
                for ky in 0..k {
                    for kx in 0..k {
                        let sy = y as isize + ky as isize - pad;
                        let sx = xx as isize + kx as isize - pad;
                        if sy < 0 || sx < 0 || sy >= hn as isize || sx >= wn as isize {
                            continue;
                        }
                        let p = sy as usize * wn + sx as usize;
                        z += kernel[ky * k + kx] * mean_map[p] + kernel[k * k + ky * k + kx] * max_map[p];
                    }
                }
                let g = sigmoid(z);
                for c in 0..cn {
                    out[at(dims, b, c, y, xx)] *= g;
                }
            }
        }
    }
    out
}

/// Normalise over the given axes of each sample: (v - mean) / sqrt(var + eps), biased variance.
pub fn norm_oracle(x: &[f64], dims: [usize; 4], per_channel: bool, eps: f64) -> Vec<f64> {
    let [bn, cn, hn, wn] = dims;
    let mut out = vec![0.0; x.len()];
    for b in 0..bn {
        let groups: Vec<Vec<usize>> = if per_channel {
            (0..cn).map(|c| vec![c]).collect()
        } else {
            vec![(0..cn).collect()]
        };
        for g in groups {
            let idx: Vec<usize> = g
                .iter()
                .flat_map(|&c| (0..hn).flat_map(move |y| (0..wn).map(move |xx| at(dims, b, c, y, xx))))
                .collect();
            let m = idx.iter().map(|&i| x[i]).sum::<f64>() / idx.len() as f64;
            let v = idx.iter().map(|&i| (x[i] - m).powi(2)).sum::<f64>() / idx.len() as f64;
            for i in idx {
                out[i] = (x[i] - m) / (v + eps).sqrt();
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Finite differences.

/// Central differences of `f` at `x`.
pub fn central_diff(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let up = f(&probe);
            probe[i] = orig - eps;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Largest |a - n| / (max(|a|, |n|) + floor) over all entries.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs().max(n.abs()) + floor))
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// t-SNE helpers.

/// e^H of a probability row, H in nats.
pub fn row_perplexity(row: &[f64]) -> f64 {
    let h: f64 = row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    h.exp()
}

/// Three well-separated Gaussian blobs in `d` dimensions, `per` points each.
pub fn three_blobs(per: usize, d: usize, seed: u64) -> (Vec<f64>, Vec<usize>) {
    let mut r = rng(seed);
    let mut data = Vec::with_capacity(3 * per * d);
    let mut labels = Vec::with_capacity(3 * per);
    for c in 0..3 {
        for _ in 0..per {
            for k in 0..d {
                let centre = if k == c { 20.0 } else { 0.0 };
                let noise: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut r);
                data.push(centre + noise);
            }
            labels.push(c);
        }
    }
    (data, labels)
}

/// Leave-one-out 1-nearest-neighbour accuracy of points (row-major, `d` wide).
pub fn one_nn_accuracy(points: &[f64], d: usize, labels: &[usize]) -> f64 {
    let n = labels.len();
    let mut hits = 0;
    for i in 0..n {
        let mut best = (f64::INFINITY, usize::MAX);
        for j in (0..n).filter(|&j| j != i) {
            let dist: f64 = (0..d).map(|k| (points[i * d + k] - points[j * d + k]).powi(2)).sum();
            if dist < best.0 {
                best = (dist, j);
            }
        }
        if labels[best.1] == labels[i] {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}

// ---------------------------------------------------------------------------
// Split hygiene.

/// Violations of: no synthetic record in any test partition, and no synthetic
/// record in a training partition whose test side holds one of its ancestors.
pub fn split_violations(manifest: &DatasetManifest, plan: &SplitPlan) -> Vec<String> {
    let by_id: HashMap<&str, &ImageRecord> = manifest.records().iter().map(|r| (r.id.as_str(), r)).collect();
    let mut problems = Vec::new();
    for fold in 0..plan.k {
        let test = plan.test_records(manifest, fold);
        let test_ids: BTreeSet<&str> = test.iter().map(|r| r.id.as_str()).collect();
        for r in &test {
            if r.provenance != Provenance::Real {
                problems.push(format!("fold {fold}: synthetic `{}` in test", r.id));
            }
        }
        for r in plan.train_records(manifest, fold) {
            if test_ids.contains(r.id.as_str()) {
                problems.push(format!("fold {fold}: `{}` in both partitions", r.id));
            }
            let mut cur = r.source_id.as_deref();
            let mut hops = 0;
            while let Some(id) = cur {
                if test_ids.contains(id) {
                    problems.push(format!("fold {fold}: `{}` trains while ancestor `{id}` is tested", r.id));
                }
                hops += 1;
                if hops > 64 {
                    break;
                }
                cur = by_id.get(id).and_then(|a| a.source_id.as_deref());
            }
        }
    }
    problems
}
