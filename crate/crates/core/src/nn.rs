//! Small neural-network toolkit on top of candle: seeded parameter stores,
//! convolution/linear layers with asymmetric padding, normalisations, stable
//! losses, and the named-tensor directory format used for checkpoints.
//!
//! Parameter initialisation draws from a ChaCha stream owned by the store, so
//! a model built twice from the same seed is bit-identical.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util;

struct StoreInner {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

/// Named trainable parameters with a deterministic initialiser.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<StoreInner>>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        ParamStore {
            inner: Arc::new(Mutex::new(StoreInner {
                vars: BTreeMap::new(),
                rng: util::rng(seed),
            })),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Scope {
        Scope {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    pub fn names(&self) -> Vec<String> {
        self.inner.lock().unwrap().vars.keys().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.inner.lock().unwrap().vars.get(name).cloned()
    }

    pub fn vars(&self) -> BTreeMap<String, Var> {
        self.inner.lock().unwrap().vars.clone()
    }

    /// Variables whose name satisfies `pred`, in name order.
    pub fn vars_where(&self, pred: impl Fn(&str) -> bool) -> Vec<Var> {
        self.inner
            .lock()
            .unwrap()
            .vars
            .iter()
            .filter(|(n, _)| pred(n))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.inner.lock().unwrap().vars.values().map(|v| v.elem_count()).sum()
    }

    fn insert(&self, name: String, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let mut inner = self.inner.lock().unwrap();
        if inner.vars.contains_key(&name) {
            return Err(Error::Config(format!("parameter `{name}` registered twice")));
        }
        let out = var.as_tensor().clone();
        inner.vars.insert(name, var);
        Ok(out)
    }

    fn draw(&self, n: usize, f: impl Fn(&mut ChaCha8Rng) -> f64) -> Vec<f64> {
        let mut inner = self.inner.lock().unwrap();
        (0..n).map(|_| f(&mut inner.rng)).collect()
    }

    /// Overwrite parameters from a tensor map. Unknown names are ignored.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let inner = self.inner.lock().unwrap();
        for (name, t) in tensors {
            if let Some(var) = inner.vars.get(name) {
                if var.dims() != t.dims() {
                    return Err(Error::Shape(format!(
                        "parameter `{name}`: expected {:?}, file has {:?}",
                        var.dims(),
                        t.dims()
                    )));
                }
                var.set(&t.to_dtype(self.dtype)?)?;
            }
        }
        Ok(())
    }

    /// Deep copy of all current values.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        let inner = self.inner.lock().unwrap();
        inner
            .vars
            .iter()
            .map(|(n, v)| Ok((n.clone(), v.as_tensor().copy()?)))
            .collect()
    }
}

/// A name prefix into a [`ParamStore`].
#[derive(Clone)]
pub struct Scope {
    store: ParamStore,
    prefix: String,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Const(f64),
    /// U(-b, b) with b = 1/sqrt(fan_in).
    FanIn(usize),
    Normal(f64),
}

impl Scope {
    pub fn pp(&self, name: &str) -> Scope {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Scope {
            store: self.store.clone(),
            prefix,
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::FanIn(fan_in) => {
                let b = 1.0 / (fan_in.max(1) as f64).sqrt();
                self.store.draw(n, |r| r.random_range(-b..b))
            }
            Init::Normal(std) => self.store.draw(n, |r| {
                let v: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, r);
                v * std
            }),
        };
        self.store.insert(self.pp(name).prefix, shape, values)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    /// (top/bottom, left/right) zero padding.
    pub padding: (usize, usize),
}

impl Conv2d {
    pub fn new(
        scope: &Scope,
        in_c: usize,
        out_c: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: (usize, usize),
        bias: bool,
    ) -> Result<Self> {
        let fan_in = in_c * kernel.0 * kernel.1;
        let weight = scope.param("weight", &[out_c, in_c, kernel.0, kernel.1], Init::FanIn(fan_in))?;
        let bias = if bias {
            Some(scope.param("bias", &[out_c], Init::FanIn(fan_in))?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn square(scope: &Scope, in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        Self::new(scope, in_c, out_c, (k, k), stride, (pad, pad), true)
    }

    pub fn param_count(in_c: usize, out_c: usize, kernel: (usize, usize), bias: bool) -> usize {
        out_c * in_c * kernel.0 * kernel.1 + if bias { out_c } else { 0 }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (ph, pw) = self.padding;
        let y = if ph == pw {
            x.conv2d(&self.weight, ph, self.stride, 1, 1)?
        } else {
            let x = x.pad_with_zeros(2, ph, ph)?.pad_with_zeros(3, pw, pw)?;
            x.conv2d(&self.weight, 0, self.stride, 1, 1)?
        };
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    /// (out, in)
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(scope: &Scope, in_f: usize, out_f: usize, bias: bool) -> Result<Self> {
        let weight = scope.param("weight", &[out_f, in_f], Init::FanIn(in_f))?;
        let bias = if bias {
            Some(scope.param("bias", &[out_f], Init::FanIn(in_f))?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn param_count(in_f: usize, out_f: usize, bias: bool) -> usize {
        in_f * out_f + if bias { out_f } else { 0 }
    }

    /// x: (B, in) -> (B, out)
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.t()?)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(b)?),
            None => Ok(y),
        }
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    // max(x, slope * x) for slope < 1
    Ok(x.maximum(&(x * slope)?)?)
}

/// Reflection padding of the two spatial dims of a (B, C, H, W) tensor.
pub fn reflect_pad(x: &Tensor, pad: usize) -> Result<Tensor> {
    if pad == 0 {
        return Ok(x.clone());
    }
    let (_, _, h, w) = x.dims4()?;
    if pad >= h || pad >= w {
        return Err(Error::Shape(format!("reflection pad {pad} too large for {h}x{w}")));
    }
    let index = |n: usize| -> Result<Tensor> {
        let idx: Vec<u32> = (0..n + 2 * pad)
            .map(|i| {
                let j = i as i64 - pad as i64;
                let r = if j < 0 {
                    -j
                } else if j >= n as i64 {
                    2 * (n as i64 - 1) - j
                } else {
                    j
                };
                r as u32
            })
            .collect();
        Ok(Tensor::from_vec(idx, n + 2 * pad, x.device())?)
    };
    let x = x.index_select(&index(h)?, 2)?;
    Ok(x.index_select(&index(w)?, 3)?)
}

/// Mean and biased variance over the given dims (kept).
pub fn moments(x: &Tensor, dims: &[usize]) -> Result<(Tensor, Tensor)> {
    let mut mean = x.clone();
    for &d in dims {
        mean = mean.mean_keepdim(d)?;
    }
    let centered = x.broadcast_sub(&mean)?;
    let mut var = centered.sqr()?;
    for &d in dims {
        var = var.mean_keepdim(d)?;
    }
    Ok((mean, var))
}

pub const NORM_EPS: f64 = 1e-5;

/// Per-sample, per-channel normalisation over H, W.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let (mean, var) = moments(x, &[2, 3])?;
    Ok(x.broadcast_sub(&mean)?.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?)
}

/// Per-sample normalisation over C, H, W.
pub fn layer_norm(x: &Tensor) -> Result<Tensor> {
    let (mean, var) = moments(x, &[1, 2, 3])?;
    Ok(x.broadcast_sub(&mean)?.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?)
}

pub fn mse_to(x: &Tensor, target: f64) -> Result<Tensor> {
    Ok((x - target)?.sqr()?.mean_all()?)
}

pub fn l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.abs()?.mean_all()?)
}

/// Numerically stable mean binary cross-entropy on logits against a constant target.
pub fn bce_with_logits_to(x: &Tensor, target: f64) -> Result<Tensor> {
    let softplus = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    let loss = ((x.relu()? - (x * target)?)? + softplus)?;
    Ok(loss.mean_all()?)
}

/// Row-wise log-softmax cross-entropy with integer targets.
pub fn cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let log_probs = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    Ok(candle_nn::loss::nll(&log_probs, targets)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

// ---------------------------------------------------------------------------
// Named tensor directories

pub const TENSOR_FORMAT: &str = "octfew-tensors/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorHeader {
    pub format: String,
    pub dtype: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Write `header.json` plus one little-endian f32 blob per tensor.
pub fn save_tensor_dir(dir: &Path, meta: serde_json::Value, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let blob_dir = dir.join("tensors");
    util::ensure_dir(&blob_dir)?;
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let values: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let mut bytes = Vec::with_capacity(values.len() * 4);
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let file = format!("tensors/{name}.bin");
        let path = dir.join(&file);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.dims().to_vec(),
            file,
        });
    }
    let header = TensorHeader {
        format: TENSOR_FORMAT.into(),
        dtype: "f32le".into(),
        meta,
        tensors: entries,
    };
    util::write_json(&dir.join("header.json"), &header)
}

pub fn read_tensor_header(dir: &Path) -> Result<TensorHeader> {
    let header: TensorHeader = util::read_json(&dir.join("header.json"))?;
    if header.format != TENSOR_FORMAT {
        return Err(Error::SchemaVersion {
            found: header.format,
            expected: TENSOR_FORMAT.into(),
        });
    }
    Ok(header)
}

pub fn load_tensor_dir(dir: &Path) -> Result<(TensorHeader, BTreeMap<String, Tensor>)> {
    let header = read_tensor_header(dir)?;
    let mut out = BTreeMap::new();
    for e in &header.tensors {
        let path = dir.join(&e.file);
        let bytes = std::fs::read(&path).map_err(|err| Error::io(&path, err))?;
        let n: usize = e.shape.iter().product();
        if bytes.len() != n * 4 {
            return Err(Error::Shape(format!(
                "tensor `{}` blob has {} bytes, shape {:?} needs {}",
                e.name,
                bytes.len(),
                e.shape,
                n * 4
            )));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.insert(e.name.clone(), Tensor::from_vec(values, e.shape.as_slice(), &Device::Cpu)?);
    }
    Ok((header, out))
}

/// Current values of a set of named variables.
pub fn var_values(vars: &BTreeMap<String, Var>) -> BTreeMap<String, Tensor> {
    vars.iter().map(|(n, v)| (n.clone(), v.as_tensor().clone())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_pad_mirrors_without_edge_repeat() {
        let x = Tensor::arange(0f32, 4., &Device::Cpu).unwrap().reshape((1, 1, 1, 4)).unwrap();
        let x = x.broadcast_as((1, 1, 3, 4)).unwrap().contiguous().unwrap();
        let y = reflect_pad(&x, 2).unwrap();
        let row: Vec<f32> = y.get(0).unwrap().get(0).unwrap().get(0).unwrap().to_vec1().unwrap();
        assert_eq!(row, vec![2., 1., 0., 1., 2., 3., 2., 1.]);
        assert_eq!(y.dims(), &[1, 1, 7, 8]);
    }

    #[test]
    fn store_is_deterministic() {
        let build = || {
            let s = ParamStore::new(5, DType::F32);
            Conv2d::square(&s.root().pp("c"), 3, 4, 3, 1, 1).unwrap();
            s.snapshot().unwrap()
        };
        let (a, b) = (build(), build());
        for (k, t) in &a {
            let x: Vec<f32> = t.flatten_all().unwrap().to_vec1().unwrap();
            let y: Vec<f32> = b[k].flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn stable_bce_matches_naive_form() {
        let x = Tensor::new(&[-3.0f64, -0.5, 0.0, 0.7, 4.0], &Device::Cpu).unwrap();
        let got = scalar(&bce_with_logits_to(&x, 1.0).unwrap()).unwrap();
        let naive: f64 = [-3.0f64, -0.5, 0.0, 0.7, 4.0]
            .iter()
            .map(|v| -(1.0 / (1.0 + (-v).exp())).ln())
            .sum::<f64>()
            / 5.0;
        assert!((got - naive).abs() < 1e-12);
        // extreme logits stay finite
        let x = Tensor::new(&[-500.0f64, 500.0], &Device::Cpu).unwrap();
        assert!(scalar(&bce_with_logits_to(&x, 0.0).unwrap()).unwrap().is_finite());
    }

    #[test]
    fn tensor_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = BTreeMap::new();
        m.insert(
            "a.weight".to_string(),
            Tensor::new(&[[1.5f32, -2.0], [0.25, 3.0]], &Device::Cpu).unwrap(),
        );
        save_tensor_dir(dir.path(), serde_json::json!({"k": 1}), &m).unwrap();
        let (h, back) = load_tensor_dir(dir.path()).unwrap();
        assert_eq!(h.meta["k"], 1);
        assert_eq!(h.tensors[0].shape, vec![2, 2]);
        let v: Vec<f32> = back["a.weight"].flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(v, vec![1.5, -2.0, 0.25, 3.0]);
    }
}
