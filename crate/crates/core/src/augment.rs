//! Linear image augmentation and count expansion.
//!
//! The transform family is translation, rotation, zoom-in, multiplicative
//! brightness and horizontal flip. The three geometric parts are composed
//! into a single affine map about the image centre and resampled once
//! (bilinear, black fill outside the frame).

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ImageRecord, Provenance};
use crate::error::{Error, Result};
use crate::util;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationSpec {
    /// Maximum |shift| as a fraction of the image side.
    pub translate_frac: f64,
    /// Maximum |rotation| in degrees.
    pub rotate_deg: f64,
    /// Maximum zoom-in; the scale factor is drawn from [1, 1 + zoom_frac].
    pub zoom_frac: f64,
    /// Maximum |brightness| change as a multiplicative fraction.
    pub brightness_frac: f64,
    pub hflip_prob: f64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            translate_frac: 0.05,
            rotate_deg: 30.0,
            zoom_frac: 0.20,
            brightness_frac: 0.10,
            hflip_prob: 0.5,
        }
    }
}

impl AugmentationSpec {
    /// All ranges zero, never flip.
    pub fn identity() -> Self {
        AugmentationSpec {
            translate_frac: 0.0,
            rotate_deg: 0.0,
            zoom_frac: 0.0,
            brightness_frac: 0.0,
            hflip_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("translate_frac", self.translate_frac),
            ("rotate_deg", self.rotate_deg),
            ("zoom_frac", self.zoom_frac),
            ("brightness_frac", self.brightness_frac),
        ];
        for (name, v) in ranges {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("augmentation {name} must be a finite value >= 0, got {v}")));
            }
        }
        if self.brightness_frac >= 1.0 {
            return Err(Error::Config("augmentation brightness_frac must be < 1".into()));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Config(format!(
                "augmentation hflip_prob must lie in [0, 1], got {}",
                self.hflip_prob
            )));
        }
        Ok(())
    }
}

/// One concrete draw from an [`AugmentationSpec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledParams {
    pub dx: f64,
    pub dy: f64,
    pub theta: f64,
    pub zoom: f64,
    pub brightness: f64,
    pub flip: bool,
    pub seed: u64,
}

impl SampledParams {
    pub fn identity() -> Self {
        SampledParams {
            dx: 0.0,
            dy: 0.0,
            theta: 0.0,
            zoom: 0.0,
            brightness: 0.0,
            flip: false,
            seed: 0,
        }
    }

    pub fn within(&self, spec: &AugmentationSpec) -> bool {
        self.dx.abs() <= spec.translate_frac
            && self.dy.abs() <= spec.translate_frac
            && self.theta.abs() <= spec.rotate_deg
            && (0.0..=spec.zoom_frac).contains(&self.zoom)
            && self.brightness.abs() <= spec.brightness_frac
    }

    fn is_geometric_identity(&self) -> bool {
        self.dx == 0.0 && self.dy == 0.0 && self.theta == 0.0 && self.zoom == 0.0
    }
}

fn symmetric(rng: &mut impl Rng, bound: f64) -> f64 {
    if bound == 0.0 {
        0.0
    } else {
        rng.random_range(-bound..=bound)
    }
}

pub fn sample_params(spec: &AugmentationSpec, seed: u64) -> SampledParams {
    let mut rng = util::rng(seed);
    let dx = symmetric(&mut rng, spec.translate_frac);
    let dy = symmetric(&mut rng, spec.translate_frac);
    let theta = symmetric(&mut rng, spec.rotate_deg);
    let zoom = if spec.zoom_frac == 0.0 {
        0.0
    } else {
        rng.random_range(0.0..=spec.zoom_frac)
    };
    let brightness = symmetric(&mut rng, spec.brightness_frac);
    let flip = rng.random_bool(spec.hflip_prob.clamp(0.0, 1.0));
    SampledParams {
        dx,
        dy,
        theta,
        zoom,
        brightness,
        flip,
        seed,
    }
}

fn geometric(image: &RgbImage, p: &SampledParams) -> RgbImage {
    let (w, h) = image.dimensions();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (tx, ty) = (p.dx * w as f64, p.dy * h as f64);
    let scale = 1.0 + p.zoom;
    let (sin, cos) = p.theta.to_radians().sin_cos();

    // forward: out = scale * R * (in + t); inverse: in = R^T * out / scale - t
    let mut out = RgbImage::new(w, h);
    let fetch = |x: i64, y: i64, c: usize| -> f64 {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            0.0
        } else {
            image.get_pixel(x as u32, y as u32)[c] as f64
        }
    };
    for oy in 0..h {
        for ox in 0..w {
            let (ux, uy) = ((ox as f64 - cx) / scale, (oy as f64 - cy) / scale);
            let sx = cos * ux + sin * uy - tx + cx;
            let sy = -sin * ux + cos * uy - ty + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let mut px = [0u8; 3];
            for (c, v) in px.iter_mut().enumerate() {
                let top = fetch(x0, y0, c) * (1.0 - fx) + fetch(x0 + 1, y0, c) * fx;
                let bottom = fetch(x0, y0 + 1, c) * (1.0 - fx) + fetch(x0 + 1, y0 + 1, c) * fx;
                *v = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
            }
            out.put_pixel(ox, oy, Rgb(px));
        }
    }
    out
}

/// Apply one sampled transform. Output has the input's shape.
pub fn apply(image: &RgbImage, params: &SampledParams) -> RgbImage {
    let mut out = if params.is_geometric_identity() {
        image.clone()
    } else {
        geometric(image, params)
    };
    if params.brightness != 0.0 {
        let gain = 1.0 + params.brightness;
        for v in out.iter_mut() {
            *v = (*v as f64 * gain).round().clamp(0.0, 255.0) as u8;
        }
    }
    if params.flip {
        image::imageops::flip_horizontal_in_place(&mut out);
    }
    out
}

/// Expand `records` to `target` entries by adding augmented copies.
///
/// Originals are kept first; the i-th added record (output index
/// `n + i`) derives from `records[i % n]` with seed
/// `derive_seed_index(seed, n + i)`. Images are written as PNG under
/// `image_dir/<CLASS>/`.
pub fn augment_to_count(
    records: &[ImageRecord],
    target: usize,
    spec: &AugmentationSpec,
    seed: u64,
    image_dir: &Path,
) -> Result<Vec<ImageRecord>> {
    if records.is_empty() {
        return Err(Error::Precondition("augment_to_count needs at least one source record".into()));
    }
    if target < records.len() {
        return Err(Error::Precondition(format!(
            "augmentation target {target} is below the {} source record(s)",
            records.len()
        )));
    }
    spec.validate()?;
    let n = records.len();
    let added: Vec<ImageRecord> = (n..target)
        .into_par_iter()
        .map(|out_index| {
            let source = &records[(out_index - n) % n];
            let record_seed = util::derive_seed_index(seed, out_index as u64);
            let img = util::load_rgb(&source.path)?;
            let params = sample_params(spec, record_seed);
            let out = apply(&img, &params);
            let id = format!("aug:{}:{seed:016x}:{out_index:06}", source.label);
            let path = image_dir
                .join(source.label.name())
                .join(format!("aug_{seed:016x}_{out_index:06}.png"));
            util::save_png(&out, &path)?;
            Ok(ImageRecord {
                id,
                path,
                label: source.label,
                provenance: Provenance::Augmented,
                source_id: Some(source.id.clone()),
                seed: Some(record_seed),
            })
        })
        .collect::<Result<_>>()?;
    let mut out = records.to_vec();
    out.extend(added);
    Ok(out)
}
