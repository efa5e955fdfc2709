//! Synthetic 9-class blob images for desk-scale runs and tests.
//!
//! Class `c` is a bright disk whose radius is picked by `c % 3` and whose
//! intensity by `c / 3`, placed with positional jitter on a noisy background.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{scan_directory, ClassLabel, ClassMapping, DatasetManifest};
use crate::error::Result;
use crate::util;

#[derive(Clone, Debug, PartialEq)]
pub struct BlobSpec {
    pub size: u32,
    pub radii: [f64; 3],
    pub intensities: [f64; 3],
    pub background: f64,
    pub jitter: f64,
    pub noise_std: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec {
            size: 32,
            radii: [3.0, 5.5, 9.0],
            intensities: [90.0, 160.0, 240.0],
            background: 20.0,
            jitter: 3.0,
            noise_std: 10.0,
        }
    }
}

pub fn render_blob(label: ClassLabel, seed: u64, spec: &BlobSpec) -> RgbImage {
    let mut rng = util::rng(seed);
    let c = label.index();
    let radius = spec.radii[c % 3];
    let level = spec.intensities[c / 3];
    let mid = (spec.size as f64 - 1.0) / 2.0;
    let cx = mid + rng.random_range(-spec.jitter..=spec.jitter);
    let cy = mid + rng.random_range(-spec.jitter..=spec.jitter);
    let noise = Normal::new(0.0, spec.noise_std.max(1e-12)).expect("finite std");
    RgbImage::from_fn(spec.size, spec.size, |x, y| {
        let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
        // One-pixel soft edge.
        let cover = (radius + 0.5 - d).clamp(0.0, 1.0);
        let v = spec.background + cover * (level - spec.background) + noise.sample(&mut rng);
        let v = v.round().clamp(0.0, 255.0) as u8;
        Rgb([v, v, v])
    })
}

/// Write `root/<LABEL>/img_NNNNN.png` for each (class, count) and scan it back.
pub fn write_blob_corpus(
    root: &Path,
    counts: &[(ClassLabel, usize)],
    seed: u64,
    spec: &BlobSpec,
) -> Result<DatasetManifest> {
    for &(label, n) in counts {
        let dir = root.join(label.name());
        util::ensure_dir(&dir)?;
        let class_seed = util::derive_seed(seed, label.name());
        for i in 0..n {
            let img = render_blob(label, util::derive_seed_index(class_seed, i as u64), spec);
            util::save_png(&img, &dir.join(format!("img_{i:05}.png")))?;
        }
    }
    scan_directory(root, &ClassMapping::canonical())
}

/// Desk corpus: 200 images for each major class, 10 for each rare class.
pub fn desk_counts(major: usize, rare: usize) -> Vec<(ClassLabel, usize)> {
    ClassLabel::ALL
        .iter()
        .map(|&l| (l, if l.is_rare() { rare } else { major }))
        .collect()
}
