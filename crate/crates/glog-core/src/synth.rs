//! Synthetic oriented-texture segmentation data.
//!
//! Each sample is a grayscale image of 1 to 3 random shapes (ellipses and
//! rectangles) over a textured background. Every class carries its own
//! oriented sinusoidal texture and base intensity, so orientation- and
//! frequency-selective filters have a real optimum to learn and
//! zero-crossing detectors see true class boundaries. Generation is
//! bit-deterministic per seed, with an independent generator per sample
//! index.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::LabelMap;
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

/// Synthetic dataset configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub image_size: usize,
    pub n_classes: usize,
    pub n_train: usize,
    pub n_val: usize,
    /// Cycles per pixel of each class texture (index = class id).
    pub texture_frequencies: Vec<f64>,
    /// Texture orientation in radians per class.
    pub texture_orientations: Vec<f64>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            n_classes: 4,
            n_train: 200,
            n_val: 32,
            texture_frequencies: vec![0.05, 0.15, 0.25, 0.35],
            texture_orientations: vec![
                0.0,
                std::f64::consts::FRAC_PI_4,
                std::f64::consts::FRAC_PI_2,
                3.0 * std::f64::consts::FRAC_PI_4,
            ],
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 || self.n_classes > 256 {
            return Err(Error::Constraint(format!(
                "n_classes must be in 2..=256, got {}",
                self.n_classes
            )));
        }
        if self.texture_frequencies.len() != self.n_classes
            || self.texture_orientations.len() != self.n_classes
        {
            return Err(Error::Constraint(format!(
                "texture tables must have one entry per class ({}), got {} frequencies and {} orientations",
                self.n_classes,
                self.texture_frequencies.len(),
                self.texture_orientations.len()
            )));
        }
        if self.image_size == 0 || self.noise_sigma < 0.0 {
            return Err(Error::Constraint(
                "image_size must be positive and noise_sigma non-negative".to_string(),
            ));
        }
        Ok(())
    }
}

/// One image / label-map pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationSample<T: Scalar> {
    pub image: Tensor<T>,
    pub labels: LabelMap,
}

/// Train and validation splits drawn from disjoint sample indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset<T: Scalar> {
    pub train: Vec<SegmentationSample<T>>,
    pub val: Vec<SegmentationSample<T>>,
}

/// Generate the full dataset for a configuration.
pub fn synth_generate<T: Scalar>(cfg: &SynthConfig) -> Result<SynthDataset<T>> {
    cfg.validate()?;
    let train = (0..cfg.n_train)
        .map(|i| generate_sample(cfg, i as u64))
        .collect();
    // Validation indices live far from any plausible train range.
    let val = (0..cfg.n_val)
        .map(|i| generate_sample(cfg, (1 << 40) + i as u64))
        .collect();
    Ok(SynthDataset { train, val })
}

/// Generate the sample at one index; independent of all other indices.
pub fn generate_sample<T: Scalar>(cfg: &SynthConfig, index: u64) -> SegmentationSample<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(
        cfg.seed ^ (index.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );
    let size = cfg.image_size;
    let mut labels = vec![0u8; size * size];

    let n_shapes = rng.gen_range(1..=3usize);
    for _ in 0..n_shapes {
        let class = rng.gen_range(1..cfg.n_classes) as u8;
        let cy = rng.gen_range(0.2..0.8) * size as f64;
        let cx = rng.gen_range(0.2..0.8) * size as f64;
        let ry = rng.gen_range(0.1..0.3) * size as f64;
        let rx = rng.gen_range(0.1..0.3) * size as f64;
        let rect = rng.gen_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let dy = (y as f64 - cy) / ry;
                let dx = (x as f64 - cx) / rx;
                let inside = if rect {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                } else {
                    dy * dy + dx * dx <= 1.0
                };
                if inside {
                    labels[y * size + x] = class;
                }
            }
        }
    }

    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut image = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let class = labels[y * size + x] as usize;
            let mut v = texture_value(cfg, class, x as f64, y as f64);
            if cfg.noise_sigma > 0.0 {
                v += noise.sample(&mut rng);
            }
            image.push(cast::<T>(v));
        }
    }

    SegmentationSample {
        image: Tensor::from_vec(vec![1, size, size], image).expect("size layout"),
        labels: LabelMap::from_vec(size, size, labels).expect("size layout"),
    }
}

/// Class texture: base intensity plus an oriented sinusoid.
fn texture_value(cfg: &SynthConfig, class: usize, x: f64, y: f64) -> f64 {
    let base = 0.2 + 0.6 * class as f64 / (cfg.n_classes - 1) as f64;
    let freq = cfg.texture_frequencies[class];
    let alpha = cfg.texture_orientations[class];
    let projection = x * alpha.cos() + y * alpha.sin();
    base + 0.3 * (2.0 * std::f64::consts::PI * freq * projection).sin()
}
