//! Procedural nodule patches whose appearance is driven by six latent
//! attribute scores, with noisy synthetic raters on top.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{write_dataset, SampleRecord, PATCH, PATCH_PIXELS};
use crate::error::{Error, Result};
use crate::ratings::{to_class, RaterScores, MIN_RATERS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub count: usize,
    pub rater_count: usize,
    /// Standard deviation of each rater's error, in score units.
    pub rater_noise: f64,
}

impl SyntheticConfig {
    pub fn new(seed: u64, count: usize) -> Self {
        Self {
            seed,
            count,
            rater_count: 4,
            rater_noise: 0.7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("synthetic count must be positive".into()));
        }
        if self.rater_count < MIN_RATERS {
            return Err(Error::Config(format!(
                "need at least {MIN_RATERS} raters, got {}",
                self.rater_count
            )));
        }
        if !(self.rater_noise >= 0.0 && self.rater_noise.is_finite()) {
            return Err(Error::Config(format!("invalid rater noise {}", self.rater_noise)));
        }
        Ok(())
    }
}

/// Ground truth behind one synthetic sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentAttributes {
    /// Continuous scores in `[1, 5]`, in `sub, sph, mar, lob, spi, tex` order.
    pub attributes: [f64; 6],
    pub malignancy: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub record: SampleRecord,
    pub latent: LatentAttributes,
}

const SUB: usize = 0;
const SPH: usize = 1;
const MAR: usize = 2;
const LOB: usize = 3;
const SPI: usize = 4;
const TEX: usize = 5;

const BACKGROUND: f64 = 0.1;
const BACKGROUND_NOISE: f64 = 0.02;

/// Weighted attribute mix standardized to unit spread around 3, then rounded.
/// The weights are arbitrary; they only need spiculation, lobulation and
/// blurry margins to push toward malignant.
fn latent_malignancy(a: &[f64; 6]) -> u8 {
    let w = 0.3 * a[SPI] + 0.3 * a[LOB] + 0.2 * (6.0 - a[MAR]) + 0.2 * (6.0 - a[SUB]);
    // each attribute is U[1,5] with variance 16/12
    let sd = (0.26f64 * 16.0 / 12.0).sqrt();
    to_class(3.0 + (w - 3.0) / sd)
}

struct Shape {
    cx: f64,
    cy: f64,
    major: f64,
    minor: f64,
    orientation: f64,
    lob_amp: f64,
    lob_freq: f64,
    lob_phase: f64,
    spi_amp: f64,
    spi_freq: f64,
    spi_phase: f64,
}

impl Shape {
    fn sample(rng: &mut ChaCha8Rng, t: &[f64; 6]) -> Self {
        let center = (PATCH as f64 - 1.0) / 2.0;
        let major = rng.gen_range(6.0..8.0);
        Self {
            cx: center + rng.gen_range(-1.0..1.0),
            cy: center + rng.gen_range(-1.0..1.0),
            major,
            minor: major * (1.0 - 0.5 * (1.0 - t[SPH])),
            orientation: rng.gen_range(0.0..PI),
            lob_amp: 0.25 * t[LOB],
            lob_freq: f64::from(rng.gen_range(2u32..=4)),
            lob_phase: rng.gen_range(0.0..2.0 * PI),
            spi_amp: 0.55 * t[SPI],
            spi_freq: f64::from(rng.gen_range(6u32..=9)),
            spi_phase: rng.gen_range(0.0..2.0 * PI),
        }
    }

    fn radius(&self, theta: f64) -> f64 {
        let phi = theta - self.orientation;
        let (a, b) = (self.major, self.minor);
        let ellipse = a * b / ((b * phi.cos()).powi(2) + (a * phi.sin()).powi(2)).sqrt();
        let lob = 1.0 + self.lob_amp * (self.lob_freq * theta + self.lob_phase).sin();
        let spike = (self.spi_freq * theta + self.spi_phase).sin().max(0.0).powi(3);
        ellipse * lob * (1.0 + self.spi_amp * spike)
    }
}

fn gaussian_blur(img: &[f64], sigma: f64) -> Vec<f64> {
    let half = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-half..=half).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let n = PATCH as isize;
    let clamp = |v: isize| v.clamp(0, n - 1) as usize;
    let mut tmp = vec![0.0; PATCH_PIXELS];
    for y in 0..PATCH {
        for x in 0..PATCH {
            tmp[y * PATCH + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * img[y * PATCH + clamp(x as isize + k as isize - half)])
                .sum();
        }
    }
    let mut out = vec![0.0; PATCH_PIXELS];
    for y in 0..PATCH {
        for x in 0..PATCH {
            out[y * PATCH + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[clamp(y as isize + k as isize - half) * PATCH + x])
                .sum();
        }
    }
    out
}

fn render(rng: &mut ChaCha8Rng, latent: &[f64; 6]) -> (Vec<f32>, Vec<u8>) {
    let t: [f64; 6] = std::array::from_fn(|i| (latent[i] - 1.0) / 4.0);
    let shape = Shape::sample(rng, &t);
    let mut coverage = vec![0.0; PATCH_PIXELS];
    let mut texture = vec![0.0; PATCH_PIXELS];
    let mut mask = vec![0u8; PATCH_PIXELS];
    for y in 0..PATCH {
        for x in 0..PATCH {
            let (dx, dy) = (x as f64 - shape.cx, y as f64 - shape.cy);
            let d = dx.hypot(dy);
            let r = shape.radius(dy.atan2(dx));
            // unblurred coverage; exceeds half its peak exactly where d < r
            coverage[y * PATCH + x] = (r - d + 0.5).clamp(0.0, 1.0);
            mask[y * PATCH + x] = u8::from(d < r);
            let noise: f64 = rng.gen();
            texture[y * PATCH + x] = 1.0 - 0.6 * (1.0 - t[TEX]) * noise;
        }
    }
    // the blur softens the edge only; texture is applied afterwards
    let edge = gaussian_blur(&coverage, 0.5 + (1.0 - t[MAR]));
    let contrast = 0.25 + 0.65 * t[SUB];
    let bg_noise = Normal::new(0.0, BACKGROUND_NOISE).expect("positive sd");
    let image = edge
        .iter()
        .zip(&texture)
        .map(|(&e, &tex)| (BACKGROUND + bg_noise.sample(rng) + contrast * e * tex).clamp(0.0, 1.0) as f32)
        .collect();
    (image, mask)
}

fn rate(rng: &mut ChaCha8Rng, noise: &Option<Normal<f64>>, latent: f64, raters: usize) -> Vec<u8> {
    (0..raters)
        .map(|_| to_class(latent + noise.as_ref().map_or(0.0, |n| n.sample(rng))))
        .collect()
}

/// Generates `cfg.count` samples in memory, deterministically from `cfg.seed`.
pub fn synthesize(cfg: &SyntheticConfig) -> Result<Vec<SyntheticSample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = (cfg.rater_noise > 0.0).then(|| Normal::new(0.0, cfg.rater_noise).expect("validated"));
    let mut samples = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let attributes: [f64; 6] = std::array::from_fn(|_| rng.gen_range(1.0..=5.0));
        let malignancy = latent_malignancy(&attributes);
        let (image, mask) = render(&mut rng, &attributes);
        let mal_scores = rate(&mut rng, &noise, f64::from(malignancy), cfg.rater_count);
        let attr_scores: [Vec<u8>; 6] = std::array::from_fn(|a| rate(&mut rng, &noise, attributes[a], cfg.rater_count));
        let ratings = RaterScores::new(mal_scores, attr_scores)?;
        let record = SampleRecord::new(format!("syn-{i:05}"), image, mask, ratings)?;
        samples.push(SyntheticSample {
            record,
            latent: LatentAttributes { attributes, malignancy },
        });
    }
    Ok(samples)
}

/// Generates samples and writes them to `out` in the dataset directory format.
pub fn generate_synthetic(cfg: &SyntheticConfig, out: &Path) -> Result<Vec<SyntheticSample>> {
    let samples = synthesize(cfg)?;
    let records: Vec<SampleRecord> = samples.iter().map(|s| s.record.clone()).collect();
    write_dataset(out, &records)?;
    Ok(samples)
}
