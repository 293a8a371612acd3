//! Desk-scale synthetic stand-in for a clinical tri-modal dataset.
//!
//! Every sample carries a latent stage. Each modality renders its own noisy
//! reading of that stage, so the three views are partially redundant:
//! - fundus: two concentric discs whose cup-to-disc ratio grows with stage,
//! - OCT: a bright retinal band that thins with stage,
//! - VF: a grid of test points where the number of dark defects grows with stage.
//!
//! A fraction of samples has one degraded modality (heavy noise and an
//! uninformative stage reading).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{normalize_rgb8, Image, MultimodalSample, NUM_CLASSES, NUM_MODALITIES};
use crate::error::{HammError, Result};

pub const MIN_IMAGE_SIZE: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub image_size: usize,
    /// Standard deviation of each modality's stage reading (fundus, OCT, VF).
    pub severity_noise: [f64; NUM_MODALITIES],
    /// Standard deviation of additive pixel noise, in 8-bit levels.
    pub pixel_noise: f64,
    /// Probability that one modality of a sample is degraded.
    pub artifact_prob: f64,
}

impl SynthConfig {
    pub fn new(image_size: usize) -> Self {
        Self {
            image_size,
            severity_noise: [0.55, 0.55, 0.45],
            pixel_noise: 10.0,
            artifact_prob: 0.5,
        }
    }
}

struct Canvas {
    size: usize,
    px: Vec<[f64; 3]>,
}

impl Canvas {
    fn new(size: usize, fill: [f64; 3]) -> Self {
        Self {
            size,
            px: vec![fill; size * size],
        }
    }

    fn set(&mut self, x: usize, y: usize, c: [f64; 3]) {
        self.px[y * self.size + x] = c;
    }

    fn disc(&mut self, cx: f64, cy: f64, r: f64, color: [f64; 3]) {
        for y in 0..self.size {
            for x in 0..self.size {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                if dx * dx + dy * dy <= r * r {
                    self.set(x, y, color);
                }
            }
        }
    }

    fn finish<R: Rng>(self, noise: f64, rng: &mut R) -> Image {
        let normal = Normal::new(0.0, noise.max(1e-9)).expect("finite std");
        let mut bytes = Vec::with_capacity(self.size * self.size * 3);
        for p in &self.px {
            for &v in p {
                let n = if noise > 0.0 { normal.sample(rng) } else { 0.0 };
                bytes.push((v + n).round().clamp(0.0, 255.0) as u8);
            }
        }
        normalize_rgb8(&bytes, self.size)
    }
}

fn render_fundus<R: Rng>(size: usize, severity: f64, noise: f64, rng: &mut R) -> Image {
    let s = size as f64;
    let mut cv = Canvas::new(size, [0.0; 3]);
    let (cx0, cy0) = (s / 2.0, s / 2.0);
    for y in 0..size {
        for x in 0..size {
            let d = ((x as f64 + 0.5 - cx0).powi(2) + (y as f64 + 0.5 - cy0).powi(2)).sqrt() / s;
            let shade = 1.0 - 0.6 * d;
            cv.set(x, y, [190.0 * shade, 80.0 * shade, 45.0 * shade]);
        }
    }
    let jitter = s / 16.0;
    let cx = cx0 + rng.random_range(-jitter..=jitter);
    let cy = cy0 + rng.random_range(-jitter..=jitter);
    let disc_r = 0.3 * s;
    let cdr = (0.25 + 0.17 * severity).clamp(0.1, 0.95);
    cv.disc(cx, cy, disc_r, [235.0, 170.0, 100.0]);
    cv.disc(cx, cy, disc_r * cdr, [250.0, 240.0, 205.0]);
    cv.finish(noise, rng)
}

fn render_oct<R: Rng>(size: usize, severity: f64, noise: f64, rng: &mut R) -> Image {
    let s = size as f64;
    let mut cv = Canvas::new(size, [25.0, 25.0, 30.0]);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let thickness = (0.36 - 0.07 * severity).clamp(0.06, 0.5) * s;
    for x in 0..size {
        let centre = s / 2.0 + 0.08 * s * (std::f64::consts::TAU * x as f64 / s + phase).sin();
        for y in 0..size {
            let d = (y as f64 + 0.5 - centre).abs();
            if d <= thickness / 2.0 {
                let v = 215.0 - 60.0 * d / (thickness / 2.0);
                cv.set(x, y, [v, v, v]);
            }
        }
    }
    cv.finish(noise, rng)
}

fn render_vf<R: Rng>(size: usize, severity: f64, noise: f64, rng: &mut R) -> Image {
    const GRID: usize = 8;
    let mut cv = Canvas::new(size, [205.0, 205.0, 205.0]);
    let cell = size / GRID;
    let frac = (severity / 3.6).clamp(0.0, 1.0);
    let n_defects = (frac * 0.65 * (GRID * GRID) as f64).round() as usize;
    let mut cells: Vec<usize> = (0..GRID * GRID).collect();
    cells.shuffle(rng);
    for &c in cells.iter().take(n_defects) {
        let (gx, gy) = (c % GRID, c / GRID);
        let depth = 40.0 + 40.0 * rng.random::<f64>();
        for y in gy * cell..(gy + 1) * cell {
            for x in gx * cell..(gx + 1) * cell {
                cv.set(x, y, [depth, depth, depth]);
            }
        }
    }
    cv.finish(noise, rng)
}

/// Generates `n_per_class` samples for each of the four stages with the default config.
pub fn generate_synthetic(n_per_class: usize, image_size: usize, seed: u64) -> Result<Vec<MultimodalSample>> {
    generate_synthetic_with(n_per_class, &SynthConfig::new(image_size), seed)
}

pub fn generate_synthetic_with(
    n_per_class: usize,
    config: &SynthConfig,
    seed: u64,
) -> Result<Vec<MultimodalSample>> {
    if n_per_class == 0 {
        return Err(HammError::Config("n_per_class must be at least 1".into()));
    }
    if config.image_size < MIN_IMAGE_SIZE {
        return Err(HammError::Config(format!(
            "image size {} below minimum {MIN_IMAGE_SIZE}",
            config.image_size
        )));
    }
    if config.image_size % 8 != 0 {
        return Err(HammError::Config(format!(
            "image size {} must be a multiple of 8",
            config.image_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = config.image_size;
    let mut out = Vec::with_capacity(n_per_class * NUM_CLASSES);
    for stage in 0..NUM_CLASSES {
        for j in 0..n_per_class {
            let degraded = if rng.random_bool(config.artifact_prob) {
                Some(rng.random_range(0..NUM_MODALITIES))
            } else {
                None
            };
            let mut reading = [0.0; NUM_MODALITIES];
            let mut noise = [config.pixel_noise; NUM_MODALITIES];
            for (k, r) in reading.iter_mut().enumerate() {
                let n = Normal::new(0.0, config.severity_noise[k].max(1e-9)).expect("finite std");
                *r = stage as f64 + n.sample(&mut rng);
                if degraded == Some(k) {
                    *r = rng.random_range(0.0..3.0);
                    noise[k] = 4.0 * config.pixel_noise + 30.0;
                }
            }
            let images = [
                render_fundus(size, reading[0], noise[0], &mut rng),
                render_oct(size, reading[1], noise[1], &mut rng),
                render_vf(size, reading[2], noise[2], &mut rng),
            ];
            out.push(MultimodalSample::new(format!("syn-{stage}-{j:04}"), stage as u8, images)?);
        }
    }
    Ok(out)
}
