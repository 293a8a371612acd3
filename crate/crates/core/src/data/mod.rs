//! Tri-modal samples, splits, augmentation, missing-modality sampling and the
//! synthetic generator.

mod augment;
mod io;
mod missing;
mod split;
mod synth;

pub use augment::{augment, AugOp, AugmentationPolicy};
pub use io::{read_dataset, read_manifest, write_dataset, write_manifest, ManifestRecord, MANIFEST_NAME};
pub use missing::{
    build_missing_eval_set, sample_missingness, DropPattern, MissingEvalConfig, MissingEvalSet,
    MissingnessConfig,
};
pub use split::{stratified_split, SplitManifest, MIN_CLASS_SIZE};
pub use synth::{generate_synthetic, generate_synthetic_with, SynthConfig, MIN_IMAGE_SIZE};

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{HammError, Result};

pub const NUM_CLASSES: usize = 4;
pub const NUM_MODALITIES: usize = 3;

/// Per-channel normalization applied when images are loaded.
pub const NORM_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const NORM_STD: [f32; 3] = [0.229, 0.224, 0.225];

pub const STAGE_NAMES: [&str; NUM_CLASSES] = ["NG", "EaG", "InG", "AdG"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Fundus,
    Oct,
    Vf,
}

impl Modality {
    pub const ALL: [Modality; NUM_MODALITIES] = [Modality::Fundus, Modality::Oct, Modality::Vf];

    pub fn index(self) -> usize {
        match self {
            Modality::Fundus => 0,
            Modality::Oct => 1,
            Modality::Vf => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Fundus => "fundus",
            Modality::Oct => "oct",
            Modality::Vf => "vf",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fundus" | "slo" | "f" => Ok(Modality::Fundus),
            "oct" | "o" => Ok(Modality::Oct),
            "vf" | "v" => Ok(Modality::Vf),
            other => Err(HammError::Config(format!("unknown modality '{other}'"))),
        }
    }

    /// Parses a comma separated list such as `fundus,vf`, in canonical order.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        let mut out = Vec::new();
        for part in s.split([',', '+']).filter(|p| !p.trim().is_empty()) {
            let m = Self::parse(part)?;
            if !out.contains(&m) {
                out.push(m);
            }
        }
        if out.is_empty() {
            return Err(HammError::Config("empty modality list".into()));
        }
        out.sort();
        Ok(out)
    }
}

/// A normalized `3 × H × W` image.
pub type Image = Array3<f32>;

/// One subject: three co-registered images, an ordinal stage label and presence flags.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalSample {
    pub id: String,
    pub label: u8,
    pub images: [Image; NUM_MODALITIES],
    pub present: [bool; NUM_MODALITIES],
}

impl MultimodalSample {
    pub fn new(id: impl Into<String>, label: u8, images: [Image; NUM_MODALITIES]) -> Result<Self> {
        let s = Self {
            id: id.into(),
            label,
            images,
            present: [true; NUM_MODALITIES],
        };
        s.validate()?;
        Ok(s)
    }

    pub fn image(&self, m: Modality) -> &Image {
        &self.images[m.index()]
    }

    pub fn is_present(&self, m: Modality) -> bool {
        self.present[m.index()]
    }

    pub fn is_full(&self) -> bool {
        self.present.iter().all(|&p| p)
    }

    pub fn num_present(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }

    pub fn image_size(&self) -> usize {
        self.images[0].shape()[1]
    }

    /// Zero-fills the modality and clears its presence flag.
    pub fn drop_modality(&mut self, m: Modality) {
        self.images[m.index()].fill(0.0);
        self.present[m.index()] = false;
    }

    pub fn validate(&self) -> Result<()> {
        if self.label as usize >= NUM_CLASSES {
            return Err(HammError::Data(format!(
                "sample {}: label {} outside 0..{NUM_CLASSES}",
                self.id, self.label
            )));
        }
        let shape = self.images[0].shape().to_vec();
        if shape[0] != 3 || shape[1] != shape[2] {
            return Err(HammError::Data(format!(
                "sample {}: expected 3xSxS images, got {:?}",
                self.id, shape
            )));
        }
        for (m, img) in Modality::ALL.iter().zip(&self.images) {
            if img.shape() != shape.as_slice() {
                return Err(HammError::Data(format!(
                    "sample {}: {} image shape {:?} differs from {:?}",
                    self.id,
                    m.name(),
                    img.shape(),
                    shape
                )));
            }
            if !self.present[m.index()] && img.iter().any(|&v| v != 0.0) {
                return Err(HammError::Data(format!(
                    "sample {}: absent {} image is not zero-filled",
                    self.id,
                    m.name()
                )));
            }
        }
        if self.num_present() == 0 {
            return Err(HammError::Data(format!("sample {}: no modality present", self.id)));
        }
        Ok(())
    }
}

/// Converts interleaved 8-bit RGB pixels into a normalized planar image.
pub fn normalize_rgb8(pixels: &[u8], size: usize) -> Image {
    let mut img = Image::zeros((3, size, size));
    for y in 0..size {
        for x in 0..size {
            for c in 0..3 {
                let v = pixels[(y * size + x) * 3 + c] as f32 / 255.0;
                img[[c, y, x]] = (v - NORM_MEAN[c]) / NORM_STD[c];
            }
        }
    }
    img
}

/// Inverse of [`normalize_rgb8`], rounding to the nearest 8-bit level.
pub fn denormalize_rgb8(img: &Image) -> Vec<u8> {
    let size = img.shape()[1];
    let mut out = vec![0u8; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            for c in 0..3 {
                let v = (img[[c, y, x]] * NORM_STD[c] + NORM_MEAN[c]) * 255.0;
                out[(y * size + x) * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

/// Deterministic generator keyed by a global seed, a stream tag and a sample id.
pub fn sample_rng(seed: u64, stream: u64, id: &str) -> ChaCha8Rng {
    // FNV-1a over the id, mixed with seed and stream.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mixed = h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ stream.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Per-class sample counts.
pub fn class_counts(samples: &[MultimodalSample]) -> [usize; NUM_CLASSES] {
    let mut counts = [0; NUM_CLASSES];
    for s in samples {
        counts[s.label as usize] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_round_trips_every_level() {
        let pixels: Vec<u8> = (0..=255u8).flat_map(|v| [v, 255 - v, v / 2]).collect();
        // 256 pixels -> 16x16 image
        let img = normalize_rgb8(&pixels, 16);
        assert_eq!(denormalize_rgb8(&img), pixels);
    }

    #[test]
    fn modality_list_parsing() {
        assert_eq!(
            Modality::parse_list("vf,fundus").unwrap(),
            vec![Modality::Fundus, Modality::Vf]
        );
        assert!(Modality::parse_list("retina").is_err());
        assert!(Modality::parse_list("").is_err());
    }

    #[test]
    fn drop_modality_zero_fills() {
        let img = Image::from_elem((3, 4, 4), 1.0);
        let mut s = MultimodalSample::new("a", 2, [img.clone(), img.clone(), img]).unwrap();
        s.drop_modality(Modality::Oct);
        assert!(!s.is_present(Modality::Oct));
        assert!(s.image(Modality::Oct).iter().all(|&v| v == 0.0));
        s.validate().unwrap();
        s.drop_modality(Modality::Fundus);
        s.drop_modality(Modality::Vf);
        assert!(s.validate().is_err());
    }

    #[test]
    fn label_out_of_range_rejected() {
        let img = Image::zeros((3, 4, 4));
        assert!(MultimodalSample::new("a", 4, [img.clone(), img.clone(), img]).is_err());
    }
}
