//! Masked-autoencoder pretraining: patch masks, skip-connected light decoders,
//! reconstruction heads and the masked reconstruction loss.

use candle_core::{DType, Device, Tensor};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Modality;
use crate::encoder::{Encoder, EncoderConfig, FeaturePyramid, NUM_STAGES};
use crate::error::{HammError, Result};
use crate::nn::{upsample_bilinear2x, Conv2d, Scope, SeparableConv};

/// Masking ratio and patch geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskPlan {
    /// Fraction of patches zeroed.
    pub ratio: f64,
    pub patch_size: usize,
}

impl Default for MaskPlan {
    fn default() -> Self {
        Self {
            ratio: 0.7,
            patch_size: 32,
        }
    }
}

impl MaskPlan {
    pub fn validate(&self, image_size: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(HammError::Config(format!("mask ratio {} outside [0, 1]", self.ratio)));
        }
        if self.patch_size == 0 || image_size % self.patch_size != 0 {
            return Err(HammError::Config(format!(
                "image size {image_size} is not divisible by patch size {}",
                self.patch_size
            )));
        }
        Ok(())
    }
}

/// Number of masked patches for a ratio over `n` patches.
pub fn masked_patch_count(ratio: f64, n: usize) -> usize {
    (ratio * n as f64).round() as usize
}

/// Binary patch mask; `keep[p]` is false for masked patches (row-major grid).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchMask {
    pub grid: usize,
    pub patch_size: usize,
    pub keep: Vec<bool>,
}

impl PatchMask {
    pub fn image_size(&self) -> usize {
        self.grid * self.patch_size
    }

    pub fn masked_patches(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }

    /// Full-resolution mask, 1 for kept pixels, row-major.
    pub fn pixels(&self) -> Vec<f32> {
        let s = self.image_size();
        let mut out = vec![0f32; s * s];
        for y in 0..s {
            for x in 0..s {
                let p = (y / self.patch_size) * self.grid + x / self.patch_size;
                out[y * s + x] = if self.keep[p] { 1.0 } else { 0.0 };
            }
        }
        out
    }

    pub fn masked_pixels(&self) -> usize {
        self.masked_patches() * self.patch_size * self.patch_size
    }
}

/// Zeroes a uniformly random subset of `round(ratio * n_patches)` patches.
pub fn make_mask<R: Rng + ?Sized>(
    image_size: usize,
    patch_size: usize,
    ratio: f64,
    rng: &mut R,
) -> Result<PatchMask> {
    MaskPlan { ratio, patch_size }.validate(image_size)?;
    let grid = image_size / patch_size;
    let n = grid * grid;
    let mut keep = vec![true; n];
    for i in sample(rng, n, masked_patch_count(ratio, n)) {
        keep[i] = false;
    }
    Ok(PatchMask {
        grid,
        patch_size,
        keep,
    })
}

/// Stacks per-sample masks into a `(B, 1, H, W)` tensor.
pub fn mask_tensor(masks: &[PatchMask], dtype: DType, device: &Device) -> Result<Tensor> {
    let s = masks
        .first()
        .map(PatchMask::image_size)
        .ok_or_else(|| HammError::Shape("empty mask batch".into()))?;
    let mut data = Vec::with_capacity(masks.len() * s * s);
    for m in masks {
        if m.image_size() != s {
            return Err(HammError::Shape("masks of different sizes in one batch".into()));
        }
        data.extend(m.pixels());
    }
    Ok(Tensor::from_vec(data, (masks.len(), 1, s, s), device)?.to_dtype(dtype)?)
}

/// `s ⊙ M`, with `M` broadcast over channels.
pub fn apply_mask(images: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (b, _, h, w) = images.dims4()?;
    let (mb, mc, mh, mw) = mask.dims4()?;
    if mb != b || mc != 1 || mh != h || mw != w {
        return Err(HammError::Shape(format!(
            "mask {:?} does not align with images {:?}",
            mask.dims(),
            images.dims()
        )));
    }
    Ok(images.broadcast_mul(mask)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub width: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { width: 256 }
    }
}

/// Light decoder for one modality.
#[derive(Clone)]
pub struct Decoder {
    proj: Vec<Conv2d>,
    blocks: Vec<SeparableConv>,
    pub head: Conv2d,
}

impl Decoder {
    pub fn new(vs: &mut Scope<'_>, enc: &EncoderConfig, cfg: DecoderConfig) -> Result<Self> {
        if cfg.width == 0 {
            return Err(HammError::Config("decoder width must be positive".into()));
        }
        let d = cfg.width;
        let mut proj = Vec::with_capacity(NUM_STAGES);
        let mut blocks = Vec::with_capacity(NUM_STAGES);
        for s in 0..NUM_STAGES {
            proj.push(Conv2d::new(&mut vs.pp(format!("delta{}", s + 1)), enc.widths[s], d, 1, 1, 0)?);
            blocks.push(SeparableConv::new(&mut vs.pp(format!("phi{}", s + 1)), d, d)?);
        }
        let head = Conv2d::new(&mut vs.pp("head"), d, 3, 1, 1, 0)?;
        Ok(Self { proj, blocks, head })
    }

    pub fn width(&self) -> usize {
        self.head.weight.dims()[1]
    }

    /// Stage features shallow to deep → `D_1` at half the input resolution.
    pub fn decode(&self, stages: &[Tensor]) -> Result<Tensor> {
        if stages.len() != NUM_STAGES {
            return Err(HammError::Shape(format!("decoder needs {NUM_STAGES} stages, got {}", stages.len())));
        }
        let mut running: Option<Tensor> = None;
        for s in (0..NUM_STAGES).rev() {
            let skip = self.proj[s].forward(&stages[s])?;
            let a = match running {
                None => skip,
                Some(d) => {
                    if d.dims() != skip.dims() {
                        return Err(HammError::Shape(format!(
                            "stage {} skip {:?} does not match decoder state {:?}",
                            s + 1,
                            skip.dims(),
                            d.dims()
                        )));
                    }
                    (skip + d)?
                }
            };
            let up = upsample_bilinear2x(&a)?;
            running = Some(self.blocks[s].forward(&up)?.relu()?);
        }
        Ok(running.expect("at least one stage"))
    }

    /// `D_1` → 3-channel image at full resolution.
    pub fn reconstruct(&self, d1: &Tensor) -> Result<Tensor> {
        self.head.forward(&upsample_bilinear2x(d1)?)
    }
}

/// Encoder plus one decoder per modality.
#[derive(Clone)]
pub struct MaskedAutoencoder {
    pub encoder: Encoder,
    pub decoders: Vec<(Modality, Decoder)>,
}

impl MaskedAutoencoder {
    /// Registers parameters under `encoder.*` and `decoder.<modality>.*`.
    pub fn new(vs: &mut Scope<'_>, enc: EncoderConfig, dec: DecoderConfig) -> Result<Self> {
        let encoder = Encoder::new(&mut vs.pp("encoder"), enc)?;
        let decoders = encoder
            .config
            .modalities
            .clone()
            .into_iter()
            .map(|m| Ok((m, Decoder::new(&mut vs.pp(format!("decoder.{}", m.name())), &encoder.config, dec)?)))
            .collect::<Result<_>>()?;
        Ok(Self { encoder, decoders })
    }

    pub fn decoder(&self, m: Modality) -> Result<&Decoder> {
        self.decoders
            .iter()
            .find(|(x, _)| *x == m)
            .map(|(_, d)| d)
            .ok_or_else(|| HammError::Shape(format!("no decoder for {}", m.name())))
    }

    /// `D_1` per modality of a pyramid.
    pub fn decode(&self, pyramid: &FeaturePyramid) -> Result<Vec<(Modality, Tensor)>> {
        pyramid
            .modalities
            .iter()
            .map(|&m| {
                let stages = pyramid.modality_stages(m).expect("modality in pyramid");
                Ok((m, self.decoder(m)?.decode(&stages)?))
            })
            .collect()
    }

    /// Masked inputs → reconstructions, in canonical modality order.
    pub fn forward(&self, masked: &[(Modality, Tensor)]) -> Result<Vec<(Modality, Tensor)>> {
        let pyramid = self.encoder.encode(masked)?;
        self.decode(&pyramid)?
            .into_iter()
            .map(|(m, d1)| Ok((m, self.decoder(m)?.reconstruct(&d1)?)))
            .collect()
    }
}

/// Squared error summed over masked pixels, divided by `N · |K| · P`, where
/// `P` counts masked pixel values (positions × channels) of one image.
///
/// `mask` is `(N, 1, H, W)` with 1 on kept pixels. Every image of a modality
/// must mask the same number of pixels (which [`make_mask`] guarantees).
pub fn masked_mse(items: &[(Tensor, Tensor, Tensor)]) -> Result<Tensor> {
    if items.is_empty() {
        return Err(HammError::Shape("masked_mse needs at least one modality".into()));
    }
    let k = items.len();
    let mut total: Option<Tensor> = None;
    for (target, pred, mask) in items {
        if target.dims() != pred.dims() {
            return Err(HammError::Shape(format!(
                "reconstruction {:?} vs target {:?}",
                pred.dims(),
                target.dims()
            )));
        }
        let (n, c, h, w) = target.dims4()?;
        if mask.dims() != [n, 1, h, w] {
            return Err(HammError::Shape(format!("mask {:?} vs images {:?}", mask.dims(), target.dims())));
        }
        let hidden = (1.0 - mask)?;
        let counts: Vec<f64> = hidden
            .to_dtype(DType::F64)?
            .flatten_from(1)?
            .sum(1)?
            .to_vec1::<f64>()?;
        let p = counts[0];
        if counts.iter().any(|&q| q != p) {
            return Err(HammError::Shape("images in a batch mask different pixel counts".into()));
        }
        if p == 0.0 {
            return Err(HammError::Numeric("no masked pixels; mask ratio must be positive".into()));
        }
        let p = p * c as f64;
        let err = (pred - target)?.broadcast_mul(&hidden)?.sqr()?.sum_all()?;
        let term = (err / (n as f64 * k as f64 * p))?;
        total = Some(match total {
            None => term,
            Some(t) => (t + term)?,
        });
    }
    Ok(total.expect("nonempty"))
}
