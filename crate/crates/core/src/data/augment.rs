use ndarray::{s, Axis};
use rand::Rng;

use super::{Image, Modality, MultimodalSample, NORM_MEAN, NORM_STD, NUM_MODALITIES};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugOp {
    ResizedCrop,
    ColorJitter,
    VerticalFlip,
}

/// Training-time augmentation. The horizontal flip is drawn once per sample
/// and shared by all three modalities when `sync_hflip` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationPolicy {
    pub ops: [Vec<AugOp>; NUM_MODALITIES],
    pub flip_prob: f64,
    /// Brightness, contrast and saturation factors are drawn from this range.
    pub jitter: (f32, f32),
    /// Area fraction range of the random resized crop.
    pub crop_scale: (f64, f64),
    /// Aspect-ratio range of the random resized crop.
    pub crop_ratio: (f64, f64),
    pub sync_hflip: bool,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            ops: [
                vec![AugOp::ResizedCrop, AugOp::ColorJitter, AugOp::VerticalFlip],
                vec![AugOp::ColorJitter],
                vec![AugOp::VerticalFlip],
            ],
            flip_prob: 0.5,
            jitter: (0.9, 1.1),
            crop_scale: (0.8, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            sync_hflip: true,
        }
    }
}

impl AugmentationPolicy {
    /// Same op lists as the default policy, but every op degenerates to the identity.
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            jitter: (1.0, 1.0),
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            ..Self::default()
        }
    }
}

fn flip_horizontal(img: &mut Image) {
    img.invert_axis(Axis(2));
    *img = img.as_standard_layout().to_owned();
}

fn flip_vertical(img: &mut Image) {
    img.invert_axis(Axis(1));
    *img = img.as_standard_layout().to_owned();
}

fn bilinear_sample(plane: &ndarray::ArrayView2<f32>, y: f64, x: f64) -> f32 {
    let (h, w) = plane.dim();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let top = plane[[y0, x0]] * (1.0 - fx) + plane[[y0, x1]] * fx;
    let bottom = plane[[y1, x0]] * (1.0 - fx) + plane[[y1, x1]] * fx;
    top * (1.0 - fy) + bottom * fy
}

fn resized_crop<R: Rng>(img: &Image, policy: &AugmentationPolicy, rng: &mut R) -> Image {
    let size = img.shape()[1];
    let (lo, hi) = policy.crop_scale;
    let area = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let (rlo, rhi) = (policy.crop_ratio.0.ln(), policy.crop_ratio.1.ln());
    let ratio = if rhi > rlo { rng.random_range(rlo..=rhi) } else { rlo }.exp();
    let cw = ((area * ratio).sqrt() * size as f64).round().clamp(1.0, size as f64) as usize;
    let ch = ((area / ratio).sqrt() * size as f64).round().clamp(1.0, size as f64) as usize;
    if cw == size && ch == size {
        return img.clone();
    }
    let x0 = rng.random_range(0..=size - cw) as f64;
    let y0 = rng.random_range(0..=size - ch) as f64;
    let sy = ch as f64 / size as f64;
    let sx = cw as f64 / size as f64;
    let mut out = Image::zeros(img.raw_dim());
    for c in 0..3 {
        let plane = img.slice(s![c, .., ..]);
        for y in 0..size {
            let src_y = y0 + (y as f64 + 0.5) * sy - 0.5;
            for x in 0..size {
                let src_x = x0 + (x as f64 + 0.5) * sx - 0.5;
                out[[c, y, x]] = bilinear_sample(&plane, src_y, src_x);
            }
        }
    }
    out
}

/// Brightness, contrast and saturation in pixel space, clamped to [0, 1].
fn color_jitter<R: Rng>(img: &mut Image, range: (f32, f32), rng: &mut R) {
    let draw = |rng: &mut R| {
        if range.1 > range.0 {
            rng.random_range(range.0..=range.1)
        } else {
            range.0
        }
    };
    let brightness = draw(rng);
    let contrast = draw(rng);
    let saturation = draw(rng);
    if brightness == 1.0 && contrast == 1.0 && saturation == 1.0 {
        return;
    }
    let size = img.shape()[1];
    let mut px = img.clone();
    for c in 0..3 {
        px.slice_mut(s![c, .., ..])
            .mapv_inplace(|v| ((v * NORM_STD[c] + NORM_MEAN[c]) * brightness).clamp(0.0, 1.0));
    }
    let gray = |px: &Image, y: usize, x: usize| {
        0.299 * px[[0, y, x]] + 0.587 * px[[1, y, x]] + 0.114 * px[[2, y, x]]
    };
    let mut mean_gray = 0.0f32;
    for y in 0..size {
        for x in 0..size {
            mean_gray += gray(&px, y, x);
        }
    }
    mean_gray /= (size * size) as f32;
    px.mapv_inplace(|v| (mean_gray + contrast * (v - mean_gray)).clamp(0.0, 1.0));
    for y in 0..size {
        for x in 0..size {
            let g = gray(&px, y, x);
            for c in 0..3 {
                px[[c, y, x]] = (g + saturation * (px[[c, y, x]] - g)).clamp(0.0, 1.0);
            }
        }
    }
    for c in 0..3 {
        let src = px.slice(s![c, .., ..]);
        img.slice_mut(s![c, .., ..])
            .zip_mut_with(&src, |dst, &v| *dst = (v - NORM_MEAN[c]) / NORM_STD[c]);
    }
}

/// Applies `policy` to one sample. Absent modalities stay zero-filled.
pub fn augment<R: Rng>(
    sample: &MultimodalSample,
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> MultimodalSample {
    let mut out = sample.clone();
    let shared_hflip = rng.random_bool(policy.flip_prob);
    for m in Modality::ALL {
        let i = m.index();
        let hflip = if policy.sync_hflip {
            shared_hflip
        } else {
            rng.random_bool(policy.flip_prob)
        };
        if !sample.present[i] {
            continue;
        }
        let img = &mut out.images[i];
        for op in &policy.ops[i] {
            match op {
                AugOp::ResizedCrop => *img = resized_crop(img, policy, rng),
                AugOp::ColorJitter => color_jitter(img, policy.jitter, rng),
                AugOp::VerticalFlip => {
                    if rng.random_bool(policy.flip_prob) {
                        flip_vertical(img);
                    }
                }
            }
        }
        if hflip {
            flip_horizontal(img);
        }
    }
    out
}
