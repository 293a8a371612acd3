//! Parallel per-modality residual encoders with MCGA refinement between stages.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::Modality;
use crate::error::{HammError, Result};
use crate::mcga::{Mcga, McgaConfig};
use crate::nn::{max_pool2x, Conv2d, Scope};

pub const NUM_STAGES: usize = 4;

/// Where MCGA units sit in the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionPlacement {
    /// After every stage.
    Hierarchical,
    /// After the last stage only.
    Late,
    /// No MCGA.
    None,
}

impl FusionPlacement {
    pub fn has_unit(self, stage: usize) -> bool {
        match self {
            FusionPlacement::Hierarchical => true,
            FusionPlacement::Late => stage == NUM_STAGES - 1,
            FusionPlacement::None => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub stem_width: usize,
    /// Output channels of the four stages (strides 4, 8, 16, 32).
    pub widths: [usize; NUM_STAGES],
    /// Bottleneck blocks per stage.
    pub blocks: [usize; NUM_STAGES],
    pub share_weights: bool,
    pub fusion: FusionPlacement,
    pub mcga: McgaConfig,
    pub modalities: Vec<Modality>,
}

impl EncoderConfig {
    /// ResNet-50 layout: 256/512/1024/2048 channels, 3/4/6/3 bottlenecks, 224 input.
    pub fn full() -> Self {
        Self {
            image_size: 224,
            stem_width: 64,
            widths: [256, 512, 1024, 2048],
            blocks: [3, 4, 6, 3],
            share_weights: false,
            fusion: FusionPlacement::Hierarchical,
            mcga: McgaConfig::default(),
            modalities: Modality::ALL.to_vec(),
        }
    }

    /// Desk-scale layout with the same interface.
    pub fn toy() -> Self {
        Self {
            image_size: 32,
            stem_width: 8,
            widths: [16, 32, 64, 128],
            blocks: [1, 1, 1, 1],
            share_weights: false,
            fusion: FusionPlacement::Hierarchical,
            mcga: McgaConfig {
                heads: 2,
                ..McgaConfig::default()
            },
            modalities: Modality::ALL.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(HammError::Config(format!(
                "image size {} must be a positive multiple of 32",
                self.image_size
            )));
        }
        if self.widths.iter().any(|&w| w == 0 || w % 4 != 0) || self.stem_width == 0 {
            return Err(HammError::Config(format!(
                "stage widths {:?} must be positive multiples of 4",
                self.widths
            )));
        }
        if self.blocks.iter().any(|&b| b == 0) {
            return Err(HammError::Config("every stage needs at least one block".into()));
        }
        if self.modalities.is_empty() || self.modalities.len() > 3 {
            return Err(HammError::Config("one to three modalities required".into()));
        }
        let mut sorted = self.modalities.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.modalities.len() {
            return Err(HammError::Config("duplicate modality in encoder config".into()));
        }
        if self.mcga.heads == 0 {
            return Err(HammError::Config("MCGA needs at least one head".into()));
        }
        Ok(())
    }

    /// Spatial side of each stage's output.
    pub fn stage_sizes(&self) -> [usize; NUM_STAGES] {
        let s = self.image_size;
        [s / 4, s / 8, s / 16, s / 32]
    }
}

#[derive(Clone)]
struct Bottleneck {
    reduce: Conv2d,
    conv: Conv2d,
    expand: Conv2d,
    shortcut: Option<Conv2d>,
}

impl Bottleneck {
    fn new(vs: &mut Scope<'_>, in_ch: usize, out_ch: usize, stride: usize) -> Result<Self> {
        let mid = out_ch / 4;
        let shortcut = if in_ch != out_ch || stride != 1 {
            Some(Conv2d::new(&mut vs.pp("shortcut"), in_ch, out_ch, 1, stride, 0)?)
        } else {
            None
        };
        Ok(Self {
            reduce: Conv2d::new(&mut vs.pp("reduce"), in_ch, mid, 1, 1, 0)?,
            conv: Conv2d::new(&mut vs.pp("conv"), mid, mid, 3, stride, 1)?,
            expand: Conv2d::new(&mut vs.pp("expand"), mid, out_ch, 1, 1, 0)?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.reduce.forward(x)?.relu()?;
        let h = self.conv.forward(&h)?.relu()?;
        let h = self.expand.forward(&h)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

/// One modality's backbone: stem plus four stages of bottlenecks.
#[derive(Clone)]
struct Branch {
    stem: Conv2d,
    stages: Vec<Vec<Bottleneck>>,
}

impl Branch {
    fn new(vs: &mut Scope<'_>, cfg: &EncoderConfig) -> Result<Self> {
        let stem = Conv2d::new(&mut vs.pp("stem"), 3, cfg.stem_width, 7, 2, 3)?;
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut in_ch = cfg.stem_width;
        for s in 0..NUM_STAGES {
            let mut blocks = Vec::with_capacity(cfg.blocks[s]);
            for b in 0..cfg.blocks[s] {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let mut scope = vs.pp(format!("stage{}.block{b}", s + 1));
                blocks.push(Bottleneck::new(&mut scope, in_ch, cfg.widths[s], stride)?);
                in_ch = cfg.widths[s];
            }
            stages.push(blocks);
        }
        Ok(Self { stem, stages })
    }

    fn stage(&self, s: usize, x: &Tensor) -> Result<Tensor> {
        let mut h = if s == 0 {
            max_pool2x(&self.stem.forward(x)?.relu()?)?
        } else {
            x.clone()
        };
        for block in &self.stages[s] {
            h = block.forward(&h)?;
        }
        Ok(h)
    }
}

/// Refined feature maps of every stage for the encoded modalities.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub modalities: Vec<Modality>,
    /// `stages[s][k]` is stage `s + 1` of `modalities[k]`.
    pub stages: Vec<Vec<Tensor>>,
}

impl FeaturePyramid {
    pub fn get(&self, stage: usize, m: Modality) -> Option<&Tensor> {
        let k = self.modalities.iter().position(|&x| x == m)?;
        self.stages.get(stage).map(|s| &s[k])
    }

    pub fn last(&self, m: Modality) -> Option<&Tensor> {
        self.get(NUM_STAGES - 1, m)
    }

    /// All four stages for one modality, shallow to deep.
    pub fn modality_stages(&self, m: Modality) -> Option<Vec<Tensor>> {
        let k = self.modalities.iter().position(|&x| x == m)?;
        Some(self.stages.iter().map(|s| s[k].clone()).collect())
    }
}

#[derive(Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    branches: Vec<Branch>,
    mcga: Vec<Option<Mcga>>,
}

impl Encoder {
    /// Branch parameters are created before MCGA parameters, so two encoders
    /// built from the same seed share their backbone weights regardless of MCGA placement.
    pub fn new(vs: &mut Scope<'_>, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let branches = if config.share_weights {
            vec![Branch::new(&mut vs.pp("shared"), &config)?]
        } else {
            config
                .modalities
                .iter()
                .map(|m| Branch::new(&mut vs.pp(m.name()), &config))
                .collect::<Result<_>>()?
        };
        let mut mcga = Vec::with_capacity(NUM_STAGES);
        for s in 0..NUM_STAGES {
            mcga.push(if config.fusion.has_unit(s) {
                Some(Mcga::new(&mut vs.pp(format!("mcga{}", s + 1)), config.widths[s], config.mcga)?)
            } else {
                None
            });
        }
        Ok(Self {
            config,
            branches,
            mcga,
        })
    }

    pub fn mcga_units(&self) -> impl Iterator<Item = &Mcga> {
        self.mcga.iter().flatten()
    }

    fn branch(&self, m: Modality) -> Result<&Branch> {
        if self.config.share_weights {
            return Ok(&self.branches[0]);
        }
        let k = self
            .config
            .modalities
            .iter()
            .position(|&x| x == m)
            .ok_or_else(|| HammError::Shape(format!("encoder has no {} branch", m.name())))?;
        Ok(&self.branches[k])
    }

    /// Encodes every modality the encoder was built for.
    pub fn encode(&self, inputs: &[(Modality, Tensor)]) -> Result<FeaturePyramid> {
        if inputs.len() != self.config.modalities.len() {
            return Err(HammError::Shape(format!(
                "encoder expects {} modalities, got {}",
                self.config.modalities.len(),
                inputs.len()
            )));
        }
        self.encode_subset(inputs)
    }

    /// Encodes the given modalities only; MCGA attends over the present nodes.
    pub fn encode_subset(&self, inputs: &[(Modality, Tensor)]) -> Result<FeaturePyramid> {
        self.forward_impl(inputs, true)
    }

    /// Same as [`Encoder::encode_subset`] with every MCGA unit replaced by the identity.
    pub fn encode_without_mcga(&self, inputs: &[(Modality, Tensor)]) -> Result<FeaturePyramid> {
        self.forward_impl(inputs, false)
    }

    fn forward_impl(&self, inputs: &[(Modality, Tensor)], use_mcga: bool) -> Result<FeaturePyramid> {
        if inputs.is_empty() {
            return Err(HammError::Shape("at least one modality must be present".into()));
        }
        let mut order: Vec<(Modality, Tensor)> = inputs.to_vec();
        order.sort_by_key(|(m, _)| *m);
        for w in order.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(HammError::Shape(format!("modality {} given twice", w[0].0.name())));
            }
        }
        let size = self.config.image_size;
        for (m, x) in &order {
            let (_, c, h, w) = x.dims4()?;
            if c != 3 || h != size || w != size {
                return Err(HammError::Shape(format!(
                    "{} input is {c}x{h}x{w}, expected 3x{size}x{size}",
                    m.name()
                )));
            }
        }
        let modalities: Vec<Modality> = order.iter().map(|(m, _)| *m).collect();
        let branches: Vec<&Branch> = modalities.iter().map(|&m| self.branch(m)).collect::<Result<_>>()?;
        let mut current: Vec<Tensor> = order.into_iter().map(|(_, x)| x).collect();
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for s in 0..NUM_STAGES {
            let raw: Vec<Tensor> = branches
                .iter()
                .zip(&current)
                .map(|(b, x)| b.stage(s, x))
                .collect::<Result<_>>()?;
            current = match (&self.mcga[s], use_mcga) {
                (Some(unit), true) => {
                    let nodes: Vec<(Modality, Tensor)> = modalities.iter().copied().zip(raw).collect();
                    unit.forward(&nodes)?.refined
                }
                _ => raw,
            };
            stages.push(current.clone());
        }
        Ok(FeaturePyramid { modalities, stages })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    fn inputs(cfg: &EncoderConfig, b: usize) -> Vec<(Modality, Tensor)> {
        let s = cfg.image_size;
        cfg.modalities
            .iter()
            .map(|&m| (m, Tensor::rand(-1.0f32, 1.0, (b, 3, s, s), &Device::Cpu).unwrap()))
            .collect()
    }

    #[test]
    fn toy_stage_shapes() {
        let cfg = EncoderConfig {
            image_size: 64,
            ..EncoderConfig::toy()
        };
        let mut store = ParamStore::new(DType::F32, 0);
        let enc = Encoder::new(&mut store.root().pp("encoder"), cfg.clone()).unwrap();
        let pyr = enc.encode(&inputs(&cfg, 2)).unwrap();
        for (s, side) in cfg.stage_sizes().iter().enumerate() {
            for m in Modality::ALL {
                assert_eq!(pyr.get(s, m).unwrap().dims(), &[2, cfg.widths[s], *side, *side]);
            }
        }
    }

    #[test]
    fn wrong_spatial_size_rejected() {
        let cfg = EncoderConfig::toy();
        let mut store = ParamStore::new(DType::F32, 0);
        let enc = Encoder::new(&mut store.root(), cfg).unwrap();
        let x = Tensor::zeros((1, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        assert!(enc.encode_subset(&[(Modality::Vf, x)]).is_err());
        assert!(enc.encode_subset(&[]).is_err());
    }

    #[test]
    fn identity_mcga_equals_plain_encoder() {
        let cfg = EncoderConfig::toy();
        let plain_cfg = EncoderConfig {
            fusion: FusionPlacement::None,
            ..cfg.clone()
        };
        let mut s1 = ParamStore::new(DType::F32, 4);
        let mut s2 = ParamStore::new(DType::F32, 4);
        let with = Encoder::new(&mut s1.root(), cfg.clone()).unwrap();
        let plain = Encoder::new(&mut s2.root(), plain_cfg).unwrap();
        let x = inputs(&cfg, 2);
        let a = with.encode_without_mcga(&x).unwrap();
        let b = plain.encode(&x).unwrap();
        for s in 0..NUM_STAGES {
            for k in 0..3 {
                let d = (&a.stages[s][k] - &b.stages[s][k]).unwrap().abs().unwrap().max_all().unwrap();
                assert_eq!(d.to_scalar::<f32>().unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn subset_paths() {
        let cfg = EncoderConfig::toy();
        let mut store = ParamStore::new(DType::F32, 1);
        let enc = Encoder::new(&mut store.root(), cfg.clone()).unwrap();
        let x = inputs(&cfg, 2);
        let full = enc.encode(&x).unwrap();
        let subset = enc.encode_subset(&x).unwrap();
        for s in 0..NUM_STAGES {
            for k in 0..3 {
                let d = (&full.stages[s][k] - &subset.stages[s][k]).unwrap().abs().unwrap().max_all().unwrap();
                assert_eq!(d.to_scalar::<f32>().unwrap(), 0.0);
            }
        }
        let single = enc.encode_subset(&x[2..]).unwrap();
        let v = single.last(Modality::Vf).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|x| x.is_finite()));
        assert!(single.last(Modality::Fundus).is_none());
        let pair = enc.encode_subset(&[x[0].clone(), x[2].clone()]).unwrap();
        assert_eq!(pair.modalities, vec![Modality::Fundus, Modality::Vf]);
    }

    #[test]
    fn shared_weights_use_one_branch() {
        let cfg = EncoderConfig {
            share_weights: true,
            ..EncoderConfig::toy()
        };
        let mut shared = ParamStore::new(DType::F32, 0);
        Encoder::new(&mut shared.root(), cfg.clone()).unwrap();
        let mut separate = ParamStore::new(DType::F32, 0);
        Encoder::new(&mut separate.root(), EncoderConfig::toy()).unwrap();
        assert!(shared.num_scalars() < separate.num_scalars());
        assert!(shared.names().any(|n| n.starts_with("shared.")));
    }

    #[test]
    fn config_validation() {
        let mut cfg = EncoderConfig::toy();
        cfg.image_size = 48;
        assert!(cfg.validate().is_err());
        let mut cfg = EncoderConfig::toy();
        cfg.modalities = vec![Modality::Vf, Modality::Vf];
        assert!(cfg.validate().is_err());
        assert_eq!(EncoderConfig::full().stage_sizes(), [56, 28, 14, 7]);
    }
}
