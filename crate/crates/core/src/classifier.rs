//! Fine-tuning head: pool-then-concatenate fusion, two-layer classifier, cross-entropy.

use candle_core::{DType, Tensor};

use crate::data::{Modality, NUM_CLASSES};
use crate::encoder::{Encoder, EncoderConfig, FeaturePyramid};
use crate::error::{HammError, Result};
use crate::nn::{global_avg_pool, softmax_last, Linear, Scope};

pub const PROB_FLOOR: f64 = 1e-12;

/// Global-average-pools each stage-4 map and concatenates the vectors in
/// `layout` order. Modalities in `layout` but missing from `maps` contribute zeros.
pub fn fuse(maps: &[(Modality, Tensor)], layout: &[(Modality, usize)]) -> Result<Tensor> {
    let batch = maps
        .first()
        .map(|(_, t)| t.dims()[0])
        .ok_or_else(|| HammError::Shape("fusion needs at least one feature map".into()))?;
    let (dtype, device) = (maps[0].1.dtype(), maps[0].1.device().clone());
    for (m, _) in maps {
        if !layout.iter().any(|(l, _)| l == m) {
            return Err(HammError::Shape(format!("{} is not part of the fusion layout", m.name())));
        }
    }
    let mut parts = Vec::with_capacity(layout.len());
    for &(m, c) in layout {
        match maps.iter().find(|(x, _)| *x == m) {
            Some((_, t)) => {
                let (b, tc, _, _) = t.dims4()?;
                if b != batch || tc != c {
                    return Err(HammError::Shape(format!(
                        "{} map is {:?}, expected batch {batch} and {c} channels",
                        m.name(),
                        t.dims()
                    )));
                }
                parts.push(global_avg_pool(t)?);
            }
            None => parts.push(Tensor::zeros((batch, c), dtype, &device)?),
        }
    }
    Ok(Tensor::cat(&parts, 1)?)
}

/// Two fully connected layers with ReLU between them.
#[derive(Clone)]
pub struct ClassifierHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ClassifierHead {
    pub fn new(vs: &mut Scope<'_>, in_dim: usize, hidden: usize) -> Result<Self> {
        if in_dim == 0 || hidden == 0 {
            return Err(HammError::Config("classifier dimensions must be positive".into()));
        }
        Ok(Self {
            fc1: Linear::new(&mut vs.pp("fc1"), in_dim, hidden)?,
            fc2: Linear::new(&mut vs.pp("fc2"), hidden, NUM_CLASSES)?,
        })
    }

    pub fn logits(&self, fused: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(fused)?.relu()?)
    }

    /// `(logits, probabilities)`.
    pub fn classify(&self, fused: &Tensor) -> Result<(Tensor, Tensor)> {
        let logits = self.logits(fused)?;
        let probs = softmax_last(&logits)?;
        Ok((logits, probs))
    }
}

/// `-(1/N) Σ log max(p_label, 1e-12)`.
pub fn ce_loss(probs: &Tensor, labels: &[u8]) -> Result<Tensor> {
    let (n, k) = probs.dims2()?;
    if n != labels.len() || n == 0 {
        return Err(HammError::Shape(format!("{n} predictions for {} labels", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(HammError::Data(format!("label {bad} outside 0..{k}")));
    }
    let mut onehot = vec![0f64; n * k];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * k + l as usize] = 1.0;
    }
    let y = Tensor::from_vec(onehot, (n, k), probs.device())?.to_dtype(probs.dtype())?;
    let logp = probs.clamp(PROB_FLOOR, f64::INFINITY)?.log()?;
    Ok(((y * logp)?.sum_all()? / -(n as f64))?)
}

/// Encoder plus classification head.
#[derive(Clone)]
pub struct HammModel {
    pub encoder: Encoder,
    pub head: ClassifierHead,
}

impl HammModel {
    /// Registers parameters under `encoder.*` and `head.*`.
    pub fn new(vs: &mut Scope<'_>, enc: EncoderConfig, hidden: usize) -> Result<Self> {
        let encoder = Encoder::new(&mut vs.pp("encoder"), enc)?;
        let in_dim = encoder.config.widths[3] * encoder.config.modalities.len();
        let head = ClassifierHead::new(&mut vs.pp("head"), in_dim, hidden)?;
        Ok(Self { encoder, head })
    }

    pub fn layout(&self) -> Vec<(Modality, usize)> {
        let c = self.encoder.config.widths[3];
        let mut mods = self.encoder.config.modalities.clone();
        mods.sort();
        mods.into_iter().map(|m| (m, c)).collect()
    }

    pub fn fuse_pyramid(&self, pyramid: &FeaturePyramid) -> Result<Tensor> {
        let maps: Vec<(Modality, Tensor)> = pyramid
            .modalities
            .iter()
            .map(|&m| (m, pyramid.last(m).expect("present").clone()))
            .collect();
        fuse(&maps, &self.layout())
    }

    /// Inputs may be any nonempty subset of the configured modalities.
    pub fn forward(&self, inputs: &[(Modality, Tensor)]) -> Result<(Tensor, Tensor)> {
        let pyramid = self.encoder.encode_subset(inputs)?;
        self.head.classify(&self.fuse_pyramid(&pyramid)?)
    }

    pub fn probabilities(&self, inputs: &[(Modality, Tensor)]) -> Result<Vec<Vec<f64>>> {
        let (_, p) = self.forward(inputs)?;
        Ok(p.to_dtype(DType::F64)?.to_vec2::<f64>()?)
    }
}

/// One row of the prediction dump.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub label: u8,
    pub probs: [f64; NUM_CLASSES],
}

pub const PREDICTION_HEADER: &str = "# id\tlabel\tp0\tp1\tp2\tp3";

/// Tab-separated `id label p0 p1 p2 p3`, probabilities written round-trip exact.
pub fn predictions_to_text(preds: &[Prediction]) -> String {
    let mut out = String::with_capacity(preds.len() * 96);
    out.push_str(PREDICTION_HEADER);
    out.push('\n');
    for p in preds {
        out.push_str(&format!(
            "{}\t{}\t{:?}\t{:?}\t{:?}\t{:?}\n",
            p.id, p.label, p.probs[0], p.probs[1], p.probs[2], p.probs[3]
        ));
    }
    out
}

pub fn parse_predictions(text: &str) -> Result<Vec<Prediction>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(i, line)| {
            let bad = || HammError::Data(format!("prediction line {}: '{line}'", i + 1));
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 2 + NUM_CLASSES {
                return Err(bad());
            }
            let label: u8 = f[1].parse().map_err(|_| bad())?;
            let mut probs = [0.0; NUM_CLASSES];
            for (c, p) in probs.iter_mut().enumerate() {
                *p = f[2 + c].parse().map_err(|_| bad())?;
            }
            Ok(Prediction {
                id: f[0].to_string(),
                label,
                probs,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::Device;

    #[test]
    fn fusion_length_and_constant_segments() {
        let dev = Device::Cpu;
        let layout: Vec<(Modality, usize)> = Modality::ALL.iter().map(|&m| (m, 8)).collect();
        let maps: Vec<(Modality, Tensor)> = Modality::ALL
            .iter()
            .enumerate()
            .map(|(i, &m)| (m, (Tensor::ones((2, 8, 3, 3), DType::F64, &dev).unwrap() * (i + 1) as f64).unwrap()))
            .collect();
        let v = fuse(&maps, &layout).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(v[0].len(), 24);
        for (i, x) in v[1].iter().enumerate() {
            assert!((x - (i / 8 + 1) as f64).abs() < 1e-12);
        }
        let partial = fuse(&maps[2..], &layout).unwrap().to_vec2::<f64>().unwrap();
        assert!(partial[0][..16].iter().all(|x| *x == 0.0));
    }

    #[test]
    fn fusion_ignores_spatial_permutation() {
        let dev = Device::Cpu;
        let data: Vec<f64> = (0..36).map(|i| (i * 7 % 11) as f64).collect();
        let mut shuffled = data.clone();
        for c in 0..4 {
            shuffled[c * 9..(c + 1) * 9].reverse();
        }
        let a = Tensor::from_vec(data, (1, 4, 3, 3), &dev).unwrap();
        let b = Tensor::from_vec(shuffled, (1, 4, 3, 3), &dev).unwrap();
        let layout = [(Modality::Vf, 4)];
        let fa = fuse(&[(Modality::Vf, a)], &layout).unwrap().to_vec2::<f64>().unwrap();
        let fb = fuse(&[(Modality::Vf, b)], &layout).unwrap().to_vec2::<f64>().unwrap();
        for (x, y) in fa[0].iter().zip(&fb[0]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_head_is_uniform_and_shift_invariant() {
        let mut store = ParamStore::new(DType::F64, 0);
        let head = ClassifierHead::new(&mut store.root(), 6, 5).unwrap();
        head.fc2.zero_().unwrap();
        let x = Tensor::rand(-1f64, 1., (3, 6), &Device::Cpu).unwrap();
        let (_, p) = head.classify(&x).unwrap();
        for row in p.to_vec2::<f64>().unwrap() {
            for v in row {
                assert!((v - 0.25).abs() < 1e-12);
            }
        }
        let logits = Tensor::new(&[[0.3f64, -1.0, 2.0, 0.5]], &Device::Cpu).unwrap();
        let p1 = softmax_last(&logits).unwrap().to_vec2::<f64>().unwrap();
        let p2 = softmax_last(&(logits + 7.5).unwrap()).unwrap().to_vec2::<f64>().unwrap();
        assert!((p1[0].iter().sum::<f64>() - 1.0).abs() < 1e-6);
        for (a, b) in p1[0].iter().zip(&p2[0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_values() {
        let dev = Device::Cpu;
        let p = Tensor::new(&[[1.0f64, 0., 0., 0.], [0., 0., 1., 0.]], &dev).unwrap();
        assert_eq!(ce_loss(&p, &[0, 2]).unwrap().to_scalar::<f64>().unwrap(), 0.0);
        let u = Tensor::full(0.25f64, (3, 4), &dev).unwrap();
        let l = ce_loss(&u, &[0, 1, 3]).unwrap().to_scalar::<f64>().unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let q = Tensor::new(&[[0.7f64, 0.1, 0.1, 0.1], [0.2, 0.2, 0.5, 0.1]], &dev).unwrap();
        let a = ce_loss(&q, &[0, 3]).unwrap().to_scalar::<f64>().unwrap();
        let q_rev = Tensor::new(&[[0.2f64, 0.2, 0.5, 0.1], [0.7, 0.1, 0.1, 0.1]], &dev).unwrap();
        let b = ce_loss(&q_rev, &[3, 0]).unwrap().to_scalar::<f64>().unwrap();
        assert!((a - b).abs() < 1e-15);
        assert!(ce_loss(&q, &[0, 4]).is_err());
        let zero = Tensor::new(&[[0.0f64, 1., 0., 0.]], &dev).unwrap();
        let big = ce_loss(&zero, &[0]).unwrap().to_scalar::<f64>().unwrap();
        assert!((big + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn prediction_dump_round_trip() {
        let preds = vec![
            Prediction {
                id: "a".into(),
                label: 2,
                probs: [0.1, 0.2, 1.0 / 3.0, 1.0 - 0.1 - 0.2 - 1.0 / 3.0],
            },
            Prediction {
                id: "b~only-vf".into(),
                label: 0,
                probs: [1.0, 0.0, 0.0, 0.0],
            },
        ];
        let text = predictions_to_text(&preds);
        assert!(text.starts_with(PREDICTION_HEADER));
        assert_eq!(parse_predictions(&text).unwrap(), preds);
        assert!(parse_predictions("a\t1\t0.5\n").is_err());
    }

    #[test]
    fn model_accepts_modality_subsets() {
        let mut store = ParamStore::new(DType::F32, 0);
        let model = HammModel::new(&mut store.root(), EncoderConfig::toy(), 16).unwrap();
        let x = Tensor::rand(-1f32, 1., (2, 3, 32, 32), &Device::Cpu).unwrap();
        let p = model.probabilities(&[(Modality::Vf, x)]).unwrap();
        assert_eq!(p.len(), 2);
        assert!((p[0].iter().sum::<f64>() - 1.0).abs() < 1e-5);
    }
}
