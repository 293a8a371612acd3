//! Multimodal-channel graph attention (MCGA).
//!
//! Each modality's feature map is summarized by average, max and generalized
//! mean pooling, embedded into `(0,1)^C`, gated by a multi-head learnable gate,
//! and then refined by relational graph attention over the modality nodes.
//! The result is turned into per-channel weights that rescale the input maps.

use candle_core::{Tensor, Var};

use crate::data::Modality;
use crate::error::{HammError, Result};
use crate::nn::{global_avg_pool, global_max_pool, leaky_relu, sigmoid, softmax_last, Linear, Scope};

/// Lower clamp applied before generalized-mean pooling.
pub const GEM_EPS: f64 = 1e-6;
/// Ordered modality pairs, one relation type each.
pub const NUM_RELATIONS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// Average, max and generalized-mean pooling concatenated.
    Full,
    GapOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionScheme {
    /// Gating followed by relational graph attention.
    Full,
    GatingOnly,
    GraphOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McgaConfig {
    pub heads: usize,
    pub pooling: Pooling,
    pub attention: AttentionScheme,
    pub leaky_slope: f64,
    pub gem_p_init: f64,
}

impl Default for McgaConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            pooling: Pooling::Full,
            attention: AttentionScheme::Full,
            leaky_slope: 0.01,
            gem_p_init: 3.0,
        }
    }
}

/// Relation type of the directed edge `from -> to` (`from != to`).
pub fn relation_index(from: Modality, to: Modality) -> usize {
    let (i, j) = (from.index(), to.index());
    debug_assert_ne!(i, j);
    2 * i + if j < i { j } else { j - 1 }
}

/// Output of one MCGA pass.
pub struct McgaOutput {
    /// Re-weighted feature maps, in input order.
    pub refined: Vec<Tensor>,
    /// Channel weights `(B, C)` per node.
    pub weights: Vec<Tensor>,
    /// Attention `(B, H, |N(i)|)` per node; empty when there are no neighbors.
    pub attention: Vec<Tensor>,
}

#[derive(Clone)]
pub struct Mcga {
    pub config: McgaConfig,
    pub channels: usize,
    pub gem_p: Var,
    pub embed: Linear,
    pub gates: Linear,
    /// Per-head projections `(H, C, C)`.
    pub proj: Var,
    /// Relation embeddings `(6, H, C)`.
    pub relations: Var,
    /// Attention vectors `(H, 2C)`.
    pub attn: Var,
    pub finalize: Linear,
}

impl Mcga {
    pub fn new(vs: &mut Scope<'_>, channels: usize, config: McgaConfig) -> Result<Self> {
        if config.heads == 0 {
            return Err(HammError::Config("MCGA needs at least one head".into()));
        }
        let c = channels;
        let h = config.heads;
        let pooled = match config.pooling {
            Pooling::Full => 3 * c,
            Pooling::GapOnly => c,
        };
        let bound = 1.0 / (c as f64).sqrt();
        Ok(Self {
            config,
            channels: c,
            gem_p: vs.constant("gem_p", &[1], config.gem_p_init)?,
            embed: Linear::new(&mut vs.pp("embed"), pooled, c)?,
            gates: Linear::new(&mut vs.pp("gates"), c, h * c)?,
            proj: vs.uniform("proj", &[h, c, c], bound)?,
            relations: vs.constant("relations", &[NUM_RELATIONS, h, c], 0.0)?,
            attn: vs.uniform("attn", &[h, 2 * c], 1.0 / ((2 * c) as f64).sqrt())?,
            finalize: Linear::new(&mut vs.pp("finalize"), c, c)?,
        })
    }

    pub fn heads(&self) -> usize {
        self.config.heads
    }

    /// `(B, C, h, w) -> (B, 3C)`: average ‖ max ‖ generalized mean per channel.
    pub fn summarize(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.channels {
            return Err(HammError::Shape(format!(
                "MCGA built for {} channels, got {c}",
                self.channels
            )));
        }
        let gap = global_avg_pool(x)?;
        let pooled = match self.config.pooling {
            Pooling::GapOnly => gap,
            Pooling::Full => {
                let gmp = global_max_pool(x)?;
                let gem = gem_pool(x, self.gem_p.as_tensor())?;
                Tensor::cat(&[&gap, &gmp, &gem], 1)?
            }
        };
        let check = pooled.abs()?.max_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        if !check.is_finite() {
            return Err(HammError::Numeric("non-finite feature map entering MCGA".into()));
        }
        Ok(pooled)
    }

    /// `v = σ(A c + b)`.
    pub fn embed(&self, pooled: &Tensor) -> Result<Tensor> {
        sigmoid(&self.embed.forward(pooled)?)
    }

    /// Gate outputs `g^(h)(v)` as `(B, H, C)`.
    pub fn gate_outputs(&self, v: &Tensor) -> Result<Tensor> {
        let (b, c) = v.dims2()?;
        sigmoid(&self.gates.forward(v)?.reshape((b, self.heads(), c))?)
    }

    /// `v̂ = v ⊙ mean_h g^(h)(v)`.
    pub fn gate(&self, v: &Tensor) -> Result<Tensor> {
        apply_gates(v, &self.gate_outputs(v)?)
    }

    /// Relational graph attention over the given nodes (no self-loops).
    /// Returns the aggregated `u` per node and the attention weights.
    pub fn graph_attend(&self, nodes: &[(Modality, Tensor)]) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let h = self.heads();
        let c = self.channels;
        // W^(h) v̂ for every node, shape (B, H, C).
        let wt = self.proj.transpose(1, 2)?.unsqueeze(0)?;
        let projected: Vec<Tensor> = nodes
            .iter()
            .map(|(_, v)| -> Result<Tensor> {
                let (b, _) = v.dims2()?;
                Ok(v.reshape((b, 1, 1, c))?.broadcast_matmul(&wt)?.reshape((b, h, c))?)
            })
            .collect::<Result<_>>()?;
        let a_src = self.attn.narrow(1, 0, c)?.unsqueeze(0)?;
        let a_dst = self.attn.narrow(1, c, c)?.unsqueeze(0)?;
        let mut out = Vec::with_capacity(nodes.len());
        let mut attention = Vec::with_capacity(nodes.len());
        for (i, (mi, _)) in nodes.iter().enumerate() {
            let src_term = projected[i].broadcast_mul(&a_src)?.sum(2)?;
            let mut messages = Vec::new();
            let mut scores = Vec::new();
            for (j, (mj, _)) in nodes.iter().enumerate() {
                if i == j {
                    continue;
                }
                let rel = self.relations.get(relation_index(*mi, *mj))?.unsqueeze(0)?;
                let msg = projected[j].broadcast_add(&rel)?;
                let score = (&src_term + msg.broadcast_mul(&a_dst)?.sum(2)?)?;
                scores.push(leaky_relu(&score, self.config.leaky_slope)?);
                messages.push(msg);
            }
            if scores.is_empty() {
                return Err(HammError::Shape("graph attention needs at least two nodes".into()));
            }
            let scores = Tensor::stack(&scores, 2)?;
            let check = scores.abs()?.max_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            if !check.is_finite() {
                return Err(HammError::Numeric("non-finite attention scores".into()));
            }
            let alpha = softmax_last(&scores)?;
            let messages = Tensor::stack(&messages, 2)?;
            let u = alpha.unsqueeze(3)?.broadcast_mul(&messages)?.sum(2)?.mean(1)?;
            out.push(u);
            attention.push(alpha);
        }
        Ok((out, attention))
    }

    /// `w = σ(FC(u))`, shared across modalities.
    pub fn finalize_weights(&self, u: &Tensor) -> Result<Tensor> {
        sigmoid(&self.finalize.forward(u)?)
    }

    /// Full refinement of one stage's feature maps. Nodes may be one, two or three
    /// distinct modalities; a single node skips graph attention.
    pub fn forward(&self, nodes: &[(Modality, Tensor)]) -> Result<McgaOutput> {
        if nodes.is_empty() || nodes.len() > 3 {
            return Err(HammError::Shape(format!(
                "MCGA takes 1 to 3 modality nodes, got {}",
                nodes.len()
            )));
        }
        for (i, (m, _)) in nodes.iter().enumerate() {
            if nodes[..i].iter().any(|(n, _)| n == m) {
                return Err(HammError::Shape(format!("modality {} given twice", m.name())));
            }
        }
        let mut gated = Vec::with_capacity(nodes.len());
        for (m, x) in nodes {
            let v = self.embed(&self.summarize(x)?)?;
            let v_hat = match self.config.attention {
                AttentionScheme::GraphOnly => v,
                _ => self.gate(&v)?,
            };
            gated.push((*m, v_hat));
        }
        let (u, attention) = if nodes.len() == 1 || self.config.attention == AttentionScheme::GatingOnly {
            (gated.iter().map(|(_, v)| v.clone()).collect(), Vec::new())
        } else {
            self.graph_attend(&gated)?
        };
        let mut refined = Vec::with_capacity(nodes.len());
        let mut weights = Vec::with_capacity(nodes.len());
        for ((_, x), u) in nodes.iter().zip(&u) {
            let w = self.finalize_weights(u)?;
            refined.push(apply_channel_weights(x, &w)?);
            weights.push(w);
        }
        Ok(McgaOutput {
            refined,
            weights,
            attention,
        })
    }
}

/// Generalized-mean pooling `(mean x^p)^(1/p)` over spatial positions, inputs clamped at [`GEM_EPS`].
pub fn gem_pool(x: &Tensor, p: &Tensor) -> Result<Tensor> {
    let logs = x.flatten_from(2)?.maximum(GEM_EPS)?.log()?;
    let powered = logs.broadcast_mul(p)?.exp()?;
    let mean = powered.mean(2)?;
    Ok(mean.log()?.broadcast_div(p)?.exp()?)
}

/// `v ⊙ mean_h gates[:, h, :]` for gate outputs shaped `(B, H, C)`.
pub fn apply_gates(v: &Tensor, gates: &Tensor) -> Result<Tensor> {
    let (_, h, _) = gates.dims3()?;
    if h == 0 {
        return Err(HammError::Config("gating needs at least one head".into()));
    }
    Ok((v * gates.mean(1)?)?)
}

/// `E[c, y, x] = E'[c, y, x] · w[c]` for `E'` of shape `(B, C, h, w)` and `w` of shape `(B, C)`.
pub fn apply_channel_weights(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (b, c, _, _) = x.dims4()?;
    let (bw, cw) = w.dims2()?;
    if (b, c) != (bw, cw) {
        return Err(HammError::Shape(format!(
            "channel weights {:?} do not match feature map {:?}",
            w.dims(),
            x.dims()
        )));
    }
    Ok(x.broadcast_mul(&w.reshape((b, c, 1, 1))?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    fn t(v: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn build(c: usize, heads: usize, seed: u64) -> (ParamStore, Mcga) {
        let mut store = ParamStore::new(DType::F64, seed);
        let cfg = McgaConfig {
            heads,
            ..McgaConfig::default()
        };
        let m = Mcga::new(&mut store.root().pp("mcga"), c, cfg).unwrap();
        (store, m)
    }

    fn zero_all_linear(m: &Mcga) {
        m.embed.zero_().unwrap();
        m.gates.zero_().unwrap();
        m.finalize.zero_().unwrap();
    }

    #[test]
    fn constant_map_pools_to_constant() {
        let (_s, m) = build(2, 2, 0);
        let x = Tensor::full(2.0f64, (1, 2, 3, 3), &Device::Cpu).unwrap();
        let c = m.summarize(&x).unwrap().to_vec2::<f64>().unwrap();
        for v in &c[0] {
            assert!((v - 2.0).abs() < 1e-12, "{c:?}");
        }
    }

    #[test]
    fn gap_and_gmp_by_hand() {
        let (_s, m) = build(1, 1, 0);
        let x = t(vec![1.0, 3.0, 5.0, 7.0], &[1, 1, 2, 2]);
        let c = m.summarize(&x).unwrap().to_vec2::<f64>().unwrap();
        assert!((c[0][0] - 4.0).abs() < 1e-12);
        assert!((c[0][1] - 7.0).abs() < 1e-12);
        // GeM with p = 3: cube root of mean of cubes.
        let want = ((1.0f64 + 27.0 + 125.0 + 343.0) / 4.0).cbrt();
        assert!((c[0][2] - want).abs() < 1e-10);
    }

    #[test]
    fn gem_with_unit_exponent_is_average() {
        let x = t(vec![0.5, 1.5, 2.0, 4.0, 0.1, 0.2], &[1, 2, 1, 3]);
        let p = t(vec![1.0], &[1]);
        let gem = gem_pool(&x, &p).unwrap().to_vec2::<f64>().unwrap();
        let gap = global_avg_pool(&x).unwrap().to_vec2::<f64>().unwrap();
        for (a, b) in gem[0].iter().zip(&gap[0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_input_rejected() {
        let (_s, m) = build(1, 1, 0);
        let x = t(vec![1.0, f64::NAN, 5.0, 7.0], &[1, 1, 2, 2]);
        assert!(matches!(m.summarize(&x), Err(HammError::Numeric(_))));
    }

    #[test]
    fn embed_examples() {
        let (_s, m) = build(3, 1, 0);
        m.embed.zero_().unwrap();
        let c = t(vec![0.3; 9], &[1, 9]);
        let v = m.embed(&c).unwrap().to_vec2::<f64>().unwrap();
        assert!(v[0].iter().all(|&x| x == 0.5));

        let (_s, m) = build(1, 1, 0);
        m.embed.weight.set(&t(vec![1.0, 0.0, 0.0], &[1, 3])).unwrap();
        m.embed.bias.set(&t(vec![0.0], &[1])).unwrap();
        let v = m.embed(&t(vec![0.0, 5.0, -2.0], &[1, 3])).unwrap().to_vec2::<f64>().unwrap();
        assert!((v[0][0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gating_examples() {
        let v = t(vec![0.2, 0.4, 0.9], &[1, 3]);
        let ones = Tensor::ones((1, 4, 3), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(apply_gates(&v, &ones).unwrap().to_vec2::<f64>().unwrap(), v.to_vec2::<f64>().unwrap());
        let g = t(vec![0.2, 0.2, 0.2, 0.6, 0.6, 0.6], &[1, 2, 3]);
        let out = apply_gates(&v, &g).unwrap().to_vec2::<f64>().unwrap();
        for (o, x) in out[0].iter().zip([0.2, 0.4, 0.9]) {
            assert!((o - 0.4 * x).abs() < 1e-12);
        }
        let zero = Tensor::zeros((1, 3), DType::F64, &Device::Cpu).unwrap();
        let out = apply_gates(&zero, &g).unwrap().to_vec2::<f64>().unwrap();
        assert!(out[0].iter().all(|&x| x == 0.0));
        let empty = Tensor::zeros((1, 0, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(apply_gates(&v, &empty).is_err());
    }

    #[test]
    fn zero_heads_rejected() {
        let mut store = ParamStore::new(DType::F64, 0);
        let cfg = McgaConfig {
            heads: 0,
            ..McgaConfig::default()
        };
        assert!(Mcga::new(&mut store.root(), 4, cfg).is_err());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (_s, m) = build(4, 3, 5);
        let nodes: Vec<(Modality, Tensor)> = Modality::ALL
            .iter()
            .enumerate()
            .map(|(i, &md)| (md, Tensor::rand(0.0f64, 1.0 + i as f64, (2, 4), &Device::Cpu).unwrap()))
            .collect();
        let (_u, att) = m.graph_attend(&nodes).unwrap();
        for a in att {
            assert_eq!(a.dims(), &[2, 3, 2]);
            for row in a.sum(2).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap() {
                assert!((row - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn equal_scores_split_evenly_and_ln2_gives_two_thirds() {
        // One head, C = 1, W = 1, a_src = 0, a_dst = 1: e_ij = LeakyReLU(v̂_j + R_ij).
        let (_s, m) = build(1, 1, 0);
        m.proj.set(&t(vec![1.0], &[1, 1, 1])).unwrap();
        m.attn.set(&t(vec![0.0, 1.0], &[1, 2])).unwrap();
        let node = |md, x: f64| (md, t(vec![x], &[1, 1]));
        let (_, att) = m
            .graph_attend(&[node(Modality::Fundus, 0.0), node(Modality::Oct, 0.7), node(Modality::Vf, 0.7)])
            .unwrap();
        let a = att[0].flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!((a[0] - 0.5).abs() < 1e-12 && (a[1] - 0.5).abs() < 1e-12);

        let (_, att) = m
            .graph_attend(&[
                node(Modality::Fundus, 0.0),
                node(Modality::Oct, 2.0f64.ln()),
                node(Modality::Vf, 0.0),
            ])
            .unwrap();
        let a = att[0].flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!((a[0] - 2.0 / 3.0).abs() < 1e-12, "{a:?}");
        assert!((a[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn two_nodes_attend_fully_to_each_other() {
        let (_s, m) = build(4, 2, 1);
        let nodes = vec![
            (Modality::Fundus, Tensor::rand(0.0f64, 1.0, (3, 4), &Device::Cpu).unwrap()),
            (Modality::Vf, Tensor::rand(0.0f64, 1.0, (3, 4), &Device::Cpu).unwrap()),
        ];
        let (_, att) = m.graph_attend(&nodes).unwrap();
        for a in att {
            assert!(a.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|&x| x == 1.0));
        }
    }

    #[test]
    fn zeroed_linears_halve_the_input() {
        let (_s, m) = build(4, 2, 2);
        zero_all_linear(&m);
        let nodes: Vec<(Modality, Tensor)> = Modality::ALL
            .iter()
            .map(|&md| (md, Tensor::rand(-1.0f64, 1.0, (2, 4, 3, 3), &Device::Cpu).unwrap()))
            .collect();
        let out = m.forward(&nodes).unwrap();
        for ((_, x), y) in nodes.iter().zip(&out.refined) {
            assert_eq!(x.dims(), y.dims());
            let diff = ((x * 0.5).unwrap() - y).unwrap().abs().unwrap().max_all().unwrap();
            assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
        }
    }

    #[test]
    fn weights_lie_strictly_inside_unit_interval() {
        let (_s, m) = build(4, 2, 3);
        let nodes: Vec<(Modality, Tensor)> = Modality::ALL
            .iter()
            .map(|&md| (md, Tensor::rand(-3.0f64, 3.0, (2, 4, 3, 3), &Device::Cpu).unwrap()))
            .collect();
        let out = m.forward(&nodes).unwrap();
        for w in out.weights {
            for v in w.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
                assert!(v > 0.0 && v < 1.0);
            }
        }
    }

    #[test]
    fn finalize_is_monotone_in_each_logit() {
        let (_s, m) = build(3, 1, 4);
        m.finalize.weight.set(&Tensor::eye(3, DType::F64, &Device::Cpu).unwrap()).unwrap();
        m.finalize.bias.set(&t(vec![0.0; 3], &[3])).unwrap();
        let u = t(vec![0.1, -0.4, 0.8], &[1, 3]);
        let base = m.finalize_weights(&u).unwrap().to_vec2::<f64>().unwrap();
        for k in 0..3 {
            let mut bumped = vec![0.1, -0.4, 0.8];
            bumped[k] += 1e-3;
            let w = m.finalize_weights(&t(bumped, &[1, 3])).unwrap().to_vec2::<f64>().unwrap();
            assert!(w[0][k] > base[0][k]);
        }
        m.finalize.zero_().unwrap();
        let w = m.finalize_weights(&u).unwrap().to_vec2::<f64>().unwrap();
        assert!(w[0].iter().all(|&x| x == 0.5));
    }

    #[test]
    fn apply_examples_and_linearity() {
        let x = Tensor::rand(-1.0f64, 1.0, (1, 2, 2, 2), &Device::Cpu).unwrap();
        let ones = Tensor::ones((1, 2), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(
            apply_channel_weights(&x, &ones).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            x.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
        let zeros = ones.zeros_like().unwrap();
        let z = apply_channel_weights(&x, &zeros).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        let e = t(vec![1.0, 1.0, 1.0, 1.0, 4.0, 4.0, 4.0, 4.0], &[1, 2, 2, 2]);
        let w = t(vec![0.5, 0.5], &[1, 2]);
        let out = apply_channel_weights(&e, &w).unwrap().to_vec3::<f64>();
        let _ = out;
        let v = apply_channel_weights(&e, &w).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(v[4], 2.0);
        // Linearity in the feature map.
        let y = Tensor::rand(-1.0f64, 1.0, (1, 2, 2, 2), &Device::Cpu).unwrap();
        let w = t(vec![0.3, 0.8], &[1, 2]);
        let lhs = apply_channel_weights(&((&x * 2.0).unwrap() + (&y * -3.0).unwrap()).unwrap(), &w).unwrap();
        let rhs = ((apply_channel_weights(&x, &w).unwrap() * 2.0).unwrap()
            + (apply_channel_weights(&y, &w).unwrap() * -3.0).unwrap())
        .unwrap();
        let d = (lhs - rhs).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-12);
        assert!(apply_channel_weights(&x, &t(vec![1.0; 3], &[1, 3])).is_err());
    }

    #[test]
    fn permutation_equivariance() {
        let (_s, m) = build(4, 2, 9);
        m.relations
            .set(&Tensor::rand(-0.5f64, 0.5, (NUM_RELATIONS, 2, 4), &Device::Cpu).unwrap())
            .unwrap();
        let maps: Vec<Tensor> = (0..3)
            .map(|_| Tensor::rand(-1.0f64, 2.0, (2, 4, 3, 3), &Device::Cpu).unwrap())
            .collect();
        let nodes: Vec<(Modality, Tensor)> = Modality::ALL.iter().copied().zip(maps.iter().cloned()).collect();
        let base = m.forward(&nodes).unwrap();

        // Reordering the node list permutes the outputs identically.
        let reordered = vec![nodes[2].clone(), nodes[0].clone(), nodes[1].clone()];
        let out = m.forward(&reordered).unwrap();
        for (k, src) in [2usize, 0, 1].iter().enumerate() {
            let d = (&out.refined[k] - &base.refined[*src]).unwrap().abs().unwrap().max_all().unwrap();
            assert!(d.to_scalar::<f64>().unwrap() < 1e-12);
        }

        // Relabeling modalities with σ and permuting the relation table to match.
        let sigma = |md: Modality| match md {
            Modality::Fundus => Modality::Oct,
            Modality::Oct => Modality::Vf,
            Modality::Vf => Modality::Fundus,
        };
        let old = m.relations.as_tensor().copy().unwrap();
        let mut rows = vec![None; NUM_RELATIONS];
        for a in Modality::ALL {
            for b in Modality::ALL {
                if a != b {
                    rows[relation_index(sigma(a), sigma(b))] = Some(old.get(relation_index(a, b)).unwrap());
                }
            }
        }
        let rows: Vec<Tensor> = rows.into_iter().map(|r| r.unwrap()).collect();
        m.relations.set(&Tensor::stack(&rows, 0).unwrap()).unwrap();
        let relabeled: Vec<(Modality, Tensor)> = nodes.iter().map(|(md, x)| (sigma(*md), x.clone())).collect();
        let out = m.forward(&relabeled).unwrap();
        for k in 0..3 {
            let d = (&out.refined[k] - &base.refined[k]).unwrap().abs().unwrap().max_all().unwrap();
            assert!(d.to_scalar::<f64>().unwrap() < 1e-12);
        }
    }

    #[test]
    fn single_node_is_finite() {
        let (_s, m) = build(4, 2, 3);
        let x = Tensor::rand(-1.0f64, 1.0, (2, 4, 3, 3), &Device::Cpu).unwrap();
        let out = m.forward(&[(Modality::Vf, x)]).unwrap();
        assert!(out.attention.is_empty());
        let s = out.refined[0].abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(s.is_finite());
    }

    #[test]
    fn node_count_checked() {
        let (_s, m) = build(4, 2, 3);
        assert!(m.forward(&[]).is_err());
        let x = Tensor::rand(-1.0f64, 1.0, (1, 4, 2, 2), &Device::Cpu).unwrap();
        assert!(m.forward(&[(Modality::Vf, x.clone()), (Modality::Vf, x)]).is_err());
    }
}
