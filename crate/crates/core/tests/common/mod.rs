#![allow(dead_code)]

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use hamm::data::{generate_synthetic, stratified_split, Modality, MultimodalSample};
use hamm::encoder::EncoderConfig;
use hamm::mae::{apply_mask, make_mask, mask_tensor, masked_mse, DecoderConfig, MaskedAutoencoder};
use hamm::mcga::{Mcga, McgaConfig};
use hamm::nn::ParamStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Uniform `[-1, 1)` f64 tensor.
pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn perturbed(var: &Var, base: &[f64], i: usize, delta: f64) {
    let mut v = base.to_vec();
    v[i] += delta;
    var.set(&Tensor::from_vec(v, var.shape(), &Device::Cpu).unwrap()).unwrap();
}

/// Worst relative error between analytic and central-difference gradients over
/// `probes` random entries of each variable, with a description of where it occurred.
pub fn check_vars(
    vars: &[(String, Var)],
    grads: &GradStore,
    loss: &dyn Fn() -> f64,
    probes: usize,
    seed: u64,
) -> (f64, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (0.0, String::from("none"));
    for (name, var) in vars {
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            None => vec![0.0; var.elem_count()],
        };
        let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for _ in 0..probes.min(base.len()) {
            let i = rng.random_range(0..base.len());
            perturbed(var, &base, i, FD_STEP);
            let up = loss();
            perturbed(var, &base, i, -FD_STEP);
            let down = loss();
            perturbed(var, &base, i, 0.0);
            let numeric = (up - down) / (2.0 * FD_STEP);
            let e = rel_err(analytic[i], numeric);
            if e > worst.0 {
                worst = (e, format!("{name}[{i}]: analytic {} numeric {numeric}", analytic[i]));
            }
        }
    }
    worst
}

pub fn store_vars(store: &ParamStore) -> Vec<(String, Var)> {
    store.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
}

/// Gradient check of one MCGA unit (C=4, 3×3 maps, 2 heads) in f64 against a
/// random linear functional of its refined outputs. Covers every parameter
/// and the three inputs.
pub fn mcga_gradient_error(probes: usize) -> (f64, String) {
    let mut store = ParamStore::new(DType::F64, 11);
    let cfg = McgaConfig {
        heads: 2,
        ..McgaConfig::default()
    };
    let unit = Mcga::new(&mut store.root().pp("mcga"), 4, cfg).unwrap();
    // Relation embeddings start at zero; move them so their gradients are generic.
    unit.relations.set(&(random(&[6, 2, 4], 5) * 0.3).unwrap()).unwrap();
    // Positive inputs keep generalized-mean pooling differentiable.
    let inputs: Vec<Var> = (0..3)
        .map(|k| Var::from_tensor(&(random(&[2, 4, 3, 3], 20 + k).abs().unwrap() + 0.1).unwrap()).unwrap())
        .collect();
    let target: Vec<Tensor> = (0..3).map(|k| random(&[2, 4, 3, 3], 40 + k)).collect();
    let forward = || {
        let nodes: Vec<(Modality, Tensor)> = Modality::ALL
            .iter()
            .zip(&inputs)
            .map(|(&m, v)| (m, v.as_tensor().clone()))
            .collect();
        let out = unit.forward(&nodes).unwrap();
        out.refined
            .iter()
            .zip(&target)
            .map(|(r, t)| (r * t).unwrap().sum_all().unwrap())
            .reduce(|a, b| (a + b).unwrap())
            .unwrap()
    };
    let grads = forward().backward().unwrap();
    let mut vars = store_vars(&store);
    for (k, x) in inputs.iter().enumerate() {
        vars.push((format!("input{k}"), x.clone()));
    }
    check_vars(&vars, &grads, &|| forward().to_scalar::<f64>().unwrap(), probes, 1)
}

/// Gradient check of the masked-reconstruction loss through the toy encoder,
/// MCGA units and decoders, in f64.
pub fn mae_gradient_error(probes: usize) -> (f64, String) {
    let mut store = ParamStore::new(DType::F64, 3);
    let mae = MaskedAutoencoder::new(&mut store.root(), EncoderConfig::toy(), DecoderConfig { width: 8 }).unwrap();
    // Zero biases on fully masked patches sit exactly on the ReLU kink; move them off it.
    for (k, (name, var)) in store.iter().enumerate() {
        if name.ends_with("bias") || name.ends_with("relations") {
            var.set(&(random(var.dims(), 700 + k as u64) * 0.1).unwrap()).unwrap();
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let items: Vec<(Modality, Tensor, Tensor)> = Modality::ALL
        .iter()
        .enumerate()
        .map(|(k, &m)| {
            let x = random(&[2, 3, 32, 32], 100 + k as u64);
            let masks = vec![
                make_mask(32, 8, 0.7, &mut rng).unwrap(),
                make_mask(32, 8, 0.7, &mut rng).unwrap(),
            ];
            (m, x, mask_tensor(&masks, DType::F64, &Device::Cpu).unwrap())
        })
        .collect();
    let forward = || {
        let masked: Vec<(Modality, Tensor)> = items
            .iter()
            .map(|(m, x, mt)| (*m, apply_mask(x, mt).unwrap()))
            .collect();
        let recon = mae.forward(&masked).unwrap();
        let triples: Vec<(Tensor, Tensor, Tensor)> = items
            .iter()
            .zip(recon)
            .map(|((_, x, mt), (_, r))| (x.clone(), r, mt.clone()))
            .collect();
        masked_mse(&triples).unwrap()
    };
    let grads = forward().backward().unwrap();
    check_vars(&store_vars(&store), &grads, &|| forward().to_scalar::<f64>().unwrap(), probes, 2)
}

/// Train, validation and test sets drawn from one synthetic pool.
pub struct Splits {
    pub train: Vec<MultimodalSample>,
    pub val: Vec<MultimodalSample>,
    pub test: Vec<MultimodalSample>,
}

pub fn synthetic_splits(n_per_class: usize, ratios: [f64; 3], seed: u64) -> Splits {
    let data = generate_synthetic(n_per_class, 32, seed).unwrap();
    let split = stratified_split(&data, ratios, seed).unwrap();
    let pick = |ids: &[String]| {
        data.iter()
            .filter(|s| ids.binary_search(&s.id).is_ok())
            .cloned()
            .collect::<Vec<_>>()
    };
    Splits {
        train: pick(&split.train),
        val: pick(&split.val),
        test: pick(&split.test),
    }
}
