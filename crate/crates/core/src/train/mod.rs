//! Two-stage training: masked-reconstruction pretraining, then supervised
//! fine-tuning with early stopping, plus evaluation and seed averaging.

mod adam;
mod checkpoint;

pub use adam::{Adam, AdamState};
pub use checkpoint::{Checkpoint, CheckpointKind, FORMAT as CHECKPOINT_FORMAT};

use candle_core::{DType, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::classifier::{ce_loss, HammModel, Prediction};
use crate::config::{ModelConfig, TrainConfig};
use crate::data::{
    augment, sample_missingness, sample_rng, AugmentationPolicy, Modality, MultimodalSample, NUM_CLASSES,
};
use crate::error::{HammError, Result};
use crate::mae::{apply_mask, make_mask, mask_tensor, masked_mse, MaskedAutoencoder};
use crate::metrics::{argmax, evaluate, AggregateReport, EvalReport, DEFAULT_ECE_BINS};
use crate::nn::ParamStore;

const STREAM_ORDER: u64 = 1;
const STREAM_AUGMENT: u64 = 2;
const STREAM_MASK: u64 = 3;
const STREAM_MISSING: u64 = 4;

/// Seed for everything random in one epoch, so a resumed run replays the same draws.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (epoch as u64 + 1).wrapping_mul(0xd1b5_4a32_d192_ed03)
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(seed, epoch) ^ STREAM_ORDER);
    order.shuffle(&mut rng);
    order
}

/// `(B, 3, H, W)` images of one modality.
pub fn batch_tensor(samples: &[&MultimodalSample], m: Modality, dtype: DType) -> Result<Tensor> {
    let first = samples
        .first()
        .ok_or_else(|| HammError::Data("empty batch".into()))?;
    let s = first.image_size();
    let mut data = Vec::with_capacity(samples.len() * 3 * s * s);
    for sample in samples {
        let img = sample.image(m);
        if img.shape() != [3, s, s] {
            return Err(HammError::Data(format!("sample {} has mismatched image size", sample.id)));
        }
        data.extend(img.iter().copied());
    }
    Ok(Tensor::from_vec(data, (samples.len(), 3, s, s), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

pub fn model_inputs(samples: &[&MultimodalSample], modalities: &[Modality], dtype: DType) -> Result<Vec<(Modality, Tensor)>> {
    let mut mods = modalities.to_vec();
    mods.sort();
    mods.into_iter()
        .map(|m| Ok((m, batch_tensor(samples, m, dtype)?)))
        .collect()
}

/// One line of the per-epoch log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub metrics: Vec<(&'static str, f64)>,
}

impl EpochLog {
    /// `epoch=3 split=val loss=0.91 acc=0.62`, tab-separated.
    pub fn to_line(&self) -> String {
        let mut s = format!("epoch={}\tsplit={}\tloss={:?}", self.epoch, self.split, self.loss);
        for (k, v) in &self.metrics {
            s.push_str(&format!("\t{k}={v:?}"));
        }
        s
    }
}

fn check_finite(loss: f64, stage: &str, epoch: usize, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(HammError::Numeric(format!(
            "{stage} loss became {loss} at epoch {epoch}, step {step}; try a smaller learning rate"
        )))
    }
}

fn trainable(store: &ParamStore, freeze_mcga: bool) -> Vec<(String, Var)> {
    store
        .iter()
        .filter(|(name, _)| !(freeze_mcga && name.starts_with("encoder.mcga")))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

pub struct PretrainOutcome {
    pub store: ParamStore,
    pub mae: MaskedAutoencoder,
    /// Mean masked reconstruction loss per epoch, including epochs restored from a checkpoint.
    pub losses: Vec<f64>,
    pub checkpoint: Checkpoint,
}

/// Builds the autoencoder and runs masked-reconstruction epochs up to
/// `train.pretrain_epochs`, continuing from `resume` when given.
pub fn pretrain(
    data: &[MultimodalSample],
    model: &ModelConfig,
    train: &TrainConfig,
    resume: Option<&Checkpoint>,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<PretrainOutcome> {
    model.validate()?;
    train.validate()?;
    let size = model.encoder.image_size;
    train.mask.validate(size)?;
    if train.mask.ratio <= 0.0 {
        return Err(HammError::Config("pretraining needs a positive mask ratio".into()));
    }
    if data.is_empty() {
        return Err(HammError::Data("no pretraining samples".into()));
    }
    let mut store = ParamStore::new(DType::F32, train.seed);
    let mae = MaskedAutoencoder::new(&mut store.root(), model.encoder.clone(), model.decoder)?;
    let mut opt = Adam::new(trainable(&store, false), train.lr_pretrain, train.beta1, train.beta2, train.eps)?;
    let mut losses = Vec::new();
    let mut start = 0;
    if let Some(ck) = resume {
        if ck.kind != CheckpointKind::Pretrain || ck.model != *model {
            return Err(HammError::Checkpoint("resume checkpoint does not match this pretraining run".into()));
        }
        if store.load(&ck.params)? != store.len() {
            return Err(HammError::Checkpoint("resume checkpoint lacks some parameters".into()));
        }
        if let Some(state) = &ck.adam {
            opt.load_state(state)?;
        }
        start = ck.epoch;
        losses = ck.losses.clone();
    }
    let policy = AugmentationPolicy::default();
    let mods = {
        let mut m = model.encoder.modalities.clone();
        m.sort();
        m
    };
    for epoch in start..train.pretrain_epochs {
        let eseed = epoch_seed(train.seed, epoch);
        let order = epoch_order(data.len(), train.seed, epoch);
        let (mut total, mut count) = (0.0, 0usize);
        for (step, chunk) in order.chunks(train.batch_pretrain).enumerate() {
            let batch: Vec<MultimodalSample> = chunk
                .iter()
                .map(|&i| {
                    let s = &data[i];
                    if train.augment {
                        augment(s, &policy, &mut sample_rng(eseed, STREAM_AUGMENT, &s.id))
                    } else {
                        s.clone()
                    }
                })
                .collect();
            let refs: Vec<&MultimodalSample> = batch.iter().collect();
            let mut mask_rngs: Vec<ChaCha8Rng> = refs.iter().map(|s| sample_rng(eseed, STREAM_MASK, &s.id)).collect();
            let mut masked = Vec::with_capacity(mods.len());
            let mut targets = Vec::with_capacity(mods.len());
            for &m in &mods {
                let target = batch_tensor(&refs, m, DType::F32)?;
                let masks = mask_rngs
                    .iter_mut()
                    .map(|r| make_mask(size, train.mask.patch_size, train.mask.ratio, r))
                    .collect::<Result<Vec<_>>>()?;
                let mt = mask_tensor(&masks, DType::F32, store.device())?;
                masked.push((m, apply_mask(&target, &mt)?));
                targets.push((target, mt));
            }
            let recon = mae.forward(&masked)?;
            let items: Vec<(Tensor, Tensor, Tensor)> = targets
                .into_iter()
                .zip(recon)
                .map(|((t, mt), (_, r))| (t, r, mt))
                .collect();
            let loss = masked_mse(&items)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            check_finite(value, "pretraining", epoch + 1, step)?;
            opt.step(&loss.backward()?)?;
            total += value * chunk.len() as f64;
            count += chunk.len();
        }
        let mean = total / count as f64;
        losses.push(mean);
        on_epoch(&EpochLog {
            epoch: epoch + 1,
            split: "pretrain",
            loss: mean,
            metrics: Vec::new(),
        });
    }
    let checkpoint = Checkpoint {
        kind: CheckpointKind::Pretrain,
        epoch: train.pretrain_epochs.max(start),
        model: model.clone(),
        train: train.clone(),
        params: store.snapshot()?,
        adam: Some(opt.state().clone()),
        losses: losses.clone(),
    };
    Ok(PretrainOutcome {
        store,
        mae,
        losses,
        checkpoint,
    })
}

/// Starting point of fine-tuning.
#[derive(Clone, Copy)]
pub enum Init<'a> {
    Scratch,
    /// Encoder and MCGA weights from a pretraining checkpoint; the decoder is discarded.
    Pretrained(&'a Checkpoint),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Samples seen with zero, one and two modalities missing.
    pub patterns: [usize; 3],
}

pub struct FinetuneOutcome {
    pub store: ParamStore,
    /// Holds the best-validation weights.
    pub model: HammModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub checkpoint: Checkpoint,
}

impl FinetuneOutcome {
    pub fn epochs_run(&self) -> usize {
        self.history.len()
    }

    pub fn best_val_acc(&self) -> f64 {
        self.history[self.best_epoch - 1].val_acc
    }
}

fn load_encoder(store: &ParamStore, ck: &Checkpoint) -> Result<()> {
    let enc = ck.params_with_prefix("encoder");
    let needed: Vec<&String> = store.names().filter(|n| n.starts_with("encoder.")).collect();
    if let Some(missing) = needed.iter().find(|n| !enc.contains_key(n.as_str())) {
        return Err(HammError::Checkpoint(format!(
            "checkpoint is incompatible with the encoder config: no parameter {missing}"
        )));
    }
    store.load(&enc)?;
    Ok(())
}

/// Builds the classifier model for `model` with weights from a fine-tuning checkpoint.
pub fn load_model(ck: &Checkpoint) -> Result<(ParamStore, HammModel)> {
    let mut store = ParamStore::new(DType::F32, ck.train.seed);
    let model = HammModel::new(&mut store.root(), ck.model.encoder.clone(), ck.model.head_hidden)?;
    let n = store.load(&ck.params)?;
    if n != store.len() {
        return Err(HammError::Checkpoint(format!(
            "checkpoint provides {n} of {} model parameters",
            store.len()
        )));
    }
    Ok((store, model))
}

/// Trains the classifier with early stopping on validation loss and restores
/// the best epoch's weights.
pub fn finetune(
    train_set: &[MultimodalSample],
    val_set: &[MultimodalSample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    init: Init<'_>,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<FinetuneOutcome> {
    model_cfg.validate()?;
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(HammError::Data("fine-tuning needs nonempty train and validation sets".into()));
    }
    let mut store = ParamStore::new(DType::F32, cfg.seed);
    let model = HammModel::new(&mut store.root(), model_cfg.encoder.clone(), model_cfg.head_hidden)?;
    if let Init::Pretrained(ck) = init {
        load_encoder(&store, ck)?;
    }
    let mut opt = Adam::new(trainable(&store, cfg.freeze_mcga), cfg.lr_finetune, cfg.beta1, cfg.beta2, cfg.eps)?;
    let policy = AugmentationPolicy::default();
    let mods = model_cfg.encoder.modalities.clone();
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0usize, store.snapshot()?);
    let mut wait = 0;
    for epoch in 0..cfg.max_finetune_epochs {
        let eseed = epoch_seed(cfg.seed, epoch);
        let order = epoch_order(train_set.len(), cfg.seed, epoch);
        let (mut total, mut correct, mut count) = (0.0, 0usize, 0usize);
        let mut patterns = [0usize; 3];
        for (step, chunk) in order.chunks(cfg.batch_finetune).enumerate() {
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let mut s = train_set[i].clone();
                if let Some(mc) = &cfg.missingness {
                    if s.is_full() {
                        s = sample_missingness(&s, mc, &mut sample_rng(eseed, STREAM_MISSING, &s.id))?.0;
                    }
                }
                if cfg.augment {
                    s = augment(&s, &policy, &mut sample_rng(eseed, STREAM_AUGMENT, &s.id));
                }
                patterns[(3 - s.num_present()).min(2)] += 1;
                batch.push(s);
            }
            let refs: Vec<&MultimodalSample> = batch.iter().collect();
            let labels: Vec<u8> = batch.iter().map(|s| s.label).collect();
            let inputs = model_inputs(&refs, &mods, DType::F32)?;
            let (_, probs) = model.forward(&inputs)?;
            let loss = ce_loss(&probs, &labels)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            check_finite(value, "fine-tuning", epoch + 1, step)?;
            opt.step(&loss.backward()?)?;
            let p = probs.detach().to_dtype(DType::F64)?.to_vec2::<f64>()?;
            correct += p.iter().zip(&labels).filter(|(row, &l)| argmax(row) == l as usize).count();
            total += value * chunk.len() as f64;
            count += chunk.len();
        }
        let val = predict(&model, val_set, cfg.eval_batch, None)?;
        let (val_loss, val_acc) = loss_and_accuracy(&val);
        check_finite(val_loss, "validation", epoch + 1, 0)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: total / count as f64,
            train_acc: correct as f64 / count as f64,
            val_loss,
            val_acc,
            patterns,
        };
        on_epoch(&EpochLog {
            epoch: epoch + 1,
            split: "train",
            loss: record.train_loss,
            metrics: vec![
                ("acc", record.train_acc),
                ("full", patterns[0] as f64),
                ("drop1", patterns[1] as f64),
                ("drop2", patterns[2] as f64),
            ],
        });
        on_epoch(&EpochLog {
            epoch: epoch + 1,
            split: "val",
            loss: val_loss,
            metrics: vec![("acc", val_acc)],
        });
        history.push(record);
        if val_loss < best.0 - cfg.min_delta {
            best = (val_loss, epoch + 1, store.snapshot()?);
            wait = 0;
        } else {
            wait += 1;
            if wait >= cfg.early_stop_patience {
                break;
            }
        }
    }
    let (best_val_loss, best_epoch, params) = best;
    store.load(&params)?;
    let checkpoint = Checkpoint {
        kind: CheckpointKind::Finetune,
        epoch: best_epoch,
        model: model_cfg.clone(),
        train: cfg.clone(),
        params,
        adam: None,
        losses: history.iter().map(|r| r.val_loss).collect(),
    };
    Ok(FinetuneOutcome {
        store,
        model,
        history,
        best_epoch,
        best_val_loss,
        checkpoint,
    })
}

/// Mean cross-entropy and accuracy of a prediction list.
pub fn loss_and_accuracy(preds: &[Prediction]) -> (f64, f64) {
    let n = preds.len().max(1) as f64;
    let loss = preds
        .iter()
        .map(|p| -p.probs[p.label as usize].max(crate::classifier::PROB_FLOOR).ln())
        .sum::<f64>()
        / n;
    let acc = preds.iter().filter(|p| argmax(&p.probs) == p.label as usize).count() as f64 / n;
    (loss, acc)
}

/// Class probabilities for every sample. With `subset`, only those modalities
/// are encoded (the rest are left out of the graph and fused as zeros).
pub fn predict(
    model: &HammModel,
    samples: &[MultimodalSample],
    batch: usize,
    subset: Option<&[Modality]>,
) -> Result<Vec<Prediction>> {
    let configured = &model.encoder.config.modalities;
    let mods: Vec<Modality> = match subset {
        None => configured.clone(),
        Some(s) => {
            if s.is_empty() {
                return Err(HammError::Config("modality subset is empty".into()));
            }
            if let Some(m) = s.iter().find(|m| !configured.contains(m)) {
                return Err(HammError::Config(format!("model was not built with {}", m.name())));
            }
            s.to_vec()
        }
    };
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&MultimodalSample> = chunk.iter().collect();
        let inputs = model_inputs(&refs, &mods, DType::F32)?;
        let probs = model.probabilities(&inputs)?;
        for (s, p) in chunk.iter().zip(probs) {
            let mut arr = [0.0; NUM_CLASSES];
            arr.copy_from_slice(&p);
            out.push(Prediction {
                id: s.id.clone(),
                label: s.label,
                probs: arr,
            });
        }
    }
    Ok(out)
}

pub fn evaluate_predictions(preds: &[Prediction]) -> Result<EvalReport> {
    let labels: Vec<usize> = preds.iter().map(|p| p.label as usize).collect();
    let probs: Vec<Vec<f64>> = preds.iter().map(|p| p.probs.to_vec()).collect();
    evaluate(&labels, &probs, DEFAULT_ECE_BINS)
}

/// Runs `run` for seeds `base_seed .. base_seed + n` and aggregates the reports.
pub fn multi_seed<F>(base_seed: u64, n: usize, mut run: F) -> Result<(Vec<EvalReport>, AggregateReport)>
where
    F: FnMut(u64) -> Result<EvalReport>,
{
    if n == 0 {
        return Err(HammError::Config("need at least one seed".into()));
    }
    let reports = (0..n as u64)
        .map(|i| run(base_seed.wrapping_add(i)))
        .collect::<Result<Vec<_>>>()?;
    let agg = AggregateReport::from_reports(&reports)?;
    Ok((reports, agg))
}
