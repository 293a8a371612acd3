mod common;

use hamm::config::{ModelConfig, TrainConfig};
use hamm::data::{generate_synthetic, MissingnessConfig, MultimodalSample};
use hamm::train::{
    evaluate_predictions, finetune, load_model, predict, pretrain, Checkpoint, CheckpointKind, EpochLog, Init,
};

fn quiet() -> impl FnMut(&EpochLog) {
    |_: &EpochLog| {}
}

fn small(n_per_class: usize, seed: u64) -> Vec<MultimodalSample> {
    generate_synthetic(n_per_class, 32, seed).unwrap()
}

fn cfg(seed: u64) -> TrainConfig {
    let mut c = TrainConfig::toy();
    c.seed = seed;
    c
}

#[test]
fn pretraining_halves_the_reconstruction_loss_in_20_epochs() {
    let data = small(10, 1);
    let mut c = cfg(0);
    c.pretrain_epochs = 20;
    let out = pretrain(&data, &ModelConfig::toy(), &c, None, &mut quiet()).unwrap();
    assert_eq!(out.losses.len(), 20);
    let (first, last) = (out.losses[0], out.losses[19]);
    assert!(last < 0.5 * first, "loss {first} -> {last}");
}

#[test]
fn finetuning_fits_the_training_set() {
    let data = small(10, 2);
    let mut c = cfg(0);
    c.augment = false;
    c.max_finetune_epochs = 60;
    c.early_stop_patience = 60;
    let out = finetune(&data, &data, &ModelConfig::toy(), &c, Init::Scratch, &mut quiet()).unwrap();
    let best = out.history.iter().map(|h| h.train_acc).fold(0.0, f64::max);
    assert!(best >= 0.85, "best train accuracy {best}");
}

#[test]
fn early_stopping_waits_for_patience() {
    let data = small(5, 3);
    let mut c = cfg(0);
    c.lr_finetune = 1e-12;
    c.min_delta = 1e-3;
    c.early_stop_patience = 3;
    c.max_finetune_epochs = 30;
    let out = finetune(&data, &data, &ModelConfig::toy(), &c, Init::Scratch, &mut quiet()).unwrap();
    assert_eq!(out.epochs_run(), 4);
    assert_eq!(out.best_epoch, 1);
}

#[test]
fn best_epoch_weights_are_restored() {
    let data = small(5, 4);
    let mut c = cfg(1);
    c.max_finetune_epochs = 6;
    let out = finetune(&data, &data, &ModelConfig::toy(), &c, Init::Scratch, &mut quiet()).unwrap();
    let best = &out.history[out.best_epoch - 1];
    assert!(out.history.iter().all(|h| h.val_loss >= best.val_loss));
    let preds = predict(&out.model, &data, 64, None).unwrap();
    let report = evaluate_predictions(&preds).unwrap();
    assert!((report.loss - best.val_loss).abs() < 1e-9, "{} vs {}", report.loss, best.val_loss);
}

#[test]
fn resumed_pretraining_matches_an_uninterrupted_run() {
    let data = small(3, 5);
    let mut c = cfg(2);
    c.pretrain_epochs = 3;
    let direct = pretrain(&data, &ModelConfig::toy(), &c, None, &mut quiet()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.safetensors");
    let mut first = c.clone();
    first.pretrain_epochs = 2;
    pretrain(&data, &ModelConfig::toy(), &first, None, &mut quiet())
        .unwrap()
        .checkpoint
        .save(&path)
        .unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.epoch, 2);
    let resumed = pretrain(&data, &ModelConfig::toy(), &c, Some(&ck), &mut quiet()).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&resumed.losses), bits(&direct.losses));
    for (k, v) in &direct.checkpoint.params {
        let w = &resumed.checkpoint.params[k];
        let d = (v - w).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(d, 0.0, "{k}");
    }
}

#[test]
fn resume_rejects_a_different_model() {
    let data = small(2, 6);
    let mut c = cfg(0);
    c.pretrain_epochs = 1;
    let ck = pretrain(&data, &ModelConfig::toy(), &c, None, &mut quiet()).unwrap().checkpoint;
    let mut other = ModelConfig::toy();
    other.decoder.width = 8;
    c.pretrain_epochs = 2;
    assert!(pretrain(&data, &other, &c, Some(&ck), &mut quiet()).is_err());
}

#[test]
fn saved_checkpoint_reproduces_metrics() {
    let data = small(5, 7);
    let mut c = cfg(3);
    c.max_finetune_epochs = 2;
    let out = finetune(&data, &data, &ModelConfig::toy(), &c, Init::Scratch, &mut quiet()).unwrap();
    let before = evaluate_predictions(&predict(&out.model, &data, 64, None).unwrap()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.safetensors");
    out.checkpoint.save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.kind, CheckpointKind::Finetune);
    assert_eq!(ck.epoch, out.best_epoch);
    let (_store, model) = load_model(&ck).unwrap();
    let after = evaluate_predictions(&predict(&model, &data, 64, None).unwrap()).unwrap();
    assert_eq!(before.to_text(), after.to_text());
    assert_eq!(before.reliability_csv(), after.reliability_csv());
}

#[test]
fn missingness_mixes_patterns_during_finetuning() {
    let data = small(10, 8);
    let mut c = cfg(4);
    c.max_finetune_epochs = 3;
    c.early_stop_patience = 3;
    c.missingness = Some(MissingnessConfig::default());
    let out = finetune(&data, &data, &ModelConfig::toy(), &c, Init::Scratch, &mut quiet()).unwrap();
    let mut totals = [0usize; 3];
    for h in &out.history {
        assert_eq!(h.patterns.iter().sum::<usize>(), data.len());
        for k in 0..3 {
            totals[k] += h.patterns[k];
        }
    }
    let n = (data.len() * out.epochs_run()) as f64;
    let full = totals[0] as f64 / n;
    assert!((0.35..=0.65).contains(&full), "full share {full} of {totals:?}");
    assert!(totals[1] > 0 && totals[2] > 0, "{totals:?}");

    c.missingness = None;
    let out = finetune(&data, &data, &ModelConfig::toy(), &c, Init::Scratch, &mut quiet()).unwrap();
    assert!(out.history.iter().all(|h| h.patterns == [data.len(), 0, 0]));
}

#[test]
fn frozen_mcga_keeps_pretrained_values() {
    let data = small(3, 9);
    let mut c = cfg(5);
    c.pretrain_epochs = 1;
    let pre = pretrain(&data, &ModelConfig::toy(), &c, None, &mut quiet()).unwrap().checkpoint;
    c.max_finetune_epochs = 2;
    c.freeze_mcga = true;
    let out = finetune(&data, &data, &ModelConfig::toy(), &c, Init::Pretrained(&pre), &mut quiet()).unwrap();
    let mut mcga = 0;
    let mut moved = 0;
    for (k, v) in &out.checkpoint.params {
        let diff = |a: &candle_core::Tensor| (v - a).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        if k.starts_with("encoder.mcga") {
            mcga += 1;
            assert_eq!(diff(&pre.params[k]), 0.0, "{k} changed");
        } else if let Some(p) = pre.params.get(k) {
            if diff(p) > 0.0 {
                moved += 1;
            }
        }
    }
    assert!(mcga > 0);
    assert!(moved > 0, "backbone should still train");
}

#[test]
fn pretrained_encoder_is_loaded_and_decoder_dropped() {
    let data = small(2, 10);
    let mut c = cfg(6);
    c.pretrain_epochs = 1;
    let pre = pretrain(&data, &ModelConfig::toy(), &c, None, &mut quiet()).unwrap().checkpoint;
    assert!(pre.params.keys().any(|k| k.starts_with("decoder.")));
    c.max_finetune_epochs = 1;
    c.lr_finetune = 1e-12;
    let out = finetune(&data, &data, &ModelConfig::toy(), &c, Init::Pretrained(&pre), &mut quiet()).unwrap();
    assert!(out.checkpoint.params.keys().all(|k| !k.starts_with("decoder.")));
    let stem = "encoder.fundus.stem.weight";
    let d = (&out.checkpoint.params[stem] - &pre.params[stem])
        .unwrap()
        .abs()
        .unwrap()
        .max_all()
        .unwrap()
        .to_scalar::<f32>()
        .unwrap();
    assert!(d < 1e-6, "stem moved by {d}");

    let mut other = ModelConfig::toy();
    other.encoder.widths = [8, 16, 32, 64];
    assert!(finetune(&data, &data, &other, &c, Init::Pretrained(&pre), &mut quiet()).is_err());
}

#[test]
fn shared_helpers_split_the_pool() {
    let s = common::synthetic_splits(10, [0.6, 0.2, 0.2], 1);
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (24, 8, 8));
}
