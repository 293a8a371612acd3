//! `hamm` command-line tool.
//!
//! Exit codes: 0 success, 1 I/O or internal error, 2 configuration or usage
//! error, 3 data error, 4 numeric failure, 5 incompatible or unreadable checkpoint.
//!
//! Relative output paths are resolved under `$HAMM_OUTPUT_ROOT` when it is set.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hamm::classifier::predictions_to_text;
use hamm::config::{Profile, RunConfig};
use hamm::data::{
    build_missing_eval_set, generate_synthetic, read_dataset, stratified_split, write_dataset, Modality,
    MissingEvalConfig, MissingnessConfig, MultimodalSample,
};
use hamm::metrics::EvalReport;
use hamm::train::{
    evaluate_predictions, finetune, load_model, predict, pretrain, Checkpoint, EpochLog, Init,
};
use hamm::{HammError, Result};

const OUTPUT_ROOT_ENV: &str = "HAMM_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "hamm", version, about = "Tri-modal stage classification with masked pretraining")]
struct Cli {
    /// TOML run configuration; flags below override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Model/training profile used when no config file is given.
    #[arg(long, global = true)]
    profile: Option<String>,
    /// Single-threaded kernels for bit-reproducible runs.
    #[arg(long, global = true)]
    deterministic: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic tri-modal dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Samples per class.
        #[arg(long, default_value_t = 50)]
        n: usize,
        /// Image side; defaults to the profile's input size.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Stratified train/val/test split of a dataset.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "0.6,0.2,0.2")]
        ratios: String,
    },
    /// Masked-reconstruction pretraining.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        mask_ratio: Option<f64>,
        /// Continue from a pretraining checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Supervised fine-tuning with early stopping.
    Finetune(FinetuneArgs),
    /// Evaluate a fine-tuned checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Encode only these modalities, e.g. `vf` or `fundus,oct`.
        #[arg(long)]
        modalities: Option<String>,
        /// Evaluate on the split plus one- and two-modality-missing copies.
        #[arg(long)]
        missing_eval: bool,
    },
    /// Pretrain, fine-tune and evaluate once per masking ratio.
    Sweep {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
        ratios: String,
    },
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Pretraining checkpoint to initialize the encoder from.
    #[arg(long, conflicts_with = "scratch")]
    pretrained: Option<PathBuf>,
    /// Random initialization instead of a pretrained encoder.
    #[arg(long)]
    scratch: bool,
    /// Randomly drop modalities per sample and epoch (0.5 / 0.25 / 0.25).
    #[arg(long)]
    missingness: bool,
    #[arg(long)]
    freeze_mcga: bool,
    #[arg(long)]
    max_epochs: Option<usize>,
}

fn exit_code(e: &HammError) -> u8 {
    match e {
        HammError::Config(_) => 2,
        HammError::Data(_) => 3,
        HammError::Numeric(_) => 4,
        HammError::Checkpoint(_) => 5,
        _ => 1,
    }
}

fn output_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if p.is_relative() => Path::new(&root).join(p),
        _ => p.to_path_buf(),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| HammError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| HammError::io(path, e))
}

fn parse_floats(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| HammError::Config(format!("'{x}' is not a number")))
        })
        .collect()
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            HammError::Io { .. } => HammError::Config(format!("cannot read config {}: {e}", p.display())),
            other => other,
        })?,
        None => RunConfig::for_profile(Profile::parse(cli.profile.as_deref().unwrap_or("toy"))?),
    };
    if let (Some(_), Some(p)) = (&cli.config, &cli.profile) {
        if Profile::parse(p)? != cfg.profile {
            return Err(HammError::Config("--profile contradicts the config file".into()));
        }
    }
    if cli.deterministic {
        cfg.deterministic = true;
    }
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn load_split(path: &Path, cfg: &RunConfig) -> Result<Vec<MultimodalSample>> {
    read_dataset(path, Some(cfg.model.encoder.image_size))
}

fn log_to(lines: &mut String) -> impl FnMut(&EpochLog) + '_ {
    move |l: &EpochLog| {
        let line = l.to_line();
        eprintln!("{line}");
        let _ = writeln!(lines, "{line}");
    }
}

fn write_eval(out: &Path, preds: &[hamm::classifier::Prediction], extra: &str) -> Result<EvalReport> {
    let report = evaluate_predictions(preds)?;
    write(&out.join("predictions.tsv"), &predictions_to_text(preds))?;
    write(&out.join("report.txt"), &format!("{extra}{}", report.to_text()))?;
    write(&out.join("reliability.csv"), &report.reliability_csv())?;
    Ok(report)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    if cfg.deterministic {
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    match cli.command {
        Command::Synth { out, n, size } => {
            let out = output_path(&out);
            let size = size.unwrap_or(cfg.model.encoder.image_size);
            let data = generate_synthetic(n, size, cfg.train.seed)?;
            write_dataset(&out, &data)?;
            println!("wrote {} samples to {}", data.len(), out.display());
        }
        Command::Split { data, out, ratios } => {
            let out = output_path(&out);
            let r = parse_floats(&ratios)?;
            if r.len() != 3 {
                return Err(HammError::Config("--ratios needs three values".into()));
            }
            let samples = read_dataset(&data, None)?;
            let manifest = stratified_split(&samples, [r[0], r[1], r[2]], cfg.train.seed)?;
            for (name, ids) in ["train", "val", "test"].iter().zip(manifest.parts()) {
                let part: Vec<MultimodalSample> = samples.iter().filter(|s| ids.binary_search(&s.id).is_ok()).cloned().collect();
                write_dataset(&out.join(name), &part)?;
            }
            write(&out.join("split.txt"), &manifest.to_text())?;
            let [a, b, c] = manifest.totals();
            println!("train {a} / val {b} / test {c}");
        }
        Command::Pretrain { data, out, epochs, mask_ratio, resume } => {
            let out = output_path(&out);
            if let Some(e) = epochs {
                cfg.train.pretrain_epochs = e;
            }
            if let Some(r) = mask_ratio {
                cfg.train.mask.ratio = r;
            }
            cfg.validate()?;
            let samples = load_split(&data, &cfg)?;
            let resume = resume.map(|p| Checkpoint::load(&p)).transpose()?;
            let mut lines = String::new();
            let outcome = pretrain(&samples, &cfg.model, &cfg.train, resume.as_ref(), &mut log_to(&mut lines))?;
            outcome.checkpoint.save(&out.join("pretrain.safetensors"))?;
            let curve: String = outcome
                .losses
                .iter()
                .enumerate()
                .map(|(i, l)| format!("{}\t{l:?}\n", i + 1))
                .collect();
            write(&out.join("pretrain_loss.tsv"), &format!("# epoch\tloss\n{curve}"))?;
            write(&out.join("pretrain.log"), &lines)?;
            write(&out.join("config.toml"), &cfg.to_toml()?)?;
        }
        Command::Finetune(args) => {
            let out = output_path(&args.out);
            if args.missingness {
                cfg.train.missingness = Some(MissingnessConfig::default());
            }
            if args.freeze_mcga {
                cfg.train.freeze_mcga = true;
            }
            if let Some(m) = args.max_epochs {
                cfg.train.max_finetune_epochs = m;
            }
            cfg.validate()?;
            if args.pretrained.is_none() && !args.scratch {
                return Err(HammError::Config("pass --pretrained <checkpoint> or --scratch".into()));
            }
            let train = load_split(&args.train, &cfg)?;
            let val = load_split(&args.val, &cfg)?;
            let ck = args.pretrained.map(|p| Checkpoint::load(&p)).transpose()?;
            let init = match &ck {
                Some(c) => Init::Pretrained(c),
                None => Init::Scratch,
            };
            let mut lines = String::new();
            let outcome = finetune(&train, &val, &cfg.model, &cfg.train, init, &mut log_to(&mut lines))?;
            outcome.checkpoint.save(&out.join("best.safetensors"))?;
            write(&out.join("epochs.log"), &lines)?;
            write(&out.join("config.toml"), &cfg.to_toml()?)?;
            println!(
                "best epoch {} of {}: val loss {:.4}, val acc {:.4}",
                outcome.best_epoch,
                outcome.epochs_run(),
                outcome.best_val_loss,
                outcome.best_val_acc()
            );
        }
        Command::Eval { checkpoint, data, out, modalities, missing_eval } => {
            let out = output_path(&out);
            let ck = Checkpoint::load(&checkpoint)?;
            let (_store, model) = load_model(&ck)?;
            let mut samples = read_dataset(&data, Some(ck.model.encoder.image_size))?;
            let mut extra = String::new();
            if missing_eval {
                let set = build_missing_eval_set(&samples, &MissingEvalConfig::default(), cfg.train.seed)?;
                for (k, v) in &set.pattern_counts {
                    let _ = writeln!(extra, "# pattern {} = {v}", k.tag());
                }
                samples = set.samples;
            }
            let subset = modalities.as_deref().map(Modality::parse_list).transpose()?;
            let preds = predict(&model, &samples, ck.train.eval_batch, subset.as_deref())?;
            let report = write_eval(&out, &preds, &extra)?;
            println!("n = {}  accuracy = {:.4}  f1_macro = {:.4}", report.n, report.accuracy, report.f1_macro);
        }
        Command::Sweep { train, val, test, out, ratios } => {
            let out = output_path(&out);
            let ratios = parse_floats(&ratios)?;
            let train = load_split(&train, &cfg)?;
            let val = load_split(&val, &cfg)?;
            let test = load_split(&test, &cfg)?;
            let mut summary = String::from("# mask_ratio\taccuracy\tf1_macro\tauroc_macro\tkappa_qw\n");
            for r in ratios {
                let mut run_cfg = cfg.clone();
                run_cfg.train.mask.ratio = r;
                run_cfg.validate()?;
                let dir = out.join(format!("ratio-{r}"));
                let mut lines = String::new();
                let pre = pretrain(&train, &run_cfg.model, &run_cfg.train, None, &mut log_to(&mut lines))?;
                let ft = finetune(
                    &train,
                    &val,
                    &run_cfg.model,
                    &run_cfg.train,
                    Init::Pretrained(&pre.checkpoint),
                    &mut log_to(&mut lines),
                )?;
                write(&dir.join("epochs.log"), &lines)?;
                let preds = predict(&ft.model, &test, run_cfg.train.eval_batch, None)?;
                let rep = write_eval(&dir, &preds, &format!("# mask_ratio = {r:?}\n"))?;
                let _ = writeln!(
                    summary,
                    "{r:?}\t{:?}\t{:?}\t{:?}\t{:?}",
                    rep.accuracy, rep.f1_macro, rep.auroc_macro, rep.kappa_qw
                );
            }
            write(&out.join("sweep.tsv"), &summary)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
