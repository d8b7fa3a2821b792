//! The generate / train / eval / infer workflows behind the command line.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{generate_dataset, kfold_split, load_dataset, load_image, save_dataset, save_mask_png, SegSample};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, evaluate, ImageMetrics, MetricsReport};
use crate::network::GgNet;
use crate::train::{EpochLog, Trainer};

pub const CHECKPOINT_FILE: &str = "checkpoint.ggnt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
const TRAIN_LOG_HEADER: &str = "epoch,lr,loss,final_seg,steps";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    All,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::All => "all",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            other => Err(Error::Config(format!("unknown split '{other}' (expected train, test or all)"))),
        }
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_file(p: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(p, bytes).map_err(|e| Error::io(p, e))
}

/// Writes `count` phantoms to the configured data root and returns it.
pub fn generate(cfg: &RunConfig, count: usize) -> Result<PathBuf> {
    cfg.phantom.validate()?;
    let root = cfg.data_root();
    save_dataset(&root, &generate_dataset(&cfg.phantom, count)?)?;
    Ok(root)
}

/// Loads the dataset and returns the samples of `split` with their fold.
///
/// With a single fold there is nothing to hold out, so every split is the
/// whole dataset.
pub fn load_split(cfg: &RunConfig, split: Split) -> Result<Vec<(SegSample, usize)>> {
    let samples = load_dataset(&cfg.data_root())?;
    if samples.is_empty() {
        return Err(Error::MissingPair { stem: "*".into(), reason: format!("dataset {} is empty", cfg.data_root().display()) });
    }
    if cfg.data.folds > samples.len() {
        return Err(Error::Config(format!("{} folds requested for {} samples", cfg.data.folds, samples.len())));
    }
    let folds = kfold_split(samples.len(), cfg.data.folds, cfg.seed)?;
    let keep = |f: usize| match split {
        _ if cfg.data.folds == 1 => true,
        Split::Train => f != cfg.data.test_fold,
        Split::Test => f == cfg.data.test_fold,
        Split::All => true,
    };
    Ok(samples.into_iter().zip(folds).filter(|&(_, f)| keep(f)).collect())
}

fn log_row(l: &EpochLog) -> String {
    format!("{},{},{},{},{}", l.epoch, l.lr, l.loss, l.final_seg, l.steps)
}

/// First `epochs` data rows of an existing log, used when resuming.
fn read_log_prefix(path: &Path, epochs: usize) -> Vec<String> {
    fs::read_to_string(path)
        .map(|text| text.lines().skip(1).take(epochs).map(str::to_string).collect())
        .unwrap_or_default()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    /// Epochs run by this invocation.
    pub epochs: Vec<EpochLog>,
}

/// Trains the configured variant on the train split.
///
/// The checkpoint and log under `<out_dir>/<variant>/` are rewritten after
/// every epoch. With `resume`, training continues from that checkpoint and
/// the log keeps its rows up to the checkpoint's epoch.
pub fn train(cfg: &RunConfig, resume: bool, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_set: Vec<SegSample> = load_split(cfg, Split::Train)?.into_iter().map(|(s, _)| s).collect();
    let dir = cfg.variant_dir();
    create_dir(&dir)?;
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let log_path = dir.join(TRAIN_LOG_FILE);

    let (mut trainer, mut rows) = if resume {
        let ck = Checkpoint::load(&ckpt_path)?;
        if ck.net.arch != cfg.architecture() {
            return Err(Error::Config(format!("{} was trained with a different architecture", ckpt_path.display())));
        }
        if ck.seed != cfg.seed {
            return Err(Error::Config(format!("{} was trained with seed {}, not {}", ckpt_path.display(), ck.seed, cfg.seed)));
        }
        let rows = read_log_prefix(&log_path, ck.epoch as usize);
        (ck.into_trainer(cfg.train.clone(), cfg.loss)?, rows)
    } else {
        let net = GgNet::new(cfg.architecture(), cfg.seed)?;
        let tr = Trainer::new(net, cfg.train.clone(), cfg.loss, cfg.seed)?;
        Checkpoint::from_trainer(&tr).save(&ckpt_path)?;
        (tr, Vec::new())
    };

    let write_log = |rows: &[String]| {
        let mut text = String::from(TRAIN_LOG_HEADER);
        text.push('\n');
        for r in rows {
            text.push_str(r);
            text.push('\n');
        }
        write_file(&log_path, text)
    };
    write_log(&rows)?;

    let mut epochs = Vec::new();
    while trainer.epoch < trainer.cfg.epochs {
        let log = trainer.train_epoch(&train_set)?;
        Checkpoint::from_trainer(&trainer).save(&ckpt_path)?;
        rows.push(log_row(&log));
        write_log(&rows)?;
        on_epoch(&log);
        epochs.push(log);
    }
    Ok(TrainOutcome { checkpoint: ckpt_path, log: log_path, epochs })
}

/// Default checkpoint location for the configured variant.
pub fn default_checkpoint(cfg: &RunConfig) -> PathBuf {
    cfg.variant_dir().join(CHECKPOINT_FILE)
}

fn load_model(path: &Path) -> Result<GgNet> {
    if !path.exists() {
        return Err(Error::Checkpoint(format!("{} not found", path.display())));
    }
    Ok(Checkpoint::load(path)?.net)
}

/// Per-image metrics of `net` on `samples`, computed on all available cores.
/// Results come back in input order whatever the thread count.
pub fn evaluate_samples(net: &GgNet, samples: &[(SegSample, usize)], threshold: f64) -> Result<Vec<ImageMetrics>> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(samples.len()).max(1);
    let chunk = samples.len().div_ceil(threads).max(1);
    let eval_one = |(s, fold): &(SegSample, usize)| -> Result<ImageMetrics> {
        let pred = net.infer(&s.image, threshold)?;
        evaluate(s.id.clone(), *fold, &pred, &s.mask)
    };
    let parts: Vec<Result<Vec<ImageMetrics>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(eval_one).collect::<Result<Vec<_>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(samples.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: MetricsReport,
    pub csv: PathBuf,
    pub json: PathBuf,
}

/// Evaluates a checkpoint on a split and writes `metrics_<split>.csv` and
/// `metrics_<split>.json` under `<out_dir>/<variant of the checkpoint>/`.
pub fn eval(cfg: &RunConfig, checkpoint: &Path, split: Split) -> Result<EvalOutcome> {
    cfg.validate()?;
    let net = load_model(checkpoint)?;
    let samples = load_split(cfg, split)?;
    let report = aggregate(&evaluate_samples(&net, &samples, cfg.eval.threshold)?)?;
    let dir = cfg.out_dir.join(net.variant().label());
    create_dir(&dir)?;
    let csv = dir.join(format!("metrics_{split}.csv"));
    let json = dir.join(format!("metrics_{split}.json"));
    let mut buf = Vec::new();
    report.write_csv(&mut buf).map_err(|e| Error::Format { path: csv.clone(), reason: e.to_string() })?;
    write_file(&csv, buf)?;
    write_file(&json, report.to_json())?;
    Ok(EvalOutcome { report, csv, json })
}

/// Segments one grayscale PNG and writes the mask to
/// `<out_dir>/<variant>/infer/<stem>.png`.
pub fn infer(cfg: &RunConfig, checkpoint: &Path, input: &Path) -> Result<PathBuf> {
    let net = load_model(checkpoint)?;
    let image = load_image(input)?;
    let mask = net.infer(&image, cfg.eval.threshold)?;
    let dir = cfg.out_dir.join(net.variant().label()).join("infer");
    create_dir(&dir)?;
    let stem = input.file_stem().map_or_else(|| "input".into(), |s| s.to_string_lossy().into_owned());
    let out = dir.join(format!("{stem}.png"));
    save_mask_png(&out, &mask)?;
    Ok(out)
}
