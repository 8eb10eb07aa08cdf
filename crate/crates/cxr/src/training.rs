//! Run orchestration: sample preparation, parallel gradient evaluation,
//! per-epoch checkpoints and the metrics log.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use cxr_core::beam::{beam_search, BeamConfig};
use cxr_core::cider::{corpus_cider, corpus_stats, DEFAULT_N};
use cxr_core::image::{preprocess, GrayImage};
use cxr_core::model::Model;
use cxr_core::text::{decode, encode, segment, TokenizedReport, Vocabulary};
use cxr_core::train::{epoch_order, select_best_epoch, Pretrainer, Trainer};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::{save_vocab, Dataset, ReportRecord, Split};
use crate::error::{io_err, Error, Result};
use crate::metrics::{write_csv, EpochMetrics};

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const METRICS_FILE: &str = "metrics.csv";
pub const VOCAB_FILE: &str = "vocab.json";
pub const SUMMARY_FILE: &str = "summary.json";

/// One record ready for the model: preprocessed pixels plus encoded and raw tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: GrayImage,
    pub truth: TokenizedReport,
    /// Segmented ground-truth report, unknown words kept.
    pub reference: Vec<String>,
    pub report: String,
    pub findings: Vec<String>,
}

pub fn prepare(dataset: &Dataset, records: &[&ReportRecord], vocab: &Vocabulary, input_size: usize) -> Result<Vec<Sample>> {
    records
        .par_iter()
        .map(|rec| {
            let image = preprocess(&dataset.image(rec)?, input_size)?;
            let reference = segment(&rec.report);
            Ok(Sample {
                id: rec.id.clone(),
                image,
                truth: encode(&reference, vocab),
                reference,
                report: rec.report.clone(),
                findings: rec.findings.clone(),
            })
        })
        .collect()
}

fn pairs(samples: &[Sample]) -> Vec<(GrayImage, TokenizedReport)> {
    samples.iter().map(|s| (s.image.clone(), s.truth.clone())).collect()
}

/// Same batches, update order and loss accumulation as [`Trainer::train_epoch`];
/// only the per-sample gradients are evaluated concurrently.
pub fn parallel_epoch(trainer: &mut Trainer, data: &[(GrayImage, TokenizedReport)]) -> Result<f64> {
    let order = epoch_order(data.len(), trainer.config.seed, trainer.epoch);
    let mut total = 0.0;
    for batch in order.chunks(trainer.config.batch_size) {
        let t = &*trainer;
        let samples = batch
            .par_iter()
            .map(|&i| t.sample_gradients(&data[i].0, &data[i].1))
            .collect::<cxr_core::Result<Vec<_>>>()?;
        total += samples.iter().map(|s| s.loss).sum::<f64>();
        trainer.apply_batch(&samples);
    }
    trainer.epoch += 1;
    Ok(total / data.len().max(1) as f64)
}

/// Mean teacher-forced loss, summed in sample order.
pub fn mean_loss(model: &Model, samples: &[Sample]) -> Result<f64> {
    let losses = samples
        .par_iter()
        .map(|s| model.caption_loss(&s.image, &s.truth))
        .collect::<cxr_core::Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Decoded texts of the beam hypotheses for one preprocessed image, best first.
pub fn beam_reports(model: &Model, vocab: &Vocabulary, image: &GrayImage, cfg: &BeamConfig) -> Result<Vec<String>> {
    let features = model.features(image)?;
    let hyps = beam_search(&features, &model.decoder_params(), cfg)?;
    hyps.iter()
        .map(|h| Ok(decode(h.report().indices(), vocab)?))
        .collect()
}

/// Corpus CIDEr of the rank-1 beam over `samples`, statistics from their references.
pub fn rank1_cider(model: &Model, vocab: &Vocabulary, samples: &[Sample], cfg: &BeamConfig) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let one = BeamConfig { n_best: 1, ..*cfg };
    let candidates = samples
        .par_iter()
        .map(|s| {
            let texts = beam_reports(model, vocab, &s.image, &one)?;
            Ok(texts.first().map(|t| segment(t)).unwrap_or_default())
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<Vec<Vec<String>>> = samples.iter().map(|s| vec![s.reference.clone()]).collect();
    let stats = corpus_stats(&refs, DEFAULT_N)?;
    Ok(corpus_cider(&candidates, &refs, &stats, DEFAULT_N)?.mean)
}

pub fn beam_config(cfg: &RunConfig) -> BeamConfig {
    BeamConfig::new(cfg.train.beam_width, cfg.train.max_len, cfg.train.beam_width)
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Continue from the newest checkpoint in the output directory, if any.
    pub resume: bool,
    /// Score the validation split with rank-1 CIDEr after each epoch.
    pub val_cider: bool,
    /// Stop after this many epochs in total even if the config asks for more.
    pub stop_after: Option<usize>,
    pub verbose: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            resume: false,
            val_cider: true,
            stop_after: None,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub epochs: usize,
    /// 1-based epoch with the lowest validation loss.
    pub best_epoch: Option<usize>,
    pub best_checkpoint: Option<PathBuf>,
    pub history: Vec<EpochMetrics>,
}

pub fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(CHECKPOINT_DIR).join(format!("epoch-{epoch:03}.ckpt"))
}

/// Highest-numbered `epoch-NNN.ckpt` under `out_dir`.
pub fn latest_checkpoint(out_dir: &Path) -> Result<Option<PathBuf>> {
    let dir = out_dir.join(CHECKPOINT_DIR);
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
        let path = entry.map_err(io_err(&dir))?.path();
        let epoch = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("epoch-")?.strip_suffix(".ckpt")?.parse::<usize>().ok());
        if let Some(e) = epoch {
            if best.as_ref().is_none_or(|(b, _)| e > *b) {
                best = Some((e, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Sorted finding labels present in the training split.
pub fn finding_labels(dataset: &Dataset) -> Vec<String> {
    let set: BTreeSet<&str> = dataset
        .split(Split::Train)
        .iter()
        .flat_map(|r| r.findings.iter().map(String::as_str))
        .collect();
    set.into_iter().map(str::to_string).collect()
}

fn log(opts: &RunOptions, msg: impl FnOnce() -> String) {
    if opts.verbose {
        eprintln!("{}", msg());
    }
}

/// Trains on the dataset in `data_dir`, writing checkpoints, `metrics.csv`,
/// `vocab.json` and `summary.json` under `out_dir`.
pub fn train_run(data_dir: &Path, out_dir: &Path, config: &RunConfig, opts: &RunOptions) -> Result<RunSummary> {
    let dataset = Dataset::load(data_dir)?;
    let ckpt_dir = out_dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir).map_err(io_err(&ckpt_dir))?;

    let resumed = match opts.resume {
        true => latest_checkpoint(out_dir)?.map(|p| Checkpoint::load(&p)).transpose()?,
        false => None,
    };
    let (mut trainer, vocab, mut history) = match resumed {
        Some(c) => {
            log(opts, || format!("resuming after epoch {}", c.trainer.epoch));
            (c.trainer, c.vocab, c.history)
        }
        None => {
            let vocab = dataset.train_vocab(config.train.min_count)?;
            let model = pretrained_model(&dataset, &vocab, config, opts)?;
            (Trainer::new(model, config.train.clone())?, vocab, Vec::new())
        }
    };
    save_vocab(&out_dir.join(VOCAB_FILE), &vocab)?;

    let input = trainer.model.config.encoder.input_size;
    let train = prepare(&dataset, &dataset.split(Split::Train), &vocab, input)?;
    let val = prepare(&dataset, &dataset.split(Split::Val), &vocab, input)?;
    let train_pairs = pairs(&train);
    let beam = beam_config(config);

    let target = opts.stop_after.map_or(config.train.epochs, |s| s.min(config.train.epochs));
    while trainer.epoch < target {
        let train_loss = parallel_epoch(&mut trainer, &train_pairs)?;
        if !train_loss.is_finite() {
            return Err(Error::Invalid(format!(
                "non-finite training loss in epoch {}; last good checkpoint kept",
                trainer.epoch
            )));
        }
        let val_loss = if val.is_empty() { f64::NAN } else { mean_loss(&trainer.model, &val)? };
        let val_cider = match opts.val_cider && !val.is_empty() {
            true => Some(rank1_cider(&trainer.model, &vocab, &val, &beam)?),
            false => None,
        };
        let row = EpochMetrics {
            epoch: trainer.epoch,
            train_loss,
            val_loss,
            val_cider,
        };
        log(opts, || format!("epoch {:3}  train {train_loss:.5}  val {val_loss:.5}  cider {val_cider:?}", row.epoch));
        history.push(row);
        let ckpt = Checkpoint {
            trainer: trainer.clone(),
            vocab: vocab.clone(),
            history: history.clone(),
        };
        ckpt.save(&checkpoint_path(out_dir, trainer.epoch))?;
        write_csv(&out_dir.join(METRICS_FILE), &history)?;
    }

    let summary = summarize(out_dir, &history);
    let path = out_dir.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(&summary).map_err(|source| Error::Json {
        context: "run summary".into(),
        source,
    })?;
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(summary)
}

fn summarize(out_dir: &Path, history: &[EpochMetrics]) -> RunSummary {
    let val: Vec<f64> = history.iter().map(|h| h.val_loss).collect();
    let best_epoch = select_best_epoch(&val).map(|i| history[i].epoch);
    RunSummary {
        epochs: history.len(),
        best_epoch,
        best_checkpoint: best_epoch.map(|e| checkpoint_path(out_dir, e)),
        history: history.to_vec(),
    }
}

/// Fresh model; when pretraining is configured its encoder is first fitted to
/// the finding labels of the training split.
fn pretrained_model(dataset: &Dataset, vocab: &Vocabulary, config: &RunConfig, opts: &RunOptions) -> Result<Model> {
    let t = &config.train;
    let labels = if t.pretrain_epochs > 0 { finding_labels(dataset) } else { Vec::new() };
    let mut model = Model::new(config.model, vocab.len(), labels.len(), t.seed)?;
    if labels.is_empty() {
        return Ok(model);
    }
    let records = dataset.split(Split::Train);
    let input = config.model.encoder.input_size;
    let data = records
        .par_iter()
        .map(|r| {
            let img = preprocess(&dataset.image(r)?, input)?;
            let y = labels.iter().map(|l| r.findings.contains(l) as u8 as f64).collect();
            Ok((img, y))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut pre = Pretrainer::new(&model, t);
    for epoch in 0..t.pretrain_epochs {
        let loss = pre.train_epoch(&mut model, &data, t.seed, epoch, t.batch_size)?;
        log(opts, || format!("pretrain {:3}  bce {loss:.5}", epoch + 1));
    }
    Ok(model)
}
