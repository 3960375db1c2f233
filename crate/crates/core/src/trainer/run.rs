//! Epoch loop, run directory layout and resume.
//!
//! A run directory holds:
//!
//! - `epochs.jsonl`: one [`EpochRecord`] per line
//! - `summary.csv`: the final record
//! - `timing.csv`: wall-clock seconds per epoch
//! - `checkpoints/epoch-NNNNNN.model` and `.state`: parameters and
//!   optimizer state every `checkpoint_every` epochs and at the end
//! - `model.ckpt`: the final parameters

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Precision, StepLosses, StreamMode, TrainConfig, TrainError, TrainState};
use crate::augment::{images_to_tensor, substream, Image};
use crate::data::LabeledImageSet;
use crate::metrics::{evaluate, largest_cluster_share};
use crate::model::{
    assign_clusters, decode_archive, encode_archive, load_checkpoint, save_checkpoint, Archive, Network, NetworkParams,
    ParamSet,
};
use crate::numerics::{Real, Tensor};

pub const EPOCH_LOG: &str = "epochs.jsonl";
pub const SUMMARY_CSV: &str = "summary.csv";
const TIMING_CSV: &str = "timing.csv";
const CHECKPOINT_DIR: &str = "checkpoints";
const FINAL_MODEL: &str = "model.ckpt";
const STATE_KIND: &str = "train_state";
// substream tag for the per-epoch shuffle; batches use (epoch, batch) pairs
const SHUFFLE_TAG: u64 = u64::MAX;

/// Per-epoch log entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub epoch: usize,
    pub instance_loss: f64,
    pub cluster_loss: f64,
    pub total_loss: f64,
    pub nmi: f64,
    pub acc: f64,
    pub ari: f64,
    pub largest_cluster_share: f64,
    /// seconds; 0 in fixed-precision runs so logs replay byte for byte
    pub wall_time: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// run directory; nothing is written when absent
    pub out_dir: Option<PathBuf>,
    /// continue from the newest checkpoint in `out_dir`
    pub resume: bool,
    /// stop after this epoch, as if interrupted
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunOutput<T> {
    pub state: TrainState<T>,
    pub records: Vec<EpochRecord>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> TrainError {
    TrainError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), TrainError> {
    // write-then-rename so an interrupted run never leaves half a checkpoint
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn checkpoint_paths(dir: &Path, epoch: usize) -> (PathBuf, PathBuf) {
    let base = dir.join(CHECKPOINT_DIR).join(format!("epoch-{epoch:06}"));
    (base.with_extension("model"), base.with_extension("state"))
}

fn save_state<T: Real>(dir: &Path, state: &TrainState<T>) -> Result<(), TrainError> {
    fs::create_dir_all(dir.join(CHECKPOINT_DIR)).map_err(|e| io_err(dir, e))?;
    let (model_path, state_path) = checkpoint_paths(dir, state.epoch);
    let meta = serde_json::json!({
        "epoch": state.epoch,
        "online_step": state.online_opt.step,
        "target_step": state.target_opt.as_ref().map(|o| o.step),
    });
    let mut a = Archive::new(STATE_KIND, meta);
    state.online_opt.write_to("online", &mut a);
    if let Some(t) = &state.target_opt {
        t.write_to("target", &mut a);
    }
    write_file(&model_path, &save_checkpoint(&state.params))?;
    write_file(&state_path, &encode_archive(&a))
}

/// Restores the training state saved at `epoch`.
pub fn load_state<T: Real>(dir: &Path, epoch: usize, cfg: &TrainConfig) -> Result<TrainState<T>, TrainError> {
    let (model_path, state_path) = checkpoint_paths(dir, epoch);
    let model_bytes = fs::read(&model_path).map_err(|e| io_err(&model_path, e))?;
    let params = load_checkpoint::<T>(&model_bytes)?;
    if params.arch != cfg.model {
        return Err(TrainError::State(format!(
            "{} was trained with a different model config",
            model_path.display()
        )));
    }
    let state_bytes = fs::read(&state_path).map_err(|e| io_err(&state_path, e))?;
    let a: Archive<T> = decode_archive(&state_bytes)?;
    if a.kind != STATE_KIND {
        return Err(TrainError::State(format!("{} is not a training state", state_path.display())));
    }
    let step = |key: &str| a.meta.get(key).and_then(serde_json::Value::as_u64);
    let stored_epoch = step("epoch").ok_or_else(|| TrainError::State("state lacks epoch".into()))?;
    if stored_epoch != epoch as u64 {
        return Err(TrainError::State(format!("state file claims epoch {stored_epoch}, expected {epoch}")));
    }
    let network = Network::new(&cfg.model)?;
    let mut state = TrainState::from_params(cfg, params, network);
    state.epoch = epoch;
    state.online_opt = super::OptimState::read_from(
        "online",
        step("online_step").ok_or_else(|| TrainError::State("state lacks online_step".into()))?,
        &a,
        &state.params.online,
    )?;
    if state.target_opt.is_some() {
        state.target_opt = Some(super::OptimState::read_from(
            "target",
            step("target_step").ok_or_else(|| TrainError::State("state lacks target_step".into()))?,
            &a,
            &state.params.target,
        )?);
    }
    Ok(state)
}

fn latest_checkpoint(dir: &Path) -> Option<usize> {
    let entries = fs::read_dir(dir.join(CHECKPOINT_DIR)).ok()?;
    entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let epoch: usize = name.strip_prefix("epoch-")?.strip_suffix(".state")?.parse().ok()?;
            checkpoint_paths(dir, epoch).0.exists().then_some(epoch)
        })
        .max()
}

/// Parses an epoch log; errors carry the 1-based line number.
pub fn parse_epoch_log(text: &str) -> Result<Vec<EpochRecord>, TrainError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| TrainError::Log {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn record_line(r: &EpochRecord) -> String {
    let mut s = serde_json::to_string(r).expect("records serialize");
    s.push('\n');
    s
}

/// Per-epoch CSV (`epoch,nmi,acc,ari,instance_loss,cluster_loss,total_loss`)
/// sorted by epoch, with every value spelled exactly as in the JSONL log.
pub fn curves_csv(log: &str) -> Result<String, TrainError> {
    let mut records = parse_epoch_log(log)?;
    records.sort_by_key(|r| r.epoch);
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = ["epoch", "nmi", "acc", "ari", "instance_loss", "cluster_loss", "total_loss"];
    let csv_err = |e: csv::Error| TrainError::Log {
        line: 0,
        message: e.to_string(),
    };
    w.write_record(header).map_err(csv_err)?;
    let num = |v: f64| serde_json::to_string(&v).expect("finite or null");
    for r in &records {
        w.write_record([
            r.epoch.to_string(),
            num(r.nmi),
            num(r.acc),
            num(r.ari),
            num(r.instance_loss),
            num(r.cluster_loss),
            num(r.total_loss),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| TrainError::Log {
        line: 0,
        message: e.to_string(),
    })?;
    Ok(String::from_utf8(bytes).expect("csv of ascii"))
}

fn write_summary(dir: &Path, last: &EpochRecord) -> Result<(), TrainError> {
    let path = dir.join(SUMMARY_CSV);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.serialize(last).map_err(|e| io_err(&path, e))?;
    let bytes = w.into_inner().map_err(|e| io_err(&path, e))?;
    write_file(&path, &bytes)
}

/// Clustering of a labelled set by one parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub nmi: f64,
    pub acc: f64,
    pub ari: f64,
    pub largest_cluster_share: f64,
    pub assignments: Vec<usize>,
}

/// Parameters used for cluster assignment: ξ, or the matching prefix of θ
/// when there is no target network.
pub fn eval_params<T: Real>(params: &NetworkParams<T>, cfg: &TrainConfig) -> ParamSet<T> {
    match cfg.ablation.stream_mode {
        StreamMode::DualOnlineOnline => params.online.prefix(params.network().target_len()),
        _ => params.target.clone(),
    }
}

fn evaluate_tensor<T: Real>(
    params: &NetworkParams<T>,
    cfg: &TrainConfig,
    eval_x: &Tensor<T>,
    truth: &[usize],
) -> Result<Evaluation, TrainError> {
    let set = eval_params(params, cfg);
    let labels = assign_clusters(params, &set, eval_x, cfg.eval_batch_size)?;
    let s = evaluate(&labels, truth, cfg.nmi_norm)?;
    Ok(Evaluation {
        nmi: s.nmi,
        acc: s.acc,
        ari: s.ari,
        largest_cluster_share: largest_cluster_share(&labels),
        assignments: labels,
    })
}

/// Scores `params` on `data`, resized to the model resolution.
pub fn evaluate_params<T: Real>(
    params: &NetworkParams<T>,
    cfg: &TrainConfig,
    data: &LabeledImageSet,
) -> Result<Evaluation, TrainError> {
    let eval_x: Tensor<T> = images_to_tensor(&data.resized(params.arch.backbone.input_resolution));
    evaluate_tensor(params, cfg, &eval_x, &data.labels)
}

fn run_epoch<T: Real>(
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    images: &[Image],
    epoch: usize,
) -> Result<StepLosses, TrainError> {
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut substream(cfg.seed, &[SHUFFLE_TAG, epoch as u64]));
    let mut sum = StepLosses::default();
    let mut steps = 0usize;
    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        // column-wise cluster statistics need at least two rows
        if chunk.len() < 2 {
            continue;
        }
        let batch: Vec<Image> = chunk.iter().map(|&i| images[i].clone()).collect();
        let l = super::train_step(state, cfg, &batch, &[epoch as u64, b as u64])?;
        sum.instance += l.instance;
        sum.cluster += l.cluster;
        sum.total += l.total;
        steps += 1;
    }
    let n = steps.max(1) as f64;
    Ok(StepLosses {
        instance: sum.instance / n,
        cluster: sum.cluster / n,
        total: sum.total / n,
    })
}

/// Trains for `cfg.epochs` epochs, evaluating the clustering of the
/// un-augmented data after every epoch.
pub fn train_run<T: Real>(
    cfg: &TrainConfig,
    data: &LabeledImageSet,
    opts: &RunOptions,
) -> Result<RunOutput<T>, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(super::config_err("data", "dataset is empty"));
    }
    let min = cfg.augment.min_input_size;
    if let Some(img) = data.images.iter().find(|i| i.width().min(i.height()) < min) {
        return Err(super::config_err(
            "augment.min_input_size",
            format!("dataset image {}x{} is smaller than {min}", img.width(), img.height()),
        ));
    }
    let res = cfg.model.backbone.input_resolution;
    let eval_x: Tensor<T> = images_to_tensor(&data.resized(res));
    let out_dir = opts.out_dir.as_deref();

    let mut records = Vec::new();
    let mut state = None;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let log_path = dir.join(EPOCH_LOG);
        if opts.resume {
            if let Some(epoch) = latest_checkpoint(dir) {
                state = Some(load_state::<T>(dir, epoch, cfg)?);
                let text = fs::read_to_string(&log_path).map_err(|e| io_err(&log_path, e))?;
                records = parse_epoch_log(&text)?;
                records.retain(|r| r.epoch <= epoch);
                if records.len() != epoch {
                    return Err(TrainError::State(format!(
                        "{} has {} records up to epoch {epoch}",
                        log_path.display(),
                        records.len()
                    )));
                }
            }
        }
        let text: String = records.iter().map(record_line).collect();
        write_file(&log_path, text.as_bytes())?;
        if records.is_empty() {
            write_file(&dir.join(TIMING_CSV), b"epoch,seconds\n")?;
        }
    }
    let mut state = match state {
        Some(s) => s,
        None => TrainState::new(cfg)?,
    };
    state.total_steps = (cfg.epochs * cfg.steps_per_epoch(data.len())) as u64;

    while state.epoch < cfg.epochs {
        let epoch = state.epoch + 1;
        let started = Instant::now();
        let losses = run_epoch(&mut state, cfg, &data.images, epoch)?;
        state.epoch = epoch;
        let scores = evaluate_tensor(&state.params, cfg, &eval_x, &data.labels)?;
        let seconds = started.elapsed().as_secs_f64();
        let record = EpochRecord {
            epoch,
            instance_loss: losses.instance,
            cluster_loss: losses.cluster,
            total_loss: losses.total,
            nmi: scores.nmi,
            acc: scores.acc,
            ari: scores.ari,
            largest_cluster_share: scores.largest_cluster_share,
            wall_time: if cfg.precision == Precision::Fast { seconds } else { 0.0 },
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (inst {:.4}, clu {:.4}) nmi {:.4} acc {:.4} ari {:.4}",
            record.total_loss,
            record.instance_loss,
            record.cluster_loss,
            record.nmi,
            record.acc,
            record.ari
        );
        if let Some(dir) = out_dir {
            append(&dir.join(EPOCH_LOG), &record_line(&record))?;
            append(&dir.join(TIMING_CSV), &format!("{epoch},{seconds}\n"))?;
            let due = cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0;
            if due || epoch == cfg.epochs {
                save_state(dir, &state)?;
            }
        }
        records.push(record);
        if opts.stop_after == Some(epoch) {
            return Ok(RunOutput { state, records });
        }
    }
    if let Some(dir) = out_dir {
        write_file(&dir.join(FINAL_MODEL), &save_checkpoint(&state.params))?;
        if let Some(last) = records.last() {
            write_summary(dir, last)?;
        }
    }
    Ok(RunOutput { state, records })
}

fn append(path: &Path, text: &str) -> Result<(), TrainError> {
    let mut f = fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| io_err(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| io_err(path, e))
}

/// Final model file of a finished run.
pub fn final_model_path(dir: &Path) -> PathBuf {
    dir.join(FINAL_MODEL)
}

pub fn epoch_log_path(dir: &Path) -> PathBuf {
    dir.join(EPOCH_LOG)
}
