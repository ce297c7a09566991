//! Multi-epoch training over a dataset with logging and checkpoints.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use promptfuse_core::checkpoint;
use promptfuse_core::derive_seed;
use promptfuse_core::prompt::PromptEncoder;
use promptfuse_core::train::{RunConfig, TrainState, TrainingExample};
use promptfuse_core::FusionSample;
use serde::{Deserialize, Serialize};

use crate::dataset::{batch_iter, crop_patches};
use crate::error::{Error, Result};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "checkpoint.ckpt";

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub step: u64,
    pub epoch: u64,
    pub intensity: f64,
    pub texture: f64,
    pub color: f64,
    pub total: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Stop after this many steps in this call and checkpoint, even mid-epoch.
    pub max_steps: Option<u64>,
}

#[derive(Debug)]
pub struct FitOutcome {
    pub state: TrainState,
    pub log: Vec<LogLine>,
    pub checkpoint: PathBuf,
}

pub fn checkpoint_name(epoch: u64) -> String {
    format!("checkpoint_epoch{epoch:04}.ckpt")
}

/// Writes a checkpoint through a temporary file so a failed write never
/// leaves a partial checkpoint behind.
pub fn save_checkpoint(path: &Path, cfg: &RunConfig, state: &TrainState) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, checkpoint::encode(cfg, state)).map_err(Error::io(&tmp))?;
    std::fs::rename(&tmp, path).map_err(Error::io(path))
}

pub fn load_checkpoint(path: &Path) -> Result<(RunConfig, TrainState)> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    Ok(checkpoint::decode(&bytes)?)
}

/// Patches of every sample for `epoch`; windows are re-jittered each epoch.
pub fn epoch_patches(samples: &[FusionSample], patch_size: usize, seed: u64, epoch: u64) -> Result<Vec<FusionSample>> {
    let mut out = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        out.extend(crop_patches(s, patch_size, derive_seed(seed, &format!("crop.{epoch}.{i}")))?);
    }
    Ok(out)
}

/// Trains `state` (a fresh network when `None`) on `samples` until the
/// configured epoch count, appending to the log in `out_dir` and writing the
/// final checkpoint there. Resuming from a checkpointed state reproduces the
/// uninterrupted run.
pub fn fit(
    samples: &[FusionSample],
    cfg: &RunConfig,
    encoder: &dyn PromptEncoder,
    state: Option<TrainState>,
    out_dir: &Path,
    opts: &FitOptions,
) -> Result<FitOutcome> {
    let tc = &cfg.train;
    let mut state = match state {
        Some(s) => s,
        None => TrainState::new(cfg.build_network()?),
    };
    let patch_count = epoch_patches(samples, tc.patch_size, tc.seed, 0)?.len();
    if patch_count == 0 {
        return Err(Error::Manifest("dataset has no samples".into()));
    }
    let steps_per_epoch = patch_count.div_ceil(tc.batch_size) as u64;
    let total_steps = steps_per_epoch * tc.epochs as u64;

    std::fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    let log_path = out_dir.join(LOG_FILE);
    let mut log_file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(state.step > 0)
        .truncate(state.step == 0)
        .open(&log_path)
        .map_err(Error::io(&log_path))?;

    let start = Instant::now();
    let mut log = Vec::new();
    let mut taken = 0u64;
    'epochs: while state.epoch < tc.epochs as u64 {
        let patches = epoch_patches(samples, tc.patch_size, tc.seed, state.epoch)?;
        let batches = batch_iter(&patches, tc.batch_size, tc.seed, state.epoch)?;
        for batch in batches.skip(state.batch_cursor as usize) {
            if opts.max_steps.is_some_and(|m| taken >= m) {
                break 'epochs;
            }
            let examples = batch
                .into_iter()
                .map(|s| TrainingExample::new(s.clone(), encoder, tc.mode))
                .collect::<promptfuse_core::Result<Vec<_>>>()?;
            let lr = tc.lr_at(state.step, total_steps);
            let epoch = state.epoch;
            let r = state.train_step(&examples, tc, lr)?;
            state.batch_cursor += 1;
            taken += 1;
            let line = LogLine {
                step: state.step,
                epoch,
                intensity: r.intensity,
                texture: r.texture,
                color: r.color,
                total: r.total,
                lr,
                wall_ms: start.elapsed().as_millis() as u64,
            };
            let mut text = serde_json::to_string(&line).expect("log lines serialize");
            text.push('\n');
            log_file.write_all(text.as_bytes()).map_err(Error::io(&log_path))?;
            log.push(line);
        }
        state.epoch += 1;
        state.batch_cursor = 0;
        if tc.checkpoint_every > 0 && state.epoch % tc.checkpoint_every as u64 == 0 {
            save_checkpoint(&out_dir.join(checkpoint_name(state.epoch)), cfg, &state)?;
        }
    }
    let checkpoint = out_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&checkpoint, cfg, &state)?;
    Ok(FitOutcome { state, log, checkpoint })
}
