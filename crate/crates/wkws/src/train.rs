//! Training loop: mini-batch SGD with Adam on manually derived gradients,
//! per-epoch checkpointing, and averaging of the top-k checkpoints by
//! validation accuracy.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::audio_io::AudioClip;
use crate::error::{Error, Result};
use crate::eval::{argmax_lowest_tie, score_clips};
use crate::features::{log_mel_with, mel_filterbank, pad_batch, LogMelSpectrogram, N_FFT, N_MELS};
use crate::manifest::{DatasetManifest, SampleRecord, Split};
use crate::model::{
    backward, checkpoint, init_model, update_running_stats, ModelArch, ModelParams,
};
use crate::par::par_map;
use crate::rng::{derive_seed, SplitMix64};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub train_manifest: PathBuf,
    pub out_dir: PathBuf,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    /// Random waveform crop length in seconds; None disables cropping.
    pub crop_seconds: Option<f64>,
    pub seed: u64,
    /// How many of the best checkpoints (by validation accuracy) to average.
    pub topk_average: usize,
    pub model_size: ModelSize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelSize {
    Full,
    Small,
}

impl std::str::FromStr for ModelSize {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(ModelSize::Full),
            "small" => Ok(ModelSize::Small),
            other => Err(Error::Config(format!("unknown model size {other:?}"))),
        }
    }
}

impl ModelSize {
    pub fn arch(self) -> ModelArch {
        match self {
            ModelSize::Full => ModelArch::full(),
            ModelSize::Small => ModelArch::small(),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            train_manifest: PathBuf::new(),
            out_dir: PathBuf::new(),
            batch_size: 64,
            max_epochs: 200,
            learning_rate: 0.001,
            crop_seconds: Some(1.0),
            seed: 0,
            topk_average: 4,
            model_size: ModelSize::Full,
        }
    }
}

impl TrainConfig {
    /// Parse a flat `key = value` config file. `#` starts a comment; unknown
    /// keys are an error so typos surface immediately.
    pub fn from_file(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
        }
        match key {
            "train_manifest" => self.train_manifest = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "batch_size" => self.batch_size = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "crop_seconds" => {
                self.crop_seconds = if value == "none" {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            "seed" => self.seed = parse(key, value)?,
            "topk_average" => self.topk_average = parse(key, value)?,
            "model_size" => self.model_size = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.topk_average == 0 {
            return Err(Error::Config("topk_average must be positive".into()));
        }
        if let Some(s) = self.crop_seconds {
            if !(s > 0.0) {
                return Err(Error::Config("crop_seconds must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Crop `crop_len` samples starting at a uniformly drawn offset in
/// [0, len - crop_len]. Clips no longer than the crop pass through whole.
pub fn random_crop(clip: &AudioClip, crop_len: usize, rng: &mut SplitMix64) -> AudioClip {
    if clip.samples.len() <= crop_len {
        return clip.clone();
    }
    let start = rng.gen_index(clip.samples.len() - crop_len + 1);
    AudioClip {
        samples: clip.samples[start..start + crop_len].to_vec(),
        sample_rate: clip.sample_rate,
    }
}

/// Adam first/second-moment state, one pair of buffers per trainable tensor.
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams<f32>) -> AdamState {
        let sizes: Vec<usize> = params.trainable_views().iter().map(|t| t.len()).collect();
        AdamState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }
}

/// One Adam update over every trainable tensor. Moments and the update are
/// computed in f64; a non-finite gradient aborts with the failing step.
pub fn adam_step(
    params: &mut ModelParams<f32>,
    grads: &crate::model::GradientSet<f32>,
    state: &mut AdamState,
    lr: f64,
    epoch: usize,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let mut views = params.trainable_views_mut();
    if views.len() != grads.tensors.len() {
        return Err(Error::domain("gradient/parameter tensor count mismatch"));
    }
    for (ti, view) in views.iter_mut().enumerate() {
        let g = grads.tensors[ti]
            .as_slice()
            .ok_or_else(|| Error::domain("non-contiguous gradient tensor"))?;
        let (m, v) = (&mut state.m[ti], &mut state.v[ti]);
        for (i, p) in view.iter_mut().enumerate() {
            let gi = g[i] as f64;
            if !gi.is_finite() {
                return Err(Error::Train {
                    epoch,
                    step: state.step as usize,
                    reason: format!("non-finite gradient in tensor {ti} at index {i}"),
                });
            }
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            *p = (*p as f64 - lr * mhat / (vhat.sqrt() + ADAM_EPS)) as f32;
        }
    }
    Ok(())
}

/// Checkpoint bookkeeping: best-first by validation accuracy, ties broken
/// toward the earlier epoch.
#[derive(Debug, Clone, Default)]
pub struct CheckpointLedger {
    pub entries: Vec<(usize, f64, PathBuf)>,
}

impl CheckpointLedger {
    pub fn push(&mut self, epoch: usize, val_accuracy: f64, path: PathBuf) {
        self.entries.push((epoch, val_accuracy, path));
        self.entries.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
    }

    pub fn top_k(&self, k: usize) -> &[(usize, f64, PathBuf)] {
        &self.entries[..k.min(self.entries.len())]
    }
}

/// Elementwise mean of every tensor (weights, BN affine, and BN running
/// statistics) across checkpoints with identical architecture.
pub fn average_checkpoints(paths: &[PathBuf]) -> Result<ModelParams<f32>> {
    if paths.is_empty() {
        return Err(Error::domain("nothing to average"));
    }
    let mut avg = checkpoint::load_checkpoint_file(&paths[0])?;
    let mut acc: Vec<Vec<f64>> = avg
        .all_slices_mut()
        .iter()
        .map(|s| s.iter().map(|&x| x as f64).collect())
        .collect();
    for path in &paths[1..] {
        let mut other = checkpoint::load_checkpoint_file(path)?;
        let views = other.all_slices_mut();
        if views.len() != acc.len() {
            return Err(Error::Format(format!(
                "{}: tensor layout differs from {}",
                path.display(),
                paths[0].display()
            )));
        }
        for (a, view) in acc.iter_mut().zip(views) {
            if a.len() != view.len() {
                return Err(Error::Format(format!(
                    "{}: tensor shape differs from {}",
                    path.display(),
                    paths[0].display()
                )));
            }
            for (ai, &x) in a.iter_mut().zip(view.iter()) {
                *ai += x as f64;
            }
        }
    }
    let n = paths.len() as f64;
    for (view, a) in avg.all_slices_mut().into_iter().zip(&acc) {
        for (p, &sum) in view.iter_mut().zip(a) {
            *p = (sum / n) as f32;
        }
    }
    Ok(avg)
}

#[derive(Debug, Clone)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub wall_seconds: f64,
}

pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub metrics: Vec<EpochMetrics>,
    pub averaged_path: PathBuf,
    pub metrics_path: PathBuf,
}

struct LoadedClip {
    clip: AudioClip,
    label: usize,
}

fn load_split(
    manifest: &DatasetManifest,
    manifest_path: &Path,
    split: Split,
) -> Result<Vec<LoadedClip>> {
    let records: Vec<&SampleRecord> = manifest
        .records
        .iter()
        .filter(|r| r.split == split)
        .collect();
    let loaded: Vec<Result<LoadedClip>> = par_map(&records, |r| {
        let clip = crate::audio_io::load_wav(&DatasetManifest::resolve(manifest_path, r))?;
        Ok(LoadedClip {
            clip,
            label: r.label,
        })
    });
    loaded.into_iter().collect()
}

/// Full training run. Per epoch: seeded shuffle, optional random waveform
/// crop, parallel feature extraction, sequential Adam updates, eval-mode
/// validation accuracy, and a checkpoint on disk. Finishes by averaging the
/// `topk_average` checkpoints with the best validation accuracy.
pub fn run_training<L: FnMut(&str)>(config: &TrainConfig, mut log: L) -> Result<TrainOutcome> {
    config.validate()?;
    let manifest = DatasetManifest::load(&config.train_manifest)?;
    let train = load_split(&manifest, &config.train_manifest, Split::Train)?;
    let val = load_split(&manifest, &config.train_manifest, Split::Validation)?;
    if train.is_empty() {
        return Err(Error::domain("manifest has no training records"));
    }
    if val.is_empty() {
        return Err(Error::domain("manifest has no validation records"));
    }

    let sample_rate = manifest.config.sample_rate;
    let fb = mel_filterbank(N_MELS, sample_rate, N_FFT);
    let crop_len = config
        .crop_seconds
        .map(|s| (s * sample_rate as f64).round() as usize);

    // Validation features never change: extract once, uncropped.
    let val_specs: Vec<LogMelSpectrogram> = {
        let computed: Vec<Result<LogMelSpectrogram>> =
            par_map(&val, |c| log_mel_with(&c.clip, &fb));
        computed.into_iter().collect::<Result<Vec<_>>>()?
    };
    let val_labels: Vec<usize> = val.iter().map(|c| c.label).collect();

    let arch = config.model_size.arch();
    let mut params: ModelParams<f32> = init_model(&arch, config.seed);
    let mut adam = AdamState::new(&params);

    let ckpt_dir = config.out_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let mut ledger = CheckpointLedger::default();

    let mut csv = String::from("epoch,train_loss,val_accuracy,wall_seconds\n");
    let mut metrics = Vec::new();

    for epoch in 0..config.max_epochs {
        let started = Instant::now();
        let epoch_seed = derive_seed(config.seed, epoch as u64);

        let mut order: Vec<usize> = (0..train.len()).collect();
        SplitMix64::new(derive_seed(epoch_seed, 0)).shuffle(&mut order);

        // Crop + featurize the whole epoch in parallel; crop randomness is
        // keyed by (epoch, dataset index) so worker count cannot change it.
        let indexed: Vec<usize> = order.clone();
        let specs: Vec<Result<(LogMelSpectrogram, usize)>> = par_map(&indexed, |&idx| {
            let rec = &train[idx];
            let clip = match crop_len {
                Some(len) => {
                    let mut rng = SplitMix64::new(derive_seed(epoch_seed, 1 + idx as u64));
                    random_crop(&rec.clip, len, &mut rng)
                }
                None => rec.clip.clone(),
            };
            Ok((log_mel_with(&clip, &fb)?, rec.label))
        });
        let specs: Vec<(LogMelSpectrogram, usize)> =
            specs.into_iter().collect::<Result<Vec<_>>>()?;

        let mut loss_sum = 0.0;
        let mut loss_batches = 0usize;
        for chunk in specs.chunks(config.batch_size) {
            let batch = pad_batch(chunk)?;
            let (loss, grads, stats) = backward(&params, &batch.data.view(), &batch.labels)?;
            if !loss.is_finite() {
                return Err(Error::Train {
                    epoch,
                    step: adam.step as usize + 1,
                    reason: format!("non-finite loss {loss}"),
                });
            }
            update_running_stats(&mut params, &stats);
            adam_step(&mut params, &grads, &mut adam, config.learning_rate, epoch)?;
            loss_sum += loss as f64;
            loss_batches += 1;
        }
        let train_loss = loss_sum / loss_batches as f64;

        let val_scores = score_clips(&params, &val_specs, config.batch_size)?;
        let preds: Vec<usize> = val_scores.iter().map(|s| argmax_lowest_tie(s)).collect();
        let hits = preds.iter().zip(&val_labels).filter(|(p, l)| p == l).count();
        let val_accuracy = hits as f64 / val_labels.len() as f64;

        let ckpt_path = ckpt_dir.join(format!("epoch_{epoch:03}.wkws"));
        checkpoint::save_checkpoint_file(&params, &ckpt_path)?;
        ledger.push(epoch, val_accuracy, ckpt_path);

        let wall_seconds = started.elapsed().as_secs_f64();
        log(&format!(
            "epoch {epoch:3}  loss {train_loss:.4}  val_acc {val_accuracy:.4}  {wall_seconds:.1}s"
        ));
        let _ = writeln!(csv, "{epoch},{train_loss},{val_accuracy},{wall_seconds}");
        metrics.push(EpochMetrics {
            epoch,
            train_loss,
            val_accuracy,
            wall_seconds,
        });
    }

    let top: Vec<PathBuf> = ledger
        .top_k(config.topk_average)
        .iter()
        .map(|(_, _, p)| p.clone())
        .collect();
    log(&format!(
        "averaging {} checkpoints: {}",
        top.len(),
        top.iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join(", ")
    ));
    let averaged = average_checkpoints(&top)?;
    let averaged_path = config.out_dir.join("model_averaged.wkws");
    checkpoint::save_checkpoint_file(&averaged, &averaged_path)?;

    let metrics_path = config.out_dir.join("metrics.csv");
    std::fs::write(&metrics_path, csv).map_err(|e| Error::io(&metrics_path, e))?;

    Ok(TrainOutcome {
        params: averaged,
        metrics,
        averaged_path,
        metrics_path,
    })
}

/// Group spectrograms by frame count (used by callers that score variable
/// length clips without padding).
pub fn group_by_frames(specs: &[LogMelSpectrogram]) -> BTreeMap<usize, Vec<usize>> {
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in specs.iter().enumerate() {
        by_len.entry(s.num_frames()).or_default().push(i);
    }
    by_len
}
