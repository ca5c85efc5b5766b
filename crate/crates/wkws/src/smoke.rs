//! Self-contained end-to-end pipeline on a synthetic micro-corpus: write a
//! tiny keyword corpus of class-distinct tones, synthesize a weakly labeled
//! dataset over generated noise, train a reduced model for a few epochs,
//! and evaluate. Every stage is seeded, so two runs with the same config
//! produce byte-identical artifacts.

use std::path::{Path, PathBuf};

use crate::audio_io::{save_wav, AudioClip};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::manifest::{SynthConfig, Variant};
use crate::rng::{derive_seed, SplitMix64};
use crate::synth::{
    build_dataset, gen_noise, list_noise_files, scan_keyword_corpus, NoiseKind, KEYWORDS,
};
use crate::train::{run_training, ModelSize, TrainConfig};

pub const SMOKE_SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone)]
pub struct SmokeConfig {
    pub out_dir: PathBuf,
    pub seed: u64,
    pub clips_per_class: usize,
    pub epochs: usize,
    pub variant: Variant,
    pub snr_db: Option<f64>,
}

impl SmokeConfig {
    pub fn new(out_dir: PathBuf, seed: u64) -> SmokeConfig {
        SmokeConfig {
            out_dir,
            seed,
            clips_per_class: 10,
            epochs: 3,
            variant: Variant::Weak,
            snr_db: None,
        }
    }
}

pub struct SmokeArtifacts {
    pub manifest_path: PathBuf,
    pub averaged_model_path: PathBuf,
    pub metrics_path: PathBuf,
    pub report_path: PathBuf,
    pub roc_csv_path: PathBuf,
    pub report: EvalReport,
}

/// One synthetic "utterance": a class-specific fundamental plus a detuned
/// harmonic, with per-clip jitter in length, pitch, and level so clips of a
/// class are similar but not identical.
fn tone_clip(class: usize, rng: &mut SplitMix64) -> AudioClip {
    let f0 = 280.0 + 130.0 * class as f64;
    let detune = 1.0 + 0.01 * (rng.next_f64() - 0.5);
    let amp = 0.30 + 0.08 * rng.next_f64();
    let seconds = 0.35 + 0.10 * rng.next_f64();
    let n = (seconds * SMOKE_SAMPLE_RATE as f64).round() as usize;
    let w = 2.0 * std::f64::consts::PI * f0 * detune / SMOKE_SAMPLE_RATE as f64;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64;
            // short fade at both ends to avoid clicks
            let edge = (i.min(n - 1 - i) as f64 / 160.0).min(1.0);
            (edge * (amp * (w * t).sin() + 0.4 * amp * (2.3 * w * t).sin())) as f32
        })
        .collect();
    AudioClip {
        samples,
        sample_rate: SMOKE_SAMPLE_RATE,
    }
}

/// Write a miniature corpus in the folder-per-word layout: one directory per
/// keyword plus a "bed" directory that maps to the unknown class, and
/// validation/testing list files naming every fifth clip.
pub fn write_micro_corpus(dir: &Path, seed: u64, clips_per_class: usize) -> Result<()> {
    if clips_per_class < 5 {
        return Err(Error::domain("micro corpus needs at least 5 clips per class"));
    }
    let mut words: Vec<&str> = KEYWORDS.to_vec();
    words.push("bed");
    let mut validation = String::new();
    let mut testing = String::new();
    for (class, word) in words.iter().enumerate() {
        let word_dir = dir.join(word);
        std::fs::create_dir_all(&word_dir).map_err(|e| Error::io(&word_dir, e))?;
        for i in 0..clips_per_class {
            let mut rng = SplitMix64::new(derive_seed(seed, (class * 10_000 + i) as u64));
            let clip = tone_clip(class, &mut rng);
            let name = format!("clip_{i:03}.wav");
            save_wav(&clip, &word_dir.join(&name))?;
            match i % 5 {
                3 => validation.push_str(&format!("{word}/{name}\n")),
                4 => testing.push_str(&format!("{word}/{name}\n")),
                _ => {}
            }
        }
    }
    let vpath = dir.join("validation_list.txt");
    std::fs::write(&vpath, validation).map_err(|e| Error::io(&vpath, e))?;
    let tpath = dir.join("testing_list.txt");
    std::fs::write(&tpath, testing).map_err(|e| Error::io(&tpath, e))?;
    Ok(())
}

/// Write a small generated-noise corpus (white and pink) for mixing.
pub fn write_noise_corpus(dir: &Path, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, kind) in [NoiseKind::White, NoiseKind::Pink, NoiseKind::White]
        .iter()
        .enumerate()
    {
        let clip = gen_noise(*kind, 2.0, SMOKE_SAMPLE_RATE, derive_seed(seed, i as u64))?;
        save_wav(&clip, &dir.join(format!("noise_{i:02}.wav")))?;
    }
    Ok(())
}

/// Run the whole pipeline under `out_dir`: corpus, dataset, training run,
/// and evaluation report (JSON plus the ROC curves as CSV).
pub fn end_to_end_smoke<L: FnMut(&str)>(
    config: &SmokeConfig,
    mut log: L,
) -> Result<SmokeArtifacts> {
    let corpus_dir = config.out_dir.join("corpus");
    let noise_dir = config.out_dir.join("noise");
    let data_dir = config.out_dir.join("data");
    let run_dir = config.out_dir.join("run");
    std::fs::create_dir_all(&data_dir).map_err(|e| Error::io(&data_dir, e))?;

    log("writing micro corpus");
    write_micro_corpus(&corpus_dir, config.seed, config.clips_per_class)?;
    write_noise_corpus(&noise_dir, derive_seed(config.seed, u64::MAX))?;

    log("synthesizing dataset");
    let synth = SynthConfig {
        variant: config.variant,
        target_seconds: 1.0,
        snr_db: config.snr_db,
        sample_rate: SMOKE_SAMPLE_RATE,
        seed: config.seed,
        keyword_dir: corpus_dir.clone(),
        noise_dir: Some(noise_dir.clone()),
        out_dir: data_dir.clone(),
    };
    let keywords = scan_keyword_corpus(&corpus_dir)?;
    let noise_paths = list_noise_files(&noise_dir)?;
    let manifest = build_dataset(&synth, &keywords, &noise_paths, true)?;
    let manifest_path = data_dir.join("manifest.jsonl");
    manifest.save(&manifest_path)?;

    log("training");
    let train_cfg = TrainConfig {
        train_manifest: manifest_path.clone(),
        out_dir: run_dir.clone(),
        batch_size: 16,
        max_epochs: config.epochs,
        learning_rate: 0.001,
        crop_seconds: None,
        seed: config.seed,
        topk_average: config.epochs.min(2),
        model_size: ModelSize::Small,
    };
    let outcome = run_training(&train_cfg, &mut log)?;

    log("evaluating");
    let report = evaluate(&outcome.params, &manifest, &manifest_path)?;
    let report_path = run_dir.join("report.json");
    report.save_json(&report_path)?;
    let roc_csv_path = run_dir.join("roc.csv");
    std::fs::write(&roc_csv_path, report.roc_csv()).map_err(|e| Error::io(&roc_csv_path, e))?;
    log(&format!(
        "smoke done: test accuracy {:.3}, macro mAP {:.3}",
        report.accuracy, report.macro_map
    ));

    Ok(SmokeArtifacts {
        manifest_path,
        averaged_model_path: outcome.averaged_path,
        metrics_path: outcome.metrics_path,
        report_path,
        roc_csv_path,
        report,
    })
}
