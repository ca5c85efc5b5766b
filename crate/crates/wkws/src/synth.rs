//! Dataset synthesis: splice keywords into noise without overlap, mix them
//! under noise at a fixed SNR, or pass clean clips through, emitting WAVs
//! plus a JSONL manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rustfft::{num_complex::Complex, FftPlanner};

use crate::audio_io::{rms_power_of, save_wav, AudioClip};
use crate::error::{Error, Result};
use crate::manifest::{relative_to, DatasetManifest, SampleRecord, Split, SynthConfig, Variant};
use crate::par::par_map;
use crate::rng::{derive_seed, SplitMix64};

pub const KEYWORDS: [&str; 10] = [
    "yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go",
];
pub const UNKNOWN_LABEL: usize = 10;
pub const NUM_CLASSES: usize = 11;

/// GSCV1 folder name -> class index; anything outside the 10 keywords maps
/// to the unknown class.
pub fn map_label(keyword_name: &str) -> Result<usize> {
    if keyword_name.is_empty() {
        return Err(Error::domain("empty keyword name"));
    }
    Ok(KEYWORDS
        .iter()
        .position(|&k| k == keyword_name)
        .unwrap_or(UNKNOWN_LABEL))
}

/// Insertion point, uniform on the integer grid [0, t - L] in samples.
pub fn sample_offset(rng: &mut SplitMix64, t_samples: usize, l_samples: usize) -> Result<usize> {
    if l_samples > t_samples {
        return Err(Error::domain(format!(
            "keyword length {l_samples} exceeds target length {t_samples}"
        )));
    }
    Ok(rng.gen_range_inclusive((t_samples - l_samples) as u64) as usize)
}

/// Fit a noise clip to exactly `t_samples`: loop when shorter (no
/// crossfade), crop from a uniformly random start when longer.
pub fn fit_noise(noise: &AudioClip, t_samples: usize, rng: &mut SplitMix64) -> Vec<f32> {
    let n = noise.len();
    if n == 0 {
        return vec![0.0; t_samples];
    }
    if n >= t_samples {
        let start = rng.gen_range_inclusive((n - t_samples) as u64) as usize;
        noise.samples[start..start + t_samples].to_vec()
    } else {
        (0..t_samples).map(|i| noise.samples[i % n]).collect()
    }
}

/// Place the keyword verbatim at `offset`; every other sample comes from
/// the (already fitted) noise bed. No summation anywhere.
pub fn splice_no_overlap(
    keyword: &AudioClip,
    noise: &AudioClip,
    offset: usize,
    t_samples: usize,
) -> Result<AudioClip> {
    if keyword.sample_rate != noise.sample_rate {
        return Err(Error::domain(format!(
            "sample rate mismatch: keyword {} vs noise {}",
            keyword.sample_rate, noise.sample_rate
        )));
    }
    if offset + keyword.len() > t_samples {
        return Err(Error::domain("keyword does not fit at this offset"));
    }
    let mut out = vec![0.0f32; t_samples];
    let n = noise.len();
    if n > 0 {
        for (i, s) in out.iter_mut().enumerate() {
            *s = noise.samples[i % n];
        }
    }
    out[offset..offset + keyword.len()].copy_from_slice(&keyword.samples);
    Ok(AudioClip::new(out, keyword.sample_rate))
}

/// Additive mix: noise spans the whole clip, scaled so that the power
/// ratio over the keyword-occupied interval hits `snr_db`, then the
/// keyword is added at `offset`. Returns the clip and the noise gain.
/// If the sum exceeds full scale the entire clip is rescaled by one
/// common factor, which leaves the realized SNR unchanged.
pub fn mix_snr_with_gain(
    keyword: &AudioClip,
    noise: &AudioClip,
    offset: usize,
    t_samples: usize,
    snr_db: f64,
) -> Result<(AudioClip, f64)> {
    if keyword.sample_rate != noise.sample_rate {
        return Err(Error::domain(format!(
            "sample rate mismatch: keyword {} vs noise {}",
            keyword.sample_rate, noise.sample_rate
        )));
    }
    if offset + keyword.len() > t_samples {
        return Err(Error::domain("keyword does not fit at this offset"));
    }
    let n = noise.len();
    if n < t_samples {
        return Err(Error::domain("noise must span the full target length"));
    }
    let kw_interval = offset..offset + keyword.len();
    let p_keyword = rms_power_of(&keyword.samples)?;
    let p_noise_under = rms_power_of(&noise.samples[kw_interval.clone()])?;
    if p_noise_under <= 0.0 {
        return Err(Error::DegenerateSnr);
    }
    // 10*log10(p_kw / (g^2 * p_noise)) == snr_db
    let gain = (p_keyword / (p_noise_under * 10f64.powf(snr_db / 10.0))).sqrt();

    let mut out: Vec<f32> = noise.samples[..t_samples]
        .iter()
        .map(|&s| (s as f64 * gain) as f32)
        .collect();
    for (i, &k) in keyword.samples.iter().enumerate() {
        out[offset + i] += k;
    }
    let peak = out.iter().fold(0.0f32, |m, &s| m.max(s.abs()));
    if peak > 1.0 {
        let scale = 1.0 / peak;
        for s in &mut out {
            *s *= scale;
        }
    }
    Ok((AudioClip::new(out, keyword.sample_rate), gain))
}

pub fn mix_snr(
    keyword: &AudioClip,
    noise: &AudioClip,
    offset: usize,
    t_samples: usize,
    snr_db: f64,
) -> Result<AudioClip> {
    mix_snr_with_gain(keyword, noise, offset, t_samples, snr_db).map(|(clip, _)| clip)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    White,
    Pink,
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "white" => Ok(NoiseKind::White),
            "pink" => Ok(NoiseKind::Pink),
            other => Err(Error::Config(format!("unknown noise kind '{other}'"))),
        }
    }
}

/// Deterministic colored noise at RMS amplitude 0.1. Pink noise gets a
/// 1/sqrt(f) amplitude shaping (-3 dB/octave in power).
pub fn gen_noise(kind: NoiseKind, seconds: f64, sample_rate: u32, seed: u64) -> Result<AudioClip> {
    if seconds <= 0.0 {
        return Err(Error::domain("noise duration must be positive"));
    }
    let n = (seconds * sample_rate as f64).round() as usize;
    let mut rng = SplitMix64::new(seed);
    let mut samples: Vec<f64> = (0..n).map(|_| rng.next_gaussian()).collect();

    if kind == NoiseKind::Pink {
        let mut planner = FftPlanner::<f64>::new();
        let fft = planner.plan_fft_forward(n);
        let ifft = planner.plan_fft_inverse(n);
        let mut buf: Vec<Complex<f64>> = samples.iter().map(|&s| Complex::new(s, 0.0)).collect();
        fft.process(&mut buf);
        for (k, v) in buf.iter_mut().enumerate() {
            let f = k.min(n - k) as f64; // two-sided spectrum
            if f == 0.0 {
                *v = Complex::new(0.0, 0.0);
            } else {
                *v *= 1.0 / f.sqrt();
            }
        }
        ifft.process(&mut buf);
        for (s, v) in samples.iter_mut().zip(&buf) {
            *s = v.re / n as f64;
        }
    }

    let rms = (samples.iter().map(|s| s * s).sum::<f64>() / n as f64).sqrt();
    let scale = if rms > 0.0 { 0.1 / rms } else { 0.0 };
    let out: Vec<f32> = samples.iter().map(|&s| (s * scale) as f32).collect();
    Ok(AudioClip::new(out, sample_rate))
}

// ---------------------------------------------------------------------------
// Corpus scanning and full dataset builds.

/// One keyword source file: (path, class label, split).
pub type KeywordEntry = (PathBuf, usize, Split);

/// Scan a GSCV1-style directory: one folder per keyword, split membership
/// from validation_list.txt / testing_list.txt, remainder = train.
pub fn scan_keyword_corpus(dir: &Path) -> Result<Vec<KeywordEntry>> {
    let read_list = |name: &str| -> Result<Vec<String>> {
        let p = dir.join(name);
        if !p.exists() {
            return Ok(Vec::new());
        }
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect())
    };
    let val: std::collections::HashSet<String> = read_list("validation_list.txt")?.into_iter().collect();
    let test: std::collections::HashSet<String> = read_list("testing_list.txt")?.into_iter().collect();

    let mut entries = Vec::new();
    let mut folders: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    folders.sort();
    for folder in folders {
        let word = folder
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        if word.starts_with('_') {
            continue; // GSCV1 _background_noise_ folder
        }
        let label = map_label(&word)?;
        let mut files: Vec<PathBuf> = fs::read_dir(&folder)
            .map_err(|e| Error::io(&folder, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().map(|x| x == "wav").unwrap_or(false))
            .collect();
        files.sort();
        for file in files {
            let rel = format!(
                "{}/{}",
                word,
                file.file_name().and_then(|s| s.to_str()).unwrap_or_default()
            );
            let split = if val.contains(&rel) {
                Split::Validation
            } else if test.contains(&rel) {
                Split::Test
            } else {
                Split::Train
            };
            entries.push((file, label, split));
        }
    }
    if entries.is_empty() {
        return Err(Error::domain(format!(
            "no keyword WAVs found under {}",
            dir.display()
        )));
    }
    Ok(entries)
}

pub fn list_noise_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x == "wav").unwrap_or(false))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::domain(format!(
            "no noise WAVs found under {}",
            dir.display()
        )));
    }
    Ok(files)
}

/// Synthesize every record of a dataset variant. Audio lands under
/// `config.out_dir/<split>/`; the returned manifest holds paths relative
/// to `out_dir`. In strict mode the first failing record aborts the build;
/// otherwise failures are logged to stderr and skipped.
pub fn build_dataset(
    config: &SynthConfig,
    keyword_manifest: &[KeywordEntry],
    noise_paths: &[PathBuf],
    strict: bool,
) -> Result<DatasetManifest> {
    config.validate()?;
    if keyword_manifest.is_empty() {
        return Err(Error::domain("keyword corpus is empty"));
    }
    if config.variant != Variant::Clean && noise_paths.is_empty() {
        return Err(Error::domain("weak variants require a noise corpus"));
    }
    for split in ["train", "validation", "test"] {
        let d = config.out_dir.join(split);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }

    let indexed: Vec<(usize, KeywordEntry)> = keyword_manifest
        .iter()
        .cloned()
        .enumerate()
        .collect();
    let results: Vec<Result<SampleRecord>> = par_map(&indexed, |(index, entry)| {
        synth_record(config, *index, entry, noise_paths).map_err(|e| Error::Record {
            index: *index,
            path: entry.0.clone(),
            source: Box::new(e),
        })
    });

    let mut records = Vec::with_capacity(results.len());
    for res in results {
        match res {
            Ok(rec) => records.push(rec),
            Err(e) if strict => return Err(e),
            Err(e) => eprintln!("skipping record: {e}"),
        }
    }
    // Store every path relative to out_dir so the manifest (saved inside
    // out_dir) describes a relocatable dataset tree.
    let mut stored = config.clone();
    stored.keyword_dir = relative_to(&config.out_dir, &config.keyword_dir);
    stored.noise_dir = config
        .noise_dir
        .as_ref()
        .map(|d| relative_to(&config.out_dir, d));
    stored.out_dir = PathBuf::from(".");
    Ok(DatasetManifest {
        records,
        config: stored,
    })
}

fn synth_record(
    config: &SynthConfig,
    index: usize,
    entry: &KeywordEntry,
    noise_paths: &[PathBuf],
) -> Result<SampleRecord> {
    let (kw_path, label, split) = entry;
    let seed = derive_seed(config.seed, index as u64);
    let mut rng = SplitMix64::new(seed);

    let keyword = crate::audio_io::load_wav(kw_path)?;
    let keyword = crate::audio_io::resample(&keyword, config.sample_rate)?;
    let t_samples = (config.target_seconds * config.sample_rate as f64).round() as usize;

    let word = kw_path
        .parent()
        .and_then(|p| p.file_name())
        .and_then(|s| s.to_str())
        .unwrap_or("clip");
    let rel_out = PathBuf::from(format!("{split}/{index:06}_{word}.wav"));
    let out_abs = config.out_dir.join(&rel_out);

    let clean_passthrough = config.variant == Variant::Clean
        || (config.variant == Variant::WeakPos && *label == UNKNOWN_LABEL);

    let record = if clean_passthrough {
        save_wav(&keyword, &out_abs)?;
        SampleRecord {
            out_path: rel_out,
            label: *label,
            split: *split,
            source_keyword: relative_to(&config.out_dir, kw_path),
            source_noise: None,
            offset_samples: 0,
            snr_db: None,
            noise_gain: None,
            seed,
        }
    } else {
        if keyword.len() > t_samples {
            return Err(Error::domain(format!(
                "keyword ({} samples) longer than target ({t_samples})",
                keyword.len()
            )));
        }
        // Draw order is part of the determinism contract:
        // noise choice, noise fit, offset.
        let noise_path = &noise_paths[rng.gen_index(noise_paths.len())];
        let noise_raw = crate::audio_io::load_wav(noise_path)?;
        let noise_raw = crate::audio_io::resample(&noise_raw, config.sample_rate)?;
        let bed = AudioClip::new(fit_noise(&noise_raw, t_samples, &mut rng), config.sample_rate);
        let offset = sample_offset(&mut rng, t_samples, keyword.len())?;

        let (clip, gain) = match config.variant {
            Variant::Weak | Variant::WeakPos => {
                (splice_no_overlap(&keyword, &bed, offset, t_samples)?, None)
            }
            Variant::WeakSnr => {
                let snr = config.snr_db.expect("validated");
                let (clip, g) = mix_snr_with_gain(&keyword, &bed, offset, t_samples, snr)?;
                (clip, Some(g))
            }
            Variant::Clean => unreachable!(),
        };
        save_wav(&clip, &out_abs)?;
        SampleRecord {
            out_path: rel_out,
            label: *label,
            split: *split,
            source_keyword: relative_to(&config.out_dir, kw_path),
            source_noise: Some(relative_to(&config.out_dir, noise_path)),
            offset_samples: offset,
            snr_db: config.snr_db,
            noise_gain: gain,
            seed,
        }
    };
    Ok(record)
}

/// Per-class label histogram of a record list.
pub fn label_histogram(records: &[SampleRecord]) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for r in records {
        *h.entry(r.label).or_insert(0) += 1;
    }
    h
}
