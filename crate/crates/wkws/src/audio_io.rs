//! Mono audio clips plus the disk boundary: WAV decode/encode, sample-rate
//! conversion, and power measurement.

use std::path::Path;

use crate::error::{Error, Result};

/// Mono PCM audio. Samples are nominally in [-1, 1]; values outside that
/// range are clamped when written to disk, never in-pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        assert!(sample_rate > 0, "sample rate must be positive");
        AudioClip {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Read a RIFF/WAVE file (PCM16 or float32, any channel count) and downmix
/// to mono. PCM16 is scaled by 1/32768.
pub fn load_wav(path: &Path) -> Result<AudioClip> {
    let reader = hound::WavReader::open(path).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Decode {
            path: path.to_path_buf(),
            reason: "zero channels".into(),
        });
    }

    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
        (fmt, bits) => {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                reason: format!("{fmt:?} {bits}-bit (want PCM16 or float32)"),
            })
        }
    };

    let frames = interleaved.len() / channels;
    let mut samples = Vec::with_capacity(frames);
    for f in 0..frames {
        let sum: f32 = interleaved[f * channels..(f + 1) * channels].iter().sum();
        samples.push(sum / channels as f32);
    }
    Ok(AudioClip::new(samples, spec.sample_rate))
}

fn map_hound(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        hound::Error::Unsupported => Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: "unsupported WAV encoding".into(),
        },
        other => Error::Decode {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    }
}

/// Write a clip as PCM16 little-endian mono. Amplitudes are clamped to
/// full scale; +1.0 saturates to 32767.
pub fn save_wav(clip: &AudioClip, path: &Path) -> Result<()> {
    if clip.is_empty() {
        return Err(Error::domain("cannot save an empty clip"));
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| map_hound(path, e))?;
    for &s in &clip.samples {
        let q = (s as f64 * 32768.0).round();
        let q = q.clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(|e| map_hound(path, e))?;
    }
    writer.finalize().map_err(|e| map_hound(path, e))?;
    Ok(())
}

/// Mean squared amplitude.
pub fn rms_power(clip: &AudioClip) -> Result<f64> {
    rms_power_of(&clip.samples)
}

/// Mean squared amplitude of a raw sample slice (used for interval
/// measurements during SNR mixing).
pub fn rms_power_of(samples: &[f32]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::domain("rms_power of an empty clip"));
    }
    let sum: f64 = samples.iter().map(|&s| (s as f64) * (s as f64)).sum();
    Ok(sum / samples.len() as f64)
}

// ---------------------------------------------------------------------------
// Polyphase windowed-sinc resampler (Kaiser window, beta 8.6, 64 taps/phase).

const KAISER_BETA: f64 = 8.6;
const TAPS_PER_PHASE: usize = 64;

/// Zeroth-order modified Bessel function of the first kind, by series.
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half_x = x / 2.0;
    for k in 1..=40 {
        term *= (half_x / k as f64) * (half_x / k as f64);
        sum += term;
        if term < sum * 1e-16 {
            break;
        }
    }
    sum
}

fn kaiser(t: f64, half_width: f64) -> f64 {
    if t.abs() >= half_width {
        return 0.0;
    }
    let r = t / half_width;
    bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / bessel_i0(KAISER_BETA)
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Rational-ratio resampling. Output length is round(len * target / source);
/// when target == source the clip is returned bitwise unchanged.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if target_rate == 0 {
        return Err(Error::domain("target sample rate must be positive"));
    }
    if target_rate == clip.sample_rate {
        return Ok(clip.clone());
    }

    let g = gcd(target_rate as u64, clip.sample_rate as u64);
    let up = (target_rate as u64 / g) as usize; // L
    let down = (clip.sample_rate as u64 / g) as usize; // M

    let out_len =
        ((clip.len() as f64) * target_rate as f64 / clip.sample_rate as f64).round() as usize;

    // One row of TAPS_PER_PHASE input-domain taps per output phase. The
    // sinc cutoff sits at the smaller of the two Nyquist frequencies.
    let cutoff = 0.5 * (up as f64 / down as f64).min(1.0); // cycles per input sample
    let half_width = TAPS_PER_PHASE as f64 / 2.0;
    let mut table = vec![[0.0f64; TAPS_PER_PHASE]; up];
    for (phase, row) in table.iter_mut().enumerate() {
        // Fractional input position covered by this output phase.
        let frac = phase as f64 / up as f64;
        let mut sum = 0.0;
        for (k, w) in row.iter_mut().enumerate() {
            // Input offset of tap k relative to the base sample index.
            let t = (k as f64 - half_width + 1.0) - frac;
            let sinc = if t == 0.0 {
                1.0
            } else {
                let a = std::f64::consts::PI * 2.0 * cutoff * t;
                a.sin() / a
            };
            let v = 2.0 * cutoff * sinc * kaiser(t, half_width);
            *w = v;
            sum += v;
        }
        // Normalize each phase to unit DC gain.
        if sum != 0.0 {
            for w in row.iter_mut() {
                *w /= sum;
            }
        }
    }

    let half = (half_width as isize) - 1;
    let input = &clip.samples;
    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len {
        let num = n * down;
        let base = (num / up) as isize;
        let phase = num % up;
        let row = &table[phase];
        let mut acc = 0.0f64;
        for (k, &w) in row.iter().enumerate() {
            let idx = base + k as isize - half;
            if idx >= 0 && (idx as usize) < input.len() {
                acc += w * input[idx as usize] as f64;
            }
        }
        out.push(acc as f32);
    }
    Ok(AudioClip::new(out, target_rate))
}
