//! Log-Mel spectrogram front-end: 64 mel bins, 32 ms Hann window, 10 ms hop,
//! natural log with a floor guard, plus batch assembly with zero padding.

use ndarray::{Array2, Array3};
use rustfft::{num_complex::Complex, FftPlanner};

use crate::audio_io::AudioClip;
use crate::error::{Error, Result};

pub const N_MELS: usize = 64;
pub const N_FFT: usize = 512;
pub const WINDOW_SAMPLES: usize = 512; // 32 ms at 16 kHz
pub const HOP_SAMPLES: usize = 160; // 10 ms at 16 kHz
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct LogMelSpectrogram {
    /// T x 64 natural-log mel energies.
    pub frames: Array2<f32>,
}

impl LogMelSpectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }
}

/// HTK mel scale.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-style filterbank, un-normalized, centers equally spaced
/// on the mel scale between 0 and sample_rate/2. Shape: n_mels x (n_fft/2+1).
pub fn mel_filterbank(n_mels: usize, sample_rate: u32, n_fft: usize) -> Array2<f32> {
    let n_bins = n_fft / 2 + 1;
    let f_max = sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(f_max);
    // n_mels + 2 edge points, filters centered on the interior ones.
    let edges_hz: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = Array2::<f32>::zeros((n_mels, n_bins));
    let df = sample_rate as f64 / n_fft as f64;
    for m in 0..n_mels {
        let (lo, center, hi) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * df;
            let w = if f <= lo || f >= hi {
                0.0
            } else if f <= center {
                (f - lo) / (center - lo)
            } else {
                (hi - f) / (hi - center)
            };
            fb[[m, k]] = w as f32;
        }
    }
    fb
}

/// Center frequencies (Hz) of the filterbank rows; used by tests to locate
/// the expected peak bin for a pure tone.
pub fn mel_center_frequencies(n_mels: usize, sample_rate: u32) -> Vec<f64> {
    let mel_max = hz_to_mel(sample_rate as f64 / 2.0);
    (1..=n_mels)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Number of analysis frames for a clip of `num_samples`.
pub fn frame_count(num_samples: usize) -> usize {
    if num_samples < WINDOW_SAMPLES {
        0
    } else {
        1 + (num_samples - WINDOW_SAMPLES) / HOP_SAMPLES
    }
}

/// Extract a T x 64 log-Mel spectrogram. Frames start at sample 0 (no
/// centering, no pre-emphasis); Hann window (periodic), 512-point FFT,
/// magnitude squared, mel filterbank, ln with floor guard.
pub fn log_mel(clip: &AudioClip) -> Result<LogMelSpectrogram> {
    log_mel_with(clip, &mel_filterbank(N_MELS, clip.sample_rate, N_FFT))
}

/// Same as [`log_mel`] but with a precomputed filterbank, for batch use.
pub fn log_mel_with(clip: &AudioClip, filterbank: &Array2<f32>) -> Result<LogMelSpectrogram> {
    if clip.len() < WINDOW_SAMPLES {
        return Err(Error::domain(format!(
            "clip too short for one analysis window ({} < {WINDOW_SAMPLES} samples)",
            clip.len()
        )));
    }
    let n_mels = filterbank.nrows();
    let t = frame_count(clip.len());
    let window: Vec<f64> = (0..WINDOW_SAMPLES)
        .map(|i| {
            0.5 * (1.0 - (std::f64::consts::TAU * i as f64 / WINDOW_SAMPLES as f64).cos())
        })
        .collect();

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(N_FFT);
    let mut frames = Array2::<f32>::zeros((t, n_mels));
    let mut buf = vec![Complex::new(0.0f64, 0.0); N_FFT];
    let n_bins = N_FFT / 2 + 1;
    let mut power = vec![0.0f64; n_bins];

    for ti in 0..t {
        let start = ti * HOP_SAMPLES;
        for i in 0..N_FFT {
            let s = if i < WINDOW_SAMPLES {
                clip.samples[start + i] as f64 * window[i]
            } else {
                0.0
            };
            buf[i] = Complex::new(s, 0.0);
        }
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p = buf[k].norm_sqr();
        }
        for m in 0..n_mels {
            let mut e = 0.0f64;
            for k in 0..n_bins {
                e += filterbank[[m, k]] as f64 * power[k];
            }
            frames[[ti, m]] = e.max(LOG_FLOOR).ln() as f32;
        }
    }
    Ok(LogMelSpectrogram { frames })
}

/// A zero-padded batch of spectrograms: B x T_max x n_mels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub data: Array3<f32>,
    pub lengths: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn batch_size(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn max_frames(&self) -> usize {
        self.data.shape()[1]
    }
}

/// Stack spectrograms into a batch, zero-padding each to the longest.
pub fn pad_batch(items: &[(LogMelSpectrogram, usize)]) -> Result<Batch> {
    if items.is_empty() {
        return Err(Error::domain("cannot batch an empty item list"));
    }
    let n_mels = items[0].0.frames.ncols();
    let t_max = items.iter().map(|(s, _)| s.num_frames()).max().unwrap();
    let mut data = Array3::<f32>::zeros((items.len(), t_max, n_mels));
    let mut lengths = Vec::with_capacity(items.len());
    let mut labels = Vec::with_capacity(items.len());
    for (b, (spec, label)) in items.iter().enumerate() {
        let t = spec.num_frames();
        data.slice_mut(ndarray::s![b, ..t, ..]).assign(&spec.frames);
        lengths.push(t);
        labels.push(*label);
    }
    Ok(Batch {
        data,
        lengths,
        labels,
    })
}

/// CSV dump (one row per frame) for the features-dump subcommand.
pub fn spectrogram_to_csv(spec: &LogMelSpectrogram) -> String {
    let mut out = String::new();
    for row in spec.frames.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, n: usize, amp: f64) -> AudioClip {
        let samples = (0..n)
            .map(|i| (amp * (std::f64::consts::TAU * freq * i as f64 / 16000.0).sin()) as f32)
            .collect();
        AudioClip::new(samples, 16000)
    }

    #[test]
    fn one_second_clip_has_97_frames() {
        let clip = tone(440.0, 16000, 0.5);
        let spec = log_mel(&clip).unwrap();
        assert_eq!(spec.num_frames(), 97); // 1 + (16000-512)/160
    }

    #[test]
    fn short_clip_is_domain_error() {
        let clip = tone(440.0, 511, 0.5);
        assert!(log_mel(&clip).is_err());
    }

    #[test]
    fn silent_clip_hits_log_floor() {
        let clip = AudioClip::new(vec![0.0; 1600], 16000);
        let spec = log_mel(&clip).unwrap();
        let floor = (LOG_FLOOR as f64).ln() as f32;
        assert!(spec.frames.iter().all(|&v| v == floor));
    }

    #[test]
    fn tone_peaks_at_nearest_mel_center() {
        let clip = tone(1000.0, 16000, 1.0);
        let spec = log_mel(&clip).unwrap();
        let centers = mel_center_frequencies(N_MELS, 16000);
        let expected = centers
            .iter()
            .enumerate()
            .min_by(|a, b| {
                (a.1 - 1000.0).abs().partial_cmp(&(b.1 - 1000.0).abs()).unwrap()
            })
            .unwrap()
            .0;
        for row in spec.frames.rows() {
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, expected);
        }
    }

    #[test]
    fn htk_mel_of_700hz() {
        assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-9);
        assert!((hz_to_mel(700.0) - 781.177) .abs() < 0.01);
    }

    #[test]
    fn filterbank_coverage_and_monotone_peaks() {
        let fb = mel_filterbank(N_MELS, 16000, N_FFT);
        let centers = mel_center_frequencies(N_MELS, 16000);
        let df = 16000.0 / N_FFT as f64;
        let first = (centers[0] / df).ceil() as usize;
        let last = (centers[N_MELS - 1] / df).floor() as usize;
        for k in first..=last {
            let total: f32 = (0..N_MELS).map(|m| fb[[m, k]]).sum();
            assert!(total > 0.0, "bin {k} uncovered");
        }
        let mut prev_peak = 0usize;
        for m in 0..N_MELS {
            let row = fb.row(m);
            assert!(row.sum() > 0.0);
            let peak = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if m > 0 {
                assert!(peak > prev_peak, "row {m} peak not increasing");
            }
            prev_peak = peak;
        }
    }

    #[test]
    fn amplitude_shift_property() {
        // k = 2 doubles each f32 sample exactly, so the energies scale by
        // exactly 4 and the log shift is exact up to f32 storage rounding.
        let clip = tone(523.0, 8000, 0.2);
        let k = 2.0f64;
        let scaled = AudioClip::new(clip.samples.iter().map(|&s| s * 2.0).collect(), 16000);
        let a = log_mel(&clip).unwrap();
        let b = log_mel(&scaled).unwrap();
        let floor = (LOG_FLOOR).ln() as f32 + 1.0;
        let shift = 2.0 * k.ln();
        for (x, y) in a.frames.iter().zip(b.frames.iter()) {
            if *x > floor && *y > floor {
                let err = (*y as f64 - *x as f64 - shift).abs();
                assert!(err < 1e-5, "x={x} y={y} err={err}");
            }
        }
    }

    #[test]
    fn pad_batch_zero_pads_and_preserves_content() {
        let a = log_mel(&tone(300.0, 16000, 0.4)).unwrap();
        let b = log_mel(&tone(600.0, 48000, 0.4)).unwrap();
        let (ta, tb) = (a.num_frames(), b.num_frames());
        let batch = pad_batch(&[(a.clone(), 1), (b.clone(), 2)]).unwrap();
        assert_eq!(batch.max_frames(), tb);
        assert_eq!(batch.lengths, vec![ta, tb]);
        assert_eq!(batch.labels, vec![1, 2]);
        // content preserved bitwise
        assert_eq!(
            batch.data.slice(ndarray::s![0, ..ta, ..]),
            a.frames.view()
        );
        // padded region exactly zero
        let pad = batch.data.slice(ndarray::s![0, ta.., ..]);
        assert!(pad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pad_batch_empty_is_error() {
        assert!(pad_batch(&[]).is_err());
    }
}
