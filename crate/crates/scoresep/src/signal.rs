//! Audio I/O and the STFT front end.

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use rustfft::{num_complex::Complex, FftPlanner};
use std::path::Path;

pub const DEFAULT_SAMPLE_RATE: u32 = 44_100;
/// 4096 samples at 44.1 kHz is 92.9 ms.
pub const DEFAULT_WINDOW_LEN: usize = 4096;
/// 1024 samples at 44.1 kHz is 23.2 ms.
pub const DEFAULT_HOP: usize = 1024;

#[derive(Debug, Clone)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        AudioClip {
            samples,
            sample_rate,
        }
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// One-sided complex STFT, M = window_len/2 + 1 bins by N frames.
#[derive(Debug, Clone)]
pub struct ComplexSpectrogram {
    pub re: Matrix,
    pub im: Matrix,
    pub window_len: usize,
    pub hop: usize,
    pub sample_rate: u32,
    pub original_length: usize,
}

impl ComplexSpectrogram {
    pub fn bins(&self) -> usize {
        self.re.rows()
    }

    pub fn frames(&self) -> usize {
        self.re.cols()
    }

    pub fn hop_seconds(&self) -> f64 {
        self.hop as f64 / self.sample_rate as f64
    }
}

fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos()))
        .collect()
}

/// Forward STFT with symmetric zero padding of window_len/2, so frame n is
/// centered at time n*hop/sample_rate.
pub fn stft(clip: &AudioClip, window_len: usize, hop: usize) -> Result<ComplexSpectrogram> {
    if clip.samples.is_empty() {
        return Err(Error::InvalidArgument("stft: empty clip".into()));
    }
    if !window_len.is_power_of_two() {
        return Err(Error::InvalidArgument(format!(
            "stft: window_len {window_len} is not a power of two"
        )));
    }
    if hop == 0 || hop > window_len {
        return Err(Error::InvalidArgument(format!(
            "stft: hop {hop} must be in 1..=window_len"
        )));
    }

    let len = clip.samples.len();
    let pad = window_len / 2;
    let n_frames = (len + window_len + hop - 1) / hop;
    let padded_len = (n_frames - 1) * hop + window_len;
    let mut padded = vec![0.0f64; padded_len];
    padded[pad..pad + len].copy_from_slice(&clip.samples);

    let window = hann_window(window_len);
    let bins = window_len / 2 + 1;
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(window_len);

    let mut re = Matrix::zeros(bins, n_frames);
    let mut im = Matrix::zeros(bins, n_frames);
    let mut buf = vec![Complex::new(0.0, 0.0); window_len];
    for n in 0..n_frames {
        let start = n * hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(padded[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for m in 0..bins {
            re.set(m, n, buf[m].re);
            im.set(m, n, buf[m].im);
        }
    }

    Ok(ComplexSpectrogram {
        re,
        im,
        window_len,
        hop,
        sample_rate: clip.sample_rate,
        original_length: len,
    })
}

/// Inverse STFT: Hann synthesis window, overlap-add, pointwise normalization
/// by the accumulated squared window, trimmed to original_length.
pub fn istft(spec: &ComplexSpectrogram) -> Result<AudioClip> {
    let bins = spec.window_len / 2 + 1;
    if spec.re.rows() != bins || spec.im.shape() != spec.re.shape() {
        return Err(Error::ShapeMismatch {
            context: "istft".into(),
            expected: format!("{} bins for window_len {}", bins, spec.window_len),
            got: format!("{}", spec.re.rows()),
        });
    }
    let window_len = spec.window_len;
    let n_frames = spec.frames();
    let padded_len = (n_frames.max(1) - 1) * spec.hop + window_len;
    let window = hann_window(window_len);

    let mut planner = FftPlanner::new();
    let ifft = planner.plan_fft_inverse(window_len);

    let mut acc = vec![0.0f64; padded_len];
    let mut norm = vec![0.0f64; padded_len];
    let mut buf = vec![Complex::new(0.0, 0.0); window_len];
    for n in 0..n_frames {
        // Rebuild the full spectrum from the one-sided half.
        for m in 0..bins {
            buf[m] = Complex::new(spec.re.get(m, n), spec.im.get(m, n));
        }
        for m in bins..window_len {
            buf[m] = buf[window_len - m].conj();
        }
        ifft.process(&mut buf);
        let start = n * spec.hop;
        for i in 0..window_len {
            let sample = buf[i].re / window_len as f64;
            acc[start + i] += sample * window[i];
            norm[start + i] += window[i] * window[i];
        }
    }

    let pad = window_len / 2;
    let end = (pad + spec.original_length).min(padded_len);
    let samples = (pad..end)
        .map(|i| {
            if norm[i] > 1e-12 {
                acc[i] / norm[i]
            } else {
                0.0
            }
        })
        .collect();
    Ok(AudioClip::new(samples, spec.sample_rate))
}

/// Elementwise magnitude sqrt(re^2 + im^2).
pub fn magnitude(spec: &ComplexSpectrogram) -> Matrix {
    spec.re
        .zip_map(&spec.im, |re, im| re.hypot(im))
        .expect("re/im shapes are consistent by construction")
}

/// Read a WAV file: 16-bit PCM or 32-bit float, mono or stereo (stereo is
/// downmixed by channel average).
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path)?;
    let wav_spec = reader.spec();
    let channels = wav_spec.channels as usize;
    if channels == 0 || channels > 2 {
        return Err(Error::UnsupportedWav {
            path: path.to_path_buf(),
            found: format!("{} channels", channels),
        });
    }
    let interleaved: Vec<f64> = match (wav_spec.sample_format, wav_spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::UnsupportedWav {
                path: path.to_path_buf(),
                found: format!("{:?} {}-bit", fmt, bits),
            })
        }
    };
    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(2)
            .map(|ch| (ch[0] + ch[1]) / 2.0)
            .collect()
    };
    Ok(AudioClip::new(samples, wav_spec.sample_rate))
}

/// Write 16-bit PCM mono. Out-of-range samples saturate; returns the number
/// of clipped samples.
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<usize> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path.as_ref(), spec)?;
    let mut clipped = 0usize;
    for &s in &clip.samples {
        let scaled = s * 32768.0;
        let q = if scaled > 32767.0 {
            clipped += 1;
            32767
        } else if scaled < -32768.0 {
            clipped += 1;
            -32768
        } else {
            scaled.round() as i32
        };
        writer.write_sample(q as i16)?;
    }
    writer.finalize()?;
    Ok(clipped)
}

/// Signal-to-noise ratio in dB of `estimate` against `reference`.
pub fn snr_db(reference: &[f64], estimate: &[f64]) -> f64 {
    let len = reference.len().min(estimate.len());
    let sig: f64 = reference[..len].iter().map(|x| x * x).sum();
    let err: f64 = reference[..len]
        .iter()
        .zip(&estimate[..len])
        .map(|(r, e)| (r - e) * (r - e))
        .sum();
    if err == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (sig / err).log10()
    }
}
