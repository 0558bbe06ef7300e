//! Audio input: WAV decoding, rate/length conforming, log-mel patches and
//! frame-level acoustic descriptors.

mod descriptors;
mod patches;
mod spectral;

use std::f64::consts::PI;
use std::path::Path;

pub use descriptors::{
    centroid_bandwidth, chroma_class, deltas, descriptors, AcousticDescriptors, CHROMA_A,
    MFCC_COEFFS,
};
pub use patches::{decode_patches, encode_patches, read_patches, write_patches, PATCH_MAGIC};
pub use spectral::{
    extract_patch, logmel, mel_filterbank, mel_to_hz, hz_to_mel, minmax_scale, patch_energy,
    power_spectrogram, stft_frames, SpectrogramPatch, FFT_SIZE, HOP, LOG_FLOOR, MEL_BANDS,
    PATCH_FRAMES, PATCH_STEP, tile_patches,
};

use crate::error::{CoalaError, Result};

pub const SAMPLE_RATE: u32 = 22050;
pub const CLIP_SECONDS: usize = 10;
pub const CLIP_SAMPLES: usize = SAMPLE_RATE as usize * CLIP_SECONDS;

/// Row-major dense matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(CoalaError::Invalid("audio clip has no samples".into()));
        }
        if sample_rate == 0 {
            return Err(CoalaError::Invalid("sample rate must be positive".into()));
        }
        Ok(AudioClip {
            samples,
            sample_rate,
        })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Decodes 16-bit PCM or 32-bit float WAV, averaging channels to mono.
pub fn load_wav(path: &Path) -> Result<AudioClip> {
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => CoalaError::io(path, io),
        other => CoalaError::UnsupportedAudio(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    let describe = || {
        format!(
            "{}: format {:?}, {} bits, {} channel(s), {} Hz",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample,
            spec.channels,
            spec.sample_rate
        )
    };
    let fail = |e: hound::Error| CoalaError::UnsupportedAudio(format!("{}: {e}", describe()));
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(fail)?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(fail)?,
        _ => {
            return Err(CoalaError::UnsupportedAudio(format!(
                "{} (expected 16-bit PCM or 32-bit float)",
                describe()
            )))
        }
    };
    let ch = spec.channels.max(1) as usize;
    let samples: Vec<f32> = interleaved
        .chunks(ch)
        .map(|frame| frame.iter().sum::<f32>() / ch as f32)
        .collect();
    AudioClip::new(samples, spec.sample_rate)
        .map_err(|_| CoalaError::UnsupportedAudio(format!("{}: no samples", describe())))
}

/// Writes a mono 16-bit PCM WAV, clipping to [-1, 1].
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => CoalaError::io(path, io),
        other => CoalaError::Format(format!("{}: {other}", path.display())),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in &clip.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v).map_err(wrap)?;
    }
    w.finalize().map_err(wrap)
}

const KAISER_BETA: f64 = 8.0;
/// Filter half-length in zero crossings of the lower of the two rates.
const SINC_ZEROS: f64 = 32.0;
const ROLLOFF: f64 = 0.945;

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Kaiser-windowed sinc resampling. Kernels are precomputed for each of the
/// `to / gcd(from, to)` fractional phases.
pub fn resample(samples: &[f32], from: u32, to: u32) -> Vec<f32> {
    if from == to || samples.is_empty() {
        return samples.to_vec();
    }
    let g = gcd(from as u64, to as u64);
    let (up, down) = (to as u64 / g, from as u64 / g);
    let ratio = to as f64 / from as f64;
    // cutoff in cycles per input sample
    let cutoff = 0.5 * ratio.min(1.0) * ROLLOFF;
    let half = SINC_ZEROS / ratio.min(1.0);
    let norm = bessel_i0(KAISER_BETA);
    let kernels: Vec<(i64, Vec<f64>)> = (0..up)
        .map(|p| {
            let frac = p as f64 / up as f64;
            let lo = (frac - half).ceil() as i64;
            let hi = (frac + half).floor() as i64;
            let taps = (lo..=hi)
                .map(|j| {
                    let d = j as f64 - frac;
                    let arg = 2.0 * cutoff * d;
                    let sinc = if arg.abs() < 1e-12 { 1.0 } else { (PI * arg).sin() / (PI * arg) };
                    let r = d / half;
                    let w = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / norm;
                    2.0 * cutoff * sinc * w
                })
                .collect();
            (lo, taps)
        })
        .collect();
    let out_len = (samples.len() as u64 * up).div_ceil(down) as usize;
    let n_in = samples.len() as i64;
    (0..out_len as u64)
        .map(|n| {
            let base = (n * down / up) as i64;
            let (lo, taps) = &kernels[(n * down % up) as usize];
            let mut acc = 0.0;
            for (j, &h) in taps.iter().enumerate() {
                let k = base + lo + j as i64;
                if (0..n_in).contains(&k) {
                    acc += samples[k as usize] as f64 * h;
                }
            }
            acc as f32
        })
        .collect()
}

/// Resamples to 22050 Hz and pads or truncates to exactly 10 s.
pub fn conform(clip: &AudioClip) -> AudioClip {
    let mut samples = resample(&clip.samples, clip.sample_rate, SAMPLE_RATE);
    samples.resize(CLIP_SAMPLES, 0.0);
    AudioClip {
        samples,
        sample_rate: SAMPLE_RATE,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::{num_complex::Complex, FftPlanner};

    fn write_raw(path: &Path, spec: hound::WavSpec, samples: &[i32]) {
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for &s in samples {
            match spec.bits_per_sample {
                16 => w.write_sample(s as i16).unwrap(),
                _ => w.write_sample(s).unwrap(),
            }
        }
        w.finalize().unwrap();
    }

    fn pcm16(channels: u16) -> hound::WavSpec {
        hound::WavSpec {
            channels,
            sample_rate: 22050,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        }
    }

    #[test]
    fn wav_decoding() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("silence.wav");
        write_raw(&p, pcm16(1), &vec![0; 22050]);
        let c = load_wav(&p).unwrap();
        assert_eq!(c.samples.len(), 22050);
        assert!(c.samples.iter().all(|&s| s == 0.0));

        let p = dir.path().join("full.wav");
        write_raw(&p, pcm16(1), &[32767]);
        assert!((load_wav(&p).unwrap().samples[0] - 32767.0 / 32768.0).abs() < 1e-7);

        let p = dir.path().join("stereo.wav");
        write_raw(&p, pcm16(2), &[16384, -16384]);
        assert_eq!(load_wav(&p).unwrap().samples, vec![0.0]);

        let p = dir.path().join("float.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        w.write_sample(0.25f32).unwrap();
        w.finalize().unwrap();
        let c = load_wav(&p).unwrap();
        assert_eq!((c.samples[0], c.sample_rate), (0.25, 8000));
    }

    #[test]
    fn unsupported_depth_names_format() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s24.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 22050,
            bits_per_sample: 24,
            sample_format: hound::SampleFormat::Int,
        };
        write_raw(&p, spec, &[1, 2, 3]);
        let err = load_wav(&p).unwrap_err();
        assert!(matches!(err, CoalaError::UnsupportedAudio(_)));
        assert!(err.to_string().contains("24 bits"), "{err}");

        let p = dir.path().join("junk.wav");
        std::fs::write(&p, b"not a wave file at all").unwrap();
        assert!(matches!(load_wav(&p).unwrap_err(), CoalaError::UnsupportedAudio(_)));
    }

    #[test]
    fn conform_pads_and_truncates() {
        let short = AudioClip::new(vec![0.5; 110250], 22050).unwrap();
        let c = conform(&short);
        assert_eq!(c.samples.len(), CLIP_SAMPLES);
        assert!(c.samples[110250..].iter().all(|&s| s == 0.0));
        assert!(c.samples[..110250].iter().all(|&s| s == 0.5));

        let long: Vec<f32> = (0..12 * 22050).map(|i| i as f32).collect();
        let c = conform(&AudioClip::new(long.clone(), 22050).unwrap());
        assert_eq!(c.samples, long[..CLIP_SAMPLES]);
    }

    #[test]
    fn downsampled_sine_keeps_its_peak() {
        let sr = 44100;
        let sine: Vec<f32> = (0..10 * sr)
            .map(|n| (2.0 * PI * 1000.0 * n as f64 / sr as f64).sin() as f32)
            .collect();
        let c = conform(&AudioClip::new(sine, sr as u32).unwrap());
        assert_eq!(c.samples.len(), CLIP_SAMPLES);
        let n = 8192;
        let mut buf: Vec<Complex<f64>> = c.samples[50000..50000 + n]
            .iter()
            .map(|&s| Complex::new(s as f64, 0.0))
            .collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let peak = (0..n / 2)
            .max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm()))
            .unwrap();
        let expect = 1000.0 * n as f64 / SAMPLE_RATE as f64;
        assert!((peak as f64 - expect).abs() <= 1.0, "{peak} vs {expect}");
        let amp = c.samples[50000..60000].iter().fold(0f32, |m, &s| m.max(s.abs()));
        assert!((amp - 1.0).abs() < 0.01, "{amp}");
    }

    #[test]
    fn bessel_reference_values() {
        assert!((bessel_i0(0.0) - 1.0).abs() < 1e-15);
        assert!((bessel_i0(1.0) - 1.266_065_877_752_008_4).abs() < 1e-13);
        assert!((bessel_i0(8.0) - 427.564_115_721_804_7).abs() < 1e-9);
    }
}
