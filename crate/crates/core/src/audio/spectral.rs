use std::f64::consts::PI;

use rustfft::{num_complex::Complex, FftPlanner};

use super::{AudioClip, Matrix};
use crate::error::{CoalaError, Result};

pub const FFT_SIZE: usize = 1024;
pub const HOP: usize = 512;
pub const MEL_BANDS: usize = 96;
pub const PATCH_FRAMES: usize = 96;
pub const PATCH_STEP: usize = 12;
/// `log10` of the power floor `1e-10`.
pub const LOG_FLOOR: f64 = -10.0;

/// Number of full frames in `len` samples (no centring or padding).
pub fn stft_frames(len: usize) -> usize {
    if len < FFT_SIZE {
        0
    } else {
        (len - FFT_SIZE) / HOP + 1
    }
}

fn hamming(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// `frames x (FFT_SIZE/2 + 1)` power spectrogram with a periodic Hamming window.
pub fn power_spectrogram(samples: &[f32]) -> Matrix {
    let frames = stft_frames(samples.len());
    let bins = FFT_SIZE / 2 + 1;
    let window = hamming(FFT_SIZE);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(FFT_SIZE);
    let mut out = Matrix::zeros(frames, bins);
    let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
    for t in 0..frames {
        let start = t * HOP;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(samples[start + i] as f64 * window[i], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..bins {
            out.set(t, k, buf[k].norm_sqr());
        }
    }
    out
}

const F_SP: f64 = 200.0 / 3.0;
const MIN_LOG_HZ: f64 = 1000.0;
const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;

fn log_step() -> f64 {
    6.4f64.ln() / 27.0
}

/// Slaney mel scale: linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(hz: f64) -> f64 {
    if hz < MIN_LOG_HZ {
        hz / F_SP
    } else {
        MIN_LOG_MEL + (hz / MIN_LOG_HZ).ln() / log_step()
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    if mel < MIN_LOG_MEL {
        mel * F_SP
    } else {
        MIN_LOG_HZ * (log_step() * (mel - MIN_LOG_MEL)).exp()
    }
}

/// `bands x (n_fft/2 + 1)` triangular filters equally spaced on the mel scale
/// between `fmin` and `fmax`, each scaled to unit area in Hz.
pub fn mel_filterbank(bands: usize, n_fft: usize, sample_rate: f64, fmin: f64, fmax: f64) -> Matrix {
    let bins = n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let edges: Vec<f64> = (0..bands + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (bands + 1) as f64))
        .collect();
    let mut fb = Matrix::zeros(bands, bins);
    for m in 0..bands {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        let area = 2.0 / (r - l);
        for k in 0..bins {
            let f = k as f64 * sample_rate / n_fft as f64;
            let w = ((f - l) / (c - l)).min((r - f) / (r - c)).max(0.0);
            fb.set(m, k, w * area);
        }
    }
    fb
}

/// `frames x bands` product of a power spectrogram with a filterbank.
pub(crate) fn apply_filterbank(power: &Matrix, fb: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(power.rows, fb.rows);
    for t in 0..power.rows {
        let p = power.row(t);
        for m in 0..fb.rows {
            let v: f64 = fb.row(m).iter().zip(p).map(|(w, x)| w * x).sum();
            out.set(t, m, v);
        }
    }
    out
}

/// `frames x 96` matrix of `log10(max(mel power, 1e-10))`.
pub fn logmel(clip: &AudioClip) -> Matrix {
    let power = power_spectrogram(&clip.samples);
    let sr = clip.sample_rate as f64;
    let fb = mel_filterbank(MEL_BANDS, FFT_SIZE, sr, 0.0, sr / 2.0);
    let mut m = apply_filterbank(&power, &fb);
    for v in &mut m.data {
        *v = v.max(1e-10).log10();
    }
    m
}

/// A `96 x 96` (frames x bands) log-mel window scaled to [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrogramPatch {
    pub clip_id: String,
    pub frame_offset: usize,
    /// Frame-major values.
    pub values: Vec<f32>,
}

impl SpectrogramPatch {
    pub const LEN: usize = PATCH_FRAMES * MEL_BANDS;

    pub fn new(clip_id: impl Into<String>, frame_offset: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != Self::LEN {
            return Err(CoalaError::shape("patch", &[values.len()], &[Self::LEN]));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CoalaError::Invalid("patch values must lie in [0, 1]".into()));
        }
        Ok(SpectrogramPatch {
            clip_id: clip_id.into(),
            frame_offset,
            values,
        })
    }
}

/// Min-max scaling to [0, 1]; a constant input maps to zeros.
pub fn minmax_scale(values: &[f64]) -> Vec<f32> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|&v| ((v - lo) / (hi - lo)) as f32).collect()
}

/// Sum of the `PATCH_FRAMES` rows starting at `offset`.
pub fn patch_energy(m: &Matrix, offset: usize) -> f64 {
    m.data[offset * m.cols..(offset + PATCH_FRAMES) * m.cols].iter().sum()
}

/// The step-12 window with the largest sum (lowest offset on ties), scaled.
pub fn extract_patch(m: &Matrix, clip_id: &str) -> Result<SpectrogramPatch> {
    if m.cols != MEL_BANDS {
        return Err(CoalaError::shape("extract_patch", &[m.rows, m.cols], &[m.rows, MEL_BANDS]));
    }
    if m.rows < PATCH_FRAMES {
        return Err(CoalaError::Invalid(format!(
            "need at least {PATCH_FRAMES} frames for a patch, got {}",
            m.rows
        )));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for offset in (0..=m.rows - PATCH_FRAMES).step_by(PATCH_STEP) {
        let e = patch_energy(m, offset);
        if e > best.1 {
            best = (offset, e);
        }
    }
    let offset = best.0;
    let window = &m.data[offset * m.cols..(offset + PATCH_FRAMES) * m.cols];
    Ok(SpectrogramPatch {
        clip_id: clip_id.to_string(),
        frame_offset: offset,
        values: minmax_scale(window),
    })
}

/// Consecutive non-overlapping scaled patches; a matrix shorter than one
/// patch is zero-padded (at the log floor) to a single patch.
pub fn tile_patches(m: &Matrix) -> Vec<Vec<f32>> {
    if m.rows < PATCH_FRAMES {
        let mut data = m.data.clone();
        data.resize(PATCH_FRAMES * m.cols, LOG_FLOOR);
        return vec![minmax_scale(&data)];
    }
    (0..m.rows / PATCH_FRAMES)
        .map(|i| {
            minmax_scale(&m.data[i * PATCH_FRAMES * m.cols..(i + 1) * PATCH_FRAMES * m.cols])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{conform, CLIP_SAMPLES, SAMPLE_RATE};
    use proptest::prelude::*;

    fn tone(hz: f64) -> AudioClip {
        let s = (0..CLIP_SAMPLES)
            .map(|n| (0.5 * (2.0 * PI * hz * n as f64 / SAMPLE_RATE as f64).sin()) as f32)
            .collect();
        AudioClip::new(s, SAMPLE_RATE).unwrap()
    }

    #[test]
    fn frame_count() {
        assert_eq!(stft_frames(220500), 429);
        let m = logmel(&conform(&AudioClip::new(vec![0.0; 10], 22050).unwrap()));
        assert_eq!((m.rows, m.cols), (429, 96));
    }

    #[test]
    fn silence_is_floor() {
        let m = logmel(&AudioClip::new(vec![0.0; CLIP_SAMPLES], SAMPLE_RATE).unwrap());
        assert!(m.data.iter().all(|&v| v == LOG_FLOOR));
    }

    #[test]
    fn tone_lands_in_its_band() {
        let m = logmel(&tone(440.0));
        // band whose centre is nearest 440 Hz in mel
        let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(11025.0));
        let centre = |b: usize| mel_to_hz(lo + (hi - lo) * (b + 1) as f64 / 97.0);
        let expect = (0..MEL_BANDS)
            .min_by(|&a, &b| (centre(a) - 440.0).abs().total_cmp(&(centre(b) - 440.0).abs()))
            .unwrap();
        for t in 0..m.rows {
            let row = m.row(t);
            let arg = (0..MEL_BANDS).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(arg, expect, "frame {t}");
        }
    }

    #[test]
    fn slaney_scale_reference_points() {
        assert!((hz_to_mel(1000.0) - 15.0).abs() < 1e-12);
        assert!((hz_to_mel(6400.0) - 42.0).abs() < 1e-9);
        for hz in [0.0, 440.0, 999.0, 1000.0, 5000.0, 11025.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
    }

    #[test]
    fn filters_have_unit_area_on_a_fine_grid() {
        let fb = mel_filterbank(96, 1 << 16, 22050.0, 0.0, 11025.0);
        let df = 22050.0 / (1 << 16) as f64;
        for m in [5, 40, 90] {
            let area: f64 = fb.row(m).iter().sum::<f64>() * df;
            assert!((area - 1.0).abs() < 1e-2, "band {m}: {area}");
        }
    }

    #[test]
    fn hop_shift_moves_one_frame() {
        let base = tone(1234.5);
        let mut delayed = vec![0.0; HOP];
        delayed.extend_from_slice(&base.samples[..CLIP_SAMPLES - HOP]);
        let a = logmel(&base);
        let b = logmel(&AudioClip::new(delayed, SAMPLE_RATE).unwrap());
        for t in 1..a.rows - 1 {
            for f in 0..MEL_BANDS {
                assert!((a.get(t - 1, f) - b.get(t, f)).abs() < 1e-4);
            }
        }
    }

    fn matrix_with(rows: usize, f: impl Fn(usize) -> f64) -> Matrix {
        let mut m = Matrix::zeros(rows, MEL_BANDS);
        for t in 0..rows {
            for c in 0..MEL_BANDS {
                m.set(t, c, f(t));
            }
        }
        m
    }

    #[test]
    fn patch_selection_cases() {
        let m = matrix_with(429, |t| if (200..296).contains(&t) { 1.0 } else { -3.0 });
        let brute = (0..28)
            .map(|i| i * 12)
            .max_by(|&a, &b| {
                patch_energy(&m, a).total_cmp(&patch_energy(&m, b)).then(b.cmp(&a))
            })
            .unwrap();
        let p = extract_patch(&m, "x").unwrap();
        assert_eq!(p.frame_offset, brute);
        assert_eq!(p.frame_offset, 204);

        let flat = matrix_with(429, |_| 2.0);
        let p = extract_patch(&flat, "y").unwrap();
        assert_eq!(p.frame_offset, 0);
        assert!(p.values.iter().all(|&v| v == 0.0));

        assert!(extract_patch(&matrix_with(95, |_| 0.0), "z").is_err());
    }

    #[test]
    fn tiling_counts() {
        assert_eq!(tile_patches(&matrix_with(429, |t| t as f64)).len(), 4);
        let short = tile_patches(&matrix_with(10, |t| t as f64));
        assert_eq!(short.len(), 1);
        assert_eq!(short[0].len(), PATCH_FRAMES * MEL_BANDS);
    }

    proptest! {
        #[test]
        fn extract_matches_exhaustive_search(vals in prop::collection::vec(-5.0f64..5.0, 40)) {
            // coarse random energy profile over frames
            let m = matrix_with(429, |t| vals[t * 40 / 429]);
            let p = extract_patch(&m, "p").unwrap();
            let mut best = (0, f64::NEG_INFINITY);
            for off in (0..=333).step_by(12) {
                let e: f64 = (off..off + 96).map(|t| vals[t * 40 / 429] * 96.0).sum();
                if e > best.1 + 1e-9 * e.abs().max(1.0) {
                    best = (off, e);
                }
            }
            let chosen = patch_energy(&m, p.frame_offset);
            prop_assert!((chosen - patch_energy(&m, best.0)).abs() <= 1e-9 * chosen.abs().max(1.0));
            prop_assert!(p.values.iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn scaling_is_idempotent(vals in prop::collection::vec(-20.0f64..20.0, 2..300)) {
            let once = minmax_scale(&vals);
            let again = minmax_scale(&once.iter().map(|&v| v as f64).collect::<Vec<_>>());
            prop_assert_eq!(once, again);
        }
    }
}
