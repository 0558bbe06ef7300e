use std::f64::consts::PI;

use super::spectral::{apply_filterbank, mel_filterbank, power_spectrogram, FFT_SIZE};
use super::{AudioClip, Matrix};

pub const MFCC_COEFFS: usize = 20;
const MFCC_MEL_BANDS: usize = 128;
const DELTA_WIDTH: usize = 9;
/// Pitch class of A with C = 0.
pub const CHROMA_A: usize = 9;
const LOWEST_PITCH_HZ: f64 = 27.5;

/// Frame-level descriptors; every matrix is `dims x frames`.
#[derive(Clone, Debug, PartialEq)]
pub struct AcousticDescriptors {
    pub mfcc: Matrix,
    pub mfcc_delta: Matrix,
    pub mfcc_delta2: Matrix,
    pub chroma: Matrix,
    pub centroid: Matrix,
    pub bandwidth: Matrix,
}

/// Orthonormal DCT-II of `x`, first `keep` coefficients.
fn dct2(x: &[f64], keep: usize) -> Vec<f64> {
    let n = x.len() as f64;
    (0..keep)
        .map(|k| {
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(i, &v)| v * (PI * k as f64 * (2.0 * i as f64 + 1.0) / (2.0 * n)).cos())
                .sum();
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            s * scale
        })
        .collect()
}

/// Local regression slope over a 9-frame window, edges replicated.
pub fn deltas(m: &Matrix) -> Matrix {
    let half = (DELTA_WIDTH / 2) as isize;
    let denom: f64 = 2.0 * (1..=half).map(|n| (n * n) as f64).sum::<f64>();
    let last = m.cols as isize - 1;
    let mut out = Matrix::zeros(m.rows, m.cols);
    for r in 0..m.rows {
        let row = m.row(r);
        for t in 0..m.cols as isize {
            let at = |i: isize| row[i.clamp(0, last) as usize];
            let num: f64 = (1..=half).map(|n| n as f64 * (at(t + n) - at(t - n))).sum();
            out.set(r, t as usize, num / denom);
        }
    }
    out
}

/// Pitch class (C = 0) of a frequency under A440 equal temperament.
pub fn chroma_class(hz: f64) -> usize {
    let semis = (12.0 * (hz / 440.0).log2()).round() as i64;
    (semis + CHROMA_A as i64).rem_euclid(12) as usize
}

/// Power-weighted mean frequency and spread; both 0 for an empty spectrum.
pub fn centroid_bandwidth(freqs: &[f64], spectrum: &[f64]) -> (f64, f64) {
    let total: f64 = spectrum.iter().sum();
    if total <= 0.0 {
        return (0.0, 0.0);
    }
    let c = freqs.iter().zip(spectrum).map(|(f, s)| f * s).sum::<f64>() / total;
    let var = freqs
        .iter()
        .zip(spectrum)
        .map(|(f, s)| (f - c) * (f - c) * s)
        .sum::<f64>()
        / total;
    (c, var.max(0.0).sqrt())
}

pub fn descriptors(clip: &AudioClip) -> AcousticDescriptors {
    let sr = clip.sample_rate as f64;
    let power = power_spectrogram(&clip.samples);
    let frames = power.rows;
    let freqs: Vec<f64> = (0..power.cols).map(|k| k as f64 * sr / FFT_SIZE as f64).collect();

    let fb = mel_filterbank(MFCC_MEL_BANDS, FFT_SIZE, sr, 0.0, sr / 2.0);
    let mel = apply_filterbank(&power, &fb);
    let mut mfcc = Matrix::zeros(MFCC_COEFFS, frames);
    for t in 0..frames {
        let db: Vec<f64> = mel.row(t).iter().map(|&v| 10.0 * v.max(1e-10).log10()).collect();
        for (k, c) in dct2(&db, MFCC_COEFFS).into_iter().enumerate() {
            mfcc.set(k, t, c);
        }
    }
    let mfcc_delta = deltas(&mfcc);
    let mfcc_delta2 = deltas(&mfcc_delta);

    let classes: Vec<Option<usize>> = freqs
        .iter()
        .map(|&f| (f >= LOWEST_PITCH_HZ).then(|| chroma_class(f)))
        .collect();
    let mut chroma = Matrix::zeros(12, frames);
    let mut centroid = Matrix::zeros(1, frames);
    let mut bandwidth = Matrix::zeros(1, frames);
    for t in 0..frames {
        let p = power.row(t);
        let mut bins = [0.0; 12];
        for (k, &v) in p.iter().enumerate() {
            if let Some(c) = classes[k] {
                bins[c] += v;
            }
        }
        let peak = bins.iter().cloned().fold(0.0, f64::max);
        for (c, &v) in bins.iter().enumerate() {
            chroma.set(c, t, if peak > 0.0 { v / peak } else { 0.0 });
        }
        let mag: Vec<f64> = p.iter().map(|v| v.sqrt()).collect();
        let (c, b) = centroid_bandwidth(&freqs, &mag);
        centroid.set(0, t, c);
        bandwidth.set(0, t, b);
    }
    AcousticDescriptors {
        mfcc,
        mfcc_delta,
        mfcc_delta2,
        chroma,
        centroid,
        bandwidth,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{conform, CLIP_SAMPLES, SAMPLE_RATE};
    use proptest::prelude::*;

    #[test]
    fn single_bin_centroid() {
        let freqs = [500.0, 1000.0, 1500.0];
        assert_eq!(centroid_bandwidth(&freqs, &[0.0, 3.0, 0.0]), (1000.0, 0.0));
        assert_eq!(centroid_bandwidth(&freqs, &[0.0; 3]), (0.0, 0.0));
        let (c, b) = centroid_bandwidth(&freqs, &[1.0, 0.0, 1.0]);
        assert!((c - 1000.0).abs() < 1e-12 && (b - 500.0).abs() < 1e-12);
    }

    #[test]
    fn pitch_classes() {
        assert_eq!(chroma_class(440.0), CHROMA_A);
        assert_eq!(chroma_class(880.0), CHROMA_A);
        assert_eq!(chroma_class(261.63), 0);
        assert_eq!(chroma_class(466.16), 10);
    }

    #[test]
    fn a440_chroma_argmax() {
        let s = (0..CLIP_SAMPLES)
            .map(|n| (0.5 * (2.0 * PI * 440.0 * n as f64 / SAMPLE_RATE as f64).sin()) as f32)
            .collect();
        let d = descriptors(&AudioClip::new(s, SAMPLE_RATE).unwrap());
        for t in 0..d.chroma.cols {
            let arg = (0..12)
                .max_by(|&a, &b| d.chroma.get(a, t).total_cmp(&d.chroma.get(b, t)))
                .unwrap();
            assert_eq!(arg, CHROMA_A, "frame {t}");
        }
        assert_eq!(d.mfcc.rows, 20);
        assert_eq!(d.mfcc.cols, 429);
    }

    #[test]
    fn constant_signal_has_flat_deltas() {
        let d = descriptors(&AudioClip::new(vec![0.3; CLIP_SAMPLES], SAMPLE_RATE).unwrap());
        for m in [&d.mfcc_delta, &d.mfcc_delta2] {
            assert!(m.data.iter().all(|v| v.abs() < 1e-6));
        }
    }

    #[test]
    fn delta_of_ramp_is_slope() {
        let m = Matrix {
            rows: 1,
            cols: 20,
            data: (0..20).map(|t| 2.0 * t as f64).collect(),
        };
        let d = deltas(&m);
        for t in 4..16 {
            assert!((d.get(0, t) - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dct_is_orthonormal() {
        let x = [1.0, -2.0, 0.5, 3.0];
        let c = dct2(&x, 4);
        let e1: f64 = x.iter().map(|v| v * v).sum();
        let e2: f64 = c.iter().map(|v| v * v).sum();
        assert!((e1 - e2).abs() < 1e-12);
        assert!((dct2(&[1.0; 8], 1)[0] - 8f64.sqrt()).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn finite_on_arbitrary_audio(seed in 0u64..1000, silence in any::<bool>(), len in 1usize..30000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<f32> = (0..len).map(|_| if silence { 0.0 } else { rng.gen_range(-1.0..1.0) }).collect();
            let d = descriptors(&conform(&AudioClip::new(s, 22050).unwrap()));
            for m in [&d.mfcc, &d.mfcc_delta, &d.mfcc_delta2, &d.chroma, &d.centroid, &d.bandwidth] {
                prop_assert!(m.data.iter().all(|v| v.is_finite()));
            }
            prop_assert!(d.centroid.data.iter().all(|&c| (0.0..=11025.0).contains(&c)));
        }
    }
}
