//! Deterministic labeled corpus of synthetic sound events in background noise.
//!
//! Every clip belongs to one concept (its class label) that fixes the event
//! waveform family, its direction in time and the frequency band. Each clip also draws a pitch register
//! and an event density, both audible and both tagged, plus unrelated
//! distractor tags and one tag shared by every clip.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav, AudioClip, CLIP_SAMPLES, SAMPLE_RATE};
use crate::error::{CoalaError, Result};
use crate::tags::manifest_text;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaveFamily {
    /// Resonant noise with a sharp attack and exponential decay.
    NoiseBurst,
    /// Three decaying notes stepping up a major triad.
    Arpeggio,
    /// Sustained major triad.
    SineChord,
    /// Sine with an 11 Hz tremolo.
    AmTone,
    /// Sweep up one octave.
    Chirp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub name: String,
    pub family: WaveFamily,
    /// Lowest and highest base frequency in Hz.
    pub band: (f64, f64),
    pub tags: Vec<String>,
    /// Play every event backwards.
    #[serde(default)]
    pub reversed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticCorpusSpec {
    pub num_clips: usize,
    pub num_concepts: usize,
    /// Background noise amplitude relative to the events.
    pub noise_level: f64,
    pub seed: u64,
    /// Draw a register and density per clip; off, clips of one concept
    /// differ only by a small frequency jitter (and the noise).
    pub attributes: bool,
    pub distractors_per_clip: usize,
    pub test_fraction: f64,
    /// Empty means the built-in concept table.
    pub concepts: Vec<ConceptSpec>,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        SyntheticCorpusSpec {
            num_clips: 400,
            num_concepts: 4,
            noise_level: 0.3,
            seed: 0,
            attributes: true,
            distractors_per_clip: 2,
            test_fraction: 0.3,
            concepts: Vec::new(),
        }
    }
}

fn concept(name: &str, family: WaveFamily, reversed: bool, band: (f64, f64), tags: &[&str]) -> ConceptSpec {
    ConceptSpec {
        name: name.to_string(),
        family,
        band,
        tags: tags.iter().map(|t| t.to_string()).collect(),
        reversed,
    }
}

/// The first four come in time-reversed pairs: per-frame spectra of a pair
/// share one distribution and only the temporal order tells them apart.
pub fn default_concepts() -> Vec<ConceptSpec> {
    use WaveFamily::*;
    vec![
        concept("knock", NoiseBurst, false, (300.0, 2400.0), &["knock", "percussive", "impact"]),
        concept("swell", NoiseBurst, true, (300.0, 2400.0), &["swell", "reverse", "riser"]),
        concept("chime", Arpeggio, false, (250.0, 2000.0), &["chime", "ascending", "arpeggio"]),
        concept("bell", Arpeggio, true, (250.0, 2000.0), &["bell", "descending", "arpeggio"]),
        concept("siren", AmTone, false, (300.0, 2400.0), &["siren", "tremolo", "tonal"]),
        concept("bird", Chirp, false, (600.0, 4800.0), &["bird", "chirp", "sweep"]),
        concept("organ", SineChord, false, (150.0, 1200.0), &["organ", "chord", "tonal"]),
    ]
}

const REGISTERS: [&str; 3] = ["low", "mid", "high"];
const DENSITIES: [(&str, usize); 2] = [("sparse", 3), ("busy", 9)];
const DISTRACTORS: [&str; 12] = [
    "field-recording",
    "stereo",
    "mono",
    "processed",
    "edit",
    "sample",
    "loop",
    "ambience",
    "recording",
    "wav",
    "free",
    "studio",
];
const COMMON_TAG: &str = "sound";

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip {
    /// Relative path used as the clip id.
    pub clip_id: String,
    pub audio: AudioClip,
    pub tags: Vec<String>,
    pub label: usize,
    pub concept: String,
    pub split: String,
}

impl SyntheticCorpusSpec {
    pub fn concept_table(&self) -> Result<Vec<ConceptSpec>> {
        let table = if self.concepts.is_empty() {
            default_concepts()
        } else {
            self.concepts.clone()
        };
        if self.num_concepts == 0 || self.num_concepts > table.len() {
            return Err(CoalaError::Invalid(format!(
                "num_concepts must be between 1 and {}, got {}",
                table.len(),
                self.num_concepts
            )));
        }
        if let Some(c) = table.iter().find(|c| c.tags.is_empty()) {
            return Err(CoalaError::Invalid(format!("concept {} has no tags", c.name)));
        }
        Ok(table[..self.num_concepts].to_vec())
    }

    pub fn validate(&self) -> Result<()> {
        self.concept_table()?;
        if self.num_clips == 0 {
            return Err(CoalaError::Invalid("num_clips must be positive".into()));
        }
        if !(self.noise_level >= 0.0) {
            return Err(CoalaError::Invalid("noise_level must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(CoalaError::Invalid("test_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Raised-cosine fade in and out over the first and last `ramp` samples.
fn fade(i: usize, n: usize, ramp: usize) -> f64 {
    let ramp = ramp.max(1);
    let edge = (i.min(n - 1 - i) as f64 / ramp as f64).min(1.0);
    0.5 * (1.0 - (PI * edge).cos())
}

/// 5 ms attack then exponential decay to about 1% at the end.
fn percussive(i: usize, n: usize) -> f64 {
    let attack = (0.005 * SAMPLE_RATE as f64) as usize;
    let rise = (i as f64 / attack as f64).min(1.0);
    rise * (-4.6 * i as f64 / n as f64).exp()
}

fn resonant_noise(f0: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let tau = 2.0 * PI / SAMPLE_RATE as f64;
    let r = 0.97;
    let (a1, a2) = (2.0 * r * (tau * f0).cos(), -r * r);
    let (mut y1, mut y2) = (0.0, 0.0);
    let raw: Vec<f64> = (0..n)
        .map(|_| {
            let y = rng.gen_range(-1.0..1.0) + a1 * y1 + a2 * y2;
            y2 = y1;
            y1 = y;
            y
        })
        .collect();
    let peak = raw.iter().fold(1e-9f64, |m, v| m.max(v.abs()));
    raw.iter().map(|v| v / peak).collect()
}

/// One enveloped event of `n` samples, in forward time.
fn event(family: WaveFamily, f0: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let tau = 2.0 * PI / SAMPLE_RATE as f64;
    let sustained = |i: usize| fade(i, n, n / 10);
    match family {
        WaveFamily::NoiseBurst => resonant_noise(f0, n, rng)
            .into_iter()
            .enumerate()
            .map(|(i, v)| v * percussive(i, n))
            .collect(),
        WaveFamily::Arpeggio => {
            let note = n / 3;
            (0..n)
                .map(|i| {
                    let k = (i / note).min(2);
                    let f = f0 * [1.0, 1.26, 1.5][k];
                    let j = i - k * note;
                    let len = if k == 2 { n - 2 * note } else { note };
                    (tau * f * i as f64).sin() * percussive(j, len)
                })
                .collect()
        }
        WaveFamily::SineChord => (0..n)
            .map(|i| {
                let t = i as f64;
                let v = [1.0, 1.26, 1.5].iter().map(|m| (tau * f0 * m * t).sin()).sum::<f64>() / 3.0;
                v * sustained(i)
            })
            .collect(),
        WaveFamily::AmTone => (0..n)
            .map(|i| {
                let t = i as f64;
                (tau * f0 * t).sin() * (0.5 + 0.5 * (tau * 11.0 * t).sin()) * sustained(i)
            })
            .collect(),
        WaveFamily::Chirp => {
            let mut phase = 0.0;
            (0..n)
                .map(|i| {
                    phase += tau * f0 * (1.0 + i as f64 / n as f64);
                    phase.sin() * sustained(i)
                })
                .collect()
        }
    }
}

/// One-pole coloured noise; `color` 0 is white, towards 1 increasingly dark.
fn background(rng: &mut ChaCha8Rng, level: f64) -> Vec<f64> {
    let color: f64 = rng.gen_range(0.0..0.95);
    // keep the perceived level roughly independent of colour
    let norm = ((1.0 + color) / (1.0 - color)).sqrt();
    let gain = level * rng.gen_range(0.5..1.5);
    let hum_hz = rng.gen_range(40.0..120.0);
    let hum = level * rng.gen_range(0.0..0.5);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut y = 0.0;
    let tau = 2.0 * PI / SAMPLE_RATE as f64;
    (0..CLIP_SAMPLES)
        .map(|i| {
            y = color * y + (1.0 - color) * normal.sample(rng);
            gain * 0.3 * y * norm + hum * (tau * hum_hz * i as f64).sin()
        })
        .collect()
}

/// Generates the corpus in memory. Clip `i` has concept `i % num_concepts`.
pub fn synthesize_corpus(spec: &SyntheticCorpusSpec) -> Result<Vec<SyntheticClip>> {
    spec.validate()?;
    let concepts = spec.concept_table()?;
    let k = concepts.len();
    // balanced test split per concept
    let mut test = vec![false; spec.num_clips];
    let mut split_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7e57);
    for c in 0..k {
        let mut members: Vec<usize> = (c..spec.num_clips).step_by(k).collect();
        members.shuffle(&mut split_rng);
        let n_test = (members.len() as f64 * spec.test_fraction).round() as usize;
        for &i in &members[..n_test] {
            test[i] = true;
        }
    }
    let width = spec.num_clips.to_string().len().max(4);
    let clips = (0..spec.num_clips)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x1000_0001).wrapping_add(i as u64));
            let label = i % k;
            let c = &concepts[label];
            let jitter = 1.0 + rng.gen_range(-0.03..0.03);
            let (register, density) = if spec.attributes {
                (rng.gen_range(0..REGISTERS.len()), rng.gen_range(0..DENSITIES.len()))
            } else {
                (1, 0)
            };
            // register picks a third of the band on a log scale
            let (lo, hi) = c.band;
            let span = (hi / lo).ln();
            let f0 = lo * (span * (register as f64 + 0.5) / 3.0).exp() * jitter;

            let mut samples = vec![0.0f64; CLIP_SAMPLES];
            let events = DENSITIES[density].1;
            let slot = CLIP_SAMPLES / events;
            for e in 0..events {
                let len = (rng.gen_range(0.25..0.6) * SAMPLE_RATE as f64) as usize;
                let start = e * slot + rng.gen_range(0..slot.saturating_sub(len).max(1));
                let amp = rng.gen_range(0.5..0.9);
                let mut wave = event(c.family, f0, len, &mut rng);
                if c.reversed {
                    wave.reverse();
                }
                for (j, v) in wave.iter().enumerate() {
                    if start + j < CLIP_SAMPLES {
                        samples[start + j] += amp * v;
                    }
                }
            }
            if spec.noise_level > 0.0 {
                for (s, b) in samples.iter_mut().zip(background(&mut rng, spec.noise_level)) {
                    *s += b;
                }
            }
            let mut tags = c.tags.clone();
            if spec.attributes {
                tags.push(REGISTERS[register].to_string());
                tags.push(DENSITIES[density].0.to_string());
            }
            let mut pool = DISTRACTORS.to_vec();
            pool.shuffle(&mut rng);
            tags.extend(pool.iter().take(spec.distractors_per_clip).map(|s| s.to_string()));
            tags.push(COMMON_TAG.to_string());
            let audio = AudioClip::new(
                samples.iter().map(|&v| v.clamp(-1.0, 1.0) as f32).collect(),
                SAMPLE_RATE,
            )?;
            Ok(SyntheticClip {
                clip_id: format!("audio/{}_{:0width$}.wav", c.name, i),
                audio,
                tags,
                label,
                concept: c.name.clone(),
                split: if test[i] { "test" } else { "train" }.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(clips)
}

pub const MANIFEST: &str = "manifest.tsv";
pub const LABELS: &str = "labels.csv";

/// Writes `audio/*.wav`, `manifest.tsv` and `labels.csv` under `dir`.
pub fn write_corpus(dir: &Path, clips: &[SyntheticClip]) -> Result<()> {
    let audio = dir.join("audio");
    fs::create_dir_all(&audio).map_err(|e| CoalaError::io(&audio, e))?;
    for c in clips {
        write_wav(&dir.join(&c.clip_id), &c.audio)?;
    }
    let manifest: Vec<(String, Vec<String>)> =
        clips.iter().map(|c| (c.clip_id.clone(), c.tags.clone())).collect();
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest_text(&manifest)).map_err(|e| CoalaError::io(&path, e))?;
    let mut labels = String::from("clip_id,label,split\n");
    for c in clips {
        labels.push_str(&format!("{},{},{}\n", c.clip_id, c.concept, c.split));
    }
    let path = dir.join(LABELS);
    fs::write(&path, labels).map_err(|e| CoalaError::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tags::{build_vocabulary, encode};

    fn small(n: usize) -> SyntheticCorpusSpec {
        SyntheticCorpusSpec {
            num_clips: n,
            ..SyntheticCorpusSpec::default()
        }
    }

    #[test]
    fn balanced_classes() {
        let clips = synthesize_corpus(&small(40)).unwrap();
        for c in 0..4 {
            assert_eq!(clips.iter().filter(|x| x.label == c).count(), 10);
            let test = clips.iter().filter(|x| x.label == c && x.split == "test").count();
            assert_eq!(test, 3);
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let a = synthesize_corpus(&small(8)).unwrap();
        let b = synthesize_corpus(&small(8)).unwrap();
        assert_eq!(a, b);
        let c = synthesize_corpus(&SyntheticCorpusSpec { seed: 1, ..small(8) }).unwrap();
        assert_ne!(a[0].audio, c[0].audio);
    }

    #[test]
    fn noiseless_clips_differ_only_by_jitter() {
        let spec = SyntheticCorpusSpec {
            noise_level: 0.0,
            attributes: false,
            num_clips: 8,
            ..SyntheticCorpusSpec::default()
        };
        let clips = synthesize_corpus(&spec).unwrap();
        let (a, b) = (&clips[1], &clips[5]);
        assert_eq!(a.label, b.label);
        // same concept tags, and the same spectral peak up to the jitter
        assert_eq!(a.tags[..3], b.tags[..3]);
        let peak = |x: &SyntheticClip| {
            let d = crate::audio::logmel(&x.audio);
            let mut sums = vec![0.0; d.cols];
            for t in 0..d.rows {
                for (s, v) in sums.iter_mut().zip(d.row(t)) {
                    *s += v;
                }
            }
            (0..d.cols).max_by(|&i, &j| sums[i].total_cmp(&sums[j])).unwrap() as i64
        };
        assert!((peak(a) - peak(b)).abs() <= 1);
    }

    #[test]
    fn manifest_round_trips_without_discards() {
        let clips = synthesize_corpus(&small(40)).unwrap();
        let tags: Vec<Vec<String>> = clips.iter().map(|c| c.tags.clone()).collect();
        let vocab = build_vocabulary(&tags, 1000).unwrap();
        assert_eq!(vocab.position(COMMON_TAG), None);
        assert!(tags.iter().all(|t| encode(t, &vocab).is_some()));

        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &clips[..4]).unwrap();
        let m = crate::tags::read_manifest(&dir.path().join(MANIFEST)).unwrap();
        assert_eq!(m.len(), 4);
        assert!(m[0].path.exists());
        let back = crate::audio::load_wav(&m[0].path).unwrap();
        assert_eq!(back.samples.len(), CLIP_SAMPLES);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(synthesize_corpus(&SyntheticCorpusSpec { num_concepts: 9, ..small(4) }).is_err());
        assert!(synthesize_corpus(&SyntheticCorpusSpec { num_clips: 0, ..small(4) }).is_err());
    }
}
