//! Downstream classification: clip-level features and a small MLP probe.

pub mod synth;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{conform, descriptors, logmel, tile_patches, AudioClip};
use crate::error::{CoalaError, Result};
use crate::net::Coala;
use crate::objectives::softmax_cross_entropy;
use crate::tensor::{Graph, LayerSpec, ParamGroup, ParamStore, Sequential, Sgd, Tensor};
use crate::train::{derive_seed, embed_patches};

pub use synth::{synthesize_corpus, write_corpus, SyntheticClip, SyntheticCorpusSpec};

/// Mean of the encoder latents over the non-overlapping patches of a clip.
pub fn embedding_features(model: &mut Coala<f32>, clip: &AudioClip) -> Result<Vec<f64>> {
    let tiles = tile_patches(&logmel(&conform(clip)));
    let refs: Vec<&[f32]> = tiles.iter().map(Vec::as_slice).collect();
    let rows = embed_patches(model, &refs)?;
    let mut mean = vec![0.0; rows[0].len()];
    for r in &rows {
        for (m, &v) in mean.iter_mut().zip(r) {
            *m += v as f64;
        }
    }
    let n = rows.len() as f64;
    Ok(mean.into_iter().map(|m| m / n).collect())
}

/// Per-coefficient means then standard deviations of MFCC, delta and
/// delta-delta over all frames: 120 values.
pub fn mfcc_features(clip: &AudioClip) -> Vec<f64> {
    let d = descriptors(&conform(clip));
    let mut means = Vec::new();
    let mut stds = Vec::new();
    for m in [&d.mfcc, &d.mfcc_delta, &d.mfcc_delta2] {
        for r in 0..m.rows {
            let row = m.row(r);
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            means.push(mu);
            stds.push(var.sqrt());
        }
    }
    means.extend(stds);
    means
}

/// Column means and standard deviations of `rows`.
pub fn column_stats(rows: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let d = rows.first().map_or(0, |r| r.len());
    let n = rows.len().max(1) as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    (mean, var.into_iter().map(|s| (s / n).sqrt()).collect())
}

/// Scales every row with statistics of the training rows only; a
/// zero-variance dimension maps to 0.
pub fn standardize(train: &[Vec<f64>], rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let refs: Vec<&[f64]> = train.iter().map(Vec::as_slice).collect();
    let (mean, std) = column_stats(&refs);
    rows.iter()
        .map(|r| {
            r.iter()
                .zip(mean.iter().zip(&std))
                .map(|(v, (m, s))| if *s > 0.0 { (v - m) / s } else { 0.0 })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 256,
            lr: 0.01,
            momentum: 0.9,
            epochs: 200,
            batch_size: 32,
            repeats: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub mean: f64,
    pub std: f64,
    pub accuracies: Vec<f64>,
}

/// Labeled feature rows.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub clip_ids: Vec<String>,
    pub labels: Vec<String>,
    pub splits: Vec<String>,
    pub features: Vec<Vec<f64>>,
}

impl FeatureTable {
    pub fn len(&self) -> usize {
        self.clip_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clip_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn push(&mut self, clip_id: &str, label: &str, split: &str, features: Vec<f64>) -> Result<()> {
        if !self.is_empty() && features.len() != self.dim() {
            return Err(CoalaError::shape("feature row", &[features.len()], &[self.dim()]));
        }
        self.clip_ids.push(clip_id.to_string());
        self.labels.push(label.to_string());
        self.splits.push(split.to_string());
        self.features.push(features);
        Ok(())
    }

    pub fn empty() -> Self {
        FeatureTable {
            clip_ids: Vec::new(),
            labels: Vec::new(),
            splits: Vec::new(),
            features: Vec::new(),
        }
    }

    /// `clip_id,label,split,v0,v1,...` with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("clip_id,label,split");
        for i in 0..self.dim() {
            let _ = write!(out, ",v{i}");
        }
        out.push('\n');
        for i in 0..self.len() {
            let _ = write!(out, "{},{},{}", self.clip_ids[i], self.labels[i], self.splits[i]);
            for v in &self.features[i] {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| CoalaError::Format("empty feature file".into()))?;
        if !header.starts_with("clip_id,label,split") {
            return Err(CoalaError::Format(format!("unexpected feature header: {header}")));
        }
        let mut table = FeatureTable::empty();
        for (n, line) in lines.enumerate() {
            let mut fields = line.split(',');
            let mut next = || {
                fields
                    .next()
                    .ok_or_else(|| CoalaError::Format(format!("feature row {}: too few fields", n + 1)))
            };
            let (id, label, split) = (next()?, next()?, next()?);
            let values = fields
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|_| CoalaError::Format(format!("feature row {}: bad number {f:?}", n + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            table
                .push(id, label, split, values)
                .map_err(|e| CoalaError::Format(format!("feature row {}: {e}", n + 1)))?;
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| CoalaError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CoalaError::io(path, e))?;
        Self::from_csv(&text)
    }

    /// Rows whose split is `test` against all the others.
    pub fn partition(&self) -> (Vec<usize>, Vec<usize>) {
        (0..self.len()).partition(|&i| self.splits[i] != "test")
    }
}

/// `clip_id,label,split` rows.
pub fn read_labels(path: &Path) -> Result<Vec<(String, String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| CoalaError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || (n == 0 && line.starts_with("clip_id")) {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 3 {
            return Err(CoalaError::Format(format!(
                "{}:{}: expected clip_id,label,split",
                path.display(),
                n + 1
            )));
        }
        out.push((f[0].to_string(), f[1].to_string(), f[2].to_string()));
    }
    Ok(out)
}

fn probe_specs(input: usize, hidden: usize, classes: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Linear { in_features: input, out_features: hidden },
        LayerSpec::Relu,
        LayerSpec::Linear { in_features: hidden, out_features: classes },
    ]
}

fn batch_tensor(rows: &[&[f64]]) -> Result<Tensor<f32>> {
    let d = rows[0].len();
    Tensor::new(&[rows.len(), d], rows.iter().flat_map(|r| r.iter().map(|&v| v as f32)).collect())
}

/// Trains one probe and returns its test accuracy.
fn probe_once(
    x_train: &[Vec<f64>],
    y_train: &[usize],
    x_test: &[Vec<f64>],
    y_test: &[usize],
    classes: usize,
    config: &ProbeConfig,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f32>::new();
    let net = Sequential::build(
        "probe",
        ParamGroup::Classifier,
        probe_specs(x_train[0].len(), config.hidden, classes),
        &mut store,
        &mut rng,
    )?;
    let mut opt = Sgd::new(config.lr)?.with_momentum(config.momentum)?;
    let mut order: Vec<usize> = (0..x_train.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let rows: Vec<&[f64]> = chunk.iter().map(|&i| x_train[i].as_slice()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| y_train[i]).collect();
            let mut g = Graph::new(true, 0);
            let x = g.input(batch_tensor(&rows)?);
            let logits = net.forward(&mut g, &mut store, x)?;
            let loss = softmax_cross_entropy(&mut g, logits, &labels)?;
            if !g.value(loss).is_finite() {
                return Err(CoalaError::NonFinite("probe loss".into()));
            }
            let grads = g.backward(loss)?;
            store.accumulate_grads(&g, &grads)?;
            opt.step(&mut store, |_| true)?;
        }
    }
    let rows: Vec<&[f64]> = x_test.iter().map(Vec::as_slice).collect();
    let mut g = Graph::new(false, 0);
    let x = g.input(batch_tensor(&rows)?);
    let logits = net.forward(&mut g, &mut store, x)?;
    let out = g.value(logits);
    let correct = out
        .data()
        .chunks(classes)
        .zip(y_test)
        .filter(|(row, &y)| {
            let arg = (0..classes).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap();
            arg == y
        })
        .count();
    Ok(correct as f64 / y_test.len() as f64)
}

/// Standardizes with training statistics, then trains `repeats` independently
/// seeded probes and reports the test accuracy of each.
pub fn run_classification(table: &FeatureTable, config: &ProbeConfig) -> Result<ProbeReport> {
    if config.repeats == 0 || config.epochs == 0 || config.batch_size == 0 || config.hidden == 0 {
        return Err(CoalaError::Invalid("probe repeats, epochs, batch size and width must be positive".into()));
    }
    let (train_idx, test_idx) = table.partition();
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(CoalaError::Invalid(format!(
            "need both train and test rows, got {} and {}",
            train_idx.len(),
            test_idx.len()
        )));
    }
    if table.dim() == 0 {
        return Err(CoalaError::Invalid("feature rows are empty".into()));
    }
    let classes: BTreeMap<&str, usize> = {
        let mut names: Vec<&str> = table.labels.iter().map(String::as_str).collect();
        names.sort();
        names.dedup();
        names.into_iter().enumerate().map(|(i, n)| (n, i)).collect()
    };
    for (name, _) in &classes {
        if !train_idx.iter().any(|&i| table.labels[i] == *name) {
            return Err(CoalaError::Invalid(format!("class {name} has no training rows")));
        }
    }
    let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<usize>) {
        (
            idx.iter().map(|&i| table.features[i].clone()).collect(),
            idx.iter().map(|&i| classes[table.labels[i].as_str()]).collect(),
        )
    };
    let (x_train, y_train) = pick(&train_idx);
    let (x_test, y_test) = pick(&test_idx);
    let z_train = standardize(&x_train, &x_train);
    let z_test = standardize(&x_train, &x_test);
    let accuracies = (0..config.repeats)
        .map(|r| {
            probe_once(
                &z_train,
                &y_train,
                &z_test,
                &y_test,
                classes.len(),
                config,
                derive_seed(config.seed, 0x9b0e, r as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    let std = (accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n).sqrt();
    Ok(ProbeReport { mean, std, accuracies })
}
