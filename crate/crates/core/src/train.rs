//! Minibatch training of the three objectives, validation, checkpointing and
//! embedding extraction.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::SpectrogramPatch;
use crate::checkpoint::Checkpoint;
use crate::error::{CoalaError, Result};
use crate::net::{trainable_groups, Coala, NetConfig, PATCH};
use crate::objectives::{
    contrastive, cosine_matrix, kl_reconstruction, tag_bce, total_loss, Denominator,
    LossBreakdown, LossTerms, LossWeights, Mode,
};
use crate::tags::{encode, ManifestEntry, TagVector, Vocabulary};
use crate::tensor::{Graph, Sgd, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Defaults to 200, or 20 for the supervised baseline.
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub weights: LossWeights,
    pub denominator: Denominator,
    pub val_fraction: f64,
    /// Also keep `epoch_NNNN.ckpt` every this many epochs.
    pub checkpoint_every: Option<usize>,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::AeC,
            epochs: None,
            batch_size: 128,
            lr: 0.005,
            momentum: 0.0,
            clip_norm: None,
            seed: 0,
            weights: LossWeights::default(),
            denominator: Denominator::ExcludePositive,
            val_fraction: 0.10,
            checkpoint_every: None,
            net: NetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(match self.mode {
            Mode::Cnn => 20,
            _ => 200,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(CoalaError::Invalid(format!(
                "batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(CoalaError::Invalid(format!(
                "validation fraction must lie in (0, 1), got {}",
                self.val_fraction
            )));
        }
        if self.checkpoint_every == Some(0) {
            return Err(CoalaError::Invalid("checkpoint_every must be positive".into()));
        }
        self.weights.validate()?;
        self.net.validate()?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CoalaError::Format(format!("training config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }
}

/// One training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub clip_id: String,
    /// `96 x 96` frame-major patch in [0, 1].
    pub patch: Vec<f32>,
    pub tags: TagVector,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Pairs each patch with its clip's encoded tags. Clips with no
    /// in-vocabulary tag are dropped, as are patches absent from the manifest.
    pub fn assemble(
        patches: Vec<SpectrogramPatch>,
        manifest: &[ManifestEntry],
        vocab: &Vocabulary,
    ) -> Result<(Self, usize)> {
        let tags: HashMap<&str, &[String]> = manifest
            .iter()
            .map(|e| (e.clip.as_str(), e.tags.as_slice()))
            .collect();
        let mut records = Vec::with_capacity(patches.len());
        let mut dropped = 0;
        for p in patches {
            match tags.get(p.clip_id.as_str()).and_then(|t| encode(t, vocab)) {
                Some(tags) => records.push(Record {
                    clip_id: p.clip_id,
                    patch: p.values,
                    tags,
                }),
                None => dropped += 1,
            }
        }
        if records.is_empty() {
            return Err(CoalaError::Invalid(
                "no patch has an in-vocabulary tag; check that the manifest matches the patch store"
                    .into(),
            ));
        }
        Ok((Dataset { records }, dropped))
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }
}

/// Seeded disjoint split; the validation part has `round(Q * fraction)`
/// records, at least one and leaving at least one for training.
pub fn split(data: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let q = data.len();
    if q < 2 {
        return Err(CoalaError::Invalid(format!("cannot split {q} record(s)")));
    }
    let mut idx: Vec<usize> = (0..q).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5011, 0)));
    let n_val = ((q as f64 * val_fraction).round() as usize).clamp(1, q - 1);
    let (val, train) = idx.split_at(n_val);
    let (mut train, mut val) = (train.to_vec(), val.to_vec());
    train.sort_unstable();
    val.sort_unstable();
    Ok((data.subset(&train), data.subset(&val)))
}

/// SplitMix64 finalizer over three words.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn patch_batch(records: &[&Record]) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(records.len() * PATCH * PATCH);
    for r in records {
        data.extend_from_slice(&r.patch);
    }
    Tensor::new(&[records.len(), 1, PATCH, PATCH], data)
}

fn tag_batch(records: &[&Record], classes: usize) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(records.len() * classes);
    for r in records {
        if r.tags.classes != classes {
            return Err(CoalaError::shape("tag batch", &[r.tags.classes], &[classes]));
        }
        data.extend(r.tags.to_dense());
    }
    Tensor::new(&[records.len(), classes], data)
}

/// Loss graph for one batch under `mode`; returns the total and its terms.
pub fn batch_loss(
    model: &mut Coala<f32>,
    g: &mut Graph<f32>,
    records: &[&Record],
    config: &TrainConfig,
) -> Result<(crate::tensor::Var, LossBreakdown)> {
    let x = g.input(patch_batch(records)?);
    let y = g.input(tag_batch(records, model.config.classes)?);
    let w = &config.weights;
    let mut terms = LossTerms::default();
    let z_a = model.encode_audio(g, x)?;
    match config.mode {
        Mode::AeC | Mode::EC => {
            let z_t = model.encode_tags(g, y)?;
            if config.mode == Mode::AeC {
                let x_hat = model.decode_audio(g, z_a)?;
                let y_hat = model.decode_tags(g, z_t)?;
                terms.audio = Some(kl_reconstruction(g, x, x_hat)?);
                terms.tags = Some(tag_bce(g, y, y_hat)?);
            }
            let phi_a = model.project_audio(g, z_a)?;
            let phi_t = model.project_tags(g, z_t)?;
            terms.contrastive = Some(contrastive(g, phi_a, phi_t, w.temperature, config.denominator)?);
        }
        Mode::Cnn => {
            let pred = model.cnn_predict(g, z_a)?;
            terms.supervised = Some(tag_bce(g, y, pred)?);
        }
    }
    total_loss(g, terms, w, config.mode)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    /// Per-record means over the epoch's training batches.
    pub train: LossBreakdown,
    /// Per-record means over the validation batches, in eval mode.
    pub val: Option<LossBreakdown>,
    pub val_top1: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
struct StepLog {
    step: usize,
    epoch: usize,
    #[serde(rename = "L_a")]
    audio: f64,
    #[serde(rename = "L_t")]
    tags: f64,
    #[serde(rename = "L_xi")]
    contrastive: f64,
    total: f64,
}

pub struct TrainOutcome {
    pub model: Coala<f32>,
    pub epochs: Vec<EpochSummary>,
    pub steps: usize,
    pub best_epoch: Option<usize>,
}

/// Where a run writes its artifacts.
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| CoalaError::io(root, e))?;
        Ok(RunDir {
            root: root.to_path_buf(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn append(&self, name: &str, line: &impl Serialize) -> Result<()> {
        let path = self.path(name);
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| CoalaError::io(&path, e))?;
        let text = serde_json::to_string(line).map_err(|e| CoalaError::Format(e.to_string()))?;
        writeln!(f, "{text}").map_err(|e| CoalaError::io(&path, e))
    }
}

pub const STEP_LOG: &str = "log.jsonl";
pub const EPOCH_LOG: &str = "epochs.jsonl";
pub const BEST: &str = "best.ckpt";
pub const LAST: &str = "last.ckpt";
pub const LAST_GOOD: &str = "last_good.ckpt";
pub const DIAGNOSTIC: &str = "diagnostic.json";

fn trailer(model: &Coala<f32>, config: &TrainConfig, epoch: usize) -> serde_json::Value {
    serde_json::json!({
        "format": "coala-checkpoint",
        "epoch": epoch,
        "net": model.config,
        "train": config,
        "topology": model.topology(),
    })
}

fn accumulate(sum: &mut LossBreakdown, b: &LossBreakdown) {
    sum.audio += b.audio;
    sum.tags += b.tags;
    sum.contrastive += b.contrastive;
    sum.total += b.total;
}

fn per_record(mut sum: LossBreakdown, n: usize) -> LossBreakdown {
    let n = n.max(1) as f64;
    sum.audio /= n;
    sum.tags /= n;
    sum.contrastive /= n;
    sum.total /= n;
    sum
}

/// Eval-mode losses over consecutive validation batches (a trailing batch of
/// one is skipped) and the projections of every record.
fn validate(
    model: &mut Coala<f32>,
    val: &Dataset,
    config: &TrainConfig,
) -> Result<(LossBreakdown, Option<(Vec<f32>, Vec<f32>)>)> {
    let refs: Vec<&Record> = val.records.iter().collect();
    let mut sum = LossBreakdown::default();
    let mut counted = 0;
    for chunk in refs.chunks(config.batch_size) {
        if chunk.len() < 2 {
            continue;
        }
        let mut g = Graph::new(false, 0);
        let (_, b) = batch_loss(model, &mut g, chunk, config)?;
        accumulate(&mut sum, &b);
        counted += chunk.len();
    }
    let projections = match config.mode {
        Mode::Cnn => None,
        _ => Some(project_records(model, &refs)?),
    };
    Ok((per_record(sum, counted), projections))
}

/// Eval-mode `(phi_a, phi_t)` rows for each record, flattened row-major.
pub fn project_records(model: &mut Coala<f32>, records: &[&Record]) -> Result<(Vec<f32>, Vec<f32>)> {
    let mut pa = Vec::new();
    let mut pt = Vec::new();
    for chunk in records.chunks(64) {
        let mut g = Graph::new(false, 0);
        let x = g.input(patch_batch(chunk)?);
        let y = g.input(tag_batch(chunk, model.config.classes)?);
        let z_a = model.encode_audio(&mut g, x)?;
        let z_t = model.encode_tags(&mut g, y)?;
        let a = model.project_audio(&mut g, z_a)?;
        let t = model.project_tags(&mut g, z_t)?;
        pa.extend_from_slice(g.value(a).data());
        pt.extend_from_slice(g.value(t).data());
    }
    Ok((pa, pt))
}

/// Audio-to-tag top-1 accuracy inside random batches of `batch` pairs.
///
/// The records are reshuffled `resamples` times and cut into full batches.
/// An audio row scores when its own tag row has the highest cosine; ties at
/// the top share the credit.
pub fn retrieval_top1(
    phi_a: &[f32],
    phi_t: &[f32],
    dim: usize,
    batch: usize,
    resamples: usize,
    seed: u64,
) -> Result<f64> {
    let n = phi_a.len() / dim;
    if phi_t.len() != phi_a.len() || n < batch || batch < 2 {
        return Err(CoalaError::Invalid(format!(
            "retrieval needs at least one full batch of {batch} pairs, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    let (mut hits, mut total) = (0.0, 0usize);
    for _ in 0..resamples.max(1) {
        idx.shuffle(&mut rng);
        for chunk in idx.chunks_exact(batch) {
            let rows = |m: &[f32]| {
                let data: Vec<f32> = chunk.iter().flat_map(|&i| m[i * dim..(i + 1) * dim].to_vec()).collect();
                Tensor::new(&[batch, dim], data)
            };
            let sim = cosine_matrix(&rows(phi_a)?, &rows(phi_t)?)?;
            for b in 0..batch {
                let row = &sim[b * batch..(b + 1) * batch];
                let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if row[b] == best {
                    hits += 1.0 / row.iter().filter(|&&s| s == best).count() as f64;
                }
                total += 1;
            }
        }
    }
    Ok(hits / total as f64)
}

/// Runs `config.epochs()` epochs over `train`, validating on `val` after each.
///
/// With a run directory, writes the step and epoch logs, `last.ckpt` every
/// epoch, `best.ckpt` whenever the total validation loss improves, and
/// periodic epoch checkpoints. A non-finite loss or gradient stops the run
/// with `last_good.ckpt` and `diagnostic.json` written.
pub fn train(
    train: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
    run: Option<&RunDir>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.len() < 2 {
        return Err(CoalaError::Invalid(format!(
            "training needs at least 2 records, got {}",
            train.len()
        )));
    }
    let mut model = Coala::<f32>::new(config.net.clone(), config.seed)?;
    let groups = trainable_groups(config.mode);
    let mut opt = Sgd::new(config.lr)?
        .with_momentum(config.momentum)?
        .with_clip_norm(config.clip_norm)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1, 0));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let mut step = 0;
    let batch = config.batch_size.min(train.len());

    for epoch in 1..=config.epochs() {
        order.shuffle(&mut shuffle_rng);
        let mut sum = LossBreakdown::default();
        let mut seen = 0;
        let mut steps = 0;
        for (bi, chunk) in order.chunks(batch).enumerate() {
            if chunk.len() < batch {
                continue;
            }
            let records: Vec<&Record> = chunk.iter().map(|&i| &train.records[i]).collect();
            let snapshot = run.map(|_| model.store.clone());
            let result = (|| -> Result<LossBreakdown> {
                let mut g = Graph::new(true, derive_seed(config.seed, epoch as u64, bi as u64));
                let (loss, b) = batch_loss(&mut model, &mut g, &records, config)?;
                if !b.total.is_finite() {
                    return Err(CoalaError::NonFinite(format!("total loss {}", b.total)));
                }
                let grads = g.backward(loss)?;
                model.store.accumulate_grads(&g, &grads)?;
                opt.step(&mut model.store, |p| groups.contains(&p.group))?;
                Ok(b)
            })();
            let b = match result {
                Ok(b) => b,
                Err(e @ CoalaError::NonFinite(_)) => {
                    if let (Some(run), Some(good)) = (run, snapshot) {
                        let mut keep = model.clone();
                        keep.store = good;
                        Checkpoint::from_store(&keep.store, trailer(&keep, config, epoch - 1))
                            .save(&run.path(LAST_GOOD))?;
                        let dump = serde_json::json!({
                            "error": e.to_string(),
                            "epoch": epoch,
                            "step": step + 1,
                            "batch": bi,
                            "clip_ids": records.iter().map(|r| r.clip_id.as_str()).collect::<Vec<_>>(),
                        });
                        let path = run.path(DIAGNOSTIC);
                        fs::write(&path, serde_json::to_string_pretty(&dump).unwrap_or_default())
                            .map_err(|err| CoalaError::io(&path, err))?;
                    }
                    return Err(CoalaError::NonFinite(format!(
                        "epoch {epoch}, batch {bi}: {e}"
                    )));
                }
                Err(e) => return Err(e),
            };
            step += 1;
            steps += 1;
            seen += records.len();
            accumulate(&mut sum, &b);
            if let Some(run) = run {
                run.append(
                    STEP_LOG,
                    &StepLog {
                        step,
                        epoch,
                        audio: b.audio,
                        tags: b.tags,
                        contrastive: b.contrastive,
                        total: b.total,
                    },
                )?;
            }
        }

        let (val_loss, val_top1) = if val.len() >= 2 {
            let (loss, proj) = validate(&mut model, val, config)?;
            let dim = model.config.embedding_dim();
            let top1 = match proj {
                Some((a, t)) if val.len() >= config.batch_size => {
                    Some(retrieval_top1(&a, &t, dim, config.batch_size, 1, derive_seed(config.seed, 2, epoch as u64))?)
                }
                _ => None,
            };
            (Some(loss), top1)
        } else {
            (None, None)
        };
        let summary = EpochSummary {
            epoch,
            steps,
            train: per_record(sum, seen),
            val: val_loss,
            val_top1,
        };
        log::info!(
            "epoch {epoch}: train total {:.4}, val {:?}",
            summary.train.total,
            summary.val.map(|v| v.total)
        );
        let score = summary.val.map_or(summary.train.total, |v| v.total);
        let improved = best.is_none_or(|(_, s)| score < s);
        if improved {
            best = Some((epoch, score));
        }
        if let Some(run) = run {
            run.append(EPOCH_LOG, &summary)?;
            let ck = Checkpoint::from_store(&model.store, trailer(&model, config, epoch));
            ck.save(&run.path(LAST))?;
            if improved {
                ck.save(&run.path(BEST))?;
            }
            if config.checkpoint_every.is_some_and(|k| epoch % k == 0) {
                ck.save(&run.path(&format!("epoch_{epoch:04}.ckpt")))?;
            }
        }
        epochs.push(summary);
    }
    Ok(TrainOutcome {
        model,
        epochs,
        steps: step,
        best_epoch: best.map(|(e, _)| e),
    })
}

/// Rebuilds the model stored in a checkpoint.
pub fn load_model(ck: &Checkpoint) -> Result<Coala<f32>> {
    let net: NetConfig = serde_json::from_value(ck.trailer["net"].clone())
        .map_err(|e| CoalaError::Format(format!("checkpoint trailer has no usable network config: {e}")))?;
    let mut model = Coala::new(net, 0)?;
    ck.apply_to(&mut model.store)?;
    Ok(model)
}

/// Eval-mode flattened audio latents, one row per patch.
pub fn embed_patches(model: &mut Coala<f32>, patches: &[&[f32]]) -> Result<Vec<Vec<f32>>> {
    let dim = model.config.embedding_dim();
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(64) {
        let mut data = Vec::with_capacity(chunk.len() * PATCH * PATCH);
        for p in chunk {
            if p.len() != PATCH * PATCH {
                return Err(CoalaError::shape("embed", &[p.len()], &[PATCH * PATCH]));
            }
            data.extend_from_slice(p);
        }
        let mut g = Graph::new(false, 0);
        let x = g.input(Tensor::new(&[chunk.len(), 1, PATCH, PATCH], data)?);
        let z = model.encode_audio(&mut g, x)?;
        out.extend(g.value(z).data().chunks(dim).map(<[f32]>::to_vec));
    }
    Ok(out)
}

/// Loads a checkpoint and embeds every patch of a store.
pub fn extract_embeddings(checkpoint: &Path, patches: &[SpectrogramPatch]) -> Result<Vec<Vec<f32>>> {
    let mut model = load_model(&Checkpoint::load(checkpoint)?)?;
    let refs: Vec<&[f32]> = patches.iter().map(|p| p.values.as_slice()).collect();
    embed_patches(&mut model, &refs)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config(mode: Mode) -> TrainConfig {
        TrainConfig {
            mode,
            epochs: Some(1),
            batch_size: 2,
            lr: 1e-4,
            net: NetConfig {
                classes: 5,
                channels: 4,
                conv_blocks: 5,
                tag_layers: vec![8, 36],
                cnn_hidden: 6,
                dropout: 0.25,
            },
            ..TrainConfig::default()
        }
    }

    pub(crate) fn toy_data(n: usize, classes: usize) -> Dataset {
        Dataset {
            records: (0..n)
                .map(|i| Record {
                    clip_id: format!("c{i}"),
                    patch: (0..PATCH * PATCH).map(|k| ((k * (i + 3)) % 97) as f32 / 96.0).collect(),
                    tags: TagVector {
                        active: vec![i % classes],
                        classes,
                    },
                })
                .collect(),
        }
    }

    #[test]
    fn split_examples() {
        let d = toy_data(100, 5);
        let (t, v) = split(&d, 0.1, 7).unwrap();
        assert_eq!((t.len(), v.len()), (90, 10));
        let (t2, v2) = split(&d, 0.1, 7).unwrap();
        assert_eq!((&t, &v), (&t2, &v2));
        let mut ids: Vec<&str> = t.records.iter().chain(&v.records).map(|r| r.clip_id.as_str()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 100);
        let (_, v3) = split(&d, 0.1, 8).unwrap();
        assert_ne!(v, v3);
    }

    #[test]
    fn two_records_one_step() {
        let out = train(&toy_data(2, 5), &Dataset::default(), &tiny_config(Mode::AeC), None).unwrap();
        assert_eq!(out.steps, 1);
        assert_eq!(out.epochs[0].steps, 1);
    }

    #[test]
    fn steps_per_epoch_floor() {
        let mut c = tiny_config(Mode::EC);
        c.batch_size = 3;
        c.epochs = Some(2);
        let out = train(&toy_data(10, 5), &Dataset::default(), &c, None).unwrap();
        assert_eq!(out.steps, 6);
        let out = train(&toy_data(11, 5), &Dataset::default(), &c, None).unwrap();
        assert_eq!(out.steps, 6);
    }

    #[test]
    fn config_toml_round_trip() {
        let mut c = TrainConfig::default();
        c.mode = Mode::EC;
        c.clip_norm = Some(5.0);
        let back = TrainConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        let partial = TrainConfig::from_toml("mode = \"cnn\"\nbatch_size = 16\n").unwrap();
        assert_eq!(partial.epochs(), 20);
        assert_eq!(partial.lr, 0.005);
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
        let bad = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn retrieval_metric_cases() {
        // identical unit rows: perfect retrieval
        let dim = 4;
        let eye: Vec<f32> = (0..16).map(|i| if i / 4 == i % 4 { 1.0 } else { 0.0 }).collect();
        assert_eq!(retrieval_top1(&eye, &eye, dim, 4, 3, 0).unwrap(), 1.0);
        // all rows equal: four-way tie everywhere
        let flat = vec![1.0f32; 16];
        assert!((retrieval_top1(&flat, &flat, dim, 4, 3, 0).unwrap() - 0.25).abs() < 1e-12);
        assert!(retrieval_top1(&flat, &flat, dim, 8, 1, 0).is_err());
    }

    #[test]
    fn embeddings_from_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::create(dir.path()).unwrap();
        let c = tiny_config(Mode::AeC);
        let out = train(&toy_data(4, 5), &toy_data(2, 5), &c, Some(&run)).unwrap();
        let zero = SpectrogramPatch::new("z", 0, vec![0.0; PATCH * PATCH]).unwrap();
        let emb = extract_embeddings(&run.path(LAST), &[zero.clone(), zero]).unwrap();
        assert_eq!(emb.len(), 2);
        assert_eq!(emb[0].len(), 36);
        assert_eq!(emb[0], emb[1]);
        assert!(emb[0].iter().all(|v| v.is_finite()));
        assert!(run.path(BEST).exists() && run.path(STEP_LOG).exists());
        assert_eq!(out.best_epoch, Some(1));

        let mut other = Coala::<f32>::new(NetConfig { channels: 5, tag_layers: vec![8, 45], ..c.net.clone() }, 0).unwrap();
        let err = Checkpoint::load(&run.path(LAST)).unwrap().apply_to(&mut other.store).unwrap_err();
        assert!(err.to_string().contains("audio_encoder.0.weight"), "{err}");
    }
}
