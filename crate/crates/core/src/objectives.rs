//! Training objectives: generalized KL reconstruction for the audio
//! autoencoder, binary cross-entropy for the tag autoencoder, and the
//! temperature-scaled contrastive alignment between the two projections.
//!
//! All three are summed over the batch (and over elements), never averaged.

use serde::{Deserialize, Serialize};

use crate::error::{CoalaError, Result};
use crate::tensor::{CustomOp, Graph, Scalar, Tensor, Var};

/// Clamp used inside every log and norm.
pub const EPS: f64 = 1e-7;

/// Which objective a training run minimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// Both autoencoders plus contrastive alignment.
    #[serde(rename = "ae-c")]
    AeC,
    /// Encoders and projection heads under the contrastive term only.
    #[serde(rename = "e-c")]
    EC,
    /// Supervised baseline: audio encoder plus a head predicting the tags.
    #[serde(rename = "cnn")]
    Cnn,
}

impl std::str::FromStr for Mode {
    type Err = CoalaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ae-c" | "aec" => Ok(Mode::AeC),
            "e-c" | "ec" => Ok(Mode::EC),
            "cnn" => Ok(Mode::Cnn),
            other => Err(CoalaError::Invalid(format!(
                "unknown mode {other:?} (expected ae-c, e-c or cnn)"
            ))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::AeC => "ae-c",
            Mode::EC => "e-c",
            Mode::Cnn => "cnn",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub audio: f64,
    pub tags: f64,
    pub contrastive: f64,
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            audio: 5.0,
            tags: 5.0,
            contrastive: 10.0,
            temperature: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(CoalaError::Invalid(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        for (name, v) in [
            ("audio", self.audio),
            ("tags", self.tags),
            ("contrastive", self.contrastive),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CoalaError::Invalid(format!(
                    "loss weight {name} must be non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Which in-batch pairs form the contrastive denominator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Denominator {
    /// Only the mismatched pairs `i != b`.
    #[default]
    ExcludePositive,
    /// All pairs, including the positive one.
    IncludePositive,
}

impl std::str::FromStr for Denominator {
    type Err = CoalaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exclude-positive" => Ok(Denominator::ExcludePositive),
            "include-positive" => Ok(Denominator::IncludePositive),
            other => Err(CoalaError::Invalid(format!(
                "unknown contrastive denominator {other:?}"
            ))),
        }
    }
}

fn f(v: impl num_traits::ToPrimitive) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(CoalaError::shape(op, a, b));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// generalized KL

/// `sum x ln((x + eps) / (xhat + eps)) - x + xhat` over all elements.
pub fn kl_value<T: Scalar>(target: &[T], recon: &[T]) -> Result<f64> {
    let mut total = 0.0;
    for (&x, &xh) in target.iter().zip(recon) {
        let (x, xh) = (f(x), f(xh));
        if x < 0.0 || xh < 0.0 {
            return Err(CoalaError::Invalid(format!(
                "generalized KL needs non-negative inputs, got target {x} and reconstruction {xh}"
            )));
        }
        total += x * ((x + EPS) / (xh + EPS)).ln() - x + xh;
    }
    Ok(total)
}

struct KlOp;

impl<T: Scalar> CustomOp<T> for KlOp {
    fn name(&self) -> &'static str {
        "kl_reconstruction"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let go = f(grad_output.item()?);
        let (x, xh) = (inputs[0], inputs[1]);
        let d_recon = Tensor::from_fn(x.shape(), |i| {
            let (a, b) = (f(x.data()[i]), f(xh.data()[i]));
            T::c(go * (1.0 - a / (b + EPS)))
        });
        let d_target = Tensor::from_fn(x.shape(), |i| {
            let (a, b) = (f(x.data()[i]), f(xh.data()[i]));
            T::c(go * (((a + EPS) / (b + EPS)).ln() + a / (a + EPS) - 1.0))
        });
        Ok(vec![Some(d_target), Some(d_recon)])
    }
}

/// Generalized KL divergence between a target and its reconstruction.
pub fn kl_reconstruction<T: Scalar>(g: &mut Graph<T>, target: Var, recon: Var) -> Result<Var> {
    same_shape("kl_reconstruction", g.value(target).shape(), g.value(recon).shape())?;
    let v = kl_value(g.value(target).data(), g.value(recon).data())?;
    g.custom(&[target, recon], Tensor::scalar(T::c(v)), Box::new(KlOp))
}

// ---------------------------------------------------------------------------
// binary cross-entropy

/// `sum -[y ln yhat + (1 - y) ln(1 - yhat)]` with both logs clamped at [`EPS`].
pub fn bce_value<T: Scalar>(target: &[T], pred: &[T]) -> f64 {
    target
        .iter()
        .zip(pred)
        .map(|(&y, &p)| {
            let (y, p) = (f(y), f(p));
            -(y * p.max(EPS).ln() + (1.0 - y) * (1.0 - p).max(EPS).ln())
        })
        .sum()
}

struct BceOp;

impl<T: Scalar> CustomOp<T> for BceOp {
    fn name(&self) -> &'static str {
        "binary_cross_entropy"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let go = f(grad_output.item()?);
        let (y, p) = (inputs[0], inputs[1]);
        let d_pred = Tensor::from_fn(y.shape(), |i| {
            let (yv, pv) = (f(y.data()[i]), f(p.data()[i]));
            let mut d = 0.0;
            if pv > EPS {
                d -= yv / pv;
            }
            if 1.0 - pv > EPS {
                d += (1.0 - yv) / (1.0 - pv);
            }
            T::c(go * d)
        });
        let d_target = Tensor::from_fn(y.shape(), |i| {
            let pv = f(p.data()[i]);
            T::c(go * ((1.0 - pv).max(EPS).ln() - pv.max(EPS).ln()))
        });
        Ok(vec![Some(d_target), Some(d_pred)])
    }
}

/// Per-class binary cross-entropy of multi-hot targets, summed.
pub fn tag_bce<T: Scalar>(g: &mut Graph<T>, target: Var, pred: Var) -> Result<Var> {
    same_shape("tag_bce", g.value(target).shape(), g.value(pred).shape())?;
    let v = bce_value(g.value(target).data(), g.value(pred).data());
    g.custom(&[target, pred], Tensor::scalar(T::c(v)), Box::new(BceOp))
}

// ---------------------------------------------------------------------------
// contrastive alignment

/// Rows scaled to unit norm (norm clamped at [`EPS`]), with the clamped norms.
fn normalize_rows<T: Scalar>(m: &[T], rows: usize, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut unit = vec![0.0; rows * dim];
    let mut norms = vec![0.0; rows];
    for r in 0..rows {
        let row = &m[r * dim..(r + 1) * dim];
        let n = row.iter().map(|&v| f(v) * f(v)).sum::<f64>().sqrt().max(EPS);
        norms[r] = n;
        for (u, &v) in unit[r * dim..(r + 1) * dim].iter_mut().zip(row) {
            *u = f(v) / n;
        }
    }
    (unit, norms)
}

struct Contrastive {
    /// cosine similarities, row = audio, column = tags
    sim: Vec<f64>,
    unit_a: Vec<f64>,
    unit_t: Vec<f64>,
    norm_a: Vec<f64>,
    norm_t: Vec<f64>,
    /// per-row softmax over the denominator set
    probs: Vec<f64>,
    per_row: Vec<f64>,
}

fn contrastive_forward<T: Scalar>(
    a: &Tensor<T>,
    t: &Tensor<T>,
    tau: f64,
    denom: Denominator,
) -> Result<Contrastive> {
    same_shape("contrastive", a.shape(), t.shape())?;
    if a.rank() != 2 {
        return Err(CoalaError::shape("contrastive", a.shape(), &[0, 0]));
    }
    let (n, d) = (a.shape()[0], a.shape()[1]);
    if n < 2 {
        return Err(CoalaError::Invalid(format!(
            "contrastive loss needs a batch of at least 2 pairs, got {n}"
        )));
    }
    if !(tau > 0.0) {
        return Err(CoalaError::Invalid(format!("temperature must be positive, got {tau}")));
    }
    let (unit_a, norm_a) = normalize_rows(a.data(), n, d);
    let (unit_t, norm_t) = normalize_rows(t.data(), n, d);
    let mut sim = vec![0.0; n * n];
    for b in 0..n {
        let ra = &unit_a[b * d..(b + 1) * d];
        for i in 0..n {
            let rt = &unit_t[i * d..(i + 1) * d];
            sim[b * n + i] = ra.iter().zip(rt).map(|(x, y)| x * y).sum();
        }
    }
    let mut probs = vec![0.0; n * n];
    let mut per_row = vec![0.0; n];
    for b in 0..n {
        let in_denominator = |i: usize| denom == Denominator::IncludePositive || i != b;
        let max = (0..n)
            .filter(|&i| in_denominator(i))
            .map(|i| sim[b * n + i] / tau)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for i in (0..n).filter(|&i| in_denominator(i)) {
            let e = (sim[b * n + i] / tau - max).exp();
            probs[b * n + i] = e;
            z += e;
        }
        for i in 0..n {
            probs[b * n + i] /= z;
        }
        per_row[b] = -sim[b * n + b] / tau + max + z.ln();
    }
    Ok(Contrastive {
        sim,
        unit_a,
        unit_t,
        norm_a,
        norm_t,
        probs,
        per_row,
    })
}

/// Per-pair contrastive terms; their sum is the loss.
pub fn contrastive_terms<T: Scalar>(
    phi_a: &Tensor<T>,
    phi_t: &Tensor<T>,
    tau: f64,
    denom: Denominator,
) -> Result<Vec<f64>> {
    Ok(contrastive_forward(phi_a, phi_t, tau, denom)?.per_row)
}

/// Cosine similarity matrix `[audio row][tag row]`.
pub fn cosine_matrix<T: Scalar>(phi_a: &Tensor<T>, phi_t: &Tensor<T>) -> Result<Vec<f64>> {
    Ok(contrastive_forward(phi_a, phi_t, 1.0, Denominator::IncludePositive)?.sim)
}

struct ContrastiveOp {
    tau: f64,
    denom: Denominator,
}

/// Gradient through `u = v / max(|v|, eps)` for one row.
fn unnormalize_grad(du: &[f64], unit: &[f64], norm: f64, out: &mut [f64]) {
    if norm > EPS {
        let proj: f64 = du.iter().zip(unit).map(|(a, b)| a * b).sum();
        for ((o, &d), &u) in out.iter_mut().zip(du).zip(unit) {
            *o = (d - proj * u) / norm;
        }
    } else {
        for (o, &d) in out.iter_mut().zip(du) {
            *o = d / EPS;
        }
    }
}

impl<T: Scalar> CustomOp<T> for ContrastiveOp {
    fn name(&self) -> &'static str {
        "contrastive"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let go = f(grad_output.item()?);
        let (a, t) = (inputs[0], inputs[1]);
        let c = contrastive_forward(a, t, self.tau, self.denom)?;
        let (n, d) = (a.shape()[0], a.shape()[1]);
        // dL/dS
        let mut gs = vec![0.0; n * n];
        for b in 0..n {
            for i in 0..n {
                let pos = if i == b { 1.0 } else { 0.0 };
                gs[b * n + i] = go * (c.probs[b * n + i] - pos) / self.tau;
            }
        }
        let mut du_a = vec![0.0; n * d];
        let mut du_t = vec![0.0; n * d];
        for b in 0..n {
            for i in 0..n {
                let w = gs[b * n + i];
                if w == 0.0 {
                    continue;
                }
                for k in 0..d {
                    du_a[b * d + k] += w * c.unit_t[i * d + k];
                    du_t[i * d + k] += w * c.unit_a[b * d + k];
                }
            }
        }
        let mut da = vec![0.0; n * d];
        let mut dt = vec![0.0; n * d];
        for r in 0..n {
            let s = r * d..(r + 1) * d;
            unnormalize_grad(&du_a[s.clone()], &c.unit_a[s.clone()], c.norm_a[r], &mut da[s.clone()]);
            unnormalize_grad(&du_t[s.clone()], &c.unit_t[s.clone()], c.norm_t[r], &mut dt[s]);
        }
        let _ = &c.sim;
        let to_t = |v: Vec<f64>| Tensor::new(a.shape(), v.into_iter().map(T::c).collect());
        Ok(vec![Some(to_t(da)?), Some(to_t(dt)?)])
    }
}

/// Temperature-scaled contrastive loss between paired rows of `phi_a` and `phi_t`:
/// `sum_b -log( exp(sim(a_b, t_b)/tau) / sum_{i in D_b} exp(sim(a_b, t_i)/tau) )`
/// where `D_b` excludes `b` unless [`Denominator::IncludePositive`] is chosen.
pub fn contrastive<T: Scalar>(
    g: &mut Graph<T>,
    phi_a: Var,
    phi_t: Var,
    tau: f64,
    denom: Denominator,
) -> Result<Var> {
    let c = contrastive_forward(g.value(phi_a), g.value(phi_t), tau, denom)?;
    let v: f64 = c.per_row.iter().sum();
    g.custom(
        &[phi_a, phi_t],
        Tensor::scalar(T::c(v)),
        Box::new(ContrastiveOp { tau, denom }),
    )
}

// ---------------------------------------------------------------------------
// softmax cross-entropy (downstream classifier)

struct SoftmaxCeOp {
    labels: Vec<usize>,
}

fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<f64> {
    let k = logits.shape()[1];
    let mut p = vec![0.0; logits.numel()];
    for (row, out) in logits.data().chunks(k).zip(p.chunks_mut(k)) {
        let max = row.iter().map(|&v| f(v)).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (f(v) - max).exp();
            z += *o;
        }
        for o in out.iter_mut() {
            *o /= z;
        }
    }
    p
}

impl<T: Scalar> CustomOp<T> for SoftmaxCeOp {
    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let go = f(grad_output.item()?);
        let logits = inputs[0];
        let (b, k) = (logits.shape()[0], logits.shape()[1]);
        let mut p = softmax_rows(logits);
        for (r, &l) in self.labels.iter().enumerate() {
            p[r * k + l] -= 1.0;
        }
        let scale = go / b as f64;
        Ok(vec![Some(Tensor::new(
            logits.shape(),
            p.into_iter().map(|v| T::c(v * scale)).collect(),
        )?)])
    }
}

/// Mean categorical cross-entropy of `[B, K]` logits against class ids.
pub fn softmax_cross_entropy<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[usize],
) -> Result<Var> {
    let lv = g.value(logits);
    if lv.rank() != 2 || lv.shape()[0] != labels.len() {
        return Err(CoalaError::shape("softmax_cross_entropy", lv.shape(), &[labels.len(), 0]));
    }
    let k = lv.shape()[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(CoalaError::Invalid(format!("label {bad} out of range for {k} classes")));
    }
    let p = softmax_rows(lv);
    let loss = labels
        .iter()
        .enumerate()
        .map(|(r, &l)| -p[r * k + l].max(1e-300).ln())
        .sum::<f64>()
        / labels.len() as f64;
    g.custom(
        &[logits],
        Tensor::scalar(T::c(loss)),
        Box::new(SoftmaxCeOp {
            labels: labels.to_vec(),
        }),
    )
}

// ---------------------------------------------------------------------------
// weighted combination

/// Unweighted loss terms of one batch, as available for the mode.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub audio: Option<Var>,
    pub tags: Option<Var>,
    pub contrastive: Option<Var>,
    /// Baseline head cross-entropy (CNN mode).
    pub supervised: Option<Var>,
}

/// Values of each term, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "L_a")]
    pub audio: f64,
    #[serde(rename = "L_t")]
    pub tags: f64,
    #[serde(rename = "L_xi")]
    pub contrastive: f64,
    pub total: f64,
}

fn need(term: Option<Var>, what: &str, mode: Mode) -> Result<Var> {
    term.ok_or_else(|| CoalaError::Invalid(format!("{mode} loss needs the {what} term")))
}

/// Weighted total for the mode:
/// AE-C `la * L_a + lt * L_t + lxi * L_xi`; E-C `lxi * L_xi`; CNN the supervised term.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    terms: LossTerms,
    weights: &LossWeights,
    mode: Mode,
) -> Result<(Var, LossBreakdown)> {
    let val = |g: &Graph<T>, v: Option<Var>| v.map_or(0.0, |v| f(g.value(v).data()[0]));
    let mut breakdown = LossBreakdown {
        audio: val(g, terms.audio),
        tags: val(g, terms.tags),
        contrastive: val(g, terms.contrastive),
        total: 0.0,
    };
    let total = match mode {
        Mode::AeC => {
            let a = need(terms.audio, "audio reconstruction", mode)?;
            let t = need(terms.tags, "tag reconstruction", mode)?;
            let c = need(terms.contrastive, "contrastive", mode)?;
            let a = g.scale(a, T::c(weights.audio))?;
            let t = g.scale(t, T::c(weights.tags))?;
            let c = g.scale(c, T::c(weights.contrastive))?;
            let at = g.add(a, t)?;
            g.add(at, c)?
        }
        Mode::EC => {
            let c = need(terms.contrastive, "contrastive", mode)?;
            g.scale(c, T::c(weights.contrastive))?
        }
        Mode::Cnn => {
            let s = need(terms.supervised, "supervised", mode)?;
            breakdown.tags = val(g, Some(s));
            s
        }
    };
    breakdown.total = f(g.value(total).data()[0]);
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_identity_and_hand_value() {
        let x = [0.2f64, 0.5, 1.0, 0.0];
        assert!(kl_value(&x, &x).unwrap().abs() <= 1e-5);
        let v = kl_value(&[0.8f64], &[0.4]).unwrap();
        let expect = 0.8 * 2f64.ln() - 0.8 + 0.4;
        assert!((v - expect).abs() < 1e-6, "{v} vs {expect}");
        assert!((expect - 0.1545).abs() < 1e-4);
        // zero target contributes the reconstruction itself
        assert!((kl_value(&[0.0f64], &[0.3]).unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn kl_rejects_negative() {
        assert!(kl_value(&[-0.1f64], &[0.3]).is_err());
        assert!(kl_value(&[0.1f64], &[-0.3]).is_err());
    }

    #[test]
    fn bce_hand_values() {
        assert!((bce_value(&[1.0f64], &[0.5]) - 2f64.ln()).abs() < 1e-12);
        assert!((bce_value(&[0.0f64], &[0.5]) - 2f64.ln()).abs() < 1e-12);
        assert!(bce_value(&[1.0f64, 0.0], &[1.0, 0.0]).abs() < 1e-6);
    }

    #[test]
    fn contrastive_hand_cases() {
        let a = Tensor::new(&[2, 2], vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
        let terms = contrastive_terms(&a, &a, 0.1, Denominator::ExcludePositive).unwrap();
        assert!((terms.iter().sum::<f64>() + 20.0).abs() < 1e-9);

        for n in [2usize, 3, 8] {
            let same = Tensor::full(&[n, 4], 0.5f64);
            let terms = contrastive_terms(&same, &same, 0.1, Denominator::ExcludePositive).unwrap();
            for t in terms {
                assert!((t - ((n - 1) as f64).ln()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn contrastive_needs_two_pairs() {
        let a = Tensor::full(&[1, 3], 1.0f32);
        assert!(contrastive_terms(&a, &a, 0.1, Denominator::ExcludePositive).is_err());
    }

    #[test]
    fn include_positive_variant() {
        let a = Tensor::new(&[2, 2], vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
        let terms = contrastive_terms(&a, &a, 0.1, Denominator::IncludePositive).unwrap();
        let expect = -10.0 + (10f64.exp() + 1.0).ln();
        assert!((terms[0] - expect).abs() < 1e-9);
    }

    #[test]
    fn total_loss_modes() {
        let mut g = Graph::<f64>::new(true, 0);
        let a = g.input(Tensor::scalar(1.5));
        let t = g.input(Tensor::scalar(2.0));
        let c = g.input(Tensor::scalar(-20.0));
        let terms = LossTerms {
            audio: Some(a),
            tags: Some(t),
            contrastive: Some(c),
            supervised: None,
        };
        let w = LossWeights::default();
        let (v, b) = total_loss(&mut g, terms, &w, Mode::AeC).unwrap();
        assert!((g.value(v).data()[0] - (5.0 * 1.5 + 5.0 * 2.0 - 200.0)).abs() < 1e-12);
        assert_eq!(b.contrastive, -20.0);
        let (v, _) = total_loss(&mut g, terms, &w, Mode::EC).unwrap();
        assert_eq!(g.value(v).data()[0], -200.0);
        let zero = LossWeights {
            audio: 0.0,
            tags: 0.0,
            contrastive: 0.0,
            temperature: 0.1,
        };
        let (v, _) = total_loss(&mut g, terms, &zero, Mode::AeC).unwrap();
        assert_eq!(g.value(v).data()[0], 0.0);
        assert!(total_loss(&mut g, terms, &w, Mode::Cnn).is_err());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("ae-c".parse::<Mode>().unwrap(), Mode::AeC);
        assert_eq!("E-C".parse::<Mode>().unwrap(), Mode::EC);
        assert!("vae".parse::<Mode>().is_err());
    }
}
