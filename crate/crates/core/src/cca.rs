//! Canonical correlation similarity between clip embeddings and summary
//! statistics of frame-level acoustic descriptors.

use std::collections::{BTreeSet, HashMap};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{AcousticDescriptors, Matrix};
use crate::error::{CoalaError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Statistic {
    Mean,
    Var,
    Skew,
}

impl Statistic {
    pub const ALL: [Statistic; 3] = [Statistic::Mean, Statistic::Var, Statistic::Skew];

    pub fn name(self) -> &'static str {
        match self {
            Statistic::Mean => "mean",
            Statistic::Var => "var",
            Statistic::Skew => "skew",
        }
    }
}

impl fmt::Display for Statistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Statistic {
    type Err = CoalaError;
    fn from_str(s: &str) -> Result<Self> {
        Statistic::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| CoalaError::Invalid(format!("unknown statistic {s:?} (mean|var|skew)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Descriptor {
    Mfcc,
    Chroma,
    Centroid,
    Bandwidth,
}

impl Descriptor {
    pub const ALL: [Descriptor; 4] = [
        Descriptor::Mfcc,
        Descriptor::Chroma,
        Descriptor::Centroid,
        Descriptor::Bandwidth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Descriptor::Mfcc => "mfcc",
            Descriptor::Chroma => "chroma",
            Descriptor::Centroid => "centroid",
            Descriptor::Bandwidth => "bandwidth",
        }
    }

    pub fn select(self, d: &AcousticDescriptors) -> &Matrix {
        match self {
            Descriptor::Mfcc => &d.mfcc,
            Descriptor::Chroma => &d.chroma,
            Descriptor::Centroid => &d.centroid,
            Descriptor::Bandwidth => &d.bandwidth,
        }
    }
}

impl fmt::Display for Descriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One value per row of a `dims x frames` matrix, using population moments.
/// Skewness of a zero-variance row is 0.
pub fn stat(m: &Matrix, which: Statistic) -> Result<Vec<f64>> {
    if m.cols == 0 {
        return Err(CoalaError::Invalid("statistic of an empty frame sequence".into()));
    }
    if which == Statistic::Skew && m.cols < 3 {
        return Err(CoalaError::Invalid(format!("skewness needs at least 3 frames, got {}", m.cols)));
    }
    Ok((0..m.rows)
        .map(|r| {
            let x = m.row(r);
            let n = x.len() as f64;
            let mean = x.iter().sum::<f64>() / n;
            let moment = |k: i32| x.iter().map(|v| (v - mean).powi(k)).sum::<f64>() / n;
            match which {
                Statistic::Mean => mean,
                Statistic::Var => moment(2),
                Statistic::Skew => {
                    let m2 = moment(2);
                    let scale = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                    if m2.sqrt() <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
                        0.0
                    } else {
                        moment(3) / m2.powf(1.5)
                    }
                }
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CcaOptions {
    /// Fraction of (centered) energy kept by the spectral pre-reduction of
    /// each view; `None` keeps every column.
    pub energy: Option<f64>,
    /// Upper bound on kept components per view after the energy cut.
    pub max_components: Option<usize>,
    /// Average only the largest `k` correlations.
    pub top_k: Option<usize>,
}

impl Default for CcaOptions {
    fn default() -> Self {
        CcaOptions {
            energy: Some(0.99),
            max_components: None,
            top_k: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CcaResult {
    pub similarity: f64,
    /// Number of correlations averaged.
    pub components: usize,
    pub correlations: Vec<f64>,
}

/// Directions whose singular value falls below this fraction of the largest
/// are treated as rank deficiency.
const RANK_TOL: f64 = 1e-6;

fn to_dmatrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let p = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != p) {
        return Err(CoalaError::Invalid("ragged CCA input rows".into()));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(CoalaError::Invalid("CCA input contains non-finite values".into()));
    }
    Ok(DMatrix::from_fn(n, p, |i, j| rows[i][j]))
}

/// Orthonormal basis (n x k) of the centered column space, after the
/// optional energy and count reduction. Returns the basis and the column
/// count before rank truncation.
fn view_basis(x: &DMatrix<f64>, opts: &CcaOptions) -> Result<(DMatrix<f64>, usize)> {
    let mut c = x.clone();
    for mut col in c.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let svd = c.svd(true, false);
    let u = svd.u.ok_or_else(|| CoalaError::Invalid("SVD failed to produce a basis".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let s: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();

    let mut keep = x.ncols();
    if let Some(e) = opts.energy {
        let total: f64 = s.iter().map(|v| v * v).sum();
        let mut acc = 0.0;
        keep = s.len();
        for (i, v) in s.iter().enumerate() {
            acc += v * v;
            if acc >= e * total {
                keep = i + 1;
                break;
            }
        }
    }
    if let Some(m) = opts.max_components {
        keep = keep.min(m);
    }
    let reduced = keep;
    let top = s.first().copied().unwrap_or(0.0);
    let rank = s.iter().take(keep).filter(|&&v| v > RANK_TOL * top && v > 0.0).count();
    let basis = DMatrix::from_fn(x.nrows(), rank, |i, j| u[(i, order[j])]);
    Ok((basis, reduced))
}

/// One view reduced to an orthonormal basis of its centered column space,
/// reusable across many comparisons.
#[derive(Clone, Debug)]
pub struct CcaView {
    basis: DMatrix<f64>,
    columns: usize,
}

impl CcaView {
    pub fn new(rows: &[Vec<f64>], opts: &CcaOptions) -> Result<Self> {
        if let Some(e) = opts.energy {
            if !(e > 0.0 && e <= 1.0) {
                return Err(CoalaError::Invalid(format!("energy fraction must lie in (0, 1], got {e}")));
            }
        }
        if rows.len() < 2 {
            return Err(CoalaError::Invalid(format!("CCA needs at least 2 rows, got {}", rows.len())));
        }
        let (basis, columns) = view_basis(&to_dmatrix(rows)?, opts)?;
        Ok(CcaView { basis, columns })
    }

    pub fn rows(&self) -> usize {
        self.basis.nrows()
    }

    /// Columns kept by the reduction, before rank truncation.
    pub fn columns(&self) -> usize {
        self.columns
    }

    /// Canonical correlation similarity against another view of the same rows.
    pub fn similarity(&self, other: &CcaView, top_k: Option<usize>) -> Result<CcaResult> {
        let n = self.rows();
        if n != other.rows() {
            return Err(CoalaError::Invalid(format!(
                "CCA views have {} and {} rows",
                n,
                other.rows()
            )));
        }
        if n <= self.columns.max(other.columns) {
            return Err(CoalaError::Invalid(format!(
                "CCA needs more rows than columns: {n} rows against {} and {} columns; \
                 add samples or enable a stronger reduction",
                self.columns, other.columns
            )));
        }
        let k = self.basis.ncols().min(other.basis.ncols());
        if k == 0 {
            return Ok(CcaResult {
                similarity: 0.0,
                components: 0,
                correlations: Vec::new(),
            });
        }
        let cross = self.basis.transpose() * &other.basis;
        let mut rho: Vec<f64> = cross
            .singular_values()
            .iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        rho.sort_by(|a, b| b.total_cmp(a));
        rho.truncate(k);
        let used = top_k.map_or(k, |t| t.clamp(1, k));
        let similarity = rho[..used].iter().sum::<f64>() / used as f64;
        Ok(CcaResult {
            similarity,
            components: used,
            correlations: rho,
        })
    }
}

/// Mean canonical correlation between two views of the same `n` rows.
pub fn cca_similarity(x: &[Vec<f64>], y: &[Vec<f64>], opts: &CcaOptions) -> Result<CcaResult> {
    if x.len() != y.len() {
        return Err(CoalaError::Invalid(format!(
            "CCA views have {} and {} rows",
            x.len(),
            y.len()
        )));
    }
    CcaView::new(x, opts)?.similarity(&CcaView::new(y, opts)?, opts.top_k)
}

/// Rows `clips x dims` of one statistic of one descriptor family.
pub fn stat_matrix(
    descriptors: &[&AcousticDescriptors],
    family: Descriptor,
    which: Statistic,
) -> Result<Vec<Vec<f64>>> {
    descriptors.iter().map(|d| stat(family.select(d), which)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CcaCell {
    pub model: String,
    pub descriptor: Descriptor,
    pub statistic: Statistic,
    pub similarity: f64,
    pub components: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CcaReport {
    pub cells: Vec<CcaCell>,
    /// Embedding against itself, per model.
    pub self_similarity: Vec<(String, f64)>,
}

impl CcaReport {
    pub fn get(&self, model: &str, descriptor: Descriptor, statistic: Statistic) -> Option<&CcaCell> {
        self.cells
            .iter()
            .find(|c| c.model == model && c.descriptor == descriptor && c.statistic == statistic)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,descriptor,statistic,similarity,components\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{}",
                c.model, c.descriptor, c.statistic, c.similarity, c.components
            );
        }
        for (m, s) in &self.self_similarity {
            let _ = writeln!(out, "{m},embedding,self,{s:.6},");
        }
        out
    }

    /// One aligned block per model: descriptors down, statistics across.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for (model, selfsim) in &self.self_similarity {
            let _ = writeln!(out, "{model}");
            let _ = write!(out, "  {:<10}", "");
            for s in Statistic::ALL {
                let _ = write!(out, " {:>8}", s.name());
            }
            out.push('\n');
            for d in Descriptor::ALL {
                let _ = write!(out, "  {:<10}", d.name());
                for s in Statistic::ALL {
                    match self.get(model, d, s) {
                        Some(c) => {
                            let _ = write!(out, " {:>8.4}", c.similarity);
                        }
                        None => {
                            let _ = write!(out, " {:>8}", "-");
                        }
                    }
                }
                out.push('\n');
            }
            let _ = writeln!(out, "  {:<10} {:>8.4}", "self", selfsim);
        }
        out
    }
}

/// Fills the descriptor x statistic grid for every model. Each model's rows
/// are matched to descriptors by clip id; the clip sets must agree exactly.
pub fn report(
    models: &[(String, Vec<(String, Vec<f64>)>)],
    descriptors: &[(String, AcousticDescriptors)],
    opts: &CcaOptions,
) -> Result<CcaReport> {
    let index: HashMap<&str, &AcousticDescriptors> =
        descriptors.iter().map(|(id, d)| (id.as_str(), d)).collect();
    let desc_ids: BTreeSet<&str> = index.keys().copied().collect();
    let mut cells = Vec::new();
    let mut self_similarity = Vec::new();
    for (name, rows) in models {
        let ids: BTreeSet<&str> = rows.iter().map(|(id, _)| id.as_str()).collect();
        if ids != desc_ids {
            let missing: Vec<&str> = desc_ids.symmetric_difference(&ids).copied().collect();
            return Err(CoalaError::Invalid(format!(
                "model {name}: clip sets differ; missing on one side: {}",
                missing.join(", ")
            )));
        }
        let emb: Vec<Vec<f64>> = rows.iter().map(|(_, v)| v.clone()).collect();
        let view = CcaView::new(&emb, opts)?;
        let descs: Vec<&AcousticDescriptors> = rows.iter().map(|(id, _)| index[id.as_str()]).collect();
        let grid: Vec<(Descriptor, Statistic)> = Descriptor::ALL
            .iter()
            .flat_map(|&d| Statistic::ALL.iter().map(move |&s| (d, s)))
            .collect();
        let results = grid
            .par_iter()
            .map(|&(d, s)| {
                let y = stat_matrix(&descs, d, s)?;
                let r = view.similarity(&CcaView::new(&y, opts)?, opts.top_k)?;
                Ok(CcaCell {
                    model: name.clone(),
                    descriptor: d,
                    statistic: s,
                    similarity: r.similarity,
                    components: r.components,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        cells.extend(results);
        self_similarity.push((name.clone(), view.similarity(&view, opts.top_k)?.similarity));
    }
    Ok(CcaReport { cells, self_similarity })
}
