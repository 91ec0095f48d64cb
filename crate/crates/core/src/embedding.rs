//! Label embeddings: the full-dimensional table, its PCA reduction, and
//! nearest-label decoding of reduced embeddings.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved label whose vector fills padding tokens.
pub const NULL_LABEL: &str = "";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TableEntry {
    label: String,
    vector: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TableFile {
    dim: usize,
    entries: Vec<TableEntry>,
}

/// Closed vocabulary of labels (and prompts) with full-dimensional vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TableFile", into = "TableFile")]
pub struct EmbeddingTable {
    labels: Vec<String>,
    vectors: Vec<Vec<f64>>,
    dim: usize,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new(labels: Vec<String>, vectors: Vec<Vec<f64>>) -> Result<Self> {
        if labels.len() != vectors.len() {
            return Err(Error::ShapeMismatch(format!("{} labels but {} vectors", labels.len(), vectors.len())));
        }
        let dim = vectors.first().map(Vec::len).unwrap_or(0);
        let mut index = HashMap::with_capacity(labels.len());
        for (i, (label, v)) in labels.iter().zip(&vectors).enumerate() {
            if v.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, actual: v.len() });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Config(format!("non-finite vector for label {label:?}")));
            }
            if index.insert(label.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate label {label:?}")));
            }
        }
        if !index.contains_key(NULL_LABEL) {
            log::warn!("embedding table has no null label; padding uses the zero vector");
        }
        Ok(Self { labels, vectors, dim, index })
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn vector(&self, label: &str) -> Result<&[f64]> {
        self.index_of(label).map(|i| self.vectors[i].as_slice()).ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    /// The null-label vector, or zeros when the table has none.
    pub fn null_vector(&self) -> Vec<f64> {
        self.index_of(NULL_LABEL).map(|i| self.vectors[i].clone()).unwrap_or_else(|| vec![0.0; self.dim])
    }
}

impl TryFrom<TableFile> for EmbeddingTable {
    type Error = Error;

    fn try_from(file: TableFile) -> Result<Self> {
        let (labels, vectors) = file.entries.into_iter().map(|e| (e.label, e.vector)).unzip();
        let mut table = Self::new(labels, vectors)?;
        if table.is_empty() {
            table.dim = file.dim;
        } else if table.dim != file.dim {
            return Err(Error::DimensionMismatch { expected: file.dim, actual: table.dim });
        }
        Ok(table)
    }
}

impl From<EmbeddingTable> for TableFile {
    fn from(t: EmbeddingTable) -> Self {
        TableFile {
            dim: t.dim,
            entries: t.labels.into_iter().zip(t.vectors).map(|(label, vector)| TableEntry { label, vector }).collect(),
        }
    }
}

/// Linear projection onto the top principal directions of a table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaProjector {
    pub mean: Vec<f64>,
    /// `d x D`, row-major; rows are orthonormal.
    pub components: Vec<f64>,
    pub d: usize,
    #[serde(rename = "D")]
    pub full_dim: usize,
    pub explained_variance_ratio: f64,
}

impl PcaProjector {
    /// Fits the top-`d` principal directions of the table's centered vectors.
    pub fn fit(table: &EmbeddingTable, d: usize) -> Result<Self> {
        let n = table.len();
        let dim = table.dim();
        if d == 0 || d > dim || n <= d {
            return Err(Error::Config(format!("need 1 <= d < |labels| and d <= D; got d={d}, |labels|={n}, D={dim}")));
        }
        let mut mean = vec![0.0; dim];
        for v in table.vectors() {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centered = DMatrix::from_fn(n, dim, |r, c| table.vectors()[r][c] - mean[c]);
        let svd = centered.svd(false, true);
        let v_t = svd.v_t.as_ref().expect("right singular vectors requested");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

        let total: f64 = svd.singular_values.iter().map(|s| s * s).sum();
        let largest = order.first().map(|&i| svd.singular_values[i]).unwrap_or(0.0);
        let tol = largest * (n.max(dim) as f64) * f64::EPSILON * 16.0;
        let rank = svd.singular_values.iter().filter(|&&s| s > tol && s > 0.0).count();
        if rank < d {
            return Err(Error::RankDeficient { rank, requested: d });
        }

        let mut components = Vec::with_capacity(d * dim);
        let mut captured = 0.0;
        for &i in order.iter().take(d) {
            let s = svd.singular_values[i];
            captured += s * s;
            let mut row: Vec<f64> = v_t.row(i).iter().copied().collect();
            // Fix the sign so the largest-magnitude entry is positive.
            let pivot = row.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
            if pivot < 0.0 {
                row.iter_mut().for_each(|x| *x = -*x);
            }
            components.extend(row);
        }
        let explained_variance_ratio = if total > 0.0 { (captured / total).min(1.0) } else { 1.0 };
        Ok(Self { mean, components, d, full_dim: dim, explained_variance_ratio })
    }

    pub fn component(&self, k: usize) -> &[f64] {
        &self.components[k * self.full_dim..(k + 1) * self.full_dim]
    }

    pub fn project(&self, e: &[f64]) -> Result<Vec<f64>> {
        if e.len() != self.full_dim {
            return Err(Error::DimensionMismatch { expected: self.full_dim, actual: e.len() });
        }
        Ok((0..self.d)
            .map(|k| self.component(k).iter().zip(e).zip(&self.mean).map(|((c, x), m)| c * (x - m)).sum())
            .collect())
    }

    pub fn unproject(&self, c: &[f64]) -> Result<Vec<f64>> {
        if c.len() != self.d {
            return Err(Error::DimensionMismatch { expected: self.d, actual: c.len() });
        }
        let mut out = self.mean.clone();
        for (k, &ck) in c.iter().enumerate() {
            for (o, p) in out.iter_mut().zip(self.component(k)) {
                *o += ck * p;
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        if p.components.len() != p.d * p.full_dim || p.mean.len() != p.full_dim {
            return Err(Error::ShapeMismatch("projector component/mean sizes".into()));
        }
        Ok(p)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Labels ranked by cosine similarity between `unproject(c)` and the table
/// vectors, best first. Ties go to the lexicographically smaller label.
pub fn nearest_labels(
    projector: &PcaProjector,
    table: &EmbeddingTable,
    c: &[f64],
    k: usize,
) -> Result<Vec<(String, f64)>> {
    nearest_labels_where(projector, table, c, k, |_| true)
}

/// [`nearest_labels`] restricted to labels accepted by `keep`.
pub fn nearest_labels_where(
    projector: &PcaProjector,
    table: &EmbeddingTable,
    c: &[f64],
    k: usize,
    keep: impl Fn(&str) -> bool,
) -> Result<Vec<(String, f64)>> {
    let full = projector.unproject(c)?;
    let mut scored: Vec<(String, f64)> = table
        .labels()
        .iter()
        .zip(table.vectors())
        .filter(|(l, _)| keep(l))
        .map(|(l, v)| (l.clone(), cosine(&full, v)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

/// A table together with its projector: maps labels to reduced embeddings
/// and back.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    pub table: EmbeddingTable,
    pub projector: PcaProjector,
    reduced: Vec<Vec<f64>>,
    null_reduced: Vec<f64>,
}

impl Vocabulary {
    pub fn new(table: EmbeddingTable, projector: PcaProjector) -> Result<Self> {
        if table.dim() != projector.full_dim {
            return Err(Error::DimensionMismatch { expected: projector.full_dim, actual: table.dim() });
        }
        let reduced = table.vectors().iter().map(|v| projector.project(v)).collect::<Result<_>>()?;
        let null_reduced = projector.project(&table.null_vector())?;
        Ok(Self { table, projector, reduced, null_reduced })
    }

    pub fn d(&self) -> usize {
        self.projector.d
    }

    pub fn full_dim(&self) -> usize {
        self.table.dim()
    }

    /// Reduced embedding of a label.
    pub fn embed(&self, label: &str) -> Result<&[f64]> {
        self.table
            .index_of(label)
            .map(|i| self.reduced[i].as_slice())
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    pub fn null_embedding(&self) -> &[f64] {
        &self.null_reduced
    }

    /// Full-dimensional vector of a prompt, used as the conditioning input.
    pub fn prompt_vector(&self, prompt: &str) -> Result<&[f64]> {
        self.table.vector(prompt)
    }

    pub fn prompt_id(&self, prompt: &str) -> Result<usize> {
        self.table.index_of(prompt).ok_or_else(|| Error::UnknownLabel(prompt.to_string()))
    }

    pub fn nearest(&self, c: &[f64], k: usize) -> Result<Vec<(String, f64)>> {
        nearest_labels(&self.projector, &self.table, c, k)
    }

    /// Best non-null label for a reduced embedding.
    pub fn decode(&self, c: &[f64]) -> Result<String> {
        let top = nearest_labels_where(&self.projector, &self.table, c, 1, |l| l != NULL_LABEL)?;
        top.into_iter().next().map(|(l, _)| l).ok_or_else(|| Error::UnknownLabel("<empty table>".into()))
    }
}
