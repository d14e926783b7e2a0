//! Expert diversity: pairwise cosine similarity of the experts' chosen-token
//! embeddings, the orthogonality score `1 - mean(off-diagonal upper triangle)`,
//! trailing rolling averages, and CSV/SVG export.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::types::EmbeddingVector;

/// Rolling window used for smoothing orthogonality series.
pub const DEFAULT_WINDOW: usize = 10;

/// Heatmaps carry numeric labels only up to this many experts.
pub const ANNOTATE_MAX_EXPERTS: usize = 8;

const PARALLEL_ROWS: usize = 32;

/// Square, row-major similarity matrix. Serialized as nested arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix<S> {
    n: usize,
    data: Vec<S>,
}

impl<S: Scalar> SimilarityMatrix<S> {
    pub fn from_rows(rows: Vec<Vec<S>>) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Metric("similarity matrix must be square".into()));
        }
        Ok(Self {
            n,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> S {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn rows(&self) -> Vec<Vec<S>> {
        (0..self.n).map(|i| self.row(i).to_vec()).collect()
    }
}

impl<S: Scalar> Serialize for SimilarityMatrix<S> {
    fn serialize<Z: Serializer>(&self, s: Z) -> std::result::Result<Z::Ok, Z::Error> {
        let rows: Vec<&[S]> = (0..self.n).map(|i| self.row(i)).collect();
        rows.serialize(s)
    }
}

impl<'de, S: Scalar> Deserialize<'de> for SimilarityMatrix<S> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<S>>::deserialize(d)?;
        Self::from_rows(rows).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct SimilarityRecord<S> {
    pub step: usize,
    pub matrix: SimilarityMatrix<S>,
    /// Mean of the strictly upper-triangular entries.
    pub mean_upper: S,
    pub orthogonality: S,
}

impl<S: Scalar> SimilarityRecord<S> {
    pub fn from_embeddings(step: usize, embeddings: &[&EmbeddingVector<S>]) -> Result<Self> {
        let matrix = cosine_similarity_matrix(embeddings)?;
        let (mean_upper, orthogonality) = orthogonality_score(&matrix)?;
        Ok(Self {
            step,
            matrix,
            mean_upper,
            orthogonality,
        })
    }
}

/// `M[i][j] = <e_i, e_j> / sqrt(|e_i|^2 |e_j|^2)`, clamped to `[-1, 1]`, with an
/// exact unit diagonal.
///
/// Dividing by `sqrt(|e_i|^2 |e_j|^2)` rather than `|e_i| |e_j|` makes two
/// identical vectors score exactly 1.
pub fn cosine_similarity_matrix<S: Scalar>(
    embeddings: &[&EmbeddingVector<S>],
) -> Result<SimilarityMatrix<S>> {
    let n = embeddings.len();
    if n < 2 {
        return Err(Error::Metric(format!(
            "need at least 2 embeddings, got {n}"
        )));
    }
    let dim = embeddings[0].dim();
    if let Some(i) = embeddings.iter().position(|e| e.dim() != dim) {
        return Err(Error::Metric(format!(
            "expert {i}: embedding dimension {} differs from {dim}",
            embeddings[i].dim()
        )));
    }
    let norms: Vec<S> = embeddings.iter().map(|e| e.norm_squared()).collect();
    if let Some(i) = norms.iter().position(|&n| !(n > S::zero())) {
        return Err(Error::Metric(format!("expert {i}: zero-norm embedding")));
    }

    let row = |i: usize| -> Vec<S> {
        (0..n)
            .map(|j| {
                if i == j {
                    S::one()
                } else {
                    let c = embeddings[i].dot(embeddings[j]) / (norms[i] * norms[j]).sqrt();
                    c.max(-S::one()).min(S::one())
                }
            })
            .collect()
    };
    let rows: Vec<Vec<S>> = if n >= PARALLEL_ROWS {
        (0..n).into_par_iter().map(row).collect()
    } else {
        (0..n).map(row).collect()
    };
    SimilarityMatrix::from_rows(rows)
}

/// Returns `(mean_upper, 1 - mean_upper)` over the strictly upper triangle.
pub fn orthogonality_score<S: Scalar>(matrix: &SimilarityMatrix<S>) -> Result<(S, S)> {
    let n = matrix.n();
    if n < 2 {
        return Err(Error::Metric(
            "orthogonality needs at least 2 experts".into(),
        ));
    }
    let mut sum = S::zero();
    for i in 0..n {
        for j in i + 1..n {
            sum = sum + matrix.get(i, j);
        }
    }
    let pairs = S::of((n * (n - 1) / 2) as f64);
    let mean = sum / pairs;
    Ok((mean, S::one() - mean))
}

/// Trailing mean over at most `window` values; early entries average the
/// available prefix.
pub fn rolling_average<S: Scalar>(series: &[S], window: usize) -> Result<Vec<S>> {
    if window == 0 {
        return Err(Error::config("rolling window must be at least 1"));
    }
    Ok((0..series.len())
        .map(|t| {
            let lo = (t + 1).saturating_sub(window);
            let slice = &series[lo..=t];
            slice.iter().fold(S::zero(), |a, &v| a + v) / S::of(slice.len() as f64)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrthogonalityTrace<S> {
    pub raw: Vec<S>,
    pub smoothed: Vec<S>,
    pub window: usize,
}

impl<S: Scalar> OrthogonalityTrace<S> {
    pub fn new(raw: Vec<S>, window: usize) -> Result<Self> {
        let smoothed = rolling_average(&raw, window)?;
        Ok(Self {
            raw,
            smoothed,
            window,
        })
    }

    /// `step,score,smoothed` with one row per step.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,score,smoothed\n");
        for (t, (r, s)) in self.raw.iter().zip(&self.smoothed).enumerate() {
            let _ = writeln!(out, "{t},{},{}", r.as_f64(), s.as_f64());
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_csv().as_bytes())
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Gray level for a similarity: -1 maps to white (255), 1 to black (0).
pub fn heat_level(similarity: f64) -> u8 {
    let v = ((similarity.clamp(-1.0, 1.0) + 1.0) / 2.0).clamp(0.0, 1.0);
    (255.0 * (1.0 - v)).round() as u8
}

pub fn heatmap_svg<S: Scalar>(record: &SimilarityRecord<S>, title: &str) -> String {
    let n = record.matrix.n();
    let cell = if n <= ANNOTATE_MAX_EXPERTS {
        48.0
    } else {
        (512.0 / n as f64).max(2.0)
    };
    let margin = 30.0;
    let side = cell * n as f64;
    let (w, h) = (side + 2.0 * margin, side + 2.0 * margin);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{margin}" y="20" font-family="sans-serif" font-size="12">{}</text>"#,
        escape(&format!(
            "{title} (step {}, O = {:.4})",
            record.step,
            record.orthogonality.as_f64()
        ))
    );
    for i in 0..n {
        for j in 0..n {
            let s = record.matrix.get(i, j).as_f64();
            let g = heat_level(s);
            let x = margin + j as f64 * cell;
            let y = margin + i as f64 * cell;
            let _ = writeln!(
                svg,
                r#"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="rgb({g},{g},{g})"/>"#
            );
            if n <= ANNOTATE_MAX_EXPERTS {
                let ink = if g < 128 { "white" } else { "black" };
                let _ = writeln!(
                    svg,
                    r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle" fill="{ink}">{s:.2}</text>"#,
                    x + cell / 2.0,
                    y + cell / 2.0 + 4.0
                );
            }
        }
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn heatmap_export<S: Scalar>(
    record: &SimilarityRecord<S>,
    title: &str,
    path: &Path,
) -> Result<()> {
    write_file(path, heatmap_svg(record, title).as_bytes())
}

pub(crate) fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}
