//! Reference image quality and identity verification metrics.

use std::path::Path;

use serde::Serialize;

use crate::{Error, ImageTensor, Result};

/// PSNR returned for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.ensure_same_shape(b)?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64)
}

/// Peak signal-to-noise ratio for unit-range images, capped at 100 dB.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
}

fn ssim_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let g: Vec<f64> = (-r..=r)
        .map(|t| (-((t * t) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.iter().map(|v| v / s).collect()
}

/// Mean local SSIM over all fully contained 11×11 Gaussian windows,
/// averaged over channels. Unit dynamic range.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (h, w, c) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let g = ssim_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (dy, gy) in g.iter().enumerate() {
                    for (dx, gx) in g.iter().enumerate() {
                        let wgt = gy * gx;
                        let p = a.get(y + dy, x + dx, ch);
                        let q = b.get(y + dy, x + dx, ch);
                        mx += wgt * p;
                        my += wgt * q;
                        xx += wgt * p * p;
                        yy += wgt * q * q;
                        xy += wgt * p * q;
                    }
                }
                let vx = xx - mx * mx;
                let vy = yy - my * my;
                let cov = xy - mx * my;
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
    }
    Ok(total / (c * oh * ow) as f64)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "embedding lengths {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("embedding", "zero vector"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Cosine similarity of two embeddings as a percentage.
pub fn deg(e1: &[f64], e2: &[f64]) -> Result<f64> {
    Ok(100.0 * cosine(e1, e2)?)
}

/// Labelled embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    labels: Vec<String>,
    vectors: Vec<Vec<f64>>,
}

impl EmbeddingSet {
    pub fn new(labels: Vec<String>, vectors: Vec<Vec<f64>>) -> Result<Self> {
        if labels.len() != vectors.len() {
            return Err(Error::Shape(format!(
                "{} labels for {} vectors",
                labels.len(),
                vectors.len()
            )));
        }
        if let Some(dim) = vectors.first().map(Vec::len) {
            for (i, v) in vectors.iter().enumerate() {
                if v.len() != dim {
                    return Err(Error::Shape(format!(
                        "vector {i} has length {}, expected {dim}",
                        v.len()
                    )));
                }
                if norm(v) == 0.0 {
                    return Err(Error::invalid("embedding", format!("vector {i} is zero")));
                }
            }
        }
        Ok(Self { labels, vectors })
    }

    /// Reads rows of `label,v1,...,vD` (no header).
    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)?;
        let mut labels = Vec::new();
        let mut vectors = Vec::new();
        for (line, rec) in reader.records().enumerate() {
            let rec = rec?;
            let mut fields = rec.iter();
            let label = fields
                .next()
                .ok_or_else(|| Error::invalid("embeddings", format!("empty row {}", line + 1)))?;
            let v = fields
                .map(|f| {
                    f.parse::<f64>().map_err(|_| {
                        Error::invalid(
                            "embeddings",
                            format!("row {}: `{f}` is not a number", line + 1),
                        )
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            labels.push(label.to_string());
            vectors.push(v);
        }
        Self::new(labels, vectors)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }
}

/// What to do with a probe whose label never occurs in the gallery.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MissingLabel {
    #[default]
    Error,
    Miss,
}

/// Gallery indices sorted by descending cosine similarity to `probe`,
/// ties broken by lower index.
fn ranked(probe: &[f64], gallery: &EmbeddingSet) -> Result<Vec<usize>> {
    let sims = gallery
        .vectors
        .iter()
        .map(|g| cosine(probe, g))
        .collect::<Result<Vec<_>>>()?;
    let mut idx: Vec<usize> = (0..sims.len()).collect();
    idx.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    Ok(idx)
}

/// Percentage of probes whose label is among the `k` most similar gallery
/// entries.
pub fn topk_accuracy(
    probes: &EmbeddingSet,
    gallery: &EmbeddingSet,
    k: usize,
    missing: MissingLabel,
) -> Result<f64> {
    Ok(topk_accuracies(probes, gallery, &[k], missing)?[0])
}

/// [`topk_accuracy`] for several `k` with one ranking per probe.
pub fn topk_accuracies(
    probes: &EmbeddingSet,
    gallery: &EmbeddingSet,
    ks: &[usize],
    missing: MissingLabel,
) -> Result<Vec<f64>> {
    if ks.contains(&0) {
        return Err(Error::invalid("k", "must be at least 1"));
    }
    if gallery.is_empty() {
        return Err(Error::invalid("gallery", "must not be empty"));
    }
    if probes.is_empty() {
        return Err(Error::invalid("probes", "must not be empty"));
    }
    let mut hits = vec![0usize; ks.len()];
    for (label, v) in probes.labels.iter().zip(&probes.vectors) {
        if !gallery.labels.contains(label) {
            match missing {
                MissingLabel::Error => return Err(Error::MissingLabel(label.clone())),
                MissingLabel::Miss => continue,
            }
        }
        let order = ranked(v, gallery)?;
        let rank = order
            .iter()
            .position(|&g| &gallery.labels[g] == label)
            .expect("label is present");
        for (h, &k) in hits.iter_mut().zip(ks) {
            if rank < k {
                *h += 1;
            }
        }
    }
    Ok(hits
        .into_iter()
        .map(|h| 100.0 * h as f64 / probes.len() as f64)
        .collect())
}

/// Mean [`deg`] between each probe and the first gallery entry carrying its
/// label. Probes without a matching label are skipped.
pub fn mean_deg(probes: &EmbeddingSet, gallery: &EmbeddingSet) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (label, v) in probes.labels.iter().zip(&probes.vectors) {
        if let Some(g) = gallery.labels.iter().position(|l| l == label) {
            total += deg(v, &gallery.vectors[g])?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid(
            "probes",
            "no probe label occurs in the gallery",
        ));
    }
    Ok(total / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct VerificationReport {
    pub top1: f64,
    pub top3: f64,
    pub top5: f64,
    pub mean_deg: f64,
}

pub fn verify(
    probes: &EmbeddingSet,
    gallery: &EmbeddingSet,
    missing: MissingLabel,
) -> Result<VerificationReport> {
    let acc = topk_accuracies(probes, gallery, &[1, 3, 5], missing)?;
    Ok(VerificationReport {
        top1: acc[0],
        top3: acc[1],
        top5: acc[2],
        mean_deg: mean_deg(probes, gallery)?,
    })
}
