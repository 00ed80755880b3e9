//! Contextual distances between sets of vectors.
//!
//! Given two sets `{x_i}` (N vectors) and `{y_j}` (M vectors) of equal length,
//! the pipeline is
//!
//! 1. raw cosine distances `d_ij = 1 − ⟨x_i, y_j⟩ / (‖x_i‖ ‖y_j‖)`,
//! 2. row-min normalization `d̃_ij = d_ij / (min_k d_ik + ε)`,
//! 3. a softmax kernel `A_ij = exp((1 − d̃_ij)/h) / Σ_l exp((1 − d̃_il)/h)`,
//!    which is row-stochastic and close to a delta on the best match,
//! 4. an aggregation to a scalar:
//!    * [`Aggregation::MaxLog`]: `−log((1/N) Σ_i max_j A_ij + ε)`,
//!    * [`Aggregation::SumLog`]: `−(1/N) Σ_i log(Σ_j A_ij + ε)`.
//!
//! Because every kernel row sums to one, the sum form is the constant
//! `−log(1 + ε)` up to rounding; it is kept for completeness and as a check.
//!
//! [`spcx`] applies the pipeline to the [`pk`](crate::pk) sub-images of two
//! images; [`cx`] applies it to per-position feature vectors of a
//! [`FeatureExtractor`].

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::objective::FeatureExtractor;
use crate::pk::{pk_decompose, pk_recompose, PkMode, SubImageCollection};
use crate::{Error, ImageTensor, Result};

pub const DEFAULT_BANDWIDTH: f64 = 0.2;
pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_RATE: usize = 32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregation {
    /// Mean over rows of the best-match kernel weight, then a single log.
    #[default]
    #[serde(rename = "max", alias = "maxlog")]
    MaxLog,
    /// Mean over rows of the log of the row sum.
    #[serde(rename = "sum", alias = "sumlog")]
    SumLog,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::MaxLog => "max",
            Aggregation::SumLog => "sum",
        })
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" | "maxlog" => Ok(Aggregation::MaxLog),
            "sum" | "sumlog" => Ok(Aggregation::SumLog),
            other => Err(Error::invalid(
                "form",
                format!("expected `max` or `sum`, got `{other}`"),
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextualConfig {
    /// Kernel bandwidth `h`.
    pub bandwidth: f64,
    /// Guards both the row-min normalization and the final log.
    pub epsilon: f64,
    pub form: Aggregation,
    pub rate: usize,
    pub mode: PkMode,
    /// Subtract each collection's mean vector before taking cosines.
    pub mean_shift: bool,
}

impl Default for ContextualConfig {
    fn default() -> Self {
        Self {
            bandwidth: DEFAULT_BANDWIDTH,
            epsilon: DEFAULT_EPSILON,
            form: Aggregation::MaxLog,
            rate: DEFAULT_RATE,
            mode: PkMode::Block,
            mean_shift: false,
        }
    }
}

impl ContextualConfig {
    pub fn with_rate(rate: usize) -> Self {
        Self {
            rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::invalid("bandwidth", "must be positive and finite"));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid("epsilon", "must be positive and finite"));
        }
        if self.rate < 1 {
            return Err(Error::invalid("rate", "must be at least 1"));
        }
        Ok(())
    }
}

/// Dense row-major matrix used for distances and kernel weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

pub type DistanceMatrix = Matrix;
pub type KernelMatrix = Matrix;

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(out);
        for i in 0..self.rows {
            w.write_record(self.row(i).iter().map(|v| format!("{v:e}")))?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// A set of equal-length vectors stored contiguously.
#[derive(Clone, Copy, Debug)]
pub struct VectorSet<'a> {
    data: &'a [f64],
    dim: usize,
}

impl<'a> VectorSet<'a> {
    pub fn new(data: &'a [f64], dim: usize) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) || data.is_empty() {
            return Err(Error::Shape(format!(
                "{} values cannot be split into vectors of length {dim}",
                data.len()
            )));
        }
        Ok(Self { data, dim })
    }

    pub fn count(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn vector(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

impl<'a> From<&'a SubImageCollection> for VectorSet<'a> {
    fn from(c: &'a SubImageCollection) -> Self {
        Self {
            data: c.data(),
            dim: c.dim(),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norms(set: VectorSet<'_>, side: &'static str) -> Result<Vec<f64>> {
    (0..set.count())
        .map(|i| {
            let v = set.vector(i);
            let n = dot(v, v).sqrt();
            if n > 0.0 && n.is_finite() {
                Ok(n)
            } else {
                Err(Error::ZeroNorm { side, index: i })
            }
        })
        .collect()
}

fn centered(set: VectorSet<'_>) -> Vec<f64> {
    let n = set.count() as f64;
    let mut mean = vec![0.0; set.dim];
    for i in 0..set.count() {
        for (m, v) in mean.iter_mut().zip(set.vector(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    set.data
        .chunks_exact(set.dim)
        .flat_map(|v| v.iter().zip(&mean).map(|(a, m)| a - m))
        .collect()
}

/// Raw cosine distances between every pair of vectors.
pub fn cosine_distances(x: VectorSet<'_>, y: VectorSet<'_>) -> Result<DistanceMatrix> {
    if x.dim != y.dim {
        return Err(Error::Shape(format!(
            "vector lengths differ: {} vs {}",
            x.dim, y.dim
        )));
    }
    let nx = norms(x, "first")?;
    let ny = norms(y, "second")?;
    let cols = y.count();
    let mut data = vec![0.0; x.count() * cols];
    data.par_chunks_mut(cols).enumerate().for_each(|(i, row)| {
        let xi = x.vector(i);
        for (j, d) in row.iter_mut().enumerate() {
            let cos = dot(xi, y.vector(j)) / (nx[i] * ny[j]);
            // rounding can push |cos| a hair past 1
            *d = (1.0 - cos).clamp(0.0, 2.0);
        }
    });
    Matrix::new(x.count(), cols, data)
}

/// Cosine distances between the sub-images of two collections.
pub fn cosine_distance_matrix(
    x: &SubImageCollection,
    y: &SubImageCollection,
) -> Result<DistanceMatrix> {
    cosine_distances(x.into(), y.into())
}

/// Row-wise `d̃_ij = d_ij / (min_k d_ik + ε)`.
pub fn normalize_distances(d: &DistanceMatrix, epsilon: f64) -> DistanceMatrix {
    let mut data = d.data.clone();
    for row in data.chunks_exact_mut(d.cols) {
        let min = row.iter().copied().fold(f64::INFINITY, f64::min);
        let denom = min + epsilon;
        row.iter_mut().for_each(|v| *v /= denom);
    }
    Matrix { data, ..*d }
}

/// Row-stochastic softmax kernel `A_ij ∝ exp((1 − d̃_ij)/h)`.
pub fn kernel(normalized: &DistanceMatrix, bandwidth: f64) -> KernelMatrix {
    let mut data = normalized.data.clone();
    for row in data.chunks_exact_mut(normalized.cols) {
        row.iter_mut().for_each(|v| *v = (1.0 - *v) / bandwidth);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Matrix {
        data,
        ..*normalized
    }
}

/// Index and value of the row maximum; ties go to the lowest index.
fn row_argmax(row: &[f64]) -> (usize, f64) {
    let mut best = (0, row[0]);
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (j, v);
        }
    }
    best
}

fn row_argmin(row: &[f64]) -> (usize, f64) {
    let mut best = (0, row[0]);
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v < best.1 {
            best = (j, v);
        }
    }
    best
}

/// Reduces a kernel matrix to the scalar distance.
pub fn aggregate(a: &KernelMatrix, form: Aggregation, epsilon: f64) -> f64 {
    let n = a.rows as f64;
    match form {
        Aggregation::MaxLog => {
            let mean_max = (0..a.rows).map(|i| row_argmax(a.row(i)).1).sum::<f64>() / n;
            -(mean_max + epsilon).ln()
        }
        Aggregation::SumLog => {
            -(0..a.rows)
                .map(|i| (a.row(i).iter().sum::<f64>() + epsilon).ln())
                .sum::<f64>()
                / n
        }
    }
}

/// Every intermediate of one contextual-distance evaluation.
#[derive(Clone, Debug)]
pub struct ContextualEvaluation {
    pub raw: DistanceMatrix,
    pub normalized: DistanceMatrix,
    pub kernel: KernelMatrix,
    pub value: f64,
}

/// Runs the full pipeline on two vector sets.
pub fn evaluate_sets(
    x: VectorSet<'_>,
    y: VectorSet<'_>,
    cfg: &ContextualConfig,
) -> Result<ContextualEvaluation> {
    cfg.validate()?;
    let raw = if cfg.mean_shift {
        let (cx, cy) = (centered(x), centered(y));
        cosine_distances(VectorSet::new(&cx, x.dim)?, VectorSet::new(&cy, y.dim)?)?
    } else {
        cosine_distances(x, y)?
    };
    let normalized = normalize_distances(&raw, cfg.epsilon);
    let kernel = kernel(&normalized, cfg.bandwidth);
    let value = aggregate(&kernel, cfg.form, cfg.epsilon);
    Ok(ContextualEvaluation {
        raw,
        normalized,
        kernel,
        value,
    })
}

/// Contextual distance between two already decomposed collections.
pub fn spcx_collections(
    x: &SubImageCollection,
    y: &SubImageCollection,
    cfg: &ContextualConfig,
) -> Result<f64> {
    Ok(evaluate_sets(x.into(), y.into(), cfg)?.value)
}

fn decompose_pair(
    x: &ImageTensor,
    y: &ImageTensor,
    cfg: &ContextualConfig,
) -> Result<(SubImageCollection, SubImageCollection)> {
    x.ensure_same_shape(y)?;
    cfg.validate()?;
    Ok((
        pk_decompose(x, cfg.rate, cfg.mode)?,
        pk_decompose(y, cfg.rate, cfg.mode)?,
    ))
}

/// Full evaluation of the sub-image contextual distance, intermediates included.
pub fn spcx_evaluate(
    x: &ImageTensor,
    y: &ImageTensor,
    cfg: &ContextualConfig,
) -> Result<ContextualEvaluation> {
    let (px, py) = decompose_pair(x, y, cfg)?;
    evaluate_sets((&px).into(), (&py).into(), cfg)
}

/// Contextual distance between the sub-image collections of `x` and `y`.
pub fn spcx(x: &ImageTensor, y: &ImageTensor, cfg: &ContextualConfig) -> Result<f64> {
    Ok(spcx_evaluate(x, y, cfg)?.value)
}

/// Gradient of [`spcx`] with respect to `x`.
pub fn spcx_grad(x: &ImageTensor, y: &ImageTensor, cfg: &ContextualConfig) -> Result<ImageTensor> {
    Ok(spcx_with_grad(x, y, cfg)?.1)
}

/// Value and gradient of [`spcx`] with respect to `x` in one pass.
///
/// At ties the derivative of the selected branch is returned: the lowest
/// column index for the row maximum of the kernel and for the row minimum
/// used in normalization.
pub fn spcx_with_grad(
    x: &ImageTensor,
    y: &ImageTensor,
    cfg: &ContextualConfig,
) -> Result<(f64, ImageTensor)> {
    let (px, py) = decompose_pair(x, y, cfg)?;
    let (value, gx) = sets_with_grad((&px).into(), (&py).into(), cfg)?;
    let grad = SubImageCollection::from_parts(px.mode(), px.rate(), px.source_shape(), gx)?;
    Ok((value, pk_recompose(&grad)?))
}

/// Value and gradient with respect to the vectors of `x`, flattened like `x`.
pub fn sets_with_grad(
    x: VectorSet<'_>,
    y: VectorSet<'_>,
    cfg: &ContextualConfig,
) -> Result<(f64, Vec<f64>)> {
    cfg.validate()?;
    let (xs, ys) = if cfg.mean_shift {
        (centered(x), centered(y))
    } else {
        (x.data.to_vec(), y.data.to_vec())
    };
    let xv = VectorSet::new(&xs, x.dim)?;
    let yv = VectorSet::new(&ys, y.dim)?;
    let raw = cosine_distances(xv, yv)?;
    let normalized = normalize_distances(&raw, cfg.epsilon);
    let a = kernel(&normalized, cfg.bandwidth);
    let value = aggregate(&a, cfg.form, cfg.epsilon);

    let (n, m) = (a.rows, a.cols);
    let nf = n as f64;

    // dL/dA
    let mut g_a = vec![0.0; n * m];
    match cfg.form {
        Aggregation::MaxLog => {
            let mean_max = (0..n).map(|i| row_argmax(a.row(i)).1).sum::<f64>() / nf;
            let coef = -1.0 / (nf * (mean_max + cfg.epsilon));
            for i in 0..n {
                let (j, _) = row_argmax(a.row(i));
                g_a[i * m + j] = coef;
            }
        }
        Aggregation::SumLog => {
            for i in 0..n {
                let s: f64 = a.row(i).iter().sum();
                let coef = -1.0 / (nf * (s + cfg.epsilon));
                g_a[i * m..(i + 1) * m].fill(coef);
            }
        }
    }

    // softmax, then z = (1 - d̃)/h, then d̃ = d / (min + ε)
    let mut g_d = vec![0.0; n * m];
    for i in 0..n {
        let ar = a.row(i);
        let ga = &g_a[i * m..(i + 1) * m];
        let inner: f64 = ar.iter().zip(ga).map(|(p, g)| p * g).sum();
        let d_row = raw.row(i);
        let (kmin, dmin) = row_argmin(d_row);
        let denom = dmin + cfg.epsilon;
        let gd = &mut g_d[i * m..(i + 1) * m];
        let mut g_min = 0.0;
        for j in 0..m {
            let g_z = ar[j] * (ga[j] - inner);
            let g_dn = -g_z / cfg.bandwidth;
            gd[j] = g_dn / denom;
            g_min -= g_dn * d_row[j] / (denom * denom);
        }
        gd[kmin] += g_min;
    }

    // cosine distance
    let nx = norms(xv, "first")?;
    let ny = norms(yv, "second")?;
    let dim = x.dim;
    let mut gx = vec![0.0; xs.len()];
    gx.par_chunks_mut(dim).enumerate().for_each(|(i, gi)| {
        let xi = xv.vector(i);
        let inv_x = 1.0 / nx[i];
        for j in 0..m {
            let w = g_d[i * m + j];
            if w == 0.0 {
                continue;
            }
            let yj = yv.vector(j);
            let inv_xy = inv_x / ny[j];
            let cos = dot(xi, yj) * inv_xy;
            let inv_x2 = inv_x * inv_x;
            // ∂d/∂x = −(y/(‖x‖‖y‖) − cos·x/‖x‖²)
            for k in 0..dim {
                gi[k] -= w * (yj[k] * inv_xy - cos * xi[k] * inv_x2);
            }
        }
    });

    if cfg.mean_shift {
        let mut mean = vec![0.0; dim];
        for gi in gx.chunks_exact(dim) {
            mean.iter_mut().zip(gi).for_each(|(m, g)| *m += g);
        }
        mean.iter_mut().for_each(|m| *m /= nf);
        for gi in gx.chunks_exact_mut(dim) {
            gi.iter_mut().zip(&mean).for_each(|(g, m)| *g -= m);
        }
    }
    Ok((value, gx))
}

/// Contextual distance over per-position feature vectors.
///
/// Each feature map of `extractor` contributes one set of `H·W` vectors of
/// length `C`; the max-log distance of each map is averaged over maps.
pub fn cx(
    x: &ImageTensor,
    y: &ImageTensor,
    extractor: &dyn FeatureExtractor,
    bandwidth: f64,
) -> Result<f64> {
    x.ensure_same_shape(y)?;
    let fx = extractor.extract(x)?;
    let fy = extractor.extract(y)?;
    if fx.len() != fy.len() || fx.is_empty() {
        return Err(Error::Shape(
            "extractor returned mismatched feature maps".into(),
        ));
    }
    let cfg = ContextualConfig {
        bandwidth,
        rate: 1,
        ..ContextualConfig::default()
    };
    let mut total = 0.0;
    for (a, b) in fx.iter().zip(&fy) {
        a.ensure_same_shape(b)?;
        let sa = VectorSet::new(a.data(), a.channels())?;
        let sb = VectorSet::new(b.data(), b.channels())?;
        total += evaluate_sets(sa, sb, &cfg)?.value;
    }
    Ok(total / fx.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::IdentityExtractor;
    use crate::pk::permute_subimages;
    use crate::rng::SeededRng;
    use crate::synth::{texture, uniform_image};
    use approx::assert_abs_diff_eq;

    fn set(data: &[f64], dim: usize) -> VectorSet<'_> {
        VectorSet::new(data, dim).unwrap()
    }

    #[test]
    fn orthonormal_sets_give_identity_like_distances() {
        let e = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let d = cosine_distances(set(&e, 3), set(&e, 3)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(d.get(i, j), if i == j { 0.0 } else { 1.0 });
            }
        }
    }

    #[test]
    fn cosine_extremes() {
        let d = cosine_distances(set(&[1.0, 0.0], 2), set(&[0.0, 1.0, -1.0, 0.0], 2)).unwrap();
        assert_eq!(d.row(0), &[1.0, 2.0]);
    }

    #[test]
    fn cosine_matches_pairwise_oracle() {
        let mut rng = SeededRng::new(3);
        let x = rng.uniform(-1.0, 1.0, 12).unwrap();
        let y = rng.uniform(-1.0, 1.0, 12).unwrap();
        let d = cosine_distances(set(&x, 4), set(&y, 4)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let (a, b) = (&x[i * 4..i * 4 + 4], &y[j * 4..j * 4 + 4]);
                let mut ab = 0.0;
                let mut aa = 0.0;
                let mut bb = 0.0;
                for k in 0..4 {
                    ab += a[k] * b[k];
                    aa += a[k] * a[k];
                    bb += b[k] * b[k];
                }
                let expected = 1.0 - ab / (aa.sqrt() * bb.sqrt());
                assert_abs_diff_eq!(d.get(i, j), expected, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn zero_norm_is_reported_with_index() {
        let err = cosine_distances(set(&[1.0, 1.0, 0.0, 0.0], 2), set(&[1.0, 0.0], 2)).unwrap_err();
        assert!(matches!(
            err,
            Error::ZeroNorm {
                side: "first",
                index: 1
            }
        ));
        let err = cosine_distances(set(&[1.0, 1.0], 2), set(&[1.0, 0.0, 0.0, 0.0], 2)).unwrap_err();
        assert!(matches!(
            err,
            Error::ZeroNorm {
                side: "second",
                index: 1
            }
        ));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        assert!(cosine_distances(set(&[1.0, 1.0], 2), set(&[1.0, 0.0, 1.0], 3)).is_err());
    }

    #[test]
    fn normalization_examples() {
        let eps = 1e-5;
        let d = Matrix::new(3, 3, vec![0.0, 0.5, 1.0, 0.3, 0.3, 0.3, 0.2, 0.4, 0.8]).unwrap();
        let n = normalize_distances(&d, eps);
        assert_eq!(n.get(0, 0), 0.0);
        assert_abs_diff_eq!(n.get(0, 1), 0.5 / eps, epsilon = 1e-6);
        for j in 0..3 {
            assert!(n.get(1, j) < 1.0);
            assert_abs_diff_eq!(n.get(1, j), 0.3 / (0.3 + eps), epsilon = 1e-15);
        }
        // 0.2, 0.4, 0.8 over 0.20001
        assert_abs_diff_eq!(n.get(2, 0), 0.999_950_002_499_875, epsilon = 1e-12);
        assert_abs_diff_eq!(n.get(2, 1), 1.999_900_004_999_75, epsilon = 1e-12);
        assert_abs_diff_eq!(n.get(2, 2), 3.999_800_009_999_5, epsilon = 1e-12);
    }

    #[test]
    fn kernel_two_entry_row() {
        let d = Matrix::new(1, 2, vec![1.0, 2.0]).unwrap();
        let a = kernel(&d, 0.2);
        // softmax([0, -5])
        let e = (-5.0f64).exp();
        assert_abs_diff_eq!(a.get(0, 0), 1.0 / (1.0 + e), epsilon = 1e-12);
        assert_abs_diff_eq!(a.get(0, 0), 0.99331, epsilon = 1e-5);
        assert_abs_diff_eq!(a.get(0, 1), 0.00669, epsilon = 1e-5);
    }

    #[test]
    fn kernel_is_delta_like_on_a_clear_best_match() {
        let d = Matrix::new(1, 4, vec![1.0, 9.0, 12.0, 30.0]).unwrap();
        let a = kernel(&d, 0.2);
        assert!(a.get(0, 0) > 1.0 - 1e-15);
        assert!(a.row(0)[1..].iter().all(|&v| v < 1e-15));
    }

    #[test]
    fn kernel_survives_huge_normalized_distances() {
        let d = Matrix::new(1, 3, vec![0.0, 1e9, 1e12]).unwrap();
        let a = kernel(&d, 0.2);
        assert!(a.data().iter().all(|v| v.is_finite()));
        assert_eq!(a.get(0, 0), 1.0);
    }

    #[test]
    fn self_distance_is_near_zero() {
        let cfg = ContextualConfig::with_rate(4);
        let img = texture(32, 32, 3, 1);
        let v = spcx(&img, &img, &cfg).unwrap();
        assert!(v <= 0.05, "{v}");
        assert_abs_diff_eq!(v, -(1.0f64 + 1e-5).ln(), epsilon = 1e-9);
    }

    #[test]
    fn sum_form_is_constant() {
        let cfg = ContextualConfig {
            form: Aggregation::SumLog,
            ..ContextualConfig::with_rate(2)
        };
        let mut rng = SeededRng::new(5);
        let target = -(1.0f64 + cfg.epsilon).ln();
        for _ in 0..5 {
            let x = uniform_image(8, 8, 1, 0.05, 1.0, &mut rng);
            let y = uniform_image(8, 8, 1, 0.05, 1.0, &mut rng);
            assert_abs_diff_eq!(spcx(&x, &y, &cfg).unwrap(), target, epsilon = 1e-12);
        }
    }

    #[test]
    fn permuting_either_side_leaves_the_distance_unchanged() {
        let cfg = ContextualConfig::with_rate(2);
        let mut rng = SeededRng::new(7);
        let x = uniform_image(8, 8, 3, 0.05, 1.0, &mut rng);
        let y = uniform_image(8, 8, 3, 0.05, 1.0, &mut rng);
        let px = pk_decompose(&x, 2, PkMode::Block).unwrap();
        let py = pk_decompose(&y, 2, PkMode::Block).unwrap();
        let perm: Vec<usize> = (0..16).rev().collect();
        let base = spcx_collections(&px, &py, &cfg).unwrap();
        let a = spcx_collections(&permute_subimages(&px, &perm).unwrap(), &py, &cfg).unwrap();
        let b = spcx_collections(&px, &permute_subimages(&py, &perm).unwrap(), &cfg).unwrap();
        assert_abs_diff_eq!(a, base, epsilon = 1e-12);
        assert_abs_diff_eq!(b, base, epsilon = 1e-12);
    }

    #[test]
    fn scale_invariance() {
        let cfg = ContextualConfig::with_rate(2);
        let mut rng = SeededRng::new(8);
        let x = uniform_image(8, 8, 1, 0.05, 1.0, &mut rng);
        let y = uniform_image(8, 8, 1, 0.05, 1.0, &mut rng);
        let base = spcx_evaluate(&x, &y, &cfg).unwrap();
        let scaled = spcx_evaluate(&x.map(|v| v * 3.7), &y.map(|v| v * 3.7), &cfg).unwrap();
        for (a, b) in base.raw.data().iter().zip(scaled.raw.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(base.value, scaled.value, epsilon = 1e-12);
    }

    #[test]
    fn shape_mismatch_and_bad_config() {
        let x = ImageTensor::filled(4, 4, 1, 0.5);
        let y = ImageTensor::filled(4, 8, 1, 0.5);
        assert!(spcx(&x, &y, &ContextualConfig::with_rate(2)).is_err());
        let bad = ContextualConfig {
            bandwidth: 0.0,
            ..ContextualConfig::with_rate(2)
        };
        assert!(spcx(&x, &x, &bad).is_err());
    }

    /// Straight-line central differences of `spcx` in `x`.
    fn finite_difference(x: &ImageTensor, y: &ImageTensor, cfg: &ContextualConfig) -> Vec<f64> {
        let step = 1e-6;
        let (h, w, c) = x.shape();
        let mut out = Vec::new();
        for yy in 0..h {
            for xx in 0..w {
                for cc in 0..c {
                    let v = x.get(yy, xx, cc);
                    let plus = spcx(&x.with_value(yy, xx, cc, v + step), y, cfg).unwrap();
                    let minus = spcx(&x.with_value(yy, xx, cc, v - step), y, cfg).unwrap();
                    out.push((plus - minus) / (2.0 * step));
                }
            }
        }
        out
    }

    fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .filter(|(a, n)| a.abs().max(n.abs()) > 1e-8)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()))
            .fold(0.0, f64::max)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (seed, form, mode, mean_shift) in [
            (1, Aggregation::MaxLog, PkMode::Block, false),
            (2, Aggregation::MaxLog, PkMode::Phase, false),
            (3, Aggregation::SumLog, PkMode::Block, false),
            (4, Aggregation::MaxLog, PkMode::Block, true),
        ] {
            let cfg = ContextualConfig {
                form,
                mode,
                mean_shift,
                ..ContextualConfig::with_rate(2)
            };
            let mut rng = SeededRng::new(seed);
            let x = uniform_image(6, 6, 1, 0.05, 1.0, &mut rng);
            let y = uniform_image(6, 6, 1, 0.05, 1.0, &mut rng);
            let g = spcx_grad(&x, &y, &cfg).unwrap();
            let fd = finite_difference(&x, &y, &cfg);
            let err = max_rel_err(g.data(), &fd);
            assert!(err < 1e-4, "seed {seed} {form} {mode}: {err}");
        }
    }

    #[test]
    fn sum_form_gradient_vanishes() {
        let cfg = ContextualConfig {
            form: Aggregation::SumLog,
            ..ContextualConfig::with_rate(2)
        };
        let mut rng = SeededRng::new(12);
        let x = uniform_image(6, 6, 1, 0.05, 1.0, &mut rng);
        let y = uniform_image(6, 6, 1, 0.05, 1.0, &mut rng);
        let g = spcx_grad(&x, &y, &cfg).unwrap();
        assert!(g.data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn gradient_at_a_tie_is_finite_and_follows_the_first_branch() {
        // two identical target sub-images tie for every row maximum
        let cfg = ContextualConfig::with_rate(2);
        let mut rng = SeededRng::new(21);
        let x = uniform_image(2, 4, 1, 0.05, 1.0, &mut rng);
        let tile = rng.uniform(0.05, 1.0, 4).unwrap();
        let y = ImageTensor::from_fn(2, 4, 1, |r, c, _| tile[r * 2 + c % 2]);
        let (_, g) = spcx_with_grad(&x, &y, &cfg).unwrap();
        assert!(g.is_finite());
        let px = pk_decompose(&x, 2, PkMode::Block).unwrap();
        let py = pk_decompose(&y, 2, PkMode::Block).unwrap();
        let ev = evaluate_sets((&px).into(), (&py).into(), &cfg).unwrap();
        assert_eq!(ev.kernel.get(0, 0), ev.kernel.get(0, 1));
        // the tie persists under any perturbation of x, so the branch
        // derivative is also the derivative of the function
        let fd = finite_difference(&x, &y, &cfg);
        assert!(max_rel_err(g.data(), &fd) < 1e-4);
    }

    #[test]
    fn cx_self_distance_and_pixel_equivalence() {
        let x = texture(8, 8, 3, 3);
        let y = texture(8, 8, 3, 4);
        let id = IdentityExtractor;
        assert!(cx(&x, &x, &id, 0.2).unwrap() <= 0.05);
        let cfg = ContextualConfig {
            rate: 1,
            ..ContextualConfig::default()
        };
        assert_eq!(cx(&x, &y, &id, 0.2).unwrap(), spcx(&x, &y, &cfg).unwrap());
    }

    #[test]
    fn cx_is_scale_invariant() {
        let x = texture(8, 8, 3, 5);
        let y = texture(8, 8, 3, 6);
        let a = cx(&x, &y, &IdentityExtractor, 0.2).unwrap();
        let b = cx(
            &x.map(|v| v * 0.4),
            &y.map(|v| v * 0.4),
            &IdentityExtractor,
            0.2,
        )
        .unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn kernel_csv_has_one_line_per_row() {
        let d = Matrix::new(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(text.lines().next().unwrap().split(',').count(), 3);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn kernel_rows_sum_to_one(seed in any::<u64>(), n in 1usize..12, m in 1usize..12, h in 0.01f64..2.0) {
                let mut rng = SeededRng::new(seed);
                let x = rng.uniform(-1.0, 1.0, n * 5).unwrap();
                let y = rng.uniform(-1.0, 1.0, m * 5).unwrap();
                let d = cosine_distances(set(&x, 5), set(&y, 5)).unwrap();
                let a = kernel(&normalize_distances(&d, 1e-5), h);
                for i in 0..n {
                    let s: f64 = a.row(i).iter().sum();
                    prop_assert!((s - 1.0).abs() <= 1e-9);
                    prop_assert!(d.row(i).iter().all(|&v| (0.0..=2.0).contains(&v)));
                }
            }
        }
    }
}
