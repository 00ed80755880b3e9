//! Seeded turbulence degradation: Gaussian blur, elastic warp and noise.
//!
//! `degrade(I) = clamp(warp(blur(I)) + n)` with `n ~ N(0, noise_std²)` per
//! element. The elastic field and the noise come from separate streams of the
//! same seed (streams 0 and 1), so changing one never reshuffles the other.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::rng::SeededRng;
use crate::{Error, ImageTensor, Result};

const FIELD_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1;

/// Which of blur and warp runs first.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageOrder {
    #[default]
    #[serde(rename = "blur-warp")]
    BlurWarp,
    #[serde(rename = "warp-blur")]
    WarpBlur,
}

impl fmt::Display for StageOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageOrder::BlurWarp => "blur-warp",
            StageOrder::WarpBlur => "warp-blur",
        })
    }
}

impl FromStr for StageOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blur-warp" => Ok(StageOrder::BlurWarp),
            "warp-blur" => Ok(StageOrder::WarpBlur),
            other => Err(Error::invalid(
                "order",
                format!("expected `blur-warp` or `warp-blur`, got `{other}`"),
            )),
        }
    }
}

/// Degradation parameters. Serialized with the CLI flag names as keys.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationConfig {
    /// Displacement magnitude in pixels.
    #[serde(rename = "alpha")]
    pub elastic_alpha: f64,
    /// Smoothing std of the displacement field, in pixels.
    #[serde(rename = "sigma")]
    pub elastic_sigma: f64,
    #[serde(rename = "blur-sigma", alias = "blur_sigma")]
    pub blur_sigma: f64,
    #[serde(rename = "noise-std", alias = "noise_std")]
    pub noise_std: f64,
    pub seed: u64,
    #[serde(default)]
    pub order: StageOrder,
}

impl DegradationConfig {
    /// No-op configuration.
    pub fn identity(seed: u64) -> Self {
        Self {
            elastic_alpha: 0.0,
            elastic_sigma: 0.0,
            blur_sigma: 0.0,
            noise_std: 0.0,
            seed,
            order: StageOrder::BlurWarp,
        }
    }

    /// Defaults for a 512-pixel image (`alpha = 34`, `sigma = 4`,
    /// `blur = 3`, `noise = 0.01`); the spatial ones scale linearly with
    /// `size / 512`.
    pub fn scaled_for(size: usize, seed: u64) -> Self {
        let s = size as f64 / 512.0;
        Self {
            elastic_alpha: 34.0 * s,
            elastic_sigma: 4.0 * s,
            blur_sigma: 3.0 * s,
            noise_std: 0.01,
            seed,
            order: StageOrder::BlurWarp,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.elastic_alpha),
            ("sigma", self.elastic_sigma),
            ("blur-sigma", self.blur_sigma),
            ("noise-std", self.noise_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(
                    name,
                    format!("must be finite and ≥ 0, got {v}"),
                ));
            }
        }
        if self.elastic_alpha > 0.0 && self.elastic_sigma <= 0.0 {
            return Err(Error::invalid("sigma", "must be positive when alpha > 0"));
        }
        Ok(())
    }
}

/// Per-pixel `(dx, dy)` offsets in pixels; `dx` is along columns.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    height: usize,
    width: usize,
    dx: Vec<f64>,
    dy: Vec<f64>,
}

impl DisplacementField {
    pub fn new(height: usize, width: usize, dx: Vec<f64>, dy: Vec<f64>) -> Result<Self> {
        if dx.len() != height * width || dy.len() != height * width {
            return Err(Error::Shape(format!(
                "field components must have {} entries",
                height * width
            )));
        }
        Ok(Self {
            height,
            width,
            dx,
            dy,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            dx: vec![0.0; height * width],
            dy: vec![0.0; height * width],
        }
    }

    pub fn constant(height: usize, width: usize, dx: f64, dy: f64) -> Self {
        Self {
            height,
            width,
            dx: vec![dx; height * width],
            dy: vec![dy; height * width],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn dx(&self) -> &[f64] {
        &self.dx
    }

    pub fn dy(&self) -> &[f64] {
        &self.dy
    }

    pub fn is_zero(&self) -> bool {
        self.dx.iter().chain(&self.dy).all(|&v| v == 0.0)
    }

    /// Largest per-pixel displacement length.
    pub fn max_magnitude(&self) -> f64 {
        self.dx
            .iter()
            .zip(&self.dy)
            .map(|(x, y)| x.hypot(*y))
            .fold(0.0, f64::max)
    }

    pub fn mean_magnitude(&self) -> f64 {
        self.dx
            .iter()
            .zip(&self.dy)
            .map(|(x, y)| x.hypot(*y))
            .sum::<f64>()
            / self.dx.len() as f64
    }
}

/// Symmetric (edge-repeating) reflection of `i` into `0..n`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Normalized Gaussian taps over `−⌈3σ⌉..=⌈3σ⌉`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Separable Gaussian filter on a single `h×w` plane with reflected edges.
fn blur_plane(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * plane[y * w + reflect(x as isize + k as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; plane.len()];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * tmp[reflect(y as isize + k as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Separable Gaussian blur; `sigma = 0` returns the input unchanged.
pub fn gaussian_blur(img: &ImageTensor, sigma: f64) -> Result<ImageTensor> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid("blur-sigma", "must be finite and ≥ 0"));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let taps = gaussian_kernel(sigma);
    let (h, w, c) = img.shape();
    let mut out = vec![0.0; img.len()];
    for ch in 0..c {
        let plane = img.channel(ch).into_data();
        let blurred = blur_plane(&plane, h, w, &taps);
        for (i, v) in blurred.into_iter().enumerate() {
            out[i * c + ch] = v;
        }
    }
    ImageTensor::new(h, w, c, out)
}

/// `alpha × smooth(U(−1, 1), sigma)` independently for `dx` then `dy`.
pub fn make_elastic_field(
    height: usize,
    width: usize,
    alpha: f64,
    sigma: f64,
    rng: &mut SeededRng,
) -> Result<DisplacementField> {
    if !(alpha >= 0.0 && sigma >= 0.0) {
        return Err(Error::invalid("alpha", "alpha and sigma must be ≥ 0"));
    }
    if alpha == 0.0 {
        return Ok(DisplacementField::zeros(height, width));
    }
    let taps = (sigma > 0.0).then(|| gaussian_kernel(sigma));
    let mut component = || -> Result<Vec<f64>> {
        let raw = rng.uniform(-1.0, 1.0, height * width)?;
        let smooth = match &taps {
            Some(t) => blur_plane(&raw, height, width, t),
            None => raw,
        };
        Ok(smooth.into_iter().map(|v| alpha * v).collect())
    };
    let dx = component()?;
    let dy = component()?;
    DisplacementField::new(height, width, dx, dy)
}

/// Bilinear resampling at `(x + dx, y + dy)` with coordinates clamped to the
/// image.
pub fn warp(img: &ImageTensor, field: &DisplacementField) -> Result<ImageTensor> {
    let (h, w, c) = img.shape();
    if field.shape() != (h, w) {
        return Err(Error::Shape(format!(
            "field {:?} vs image {:?}",
            field.shape(),
            (h, w)
        )));
    }
    let mut out = Vec::with_capacity(img.len());
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sx = (x as f64 + field.dx[i]).clamp(0.0, (w - 1) as f64);
            let sy = (y as f64 + field.dy[i]).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            for ch in 0..c {
                let top = (1.0 - fx) * img.get(y0, x0, ch) + fx * img.get(y0, x1, ch);
                let bottom = (1.0 - fx) * img.get(y1, x0, ch) + fx * img.get(y1, x1, ch);
                out.push((1.0 - fy) * top + fy * bottom);
            }
        }
    }
    ImageTensor::new(h, w, c, out)
}

/// The full degradation pipeline.
pub fn degrade(img: &ImageTensor, cfg: &DegradationConfig) -> Result<ImageTensor> {
    cfg.validate()?;
    let root = SeededRng::new(cfg.seed);
    let (h, w, _) = img.shape();
    let field = make_elastic_field(
        h,
        w,
        cfg.elastic_alpha,
        cfg.elastic_sigma,
        &mut root.fork(FIELD_STREAM),
    )?;
    let apply_warp = |x: &ImageTensor| -> Result<ImageTensor> {
        if field.is_zero() {
            Ok(x.clone())
        } else {
            warp(x, &field)
        }
    };
    let staged = match cfg.order {
        StageOrder::BlurWarp => apply_warp(&gaussian_blur(img, cfg.blur_sigma)?)?,
        StageOrder::WarpBlur => gaussian_blur(&apply_warp(img)?, cfg.blur_sigma)?,
    };
    if cfg.noise_std == 0.0 {
        return Ok(staged.clamped());
    }
    let noise = root.fork(NOISE_STREAM).normal(cfg.noise_std, staged.len());
    let data = staged
        .data()
        .iter()
        .zip(noise)
        .map(|(v, n)| (v + n).clamp(0.0, 1.0))
        .collect();
    ImageTensor::new(h, w, img.channels(), data)
}
