//! Reconstruction objective over a set of pseudo results.
//!
//! For a clean target `I` and pseudo results `Î_1..Î_n` (`n = 2^g`):
//!
//! ```text
//! total = (1/n) Σ_i [ spcx(I, Î_i)
//!                     − λ_adv · softplus(D(Î_i))
//!                     + λ_per · ‖φ(I) − φ(Î_i)‖₁
//!                     + λ_id  · ‖η(I) − η(Î_i)‖₁ ]
//! ```
//!
//! `φ` and `η` are [`FeatureExtractor`]s and `D` a frozen
//! [`DiscriminatorStub`]. The norms are L1 sums over all feature values.

use serde::{Deserialize, Serialize};

use crate::contextual::{spcx, ContextualConfig};
use crate::hpc::PseudoResultSet;
use crate::rng::SeededRng;
use crate::{Error, ImageTensor, Result};

/// Maps an image to one or more feature maps (`H'×W'×C'` tensors).
pub trait FeatureExtractor: Send + Sync {
    fn extract(&self, img: &ImageTensor) -> Result<Vec<ImageTensor>>;

    fn name(&self) -> &'static str;
}

/// Pixels as features.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn extract(&self, img: &ImageTensor) -> Result<Vec<ImageTensor>> {
        Ok(vec![img.clone()])
    }

    fn name(&self) -> &'static str {
        "identity"
    }
}

/// Fixed seeded per-pixel linear projections applied after average pooling
/// at several scales.
#[derive(Clone, Debug)]
pub struct RandomProjection {
    in_channels: usize,
    out_channels: usize,
    scales: Vec<usize>,
    // one out×in matrix per scale
    weights: Vec<Vec<f64>>,
}

impl RandomProjection {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        scales: &[usize],
        seed: u64,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::invalid("channels", "must be positive"));
        }
        if scales.is_empty() || scales.contains(&0) {
            return Err(Error::invalid("scales", "need at least one positive scale"));
        }
        let root = SeededRng::new(seed);
        let bound = (3.0 / in_channels as f64).sqrt();
        let weights = (0..scales.len())
            .map(|s| {
                root.fork(s as u64)
                    .uniform(-bound, bound, in_channels * out_channels)
                    .expect("bound is positive")
            })
            .collect();
        Ok(Self {
            in_channels,
            out_channels,
            scales: scales.to_vec(),
            weights,
        })
    }

    /// Two scales (full and half resolution), eight output channels.
    pub fn standard(in_channels: usize, seed: u64) -> Self {
        Self::new(in_channels, 8, &[1, 2], seed).expect("valid defaults")
    }
}

fn average_pool(img: &ImageTensor, s: usize) -> Result<ImageTensor> {
    let (h, w, c) = img.shape();
    if h % s != 0 || w % s != 0 {
        return Err(Error::IndivisibleRate {
            rate: s,
            height: h,
            width: w,
        });
    }
    if s == 1 {
        return Ok(img.clone());
    }
    let norm = (s * s) as f64;
    Ok(ImageTensor::from_fn(h / s, w / s, c, |y, x, ch| {
        let mut acc = 0.0;
        for dy in 0..s {
            for dx in 0..s {
                acc += img.get(y * s + dy, x * s + dx, ch);
            }
        }
        acc / norm
    }))
}

impl FeatureExtractor for RandomProjection {
    fn extract(&self, img: &ImageTensor) -> Result<Vec<ImageTensor>> {
        if img.channels() != self.in_channels {
            return Err(Error::Shape(format!(
                "projection expects {} channels, got {}",
                self.in_channels,
                img.channels()
            )));
        }
        self.scales
            .iter()
            .zip(&self.weights)
            .map(|(&s, w)| {
                let pooled = average_pool(img, s)?;
                let (h, wd, c) = pooled.shape();
                let mut out = Vec::with_capacity(h * wd * self.out_channels);
                for px in pooled.data().chunks_exact(c) {
                    for o in 0..self.out_channels {
                        let row = &w[o * c..(o + 1) * c];
                        out.push(row.iter().zip(px).map(|(a, b)| a * b).sum());
                    }
                }
                ImageTensor::new(h, wd, self.out_channels, out)
            })
            .collect()
    }

    fn name(&self) -> &'static str {
        "projection"
    }
}

/// Weights of the adversarial, perceptual and identity terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub adv: f64,
    pub per: f64,
    pub id: f64,
}

impl Default for LossWeights {
    /// `{1 : 0.1 : 10}` for adversarial, perceptual and identity.
    fn default() -> Self {
        Self {
            adv: 1.0,
            per: 0.1,
            id: 10.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            adv: 0.0,
            per: 0.0,
            id: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda-adv", self.adv),
            ("lambda-per", self.per),
            ("lambda-id", self.id),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, "must be a finite nonnegative number"));
            }
        }
        Ok(())
    }
}

/// A frozen discriminator: a seeded affine score on per-channel mean and
/// standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorStub {
    mean_weights: Vec<f64>,
    std_weights: Vec<f64>,
    bias: f64,
}

impl DiscriminatorStub {
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed);
        let w = rng
            .uniform(-1.0, 1.0, 2 * channels + 1)
            .expect("valid range");
        Self {
            mean_weights: w[..channels].to_vec(),
            std_weights: w[channels..2 * channels].to_vec(),
            bias: w[2 * channels],
        }
    }

    pub fn logit(&self, img: &ImageTensor) -> Result<f64> {
        let c = img.channels();
        if c != self.mean_weights.len() {
            return Err(Error::Shape(format!(
                "discriminator expects {} channels, got {c}",
                self.mean_weights.len()
            )));
        }
        let n = (img.height() * img.width()) as f64;
        let mut score = self.bias;
        for ch in 0..c {
            let vals = img.data().iter().skip(ch).step_by(c);
            let mean = vals.clone().sum::<f64>() / n;
            let var = vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            score += self.mean_weights[ch] * mean + self.std_weights[ch] * var.sqrt();
        }
        Ok(score)
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Mean over targets of the per-element squared error.
pub fn l2_loss(pred: &ImageTensor, targets: &[ImageTensor]) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::invalid("targets", "need at least one target"));
    }
    let mut total = 0.0;
    for t in targets {
        pred.ensure_same_shape(t)?;
        let sq: f64 = pred
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        total += sq / pred.len() as f64;
    }
    Ok(total / targets.len() as f64)
}

/// Gradient of [`l2_loss`] with a single target.
pub fn l2_grad(pred: &ImageTensor, target: &ImageTensor) -> Result<ImageTensor> {
    let n = pred.len() as f64;
    pred.zip_map(target, |a, b| 2.0 * (a - b) / n)
}

/// Mean sub-image contextual distance from the target to every output.
pub fn spcx_multi_loss(
    pred_set: &PseudoResultSet,
    target: &ImageTensor,
    cfg: &ContextualConfig,
) -> Result<f64> {
    let outputs = pred_set.outputs();
    let mut total = 0.0;
    for out in outputs {
        total += spcx(target, out, cfg)?;
    }
    Ok(total / outputs.len() as f64)
}

fn l1_feature_distance(
    extractor: &dyn FeatureExtractor,
    a: &[ImageTensor],
    img: &ImageTensor,
) -> Result<f64> {
    let b = extractor.extract(img)?;
    if a.len() != b.len() {
        return Err(Error::Shape(
            "feature map count changed between images".into(),
        ));
    }
    let mut total = 0.0;
    for (fa, fb) in a.iter().zip(&b) {
        fa.ensure_same_shape(fb)?;
        total += fa
            .data()
            .iter()
            .zip(fb.data())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>();
    }
    Ok(total)
}

/// Unweighted per-term means over the pseudo-result set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub spcx: f64,
    /// Mean of `−softplus(D(Î_i))`.
    pub adv: f64,
    pub per: f64,
    pub id: f64,
}

/// Weighted contributions; `total` is their sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub spcx: f64,
    pub adv: f64,
    pub per: f64,
    pub id: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_terms(terms: &LossTerms, w: &LossWeights) -> Self {
        let spcx = terms.spcx;
        let adv = w.adv * terms.adv;
        let per = w.per * terms.per;
        let id = w.id * terms.id;
        Self {
            spcx,
            adv,
            per,
            id,
            total: spcx + adv + per + id,
        }
    }
}

/// The frozen networks plugged into [`l_rec`].
pub struct ObjectiveModels<'a> {
    pub perceptual: &'a dyn FeatureExtractor,
    pub identity: &'a dyn FeatureExtractor,
    pub discriminator: &'a DiscriminatorStub,
}

/// Unweighted terms of the reconstruction objective.
pub fn loss_terms(
    pred_set: &PseudoResultSet,
    target: &ImageTensor,
    cfg: &ContextualConfig,
    models: &ObjectiveModels<'_>,
) -> Result<LossTerms> {
    let outputs = pred_set.outputs();
    let n = outputs.len();
    if !n.is_power_of_two() {
        return Err(Error::invalid(
            "pred",
            format!("expected 2^g pseudo results, got {n}"),
        ));
    }
    let phi_t = models
        .perceptual
        .extract(target)
        .map_err(|e| e.in_term("per"))?;
    let eta_t = models
        .identity
        .extract(target)
        .map_err(|e| e.in_term("id"))?;
    let mut terms = LossTerms::default();
    for out in outputs {
        out.ensure_same_shape(target)?;
        terms.spcx += spcx(target, out, cfg).map_err(|e| e.in_term("spcx"))?;
        let logit = models
            .discriminator
            .logit(out)
            .map_err(|e| e.in_term("adv"))?;
        terms.adv -= softplus(logit);
        terms.per +=
            l1_feature_distance(models.perceptual, &phi_t, out).map_err(|e| e.in_term("per"))?;
        terms.id +=
            l1_feature_distance(models.identity, &eta_t, out).map_err(|e| e.in_term("id"))?;
    }
    let nf = n as f64;
    terms.spcx /= nf;
    terms.adv /= nf;
    terms.per /= nf;
    terms.id /= nf;
    Ok(terms)
}

/// Weighted reconstruction objective with its per-term breakdown.
pub fn l_rec(
    pred_set: &PseudoResultSet,
    target: &ImageTensor,
    cfg: &ContextualConfig,
    weights: &LossWeights,
    models: &ObjectiveModels<'_>,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let terms = loss_terms(pred_set, target, cfg, models)?;
    Ok(LossBreakdown::from_terms(&terms, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::texture;
    use approx::assert_abs_diff_eq;

    fn set_of(images: Vec<ImageTensor>) -> PseudoResultSet {
        PseudoResultSet::from_outputs(images).unwrap()
    }

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!((w.adv, w.per, w.id), (1.0, 0.1, 10.0));
    }

    #[test]
    fn l2_examples() {
        let t = texture(4, 4, 1, 1);
        assert_eq!(l2_loss(&t, std::slice::from_ref(&t)).unwrap(), 0.0);
        let zero = ImageTensor::zeros(4, 4, 3);
        let one = ImageTensor::filled(4, 4, 3, 1.0);
        assert_eq!(l2_loss(&zero, std::slice::from_ref(&one)).unwrap(), 1.0);
        let half = ImageTensor::filled(4, 4, 3, 0.5);
        assert_eq!(l2_loss(&half, &[zero.clone(), one]).unwrap(), 0.25);
        assert!(l2_loss(&half, &[ImageTensor::zeros(4, 4, 1)]).is_err());
        assert!(l2_loss(&half, &[]).is_err());
    }

    #[test]
    fn softplus_is_stable() {
        assert_abs_diff_eq!(softplus(0.0), 2f64.ln(), epsilon = 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
    }

    #[test]
    fn projection_is_deterministic_with_two_scales() {
        let img = texture(8, 8, 3, 2);
        let p = RandomProjection::standard(3, 5);
        let a = p.extract(&img).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].shape(), (8, 8, 8));
        assert_eq!(a[1].shape(), (4, 4, 8));
        assert_eq!(a, RandomProjection::standard(3, 5).extract(&img).unwrap());
        assert!(p.extract(&texture(8, 8, 1, 2)).is_err());
    }

    #[test]
    fn zero_weights_on_perfect_outputs_leave_self_distance() {
        let t = texture(8, 8, 3, 3);
        let set = set_of(vec![t.clone(); 4]);
        let d = DiscriminatorStub::new(3, 1);
        let models = ObjectiveModels {
            perceptual: &IdentityExtractor,
            identity: &IdentityExtractor,
            discriminator: &d,
        };
        let cfg = ContextualConfig::with_rate(2);
        let b = l_rec(&set, &t, &cfg, &LossWeights::zero(), &models).unwrap();
        assert!(b.total <= 0.05);
        assert_eq!(b.total, spcx(&t, &t, &cfg).unwrap());
        assert_eq!((b.per, b.id, b.adv), (0.0, 0.0, 0.0));
    }

    #[test]
    fn weights_scale_their_terms_only() {
        let t = texture(8, 8, 3, 4);
        let outs: Vec<_> = (0..2).map(|s| texture(8, 8, 3, 10 + s)).collect();
        let set = set_of(outs);
        let d = DiscriminatorStub::new(3, 2);
        let proj = RandomProjection::standard(3, 9);
        let models = ObjectiveModels {
            perceptual: &proj,
            identity: &IdentityExtractor,
            discriminator: &d,
        };
        let cfg = ContextualConfig::with_rate(2);
        let w = LossWeights::default();
        let a = l_rec(&set, &t, &cfg, &w, &models).unwrap();
        let b = l_rec(
            &set,
            &t,
            &cfg,
            &LossWeights {
                id: 2.0 * w.id,
                ..w
            },
            &models,
        )
        .unwrap();
        assert_eq!(b.id, 2.0 * a.id);
        assert_eq!((b.spcx, b.adv, b.per), (a.spcx, a.adv, a.per));
        assert_abs_diff_eq!(a.total, a.spcx + a.adv + a.per + a.id, epsilon = 1e-12);
    }

    #[test]
    fn multi_loss_is_a_mean_and_order_free() {
        let t = texture(8, 8, 1, 5);
        let outs: Vec<_> = (0..4).map(|s| texture(8, 8, 1, 20 + s)).collect();
        let cfg = ContextualConfig::with_rate(2);
        let a = spcx_multi_loss(&set_of(outs.clone()), &t, &cfg).unwrap();
        let direct: f64 = outs.iter().map(|o| spcx(&t, o, &cfg).unwrap()).sum::<f64>() / 4.0;
        assert_abs_diff_eq!(a, direct, epsilon = 1e-15);
        let mut rev = outs;
        rev.reverse();
        assert_abs_diff_eq!(
            spcx_multi_loss(&set_of(rev), &t, &cfg).unwrap(),
            a,
            epsilon = 1e-12
        );
        assert!(spcx_multi_loss(&set_of(vec![t.clone(); 2]), &t, &cfg).unwrap() <= 0.05);
    }

    #[test]
    fn errors_name_the_failing_term() {
        let t = texture(8, 8, 3, 6);
        let set = set_of(vec![t.clone()]);
        let d = DiscriminatorStub::new(1, 1);
        let models = ObjectiveModels {
            perceptual: &IdentityExtractor,
            identity: &IdentityExtractor,
            discriminator: &d,
        };
        let err = l_rec(
            &set,
            &t,
            &ContextualConfig::with_rate(2),
            &LossWeights::default(),
            &models,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Term { term: "adv", .. }));
    }

    #[test]
    fn non_power_of_two_sets_are_rejected() {
        let t = texture(8, 8, 3, 7);
        let set = set_of(vec![t.clone(); 3]);
        let d = DiscriminatorStub::new(3, 1);
        let models = ObjectiveModels {
            perceptual: &IdentityExtractor,
            identity: &IdentityExtractor,
            discriminator: &d,
        };
        assert!(l_rec(
            &set,
            &t,
            &ContextualConfig::with_rate(2),
            &LossWeights::default(),
            &models
        )
        .is_err());
    }
}
