//! Hierarchical pseudo connections on a toy style-modulated generator.
//!
//! [`ToyGenerator`] maps a latent vector to a `base×base` feature map and then
//! runs `g` stages of `upsample ×2 → 3×3 conv → modulation → leaky ReLU`,
//! followed by a `1×1` conv and a sigmoid to RGB. Stage `k` is modulated by
//! group `k` of a [`ModulationParams`], which holds `2^k` `(α, β)` pairs.
//!
//! Every branch alive before stage `k` is split in two: branch `b` continues
//! as children `2b` and `2b + 1`, modulated by pairs `2b` and `2b + 1` of
//! group `k`. The convolution of a parent is computed once and shared by both
//! children, so one forward pass yields `2^g` pseudo results. Leaf `ℓ` uses
//! pair `ℓ >> (g − k)` at stage `k`.

use crate::rng::SeededRng;
use crate::{Error, ImageTensor, Result};

const LEAK: f64 = 0.2;

/// A feature map, `H×W×C`, channels innermost.
#[derive(Clone, Debug, PartialEq)]
struct Features {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
struct Conv {
    cin: usize,
    cout: usize,
    k: usize,
    // [cout][ky][kx][cin]
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Conv {
    fn seeded(cin: usize, cout: usize, k: usize, rng: &mut SeededRng) -> Self {
        let bound = (6.0 / (cin * k * k) as f64).sqrt();
        Self {
            cin,
            cout,
            k,
            weights: rng
                .uniform(-bound, bound, cout * k * k * cin)
                .expect("bound > 0"),
            bias: rng.uniform(-0.1, 0.1, cout).expect("valid range"),
        }
    }

    /// Zero-padded "same" convolution.
    fn apply(&self, f: &Features) -> Features {
        debug_assert_eq!(f.c, self.cin);
        let pad = (self.k / 2) as isize;
        let mut out = vec![0.0; f.h * f.w * self.cout];
        for y in 0..f.h {
            for x in 0..f.w {
                let o = &mut out[(y * f.w + x) * self.cout..(y * f.w + x + 1) * self.cout];
                o.copy_from_slice(&self.bias);
                for ky in 0..self.k {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= f.h as isize {
                        continue;
                    }
                    for kx in 0..self.k {
                        let sx = x as isize + kx as isize - pad;
                        if sx < 0 || sx >= f.w as isize {
                            continue;
                        }
                        let base = (sy as usize * f.w + sx as usize) * f.c;
                        let src = &f.data[base..base + f.c];
                        for (co, acc) in o.iter_mut().enumerate() {
                            let wbase = ((co * self.k + ky) * self.k + kx) * self.cin;
                            let w = &self.weights[wbase..wbase + self.cin];
                            *acc += w.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
        }
        Features {
            h: f.h,
            w: f.w,
            c: self.cout,
            data: out,
        }
    }
}

fn upsample2(f: &Features) -> Features {
    let (h, w) = (f.h * 2, f.w * 2);
    let mut data = Vec::with_capacity(h * w * f.c);
    for y in 0..h {
        for x in 0..w {
            let s = ((y / 2) * f.w + x / 2) * f.c;
            data.extend_from_slice(&f.data[s..s + f.c]);
        }
    }
    Features { h, w, c: f.c, data }
}

fn leaky_relu(v: f64) -> f64 {
    if v >= 0.0 {
        v
    } else {
        LEAK * v
    }
}

/// One `(α, β)` pair: per-channel scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct Modulation {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl Modulation {
    pub fn identity(channels: usize) -> Self {
        Self {
            scale: vec![1.0; channels],
            shift: vec![0.0; channels],
        }
    }

    /// `α ⊙ F + β`, followed by the stage nonlinearity.
    fn apply_activated(&self, f: &Features) -> Features {
        let data = f
            .data
            .chunks_exact(f.c)
            .flat_map(|px| {
                px.iter()
                    .zip(&self.scale)
                    .zip(&self.shift)
                    .map(|((v, a), b)| leaky_relu(a * v + b))
            })
            .collect();
        Features { data, ..*f }
    }
}

/// Grouped modulation pairs: group `k` (1-based) holds `2^k` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct ModulationParams {
    groups: Vec<Vec<Modulation>>,
}

impl ModulationParams {
    pub fn new(groups: Vec<Vec<Modulation>>) -> Result<Self> {
        for (i, g) in groups.iter().enumerate() {
            if g.len() != 1 << (i + 1) {
                return Err(Error::Shape(format!(
                    "group {} must hold {} pairs, got {}",
                    i + 1,
                    1 << (i + 1),
                    g.len()
                )));
            }
        }
        Ok(Self { groups })
    }

    /// `(1, 0)` everywhere for `gen`'s channel schedule.
    pub fn identity(gen: &ToyGenerator) -> Self {
        let groups = (1..=gen.depth())
            .map(|k| vec![Modulation::identity(gen.stage_channels(k)); 1 << k])
            .collect();
        Self { groups }
    }

    pub fn depth(&self) -> usize {
        self.groups.len()
    }

    /// Group `k`, 1-based.
    pub fn group(&self, k: usize) -> &[Modulation] {
        &self.groups[k - 1]
    }

    pub fn group_mut(&mut self, k: usize) -> &mut [Modulation] {
        &mut self.groups[k - 1]
    }

    pub fn pair_count(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    fn check(&self, gen: &ToyGenerator) -> Result<()> {
        if self.depth() != gen.depth() {
            return Err(Error::Shape(format!(
                "modulation has {} groups, generator has {} stages",
                self.depth(),
                gen.depth()
            )));
        }
        for k in 1..=gen.depth() {
            let c = gen.stage_channels(k);
            for m in self.group(k) {
                if m.scale.len() != c || m.shift.len() != c {
                    return Err(Error::Shape(format!(
                        "group {k} pairs must have {c} channels"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A small frozen convolutional pyramid with seeded weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyGenerator {
    latent_dim: usize,
    base: usize,
    base_channels: usize,
    // latent → base×base×base_channels
    stem: Vec<f64>,
    stem_bias: Vec<f64>,
    stages: Vec<Conv>,
    to_rgb: Conv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorSpec {
    pub depth: usize,
    pub latent_dim: usize,
    pub base: usize,
    pub base_channels: usize,
    /// Output channels of stages `1..=depth`.
    pub stage_channels: Vec<usize>,
    pub seed: u64,
}

impl GeneratorSpec {
    /// Depth `g`, 16-dim latent, 4×4 base, 6 channels per stage.
    pub fn toy(depth: usize, seed: u64) -> Self {
        Self {
            depth,
            latent_dim: 16,
            base: 4,
            base_channels: 6,
            stage_channels: vec![6; depth],
            seed,
        }
    }
}

impl ToyGenerator {
    pub fn new(spec: &GeneratorSpec) -> Result<Self> {
        if spec.depth < 1 {
            return Err(Error::invalid("g", "group depth must be at least 1"));
        }
        if spec.stage_channels.len() != spec.depth {
            return Err(Error::Shape(format!(
                "{} stage channel counts for depth {}",
                spec.stage_channels.len(),
                spec.depth
            )));
        }
        if spec.latent_dim == 0 || spec.base == 0 || spec.base_channels == 0 {
            return Err(Error::invalid("spec", "sizes must be positive"));
        }
        let mut rng = SeededRng::new(spec.seed);
        let stem_len = spec.base * spec.base * spec.base_channels;
        let bound = (3.0 / spec.latent_dim as f64).sqrt();
        let stem = rng.uniform(-bound, bound, stem_len * spec.latent_dim)?;
        let stem_bias = rng.uniform(-0.1, 0.1, stem_len)?;
        let mut stages = Vec::with_capacity(spec.depth);
        let mut cin = spec.base_channels;
        for &cout in &spec.stage_channels {
            stages.push(Conv::seeded(cin, cout, 3, &mut rng));
            cin = cout;
        }
        let to_rgb = Conv::seeded(cin, 3, 1, &mut rng);
        Ok(Self {
            latent_dim: spec.latent_dim,
            base: spec.base,
            base_channels: spec.base_channels,
            stem,
            stem_bias,
            stages,
            to_rgb,
        })
    }

    pub fn depth(&self) -> usize {
        self.stages.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// Output channels of stage `k` (1-based).
    pub fn stage_channels(&self, k: usize) -> usize {
        self.stages[k - 1].cout
    }

    pub fn output_size(&self) -> usize {
        self.base << self.depth()
    }

    fn stem(&self, latent: &[f64]) -> Result<Features> {
        if latent.len() != self.latent_dim {
            return Err(Error::Shape(format!(
                "latent has length {}, generator expects {}",
                latent.len(),
                self.latent_dim
            )));
        }
        let data = self
            .stem
            .chunks_exact(self.latent_dim)
            .zip(&self.stem_bias)
            .map(|(row, b)| leaky_relu(row.iter().zip(latent).map(|(w, z)| w * z).sum::<f64>() + b))
            .collect();
        Ok(Features {
            h: self.base,
            w: self.base,
            c: self.base_channels,
            data,
        })
    }

    fn to_image(&self, f: &Features) -> ImageTensor {
        let rgb = self.to_rgb.apply(f);
        ImageTensor::new(
            rgb.h,
            rgb.w,
            3,
            rgb.data.iter().map(|&v| sigmoid(v)).collect(),
        )
        .expect("conv output has image shape")
    }

    /// One branch with an explicit modulation per stage.
    pub fn forward_single(&self, latent: &[f64], mods: &[&Modulation]) -> Result<ImageTensor> {
        if mods.len() != self.depth() {
            return Err(Error::Shape(format!(
                "{} modulations for {} stages",
                mods.len(),
                self.depth()
            )));
        }
        let mut f = self.stem(latent)?;
        for (stage, m) in self.stages.iter().zip(mods) {
            f = m.apply_activated(&stage.apply(&upsample2(&f)));
        }
        Ok(self.to_image(&f))
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// The `2^g` outputs of one forward pass with their mean and variance.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoResultSet {
    outputs: Vec<ImageTensor>,
    mean_image: ImageTensor,
    uncertainty: ImageTensor,
}

impl PseudoResultSet {
    pub fn from_outputs(outputs: Vec<ImageTensor>) -> Result<Self> {
        let (mean_image, uncertainty) = average_and_uncertainty(&outputs)?;
        Ok(Self {
            outputs,
            mean_image,
            uncertainty,
        })
    }

    pub fn outputs(&self) -> &[ImageTensor] {
        &self.outputs
    }

    pub fn mean_image(&self) -> &ImageTensor {
        &self.mean_image
    }

    /// Per-pixel, per-channel population variance over the outputs.
    pub fn uncertainty(&self) -> &ImageTensor {
        &self.uncertainty
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }
}

/// Per-pixel mean and population variance over a set of equally shaped images.
pub fn average_and_uncertainty(outputs: &[ImageTensor]) -> Result<(ImageTensor, ImageTensor)> {
    let first = outputs
        .first()
        .ok_or_else(|| Error::invalid("outputs", "need at least one image"))?;
    for o in outputs {
        first.ensure_same_shape(o)?;
    }
    let n = outputs.len() as f64;
    // shifted by the first output so identical inputs give exactly zero spread
    let mut offset = vec![0.0; first.len()];
    for o in outputs {
        offset
            .iter_mut()
            .zip(o.data().iter().zip(first.data()))
            .for_each(|(m, (v, f))| *m += v - f);
    }
    offset.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; first.len()];
    for o in outputs {
        var.iter_mut()
            .zip(o.data().iter().zip(first.data()).zip(&offset))
            .for_each(|(s, ((v, f), m))| {
                let d = (v - f) - m;
                *s += d * d;
            });
    }
    var.iter_mut().for_each(|s| *s /= n);
    let mean = first
        .data()
        .iter()
        .zip(&offset)
        .map(|(f, m)| f + m)
        .collect();
    let (h, w, c) = first.shape();
    Ok((
        ImageTensor::new(h, w, c, mean)?,
        ImageTensor::new(h, w, c, var)?,
    ))
}

/// Runs the branching forward pass and returns all `2^g` leaves.
pub fn hpc_forward(
    gen: &ToyGenerator,
    latent: &[f64],
    mods: &ModulationParams,
) -> Result<PseudoResultSet> {
    mods.check(gen)?;
    let mut branches = vec![gen.stem(latent)?];
    for (k, stage) in gen.stages.iter().enumerate() {
        let pairs = mods.group(k + 1);
        let mut next = Vec::with_capacity(branches.len() * 2);
        for (b, parent) in branches.iter().enumerate() {
            // real and pseudo layers share the convolution
            let conv = stage.apply(&upsample2(parent));
            next.push(pairs[2 * b].apply_activated(&conv));
            next.push(pairs[2 * b + 1].apply_activated(&conv));
        }
        branches = next;
    }
    let outputs = branches.iter().map(|f| gen.to_image(f)).collect();
    PseudoResultSet::from_outputs(outputs)
}

/// Seeded linear head from a feature vector `M` to all modulation pairs.
///
/// `α = 1 + tanh(W_α·M + b_α)/2` and `β = W_β·M + b_β`, with zero biases.
#[derive(Clone, Debug, PartialEq)]
pub struct ModulationHead {
    feature_len: usize,
    // per group: (per pair: rows for α then β, each channels×feature_len)
    groups: Vec<(usize, Vec<f64>)>,
    bias_scale: Vec<f64>,
    bias_shift: Vec<f64>,
}

impl ModulationHead {
    pub fn new(gen: &ToyGenerator, feature_len: usize, seed: u64) -> Result<Self> {
        if feature_len == 0 {
            return Err(Error::invalid("feature_len", "must be positive"));
        }
        let mut rng = SeededRng::new(seed);
        let bound = (1.0 / feature_len as f64).sqrt();
        let mut groups = Vec::new();
        let mut outputs_per_kind = 0;
        for k in 1..=gen.depth() {
            let c = gen.stage_channels(k);
            let rows = (1 << k) * 2 * c;
            outputs_per_kind += (1 << k) * c;
            groups.push((c, rng.uniform(-bound, bound, rows * feature_len)?));
        }
        Ok(Self {
            feature_len,
            groups,
            bias_scale: vec![0.0; outputs_per_kind],
            bias_shift: vec![0.0; outputs_per_kind],
        })
    }

    pub fn feature_len(&self) -> usize {
        self.feature_len
    }

    pub fn encode(&self, feature: &[f64]) -> Result<ModulationParams> {
        if feature.len() != self.feature_len {
            return Err(Error::Shape(format!(
                "feature has length {}, head expects {}",
                feature.len(),
                self.feature_len
            )));
        }
        let dot = |row: &[f64]| row.iter().zip(feature).map(|(w, m)| w * m).sum::<f64>();
        let mut offset = 0;
        let mut groups = Vec::with_capacity(self.groups.len());
        for (k, (c, w)) in self.groups.iter().enumerate() {
            let c = *c;
            let mut rows = w.chunks_exact(self.feature_len);
            let pairs = (0..1usize << (k + 1))
                .map(|_| {
                    let scale = (0..c)
                        .map(|ch| {
                            let pre = dot(rows.next().unwrap()) + self.bias_scale[offset + ch];
                            1.0 + pre.tanh() / 2.0
                        })
                        .collect();
                    let shift = (0..c)
                        .map(|ch| dot(rows.next().unwrap()) + self.bias_shift[offset + ch])
                        .collect();
                    offset += c;
                    Modulation { scale, shift }
                })
                .collect();
            groups.push(pairs);
        }
        ModulationParams::new(groups)
    }
}

/// Encodes `feature` with a fresh head seeded by `seed`.
pub fn encode_mods(gen: &ToyGenerator, feature: &[f64], seed: u64) -> Result<ModulationParams> {
    ModulationHead::new(gen, feature.len(), seed)?.encode(feature)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gen(g: usize) -> ToyGenerator {
        ToyGenerator::new(&GeneratorSpec::toy(g, 11)).unwrap()
    }

    fn latent(gen: &ToyGenerator, seed: u64) -> Vec<f64> {
        SeededRng::new(seed).normal(1.0, gen.latent_dim())
    }

    fn random_mods(gen: &ToyGenerator, seed: u64) -> ModulationParams {
        let m = SeededRng::new(seed).normal(1.0, 8);
        encode_mods(gen, &m, seed + 1).unwrap()
    }

    #[test]
    fn output_count_and_size() {
        for g in 1..=3 {
            let gen = gen(g);
            let set = hpc_forward(&gen, &latent(&gen, 1), &random_mods(&gen, 2)).unwrap();
            assert_eq!(set.len(), 1 << g);
            assert_eq!(set.outputs()[0].shape(), (4 << g, 4 << g, 3));
        }
    }

    #[test]
    fn identity_modulation_collapses() {
        let gen = gen(3);
        let set = hpc_forward(&gen, &latent(&gen, 3), &ModulationParams::identity(&gen)).unwrap();
        assert_eq!(set.len(), 8);
        assert!(set.outputs().windows(2).all(|w| w[0] == w[1]));
        assert!(set.uncertainty().data().iter().all(|&v| v == 0.0));
        assert_eq!(set.mean_image(), &set.outputs()[0]);
    }

    #[test]
    fn level_one_perturbation_isolates_half_the_leaves() {
        let gen = gen(3);
        let z = latent(&gen, 4);
        let mods = random_mods(&gen, 5);
        let base = hpc_forward(&gen, &z, &mods).unwrap();
        let mut bumped = mods.clone();
        bumped.group_mut(1)[0].scale[0] += 0.25;
        let after = hpc_forward(&gen, &z, &bumped).unwrap();
        for (i, (a, b)) in base.outputs().iter().zip(after.outputs()).enumerate() {
            if i < 4 {
                assert_ne!(a, b, "leaf {i} should change");
            } else {
                assert_eq!(a, b, "leaf {i} should be untouched");
            }
        }
    }

    #[test]
    fn shared_forward_equals_naive_passes() {
        let gen = gen(3);
        let z = latent(&gen, 6);
        let mods = random_mods(&gen, 7);
        let set = hpc_forward(&gen, &z, &mods).unwrap();
        for leaf in 0..8 {
            let chain: Vec<&Modulation> =
                (1..=3).map(|k| &mods.group(k)[leaf >> (3 - k)]).collect();
            assert_eq!(gen.forward_single(&z, &chain).unwrap(), set.outputs()[leaf]);
        }
    }

    #[test]
    fn schedule_mismatch_is_rejected() {
        let gen3 = gen(3);
        let mods2 = ModulationParams::identity(&gen(2));
        assert!(hpc_forward(&gen3, &latent(&gen3, 1), &mods2).is_err());
        assert!(hpc_forward(&gen3, &[0.0; 3], &ModulationParams::identity(&gen3)).is_err());
        assert!(ModulationParams::new(vec![vec![Modulation::identity(2); 3]]).is_err());
    }

    #[test]
    fn mean_and_variance_examples() {
        let zero = ImageTensor::zeros(2, 2, 1);
        let one = ImageTensor::filled(2, 2, 1, 1.0);
        let (m, v) = average_and_uncertainty(&[zero.clone(), one]).unwrap();
        assert!(m.data().iter().all(|&x| x == 0.5));
        assert!(v.data().iter().all(|&x| x == 0.25));
        let (m, v) = average_and_uncertainty(&[zero.clone(), zero.clone()]).unwrap();
        assert_eq!(m, zero);
        assert!(v.data().iter().all(|&x| x == 0.0));
        assert!(average_and_uncertainty(&[]).is_err());
    }

    #[test]
    fn encoder_examples() {
        let gen = gen(3);
        let mods = encode_mods(&gen, &[0.0; 5], 3).unwrap();
        assert_eq!(mods.pair_count(), 14);
        for k in 1..=3 {
            for m in mods.group(k) {
                assert!(m.scale.iter().all(|&a| a == 1.0));
                assert!(m.shift.iter().all(|&b| b == 0.0));
            }
        }
        let f = [0.3, -1.2, 2.0, 0.1, 0.7];
        assert_eq!(
            encode_mods(&gen, &f, 9).unwrap(),
            encode_mods(&gen, &f, 9).unwrap()
        );
        let m = encode_mods(&gen, &f, 9).unwrap();
        assert!(m
            .group(3)
            .iter()
            .all(|p| p.scale.iter().all(|&a| (0.5..=1.5).contains(&a))));
        let head = ModulationHead::new(&gen, 5, 9).unwrap();
        assert!(head.encode(&[0.0; 4]).is_err());
    }
}
