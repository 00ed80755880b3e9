//! Gradient descent directly on pixels.
//!
//! Each step proposes `clamp(x − lr·∇L(x))` starting from the configured step
//! size and halves `lr` until the loss does not increase, so accepted losses
//! never go up. When no halving within [`MAX_HALVINGS`] helps, the iterate
//! is kept and the remaining steps are recorded as flat.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::contextual::{spcx, spcx_with_grad, ContextualConfig};
use crate::objective::{l2_grad, l2_loss};
use crate::rng::SeededRng;
use crate::synth::uniform_image;
use crate::{Error, ImageTensor, Result};

pub const MAX_HALVINGS: usize = 40;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Spcx,
    L2,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Spcx => "spcx",
            LossKind::L2 => "l2",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spcx" => Ok(LossKind::Spcx),
            "l2" => Ok(LossKind::L2),
            other => Err(Error::invalid(
                "loss",
                format!("expected `spcx` or `l2`, got `{other}`"),
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizeConfig {
    pub loss: LossKind,
    pub steps: usize,
    pub step_size: f64,
    pub contextual: ContextualConfig,
    /// Seed for [`random_init`].
    pub seed: u64,
    pub log_every: usize,
}

impl OptimizeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::invalid("steps", "must be at least 1"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid("lr", "must be positive and finite"));
        }
        if self.log_every < 1 {
            return Err(Error::invalid("log-every", "must be at least 1"));
        }
        if self.loss == LossKind::Spcx {
            self.contextual.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub loss: f64,
    /// Step size accepted at this step (0 when no decrease was found).
    pub step_size: f64,
}

#[derive(Clone, Debug)]
pub struct OptimizeOutcome {
    pub image: ImageTensor,
    pub trace: Vec<TracePoint>,
}

impl OptimizeOutcome {
    pub fn final_loss(&self) -> f64 {
        self.trace.last().map_or(f64::NAN, |p| p.loss)
    }

    pub fn write_trace_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for p in &self.trace {
            w.serialize(p)?;
        }
        w.flush().map_err(|e| Error::io("<trace>", e))?;
        Ok(())
    }
}

/// Uniform `[0, 1)` start image drawn from `seed`.
pub fn random_init(shape: (usize, usize, usize), seed: u64) -> ImageTensor {
    uniform_image(
        shape.0,
        shape.1,
        shape.2,
        0.0,
        1.0,
        &mut SeededRng::new(seed),
    )
}

fn loss_value(x: &ImageTensor, target: &ImageTensor, oc: &OptimizeConfig) -> Result<f64> {
    match oc.loss {
        LossKind::Spcx => spcx(x, target, &oc.contextual),
        LossKind::L2 => l2_loss(x, std::slice::from_ref(target)),
    }
}

fn loss_and_grad(
    x: &ImageTensor,
    target: &ImageTensor,
    oc: &OptimizeConfig,
) -> Result<(f64, ImageTensor)> {
    match oc.loss {
        LossKind::Spcx => spcx_with_grad(x, target, &oc.contextual),
        LossKind::L2 => Ok((
            l2_loss(x, std::slice::from_ref(target))?,
            l2_grad(x, target)?,
        )),
    }
}

/// Minimizes the configured loss between `x` and `target` starting at `init`.
pub fn optimize_image(
    init: &ImageTensor,
    target: &ImageTensor,
    oc: &OptimizeConfig,
) -> Result<OptimizeOutcome> {
    oc.validate()?;
    init.ensure_same_shape(target)?;
    let mut x = init.clone();
    let (mut f, mut g) = loss_and_grad(&x, target, oc)?;
    if !f.is_finite() {
        return Err(Error::Diverged { step: 0 });
    }
    let mut trace = vec![TracePoint {
        step: 0,
        loss: f,
        step_size: 0.0,
    }];
    let mut stalled = false;
    for step in 1..=oc.steps {
        let mut accepted = 0.0;
        if !stalled {
            let mut lr = oc.step_size;
            for _ in 0..=MAX_HALVINGS {
                let candidate = x.zip_map(&g, |v, d| (v - lr * d).clamp(0.0, 1.0))?;
                let fc = loss_value(&candidate, target, oc)?;
                if fc.is_nan() {
                    return Err(Error::Diverged { step });
                }
                if fc <= f {
                    if candidate != x {
                        x = candidate;
                        (f, g) = loss_and_grad(&x, target, oc)?;
                        accepted = lr;
                    }
                    break;
                }
                lr *= 0.5;
            }
            stalled = accepted == 0.0;
        }
        if step % oc.log_every == 0 || step == oc.steps {
            trace.push(TracePoint {
                step,
                loss: f,
                step_size: accepted,
            });
        }
    }
    Ok(OptimizeOutcome { image: x, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pk::PkMode;
    use crate::synth::texture;

    fn config(loss: LossKind, steps: usize, step_size: f64) -> OptimizeConfig {
        OptimizeConfig {
            loss,
            steps,
            step_size,
            contextual: ContextualConfig {
                rate: 4,
                mode: PkMode::Block,
                ..ContextualConfig::default()
            },
            seed: 0,
            log_every: 1,
        }
    }

    #[test]
    fn starting_at_the_target_changes_nothing() {
        let t = texture(16, 16, 1, 1);
        let out = optimize_image(&t, &t, &config(LossKind::L2, 5, 50.0)).unwrap();
        assert_eq!(out.image, t);
        assert!(out.trace.iter().all(|p| p.loss == 0.0));

        let out = optimize_image(&t, &t, &config(LossKind::Spcx, 5, 0.01)).unwrap();
        let first = out.trace[0].loss;
        assert!(out.trace.iter().all(|p| (p.loss - first).abs() < 1e-9));
    }

    #[test]
    fn l2_descent_converges() {
        let t = texture(16, 16, 1, 2);
        let init = random_init(t.shape(), 3);
        let out = optimize_image(&init, &t, &config(LossKind::L2, 500, 64.0)).unwrap();
        assert!(out.final_loss() < 1e-4, "{}", out.final_loss());
    }

    #[test]
    fn trace_never_increases() {
        let t = texture(16, 16, 1, 4);
        let init = random_init(t.shape(), 5);
        let out = optimize_image(&init, &t, &config(LossKind::Spcx, 30, 0.05)).unwrap();
        assert!(out.trace.windows(2).all(|w| w[1].loss <= w[0].loss));
        assert!(out.final_loss() < out.trace[0].loss);
        assert!(out.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn runs_are_deterministic() {
        let t = texture(16, 16, 1, 6);
        let init = random_init(t.shape(), 7);
        let a = optimize_image(&init, &t, &config(LossKind::Spcx, 10, 0.05)).unwrap();
        let b = optimize_image(&init, &t, &config(LossKind::Spcx, 10, 0.05)).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn logging_interval_and_csv() {
        let t = texture(8, 8, 1, 8);
        let init = random_init(t.shape(), 9);
        let mut oc = config(LossKind::L2, 10, 10.0);
        oc.log_every = 4;
        let out = optimize_image(&init, &t, &oc).unwrap();
        let steps: Vec<usize> = out.trace.iter().map(|p| p.step).collect();
        assert_eq!(steps, vec![0, 4, 8, 10]);
        let mut buf = Vec::new();
        out.write_trace_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,loss,step_size\n"));
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn invalid_configs() {
        let t = texture(8, 8, 1, 8);
        assert!(optimize_image(&t, &t, &config(LossKind::L2, 0, 1.0)).is_err());
        assert!(optimize_image(&t, &t, &config(LossKind::L2, 1, 0.0)).is_err());
        assert!(optimize_image(&t, &texture(8, 4, 1, 1), &config(LossKind::L2, 1, 1.0)).is_err());
    }
}
