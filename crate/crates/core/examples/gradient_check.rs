//! Analytic gradient of the contextual distance against central differences.
//!
//! ```bash
//! cargo run -p spcx --example gradient_check
//! ```

use spcx::contextual::{spcx, spcx_with_grad, ContextualConfig};
use spcx::pk::PkMode;
use spcx::rng::SeededRng;
use spcx::synth::uniform_image;

fn main() -> spcx::Result<()> {
    let mut rng = SeededRng::new(3);
    let x = uniform_image(6, 6, 1, 0.05, 0.95, &mut rng);
    let y = uniform_image(6, 6, 1, 0.05, 0.95, &mut rng);

    for (label, mode, mean_shift) in [
        ("block", PkMode::Block, false),
        ("phase", PkMode::Phase, false),
        ("block, mean-shifted", PkMode::Block, true),
    ] {
        let cfg = ContextualConfig {
            mode,
            mean_shift,
            ..ContextualConfig::with_rate(2)
        };
        let (value, grad) = spcx_with_grad(&x, &y, &cfg)?;
        println!("{label}: value {value:.6}");
        let h = 1e-5;
        let mut worst = 0.0f64;
        for r in 0..6 {
            for c in 0..6 {
                let v = x.get(r, c, 0);
                let num = (spcx(&x.with_value(r, c, 0, v + h), &y, &cfg)?
                    - spcx(&x.with_value(r, c, 0, v - h), &y, &cfg)?)
                    / (2.0 * h);
                let ana = grad.get(r, c, 0);
                let scale = ana.abs().max(num.abs());
                if scale > 1e-6 {
                    worst = worst.max((ana - num).abs() / scale);
                }
                if r == 0 && c < 3 {
                    println!("  d/dx[{r},{c}]  analytic {ana:+.6e}  numeric {num:+.6e}");
                }
            }
        }
        println!("  worst relative error {worst:.2e}");
    }
    Ok(())
}
