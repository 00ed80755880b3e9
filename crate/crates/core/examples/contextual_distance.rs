//! Contextual distance between sub-image collections.
//!
//! Prints the intermediate matrices for a tiny pair, then compares a texture
//! with shifted, tile-shuffled, degraded and unrelated versions of itself.
//!
//! ```bash
//! cargo run -p spcx --example contextual_distance
//! ```

use spcx::contextual::{spcx, spcx_evaluate, Aggregation, ContextualConfig, Matrix};
use spcx::degrade::{degrade, DegradationConfig};
use spcx::pk::{permute_image, PkMode};
use spcx::synth::texture;
use spcx::ImageTensor;

fn show(name: &str, m: &Matrix) {
    println!("{name}:");
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:9.4}")).collect();
        println!("  {}", row.join(" "));
    }
}

fn main() -> spcx::Result<()> {
    let x = texture(4, 4, 1, 1);
    let y = texture(4, 4, 1, 2);
    let ev = spcx_evaluate(&x, &y, &ContextualConfig::with_rate(2))?;
    show("cosine distances", &ev.raw);
    show("row-min normalized", &ev.normalized);
    show("kernel", &ev.kernel);
    println!("value {:.6}\n", ev.value);

    let cfg = ContextualConfig::with_rate(8);
    let base = texture(64, 64, 3, 10);
    let shifted = ImageTensor::from_fn(64, 64, 3, |r, c, ch| base.get(r, (c + 3) % 64, ch));
    let perm: Vec<usize> = (0..64).map(|i| (i * 37) % 64).collect();
    let tiles = permute_image(&base, 8, PkMode::Block, &perm)?;
    let turbulent = degrade(&base, &DegradationConfig::scaled_for(256, 3))?;
    let other = texture(64, 64, 3, 11);

    println!("{:<16} {:>10} {:>10}", "candidate", "max form", "sum form");
    for (name, img) in [
        ("itself", &base),
        ("shifted 3px", &shifted),
        ("tiles shuffled", &tiles),
        ("turbulent", &turbulent),
        ("other texture", &other),
    ] {
        let max = spcx(&base, img, &cfg)?;
        let sum = spcx(
            &base,
            img,
            &ContextualConfig {
                form: Aggregation::SumLog,
                ..cfg
            },
        )?;
        println!("{name:<16} {max:>10.5} {sum:>10.5}");
    }
    println!("\nthe sum form is a constant: every kernel row sums to one");
    Ok(())
}
