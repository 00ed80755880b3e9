//! Gradient descent on pixels under the L2 and contextual losses.
//!
//! L2 recovers the target exactly. The contextual loss only asks for the right
//! set of tiles, so a tile-shuffled target is an equally good answer.
//!
//! ```bash
//! cargo run -p spcx --example optimize_restore
//! ```

use spcx::contextual::{spcx, ContextualConfig};
use spcx::metrics::mse;
use spcx::optimize::{optimize_image, random_init, LossKind, OptimizeConfig};
use spcx::pk::{permute_image, PkMode};
use spcx::rng::SeededRng;
use spcx::synth::uniform_image;

fn main() -> spcx::Result<()> {
    let target = uniform_image(16, 16, 1, 0.0, 1.0, &mut SeededRng::new(100));
    let init = random_init(target.shape(), 1);
    let contextual = ContextualConfig::with_rate(4);

    let l2 = optimize_image(
        &init,
        &target,
        &OptimizeConfig {
            loss: LossKind::L2,
            steps: 500,
            step_size: 64.0,
            contextual,
            seed: 1,
            log_every: 100,
        },
    )?;
    println!("L2 descent:");
    for p in &l2.trace {
        println!("  step {:>3}  loss {:.3e}", p.step, p.loss);
    }

    let fit = optimize_image(
        &init,
        &target,
        &OptimizeConfig {
            loss: LossKind::Spcx,
            steps: 200,
            step_size: 1.0,
            contextual,
            seed: 1,
            log_every: 50,
        },
    )?;
    println!("contextual descent:");
    for p in &fit.trace {
        println!(
            "  step {:>3}  loss {:.5}  accepted step {:.3e}",
            p.step, p.loss, p.step_size
        );
    }

    let perm: Vec<usize> = (0..16).rev().collect();
    let shuffled = permute_image(&target, 4, PkMode::Block, &perm)?;
    println!(
        "\nloss of the result against target {:.6}, against shuffled target {:.6}",
        spcx(&fit.image, &target, &contextual)?,
        spcx(&fit.image, &shuffled, &contextual)?
    );
    println!(
        "pixel MSE to target: L2 result {:.2e}, contextual result {:.3}",
        mse(&l2.image, &target)?,
        mse(&fit.image, &target)?
    );
    Ok(())
}
