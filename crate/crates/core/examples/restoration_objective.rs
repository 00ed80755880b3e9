//! The reconstruction objective over a set of pseudo results.
//!
//! ```bash
//! cargo run -p spcx --example restoration_objective
//! ```

use spcx::contextual::ContextualConfig;
use spcx::degrade::{degrade, DegradationConfig};
use spcx::hpc::PseudoResultSet;
use spcx::objective::{l_rec, DiscriminatorStub, LossWeights, ObjectiveModels, RandomProjection};
use spcx::synth::texture;

fn main() -> spcx::Result<()> {
    let target = texture(32, 32, 3, 1);
    let phi = RandomProjection::standard(3, 10);
    let eta = RandomProjection::standard(3, 11);
    let disc = DiscriminatorStub::new(3, 12);
    let models = ObjectiveModels {
        perceptual: &phi,
        identity: &eta,
        discriminator: &disc,
    };
    let cfg = ContextualConfig::with_rate(8);

    // four candidates per set, from mild to heavy turbulence
    println!(
        "{:>8} {:>9} {:>9} {:>9} {:>9} {:>9}",
        "strength", "spcx", "adv", "per", "id", "total"
    );
    for strength in [0.25, 1.0, 4.0] {
        let outputs = (0..4)
            .map(|seed| {
                let base = DegradationConfig::scaled_for(128, seed);
                degrade(
                    &target,
                    &DegradationConfig {
                        elastic_alpha: base.elastic_alpha * strength,
                        blur_sigma: base.blur_sigma * strength,
                        ..base
                    },
                )
            })
            .collect::<spcx::Result<Vec<_>>>()?;
        let set = PseudoResultSet::from_outputs(outputs)?;
        let b = l_rec(&set, &target, &cfg, &LossWeights::default(), &models)?;
        println!(
            "{strength:>8} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
            b.spcx, b.adv, b.per, b.id, b.total
        );
    }

    let w = LossWeights::default();
    println!(
        "\ndefault weights: adv {}, per {}, id {}",
        w.adv, w.per, w.id
    );
    Ok(())
}
