//! One forward pass of a branching generator yields 2^g related images.
//!
//! Their per-pixel mean is the restoration and their variance an uncertainty
//! map. Writes PNGs into the first argument (a temp directory by default).
//!
//! ```bash
//! cargo run -p spcx --example pseudo_results -- /tmp/pseudo
//! ```

use std::path::PathBuf;

use spcx::hpc::{encode_mods, hpc_forward, GeneratorSpec, ModulationParams, ToyGenerator};
use spcx::io::save_png;
use spcx::rng::SeededRng;

fn main() -> spcx::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("spcx-pseudo"));
    std::fs::create_dir_all(&dir).map_err(|e| spcx::Error::Io {
        path: dir.clone(),
        source: e,
    })?;

    let gen = ToyGenerator::new(&GeneratorSpec::toy(3, 0))?;
    let latent = SeededRng::new(1).normal(1.0, gen.latent_dim());
    let feature = SeededRng::new(2).normal(1.0, 16);
    let mods = encode_mods(&gen, &feature, 3)?;
    println!(
        "{} modulation pairs over {} groups, output {}x{}",
        mods.pair_count(),
        mods.depth(),
        gen.output_size(),
        gen.output_size()
    );

    let set = hpc_forward(&gen, &latent, &mods)?;
    for (i, out) in set.outputs().iter().enumerate() {
        let mean = out.data().iter().sum::<f64>() / out.len() as f64;
        println!("  pseudo {i}: mean intensity {mean:.4}");
        save_png(out, dir.join(format!("pseudo_{i}.png")))?;
    }
    save_png(set.mean_image(), dir.join("mean.png"))?;
    let var = set.uncertainty();
    let peak = var.data().iter().copied().fold(0.0, f64::max);
    save_png(&var.map(|v| v / peak), dir.join("uncertainty.png"))?;
    println!(
        "uncertainty: mean {:.3e}, peak {peak:.3e}",
        var.data().iter().sum::<f64>() / var.len() as f64
    );

    // without diverging modulations all branches coincide
    let flat = hpc_forward(&gen, &latent, &ModulationParams::identity(&gen))?;
    let zero = flat.uncertainty().data().iter().all(|&v| v == 0.0);
    println!("identity modulation gives zero uncertainty: {zero}");
    println!("images in {}", dir.display());
    Ok(())
}
