//! Simulated turbulence: blur, elastic warp, noise.
//!
//! Writes PNGs for increasing strengths into the directory given as the first
//! argument (a temp directory by default).
//!
//! ```bash
//! cargo run -p spcx --example turbulence -- /tmp/turbulence
//! ```

use std::path::PathBuf;

use spcx::degrade::{degrade, make_elastic_field, DegradationConfig, StageOrder};
use spcx::io::save_png;
use spcx::metrics::{psnr, ssim};
use spcx::rng::SeededRng;
use spcx::synth::texture;

fn main() -> spcx::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("spcx-turbulence"));
    std::fs::create_dir_all(&dir).map_err(|e| spcx::Error::Io {
        path: dir.clone(),
        source: e,
    })?;

    let clean = texture(128, 128, 3, 5);
    save_png(&clean, dir.join("clean.png"))?;

    let field = make_elastic_field(128, 128, 8.5, 1.0, &mut SeededRng::new(1))?;
    println!(
        "elastic field: mean displacement {:.3}px, max {:.3}px",
        field.mean_magnitude(),
        field.max_magnitude()
    );

    println!("{:>8} {:>9} {:>7}", "strength", "psnr", "ssim");
    for (i, strength) in [0.5, 1.0, 2.0, 4.0].into_iter().enumerate() {
        let base = DegradationConfig::scaled_for(128, 42);
        let cfg = DegradationConfig {
            elastic_alpha: base.elastic_alpha * strength,
            blur_sigma: base.blur_sigma * strength,
            ..base
        };
        let out = degrade(&clean, &cfg)?;
        save_png(&out, dir.join(format!("turbulent_{i}.png")))?;
        println!(
            "{strength:>8} {:>9.2} {:>7.4}",
            psnr(&clean, &out)?,
            ssim(&clean, &out)?
        );
    }

    let a = degrade(&clean, &DegradationConfig::scaled_for(128, 9))?;
    let b = degrade(
        &clean,
        &DegradationConfig {
            order: StageOrder::WarpBlur,
            ..DegradationConfig::scaled_for(128, 9)
        },
    )?;
    println!(
        "blur-then-warp vs warp-then-blur differ by {:.4}",
        a.max_abs_diff(&b)?
    );
    println!("images in {}", dir.display());
    Ok(())
}
