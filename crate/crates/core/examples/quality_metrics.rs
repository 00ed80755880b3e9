//! PSNR and SSIM as blur increases.
//!
//! ```bash
//! cargo run -p spcx --example quality_metrics
//! ```

use spcx::degrade::gaussian_blur;
use spcx::metrics::{mse, psnr, ssim};
use spcx::synth::texture;

fn main() -> spcx::Result<()> {
    let clean = texture(64, 64, 3, 21);
    println!(
        "identical: psnr {} dB, ssim {}",
        psnr(&clean, &clean)?,
        ssim(&clean, &clean)?
    );
    println!("{:>6} {:>10} {:>9} {:>7}", "sigma", "mse", "psnr", "ssim");
    for sigma in [0.5, 1.0, 2.0, 4.0, 8.0] {
        let blurred = gaussian_blur(&clean, sigma)?;
        println!(
            "{sigma:>6} {:>10.3e} {:>9.2} {:>7.4}",
            mse(&clean, &blurred)?,
            psnr(&clean, &blurred)?,
            ssim(&clean, &blurred)?
        );
    }
    Ok(())
}
