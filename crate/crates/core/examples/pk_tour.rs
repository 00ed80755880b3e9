//! Splitting an image into sub-images and putting it back together.
//!
//! ```bash
//! cargo run -p spcx --example pk_tour
//! ```

use spcx::pk::{invert_permutation, permute_image, pk_decompose, pk_recompose, PkMode};
use spcx::synth::texture;
use spcx::ImageTensor;

fn main() -> spcx::Result<()> {
    // 4x4 grayscale with pixel value = index, so the layout is easy to read
    let img = ImageTensor::from_fn(4, 4, 1, |y, x, _| (4 * y + x) as f64);

    for mode in [PkMode::Block, PkMode::Phase] {
        let coll = pk_decompose(&img, 2, mode)?;
        println!("{mode}: {} sub-images of dim {}", coll.count(), coll.dim());
        for (i, v) in coll.vectors().enumerate() {
            println!("  [{i}] {v:?}");
        }
        assert_eq!(pk_recompose(&coll)?, img);
    }

    // Block mode keeps local neighbourhoods, phase mode keeps the global layout
    let big = texture(64, 64, 3, 7);
    let block = pk_decompose(&big, 16, PkMode::Block)?;
    let phase = pk_decompose(&big, 16, PkMode::Phase)?;
    println!(
        "64x64x3 at rate 16: block gives {} tiles of {:?}, phase gives {} grids of {:?}",
        block.count(),
        block.sub_image_shape(),
        phase.count(),
        phase.sub_image_shape()
    );

    // reorder tiles, then undo it
    let perm: Vec<usize> = (0..block.count()).rev().collect();
    let shuffled = permute_image(&big, 16, PkMode::Block, &perm)?;
    let restored = permute_image(&shuffled, 16, PkMode::Block, &invert_permutation(&perm)?)?;
    println!(
        "reversed tiles differ by {:.3}, restored differs by {}",
        shuffled.max_abs_diff(&big)?,
        restored.max_abs_diff(&big)?
    );
    Ok(())
}
