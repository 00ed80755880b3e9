//! Top-k identification and mean cosine similarity over embeddings.
//!
//! Any embedding works; here the gallery holds random identity vectors and
//! probes are noisy copies, so accuracy falls as noise grows.
//!
//! ```bash
//! cargo run -p spcx --example face_verification
//! ```

use spcx::metrics::{deg, topk_accuracies, verify, EmbeddingSet, MissingLabel};
use spcx::rng::SeededRng;

fn main() -> spcx::Result<()> {
    let ids = 50;
    let dim = 64;
    let mut rng = SeededRng::new(8);
    let labels: Vec<String> = (0..ids).map(|i| format!("person{i:03}")).collect();
    let refs: Vec<Vec<f64>> = (0..ids).map(|_| rng.normal(1.0, dim)).collect();
    let gallery = EmbeddingSet::new(labels.clone(), refs.clone())?;

    println!("cos 45 degrees: {:.2}", deg(&[1.0, 1.0], &[1.0, 0.0])?);
    println!(
        "{:>6} {:>7} {:>7} {:>7} {:>9}",
        "noise", "top1", "top3", "top5", "mean deg"
    );
    for noise in [0.0, 0.5, 1.0, 1.5, 2.0] {
        let probes: Vec<Vec<f64>> = refs
            .iter()
            .map(|v| {
                let n = rng.normal(noise, dim);
                v.iter().zip(n).map(|(a, b)| a + b).collect()
            })
            .collect();
        let probes = EmbeddingSet::new(labels.clone(), probes)?;
        let r = verify(&probes, &gallery, MissingLabel::Error)?;
        println!(
            "{noise:>6} {:>7.1} {:>7.1} {:>7.1} {:>9.2}",
            r.top1, r.top3, r.top5, r.mean_deg
        );
    }

    let curve = topk_accuracies(&gallery, &gallery, &[1, 10, 50], MissingLabel::Error)?;
    println!("self gallery top-1/10/50: {curve:?}");
    Ok(())
}
