//! Seeded synthetic images for tests, examples and the CLI.

use std::f64::consts::TAU;

use crate::rng::SeededRng;
use crate::ImageTensor;

/// Independent uniform pixels in `[lo, hi)`.
pub fn uniform_image(
    height: usize,
    width: usize,
    channels: usize,
    lo: f64,
    hi: f64,
    rng: &mut SeededRng,
) -> ImageTensor {
    let data = rng
        .uniform(lo, hi, height * width * channels)
        .expect("caller passes lo < hi");
    ImageTensor::new(height, width, channels, data).expect("length matches shape")
}

/// A smooth "natural-looking" texture: a sum of random oriented sinusoids
/// per channel plus a little pixel noise, rescaled into `[0.05, 0.95]`.
pub fn texture(height: usize, width: usize, channels: usize, seed: u64) -> ImageTensor {
    const WAVES: usize = 6;
    let mut rng = SeededRng::new(seed);
    let mut planes = Vec::with_capacity(channels);
    for _ in 0..channels {
        let params: Vec<(f64, f64, f64, f64)> = (0..WAVES)
            .map(|_| {
                let angle = rng.unit() * TAU;
                let freq = 0.5 + rng.unit() * 3.5;
                let phase = rng.unit() * TAU;
                let amp = 0.3 + rng.unit();
                (angle, freq, phase, amp)
            })
            .collect();
        let noise = rng.uniform(-0.15, 0.15, height * width).unwrap();
        let mut plane = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let u = x as f64 / width as f64;
                let v = y as f64 / height as f64;
                let s: f64 = params
                    .iter()
                    .map(|&(a, f, p, amp)| amp * (TAU * f * (u * a.cos() + v * a.sin()) + p).sin())
                    .sum();
                plane.push(s + noise[y * width + x]);
            }
        }
        let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(1e-12);
        planes.push(
            plane
                .into_iter()
                .map(|s| 0.05 + 0.9 * (s - lo) / span)
                .collect::<Vec<_>>(),
        );
    }
    ImageTensor::from_fn(height, width, channels, |y, x, c| planes[c][y * width + x])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn texture_is_deterministic_and_in_range() {
        let a = texture(16, 12, 3, 4);
        assert_eq!(a, texture(16, 12, 3, 4));
        assert_ne!(a, texture(16, 12, 3, 5));
        assert!(a.data().iter().all(|&v| (0.05..=0.95 + 1e-12).contains(&v)));
    }
}
