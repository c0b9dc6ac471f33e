//! Class-conditional synthetic images.
//!
//! Class `k` is a Gaussian blob with a class-specific colour, centre and
//! width on a grey background. `difficulty` scales centre jitter, colour
//! jitter and pixel noise; at 0 all images of a class are identical.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Dataset, Split, CHANNELS, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor};

fn hue_rgb(h: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let x = 1.0 - ((h6 % 2.0) - 1.0).abs();
    match h6 as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

struct ClassStyle {
    colour: [f64; 3],
    centre: (f64, f64),
    sigma: f64,
}

fn style(k: usize, classes: usize) -> ClassStyle {
    let t = k as f64 / classes as f64;
    let angle = std::f64::consts::TAU * t;
    let c = (IMAGE_SIZE as f64 - 1.0) / 2.0;
    ClassStyle {
        colour: hue_rgb(t),
        centre: (c + 8.0 * angle.sin(), c + 8.0 * angle.cos()),
        sigma: 3.0 + 3.0 * ((k % 3) as f64) / 2.0,
    }
}

/// Deterministic synthetic dataset; labels are balanced within one sample.
pub fn synth_dataset(seed: u64, n: usize, classes: usize, difficulty: f64) -> Result<Dataset> {
    if classes == 0 || n < classes {
        return Err(Error::Config(format!(
            "synthetic set needs n >= classes >= 1 (n={n}, classes={classes})"
        )));
    }
    if !(difficulty >= 0.0 && difficulty.is_finite()) {
        return Err(Error::Config(format!(
            "difficulty must be finite and >= 0, got {difficulty}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    let mut pixels = Vec::with_capacity(n * CHANNELS * plane);
    for &label in &labels {
        let st = style(label, classes);
        let jy: f64 = StandardNormal.sample(&mut rng);
        let jx: f64 = StandardNormal.sample(&mut rng);
        let cy = st.centre.0 + 2.0 * difficulty * jy;
        let cx = st.centre.1 + 2.0 * difficulty * jx;
        let cj: f64 = rng.random_range(-1.0..1.0);
        let gain = 1.0 + 0.3 * difficulty * cj;
        let inv = 1.0 / (2.0 * st.sigma * st.sigma);
        let blob: Vec<f64> = (0..plane)
            .map(|p| {
                let (y, x) = ((p / IMAGE_SIZE) as f64, (p % IMAGE_SIZE) as f64);
                (-((y - cy).powi(2) + (x - cx).powi(2)) * inv).exp()
            })
            .collect();
        for ch in 0..CHANNELS {
            for &b in &blob {
                let noise: f64 = StandardNormal.sample(&mut rng);
                let v = 0.5 + 0.45 * gain * b * (2.0 * st.colour[ch] - 1.0) + 0.1 * difficulty * noise;
                pixels.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    let shape = Shape4::new(n, CHANNELS, IMAGE_SIZE, IMAGE_SIZE);
    Dataset::new(Tensor::new(shape, pixels)?, labels, classes, Split::Synthetic)
}
