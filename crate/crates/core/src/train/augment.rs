//! Zero-pad, random-crop and horizontal-flip augmentation.

use rand::Rng;

use crate::error::{check_dim, Result};
use crate::tensor::Tensor;

pub const PAD: usize = 4;
pub const CROP: usize = 32;
/// Crop offsets per axis: `0..=2 * PAD`.
pub const OFFSETS: usize = 2 * PAD + 1;

/// One sampled augmentation. `(PAD, PAD)` without flip is the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDraw {
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        dy: PAD,
        dx: PAD,
        flip: false,
    };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            dy: rng.random_range(0..OFFSETS),
            dx: rng.random_range(0..OFFSETS),
            flip: rng.random_bool(0.5),
        }
    }
}

/// Apply `d` to one image stored as `c` planes of `CROP x CROP`.
fn apply(src: &[f32], dst: &mut [f32], channels: usize, d: AugmentDraw) {
    let s = CROP;
    for c in 0..channels {
        let plane = &src[c * s * s..(c + 1) * s * s];
        let out = &mut dst[c * s * s..(c + 1) * s * s];
        for y in 0..s {
            let sy = (y + d.dy) as isize - PAD as isize;
            for x in 0..s {
                let xc = if d.flip { s - 1 - x } else { x };
                let sx = (xc + d.dx) as isize - PAD as isize;
                out[y * s + x] = if (0..s as isize).contains(&sy) && (0..s as isize).contains(&sx) {
                    plane[sy as usize * s + sx as usize]
                } else {
                    0.0
                };
            }
        }
    }
}

fn check(x: &Tensor<f32>) -> Result<()> {
    check_dim("augment", "height", CROP, x.shape().h)?;
    check_dim("augment", "width", CROP, x.shape().w)
}

/// Deterministic augmentation of every sample in a batch with the same draw.
pub fn augment_with(x: &Tensor<f32>, d: AugmentDraw) -> Result<Tensor<f32>> {
    check(x)?;
    let mut out = x.clone();
    let c = x.shape().c;
    for n in 0..x.shape().n {
        apply(x.sample(n), out.sample_mut(n), c, d);
    }
    Ok(out)
}

/// Augment each sample of a batch in place with its own random draw.
pub fn augment_batch<R: Rng + ?Sized>(x: &mut Tensor<f32>, rng: &mut R) -> Result<()> {
    check(x)?;
    let c = x.shape().c;
    let mut scratch = vec![0.0f32; x.shape().sample()];
    for n in 0..x.shape().n {
        let d = AugmentDraw::sample(rng);
        apply(x.sample(n), &mut scratch, c, d);
        x.sample_mut(n).copy_from_slice(&scratch);
    }
    Ok(())
}

/// Augment a single image with a fresh random draw.
pub fn augment<R: Rng + ?Sized>(image: &Tensor<f32>, rng: &mut R) -> Result<Tensor<f32>> {
    let mut out = image.clone();
    augment_batch(&mut out, rng)?;
    Ok(out)
}
