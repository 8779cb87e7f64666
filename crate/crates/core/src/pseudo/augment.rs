use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Tensor};
use crate::{Error, Result};

/// Reference augmentation: a small random rotation followed by additive
/// Gaussian noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Rotation angle is drawn from `U(-max, max)` degrees.
    pub max_rotation_deg: f64,
    pub noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_rotation_deg: 15.0,
            noise_sigma: 0.05,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            max_rotation_deg: 0.0,
            noise_sigma: 0.0,
        }
    }
}

/// Augments one image `[c, h, w]` given as a flat slice.
///
/// Rotation is about the image centre with nearest-neighbour sampling and
/// zero fill; the result is clipped to the input's value range.
pub fn augment<T: Real, R: Rng>(image: &[T], shape: [usize; 3], cfg: &AugmentConfig, rng: &mut R) -> Result<Vec<T>> {
    let [c, h, w] = shape;
    if image.len() != c * h * w {
        return Err(Error::shape("augment", &[image.len()], &shape));
    }
    let theta = if cfg.max_rotation_deg > 0.0 {
        rng.gen_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg).to_radians()
    } else {
        0.0
    };
    let (lo, hi) = image.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v.f64()), hi.max(v.f64()))
    });
    let mut out = if theta == 0.0 {
        image.to_vec()
    } else {
        let (s, co) = theta.sin_cos();
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let mut out = vec![T::zero(); image.len()];
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                // inverse rotation finds the source pixel
                let sx = (co * dx + s * dy + cx).round();
                let sy = (-s * dx + co * dy + cy).round();
                if sx < 0.0 || sy < 0.0 || sx >= w as f64 || sy >= h as f64 {
                    continue;
                }
                for ch in 0..c {
                    out[(ch * h + y) * w + x] = image[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
        out
    };
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma)
            .map_err(|e| Error::invalid("augment", format!("bad noise sigma: {e}")))?;
        for v in &mut out {
            let noisy = (v.f64() + normal.sample(rng)).clamp(lo, hi);
            *v = T::of(noisy);
        }
    }
    Ok(out)
}

/// Augments every image of `[m, c, h, w]` in order with one rng stream.
pub fn augment_batch<T: Real, R: Rng>(batch: &Tensor<T>, cfg: &AugmentConfig, rng: &mut R) -> Result<Tensor<T>> {
    let s = batch.shape();
    if s.len() != 4 {
        return Err(Error::invalid("augment", format!("expected [m,c,h,w], got {s:?}")));
    }
    let shape = [s[1], s[2], s[3]];
    let mut data = Vec::with_capacity(batch.numel());
    for i in 0..s[0] {
        data.extend(augment(batch.row(i), shape, cfg, rng)?);
    }
    Tensor::new(s.to_vec(), data)
}
