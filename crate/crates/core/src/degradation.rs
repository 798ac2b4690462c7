//! Synthetic under-exposure: divide by an exposure factor, then add
//! heteroscedastic Gaussian noise with variance `a * signal + b`.
//!
//! Noise is counter-based: the normal draw for element `i` of image `j`
//! comes from a ChaCha8 stream keyed by `(seed, j)` positioned at `i`, so the
//! result does not depend on processing order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::Image;

pub const DEFAULT_SHOT_COEFF: f64 = 0.01;
pub const DEFAULT_READ_COEFF: f64 = 1e-4;
pub const EXPOSURE_RANGE: (f64, f64) = (5.0, 20.0);

/// ChaCha word offset between consecutive elements. A normal draw almost
/// always uses 2 or 4 words; longer rejection loops only overlap the next
/// element's words and stay deterministic.
const WORDS_PER_ELEMENT: u128 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradeParams {
    pub exposure_factor: f64,
    pub shot_coeff: f64,
    pub read_coeff: f64,
    pub seed: u64,
    /// Selects the noise stream so that images sharing a seed get
    /// independent noise.
    pub image_index: u64,
}

impl DegradeParams {
    pub fn new(exposure_factor: f64, seed: u64) -> Self {
        Self {
            exposure_factor,
            shot_coeff: DEFAULT_SHOT_COEFF,
            read_coeff: DEFAULT_READ_COEFF,
            seed,
            image_index: 0,
        }
    }

    pub fn noiseless(exposure_factor: f64) -> Self {
        Self {
            shot_coeff: 0.0,
            read_coeff: 0.0,
            ..Self::new(exposure_factor, 0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1.0..=100.0).contains(&self.exposure_factor) {
            return Err(Error::Parameter(format!(
                "exposure factor {} is outside [1, 100]",
                self.exposure_factor
            )));
        }
        if !(self.shot_coeff >= 0.0 && self.shot_coeff.is_finite()) || !(self.read_coeff >= 0.0 && self.read_coeff.is_finite()) {
            return Err(Error::Parameter(format!(
                "noise coefficients must be non-negative, got a = {}, b = {}",
                self.shot_coeff, self.read_coeff
            )));
        }
        Ok(())
    }
}

/// Per-element standard normal draws for `(seed, image_index)`.
pub fn noise_field(seed: u64, image_index: u64, len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(image_index);
    (0..len)
        .map(|i| {
            rng.set_word_pos(i as u128 * WORDS_PER_ELEMENT);
            rng.sample(StandardNormal)
        })
        .collect()
}

/// `clamp(img / f + n, 0, 1)` with `n ~ N(0, a * img / f + b)`.
pub fn degrade(img: &Image, p: &DegradeParams) -> Result<Image> {
    p.validate()?;
    let noisy = p.shot_coeff > 0.0 || p.read_coeff > 0.0;
    let z = if noisy {
        noise_field(p.seed, p.image_index, img.data().len())
    } else {
        Vec::new()
    };
    let data = img
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let s = v / p.exposure_factor;
            let out = if noisy {
                s + (p.shot_coeff * s + p.read_coeff).sqrt() * z[i]
            } else {
                s
            };
            out.clamp(0.0, 1.0)
        })
        .collect();
    Image::new(img.height(), img.width(), data)
}

/// Uniform draw from `[low, high]`.
pub fn sample_exposure_factor<R: Rng>(rng: &mut R, low: f64, high: f64) -> Result<f64> {
    if !(low < high) || !low.is_finite() || !high.is_finite() {
        return Err(Error::Parameter(format!("empty exposure interval [{low}, {high}]")));
    }
    Ok(rng.random_range(low..=high))
}
