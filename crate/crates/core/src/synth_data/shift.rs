use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::DataError;

/// Grey level the fog blends toward.
pub const FOG_GRAY: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainShiftParams {
    /// Blend weight toward [`FOG_GRAY`], in `[0, 1]`.
    pub fog_alpha: f32,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise_sigma: f32,
    /// Box-blur radius in pixels.
    pub blur_radius: usize,
    /// Additive brightness offset, in `[-1, 1]`.
    pub brightness_shift: f32,
}

impl Default for DomainShiftParams {
    fn default() -> Self {
        Self {
            fog_alpha: 0.5,
            noise_sigma: 0.05,
            blur_radius: 1,
            brightness_shift: 0.0,
        }
    }
}

impl DomainShiftParams {
    pub fn zero() -> Self {
        Self {
            fog_alpha: 0.0,
            noise_sigma: 0.0,
            blur_radius: 0,
            brightness_shift: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if !(0.0..=1.0).contains(&self.fog_alpha) {
            return Err(DataError::Config(format!(
                "fog must be in [0, 1], got {}",
                self.fog_alpha
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(DataError::Config(format!(
                "noise must be a non-negative finite std, got {}",
                self.noise_sigma
            )));
        }
        if !(-1.0..=1.0).contains(&self.brightness_shift) {
            return Err(DataError::Config(format!(
                "brightness shift must be in [-1, 1], got {}",
                self.brightness_shift
            )));
        }
        Ok(())
    }
}

/// Applies fog, blur, noise and brightness, in that order, to interleaved RGB
/// pixels and clamps the result to `[0, 1]`.
pub fn apply_domain_shift(
    pixels: &[f32],
    width: usize,
    height: usize,
    shift: &DomainShiftParams,
    seed: u64,
) -> Vec<f32> {
    assert_eq!(pixels.len(), width * height * 3);
    let mut out = pixels.to_vec();
    if shift.fog_alpha > 0.0 {
        let a = shift.fog_alpha;
        for v in out.iter_mut() {
            *v = (1.0 - a) * *v + a * FOG_GRAY;
        }
    }
    if shift.blur_radius > 0 {
        out = box_blur(&out, width, height, shift.blur_radius);
    }
    if shift.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0f32, shift.noise_sigma).expect("validated sigma");
        for v in out.iter_mut() {
            *v += dist.sample(&mut rng);
        }
    }
    if shift.brightness_shift != 0.0 {
        for v in out.iter_mut() {
            *v += shift.brightness_shift;
        }
    }
    for v in out.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

/// Separable box blur with edge clamping.
fn box_blur(px: &[f32], w: usize, h: usize, r: usize) -> Vec<f32> {
    let norm = 1.0 / (2 * r + 1) as f32;
    let mut tmp = vec![0.0f32; px.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for d in -(r as isize)..=(r as isize) {
                    let xx = (x as isize + d).clamp(0, w as isize - 1) as usize;
                    acc += px[(y * w + xx) * 3 + c];
                }
                tmp[(y * w + x) * 3 + c] = acc * norm;
            }
        }
    }
    let mut out = vec![0.0f32; px.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for d in -(r as isize)..=(r as isize) {
                    let yy = (y as isize + d).clamp(0, h as isize - 1) as usize;
                    acc += tmp[(yy * w + x) * 3 + c];
                }
                out[(y * w + x) * 3 + c] = acc * norm;
            }
        }
    }
    out
}
