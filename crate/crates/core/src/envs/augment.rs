use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EnvError, Observation, Result};

/// Random crop to `crop_fraction` of each spatial side, resized back with
/// nearest-neighbor sampling, then a per-channel gain drawn from
/// `[1 - jitter, 1 + jitter]`, clamped to `[0, 1]`.
pub fn augment<R: Rng + ?Sized>(obs: &Observation, crop_fraction: f64, jitter: f64, rng: &mut R) -> Result<Observation> {
    if !(crop_fraction > 0.0 && crop_fraction <= 1.0) {
        return Err(EnvError::Config(format!("crop_fraction must lie in (0, 1], got {crop_fraction}")));
    }
    if !(0.0..=1.0).contains(&jitter) {
        return Err(EnvError::Config(format!("jitter must lie in [0, 1], got {jitter}")));
    }
    let (c, h, w) = (obs.channels, obs.height, obs.width);
    let ch = ((h as f64 * crop_fraction).round() as usize).clamp(1, h);
    let cw = ((w as f64 * crop_fraction).round() as usize).clamp(1, w);
    let oy = rng.random_range(0..=h - ch);
    let ox = rng.random_range(0..=w - cw);
    let mut out = Observation::zeros(c, h, w);
    for k in 0..c {
        let gain = if jitter > 0.0 {
            rng.random_range(1.0 - jitter..=1.0 + jitter)
        } else {
            1.0
        };
        for y in 0..h {
            let sy = oy + y * ch / h;
            for x in 0..w {
                let sx = ox + x * cw / w;
                let v = obs.get(k, sy, sx);
                out.set(k, y, x, if jitter > 0.0 { (v * gain).clamp(0.0, 1.0) } else { v });
            }
        }
    }
    Ok(out)
}

pub fn augment_seeded(obs: &Observation, crop_fraction: f64, jitter: f64, seed: u64) -> Result<Observation> {
    augment(obs, crop_fraction, jitter, &mut ChaCha8Rng::seed_from_u64(seed))
}
