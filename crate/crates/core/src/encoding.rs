//! Sinusoidal positional encodings and seed derivation shared by the
//! simulator and the decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Scale that maps metric coordinates into roughly `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PositionScale {
    pub half_range: f64,
    pub z_scale: f64,
}

impl PositionScale {
    pub fn normalize(&self, p: [f64; 3]) -> [f64; 3] {
        [p[0] / self.half_range, p[1] / self.half_range, p[2] / self.z_scale]
    }
}

/// Sinusoidal encoding of a 3D position into `channels` values.
///
/// Each axis gets `channels / 6` frequency pairs spaced geometrically from
/// a quarter cycle across the normalised range to a 64x finer wavelength.
/// The lowest band is close to linear in position. Leftover channels are 0.
pub fn positional_encoding(pos: [f64; 3], scale: PositionScale, channels: usize) -> Vec<f64> {
    let mut out = vec![0.0; channels];
    let per_axis = channels / 6;
    if per_axis == 0 {
        return out;
    }
    let p = scale.normalize(pos);
    for (axis, &coord) in p.iter().enumerate() {
        for f in 0..per_axis {
            let frac = if per_axis > 1 { f as f64 / (per_axis - 1) as f64 } else { 0.0 };
            let omega = 0.5 * std::f64::consts::PI * 64f64.powf(frac);
            let base = axis * 2 * per_axis + 2 * f;
            out[base] = (omega * coord).sin();
            out[base + 1] = (omega * coord).cos();
        }
    }
    out
}

/// Linear form of [`positional_encoding`] on normalised coordinates:
/// `encoding = sin(p · weights + phase) * mask`, with `weights` laid out
/// `3 x channels` row-major. Lets the encoding be built from graph ops.
pub struct EncodingBasis {
    pub weights: Vec<f64>,
    pub phase: Vec<f64>,
    pub mask: Vec<f64>,
}

pub fn encoding_basis(channels: usize) -> EncodingBasis {
    let mut b = EncodingBasis {
        weights: vec![0.0; 3 * channels],
        phase: vec![0.0; channels],
        mask: vec![0.0; channels],
    };
    let per_axis = channels / 6;
    for axis in 0..3 {
        for f in 0..per_axis {
            let frac = if per_axis > 1 { f as f64 / (per_axis - 1) as f64 } else { 0.0 };
            let omega = 0.5 * std::f64::consts::PI * 64f64.powf(frac);
            let base = axis * 2 * per_axis + 2 * f;
            b.weights[axis * channels + base] = omega;
            b.weights[axis * channels + base + 1] = omega;
            b.phase[base + 1] = 0.5 * std::f64::consts::PI;
            b.mask[base] = 1.0;
            b.mask[base + 1] = 1.0;
        }
    }
    b
}

/// Derives an independent 64-bit seed from a base seed and a purpose tag.
/// Adding new purposes never perturbs existing streams.
pub fn split_seed(base: u64, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(purpose.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 is 32 bytes"))
}

pub fn rng_for(base: u64, purpose: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(split_seed(base, purpose))
}
