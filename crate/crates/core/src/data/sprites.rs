use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

/// Number of distinct glyph templates available.
pub const GLYPH_COUNT: usize = 18;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpriteParams {
    pub num_classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    #[serde(default = "default_glyph_size")]
    pub glyph_size: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    pub seed: u64,
}

fn default_glyph_size() -> usize {
    7
}

fn default_noise() -> f64 {
    0.1
}

impl SpriteParams {
    pub fn new(num_classes: usize, per_class: usize, image_size: usize, seed: u64) -> Self {
        SpriteParams { num_classes, per_class, image_size, glyph_size: default_glyph_size(), noise: default_noise(), seed }
    }
}

/// Foreground (sprite) pixels of one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpriteMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl SpriteMask {
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.width + c]
    }
}

fn glyph(kind: usize, r: usize, c: usize, g: usize) -> bool {
    let m = g / 2;
    let last = g - 1;
    let edge = r == 0 || r == last || c == 0 || c == last;
    match kind {
        0 => r == m,
        1 => c == m,
        2 => r == m || c == m,
        3 => r == c || r + c == last,
        4 => edge,
        5 => r == c,
        6 => r + c == last,
        7 => r == 0 || c == m,
        8 => c == 0 || r == last,
        9 => r.abs_diff(m) <= 1 && c.abs_diff(m) <= 1,
        10 => r == 1 || r == last - 1,
        11 => c == 1 || c == last - 1,
        12 => c == 0 || c == last || r == m,
        13 => c == 0 || c == last || r == last,
        14 => r == 0 || r == last || r + c == last,
        15 => edge || (r == m && c == m),
        16 => r == 2 || r == last - 2 || c == 2 || c == last - 2,
        17 => r == 0 || c == 0,
        _ => unreachable!(),
    }
}

/// Class `k` is glyph `k`, placed at a uniformly random offset with additive
/// Gaussian pixel noise on a zero background. Labels cycle `0, 1, ..` so any
/// prefix is near balanced.
pub fn generate_sprites(params: &SpriteParams) -> Result<(Dataset, Vec<SpriteMask>)> {
    let SpriteParams { num_classes, per_class, image_size: size, glyph_size: g, noise, seed } = *params;
    if num_classes == 0 || num_classes > GLYPH_COUNT {
        return Err(Error::InvalidArgument(format!("{num_classes} classes requested, {GLYPH_COUNT} glyphs available")));
    }
    if size < 12 {
        return Err(Error::InvalidArgument(format!("image size {size} below 12")));
    }
    if g < 5 || g > size {
        return Err(Error::InvalidArgument(format!("glyph size {g} must lie in 5..={size}")));
    }
    if !(noise >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise {noise} must be non-negative")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = num_classes * per_class;
    let mut images = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % num_classes;
        let (oy, ox) = (rng.random_range(0..=size - g), rng.random_range(0..=size - g));
        let mut bits = vec![false; size * size];
        for r in 0..g {
            for c in 0..g {
                if glyph(label, r, c, g) {
                    bits[(oy + r) * size + ox + c] = true;
                }
            }
        }
        for &fg in &bits {
            let base = if fg { 1.0 } else { 0.0 };
            let eps: f64 = if noise > 0.0 { rng.sample::<f64, _>(StandardNormal) * noise } else { 0.0 };
            images.push((base + eps) as f32);
        }
        labels.push(label as u8);
        masks.push(SpriteMask { height: size, width: size, bits });
    }
    let ds = Dataset::new(format!("sprites-{seed}"), num_classes, [1, size, size], images, labels)?;
    Ok((ds, masks))
}

/// Writes the generator parameters next to a dataset file.
pub fn write_sidecar(params: &SpriteParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(params)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
