use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::SpriteMask;
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::tensor::{Tape, Tensor};
use crate::transfer::{Layout, VariationalGaussian};

/// A single-channel `height x width` grid of values.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl SpatialMap {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    Bilinear,
    Nearest,
}

/// 8-bit grayscale image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeatmapImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl HeatmapImage {
    /// Binary PGM (`P5`, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

pub fn write_pgm(img: &HeatmapImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, img.to_pgm()).map_err(|e| Error::io(path, e))
}

fn single_sample(t: &Tensor, what: &str) -> Result<Tensor> {
    match t.shape() {
        [1, ..] => Ok(t.clone()),
        s if s.len() == 3 && what == "teacher" => t.clone().reshape([&[1usize][..], s].concat()),
        s => Err(Error::shape("heatmap", format!("{what} activation must hold one sample, got {s:?}"))),
    }
}

/// Channel-summed `log q(t_hw | s)` with constants dropped, at the teacher
/// tap's resolution. `t` is `[C, H, W]` or `[1, C, H, W]`; `s` is the
/// matching student activation with a leading batch axis of 1.
pub fn loglik_map(q: &VariationalGaussian, t: &Tensor, s: &Tensor) -> Result<SpatialMap> {
    if q.layout != Layout::Conv {
        return Err(Error::InvalidArgument("heatmaps need a convolutional-layout distribution".into()));
    }
    let t = single_sample(t, "teacher")?;
    let s = single_sample(s, "student")?;
    let &[_, c, h, w] = t.shape() else {
        return Err(Error::shape("heatmap", format!("teacher activation {:?} is not [1, C, H, W]", t.shape())));
    };
    if q.target_shape() != [c, h, w] {
        return Err(Error::shape("heatmap", format!("distribution models {:?}, got {:?}", q.target_shape(), t.shape())));
    }
    let mut tape = Tape::new();
    let sv = tape.constant(&s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fwd = q.mean_net.forward(&mut tape, sv, Mode::Eval, &mut rng)?;
    let mu = tape.value(fwd.output);
    let var = q.variance();
    let plane = h * w;
    let mut values = vec![0.0; plane];
    for ch in 0..c {
        let (lv, inv) = (0.5 * var[ch].ln(), 0.5 / var[ch]);
        for (i, v) in values.iter_mut().enumerate() {
            let r = t.data()[ch * plane + i] - mu[ch * plane + i];
            *v -= lv + r * r * inv;
        }
    }
    Ok(SpatialMap { height: h, width: w, values })
}

/// Mean absolute activation over channels at each position.
pub fn activation_magnitude_map(t: &Tensor) -> Result<SpatialMap> {
    let t = single_sample(t, "teacher")?;
    let &[_, c, h, w] = t.shape() else {
        return Err(Error::shape("magnitude_map", format!("expected [1, C, H, W], got {:?}", t.shape())));
    };
    let plane = h * w;
    let mut values = vec![0.0; plane];
    for ch in 0..c {
        for (i, v) in values.iter_mut().enumerate() {
            *v += t.data()[ch * plane + i].abs() / c as f64;
        }
    }
    Ok(SpatialMap { height: h, width: w, values })
}

/// Resamples to `height x width`. Bilinear sampling uses pixel centers with
/// edge clamping.
pub fn resize_map(map: &SpatialMap, height: usize, width: usize, mode: Interpolation) -> SpatialMap {
    let src = |y: usize, x: usize| map.values[y * map.width + x];
    let coord = |o: usize, n_out: usize, n_in: usize| -> f64 {
        ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64)
    };
    let mut values = Vec::with_capacity(height * width);
    for oy in 0..height {
        for ox in 0..width {
            let v = match mode {
                Interpolation::Nearest => src(oy * map.height / height, ox * map.width / width),
                Interpolation::Bilinear => {
                    let (fy, fx) = (coord(oy, height, map.height), coord(ox, width, map.width));
                    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                    let (y1, x1) = ((y0 + 1).min(map.height - 1), (x0 + 1).min(map.width - 1));
                    let (dy, dx) = (fy - y0 as f64, fx - x0 as f64);
                    let top = src(y0, x0) * (1.0 - dx) + src(y0, x1) * dx;
                    let bottom = src(y1, x0) * (1.0 - dx) + src(y1, x1) * dx;
                    top * (1.0 - dy) + bottom * dy
                }
            };
            values.push(v);
        }
    }
    SpatialMap { height, width, values }
}

/// Resizes to the input resolution, then min-max normalizes to `0..=255`.
/// A constant map renders as 128 everywhere.
pub fn render_heatmap(map: &SpatialMap, height: usize, width: usize, mode: Interpolation) -> HeatmapImage {
    let up = resize_map(map, height, width, mode);
    let lo = up.values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = up.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pixels = if hi > lo {
        up.values.iter().map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
    } else {
        vec![128; height * width]
    };
    HeatmapImage { width, height, pixels }
}

/// Mean map value over background and foreground pixels of `mask`, with the
/// map bilinearly resized to the mask resolution.
pub fn background_foreground_means(map: &SpatialMap, mask: &SpriteMask) -> (f64, f64) {
    let up = resize_map(map, mask.height, mask.width, Interpolation::Bilinear);
    let (mut bg, mut nb, mut fg, mut nf) = (0.0, 0usize, 0.0, 0usize);
    for (v, &m) in up.values.iter().zip(&mask.bits) {
        if m {
            fg += v;
            nf += 1;
        } else {
            bg += v;
            nb += 1;
        }
    }
    (bg / nb.max(1) as f64, fg / nf.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(values: Vec<f64>, h: usize, w: usize) -> SpatialMap {
        SpatialMap { height: h, width: w, values }
    }

    #[test]
    fn constant_map_is_mid_gray() {
        let img = render_heatmap(&map(vec![-3.0; 16], 4, 4), 8, 8, Interpolation::Bilinear);
        assert!(img.pixels.iter().all(|&p| p == 128));
    }

    #[test]
    fn full_range_and_darkest_cell() {
        let mut v = vec![0.0; 64];
        v[9] = -50.0;
        let img = render_heatmap(&map(v, 8, 8), 16, 16, Interpolation::Bilinear);
        assert_eq!((img.width, img.height), (16, 16));
        assert_eq!(*img.pixels.iter().max().unwrap(), 255);
        assert_eq!(*img.pixels.iter().min().unwrap(), 0);
        // Cell (1, 1) covers output pixels 2..4 in both axes.
        let darkest = img.pixels.iter().enumerate().min_by_key(|(_, p)| **p).unwrap().0;
        assert!((2..4).contains(&(darkest / 16)) && (2..4).contains(&(darkest % 16)));
    }

    #[test]
    fn pgm_header() {
        let img = HeatmapImage { width: 3, height: 2, pixels: vec![0, 1, 2, 3, 4, 5] };
        let bytes = img.to_pgm();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 6);
    }

    #[test]
    fn nearest_resize_replicates() {
        let up = resize_map(&map(vec![1.0, 2.0, 3.0, 4.0], 2, 2), 4, 4, Interpolation::Nearest);
        assert_eq!(&up.values[..4], &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn zero_activation_magnitude_is_constant() {
        let m = activation_magnitude_map(&Tensor::zeros(vec![3, 4, 4])).unwrap();
        let img = render_heatmap(&m, 8, 8, Interpolation::Bilinear);
        assert!(img.pixels.iter().all(|&p| p == 128));
    }
}
