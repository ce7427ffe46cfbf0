//! Benign image perturbations used for robustness evaluation: the kinds of
//! damage an image picks up from resharing (noise, resizing, recompression,
//! format churn, color shifts, crops).

use alloc::vec::Vec;

use crate::config::Config;
use crate::error::{bail_invalid, Result};
use crate::image::{clamp_u8, to_ycbcr, ycbcr_to_rgb, ImageAsset, MIN_SIDE};
use crate::math;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub enum Perturbation {
    /// Seeded gaussian noise per channel; sigma on the 0-255 scale.
    AdditiveNoise { sigma: f64, seed: u64 },
    /// Area-filter resize to `percent` of the current dimensions.
    Resize { percent: u32 },
    /// Block-DCT recompression at the given quality (1-100), the classic
    /// lossy 8x8 quantization cycle.
    QualityRecompress { quality: u8 },
    /// Encode/decode through the lossless container.
    FormatChange,
    /// Seeded per-channel gain in [1 - max_percent/100, 1 + max_percent/100].
    ColorJitter { max_percent: f64, seed: u64 },
    /// Axis-aligned crop.
    Crop { x: usize, y: usize, width: usize, height: usize },
}

/// The default mild suite (parameters from config, in a fixed order).
pub fn mild_suite(cfg: &Config, seed: u64) -> Vec<Perturbation> {
    alloc::vec![
        Perturbation::AdditiveNoise { sigma: cfg.noise_sigma, seed },
        Perturbation::Resize { percent: cfg.resize_percent },
        Perturbation::QualityRecompress { quality: cfg.recompress_quality },
        Perturbation::ColorJitter { max_percent: cfg.jitter_percent, seed: seed.wrapping_add(1) },
        Perturbation::FormatChange,
    ]
}

pub fn apply_perturbation(image: &ImageAsset, p: &Perturbation) -> Result<ImageAsset> {
    match p {
        Perturbation::AdditiveNoise { sigma, seed } => additive_noise(image, *sigma, *seed),
        Perturbation::Resize { percent } => {
            if *percent == 0 {
                bail_invalid!("resize percent must be >= 1");
            }
            let w = ((image.width as u64 * *percent as u64 + 50) / 100) as usize;
            let h = ((image.height as u64 * *percent as u64 + 50) / 100) as usize;
            crate::image::resize(image, w.max(MIN_SIDE), h.max(MIN_SIDE))
        }
        Perturbation::QualityRecompress { quality } => recompress(image, *quality),
        Perturbation::FormatChange => ImageAsset::from_ppm(&image.id, &image.to_ppm()),
        Perturbation::ColorJitter { max_percent, seed } => color_jitter(image, *max_percent, *seed),
        Perturbation::Crop { x, y, width, height } => crop(image, *x, *y, *width, *height),
    }
}

fn additive_noise(image: &ImageAsset, sigma: f64, seed: u64) -> Result<ImageAsset> {
    if sigma < 0.0 {
        bail_invalid!("noise sigma must be >= 0");
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let mut rng = Rng::new(seed).fork("noise");
    let mut pixels = Vec::with_capacity(image.pixels.len());
    for &b in &image.pixels {
        pixels.push(clamp_u8(b as f64 + sigma * rng.next_gaussian()));
    }
    ImageAsset::new(&image.id, image.width, image.height, pixels)
}

fn color_jitter(image: &ImageAsset, max_percent: f64, seed: u64) -> Result<ImageAsset> {
    if !(0.0..=100.0).contains(&max_percent) {
        bail_invalid!("jitter percent must be in [0, 100]");
    }
    let mut rng = Rng::new(seed).fork("jitter");
    let gains = [
        rng.range_f64(1.0 - max_percent / 100.0, 1.0 + max_percent / 100.0),
        rng.range_f64(1.0 - max_percent / 100.0, 1.0 + max_percent / 100.0),
        rng.range_f64(1.0 - max_percent / 100.0, 1.0 + max_percent / 100.0),
    ];
    let mut pixels = Vec::with_capacity(image.pixels.len());
    for (i, &b) in image.pixels.iter().enumerate() {
        pixels.push(clamp_u8(b as f64 * gains[i % 3]));
    }
    ImageAsset::new(&image.id, image.width, image.height, pixels)
}

fn crop(image: &ImageAsset, x: usize, y: usize, width: usize, height: usize) -> Result<ImageAsset> {
    if x + width > image.width || y + height > image.height {
        bail_invalid!(
            "crop {x},{y} {width}x{height} exceeds image {}x{}",
            image.width,
            image.height
        );
    }
    if width < MIN_SIDE || height < MIN_SIDE {
        bail_invalid!("crop {width}x{height} below the {MIN_SIDE}px minimum");
    }
    let mut pixels = Vec::with_capacity(width * height * 3);
    for yy in y..y + height {
        let start = (yy * image.width + x) * 3;
        pixels.extend_from_slice(&image.pixels[start..start + width * 3]);
    }
    ImageAsset::new(&image.id, width, height, pixels)
}

// --- block-DCT recompression -------------------------------------------

// Standard luminance/chrominance quantization tables.
#[rustfmt::skip]
const LUMA_Q: [i32; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61,
    12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77,
    24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
];

#[rustfmt::skip]
const CHROMA_Q: [i32; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99,
    18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99,
    47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
];

fn scaled_table(base: &[i32; 64], quality: u8) -> [f64; 64] {
    let q = quality as i32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0.0; 64];
    for i in 0..64 {
        let v = (base[i] * scale + 50) / 100;
        out[i] = v.clamp(1, 255) as f64;
    }
    out
}

fn recompress(image: &ImageAsset, quality: u8) -> Result<ImageAsset> {
    if quality == 0 || quality > 100 {
        bail_invalid!("recompress quality must be 1-100");
    }
    let planes = to_ycbcr(image);
    let lq = scaled_table(&LUMA_Q, quality);
    let cq = scaled_table(&CHROMA_Q, quality);
    let y = quantize_plane(&planes.y, image.width, image.height, &lq);
    let cb = quantize_plane(&planes.cb, image.width, image.height, &cq);
    let cr = quantize_plane(&planes.cr, image.width, image.height, &cq);
    let mut pixels = Vec::with_capacity(image.pixels.len());
    for i in 0..image.width * image.height {
        let rgb = ycbcr_to_rgb(y[i], cb[i], cr[i]);
        pixels.extend_from_slice(&rgb);
    }
    ImageAsset::new(&image.id, image.width, image.height, pixels)
}

/// Forward DCT, quantize, dequantize, inverse DCT on every 8x8 block.
/// Edges are handled by replicating the last row/column.
fn quantize_plane(plane: &[f64], width: usize, height: usize, table: &[f64; 64]) -> Vec<f64> {
    let cos = dct_basis();
    let mut out = alloc::vec![0.0f64; width * height];
    let mut block = [0.0f64; 64];
    let mut coef = [0.0f64; 64];
    for by in (0..height).step_by(8) {
        for bx in (0..width).step_by(8) {
            for v in 0..8 {
                for u in 0..8 {
                    let sy = (by + v).min(height - 1);
                    let sx = (bx + u).min(width - 1);
                    block[v * 8 + u] = plane[sy * width + sx] - 128.0;
                }
            }
            dct_forward(&block, &cos, &mut coef);
            for i in 0..64 {
                coef[i] = math::round_ties_even(coef[i] / table[i]) * table[i];
            }
            dct_inverse(&coef, &cos, &mut block);
            for v in 0..8 {
                for u in 0..8 {
                    let sy = by + v;
                    let sx = bx + u;
                    if sy < height && sx < width {
                        out[sy * width + sx] = block[v * 8 + u] + 128.0;
                    }
                }
            }
        }
    }
    out
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut cos = [[0.0f64; 8]; 8];
    for k in 0..8 {
        for n in 0..8 {
            cos[k][n] = libm::cos(core::f64::consts::PI * (2.0 * n as f64 + 1.0) * k as f64 / 16.0);
        }
    }
    cos
}

fn alpha(k: usize) -> f64 {
    if k == 0 {
        0.353_553_390_593_273_8 // 1/sqrt(8)
    } else {
        0.5
    }
}

fn dct_forward(block: &[f64; 64], cos: &[[f64; 8]; 8], coef: &mut [f64; 64]) {
    let mut tmp = [0.0f64; 64];
    // rows
    for v in 0..8 {
        for k in 0..8 {
            let mut s = 0.0;
            for n in 0..8 {
                s += block[v * 8 + n] * cos[k][n];
            }
            tmp[v * 8 + k] = alpha(k) * s;
        }
    }
    // columns
    for k in 0..8 {
        for u in 0..8 {
            let mut s = 0.0;
            for n in 0..8 {
                s += tmp[n * 8 + u] * cos[k][n];
            }
            coef[k * 8 + u] = alpha(k) * s;
        }
    }
}

fn dct_inverse(coef: &[f64; 64], cos: &[[f64; 8]; 8], block: &mut [f64; 64]) {
    let mut tmp = [0.0f64; 64];
    // columns
    for n in 0..8 {
        for u in 0..8 {
            let mut s = 0.0;
            for k in 0..8 {
                s += alpha(k) * coef[k * 8 + u] * cos[k][n];
            }
            tmp[n * 8 + u] = s;
        }
    }
    // rows
    for v in 0..8 {
        for n in 0..8 {
            let mut s = 0.0;
            for k in 0..8 {
                s += alpha(k) * tmp[v * 8 + k] * cos[k][n];
            }
            block[v * 8 + n] = s;
        }
    }
}
