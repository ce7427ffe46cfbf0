//! 8-bit RGB raster assets and the binary PPM (P6) container used for the
//! corpus on disk.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{bail_invalid, Error, Result};

/// Smallest image side the pipeline accepts.
pub const MIN_SIDE: usize = 8;

/// An 8-bit RGB image with an opaque identifier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageAsset {
    pub id: String,
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples, length = width * height * 3.
    pub pixels: Vec<u8>,
}

impl ImageAsset {
    pub fn new(id: &str, width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width < MIN_SIDE || height < MIN_SIDE {
            bail_invalid!("image {id}: {width}x{height} is below the {MIN_SIDE}px minimum");
        }
        if pixels.len() != width * height * 3 {
            bail_invalid!(
                "image {id}: buffer length {} != {}x{}x3",
                pixels.len(),
                width,
                height
            );
        }
        Ok(ImageAsset {
            id: id.to_string(),
            width,
            height,
            pixels,
        })
    }

    pub fn filled(id: &str, width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&rgb);
        }
        ImageAsset::new(id, width, height, pixels)
    }

    #[inline]
    pub fn rgb(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set_rgb(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i] = rgb[0];
        self.pixels[i + 1] = rgb[1];
        self.pixels[i + 2] = rgb[2];
    }

    /// Luma in [0, 255] as f64 (BT.601 weights).
    #[inline]
    pub fn luma(&self, x: usize, y: usize) -> f64 {
        let [r, g, b] = self.rgb(x, y);
        0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64
    }

    /// Encode as binary PPM (P6), the corpus container format.
    pub fn to_ppm(&self) -> Vec<u8> {
        let header = format!("P6\n{} {}\n255\n", self.width, self.height);
        let mut out = Vec::with_capacity(header.len() + self.pixels.len());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Decode a binary PPM (P6) payload.
    pub fn from_ppm(id: &str, bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let magic = take_token(bytes, &mut pos)?;
        if magic != b"P6" {
            return Err(Error::Decode("not a P6 ppm".into()));
        }
        let width = parse_usize(take_token(bytes, &mut pos)?)?;
        let height = parse_usize(take_token(bytes, &mut pos)?)?;
        let maxval = parse_usize(take_token(bytes, &mut pos)?)?;
        if maxval != 255 {
            return Err(Error::Decode(format!("unsupported maxval {maxval}")));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let need = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(3))
            .ok_or_else(|| Error::Decode("dimension overflow".into()))?;
        if bytes.len() < pos + need {
            return Err(Error::Decode("truncated raster".into()));
        }
        ImageAsset::new(id, width, height, bytes[pos..pos + need].to_vec())
    }
}

fn take_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    // skip whitespace and `#` comments
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Decode("unexpected end of ppm header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn parse_usize(tok: &[u8]) -> Result<usize> {
    let s = core::str::from_utf8(tok).map_err(|_| Error::Decode("bad ppm header".into()))?;
    s.parse::<usize>()
        .map_err(|_| Error::Decode(format!("bad ppm number {s:?}")))
}

/// Planar f64 view of an image in YCbCr, used by the feature extractors.
pub struct Planes {
    pub width: usize,
    pub height: usize,
    pub y: Vec<f64>,
    pub cb: Vec<f64>,
    pub cr: Vec<f64>,
}

pub fn to_ycbcr(img: &ImageAsset) -> Planes {
    let n = img.width * img.height;
    let mut y = Vec::with_capacity(n);
    let mut cb = Vec::with_capacity(n);
    let mut cr = Vec::with_capacity(n);
    for i in 0..n {
        let r = img.pixels[i * 3] as f64;
        let g = img.pixels[i * 3 + 1] as f64;
        let b = img.pixels[i * 3 + 2] as f64;
        y.push(0.299 * r + 0.587 * g + 0.114 * b);
        cb.push(128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b);
        cr.push(128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b);
    }
    Planes {
        width: img.width,
        height: img.height,
        y,
        cb,
        cr,
    }
}

pub fn ycbcr_to_rgb(y: f64, cb: f64, cr: f64) -> [u8; 3] {
    let r = y + 1.402 * (cr - 128.0);
    let g = y - 0.344136 * (cb - 128.0) - 0.714136 * (cr - 128.0);
    let b = y + 1.772 * (cb - 128.0);
    [clamp_u8(r), clamp_u8(g), clamp_u8(b)]
}

#[inline]
pub fn clamp_u8(v: f64) -> u8 {
    if v <= 0.0 {
        0
    } else if v >= 255.0 {
        255
    } else {
        crate::math::round_ties_even(v) as u8
    }
}

/// Area-weighted resample of a single plane to `dw` x `dh`. Deterministic
/// box filter: each destination cell averages the exact source rectangle
/// it covers.
pub fn resample_plane(src: &[f64], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dw * dh);
    let sx = sw as f64 / dw as f64;
    let sy = sh as f64 / dh as f64;
    for dy in 0..dh {
        let y0 = dy as f64 * sy;
        let y1 = (dy + 1) as f64 * sy;
        for dx in 0..dw {
            let x0 = dx as f64 * sx;
            let x1 = (dx + 1) as f64 * sx;
            let mut acc = 0.0;
            let mut area = 0.0;
            let iy0 = y0 as usize;
            let iy1 = (libm::ceil(y1) as usize).min(sh);
            let ix0 = x0 as usize;
            let ix1 = (libm::ceil(x1) as usize).min(sw);
            for yy in iy0..iy1 {
                let wy = overlap(yy as f64, yy as f64 + 1.0, y0, y1);
                if wy <= 0.0 {
                    continue;
                }
                for xx in ix0..ix1 {
                    let wx = overlap(xx as f64, xx as f64 + 1.0, x0, x1);
                    if wx <= 0.0 {
                        continue;
                    }
                    acc += src[yy * sw + xx] * wx * wy;
                    area += wx * wy;
                }
            }
            out.push(if area > 0.0 { acc / area } else { 0.0 });
        }
    }
    out
}

#[inline]
fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    let lo = if a0 > b0 { a0 } else { b0 };
    let hi = if a1 < b1 { a1 } else { b1 };
    if hi > lo {
        hi - lo
    } else {
        0.0
    }
}

/// Resample a full RGB image to new dimensions (area filter per channel).
pub fn resize(img: &ImageAsset, new_w: usize, new_h: usize) -> Result<ImageAsset> {
    if new_w < MIN_SIDE || new_h < MIN_SIDE {
        bail_invalid!("resize target {new_w}x{new_h} below minimum");
    }
    let n = img.width * img.height;
    let mut chans: [Vec<f64>; 3] = [
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    ];
    for i in 0..n {
        chans[0].push(img.pixels[i * 3] as f64);
        chans[1].push(img.pixels[i * 3 + 1] as f64);
        chans[2].push(img.pixels[i * 3 + 2] as f64);
    }
    let resampled: Vec<Vec<f64>> = chans
        .iter()
        .map(|c| resample_plane(c, img.width, img.height, new_w, new_h))
        .collect();
    let mut pixels = Vec::with_capacity(new_w * new_h * 3);
    for i in 0..new_w * new_h {
        pixels.push(clamp_u8(resampled[0][i]));
        pixels.push(clamp_u8(resampled[1][i]));
        pixels.push(clamp_u8(resampled[2][i]));
    }
    ImageAsset::new(&img.id, new_w, new_h, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_small_images() {
        assert!(ImageAsset::new("t", 4, 20, alloc::vec![0; 4 * 20 * 3]).is_err());
        assert!(ImageAsset::new("t", 20, 7, alloc::vec![0; 20 * 7 * 3]).is_err());
    }

    #[test]
    fn rejects_bad_buffer() {
        assert!(ImageAsset::new("t", 8, 8, alloc::vec![0; 10]).is_err());
    }

    #[test]
    fn ppm_round_trip() {
        let img = ImageAsset::filled("t", 9, 8, [10, 200, 30]).unwrap();
        let bytes = img.to_ppm();
        let back = ImageAsset::from_ppm("t", &bytes).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn ppm_with_comment() {
        let mut bytes = b"P6\n# a comment\n8 8\n255\n".to_vec();
        bytes.extend_from_slice(&[7u8; 8 * 8 * 3]);
        let img = ImageAsset::from_ppm("c", &bytes).unwrap();
        assert_eq!(img.rgb(3, 3), [7, 7, 7]);
    }

    #[test]
    fn ppm_truncated() {
        let img = ImageAsset::filled("t", 8, 8, [1, 2, 3]).unwrap();
        let bytes = img.to_ppm();
        assert!(ImageAsset::from_ppm("t", &bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn resample_constant_plane() {
        let src = alloc::vec![5.0; 16 * 16];
        let out = resample_plane(&src, 16, 16, 7, 5);
        assert_eq!(out.len(), 35);
        for v in out {
            assert!((v - 5.0).abs() < 1e-9);
        }
    }

    #[test]
    fn resize_preserves_mean_roughly() {
        let mut img = ImageAsset::filled("t", 32, 32, [0, 0, 0]).unwrap();
        for y in 0..32 {
            for x in 0..16 {
                img.set_rgb(x, y, [200, 200, 200]);
            }
        }
        let small = resize(&img, 16, 16).unwrap();
        let mean: f64 =
            (0..16 * 16).map(|i| small.pixels[i * 3] as f64).sum::<f64>() / 256.0;
        assert!((mean - 100.0).abs() < 2.0, "mean {mean}");
    }
}
