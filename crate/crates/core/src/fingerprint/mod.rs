//! Content fingerprints: compact 256-D unit embeddings of images, used as
//! the registry key.
//!
//! The reference encoder is a deterministic surrogate for a trained
//! network: multi-scale block statistics of the image, contrast-normalized
//! per group, projected through a fixed seeded orthonormal matrix and
//! unit-normalized. It is robust to the mild perturbation suite and needs
//! no training; any alternative encoder can stand behind the same
//! interface.

mod contrastive;
mod fixed;
mod perturb;

pub use contrastive::{contrastive_loss, ContrastiveBatch, ContrastiveLossOutput};
pub use fixed::{
    decode_export_record, encode_export_record, fixed_point_similarity, from_fixed_point,
    to_fixed_point, FixedPointVector, COMPONENT_BOUND, SCALE,
};
pub use perturb::{apply_perturbation, mild_suite, Perturbation};

use alloc::vec::Vec;

use crate::error::{bail_invalid, Result};
use crate::image::{resample_plane, to_ycbcr, ImageAsset};
use crate::math;
use crate::rng::Rng;

/// Embedding dimensionality.
pub const DIM: usize = 256;

/// Working resolution of the surrogate encoder.
const BASE: usize = 64;
/// Block grid side at every scale.
const GRID: usize = 8;
/// Scales: 64x64, 32x32, 16x16.
const SCALES: [usize; 3] = [64, 32, 16];
/// Per scale: Y/Cb/Cr block means + horizontal/vertical gradient energy.
const GROUPS_PER_SCALE: usize = 5;
/// Raw feature length: 5 groups x 64 blocks x 3 scales + 3 global means.
pub const RAW_DIM: usize = GROUPS_PER_SCALE * GRID * GRID * SCALES.len() + 3;

/// A unit-norm 256-D embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Fingerprint {
    values: [f64; DIM],
}

impl Fingerprint {
    /// Wrap raw components, enforcing finiteness and the unit-norm
    /// invariant (within 1e-6).
    pub fn new(values: [f64; DIM]) -> Result<Self> {
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() {
                bail_invalid!("fingerprint component {i} not finite");
            }
        }
        let norm = math::l2_norm(&values);
        if math::abs(norm - 1.0) > 1e-6 {
            bail_invalid!("fingerprint norm {norm} departs from 1 by more than 1e-6");
        }
        Ok(Fingerprint { values })
    }

    /// Wrap raw components without the unit-norm check. For gradient
    /// checks and oracles that must evaluate the loss off the sphere; the
    /// registry paths always go through `new`.
    pub fn new_unchecked(values: [f64; DIM]) -> Self {
        Fingerprint { values }
    }

    #[inline]
    pub fn values(&self) -> &[f64; DIM] {
        &self.values
    }

    pub fn cosine(&self, other: &Fingerprint) -> f64 {
        math::dot(&self.values, &other.values)
    }
}

/// The deterministic surrogate encoder. Construct once (the projection is
/// derived from the seed) and reuse; `compute` is a pure function of the
/// image bytes.
pub struct Fingerprinter {
    projection: Vec<[f64; DIM]>, // RAW_DIM rows, each a 256-wide column slice
}

impl Fingerprinter {
    pub fn new(seed: u64) -> Self {
        Fingerprinter {
            projection: orthonormal_projection(seed),
        }
    }

    /// Compute the unit-norm fingerprint of an image.
    pub fn compute(&self, image: &ImageAsset) -> Result<Fingerprint> {
        let raw = raw_features(image);
        let mut out = [0.0f64; DIM];
        for (i, row) in self.projection.iter().enumerate() {
            let x = raw[i];
            if x == 0.0 {
                continue;
            }
            for d in 0..DIM {
                out[d] += x * row[d];
            }
        }
        if !math::normalize(&mut out) {
            // fully degenerate content (e.g. an all-black constant image):
            // fall back to a fixed axis so the contract still holds
            out = [0.0; DIM];
            out[0] = 1.0;
        }
        Fingerprint::new(out)
    }
}

/// Multi-scale block statistics, contrast-normalized per group.
fn raw_features(image: &ImageAsset) -> Vec<f64> {
    let planes = to_ycbcr(image);
    let y64 = resample_plane(&planes.y, planes.width, planes.height, BASE, BASE);
    let cb64 = resample_plane(&planes.cb, planes.width, planes.height, BASE, BASE);
    let cr64 = resample_plane(&planes.cr, planes.width, planes.height, BASE, BASE);

    let mut raw = Vec::with_capacity(RAW_DIM);
    let mut y_scale = y64.clone();
    let mut cb_scale = cb64.clone();
    let mut cr_scale = cr64.clone();
    let mut side = BASE;
    for (s, &target) in SCALES.iter().enumerate() {
        if s > 0 {
            y_scale = resample_plane(&y_scale, side, side, target, target);
            cb_scale = resample_plane(&cb_scale, side, side, target, target);
            cr_scale = resample_plane(&cr_scale, side, side, target, target);
            side = target;
        }
        let block = side / GRID;
        push_group(&mut raw, &block_means(&y_scale, side, block));
        push_group(&mut raw, &block_means(&cb_scale, side, block));
        push_group(&mut raw, &block_means(&cr_scale, side, block));
        let (gh, gv) = gradient_energies(&y_scale, side, block);
        push_group(&mut raw, &gh);
        push_group(&mut raw, &gv);
    }
    // faint un-normalized global means keep flat images distinguishable
    let n = (BASE * BASE) as f64;
    raw.push(y64.iter().sum::<f64>() / n / 255.0 * 0.05);
    raw.push(cb64.iter().sum::<f64>() / n / 255.0 * 0.05);
    raw.push(cr64.iter().sum::<f64>() / n / 255.0 * 0.05);
    debug_assert_eq!(raw.len(), RAW_DIM);
    raw
}

/// Mean-subtract and L2-normalize a feature group, making it invariant to
/// per-group affine gain (the footprint of mild color jitter).
fn push_group(raw: &mut Vec<f64>, group: &[f64]) {
    let mean = group.iter().sum::<f64>() / group.len() as f64;
    let mut g: Vec<f64> = group.iter().map(|v| v - mean).collect();
    if !math::normalize(&mut g) {
        g.iter_mut().for_each(|v| *v = 0.0);
    }
    raw.extend_from_slice(&g);
}

fn block_means(plane: &[f64], side: usize, block: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(GRID * GRID);
    for by in 0..GRID {
        for bx in 0..GRID {
            let mut acc = 0.0;
            for yy in 0..block {
                for xx in 0..block {
                    acc += plane[(by * block + yy) * side + bx * block + xx];
                }
            }
            out.push(acc / (block * block) as f64);
        }
    }
    out
}

fn gradient_energies(plane: &[f64], side: usize, block: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gh = Vec::with_capacity(GRID * GRID);
    let mut gv = Vec::with_capacity(GRID * GRID);
    for by in 0..GRID {
        for bx in 0..GRID {
            let mut h = 0.0;
            let mut v = 0.0;
            for yy in 0..block {
                for xx in 0..block {
                    let y = by * block + yy;
                    let x = bx * block + xx;
                    if x + 1 < side {
                        let d = plane[y * side + x + 1] - plane[y * side + x];
                        h += d * d;
                    }
                    if y + 1 < side {
                        let d = plane[(y + 1) * side + x] - plane[y * side + x];
                        v += d * d;
                    }
                }
            }
            let n = (block * block) as f64;
            gh.push(math::sqrt(h / n));
            gv.push(math::sqrt(v / n));
        }
    }
    (gh, gv)
}

/// Seeded random rows orthonormalized against each other. Rows live in
/// RAW_DIM-space; the transpose maps raw features into the 256-D embedding.
fn orthonormal_projection(seed: u64) -> Vec<[f64; DIM]> {
    let mut rng = Rng::new(seed).fork("fingerprint-projection");
    // build DIM orthonormal vectors of length RAW_DIM, then store transposed
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(DIM);
    while basis.len() < DIM {
        let mut v: Vec<f64> = (0..RAW_DIM).map(|_| rng.next_gaussian()).collect();
        for b in &basis {
            let proj = math::dot(&v, b);
            for i in 0..RAW_DIM {
                v[i] -= proj * b[i];
            }
        }
        if math::normalize(&mut v) {
            basis.push(v);
        }
    }
    let mut rows = alloc::vec![[0.0f64; DIM]; RAW_DIM];
    for (d, b) in basis.iter().enumerate() {
        for i in 0..RAW_DIM {
            rows[i][d] = b[i];
        }
    }
    rows
}
