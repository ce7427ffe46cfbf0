//! Fixed-point form of fingerprints for on-chain storage and arithmetic.
//!
//! Components are signed integers at scale 10^15: integer `n` encodes the
//! real value `n / 10^15`. All dot products run in 128-bit intermediates.

use alloc::vec::Vec;

use crate::error::{bail_invalid, Result};
use crate::math;

use super::{Fingerprint, DIM};

/// Scale factor: one real unit.
pub const SCALE: i64 = 1_000_000_000_000_000;

/// Per-component magnitude bound. Unit-vector components stay at or below
/// SCALE; the 2x headroom keeps the float round trip exact (|n|/SCALE <= 2
/// is below 2^52, so the division error never reaches 0.5 of an integer
/// step) and makes overflow of the 128-bit dot product impossible
/// (256 * (2*10^15)^2 << i128::MAX).
pub const COMPONENT_BOUND: i64 = 2 * SCALE;

/// A 256-component fixed-point vector.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FixedPointVector {
    values: [i64; DIM],
}

impl FixedPointVector {
    pub fn new(values: [i64; DIM]) -> Result<Self> {
        for (i, &v) in values.iter().enumerate() {
            if v.abs() > COMPONENT_BOUND {
                bail_invalid!("fixed-point component {i} = {v} exceeds bound {COMPONENT_BOUND}");
            }
        }
        Ok(FixedPointVector { values })
    }

    pub fn from_slice(values: &[i64]) -> Result<Self> {
        if values.len() != DIM {
            bail_invalid!("fixed-point vector needs {DIM} components, got {}", values.len());
        }
        let mut arr = [0i64; DIM];
        arr.copy_from_slice(values);
        FixedPointVector::new(arr)
    }

    #[inline]
    pub fn values(&self) -> &[i64; DIM] {
        &self.values
    }

    /// Little-endian byte image, 8 bytes per component.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(DIM * 8);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != DIM * 8 {
            bail_invalid!("fixed-point byte image must be {} bytes, got {}", DIM * 8, bytes.len());
        }
        let mut arr = [0i64; DIM];
        for (i, chunk) in bytes.chunks_exact(8).enumerate() {
            arr[i] = i64::from_le_bytes(chunk.try_into().unwrap());
        }
        FixedPointVector::new(arr)
    }
}

/// Encode a fingerprint at scale 10^15, rounding ties to even.
pub fn to_fixed_point(fp: &Fingerprint) -> Result<FixedPointVector> {
    let mut arr = [0i64; DIM];
    for (i, &v) in fp.values().iter().enumerate() {
        if !v.is_finite() {
            bail_invalid!("fingerprint component {i} is not finite");
        }
        arr[i] = math::round_ties_even(v * SCALE as f64) as i64;
    }
    FixedPointVector::new(arr)
}

/// Decode back to real components (n / 10^15). The result is not
/// necessarily unit-norm; callers that need a `Fingerprint` must go through
/// `Fingerprint::new` which enforces the norm invariant.
pub fn from_fixed_point(v: &FixedPointVector) -> [f64; DIM] {
    let mut out = [0.0f64; DIM];
    for (i, &n) in v.values().iter().enumerate() {
        out[i] = n as f64 / SCALE as f64;
    }
    out
}

/// Export record: length-prefixed asset id + 256 little-endian i64
/// components.
pub fn encode_export_record(asset_id: &str, v: &FixedPointVector) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + asset_id.len() + DIM * 8);
    out.extend_from_slice(&(asset_id.len() as u32).to_le_bytes());
    out.extend_from_slice(asset_id.as_bytes());
    out.extend_from_slice(&v.to_le_bytes());
    out
}

/// Decode one export record, returning (asset id, vector, bytes consumed).
pub fn decode_export_record(bytes: &[u8]) -> Result<(alloc::string::String, FixedPointVector, usize)> {
    if bytes.len() < 4 {
        bail_invalid!("export record truncated");
    }
    let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    if bytes.len() < 4 + len + DIM * 8 {
        bail_invalid!("export record truncated");
    }
    let id = alloc::string::String::from_utf8(bytes[4..4 + len].to_vec())
        .map_err(|_| crate::error::Error::Decode("asset id is not utf-8".into()))?;
    let v = FixedPointVector::from_le_bytes(&bytes[4 + len..4 + len + DIM * 8])?;
    Ok((id, v, 4 + len + DIM * 8))
}

/// Dot product at scale 10^15: round(sum(a_i * b_i) / 10^15).
///
/// Equals the cosine similarity of the encoded vectors at scale 10^15 when
/// both encode unit vectors. Runs entirely in integer arithmetic, so the
/// result is identical wherever it executes.
pub fn fixed_point_similarity(a: &FixedPointVector, b: &FixedPointVector) -> i64 {
    let mut acc: i128 = 0;
    for i in 0..DIM {
        // bound checked at construction: |a_i * b_i| <= 4*10^30, and the
        // 256-term sum stays far below i128::MAX
        acc += a.values[i] as i128 * b.values[i] as i128;
    }
    div_round_half_even(acc, SCALE as i128)
}

/// Divide with ties-to-even rounding on the half-way point.
fn div_round_half_even(n: i128, d: i128) -> i64 {
    let q = n / d;
    let r = n % d;
    let half = d / 2; // d is even (10^15)
    let (q, r_abs) = (q, r.abs());
    let adj = if r_abs > half {
        1
    } else if r_abs == half {
        i128::from(q % 2 != 0)
    } else {
        0
    };
    let out = if n < 0 { q - adj } else { q + adj };
    out as i64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn unit(values: [f64; DIM]) -> Fingerprint {
        Fingerprint::new(values).unwrap()
    }

    fn random_unit(rng: &mut Rng) -> Fingerprint {
        let mut v = [0.0; DIM];
        for x in v.iter_mut() {
            *x = rng.next_gaussian();
        }
        crate::math::normalize(&mut v);
        unit(v)
    }

    #[test]
    fn encode_known_components() {
        let mut v = [0.0; DIM];
        v[0] = 0.5;
        v[1] = -math::sqrt(0.75);
        let mut raw = v;
        crate::math::normalize(&mut raw);
        // construct directly without renormalizing: 0.5^2 + 0.75 = 1
        let fp = unit(v);
        let fx = to_fixed_point(&fp).unwrap();
        assert_eq!(fx.values()[0], 500_000_000_000_000);
        assert_eq!(fx.values()[2], 0);
    }

    #[test]
    fn scale_boundary() {
        let mut v = [0.0; DIM];
        v[7] = -1.0;
        let fx = to_fixed_point(&unit(v)).unwrap();
        assert_eq!(fx.values()[7], -SCALE);
    }

    #[test]
    fn round_trip_exact_on_random_units() {
        let mut rng = Rng::new(11);
        for _ in 0..100 {
            let fp = random_unit(&mut rng);
            let fx = to_fixed_point(&fp).unwrap();
            let reals = from_fixed_point(&fx);
            let mut arr = [0i64; DIM];
            for (i, &r) in reals.iter().enumerate() {
                arr[i] = math::round_ties_even(r * SCALE as f64) as i64;
            }
            assert_eq!(&arr, fx.values(), "decode-encode must be identity");
        }
    }

    #[test]
    fn self_similarity_near_scale() {
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let fx = to_fixed_point(&random_unit(&mut rng)).unwrap();
            let s = fixed_point_similarity(&fx, &fx);
            assert!((s - SCALE).abs() <= 256, "self similarity {s}");
        }
    }

    #[test]
    fn orthogonal_axes_are_zero() {
        let mut a = [0i64; DIM];
        let mut b = [0i64; DIM];
        a[0] = SCALE;
        b[1] = SCALE;
        let a = FixedPointVector::new(a).unwrap();
        let b = FixedPointVector::new(b).unwrap();
        assert_eq!(fixed_point_similarity(&a, &b), 0);
    }

    #[test]
    fn matches_float_oracle() {
        let mut rng = Rng::new(99);
        for _ in 0..50 {
            let fa = random_unit(&mut rng);
            let fb = random_unit(&mut rng);
            let xa = to_fixed_point(&fa).unwrap();
            let xb = to_fixed_point(&fb).unwrap();
            let fixed = fixed_point_similarity(&xa, &xb);
            let float = math::dot(fa.values(), fb.values());
            let oracle = math::round_ties_even(float * SCALE as f64) as i64;
            assert!(
                (fixed - oracle).abs() <= 1_000,
                "fixed {fixed} oracle {oracle}"
            );
        }
    }

    #[test]
    fn symmetric_exactly() {
        let mut rng = Rng::new(123);
        for _ in 0..20 {
            let a = to_fixed_point(&random_unit(&mut rng)).unwrap();
            let b = to_fixed_point(&random_unit(&mut rng)).unwrap();
            assert_eq!(fixed_point_similarity(&a, &b), fixed_point_similarity(&b, &a));
        }
    }

    #[test]
    fn rejects_out_of_bound_components() {
        let mut arr = [0i64; DIM];
        arr[0] = COMPONENT_BOUND + 1;
        assert!(FixedPointVector::new(arr).is_err());
    }

    #[test]
    fn rejects_non_finite_components() {
        let mut v = [0.0; DIM];
        v[0] = 1.0;
        let mut fp = Fingerprint::new(v).unwrap();
        fp = Fingerprint::new_unchecked({
            let mut raw = *fp.values();
            raw[3] = f64::NAN;
            raw
        });
        assert!(to_fixed_point(&fp).is_err());
    }

    #[test]
    fn decode_scale_boundaries() {
        let mut arr = [0i64; DIM];
        arr[0] = SCALE;
        let v = FixedPointVector::new(arr).unwrap();
        let reals = from_fixed_point(&v);
        assert_eq!(reals[0], 1.0);
        assert!(reals[1..].iter().all(|&r| r == 0.0));
        let zero = FixedPointVector::new([0i64; DIM]).unwrap();
        assert!(from_fixed_point(&zero).iter().all(|&r| r == 0.0));
        // the all-zero decode has no valid Fingerprint form
        assert!(Fingerprint::new(from_fixed_point(&zero)).is_err());
    }

    #[test]
    fn export_record_round_trip() {
        let mut arr = [0i64; DIM];
        arr[0] = -SCALE;
        arr[100] = 77;
        let v = FixedPointVector::new(arr).unwrap();
        let bytes = encode_export_record("asset-000042", &v);
        let (id, back, used) = decode_export_record(&bytes).unwrap();
        assert_eq!(id, "asset-000042");
        assert_eq!(back, v);
        assert_eq!(used, bytes.len());
        assert!(decode_export_record(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn byte_image_round_trip() {
        let mut arr = [0i64; DIM];
        arr[0] = -42;
        arr[255] = SCALE;
        let v = FixedPointVector::new(arr).unwrap();
        assert_eq!(FixedPointVector::from_le_bytes(&v.to_le_bytes()).unwrap(), v);
    }
}
