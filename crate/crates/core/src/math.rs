//! Float helpers shared across modules. All transcendental functions go
//! through `libm` so the crate stays `no_std` and results do not depend on
//! the host libm.

pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

pub fn powf(x: f64, y: f64) -> f64 {
    libm::pow(x, y)
}

pub fn floor(x: f64) -> f64 {
    libm::floor(x)
}

pub fn abs(x: f64) -> f64 {
    libm::fabs(x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

/// Round to nearest integer, ties to even. Exact for |x| < 2^52.
pub fn round_ties_even(x: f64) -> f64 {
    let f = floor(x);
    let frac = x - f;
    if frac > 0.5 {
        f + 1.0
    } else if frac < 0.5 {
        f
    } else {
        // tie: pick the even neighbour
        if (f as i64) % 2 == 0 {
            f
        } else {
            f + 1.0
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn l2_norm(v: &[f64]) -> f64 {
    sqrt(dot(v, v))
}

/// Normalize in place; returns false (leaving v untouched) if the norm is
/// not usable.
pub fn normalize(v: &mut [f64]) -> bool {
    let n = l2_norm(v);
    if !n.is_finite() || n < 1e-12 {
        return false;
    }
    for x in v.iter_mut() {
        *x /= n;
    }
    true
}
