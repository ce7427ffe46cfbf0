//! The contrastive training objective over fingerprint batches, as a
//! testable function with analytic gradients.
//!
//! For a batch of anchors phi_i and positives phihat_i,
//!
//!   L = -sum_i log( d(phi_i, phihat_i)
//!                   / (d(phi_i, phihat_i) + sum_{j != i} d(phi_i, phi_j)) )
//!
//! where d(a, b) = exp(cos(a, b) / temperature). Gradients are taken with
//! respect to every fingerprint, through the norm terms of the cosine, so
//! they match finite differences off the unit sphere too.

use alloc::vec::Vec;

use crate::error::{bail_invalid, Result};
use crate::math;

use super::{Fingerprint, DIM};

#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub anchors: Vec<Fingerprint>,
    pub positives: Vec<Fingerprint>,
    /// Temperature of the similarity kernel; must be positive.
    pub temperature: f64,
}

impl ContrastiveBatch {
    pub fn new(
        anchors: Vec<Fingerprint>,
        positives: Vec<Fingerprint>,
        temperature: f64,
    ) -> Result<Self> {
        if anchors.len() != positives.len() {
            bail_invalid!(
                "anchor/positive length mismatch: {} vs {}",
                anchors.len(),
                positives.len()
            );
        }
        if anchors.is_empty() {
            bail_invalid!("batch must be non-empty");
        }
        if !(temperature > 0.0) {
            bail_invalid!("temperature must be > 0, got {temperature}");
        }
        Ok(ContrastiveBatch { anchors, positives, temperature })
    }
}

#[derive(Debug, Clone)]
pub struct ContrastiveLossOutput {
    pub loss: f64,
    /// d loss / d anchor_i, one 256-vector per batch element.
    pub anchor_grads: Vec<[f64; DIM]>,
    /// d loss / d positive_i.
    pub positive_grads: Vec<[f64; DIM]>,
}

/// Similarity kernel value and its partials with respect to both arguments.
fn kernel(a: &[f64; DIM], b: &[f64; DIM], temperature: f64) -> (f64, [f64; DIM], [f64; DIM]) {
    let na = math::l2_norm(a);
    let nb = math::l2_norm(b);
    let dot = math::dot(a, b);
    let cos = dot / (na * nb);
    let d = math::exp(cos / temperature);
    let scale = d / temperature;
    let mut ga = [0.0; DIM];
    let mut gb = [0.0; DIM];
    for i in 0..DIM {
        // d cos / d a_i = b_i/(|a||b|) - cos * a_i/|a|^2
        ga[i] = scale * (b[i] / (na * nb) - cos * a[i] / (na * na));
        gb[i] = scale * (a[i] / (na * nb) - cos * b[i] / (nb * nb));
    }
    (d, ga, gb)
}

pub fn contrastive_loss(batch: &ContrastiveBatch) -> Result<ContrastiveLossOutput> {
    let n = batch.anchors.len();
    let t = batch.temperature;
    if !(t > 0.0) {
        bail_invalid!("temperature must be > 0");
    }

    // kernel values and grads for the positive pairs
    let mut pos: Vec<(f64, [f64; DIM], [f64; DIM])> = Vec::with_capacity(n);
    for i in 0..n {
        pos.push(kernel(batch.anchors[i].values(), batch.positives[i].values(), t));
    }
    // kernel values and grads for anchor-anchor pairs, computed once per
    // ordered pair that the loss references
    let mut denom = alloc::vec![0.0f64; n];
    for i in 0..n {
        denom[i] = pos[i].0;
    }
    let mut cross: Vec<Vec<(f64, [f64; DIM], [f64; DIM])>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = Vec::with_capacity(n);
        for j in 0..n {
            if i == j {
                row.push((0.0, [0.0; DIM], [0.0; DIM]));
                continue;
            }
            let k = kernel(batch.anchors[i].values(), batch.anchors[j].values(), t);
            denom[i] += k.0;
            row.push(k);
        }
        cross.push(row);
    }

    let mut loss = 0.0;
    let mut anchor_grads = alloc::vec![[0.0f64; DIM]; n];
    let mut positive_grads = alloc::vec![[0.0f64; DIM]; n];
    for i in 0..n {
        let num = pos[i].0;
        loss += math::ln(denom[i]) - math::ln(num);
        // the positive-pair kernel appears in numerator and denominator
        let c = 1.0 / denom[i] - 1.0 / num;
        for d in 0..DIM {
            anchor_grads[i][d] += c * pos[i].1[d];
            positive_grads[i][d] += c * pos[i].2[d];
        }
        for j in 0..n {
            if i == j {
                continue;
            }
            let k = &cross[i][j];
            let w = 1.0 / denom[i];
            for d in 0..DIM {
                anchor_grads[i][d] += w * k.1[d];
                anchor_grads[j][d] += w * k.2[d];
            }
        }
    }

    Ok(ContrastiveLossOutput { loss, anchor_grads, positive_grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_unit(rng: &mut Rng) -> Fingerprint {
        let mut v = [0.0; DIM];
        for x in v.iter_mut() {
            *x = rng.next_gaussian();
        }
        math::normalize(&mut v);
        Fingerprint::new(v).unwrap()
    }

    fn random_batch(seed: u64, n: usize, temperature: f64) -> ContrastiveBatch {
        let mut rng = Rng::new(seed);
        let anchors: Vec<_> = (0..n).map(|_| random_unit(&mut rng)).collect();
        let positives: Vec<_> = (0..n).map(|_| random_unit(&mut rng)).collect();
        ContrastiveBatch::new(anchors, positives, temperature).unwrap()
    }

    /// Straight-line re-implementation used as the oracle: no shared
    /// kernels, no gradient bookkeeping.
    fn brute_force_loss(anchors: &[Vec<f64>], positives: &[Vec<f64>], t: f64) -> f64 {
        let d = |a: &[f64], b: &[f64]| {
            let cos = math::dot(a, b) / (math::l2_norm(a) * math::l2_norm(b));
            math::exp(cos / t)
        };
        let n = anchors.len();
        let mut loss = 0.0;
        for i in 0..n {
            let num = d(&anchors[i], &positives[i]);
            let mut den = num;
            for j in 0..n {
                if j != i {
                    den += d(&anchors[i], &anchors[j]);
                }
            }
            loss -= math::ln(num / den);
        }
        loss
    }

    #[test]
    fn singleton_batch_is_zero() {
        let b = random_batch(1, 1, 0.1);
        let out = contrastive_loss(&b).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.anchor_grads[0].iter().all(|&g| g == 0.0));
        assert!(out.positive_grads[0].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn matches_brute_force_oracle() {
        for seed in 0..5 {
            let b = random_batch(seed, 4, 0.1);
            let out = contrastive_loss(&b).unwrap();
            let a: Vec<Vec<f64>> = b.anchors.iter().map(|f| f.values().to_vec()).collect();
            let p: Vec<Vec<f64>> = b.positives.iter().map(|f| f.values().to_vec()).collect();
            let oracle = brute_force_loss(&a, &p, 0.1);
            assert!((out.loss - oracle).abs() <= 1e-10, "{} vs {}", out.loss, oracle);
        }
    }

    #[test]
    fn loss_is_nonnegative() {
        for seed in 10..16 {
            let b = random_batch(seed, 6, 0.1);
            assert!(contrastive_loss(&b).unwrap().loss >= 0.0);
        }
    }

    #[test]
    fn aligned_pairs_beat_random_batch() {
        // perfectly aligned pairs with strongly dissimilar negatives
        let mut anchors = Vec::new();
        for i in 0..4 {
            let mut v = [0.0; DIM];
            v[i] = 1.0;
            anchors.push(Fingerprint::new(v).unwrap());
        }
        let aligned =
            ContrastiveBatch::new(anchors.clone(), anchors.clone(), 0.1).unwrap();
        let random = random_batch(77, 4, 0.1);
        let la = contrastive_loss(&aligned).unwrap().loss;
        let lr = contrastive_loss(&random).unwrap().loss;
        assert!(la < lr, "aligned {la} !< random {lr}");
    }

    #[test]
    fn rejects_bad_temperature() {
        let b = random_batch(3, 2, 0.1);
        assert!(ContrastiveBatch::new(b.anchors.clone(), b.positives.clone(), 0.0).is_err());
        assert!(ContrastiveBatch::new(b.anchors, b.positives, -1.0).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let h = 1e-5;
        for seed in 0..3 {
            let b = random_batch(seed + 40, 4, 0.1);
            let out = contrastive_loss(&b).unwrap();
            let eval = |anchors: &[Fingerprint], positives: &[Fingerprint]| {
                let a: Vec<Vec<f64>> = anchors.iter().map(|f| f.values().to_vec()).collect();
                let p: Vec<Vec<f64>> = positives.iter().map(|f| f.values().to_vec()).collect();
                brute_force_loss(&a, &p, 0.1)
            };
            let mut max_rel = 0.0f64;
            // probe a subset of coordinates to keep the test quick
            for i in 0..4 {
                for d in (0..DIM).step_by(37) {
                    for which in 0..2 {
                        let mut plus = (b.anchors.clone(), b.positives.clone());
                        let mut minus = (b.anchors.clone(), b.positives.clone());
                        {
                            let (target_p, target_m) = if which == 0 {
                                (&mut plus.0[i], &mut minus.0[i])
                            } else {
                                (&mut plus.1[i], &mut minus.1[i])
                            };
                            let mut vp = *target_p.values();
                            let mut vm = *target_m.values();
                            vp[d] += h;
                            vm[d] -= h;
                            // bypass the unit-norm check: evaluate the oracle
                            // on raw vectors
                            *target_p = Fingerprint { values: vp };
                            *target_m = Fingerprint { values: vm };
                        }
                        let fd = (eval(&plus.0, &plus.1) - eval(&minus.0, &minus.1)) / (2.0 * h);
                        let an = if which == 0 {
                            out.anchor_grads[i][d]
                        } else {
                            out.positive_grads[i][d]
                        };
                        let denom = an.abs().max(fd.abs()).max(1e-8);
                        max_rel = max_rel.max((an - fd).abs() / denom);
                    }
                }
            }
            assert!(max_rel <= 1e-4, "max relative error {max_rel}");
        }
    }
}
