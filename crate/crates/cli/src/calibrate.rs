//! Calibration run: measures the score separations the shipped constants
//! rest on, over the standard 100-image seeded corpus, and reports whether
//! the configured constants still clear every margin.

use optreg_core::config::Config;
use optreg_core::corpus;
use optreg_core::fingerprint::{apply_perturbation, mild_suite, Fingerprinter, Perturbation};
use optreg_core::matchnet::{FeatureExtractor, MatchScorer, ScorerWeights};
use optreg_core::math;
use optreg_core::Result;

pub struct CalibrationReport {
    pub noise_cos_min: f64,
    pub independent_t_max: f64,
    pub independent_t_p95: f64,
    pub perturbed_t_min: f64,
    pub perturbed_t_p05: f64,
    pub self_t: f64,
    pub suggested_noise_threshold: f64,
    pub suggested_scale: f64,
    pub suggested_bias: f64,
    pub configured_ok: bool,
    pub lines: Vec<String>,
}

/// The scorer's internal statistic under identity read-out weights:
/// t = logit(score) / 2.
fn t_of(scorer: &MatchScorer, a: &optreg_core::image::ImageAsset, b: &optreg_core::image::ImageAsset) -> Result<f64> {
    let s = scorer.score(a, b)?.0;
    Ok(math::ln(s / (1.0 - s)) / 2.0)
}

pub fn calibrate(seed: u64, cfg: &Config) -> Result<CalibrationReport> {
    let enc = Fingerprinter::new(cfg.fingerprint_seed);
    let identity = MatchScorer::new(
        FeatureExtractor::new(cfg.matchnet_seed),
        ScorerWeights::analytic(cfg.matchnet_seed, cfg.gem_p, 1.0, 0.0),
    )?;

    let mut noise_cos_min = 1.0f64;
    let mut independent_t = Vec::new();
    let mut perturbed_t = Vec::new();
    let mut self_t = f64::NEG_INFINITY;
    for i in 0..100u64 {
        let a = corpus::procedural_image(&format!("cal-a-{i}"), 128, 128, seed ^ i);
        let b = corpus::procedural_image(&format!("cal-b-{i}"), 128, 128, seed ^ (i + 1000));
        let fa = enc.compute(&a)?;
        let noisy = apply_perturbation(
            &a,
            &Perturbation::AdditiveNoise { sigma: cfg.noise_sigma, seed: seed ^ (i * 7 + 3) },
        )?;
        noise_cos_min = noise_cos_min.min(fa.cosine(&enc.compute(&noisy)?));
        independent_t.push(t_of(&identity, &a, &b)?);
        for p in mild_suite(cfg, seed ^ (i * 13 + 1)) {
            perturbed_t.push(t_of(&identity, &a, &apply_perturbation(&a, &p)?)?);
        }
        self_t = self_t.max(t_of(&identity, &a, &a)?);
    }
    independent_t.sort_by(|x, y| x.partial_cmp(y).unwrap());
    perturbed_t.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let independent_t_max = *independent_t.last().unwrap();
    let independent_t_p95 = independent_t[independent_t.len() * 95 / 100];
    let perturbed_t_min = perturbed_t[0];
    let perturbed_t_p05 = perturbed_t[perturbed_t.len() * 5 / 100];

    // the zero crossing sits between the independent tail and the
    // perturbed floor; the slope is set so self pairs clear 0.9 comfortably
    let crossing = (independent_t_max + perturbed_t_min) / 2.0;
    let suggested_scale = (20.0f64).max(3.5 / (2.0 * (self_t - crossing)));
    let suggested_bias = -suggested_scale * crossing;
    let suggested_noise_threshold = math::floor(noise_cos_min * 100.0) / 100.0;

    // decision margins under the configured constants
    let score = |t: f64| math::sigmoid(2.0 * (cfg.score_scale * t + cfg.score_bias));
    let self_score = score(self_t);
    let configured_ok = self_score >= 0.9
        && score(independent_t_p95) <= 0.5
        && score(perturbed_t_p05) >= cfg.lambda
        && score(independent_t_max) < cfg.lambda
        && cfg.noise_cos_threshold <= noise_cos_min;

    let lines = vec![
        format!("noise cosine: min {noise_cos_min:.4} (configured threshold {})", cfg.noise_cos_threshold),
        format!(
            "independent t: p95 {independent_t_p95:.4} max {independent_t_max:.4} -> score(p95) {:.4}",
            score(independent_t_p95)
        ),
        format!(
            "perturbed t: min {perturbed_t_min:.4} p05 {perturbed_t_p05:.4} -> score(p05) {:.4}",
            score(perturbed_t_p05)
        ),
        format!("self t: {self_t:.4} -> score {self_score:.4}"),
        format!(
            "suggested: noise_cos_threshold {suggested_noise_threshold:.2}, score_scale {suggested_scale:.1}, score_bias {suggested_bias:.3}"
        ),
        format!(
            "configured: score_scale {}, score_bias {} -> {}",
            cfg.score_scale,
            cfg.score_bias,
            if configured_ok { "all margins hold" } else { "MARGINS VIOLATED" }
        ),
    ];

    Ok(CalibrationReport {
        noise_cos_min,
        independent_t_max,
        independent_t_p95,
        perturbed_t_min,
        perturbed_t_p05,
        self_t,
        suggested_noise_threshold,
        suggested_scale,
        suggested_bias,
        configured_ok,
        lines,
    })
}
