//! Procedural image synthesis: the seeded stand-in for a crawled corpus.
//!
//! Each image is a layered parametric texture (gradient background,
//! interference pattern, a handful of solid shapes) fully determined by a
//! seed, so corpora are reproducible byte for byte and fingerprints are
//! pairwise distinct. `generate_corpus` additionally mints a signed
//! manifest per image with seeded consent flags and creator wallets.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Result;
use crate::image::{clamp_u8, ImageAsset};
use crate::ledger::Address;
use crate::manifest::{
    sign_manifest, Assertion, Cid, ContentStore, Flag, Manifest, SignerKey,
    TrainingMiningAssertion, TrustList,
};
use crate::rng::Rng;

/// Generate one procedural image. Same (id, dimensions, seed) gives the
/// same bytes.
pub fn procedural_image(id: &str, width: usize, height: usize, seed: u64) -> ImageAsset {
    let mut rng = Rng::new(seed).fork("procedural-image");
    let w = width as f64;
    let h = height as f64;

    // background gradient
    let c0 = [rng.below(256) as f64, rng.below(256) as f64, rng.below(256) as f64];
    let c1 = [rng.below(256) as f64, rng.below(256) as f64, rng.below(256) as f64];
    let angle = rng.range_f64(0.0, core::f64::consts::PI);
    let (dx, dy) = (libm::cos(angle), libm::sin(angle));

    // sinusoidal interference layer
    let fx = rng.range_f64(1.0, 6.0);
    let fy = rng.range_f64(1.0, 6.0);
    let phase = rng.range_f64(0.0, core::f64::consts::TAU);
    let amp = rng.range_f64(8.0, 40.0);

    let mut pixels = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        for x in 0..width {
            let u = x as f64 / w;
            let v = y as f64 / h;
            let t = ((u - 0.5) * dx + (v - 0.5) * dy + 0.5).clamp(0.0, 1.0);
            let wave = amp
                * libm::sin(core::f64::consts::TAU * (fx * u + fy * v) + phase)
                * libm::sin(core::f64::consts::TAU * fy * v * 0.5 + phase * 0.3);
            for c in 0..3 {
                pixels.push(clamp_u8(c0[c] * (1.0 - t) + c1[c] * t + wave));
            }
        }
    }
    let mut img = ImageAsset::new(id, width, height, pixels).expect("generated image is valid");

    // solid shapes
    let shapes = 3 + rng.below(4) as usize;
    for _ in 0..shapes {
        let color = [rng.below(256) as u8, rng.below(256) as u8, rng.below(256) as u8];
        match rng.below(3) {
            0 => {
                // filled circle
                let cx = rng.range_f64(0.1, 0.9) * w;
                let cy = rng.range_f64(0.1, 0.9) * h;
                let r = rng.range_f64(0.05, 0.25) * w.min(h);
                for y in 0..height {
                    for x in 0..width {
                        let ddx = x as f64 - cx;
                        let ddy = y as f64 - cy;
                        if ddx * ddx + ddy * ddy <= r * r {
                            img.set_rgb(x, y, color);
                        }
                    }
                }
            }
            1 => {
                // filled rectangle
                let x0 = (rng.range_f64(0.0, 0.7) * w) as usize;
                let y0 = (rng.range_f64(0.0, 0.7) * h) as usize;
                let rw = ((rng.range_f64(0.1, 0.3) * w) as usize).max(2);
                let rh = ((rng.range_f64(0.1, 0.3) * h) as usize).max(2);
                for y in y0..(y0 + rh).min(height) {
                    for x in x0..(x0 + rw).min(width) {
                        img.set_rgb(x, y, color);
                    }
                }
            }
            _ => {
                // diagonal stripe band
                let offset = rng.range_f64(-0.5, 1.5);
                let slope = rng.range_f64(-1.5, 1.5);
                let thickness = rng.range_f64(0.03, 0.10);
                for y in 0..height {
                    for x in 0..width {
                        let u = x as f64 / w;
                        let v = y as f64 / h;
                        if libm::fabs(v - (slope * u + offset)) < thickness {
                            img.set_rgb(x, y, color);
                        }
                    }
                }
            }
        }
    }
    img
}

/// A deterministic geometric blend of source images: the stand-in for a
/// generated synthetic picture. One source dominates (largest share), the
/// rest contribute seeded rectangular patches, then a light global blend
/// ties the composition together.
pub fn composite_image(id: &str, sources: &[ImageAsset], seed: u64) -> ImageAsset {
    assert!(!sources.is_empty(), "composite needs at least one source");
    let mut rng = Rng::new(seed).fork("composite");
    let width = sources[0].width;
    let height = sources[0].height;
    let scaled: Vec<ImageAsset> = sources
        .iter()
        .map(|s| {
            if s.width == width && s.height == height {
                s.clone()
            } else {
                crate::image::resize(s, width, height).expect("resize for composite")
            }
        })
        .collect();

    // dominant base layer
    let mut img = scaled[0].clone();
    img.id = String::from(id);

    // small secondary patches so the dominant source stays verifiable
    for src in scaled.iter().skip(1) {
        let pw = (width as f64 * rng.range_f64(0.20, 0.30)) as usize;
        let ph = (height as f64 * rng.range_f64(0.20, 0.30)) as usize;
        let x0 = rng.below((width - pw) as u64 + 1) as usize;
        let y0 = rng.below((height - ph) as u64 + 1) as usize;
        for y in y0..y0 + ph {
            for x in x0..x0 + pw {
                img.set_rgb(x, y, src.rgb(x, y));
            }
        }
    }

    // faint global blend of every source keeps all contributors visible
    let n = scaled.len() as f64;
    for y in 0..height {
        for x in 0..width {
            let base = img.rgb(x, y);
            let mut acc = [0.0f64; 3];
            for src in &scaled {
                let p = src.rgb(x, y);
                for c in 0..3 {
                    acc[c] += p[c] as f64;
                }
            }
            let mut out = [0u8; 3];
            for c in 0..3 {
                out[c] = clamp_u8(0.92 * base[c] as f64 + 0.08 * acc[c] / n);
            }
            img.set_rgb(x, y, out);
        }
    }
    img
}

/// Standard corpus asset id for index `i`.
pub fn asset_id(i: usize) -> String {
    format!("asset-{i:06}")
}

/// Generate `n` corpus images with ids `asset-000000..`, each 128x128,
/// derived from `seed`.
pub fn generate_images(n: usize, seed: u64) -> Vec<ImageAsset> {
    let rng = Rng::new(seed).fork("corpus");
    (0..n)
        .map(|i| {
            let mut r = rng.fork(&asset_id(i));
            procedural_image(&asset_id(i), 128, 128, r.next_u64())
        })
        .collect()
}

/// One corpus member: the image, its stored manifest, and ground truth
/// about the seeded consent decision.
#[derive(Debug, Clone)]
pub struct CorpusAsset {
    pub image: ImageAsset,
    pub asset_cid: Cid,
    pub manifest_cid: Cid,
    pub wallet: Address,
    pub opted_in: bool,
}

pub struct CorpusBundle {
    pub assets: Vec<CorpusAsset>,
    pub trust: TrustList,
    pub signer: SignerKey,
}

/// Generate `n` images with signed manifests. A seeded fraction
/// (`opt_out_permille` out of 1000) carries not-allowed training flags.
/// Image bytes and manifests land in `store`.
pub fn generate_corpus(
    n: usize,
    seed: u64,
    opt_out_permille: u32,
    store: &mut dyn ContentStore,
) -> Result<CorpusBundle> {
    let signer = SignerKey::from_seed("corpus-signer", seed ^ 0x5167);
    let mut trust = TrustList::new();
    trust.add_signer(&signer);
    let mut flag_rng = Rng::new(seed).fork("consent-flags");
    let images = generate_images(n, seed);
    let mut assets = Vec::with_capacity(n);
    for (i, image) in images.into_iter().enumerate() {
        let asset_cid = store.put(&image.to_ppm())?;
        let wallet = Address::for_account(&format!("creator-{seed:x}-{i}"));
        let opted_in = flag_rng.below(1000) >= opt_out_permille as u64;
        let flags = if opted_in { Flag::Allowed } else { Flag::NotAllowed };
        let manifest = sign_manifest(
            Manifest::new(
                asset_cid.clone(),
                alloc::vec![
                    Assertion::TrainingMining(TrainingMiningAssertion::all(flags)),
                    Assertion::Wallet(wallet),
                    Assertion::Creator(format!("Creator {i}")),
                ],
                Vec::new(),
                &signer.id,
            ),
            &signer,
        )?;
        let manifest_cid = store.put(&manifest.to_bytes())?;
        assets.push(CorpusAsset { image, asset_cid, manifest_cid, wallet, opted_in });
    }
    Ok(CorpusBundle { assets, trust, signer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{verify_manifest, MemoryStore};

    #[test]
    fn generation_is_deterministic() {
        let a = generate_images(5, 42);
        let b = generate_images(5, 42);
        assert_eq!(a, b);
    }

    #[test]
    fn corpus_manifests_verify_and_flags_are_seeded() {
        let mut store = MemoryStore::new();
        let bundle = generate_corpus(20, 7, 300, &mut store).unwrap();
        assert_eq!(bundle.assets.len(), 20);
        let key = bundle.trust.key_of(&bundle.signer.id).unwrap();
        let mut out = 0;
        for a in &bundle.assets {
            let m = Manifest::from_bytes(&store.get(&a.manifest_cid).unwrap()).unwrap();
            assert!(verify_manifest(&m, key));
            assert_eq!(m.asset_cid, a.asset_cid);
            assert_eq!(m.wallet(), Some(&a.wallet));
            if !a.opted_in {
                out += 1;
            }
        }
        assert!(out > 0, "some assets opted out at 30%");
        // reproducible
        let mut store2 = MemoryStore::new();
        let bundle2 = generate_corpus(20, 7, 300, &mut store2).unwrap();
        for (x, y) in bundle.assets.iter().zip(&bundle2.assets) {
            assert_eq!(x.manifest_cid, y.manifest_cid);
            assert_eq!(x.opted_in, y.opted_in);
        }
    }

    #[test]
    fn different_seeds_differ() {
        let a = procedural_image("x", 64, 64, 1);
        let b = procedural_image("x", 64, 64, 2);
        assert_ne!(a.pixels, b.pixels);
    }

    #[test]
    fn composite_mixes_sources() {
        let srcs = generate_images(3, 9);
        let c = composite_image("synth", &srcs, 123);
        assert_eq!((c.width, c.height), (128, 128));
        assert_ne!(c.pixels, srcs[0].pixels);
        let again = composite_image("synth", &srcs, 123);
        assert_eq!(c, again);
    }
}
