//! The sharded decentralized fingerprint index.
//!
//! Fingerprints are clustered into k shards; a hero contract holds the
//! centroids and routes every operation, one shard contract owns each
//! cluster. Three placement variants cover the key-value store
//! (in-contract vs event log) and where shard prediction / within-shard
//! retrieval run (on-chain vs off-chain). Off-chain shard indexers fold
//! the event log; queries end in a verified match against the content
//! store.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::error::{bail_invalid, Error, Result};
use crate::fingerprint::{
    fixed_point_similarity, to_fixed_point, Fingerprint, FixedPointVector, DIM,
};
use crate::image::ImageAsset;
use crate::ledger::{
    address_from_word, i64_from_word, slot, u64_from_word, word_from_address, word_from_i64,
    word_from_u64, Address, ExecCtx, Handler, HandlerRegistry, Ledger, Transaction, TxBody,
    TxReceipt, Word,
};
use crate::manifest::{Cid, ContentStore, Manifest};
use crate::matchnet::MatchScorer;
use crate::math;
use crate::rng::Rng;

// --- clustering ------------------------------------------------------------

/// Shard centroids in fixed-point form, plus the parameters that produced
/// them.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet {
    pub centroids: Vec<FixedPointVector>,
    pub seed: u64,
    pub tolerance: f64,
}

impl CentroidSet {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }
}

const MAX_KMEANS_ITERS: usize = 100;

/// Spherical k-means over unit fingerprints: k-means++ seeding, Lloyd
/// iterations until the largest centroid shift drops below `tolerance` or
/// 100 iterations pass. Deterministic for a given seed. Centroids are
/// unit-normalized, then fixed-point encoded.
pub fn cluster_corpus(
    fingerprints: &[Fingerprint],
    k: usize,
    seed: u64,
    tolerance: f64,
) -> Result<CentroidSet> {
    let n = fingerprints.len();
    if k == 0 {
        bail_invalid!("k must be >= 1");
    }
    if k > n {
        bail_invalid!("k = {k} exceeds corpus size {n}");
    }
    let points: Vec<&[f64; DIM]> = fingerprints.iter().map(|f| f.values()).collect();
    let mut rng = Rng::new(seed).fork("kmeans");

    // k-means++ seeding on the unit sphere (d^2 = 2 - 2 cos)
    let mut centroids: Vec<[f64; DIM]> = Vec::with_capacity(k);
    centroids.push(*points[rng.below(n as u64) as usize]);
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| 2.0 - 2.0 * math::dot(*p, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 1e-18 {
            // all points coincide with existing centroids; take any unseen
            fallback_unseen(&points, &centroids)
                .ok_or_else(|| Error::InvalidInput("fewer distinct fingerprints than k".into()))?
        } else {
            let mut target = rng.next_f64() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        };
        centroids.push(*points[next]);
        for (i, p) in points.iter().enumerate() {
            let d = 2.0 - 2.0 * math::dot(*p, centroids.last().unwrap());
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }

    // Lloyd iterations
    let mut assignment = alloc::vec![0usize; n];
    for _ in 0..MAX_KMEANS_ITERS {
        for (i, p) in points.iter().enumerate() {
            assignment[i] = nearest_centroid_f64(p, &centroids);
        }
        let mut sums = alloc::vec![[0.0f64; DIM]; k];
        let mut counts = alloc::vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            let c = assignment[i];
            counts[c] += 1;
            for d in 0..DIM {
                sums[c][d] += p[d];
            }
        }
        let mut shift = 0.0f64;
        for c in 0..k {
            let mut new_c = if counts[c] == 0 {
                // empty cluster: reseed to the point farthest from its
                // current centroid
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = 2.0 - 2.0 * math::dot(points[a], &centroids[assignment[a]]);
                        let db = 2.0 - 2.0 * math::dot(points[b], &centroids[assignment[b]]);
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                *points[far]
            } else {
                sums[c]
            };
            if !math::normalize(&mut new_c) {
                new_c = centroids[c];
            }
            let mut delta = 0.0;
            for d in 0..DIM {
                let e = new_c[d] - centroids[c][d];
                delta += e * e;
            }
            shift = shift.max(math::sqrt(delta));
            centroids[c] = new_c;
        }
        if shift < tolerance {
            break;
        }
    }

    let mut fixed = Vec::with_capacity(k);
    for c in &centroids {
        let fp = Fingerprint::new(*c)
            .map_err(|e| Error::InvalidInput(format!("degenerate centroid: {e}")))?;
        fixed.push(to_fixed_point(&fp)?);
    }
    let mut seen = BTreeSet::new();
    for c in &fixed {
        if !seen.insert(c.to_le_bytes()) {
            bail_invalid!("clustering produced duplicate centroids; reduce k");
        }
    }
    Ok(CentroidSet { centroids: fixed, seed, tolerance })
}

fn fallback_unseen(points: &[&[f64; DIM]], centroids: &[[f64; DIM]]) -> Option<usize> {
    points.iter().position(|p| {
        centroids.iter().all(|c| {
            let mut diff = 0.0;
            for d in 0..DIM {
                diff += (p[d] - c[d]) * (p[d] - c[d]);
            }
            diff > 1e-18
        })
    })
}

fn nearest_centroid_f64(p: &[f64; DIM], centroids: &[[f64; DIM]]) -> usize {
    let mut best = 0usize;
    let mut best_sim = f64::NEG_INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let s = math::dot(p, c);
        if s > best_sim {
            best_sim = s;
            best = i;
        }
    }
    best
}

/// Nearest-centroid assignment in fixed point: the exact computation the
/// hero contract runs, callable off-chain from mirrored centroid data.
/// Ties break toward the lowest shard id.
pub fn assign_shard(fp: &FixedPointVector, centroids: &CentroidSet) -> usize {
    let mut best = 0usize;
    let mut best_sim = i64::MIN;
    for (i, c) in centroids.centroids.iter().enumerate() {
        let s = fixed_point_similarity(fp, c);
        if s > best_sim {
            best_sim = s;
            best = i;
        }
    }
    best
}

// --- centroid file ----------------------------------------------------------

const CENTROID_MAGIC: &[u8; 4] = b"CSET";
const CENTROID_VERSION: u32 = 1;

pub fn encode_centroids(set: &CentroidSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CENTROID_MAGIC);
    out.extend_from_slice(&CENTROID_VERSION.to_le_bytes());
    out.extend_from_slice(&(set.k() as u32).to_le_bytes());
    out.extend_from_slice(&set.seed.to_le_bytes());
    out.extend_from_slice(&set.tolerance.to_bits().to_le_bytes());
    for c in &set.centroids {
        out.extend_from_slice(&c.to_le_bytes());
    }
    out
}

pub fn decode_centroids(bytes: &[u8]) -> Result<CentroidSet> {
    if bytes.len() < 24 || &bytes[..4] != CENTROID_MAGIC {
        return Err(Error::Decode("bad centroid file".into()));
    }
    let ver = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if ver != CENTROID_VERSION {
        return Err(Error::Decode(format!("unsupported centroid file version {ver}")));
    }
    let k = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let seed = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let tolerance = f64::from_bits(u64::from_le_bytes(bytes[20..28].try_into().unwrap()));
    let body = &bytes[28..];
    if body.len() != k * DIM * 8 {
        return Err(Error::Decode("centroid file length mismatch".into()));
    }
    let mut centroids = Vec::with_capacity(k);
    for i in 0..k {
        centroids.push(FixedPointVector::from_le_bytes(&body[i * DIM * 8..(i + 1) * DIM * 8])?);
    }
    Ok(CentroidSet { centroids, seed, tolerance })
}

// --- ingest payload ----------------------------------------------------------

/// Wire encoding for fingerprint keys in ingest payloads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyEncoding {
    /// 256 little-endian signed 64-bit integers (the default).
    IntArray,
    /// Comma-separated decimal integers, the string form whose cost
    /// trade-off the variants benchmark measures.
    DecimalString,
}

/// Event/ingest payload: key encoding flag (1 byte: 0 = int array,
/// 1 = string) + key field + URI length (4 LE) + URI. The string key field
/// carries its own 4-byte length prefix; the int-array field is fixed at
/// 2048 bytes.
pub fn encode_ingest_payload(key: &FixedPointVector, uri: &str, enc: KeyEncoding) -> Vec<u8> {
    let mut out = Vec::new();
    match enc {
        KeyEncoding::IntArray => {
            out.push(0);
            out.extend_from_slice(&key.to_le_bytes());
        }
        KeyEncoding::DecimalString => {
            out.push(1);
            let mut s = String::new();
            for (i, v) in key.values().iter().enumerate() {
                if i > 0 {
                    s.push(',');
                }
                s.push_str(&format!("{v}"));
            }
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        }
    }
    out.extend_from_slice(&(uri.len() as u32).to_le_bytes());
    out.extend_from_slice(uri.as_bytes());
    out
}

pub fn decode_ingest_payload(data: &[u8]) -> Result<(FixedPointVector, String)> {
    if data.is_empty() {
        return Err(Error::Decode("empty ingest payload".into()));
    }
    let mut pos = 1usize;
    let key = match data[0] {
        0 => {
            if data.len() < pos + DIM * 8 {
                return Err(Error::Decode("int-array key truncated".into()));
            }
            let key = FixedPointVector::from_le_bytes(&data[pos..pos + DIM * 8])?;
            pos += DIM * 8;
            key
        }
        1 => {
            if data.len() < pos + 4 {
                return Err(Error::Decode("string key length truncated".into()));
            }
            let len = u32::from_le_bytes(data[pos..pos + 4].try_into().unwrap()) as usize;
            pos += 4;
            if data.len() < pos + len {
                return Err(Error::Decode("string key truncated".into()));
            }
            let s = core::str::from_utf8(&data[pos..pos + len])
                .map_err(|_| Error::Decode("string key is not utf-8".into()))?;
            pos += len;
            let mut values = Vec::with_capacity(DIM);
            for part in s.split(',') {
                values.push(
                    part.parse::<i64>()
                        .map_err(|_| Error::Decode(format!("bad component {part:?}")))?,
                );
            }
            FixedPointVector::from_slice(&values)?
        }
        f => return Err(Error::Decode(format!("unknown key encoding flag {f}"))),
    };
    if data.len() < pos + 4 {
        return Err(Error::Decode("uri length truncated".into()));
    }
    let len = u32::from_le_bytes(data[pos..pos + 4].try_into().unwrap()) as usize;
    pos += 4;
    if data.len() != pos + len {
        return Err(Error::Decode("uri field length mismatch".into()));
    }
    let uri = String::from_utf8(data[pos..pos + len].to_vec())
        .map_err(|_| Error::Decode("uri is not utf-8".into()))?;
    Ok((key, uri))
}

/// topic[0] of ingest events: SHA-256 of the canonical fixed-point key
/// bytes, the same value for either wire encoding.
pub fn key_topic(key: &FixedPointVector) -> Word {
    Sha256::digest(key.to_le_bytes()).into()
}

// --- variants ----------------------------------------------------------------

/// Placement configuration. Storage: in contract (C) or event log (E).
/// Query-time shard prediction and within-shard retrieval: on-chain (O) or
/// off-chain (F). Shard prediction on ingest is on-chain in every variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    COOO,
    EOOF,
    EFOF,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::COOO => "C-OOO",
            Variant::EOOF => "E-OOF",
            Variant::EFOF => "E-FOF",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "C-OOO" => Ok(Variant::COOO),
            "E-OOF" => Ok(Variant::EOOF),
            "E-FOF" => Ok(Variant::EFOF),
            other => Err(Error::Decode(format!("unknown variant {other:?}"))),
        }
    }

    pub fn stores_in_contract(&self) -> bool {
        matches!(self, Variant::COOO)
    }

    pub fn predicts_on_chain_at_query(&self) -> bool {
        matches!(self, Variant::COOO | Variant::EOOF)
    }

    pub fn retrieves_on_chain(&self) -> bool {
        matches!(self, Variant::COOO)
    }

    pub const ALL: [Variant; 3] = [Variant::COOO, Variant::EOOF, Variant::EFOF];

    fn code(&self) -> u64 {
        match self {
            Variant::COOO => 0,
            Variant::EOOF => 1,
            Variant::EFOF => 2,
        }
    }

    fn from_code(c: u64) -> Result<Variant> {
        match c {
            0 => Ok(Variant::COOO),
            1 => Ok(Variant::EOOF),
            2 => Ok(Variant::EFOF),
            _ => Err(Error::Decode(format!("bad variant code {c}"))),
        }
    }
}

// --- contract handlers ---------------------------------------------------------

// hero storage layout
const TAG_META: u8 = 0; // (0,0) k, (1,0) variant, (2,0) registered shard count
const TAG_CENTROID: u8 = 1; // (shard, component)
const TAG_SHARD_ADDR: u8 = 2; // (shard, 0)

// shard storage layout
const TAG_SHARD_META: u8 = 0; // (0,0) entry count, (1,0) hero, (2,0) shard id, (3,0) variant
const TAG_KEY: u8 = 1; // (0, entry * 256 + component): one flat run, scanned in slot order
const TAG_URI_LEN: u8 = 2; // (entry, 0)
const TAG_URI: u8 = 3; // (entry, 32-byte chunk)

pub const HERO_HANDLER: &str = "registry-hero";
pub const SHARD_HANDLER: &str = "registry-shard";

/// Register the hero and shard handlers.
pub fn standard_registry(registry: &mut HandlerRegistry) {
    registry.register(HERO_HANDLER, alloc::boxed::Box::new(HeroContract));
    registry.register(SHARD_HANDLER, alloc::boxed::Box::new(ShardContract));
}

struct HeroContract;
struct ShardContract;

fn read_hero_centroids(ctx: &ExecCtx<'_>, k: usize) -> Result<CentroidSet> {
    let mut centroids = Vec::with_capacity(k);
    for i in 0..k {
        let words = ctx.sload_contiguous(&slot(TAG_CENTROID, i as u64, 0), DIM);
        let mut values = [0i64; DIM];
        for (j, v) in values.iter_mut().enumerate() {
            *v = i64_from_word(&words[j]);
        }
        centroids.push(FixedPointVector::new(values).map_err(|e| {
            Error::HandlerFailure(format!("stored centroid {i} invalid: {e}"))
        })?);
    }
    Ok(CentroidSet { centroids, seed: 0, tolerance: 0.0 })
}

/// On-chain nearest-centroid assignment; charges one distance op per
/// centroid.
fn hero_assign(ctx: &mut ExecCtx<'_>, key: &FixedPointVector) -> Result<usize> {
    let k = u64_from_word(&ctx.sload(&slot(TAG_META, 0, 0))) as usize;
    if k == 0 {
        return Err(Error::HandlerFailure("hero has no centroids".into()));
    }
    let centroids = read_hero_centroids(ctx, k)?;
    ctx.charge_compute(k as u64);
    Ok(assign_shard(key, &centroids))
}

impl Handler for HeroContract {
    /// init args: variant (1) + k (4 LE) + k*256 i64 LE centroid words.
    fn init(&self, ctx: &mut ExecCtx<'_>, args: &[u8]) -> Result<()> {
        if args.len() < 5 {
            return Err(Error::HandlerFailure("hero init args truncated".into()));
        }
        let variant = Variant::from_code(args[0] as u64)
            .map_err(|e| Error::HandlerFailure(e.to_string()))?;
        let k = u32::from_le_bytes(args[1..5].try_into().unwrap()) as usize;
        let body = &args[5..];
        if k == 0 || body.len() != k * DIM * 8 {
            return Err(Error::HandlerFailure(format!(
                "hero init expects {} centroid bytes for k = {k}, got {}",
                k * DIM * 8,
                body.len()
            )));
        }
        ctx.sstore(slot(TAG_META, 0, 0), word_from_u64(k as u64))?;
        ctx.sstore(slot(TAG_META, 1, 0), word_from_u64(variant.code()))?;
        for i in 0..k {
            for j in 0..DIM {
                let off = (i * DIM + j) * 8;
                let v = i64::from_le_bytes(body[off..off + 8].try_into().unwrap());
                ctx.sstore(slot(TAG_CENTROID, i as u64, j as u64), word_from_i64(v))?;
            }
        }
        Ok(())
    }

    fn call(&self, ctx: &mut ExecCtx<'_>, method: &str, args: &[u8]) -> Result<Vec<u8>> {
        match method {
            // args: k * 20-byte shard addresses, in shard order; once only
            "register_shards" => {
                let k = u64_from_word(&ctx.sload(&slot(TAG_META, 0, 0))) as usize;
                if u64_from_word(&ctx.sload(&slot(TAG_META, 2, 0))) != 0 {
                    return Err(Error::HandlerFailure("shards already registered".into()));
                }
                if args.len() != k * 20 {
                    return Err(Error::HandlerFailure(format!(
                        "expected {} address bytes, got {}",
                        k * 20,
                        args.len()
                    )));
                }
                for i in 0..k {
                    let mut a = [0u8; 20];
                    a.copy_from_slice(&args[i * 20..(i + 1) * 20]);
                    ctx.sstore(slot(TAG_SHARD_ADDR, i as u64, 0), word_from_address(&Address(a)))?;
                }
                ctx.sstore(slot(TAG_META, 2, 0), word_from_u64(k as u64))?;
                Ok(Vec::new())
            }
            // args: ingest payload; assigns the shard on-chain and
            // delegates storage to the shard contract
            "ingest" => {
                let (key, _) = decode_ingest_payload(args)
                    .map_err(|e| Error::HandlerFailure(e.to_string()))?;
                let shard = hero_assign(ctx, &key)?;
                if u64_from_word(&ctx.sload(&slot(TAG_META, 2, 0))) == 0 {
                    return Err(Error::HandlerFailure("shards not registered".into()));
                }
                let addr = address_from_word(&ctx.sload(&slot(TAG_SHARD_ADDR, shard as u64, 0)));
                ctx.call_contract(addr, "store", args)?;
                Ok((shard as u32).to_le_bytes().to_vec())
            }
            // args: ingest payload with empty URI allowed; returns the
            // predicted shard id
            "predict" => {
                let (key, _) = decode_ingest_payload(args)
                    .map_err(|e| Error::HandlerFailure(e.to_string()))?;
                let shard = hero_assign(ctx, &key)?;
                Ok((shard as u32).to_le_bytes().to_vec())
            }
            // args: shard id (4 LE) + top_k (4 LE) + ingest payload;
            // delegates the scan to the shard contract
            "query_shard" => {
                if args.len() < 8 {
                    return Err(Error::HandlerFailure("query_shard args truncated".into()));
                }
                let shard = u32::from_le_bytes(args[..4].try_into().unwrap()) as u64;
                let k = u64_from_word(&ctx.sload(&slot(TAG_META, 0, 0)));
                if shard >= k {
                    return Err(Error::HandlerFailure(format!("shard {shard} out of range")));
                }
                let addr = address_from_word(&ctx.sload(&slot(TAG_SHARD_ADDR, shard, 0)));
                ctx.call_contract(addr, "scan", &args[4..])
            }
            other => Err(Error::HandlerFailure(format!("hero has no method {other:?}"))),
        }
    }
}

impl Handler for ShardContract {
    /// init args: hero address (20) + shard id (4 LE) + variant (1).
    fn init(&self, ctx: &mut ExecCtx<'_>, args: &[u8]) -> Result<()> {
        if args.len() != 25 {
            return Err(Error::HandlerFailure("shard init args must be 25 bytes".into()));
        }
        let mut hero = [0u8; 20];
        hero.copy_from_slice(&args[..20]);
        let id = u32::from_le_bytes(args[20..24].try_into().unwrap());
        let variant = Variant::from_code(args[24] as u64)
            .map_err(|e| Error::HandlerFailure(e.to_string()))?;
        ctx.sstore(slot(TAG_SHARD_META, 1, 0), word_from_address(&Address(hero)))?;
        ctx.sstore(slot(TAG_SHARD_META, 2, 0), word_from_u64(id as u64))?;
        ctx.sstore(slot(TAG_SHARD_META, 3, 0), word_from_u64(variant.code()))?;
        Ok(())
    }

    fn call(&self, ctx: &mut ExecCtx<'_>, method: &str, args: &[u8]) -> Result<Vec<u8>> {
        match method {
            // ingest payload, callable only by the hero; C variants write
            // the entry into contract storage, E variants emit one event
            "store" => {
                let hero = address_from_word(&ctx.sload(&slot(TAG_SHARD_META, 1, 0)));
                if ctx.caller() != hero {
                    return Err(Error::HandlerFailure(
                        "store may only be called by the hero contract".into(),
                    ));
                }
                let (key, uri) = decode_ingest_payload(args)
                    .map_err(|e| Error::HandlerFailure(e.to_string()))?;
                if uri.is_empty() {
                    return Err(Error::HandlerFailure("entry uri must be non-empty".into()));
                }
                let variant =
                    Variant::from_code(u64_from_word(&ctx.sload(&slot(TAG_SHARD_META, 3, 0))))
                        .map_err(|e| Error::HandlerFailure(e.to_string()))?;
                if variant.stores_in_contract() {
                    let n = u64_from_word(&ctx.sload(&slot(TAG_SHARD_META, 0, 0)));
                    for (j, v) in key.values().iter().enumerate() {
                        ctx.sstore(slot(TAG_KEY, 0, n * DIM as u64 + j as u64), word_from_i64(*v))?;
                    }
                    ctx.sstore(slot(TAG_URI_LEN, n, 0), word_from_u64(uri.len() as u64))?;
                    for (w, chunk) in uri.as_bytes().chunks(32).enumerate() {
                        let mut word = [0u8; 32];
                        word[..chunk.len()].copy_from_slice(chunk);
                        ctx.sstore(slot(TAG_URI, n, w as u64), word)?;
                    }
                    ctx.sstore(slot(TAG_SHARD_META, 0, 0), word_from_u64(n + 1))?;
                } else {
                    ctx.emit_event(alloc::vec![key_topic(&key)], args.to_vec())?;
                }
                Ok(Vec::new())
            }
            // args: top_k (4 LE) + ingest payload (query key, empty URI);
            // exhaustive in-storage scan, C variant only
            "scan" => {
                if args.len() < 4 {
                    return Err(Error::HandlerFailure("scan args truncated".into()));
                }
                let top_k = u32::from_le_bytes(args[..4].try_into().unwrap()) as usize;
                let (key, _) = decode_ingest_payload(&args[4..])
                    .map_err(|e| Error::HandlerFailure(e.to_string()))?;
                let n = u64_from_word(&ctx.sload(&slot(TAG_SHARD_META, 0, 0)));
                // bulk-read the whole key region in slot order, score every
                // stored key, then read the URIs of the winners only
                let words = ctx.sload_contiguous(&slot(TAG_KEY, 0, 0), n as usize * DIM);
                let mut sims = Vec::with_capacity(n as usize);
                for e in 0..n {
                    let mut values = [0i64; DIM];
                    for (j, v) in values.iter_mut().enumerate() {
                        *v = i64_from_word(&words[e as usize * DIM + j]);
                    }
                    let stored = FixedPointVector::new(values)
                        .map_err(|err| Error::HandlerFailure(err.to_string()))?;
                    sims.push((fixed_point_similarity(&stored, &key), e));
                }
                ctx.charge_compute(n);
                let winners = top_k_by_similarity(sims.into_iter(), top_k);
                let mut candidates = Vec::with_capacity(winners.len());
                for (_, similarity, e) in winners {
                    let uri_len = u64_from_word(&ctx.sload(&slot(TAG_URI_LEN, e, 0))) as usize;
                    let words = ctx.sload_contiguous(&slot(TAG_URI, e, 0), uri_len.div_ceil(32));
                    let mut uri_bytes = Vec::with_capacity(uri_len);
                    for word in &words {
                        let take = (uri_len - uri_bytes.len()).min(32);
                        uri_bytes.extend_from_slice(&word[..take]);
                    }
                    let uri = String::from_utf8(uri_bytes)
                        .map_err(|_| Error::HandlerFailure("stored uri is not utf-8".into()))?;
                    candidates.push(Candidate { uri, similarity, ingest_seq: e });
                }
                Ok(encode_candidates(&candidates))
            }
            "count" => {
                let n = u64_from_word(&ctx.sload(&slot(TAG_SHARD_META, 0, 0)));
                Ok(n.to_le_bytes().to_vec())
            }
            other => Err(Error::HandlerFailure(format!("shard has no method {other:?}"))),
        }
    }
}

// --- entries, candidates, scanning ------------------------------------------

/// One stored key-value pair: fingerprint key, manifest URI value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardEntry {
    pub key: FixedPointVector,
    pub uri: String,
    /// Ingest order within the store (storage index or event sequence).
    pub ingest_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub uri: String,
    /// Fixed-point cosine similarity at scale 10^15.
    pub similarity: i64,
    pub ingest_seq: u64,
}

/// Top-k selection over (similarity, ingest order) pairs, shared by the
/// on-chain handler and the off-chain indexers so identical inputs rank
/// identically on both paths. Returns (input index, similarity, seq)
/// sorted by similarity descending, ties by ingest order.
pub fn top_k_by_similarity(
    sims: impl Iterator<Item = (i64, u64)>,
    top_k: usize,
) -> Vec<(usize, i64, u64)> {
    let mut scored: Vec<(usize, i64, u64)> =
        sims.enumerate().map(|(i, (sim, seq))| (i, sim, seq)).collect();
    scored.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    scored.truncate(top_k);
    scored
}

/// Exhaustive similarity scan of materialized entries.
pub fn rank_candidates(entries: &[ShardEntry], key: &FixedPointVector, top_k: usize) -> Vec<Candidate> {
    let winners = top_k_by_similarity(
        entries.iter().map(|e| (fixed_point_similarity(&e.key, key), e.ingest_seq)),
        top_k,
    );
    winners
        .into_iter()
        .map(|(i, similarity, ingest_seq)| Candidate {
            uri: entries[i].uri.clone(),
            similarity,
            ingest_seq,
        })
        .collect()
}

fn encode_candidates(candidates: &[Candidate]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(candidates.len() as u32).to_le_bytes());
    for c in candidates {
        out.extend_from_slice(&(c.uri.len() as u32).to_le_bytes());
        out.extend_from_slice(c.uri.as_bytes());
        out.extend_from_slice(&c.similarity.to_le_bytes());
        out.extend_from_slice(&c.ingest_seq.to_le_bytes());
    }
    out
}

fn decode_candidates(bytes: &[u8]) -> Result<Vec<Candidate>> {
    if bytes.len() < 4 {
        return Err(Error::Decode("candidate list truncated".into()));
    }
    let n = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    let mut pos = 4usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        if bytes.len() < pos + 4 {
            return Err(Error::Decode("candidate truncated".into()));
        }
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4;
        if bytes.len() < pos + len + 16 {
            return Err(Error::Decode("candidate truncated".into()));
        }
        let uri = String::from_utf8(bytes[pos..pos + len].to_vec())
            .map_err(|_| Error::Decode("candidate uri not utf-8".into()))?;
        pos += len;
        let similarity = i64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap());
        pos += 8;
        let ingest_seq = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap());
        pos += 8;
        out.push(Candidate { uri, similarity, ingest_seq });
    }
    Ok(out)
}

// --- off-chain shard indexers ---------------------------------------------------

/// Event-sourced mirror of one shard's key-value store.
#[derive(Debug, Clone)]
pub struct OffChainShardIndex {
    pub shard_id: usize,
    pub shard_address: Address,
    pub entries: Vec<ShardEntry>,
    /// Global event-log cursor: all events below it have been consumed.
    pub last_seen_sequence: u64,
    /// (sequence, error) for payloads that failed to decode.
    pub quarantined: Vec<(u64, String)>,
}

impl OffChainShardIndex {
    pub fn new(shard_id: usize, shard_address: Address) -> Self {
        OffChainShardIndex {
            shard_id,
            shard_address,
            entries: Vec::new(),
            last_seen_sequence: 0,
            quarantined: Vec::new(),
        }
    }

    /// Consume events after the cursor in sequence order. Idempotent:
    /// syncing twice without new events changes nothing. Malformed
    /// payloads are quarantined with a warning while the cursor still
    /// advances.
    pub fn sync(&mut self, ledger: &Ledger) {
        let events = ledger.get_events(Some(self.shard_address), None, self.last_seen_sequence);
        for e in events {
            match decode_ingest_payload(&e.data) {
                Ok((key, uri)) => {
                    self.entries.push(ShardEntry { key, uri, ingest_seq: e.sequence })
                }
                Err(err) => self.quarantined.push((e.sequence, err.to_string())),
            }
        }
        self.last_seen_sequence = ledger.event_count();
    }
}

// --- deployment and the registry facade ------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct RegistryDeployment {
    pub variant: Variant,
    pub hero: Address,
    pub shards: Vec<Address>,
    pub centroids: CentroidSet,
}

/// Where a query phase executed, what it metered, and how long the caller
/// measured it to take (the harness fills `nanos`; pure callers leave 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhaseCost {
    pub on_chain: bool,
    pub gas: u64,
    pub distance_ops: u64,
    pub nanos: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardPrediction {
    pub shard_id: usize,
    pub cost: PhaseCost,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Retrieval {
    pub candidates: Vec<Candidate>,
    pub cost: PhaseCost,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryResult {
    pub shard_id: usize,
    /// Ranked (URI, similarity) candidates, best first.
    pub candidates: Vec<Candidate>,
    pub prediction: PhaseCost,
    pub retrieval: PhaseCost,
}

#[derive(Debug)]
pub struct IngestReceipt {
    pub shard_id: usize,
    pub gas_used: u64,
    pub tx_index: u64,
}

/// The deployed index plus its off-chain companions: per-shard indexers
/// for E variants and the mirrored centroid set for off-chain prediction.
pub struct Registry {
    pub deployment: RegistryDeployment,
    pub indexers: Vec<OffChainShardIndex>,
    pub mirror: Option<CentroidSet>,
}

/// Deploy hero + k shard contracts and register the shard addresses with
/// the hero. Deterministic: the same chain prefix yields the same
/// addresses.
pub fn deploy_registry(
    ledger: &mut Ledger,
    centroid_set: &CentroidSet,
    variant: Variant,
    deployer: Address,
) -> Result<RegistryDeployment> {
    let k = centroid_set.k();
    let mut init = Vec::with_capacity(5 + k * DIM * 8);
    init.push(variant.code() as u8);
    init.extend_from_slice(&(k as u32).to_le_bytes());
    for c in &centroid_set.centroids {
        init.extend_from_slice(&c.to_le_bytes());
    }
    let hero_rcpt = submit_ok(
        ledger,
        Transaction {
            sender: deployer,
            body: TxBody::Deploy { handler: HERO_HANDLER.to_string(), init_args: init },
        },
    )?;
    let hero = hero_rcpt.deployed.expect("successful deploy has an address");

    let mut shards = Vec::with_capacity(k);
    for i in 0..k {
        let mut init = Vec::with_capacity(25);
        init.extend_from_slice(&hero.0);
        init.extend_from_slice(&(i as u32).to_le_bytes());
        init.push(variant.code() as u8);
        let rcpt = submit_ok(
            ledger,
            Transaction {
                sender: deployer,
                body: TxBody::Deploy { handler: SHARD_HANDLER.to_string(), init_args: init },
            },
        )?;
        shards.push(rcpt.deployed.expect("successful deploy has an address"));
    }
    let mut addr_bytes = Vec::with_capacity(k * 20);
    for s in &shards {
        addr_bytes.extend_from_slice(&s.0);
    }
    submit_ok(
        ledger,
        Transaction {
            sender: deployer,
            body: TxBody::Call {
                target: hero,
                method: "register_shards".to_string(),
                args: addr_bytes,
            },
        },
    )?;
    Ok(RegistryDeployment { variant, hero, shards, centroids: centroid_set.clone() })
}

fn submit_ok(ledger: &mut Ledger, tx: Transaction) -> Result<TxReceipt> {
    let rcpt = ledger.submit(tx)?;
    if !rcpt.ok {
        return Err(Error::HandlerFailure(
            rcpt.error.unwrap_or_else(|| "handler failed".to_string()),
        ));
    }
    Ok(rcpt)
}

/// Read the centroids back out of hero storage, as an off-chain mirror
/// would at startup.
pub fn mirror_centroids(ledger: &Ledger, deployment: &RegistryDeployment) -> Result<CentroidSet> {
    let k = u64_from_word(&ledger.storage_word(&deployment.hero, &slot(TAG_META, 0, 0))) as usize;
    let mut centroids = Vec::with_capacity(k);
    for i in 0..k {
        let mut values = [0i64; DIM];
        for (j, v) in values.iter_mut().enumerate() {
            *v = i64_from_word(
                &ledger.storage_word(&deployment.hero, &slot(TAG_CENTROID, i as u64, j as u64)),
            );
        }
        centroids.push(FixedPointVector::new(values)?);
    }
    Ok(CentroidSet { centroids, seed: deployment.centroids.seed, tolerance: deployment.centroids.tolerance })
}

impl Registry {
    /// Deploy the contracts and set up the variant's off-chain companions.
    pub fn deploy(
        ledger: &mut Ledger,
        centroid_set: &CentroidSet,
        variant: Variant,
        deployer: Address,
    ) -> Result<Registry> {
        let deployment = deploy_registry(ledger, centroid_set, variant, deployer)?;
        let indexers = if variant.stores_in_contract() {
            Vec::new()
        } else {
            deployment
                .shards
                .iter()
                .enumerate()
                .map(|(i, addr)| OffChainShardIndex::new(i, *addr))
                .collect()
        };
        let mirror = if variant.predicts_on_chain_at_query() {
            None
        } else {
            Some(mirror_centroids(ledger, &deployment)?)
        };
        Ok(Registry { deployment, indexers, mirror })
    }

    pub fn variant(&self) -> Variant {
        self.deployment.variant
    }

    pub fn k(&self) -> usize {
        self.deployment.centroids.k()
    }

    /// Ingest one key-value pair through the hero contract (shard
    /// assignment always runs on-chain).
    pub fn ingest(
        &self,
        ledger: &mut Ledger,
        sender: Address,
        key: &FixedPointVector,
        uri: &str,
        encoding: KeyEncoding,
    ) -> Result<IngestReceipt> {
        if uri.is_empty() {
            bail_invalid!("entry uri must be non-empty");
        }
        let payload = encode_ingest_payload(key, uri, encoding);
        let rcpt = submit_ok(
            ledger,
            Transaction {
                sender,
                body: TxBody::Call {
                    target: self.deployment.hero,
                    method: "ingest".to_string(),
                    args: payload,
                },
            },
        )?;
        let shard_id = u32::from_le_bytes(
            rcpt.ret
                .get(..4)
                .ok_or_else(|| Error::Decode("ingest returned no shard id".into()))?
                .try_into()
                .unwrap(),
        ) as usize;
        Ok(IngestReceipt { shard_id, gas_used: rcpt.gas_used, tx_index: rcpt.index })
    }

    /// Sync every off-chain shard indexer.
    pub fn sync(&mut self, ledger: &Ledger) {
        for idx in &mut self.indexers {
            idx.sync(ledger);
        }
    }

    /// Query-time shard prediction: on-chain via the hero (C-OOO, E-OOF)
    /// or off-chain from mirrored centroids (E-FOF). Both paths run the
    /// same assignment code on the same fixed-point data.
    pub fn predict_shard(
        &self,
        ledger: &Ledger,
        caller: Address,
        key: &FixedPointVector,
    ) -> Result<ShardPrediction> {
        if self.variant().predicts_on_chain_at_query() {
            let payload = encode_ingest_payload(key, "", KeyEncoding::IntArray);
            let (ret, gas, ops) =
                ledger.call_readonly(caller, self.deployment.hero, "predict", &payload)?;
            let shard_id = u32::from_le_bytes(
                ret.get(..4)
                    .ok_or_else(|| Error::Decode("predict returned no shard id".into()))?
                    .try_into()
                    .unwrap(),
            ) as usize;
            Ok(ShardPrediction {
                shard_id,
                cost: PhaseCost { on_chain: true, gas, distance_ops: ops, nanos: 0 },
            })
        } else {
            let mirror = self
                .mirror
                .as_ref()
                .ok_or_else(|| Error::Configuration("off-chain prediction without a mirror".into()))?;
            let shard_id = assign_shard(key, mirror);
            Ok(ShardPrediction {
                shard_id,
                cost: PhaseCost {
                    on_chain: false,
                    gas: 0,
                    distance_ops: mirror.k() as u64,
                    nanos: 0,
                },
            })
        }
    }

    /// Within-shard retrieval: an exhaustive scan, on-chain for C-OOO and
    /// over the synced indexer otherwise.
    pub fn retrieve(
        &self,
        ledger: &Ledger,
        caller: Address,
        shard_id: usize,
        key: &FixedPointVector,
        top_k: usize,
    ) -> Result<Retrieval> {
        if self.variant().retrieves_on_chain() {
            let mut args = Vec::new();
            args.extend_from_slice(&(shard_id as u32).to_le_bytes());
            args.extend_from_slice(&(top_k as u32).to_le_bytes());
            args.extend_from_slice(&encode_ingest_payload(key, "", KeyEncoding::IntArray));
            let (ret, gas, ops) =
                ledger.call_readonly(caller, self.deployment.hero, "query_shard", &args)?;
            Ok(Retrieval {
                candidates: decode_candidates(&ret)?,
                cost: PhaseCost { on_chain: true, gas, distance_ops: ops, nanos: 0 },
            })
        } else {
            let idx = self
                .indexers
                .get(shard_id)
                .ok_or_else(|| Error::Configuration(format!("no indexer for shard {shard_id}")))?;
            let candidates = rank_candidates(&idx.entries, key, top_k);
            Ok(Retrieval {
                candidates,
                cost: PhaseCost {
                    on_chain: false,
                    gas: 0,
                    distance_ops: idx.entries.len() as u64,
                    nanos: 0,
                },
            })
        }
    }

    /// Predict, then retrieve. An empty shard yields an empty candidate
    /// list, which callers treat as no-match.
    pub fn query(
        &self,
        ledger: &Ledger,
        caller: Address,
        key: &FixedPointVector,
        top_k: usize,
    ) -> Result<QueryResult> {
        let prediction = self.predict_shard(ledger, caller, key)?;
        let retrieval = self.retrieve(ledger, caller, prediction.shard_id, key, top_k)?;
        Ok(QueryResult {
            shard_id: prediction.shard_id,
            candidates: retrieval.candidates,
            prediction: prediction.cost,
            retrieval: retrieval.cost,
        })
    }
}

// --- match resolution -------------------------------------------------------------

/// A verified match: the registry value (manifest URI), the manifest it
/// resolved to, and the pair-wise verification score.
#[derive(Debug, Clone)]
pub struct ResolvedMatch {
    pub uri: String,
    pub manifest: Manifest,
    pub score: f64,
}

/// Anything that can score a (query, candidate) image pair; lets callers
/// cache feature maps across repeated candidates.
pub trait PairScorer {
    fn score_pair(&mut self, query: &ImageAsset, candidate: &ImageAsset) -> Result<f64>;
}

impl PairScorer for MatchScorer {
    fn score_pair(&mut self, query: &ImageAsset, candidate: &ImageAsset) -> Result<f64> {
        Ok(self.score(query, candidate)?.0)
    }
}

/// Score each candidate with the pair-wise verifier and return the
/// best-scoring one above `threshold`, or no-match. Candidates whose
/// manifest or asset bytes are missing from the content store are skipped
/// with a warning.
pub fn resolve_match(
    query_image: &ImageAsset,
    result: &QueryResult,
    scorer: &mut dyn PairScorer,
    threshold: f64,
    store: &dyn ContentStore,
) -> Result<(Option<ResolvedMatch>, Vec<String>)> {
    let mut warnings = Vec::new();
    let mut best: Option<ResolvedMatch> = None;
    for cand in &result.candidates {
        let manifest_cid = match Cid::parse(&cand.uri) {
            Ok(c) => c,
            Err(e) => {
                warnings.push(format!("candidate uri {}: {e}", cand.uri));
                continue;
            }
        };
        let manifest_bytes = match store.get(&manifest_cid) {
            Ok(b) => b,
            Err(e) => {
                warnings.push(format!("manifest {manifest_cid}: {e}"));
                continue;
            }
        };
        let manifest = match Manifest::from_bytes(&manifest_bytes) {
            Ok(m) => m,
            Err(e) => {
                warnings.push(format!("manifest {manifest_cid}: {e}"));
                continue;
            }
        };
        let asset_bytes = match store.get(&manifest.asset_cid) {
            Ok(b) => b,
            Err(e) => {
                warnings.push(format!("asset {}: {e}", manifest.asset_cid));
                continue;
            }
        };
        let image = match ImageAsset::from_ppm(manifest.asset_cid.as_str(), &asset_bytes) {
            Ok(i) => i,
            Err(e) => {
                warnings.push(format!("asset {}: {e}", manifest.asset_cid));
                continue;
            }
        };
        let score = scorer.score_pair(query_image, &image)?;
        if score >= threshold && best.as_ref().map(|b| score > b.score).unwrap_or(true) {
            best = Some(ResolvedMatch { uri: cand.uri.clone(), manifest, score });
        }
    }
    Ok((best, warnings))
}
