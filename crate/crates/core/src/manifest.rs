//! Signed provenance manifests, the content-addressed store they live in,
//! consent evaluation, and provenance-graph traversal.
//!
//! A manifest binds assertions (training-consent flags, a payout wallet, a
//! creator name) and ingredient references to an asset by content hash.
//! Manifests serialize to canonical JSON (sorted keys, no whitespace); the
//! Ed25519 signature covers exactly those bytes with the detached
//! `signature` field excluded.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use sha2::{Digest, Sha256};

use crate::config::ConsentRule;
use crate::error::{bail_invalid, Error, Result};
use crate::json::Json;
use crate::ledger::Address;
use crate::rng::Rng;

/// Content identifier: "cid:" + lowercase hex SHA-256 of the object bytes.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cid(String);

impl Cid {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn parse(s: &str) -> Result<Cid> {
        let hex = s
            .strip_prefix("cid:")
            .ok_or_else(|| Error::Decode(format!("cid {s:?} missing prefix")))?;
        if hex.len() != 64 || !hex.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase())
        {
            return Err(Error::Decode(format!("cid {s:?} is not 64 lowercase hex chars")));
        }
        Ok(Cid(s.to_string()))
    }
}

impl core::fmt::Display for Cid {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn compute_cid(bytes: &[u8]) -> Cid {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(4 + 64);
    s.push_str("cid:");
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    Cid(s)
}

// --- content-addressed store ----------------------------------------------

/// Content-addressed object store. `get` must verify the digest of what it
/// returns; `put` of identical bytes is idempotent.
pub trait ContentStore {
    fn put(&mut self, bytes: &[u8]) -> Result<Cid>;
    fn get(&self, cid: &Cid) -> Result<Vec<u8>>;
    fn contains(&self, cid: &Cid) -> bool;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// In-memory store.
#[derive(Debug, Default)]
pub struct MemoryStore {
    objects: BTreeMap<Cid, Vec<u8>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        MemoryStore { objects: BTreeMap::new() }
    }

    /// Corrupt a stored object in place (tests only).
    #[cfg(test)]
    pub(crate) fn tamper(&mut self, cid: &Cid, bytes: Vec<u8>) {
        self.objects.insert(cid.clone(), bytes);
    }
}

impl ContentStore for MemoryStore {
    fn put(&mut self, bytes: &[u8]) -> Result<Cid> {
        let cid = compute_cid(bytes);
        self.objects.entry(cid.clone()).or_insert_with(|| bytes.to_vec());
        Ok(cid)
    }

    fn get(&self, cid: &Cid) -> Result<Vec<u8>> {
        let bytes = self
            .objects
            .get(cid)
            .ok_or_else(|| Error::NotFound(format!("object {cid}")))?;
        if &compute_cid(bytes) != cid {
            return Err(Error::Corruption(format!("stored bytes no longer match {cid}")));
        }
        Ok(bytes.clone())
    }

    fn contains(&self, cid: &Cid) -> bool {
        self.objects.contains_key(cid)
    }

    fn len(&self) -> usize {
        self.objects.len()
    }
}

// --- assertions and manifests ----------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flag {
    Allowed,
    NotAllowed,
}

impl Flag {
    fn as_str(&self) -> &'static str {
        match self {
            Flag::Allowed => "allowed",
            Flag::NotAllowed => "notAllowed",
        }
    }

    fn parse(s: &str) -> Result<Flag> {
        match s {
            "allowed" => Ok(Flag::Allowed),
            "notAllowed" => Ok(Flag::NotAllowed),
            other => Err(Error::Decode(format!("unknown flag value {other:?}"))),
        }
    }
}

/// The four training/mining consent flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainingMiningAssertion {
    pub data_mining: Flag,
    pub ai_inference: Flag,
    pub ai_generative_training: Flag,
    pub ai_training: Flag,
}

impl TrainingMiningAssertion {
    pub fn all(flag: Flag) -> Self {
        TrainingMiningAssertion {
            data_mining: flag,
            ai_inference: flag,
            ai_generative_training: flag,
            ai_training: flag,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Assertion {
    TrainingMining(TrainingMiningAssertion),
    Wallet(Address),
    Creator(String),
}

impl Assertion {
    fn kind(&self) -> &'static str {
        match self {
            Assertion::TrainingMining(_) => "training-mining",
            Assertion::Wallet(_) => "wallet",
            Assertion::Creator(_) => "creator",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum IngredientRole {
    ConceptImage,
    BaseModel,
    SpecializedModel,
    TrainingArchive,
}

impl IngredientRole {
    fn as_str(&self) -> &'static str {
        match self {
            IngredientRole::ConceptImage => "conceptImage",
            IngredientRole::BaseModel => "baseModel",
            IngredientRole::SpecializedModel => "specializedModel",
            IngredientRole::TrainingArchive => "trainingArchive",
        }
    }

    fn parse(s: &str) -> Result<IngredientRole> {
        match s {
            "conceptImage" => Ok(IngredientRole::ConceptImage),
            "baseModel" => Ok(IngredientRole::BaseModel),
            "specializedModel" => Ok(IngredientRole::SpecializedModel),
            "trainingArchive" => Ok(IngredientRole::TrainingArchive),
            other => Err(Error::Decode(format!("unknown ingredient role {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ingredient {
    pub manifest_cid: Cid,
    pub role: IngredientRole,
}

/// A provenance manifest. `signature` is detached: excluded from the
/// signed byte range, carried alongside in the stored document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub asset_cid: Cid,
    pub assertions: Vec<Assertion>,
    pub ingredients: Vec<Ingredient>,
    pub signer_id: String,
    pub signature: Option<String>,
}

impl Manifest {
    pub fn new(asset_cid: Cid, assertions: Vec<Assertion>, ingredients: Vec<Ingredient>, signer_id: &str) -> Self {
        Manifest {
            asset_cid,
            assertions,
            ingredients,
            signer_id: signer_id.to_string(),
            signature: None,
        }
    }

    fn body_json(&self) -> Vec<(&'static str, Json)> {
        let assertions = self
            .assertions
            .iter()
            .map(|a| {
                let payload = match a {
                    Assertion::TrainingMining(t) => Json::object(alloc::vec![
                        ("ai_generative_training", Json::str(t.ai_generative_training.as_str())),
                        ("ai_inference", Json::str(t.ai_inference.as_str())),
                        ("ai_training", Json::str(t.ai_training.as_str())),
                        ("data_mining", Json::str(t.data_mining.as_str())),
                    ]),
                    Assertion::Wallet(addr) => {
                        Json::object(alloc::vec![("address", Json::Str(addr.to_hex()))])
                    }
                    Assertion::Creator(name) => {
                        Json::object(alloc::vec![("name", Json::str(name))])
                    }
                };
                Json::object(alloc::vec![("kind", Json::str(a.kind())), ("payload", payload)])
            })
            .collect();
        let ingredients = self
            .ingredients
            .iter()
            .map(|i| {
                Json::object(alloc::vec![
                    ("manifest_cid", Json::str(i.manifest_cid.as_str())),
                    ("role", Json::str(i.role.as_str())),
                ])
            })
            .collect();
        alloc::vec![
            ("assertions", Json::Array(assertions)),
            ("asset_cid", Json::str(self.asset_cid.as_str())),
            ("ingredients", Json::Array(ingredients)),
            ("signer_id", Json::str(&self.signer_id)),
        ]
    }

    /// Canonical bytes the signature covers (no `signature` field).
    pub fn signed_bytes(&self) -> Vec<u8> {
        Json::object(self.body_json()).to_string().into_bytes()
    }

    /// Canonical stored document, including the detached signature.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut fields = self.body_json();
        if let Some(sig) = &self.signature {
            fields.push(("signature", Json::str(sig)));
        }
        Json::object(fields).to_string().into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Manifest> {
        let value: serde_json::Value = serde_json::from_slice(bytes)
            .map_err(|e| Error::Decode(format!("manifest is not valid json: {e}")))?;
        let obj = value.as_object().ok_or_else(|| Error::Decode("manifest must be an object".into()))?;
        let get_str = |v: &serde_json::Value, what: &str| -> Result<String> {
            v.as_str()
                .map(|s| s.to_string())
                .ok_or_else(|| Error::Decode(format!("{what} must be a string")))
        };
        let asset_cid = Cid::parse(&get_str(
            obj.get("asset_cid").ok_or_else(|| Error::Decode("missing asset_cid".into()))?,
            "asset_cid",
        )?)?;
        let signer_id = get_str(
            obj.get("signer_id").ok_or_else(|| Error::Decode("missing signer_id".into()))?,
            "signer_id",
        )?;
        let mut assertions = Vec::new();
        for a in obj
            .get("assertions")
            .and_then(|v| v.as_array())
            .ok_or_else(|| Error::Decode("missing assertions array".into()))?
        {
            let kind = get_str(a.get("kind").ok_or_else(|| Error::Decode("assertion missing kind".into()))?, "kind")?;
            let payload = a
                .get("payload")
                .and_then(|p| p.as_object())
                .ok_or_else(|| Error::Decode("assertion missing payload".into()))?;
            let field = |name: &str| -> Result<String> {
                get_str(
                    payload.get(name).ok_or_else(|| Error::Decode(format!("payload missing {name}")))?,
                    name,
                )
            };
            assertions.push(match kind.as_str() {
                "training-mining" => Assertion::TrainingMining(TrainingMiningAssertion {
                    data_mining: Flag::parse(&field("data_mining")?)?,
                    ai_inference: Flag::parse(&field("ai_inference")?)?,
                    ai_generative_training: Flag::parse(&field("ai_generative_training")?)?,
                    ai_training: Flag::parse(&field("ai_training")?)?,
                }),
                "wallet" => Assertion::Wallet(Address::from_hex(&field("address")?)?),
                "creator" => Assertion::Creator(field("name")?),
                other => return Err(Error::Decode(format!("unknown assertion kind {other:?}"))),
            });
        }
        let mut ingredients = Vec::new();
        for i in obj
            .get("ingredients")
            .and_then(|v| v.as_array())
            .ok_or_else(|| Error::Decode("missing ingredients array".into()))?
        {
            ingredients.push(Ingredient {
                manifest_cid: Cid::parse(&get_str(
                    i.get("manifest_cid").ok_or_else(|| Error::Decode("ingredient missing manifest_cid".into()))?,
                    "manifest_cid",
                )?)?,
                role: IngredientRole::parse(&get_str(
                    i.get("role").ok_or_else(|| Error::Decode("ingredient missing role".into()))?,
                    "role",
                )?)?,
            });
        }
        let signature = match obj.get("signature") {
            Some(v) => Some(get_str(v, "signature")?),
            None => None,
        };
        Ok(Manifest { asset_cid, assertions, ingredients, signer_id, signature })
    }

    pub fn training_mining(&self) -> Option<&TrainingMiningAssertion> {
        self.assertions.iter().find_map(|a| match a {
            Assertion::TrainingMining(t) => Some(t),
            _ => None,
        })
    }

    pub fn wallet(&self) -> Option<&Address> {
        self.assertions.iter().find_map(|a| match a {
            Assertion::Wallet(w) => Some(w),
            _ => None,
        })
    }
}

// --- signing ----------------------------------------------------------------

/// A signer's key pair, derived deterministically from a seed.
pub struct SignerKey {
    pub id: String,
    signing: SigningKey,
}

impl SignerKey {
    pub fn from_seed(id: &str, seed: u64) -> Self {
        let mut rng = Rng::new(seed).fork("signer-key");
        let mut secret = [0u8; 32];
        for chunk in secret.chunks_mut(8) {
            chunk.copy_from_slice(&rng.next_u64().to_le_bytes());
        }
        SignerKey { id: id.to_string(), signing: SigningKey::from_bytes(&secret) }
    }

    pub fn public_hex(&self) -> String {
        let mut s = String::with_capacity(64);
        for b in self.signing.verifying_key().to_bytes() {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }
}

/// Sign the canonical manifest bytes, filling the detached signature.
pub fn sign_manifest(mut manifest: Manifest, key: &SignerKey) -> Result<Manifest> {
    if manifest.signer_id != key.id {
        bail_invalid!("manifest names signer {:?}, key is {:?}", manifest.signer_id, key.id);
    }
    let sig = key.signing.sign(&manifest.signed_bytes());
    let mut hex = String::with_capacity(128);
    for b in sig.to_bytes() {
        hex.push_str(&format!("{b:02x}"));
    }
    manifest.signature = Some(hex);
    Ok(manifest)
}

/// Verify the detached signature against a public key. Returns false for
/// missing/malformed signatures rather than erroring: verification is a
/// trust decision, not a parse step.
pub fn verify_manifest(manifest: &Manifest, public_key: &VerifyingKey) -> bool {
    let Some(sig_hex) = &manifest.signature else {
        return false;
    };
    let Some(sig_bytes) = decode_hex_64(sig_hex) else {
        return false;
    };
    let signature = Signature::from_bytes(&sig_bytes);
    public_key.verify(&manifest.signed_bytes(), &signature).is_ok()
}

fn decode_hex_64(s: &str) -> Option<[u8; 64]> {
    if s.len() != 128 || s.bytes().any(|b| b.is_ascii_uppercase()) {
        return None;
    }
    let mut out = [0u8; 64];
    for i in 0..64 {
        out[i] = u8::from_str_radix(&s[i * 2..i * 2 + 2], 16).ok()?;
    }
    Some(out)
}

/// signer_id -> public key registry, standing in for a PKI trust chain.
#[derive(Debug, Default)]
pub struct TrustList {
    keys: BTreeMap<String, VerifyingKey>,
}

impl TrustList {
    pub fn new() -> Self {
        TrustList { keys: BTreeMap::new() }
    }

    pub fn add(&mut self, signer_id: &str, key: VerifyingKey) {
        self.keys.insert(signer_id.to_string(), key);
    }

    pub fn add_signer(&mut self, key: &SignerKey) {
        self.keys.insert(key.id.clone(), key.signing.verifying_key());
    }

    pub fn key_of(&self, signer_id: &str) -> Option<&VerifyingKey> {
        self.keys.get(signer_id)
    }

    /// Line format: `signer_id<space>hex-public-key`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (id, key) in &self.keys {
            out.push_str(id);
            out.push(' ');
            for b in key.to_bytes() {
                out.push_str(&format!("{b:02x}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<TrustList> {
        let mut list = TrustList::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (id, hex) = line
                .split_once(' ')
                .ok_or_else(|| Error::Decode(format!("trust list line {}: missing space", lineno + 1)))?;
            let hex = hex.trim();
            if hex.len() != 64 {
                return Err(Error::Decode(format!("trust list line {}: key must be 64 hex chars", lineno + 1)));
            }
            let mut bytes = [0u8; 32];
            for i in 0..32 {
                bytes[i] = u8::from_str_radix(&hex[i * 2..i * 2 + 2], 16)
                    .map_err(|_| Error::Decode(format!("trust list line {}: bad hex", lineno + 1)))?;
            }
            let key = VerifyingKey::from_bytes(&bytes)
                .map_err(|_| Error::InvalidInput(format!("trust list line {}: invalid key", lineno + 1)))?;
            list.add(id, key);
        }
        Ok(list)
    }
}

// --- consent ------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Consent {
    OptedIn,
    OptedOut,
    Unknown,
}

impl Consent {
    pub fn as_str(&self) -> &'static str {
        match self {
            Consent::OptedIn => "OptedIn",
            Consent::OptedOut => "OptedOut",
            Consent::Unknown => "Unknown",
        }
    }
}

/// Evaluate training consent. OptedIn requires a verified manifest whose
/// consulted flags all allow; a verified manifest with any consulted flag
/// set to notAllowed is OptedOut; everything else (no manifest, unknown
/// signer, bad signature, missing flags) is Unknown. Callers must treat
/// Unknown as not-consented.
pub fn consent_decision(
    manifest: Option<&Manifest>,
    trust: &TrustList,
    rule: ConsentRule,
) -> Consent {
    let Some(manifest) = manifest else {
        return Consent::Unknown;
    };
    let Some(key) = trust.key_of(&manifest.signer_id) else {
        return Consent::Unknown;
    };
    if !verify_manifest(manifest, key) {
        return Consent::Unknown;
    }
    let Some(flags) = manifest.training_mining() else {
        return Consent::Unknown;
    };
    let consulted: &[Flag] = match rule {
        ConsentRule::RequireBoth => &[flags.ai_generative_training, flags.ai_training],
        ConsentRule::GenerativeOnly => &[flags.ai_generative_training],
    };
    if consulted.iter().all(|f| *f == Flag::Allowed) {
        Consent::OptedIn
    } else {
        Consent::OptedOut
    }
}

// --- provenance graph ----------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ProvenanceGraph {
    pub root: Cid,
    pub nodes: BTreeMap<Cid, Manifest>,
    /// (from manifest, to manifest, role) in traversal order.
    pub edges: Vec<(Cid, Cid, IngredientRole)>,
    /// Ingredient references whose manifests were not resolvable.
    pub dangling: Vec<(Cid, Cid)>,
}

/// Breadth-first expansion of ingredient references starting from a stored
/// manifest. Dangling references are recorded, not fatal; cycles are
/// rejected.
pub fn build_provenance_graph(root: &Cid, store: &dyn ContentStore) -> Result<ProvenanceGraph> {
    let mut nodes = BTreeMap::new();
    let mut edges = Vec::new();
    let mut dangling = Vec::new();
    let mut queue = VecDeque::new();
    let root_manifest = Manifest::from_bytes(&store.get(root)?)?;
    nodes.insert(root.clone(), root_manifest);
    queue.push_back(root.clone());
    while let Some(cid) = queue.pop_front() {
        let ingredients = nodes[&cid].ingredients.clone();
        for ing in ingredients {
            edges.push((cid.clone(), ing.manifest_cid.clone(), ing.role));
            if nodes.contains_key(&ing.manifest_cid) {
                continue;
            }
            match store.get(&ing.manifest_cid) {
                Ok(bytes) => {
                    let m = Manifest::from_bytes(&bytes)?;
                    nodes.insert(ing.manifest_cid.clone(), m);
                    queue.push_back(ing.manifest_cid);
                }
                Err(Error::NotFound(_)) => dangling.push((cid.clone(), ing.manifest_cid)),
                Err(e) => return Err(e),
            }
        }
    }
    let graph = ProvenanceGraph { root: root.clone(), nodes, edges, dangling };
    check_acyclic(&graph)?;
    Ok(graph)
}

/// Three-color depth-first search over the collected edges.
fn check_acyclic(graph: &ProvenanceGraph) -> Result<()> {
    let mut adjacency: BTreeMap<&Cid, Vec<&Cid>> = BTreeMap::new();
    for (from, to, _) in &graph.edges {
        adjacency.entry(from).or_default().push(to);
    }
    let mut done: BTreeSet<&Cid> = BTreeSet::new();
    let mut on_path: BTreeSet<&Cid> = BTreeSet::new();
    // iterative DFS with explicit enter/leave markers
    enum Step<'a> {
        Enter(&'a Cid),
        Leave(&'a Cid),
    }
    let mut stack = alloc::vec![Step::Enter(&graph.root)];
    while let Some(step) = stack.pop() {
        match step {
            Step::Enter(cid) => {
                if done.contains(cid) {
                    continue;
                }
                if !on_path.insert(cid) {
                    return Err(Error::MalformedProvenance(format!("cycle through {cid}")));
                }
                stack.push(Step::Leave(cid));
                if let Some(next) = adjacency.get(cid) {
                    for to in next {
                        if on_path.contains(to) {
                            return Err(Error::MalformedProvenance(format!("cycle through {to}")));
                        }
                        if !done.contains(to) && graph.nodes.contains_key(*to) {
                            stack.push(Step::Enter(to));
                        }
                    }
                }
            }
            Step::Leave(cid) => {
                on_path.remove(cid);
                done.insert(cid);
            }
        }
    }
    Ok(())
}

/// Concept images reachable through a specialized-model node: for every
/// manifest referenced with role specializedModel, collect its
/// conceptImage ingredients. Deduplicated, ordered by asset CID.
pub fn training_images_of(graph: &ProvenanceGraph) -> Vec<(Cid, &Manifest)> {
    let mut out: BTreeMap<Cid, &Manifest> = BTreeMap::new();
    for (_, model_cid, role) in &graph.edges {
        if *role != IngredientRole::SpecializedModel {
            continue;
        }
        let Some(model) = graph.nodes.get(model_cid) else {
            continue;
        };
        for ing in &model.ingredients {
            if ing.role != IngredientRole::ConceptImage {
                continue;
            }
            if let Some(m) = graph.nodes.get(&ing.manifest_cid) {
                out.insert(m.asset_cid.clone(), m);
            }
        }
    }
    out.into_iter().collect()
}
