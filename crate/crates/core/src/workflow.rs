//! End-to-end flows: consent filtering of a candidate training set,
//! provenance encoding for synthetic outputs, credit apportionment over
//! concept images, and ledger payments to creator wallets.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::config::Config;
use crate::error::{bail_invalid, Error, Result};
use crate::fingerprint::{to_fixed_point, Fingerprinter};
use crate::image::ImageAsset;
use crate::json::Json;
use crate::ledger::{Address, Ledger, Transaction, TxBody};
use crate::manifest::{
    build_provenance_graph, consent_decision, sign_manifest, training_images_of, Cid, Consent,
    ContentStore, Ingredient, IngredientRole, Manifest, SignerKey, TrustList,
};
use crate::matchnet::apportionment_weights;
use crate::registry::{resolve_match, PairScorer, Registry};

// --- consent filtering -------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ConsentEntry {
    pub asset_id: String,
    pub matched_uri: Option<String>,
    pub match_score: Option<f64>,
    pub decision: Consent,
}

/// Per-image consent decisions over a candidate training set, plus
/// summary counts. Only OptedIn images are usable.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsentReport {
    pub entries: Vec<ConsentEntry>,
    pub opted_in: usize,
    pub opted_out: usize,
    pub unknown: usize,
}

impl ConsentReport {
    fn tally(entries: Vec<ConsentEntry>) -> ConsentReport {
        let mut report = ConsentReport { entries, opted_in: 0, opted_out: 0, unknown: 0 };
        for e in &report.entries {
            match e.decision {
                Consent::OptedIn => report.opted_in += 1,
                Consent::OptedOut => report.opted_out += 1,
                Consent::Unknown => report.unknown += 1,
            }
        }
        report
    }

    /// Asset ids cleared for training.
    pub fn usable(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.decision == Consent::OptedIn)
            .map(|e| e.asset_id.as_str())
            .collect()
    }

    /// Deterministic JSON (sorted keys) for golden-file comparison.
    pub fn to_json(&self) -> String {
        let entries = self
            .entries
            .iter()
            .map(|e| {
                Json::object(alloc::vec![
                    ("asset_id", Json::str(&e.asset_id)),
                    ("decision", Json::str(e.decision.as_str())),
                    (
                        "match_score",
                        e.match_score.map(Json::Num).unwrap_or(Json::Null)
                    ),
                    (
                        "matched_uri",
                        e.matched_uri.as_deref().map(Json::str).unwrap_or(Json::Null)
                    ),
                ])
            })
            .collect();
        Json::object(alloc::vec![
            ("entries", Json::Array(entries)),
            (
                "summary",
                Json::object(alloc::vec![
                    ("opted_in", Json::Int(self.opted_in as i128)),
                    ("opted_out", Json::Int(self.opted_out as i128)),
                    ("unknown", Json::Int(self.unknown as i128)),
                ])
            ),
        ])
        .to_string()
    }
}

/// Query every candidate image against the registry, verify the best
/// match, fetch its manifest and evaluate consent. Failures anywhere on
/// the path mark the image Unknown (excluded), never OptedIn.
#[allow(clippy::too_many_arguments)]
pub fn filter_training_set(
    images: &[ImageAsset],
    registry: &Registry,
    ledger: &Ledger,
    caller: Address,
    store: &dyn ContentStore,
    trust: &TrustList,
    fingerprinter: &Fingerprinter,
    scorer: &mut dyn PairScorer,
    cfg: &Config,
) -> ConsentReport {
    let mut entries = Vec::with_capacity(images.len());
    for image in images {
        let entry = match consent_of(image, registry, ledger, caller, store, trust, fingerprinter, scorer, cfg) {
            Ok(e) => e,
            Err(_) => ConsentEntry {
                asset_id: image.id.clone(),
                matched_uri: None,
                match_score: None,
                decision: Consent::Unknown,
            },
        };
        entries.push(entry);
    }
    ConsentReport::tally(entries)
}

#[allow(clippy::too_many_arguments)]
fn consent_of(
    image: &ImageAsset,
    registry: &Registry,
    ledger: &Ledger,
    caller: Address,
    store: &dyn ContentStore,
    trust: &TrustList,
    fingerprinter: &Fingerprinter,
    scorer: &mut dyn PairScorer,
    cfg: &Config,
) -> Result<ConsentEntry> {
    let key = to_fixed_point(&fingerprinter.compute(image)?)?;
    let result = registry.query(ledger, caller, &key, cfg.top_k)?;
    let (resolved, _warnings) = resolve_match(image, &result, scorer, cfg.lambda, store)?;
    Ok(match resolved {
        Some(m) => ConsentEntry {
            asset_id: image.id.clone(),
            decision: consent_decision(Some(&m.manifest), trust, cfg.consent_rule),
            matched_uri: Some(m.uri),
            match_score: Some(m.score),
        },
        None => ConsentEntry {
            asset_id: image.id.clone(),
            matched_uri: None,
            match_score: None,
            decision: Consent::Unknown,
        },
    })
}

// --- synthetic provenance ------------------------------------------------------

/// Everything minted for one synthetic output: the image and model blobs
/// plus their signed manifests, wired into the standard provenance shape
/// (image -> model -> {concepts, base model}).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticAssetBundle {
    pub synthetic_asset_cid: Cid,
    pub synthetic_manifest_cid: Cid,
    pub model_asset_cid: Cid,
    pub model_manifest_cid: Cid,
    pub concept_manifest_cids: Vec<Cid>,
    pub base_model_manifest_cid: Cid,
}

/// Sign and store the model + synthetic-image manifests. Every ingredient
/// manifest must already be stored and signed.
pub fn encode_synthetic_provenance(
    store: &mut dyn ContentStore,
    concept_manifest_cids: &[Cid],
    base_model_manifest_cid: &Cid,
    model_blob: &[u8],
    synthetic_image: &ImageAsset,
    signer: &SignerKey,
) -> Result<SyntheticAssetBundle> {
    if concept_manifest_cids.is_empty() {
        bail_invalid!("a specialized model needs at least one concept image");
    }
    let check_signed = |cid: &Cid| -> Result<()> {
        let m = Manifest::from_bytes(&store.get(cid)?)?;
        if m.signature.is_none() {
            return Err(Error::InvalidInput(format!("ingredient manifest {cid} is unsigned")));
        }
        Ok(())
    };
    for cid in concept_manifest_cids {
        check_signed(cid)?;
    }
    check_signed(base_model_manifest_cid)?;

    let model_asset_cid = store.put(model_blob)?;
    let mut ingredients: Vec<Ingredient> = concept_manifest_cids
        .iter()
        .map(|c| Ingredient { manifest_cid: c.clone(), role: IngredientRole::ConceptImage })
        .collect();
    ingredients.push(Ingredient {
        manifest_cid: base_model_manifest_cid.clone(),
        role: IngredientRole::BaseModel,
    });
    let model_manifest = sign_manifest(
        Manifest::new(model_asset_cid.clone(), Vec::new(), ingredients, &signer.id),
        signer,
    )?;
    let model_manifest_cid = store.put(&model_manifest.to_bytes())?;

    let synthetic_asset_cid = store.put(&synthetic_image.to_ppm())?;
    let synthetic_manifest = sign_manifest(
        Manifest::new(
            synthetic_asset_cid.clone(),
            Vec::new(),
            alloc::vec![Ingredient {
                manifest_cid: model_manifest_cid.clone(),
                role: IngredientRole::SpecializedModel,
            }],
            &signer.id,
        ),
        signer,
    )?;
    let synthetic_manifest_cid = store.put(&synthetic_manifest.to_bytes())?;

    Ok(SyntheticAssetBundle {
        synthetic_asset_cid,
        synthetic_manifest_cid,
        model_asset_cid,
        model_manifest_cid,
        concept_manifest_cids: concept_manifest_cids.to_vec(),
        base_model_manifest_cid: base_model_manifest_cid.clone(),
    })
}

// --- credit apportionment ---------------------------------------------------------

/// One concept image's slice of the credit.
#[derive(Debug, Clone, PartialEq)]
pub struct CreditShare {
    pub asset_cid: Cid,
    pub manifest_cid: Cid,
    pub score: f64,
    pub weight: f64,
    pub wallet: Option<Address>,
}

/// Trace the provenance graph from the synthetic image, score every
/// reachable concept image against it, and threshold-normalize the scores
/// into credit weights. Wallets come out of the concept manifests.
pub fn apportion_credit(
    synthetic_image: &ImageAsset,
    bundle: &SyntheticAssetBundle,
    store: &dyn ContentStore,
    scorer: &mut dyn PairScorer,
    lambda: f64,
) -> Result<Vec<CreditShare>> {
    let graph = build_provenance_graph(&bundle.synthetic_manifest_cid, store)?;
    let concepts = training_images_of(&graph);
    let mut scores = Vec::with_capacity(concepts.len());
    let mut rows = Vec::with_capacity(concepts.len());
    for (asset_cid, manifest) in concepts {
        let bytes = store.get(&asset_cid)?;
        let image = ImageAsset::from_ppm(asset_cid.as_str(), &bytes)?;
        let score = scorer.score_pair(synthetic_image, &image)?;
        scores.push(score);
        let manifest_cid = compute_manifest_cid(manifest);
        rows.push((asset_cid, manifest_cid, manifest.wallet().copied(), score));
    }
    let weights = apportionment_weights(&scores, lambda)?;
    Ok(rows
        .into_iter()
        .zip(weights)
        .map(|((asset_cid, manifest_cid, wallet, score), weight)| CreditShare {
            asset_cid,
            manifest_cid,
            score,
            weight,
            wallet,
        })
        .collect())
}

fn compute_manifest_cid(manifest: &Manifest) -> Cid {
    crate::manifest::compute_cid(&manifest.to_bytes())
}

/// Drop shares without a wallet (with a warning) and renormalize the
/// positive weights over the payable set.
pub fn payable_shares(shares: &[CreditShare]) -> (Vec<(Cid, Address, f64)>, Vec<String>) {
    let mut warnings = Vec::new();
    let mut payable = Vec::new();
    for s in shares {
        match s.wallet {
            Some(w) => payable.push((s.asset_cid.clone(), w, s.weight)),
            None => {
                if s.weight > 0.0 {
                    warnings.push(format!(
                        "concept {} has weight {:.6} but no wallet assertion; skipping payment",
                        s.asset_cid, s.weight
                    ));
                }
            }
        }
    }
    let total: f64 = payable.iter().map(|(_, _, w)| *w).sum();
    if total > 0.0 {
        for (_, _, w) in payable.iter_mut() {
            *w /= total;
        }
    }
    (payable, warnings)
}

// --- payment ---------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Payment {
    pub asset_cid: Cid,
    pub wallet: Address,
    pub weight: f64,
    pub amount: u128,
    pub tx_index: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApportionmentReport {
    pub shares: Vec<CreditShare>,
    pub payments: Vec<Payment>,
    pub budget: u128,
    pub total_paid: u128,
}

impl ApportionmentReport {
    pub fn to_json(&self) -> String {
        let shares = self
            .shares
            .iter()
            .map(|s| {
                Json::object(alloc::vec![
                    ("asset_cid", Json::str(s.asset_cid.as_str())),
                    ("manifest_cid", Json::str(s.manifest_cid.as_str())),
                    ("score", Json::Num(s.score)),
                    (
                        "wallet",
                        s.wallet.map(|w| Json::Str(w.to_hex())).unwrap_or(Json::Null)
                    ),
                    ("weight", Json::Num(s.weight)),
                ])
            })
            .collect();
        let payments = self
            .payments
            .iter()
            .map(|p| {
                Json::object(alloc::vec![
                    ("amount", Json::Int(p.amount as i128)),
                    ("asset_cid", Json::str(p.asset_cid.as_str())),
                    ("tx_index", Json::Int(p.tx_index as i128)),
                    ("wallet", Json::Str(p.wallet.to_hex())),
                    ("weight", Json::Num(p.weight)),
                ])
            })
            .collect();
        Json::object(alloc::vec![
            ("budget", Json::Int(self.budget as i128)),
            ("payments", Json::Array(payments)),
            ("shares", Json::Array(shares)),
            ("total_paid", Json::Int(self.total_paid as i128)),
        ])
        .to_string()
    }
}

/// Split `budget` across payees by largest-remainder rounding of
/// weight * budget (ties: larger remainder first, then lower CID), then
/// execute one transfer per positive amount. All-or-nothing: if the payer
/// cannot cover budget plus transfer gas, nothing moves.
pub fn pay_rewards(
    ledger: &mut Ledger,
    payer: Address,
    payees: &[(Cid, Address, f64)],
    budget: u128,
) -> Result<Vec<Payment>> {
    let amounts = largest_remainder_split(payees, budget);
    let transfers: Vec<(usize, u128)> =
        amounts.iter().enumerate().filter(|(_, a)| **a > 0).map(|(i, a)| (i, *a)).collect();
    let gas_needed = transfers.len() as u128 * ledger.schedule().tx_base as u128;
    let total: u128 = transfers.iter().map(|(_, a)| a).sum();
    if ledger.balance(&payer) < total + gas_needed {
        return Err(Error::Rejected(format!(
            "payer balance {} cannot cover payout {total} plus gas {gas_needed}",
            ledger.balance(&payer)
        )));
    }
    let mut payments = Vec::with_capacity(transfers.len());
    for (i, amount) in transfers {
        let (cid, wallet, weight) = &payees[i];
        let rcpt = ledger.submit(Transaction {
            sender: payer,
            body: TxBody::Transfer { recipient: *wallet, amount },
        })?;
        payments.push(Payment {
            asset_cid: cid.clone(),
            wallet: *wallet,
            weight: *weight,
            amount,
            tx_index: rcpt.index,
        });
    }
    Ok(payments)
}

/// Integer split of `budget` by weight with exact conservation.
pub fn largest_remainder_split(payees: &[(Cid, Address, f64)], budget: u128) -> Vec<u128> {
    let positive: f64 = payees.iter().map(|(_, _, w)| *w).filter(|w| *w > 0.0).sum();
    if positive <= 0.0 || budget == 0 {
        return alloc::vec![0; payees.len()];
    }
    let mut amounts: Vec<u128> = Vec::with_capacity(payees.len());
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(payees.len());
    let mut assigned: u128 = 0;
    for (i, (_, _, w)) in payees.iter().enumerate() {
        let w = if *w > 0.0 { *w } else { 0.0 };
        let exact = w / positive * budget as f64;
        let floor = crate::math::floor(exact) as u128;
        assigned += floor;
        amounts.push(floor);
        remainders.push((i, exact - floor as f64));
    }
    let mut leftover = budget - assigned;
    remainders.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap()
            .then_with(|| payees[a.0].0.cmp(&payees[b.0].0))
    });
    for (i, _) in remainders {
        if leftover == 0 {
            break;
        }
        if payees[i].2 > 0.0 {
            amounts[i] += 1;
            leftover -= 1;
        }
    }
    debug_assert_eq!(amounts.iter().sum::<u128>(), budget);
    amounts
}
