//! The end-to-end demo: a six-image concept set, half opted out, a mock
//! specialization step over the usable images, provenance encoding for the
//! synthetic output, apportionment and payment.

use std::fs;

use optreg_core::config::Config;
use optreg_core::corpus;
use optreg_core::fingerprint::{to_fixed_point, Fingerprinter};
use optreg_core::image::ImageAsset;
use optreg_core::ledger::Address;
use optreg_core::manifest::{
    build_provenance_graph, sign_manifest, Assertion, Cid, ContentStore, Flag, Manifest,
    SignerKey, TrainingMiningAssertion, TrustList,
};
use optreg_core::registry::{cluster_corpus, KeyEncoding, Registry, Variant};
use optreg_core::workflow::{
    apportion_credit, encode_synthetic_provenance, filter_training_set, pay_rewards,
    payable_shares, ApportionmentReport, ConsentReport,
};
use optreg_core::{Error, Result};

use crate::bench::{operator_genesis, CachingScorer, OPERATOR};
use crate::state::{self, Workspace};
use crate::store::DirStore;

pub const DEMO_SEED: u64 = 20_240_101;
const DEMO_SIGNER: &str = "stock-site";
const OPERATOR_SIGNER: &str = "genai-operator";

/// Build the demo fixture: 6 concept images (3 opted in, 3 opted out),
/// signed manifests in the content store, a trust list, and a chain with
/// the registry deployed and all six entries ingested.
pub fn build_demo_fixture(ws: &Workspace, seed: u64, cfg: &Config) -> Result<()> {
    ws.ensure()?;
    let mut store = DirStore::open(ws.store_dir())?;
    let signer = SignerKey::from_seed(DEMO_SIGNER, seed);
    let mut trust = TrustList::new();
    trust.add_signer(&signer);
    let operator_key = SignerKey::from_seed(OPERATOR_SIGNER, seed ^ 0xbeef);
    trust.add_signer(&operator_key);

    let images = corpus::generate_images(6, seed);
    let enc = Fingerprinter::new(cfg.fingerprint_seed);
    let mut assets = Vec::new();
    for (i, image) in images.iter().enumerate() {
        let asset_cid = store.put(&image.to_ppm())?;
        let wallet = Address::for_account(&format!("demo-creator-{i}"));
        let opted_in = i < 3;
        let flags = if opted_in { Flag::Allowed } else { Flag::NotAllowed };
        let manifest = sign_manifest(
            Manifest::new(
                asset_cid.clone(),
                vec![
                    Assertion::TrainingMining(TrainingMiningAssertion::all(flags)),
                    Assertion::Wallet(wallet),
                    Assertion::Creator(format!("Demo Creator {i}")),
                ],
                Vec::new(),
                DEMO_SIGNER,
            ),
            &signer,
        )?;
        let manifest_cid = store.put(&manifest.to_bytes())?;
        assets.push(corpus::CorpusAsset { image: image.clone(), asset_cid, manifest_cid, wallet, opted_in });
    }

    let fps: Vec<_> = images.iter().map(|i| enc.compute(i)).collect::<Result<Vec<_>>>()?;
    let centroids = cluster_corpus(&fps, 2, seed, cfg.kmeans_tolerance)?;
    let mut ledger = state::fresh_ledger(operator_genesis());
    let operator = Address::for_account(OPERATOR);
    let registry = Registry::deploy(&mut ledger, &centroids, Variant::EFOF, operator)?;
    for (i, a) in assets.iter().enumerate() {
        let key = to_fixed_point(&fps[i])?;
        registry.ingest(&mut ledger, operator, &key, a.manifest_cid.as_str(), KeyEncoding::IntArray)?;
    }

    state::write_corpus(ws, &assets, true)?;
    state::write_trust(ws, &trust)?;
    state::write_centroids(ws, &centroids)?;
    state::write_registry_meta(ws, &registry.deployment)?;
    state::write_journal(ws, &ledger, true)?;
    Ok(())
}

pub struct DemoOutcome {
    pub consent_report: ConsentReport,
    pub consent_json: String,
    pub apportionment_json: String,
    /// Line-delimited (query id, candidate id, score, weight) records for
    /// the apportionment pass.
    pub score_report: String,
    pub state_hash_hex: String,
    pub checks: Vec<(String, bool)>,
    pub total_paid: u128,
}

impl DemoOutcome {
    pub fn all_checks_pass(&self) -> bool {
        self.checks.iter().all(|(_, ok)| *ok)
    }
}

/// Run the demo against a fixture: consent-filter the concept set, build
/// the mock specialized model from the usable images, encode provenance,
/// apportion credit over the concepts and pay the creator wallets.
pub fn run_demo(ws: &Workspace, budget: u128, seed: u64, cfg: &Config) -> Result<DemoOutcome> {
    let mut ledger = state::replay_journal(ws)?;
    let registry = state::load_registry(ws, &ledger)?;
    let mut store = DirStore::open(ws.store_dir())?;
    let trust = state::read_trust(ws)?;
    let images = state::read_corpus(ws)?;
    let consent_truth = state::read_consent_index(ws)?;
    let enc = Fingerprinter::new(cfg.fingerprint_seed);
    let mut scorer = CachingScorer::new(cfg)?;
    let operator = Address::for_account(OPERATOR);

    let consent_report = filter_training_set(
        &images, &registry, &ledger, operator, &store, &trust, &enc, &mut scorer, cfg,
    );
    let usable_ids: Vec<String> =
        consent_report.usable().iter().map(|s| s.to_string()).collect();
    let usable_images: Vec<ImageAsset> = images
        .iter()
        .filter(|i| usable_ids.contains(&i.id))
        .cloned()
        .collect();
    if usable_images.is_empty() {
        return Err(Error::InvalidInput("no usable concept images; demo cannot proceed".into()));
    }

    // mock specialization: a deterministic composite of the usable images
    let synthetic = corpus::composite_image("demo-synthetic", &usable_images, seed ^ 0x51);
    let operator_key = SignerKey::from_seed(OPERATOR_SIGNER, seed ^ 0xbeef);

    // base model manifest minted by the operator
    let base_blob: Vec<u8> = b"demo base text-to-image model".to_vec();
    let base_asset_cid = store.put(&base_blob)?;
    let base_manifest = sign_manifest(
        Manifest::new(base_asset_cid, Vec::new(), Vec::new(), OPERATOR_SIGNER),
        &operator_key,
    )?;
    let base_manifest_cid = store.put(&base_manifest.to_bytes())?;

    // concept manifests of the usable images only
    let usable_manifest_cids: Vec<Cid> = consent_truth
        .iter()
        .filter(|(id, _, _, _)| usable_ids.contains(id))
        .map(|(_, mcid, _, _)| Cid::parse(mcid))
        .collect::<Result<Vec<_>>>()?;

    let model_blob = format!("demo specialized model over {}", usable_ids.join(", "));
    let bundle = encode_synthetic_provenance(
        &mut store,
        &usable_manifest_cids,
        &base_manifest_cid,
        model_blob.as_bytes(),
        &synthetic,
        &operator_key,
    )?;

    let shares = apportion_credit(&synthetic, &bundle, &store, &mut scorer, cfg.lambda)?;
    let (payable, _warnings) = payable_shares(&shares);
    let payer_before = ledger.balance(&operator);
    let payments = pay_rewards(&mut ledger, operator, &payable, budget)?;
    let total_paid: u128 = payments.iter().map(|p| p.amount).sum();
    let gas_paid: u128 =
        payments.len() as u128 * ledger.schedule().tx_base as u128;
    let report = ApportionmentReport { shares, payments, budget, total_paid };

    // safety checks
    let mut checks = Vec::new();
    let opted_in_ids: Vec<&str> = consent_truth
        .iter()
        .filter(|(_, _, _, opted_in)| *opted_in)
        .map(|(id, _, _, _)| id.as_str())
        .collect();
    checks.push((
        "usable set is exactly the opted-in set".to_string(),
        usable_ids.iter().map(String::as_str).collect::<Vec<_>>() == opted_in_ids,
    ));
    let graph = build_provenance_graph(&bundle.synthetic_manifest_cid, &store)?;
    let reached: Vec<Cid> = optreg_core::manifest::training_images_of(&graph)
        .into_iter()
        .map(|(cid, _)| cid)
        .collect();
    let mut usable_asset_cids: Vec<Cid> = consent_truth
        .iter()
        .filter(|(id, _, _, _)| usable_ids.contains(id))
        .map(|(id, _, _, _)| {
            let img = images.iter().find(|i| &i.id == id).expect("usable id in corpus");
            optreg_core::manifest::compute_cid(&img.to_ppm())
        })
        .collect();
    usable_asset_cids.sort();
    checks.push((
        "provenance graph reaches exactly the usable concept images".to_string(),
        reached == usable_asset_cids,
    ));
    let opted_in_wallets: Vec<String> = consent_truth
        .iter()
        .filter(|(_, _, _, opted_in)| *opted_in)
        .map(|(_, _, w, _)| w.clone())
        .collect();
    checks.push((
        "payments land only at opted-in wallets".to_string(),
        report.payments.iter().all(|p| opted_in_wallets.contains(&p.wallet.to_hex())),
    ));
    let any_weight = report.shares.iter().any(|s| s.weight > 0.0);
    checks.push((
        "payout conserves the budget".to_string(),
        if any_weight { total_paid == budget } else { total_paid == 0 },
    ));
    checks.push((
        "payer debited exactly payout plus gas".to_string(),
        ledger.balance(&operator) == payer_before - total_paid - gas_paid,
    ));

    let state_hash_hex = hex32(&ledger.state_hash());
    let mut score_report = String::new();
    for s in &report.shares {
        score_report.push_str(&optreg_core::matchnet::score_report_line(
            &synthetic.id,
            s.asset_cid.as_str(),
            s.score,
            s.weight,
        ));
        score_report.push('\n');
    }
    Ok(DemoOutcome {
        consent_json: consent_report.to_json(),
        consent_report,
        apportionment_json: report.to_json(),
        score_report,
        state_hash_hex,
        checks,
        total_paid,
    })
}

fn hex32(bytes: &[u8; 32]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Ensure the fixture exists (building it when absent) and run the demo.
pub fn demo_dreambooth(ws: &Workspace, budget: u128, seed: u64, cfg: &Config) -> Result<DemoOutcome> {
    if !ws.journal_path().exists() {
        build_demo_fixture(ws, seed, cfg)?;
    }
    run_demo(ws, budget, seed, cfg)
}

/// Write demo reports under `out`.
pub fn write_reports(out: &std::path::Path, outcome: &DemoOutcome) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::Configuration(format!("create out dir: {e}")))?;
    fs::write(out.join("consent_report.json"), &outcome.consent_json)
        .map_err(|e| Error::Configuration(format!("write consent report: {e}")))?;
    fs::write(out.join("apportionment_report.json"), &outcome.apportionment_json)
        .map_err(|e| Error::Configuration(format!("write apportionment report: {e}")))?;
    fs::write(out.join("scores.report"), &outcome.score_report)
        .map_err(|e| Error::Configuration(format!("write score report: {e}")))?;
    Ok(())
}
