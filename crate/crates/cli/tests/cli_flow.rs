//! Workspace persistence round trip: the file-backed path a CLI user
//! walks through (generate, cluster, deploy, ingest, replay, query, sync)
//! plus journal determinism and the budget-zero demo edge.

use std::fs;

use optreg_cli::bench::{operator_genesis, CachingScorer, OPERATOR};
use optreg_cli::demo;
use optreg_cli::state::{self, Workspace};
use optreg_cli::store::DirStore;
use optreg_core::config::Config;
use optreg_core::corpus;
use optreg_core::fingerprint::{to_fixed_point, Fingerprinter};
use optreg_core::ledger::Address;
use optreg_core::manifest::{consent_decision, Consent};
use optreg_core::registry::{cluster_corpus, resolve_match, KeyEncoding, Registry, Variant};

fn temp_ws(tag: &str) -> Workspace {
    let dir = std::env::temp_dir().join(format!("optreg-flow-{tag}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    Workspace::at(dir)
}

#[test]
fn file_backed_flow_round_trips() {
    let cfg = Config::default();
    let ws = temp_ws("full");
    ws.ensure().unwrap();

    // gen-corpus
    let mut store = DirStore::open(ws.store_dir()).unwrap();
    let bundle = corpus::generate_corpus(24, 7, 250, &mut store).unwrap();
    state::write_corpus(&ws, &bundle.assets, false).unwrap();
    state::write_trust(&ws, &bundle.trust).unwrap();
    let images: Vec<_> = bundle.assets.iter().map(|a| a.image.clone()).collect();
    state::write_fingerprints(&ws, &images, &cfg).unwrap();

    // cluster
    let enc = Fingerprinter::new(cfg.fingerprint_seed);
    let fps: Vec<_> = images.iter().map(|i| enc.compute(i).unwrap()).collect();
    let set = cluster_corpus(&fps, 3, 7, cfg.kmeans_tolerance).unwrap();
    state::write_centroids(&ws, &set).unwrap();

    // deploy
    let mut ledger = state::fresh_ledger(operator_genesis());
    let operator = Address::for_account(OPERATOR);
    let registry = Registry::deploy(&mut ledger, &set, Variant::EFOF, operator).unwrap();
    state::write_registry_meta(&ws, &registry.deployment).unwrap();
    state::write_journal(&ws, &ledger, true).unwrap();

    // ingest on top of the replayed chain
    let mut ledger = state::replay_journal(&ws).unwrap();
    let registry = state::load_registry(&ws, &ledger).unwrap();
    for (img, asset) in images.iter().zip(&bundle.assets) {
        let key = to_fixed_point(&enc.compute(img).unwrap()).unwrap();
        registry
            .ingest(&mut ledger, operator, &key, asset.manifest_cid.as_str(), KeyEncoding::IntArray)
            .unwrap();
    }
    state::write_journal(&ws, &ledger, true).unwrap();

    // a second replay must verify the checkpoint and reproduce the hash
    let replayed = state::replay_journal(&ws).unwrap();
    assert_eq!(replayed.state_hash(), ledger.state_hash());

    // query a corpus image through the persisted state
    let ledger = state::replay_journal(&ws).unwrap();
    let registry = state::load_registry(&ws, &ledger).unwrap();
    let trust = state::read_trust(&ws).unwrap();
    let store = DirStore::open(ws.store_dir()).unwrap();
    let mut scorer = CachingScorer::new(&cfg).unwrap();
    let probe = &images[5];
    let key = to_fixed_point(&enc.compute(probe).unwrap()).unwrap();
    let result = registry.query(&ledger, operator, &key, cfg.top_k).unwrap();
    let (resolved, _) = resolve_match(probe, &result, &mut scorer, cfg.lambda, &store).unwrap();
    let resolved = resolved.expect("registered image resolves");
    assert_eq!(resolved.uri, bundle.assets[5].manifest_cid.as_str());
    let decision = consent_decision(Some(&resolved.manifest), &trust, cfg.consent_rule);
    assert_eq!(
        decision == Consent::OptedIn,
        bundle.assets[5].opted_in,
        "decision must match the seeded ground truth"
    );

    // sync writes one snapshot per shard
    let mut registry = state::load_registry(&ws, &ledger).unwrap();
    registry.sync(&ledger);
    for idx in &registry.indexers {
        let events = ledger.get_events(Some(idx.shard_address), None, 0);
        let path = state::write_indexer_snapshot(&ws, idx, &events).unwrap();
        assert!(path.exists());
    }
    let entries: usize = registry.indexers.iter().map(|i| i.entries.len()).sum();
    assert_eq!(entries, images.len());

    let _ = fs::remove_dir_all(&ws.root);
}

#[test]
fn corrupted_journal_checkpoint_is_detected() {
    let ws = temp_ws("corrupt");
    ws.ensure().unwrap();
    let ledger = state::fresh_ledger(operator_genesis());
    state::write_journal(&ws, &ledger, true).unwrap();
    let mut bytes = fs::read(ws.journal_path()).unwrap();
    let n = bytes.len();
    bytes[n - 5] ^= 0xff; // inside the checkpoint hash
    fs::write(ws.journal_path(), &bytes).unwrap();
    assert!(state::replay_journal(&ws).is_err());
    let _ = fs::remove_dir_all(&ws.root);
}

#[test]
fn demo_with_zero_budget_moves_no_tokens() {
    let cfg = Config::default();
    let ws = temp_ws("zero-budget");
    let outcome = demo::demo_dreambooth(&ws, 0, demo::DEMO_SEED, &cfg).unwrap();
    assert_eq!(outcome.total_paid, 0);
    assert!(outcome.apportionment_json.contains("\"payments\":[]"));
    assert!(outcome.all_checks_pass());
    // reports still emitted
    assert!(outcome.consent_json.contains("\"summary\""));
    let _ = fs::remove_dir_all(&ws.root);
}
