//! Acceptance suite: every release-gating property of the system, one
//! test per criterion, each printing a PASS line with its measurements.
//! Run with `cargo test -p optreg-cli --test acceptance -- --nocapture`
//! to see the lines.

use std::collections::BTreeMap;
use std::sync::{Arc, LazyLock, Mutex, MutexGuard};
use std::time::Instant;

use optreg_cli::bench::{
    build_cell, centroid_cache, run_cell, BenchFixture, CachingScorer, Cell, QueryKind,
};
use optreg_cli::demo;
use optreg_cli::state::Workspace;
use optreg_core::config::Config;
use optreg_core::corpus::procedural_image;
use optreg_core::fingerprint::{
    contrastive_loss, to_fixed_point, ContrastiveBatch, Fingerprint, FixedPointVector, DIM,
};
use optreg_core::ledger::{decode_journal, encode_journal, JournalRecord, Ledger};
use optreg_core::manifest::{
    compute_cid, consent_decision, verify_manifest, Consent, Manifest, TrustList,
};
use optreg_core::matchnet::{
    apportionment_weights, bce_loss, FeatureExtractor, MatchScorer, MatchScore, ScorerWeights,
};
use optreg_core::registry::{KeyEncoding, Variant};
use optreg_core::rng::Rng;
use optreg_core::workflow::largest_remainder_split;

const ACCEPT_SEED: u64 = 424_242;
const CORPUS_SIZE: usize = 2_000;
const QUERY_COUNT: usize = 200;
const SHARD_COUNTS: [usize; 4] = [1, 5, 25, 50];

static CONFIG: LazyLock<Config> = LazyLock::new(Config::default);

static FIXTURE: LazyLock<BenchFixture> =
    LazyLock::new(|| BenchFixture::build(CORPUS_SIZE, ACCEPT_SEED, &CONFIG).expect("fixture"));

static CENTROIDS: LazyLock<Vec<(usize, optreg_core::registry::CentroidSet)>> =
    LazyLock::new(|| centroid_cache(&FIXTURE, CORPUS_SIZE, &SHARD_COUNTS).expect("centroids"));

static SCORER: LazyLock<Mutex<CachingScorer>> =
    LazyLock::new(|| Mutex::new(CachingScorer::new(&CONFIG).expect("scorer")));

/// Cells are expensive; reuse them across criteria.
static CELLS: LazyLock<Mutex<BTreeMap<(Variant, usize), Arc<Cell>>>> =
    LazyLock::new(|| Mutex::new(BTreeMap::new()));

/// One criterion at a time: several assert wall-clock behaviour.
static GATE: Mutex<()> = Mutex::new(());

fn gate() -> MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(|e| e.into_inner())
}

fn centroid_set(k: usize) -> &'static optreg_core::registry::CentroidSet {
    &CENTROIDS.iter().find(|(ck, _)| *ck == k).expect("clustered k").1
}

fn cell(variant: Variant, k: usize) -> Arc<Cell> {
    let mut cells = CELLS.lock().unwrap_or_else(|e| e.into_inner());
    cells
        .entry((variant, k))
        .or_insert_with(|| {
            Arc::new(
                build_cell(&FIXTURE, centroid_set(k), variant, CORPUS_SIZE, KeyEncoding::IntArray)
                    .expect("cell"),
            )
        })
        .clone()
}

fn random_unit(rng: &mut Rng) -> Fingerprint {
    let mut v = [0.0f64; DIM];
    for x in v.iter_mut() {
        *x = rng.next_gaussian();
    }
    optreg_core::math::normalize(&mut v);
    Fingerprint::new(v).unwrap()
}

#[test]
fn criterion_01_unperturbed_accuracy_all_k_all_variants() {
    let _g = gate();
    let started = Instant::now();
    let queries = FIXTURE.query_sample(CORPUS_SIZE, QUERY_COUNT);
    let mut scorer = SCORER.lock().unwrap_or_else(|e| e.into_inner());
    let mut cells_done = 0;
    for &k in &SHARD_COUNTS {
        for variant in Variant::ALL {
            let out = run_cell(
                &FIXTURE,
                centroid_set(k),
                variant,
                CORPUS_SIZE,
                &queries,
                &mut scorer,
                1,
                &[QueryKind::Unperturbed],
            )
            .expect("cell run");
            let acc = out.rows[0].accuracy_pct;
            assert_eq!(
                acc, 100.0,
                "unperturbed accuracy must be 100% (got {acc}% at k={k}, {})",
                variant.as_str()
            );
            cells_done += 1;
        }
    }
    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs_f64() < 120.0,
        "criterion must finish inside 2 minutes, took {elapsed:?}"
    );
    println!(
        "criterion 01 PASS: unperturbed accuracy 100% on {cells_done} (k, variant) cells, \
         {CORPUS_SIZE}-image corpus, {QUERY_COUNT} queries, {:.1}s < 120s",
        elapsed.as_secs_f64()
    );
}

#[test]
fn criterion_02_perturbed_accuracy_floor_and_shard_degradation() {
    let _g = gate();
    let queries = FIXTURE.query_sample(CORPUS_SIZE, QUERY_COUNT);
    let mut scorer = SCORER.lock().unwrap_or_else(|e| e.into_inner());
    let mut acc = BTreeMap::new();
    for k in [1usize, 25] {
        let out = run_cell(
            &FIXTURE,
            centroid_set(k),
            Variant::EFOF,
            CORPUS_SIZE,
            &queries,
            &mut scorer,
            1,
            &[QueryKind::Perturbed],
        )
        .expect("cell run");
        acc.insert(k, out.rows[0].accuracy_pct);
    }
    let (a1, a25) = (acc[&1], acc[&25]);
    assert!(a1 >= 80.0, "perturbed accuracy at k=1 must be >= 80%, got {a1}%");
    assert!(
        a25 >= a1 - 10.0,
        "accuracy at k=25 ({a25}%) must be within 10 points of k=1 ({a1}%)"
    );
    println!(
        "criterion 02 PASS: perturbed accuracy k=1 {a1:.1}% (>= 80%), k=25 {a25:.1}% \
         (within 10 points)"
    );
}

#[test]
fn criterion_03_prediction_linear_in_k_and_retrieval_monotone() {
    let _g = gate();
    let queries = FIXTURE.query_sample(CORPUS_SIZE, QUERY_COUNT);
    let mut scorer = SCORER.lock().unwrap_or_else(|e| e.into_inner());
    // on-chain shard prediction meters exactly k distance ops
    for &k in &SHARD_COUNTS {
        let out = run_cell(
            &FIXTURE,
            centroid_set(k),
            Variant::EOOF,
            CORPUS_SIZE,
            &queries[..20],
            &mut scorer,
            1,
            &[QueryKind::Unperturbed],
        )
        .expect("cell run");
        assert_eq!(
            out.diagnostics[0].predict_ops_per_query, k as u64,
            "on-chain prediction must meter exactly k distance ops"
        );
    }
    // median off-chain retrieval time is monotone non-increasing in k
    let mut medians = Vec::new();
    for &k in &SHARD_COUNTS {
        let out = run_cell(
            &FIXTURE,
            centroid_set(k),
            Variant::EFOF,
            CORPUS_SIZE,
            &queries,
            &mut scorer,
            5,
            &[QueryKind::Unperturbed],
        )
        .expect("cell run");
        medians.push((k, out.diagnostics[0].retrieval_wall_ms_median));
    }
    let mut inversions = 0;
    for w in medians.windows(2) {
        let ((k0, t0), (k1, t1)) = (w[0], w[1]);
        if t1 > t0 {
            inversions += 1;
            let excess = (t1 - t0) / t0;
            assert!(
                excess <= 0.10,
                "retrieval time rose {:.1}% from k={k0} to k={k1} (limit 10%)",
                excess * 100.0
            );
        }
    }
    assert!(inversions <= 1, "{inversions} timing inversions (one allowed)");
    println!(
        "criterion 03 PASS: prediction ops exactly k for k in {SHARD_COUNTS:?}; retrieval \
         medians {:?} ms non-increasing ({} inversion(s) within 10%)",
        medians.iter().map(|(_, t)| (*t * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
        inversions
    );
}

#[test]
fn criterion_04_ingest_gas_ordering_and_golden_values() {
    let _g = gate();
    const GOLDEN_CORPUS: usize = 500;
    const GOLDEN_K: usize = 5;
    let centroids = centroid_cache(&FIXTURE, GOLDEN_CORPUS, &[GOLDEN_K]).expect("centroids");
    let cell_c = build_cell(&FIXTURE, &centroids[0].1, Variant::COOO, GOLDEN_CORPUS, KeyEncoding::IntArray)
        .expect("C-OOO cell");
    let cell_e = build_cell(&FIXTURE, &centroids[0].1, Variant::EFOF, GOLDEN_CORPUS, KeyEncoding::IntArray)
        .expect("E-FOF cell");
    let (gas_c, gas_e) = (cell_c.ingest_gas_total, cell_e.ingest_gas_total);
    assert!(
        gas_c as f64 >= 2.0 * gas_e as f64,
        "mean ingest gas must be at least 2x: C-OOO {gas_c} vs E-FOF {gas_e}"
    );
    let rendered = format!(
        "C-OOO k={GOLDEN_K} corpus={GOLDEN_CORPUS} total_gas={gas_c}\n\
         E-FOF k={GOLDEN_K} corpus={GOLDEN_CORPUS} total_gas={gas_e}\n"
    );
    let golden = include_str!("golden/ingest_gas.txt");
    assert_eq!(rendered, golden, "ingest gas deviates from the golden file");
    println!(
        "criterion 04 PASS: ingest gas C-OOO {:.0}/image vs E-FOF {:.0}/image (ratio {:.1}x), \
         totals match the golden file",
        gas_c as f64 / GOLDEN_CORPUS as f64,
        gas_e as f64 / GOLDEN_CORPUS as f64,
        gas_c as f64 / gas_e as f64
    );
}

#[test]
fn criterion_05_variant_equivalence_on_500_queries() {
    let _g = gate();
    const K: usize = 25;
    let cells: Vec<Arc<Cell>> = Variant::ALL.iter().map(|v| cell(*v, K)).collect();
    let mut rng = Rng::new(ACCEPT_SEED).fork("variant-equivalence");
    let mut keys: Vec<FixedPointVector> = Vec::with_capacity(500);
    for _ in 0..250 {
        let idx = rng.below(CORPUS_SIZE as u64) as usize;
        keys.push(FIXTURE.keys[idx].clone());
    }
    for _ in 0..250 {
        keys.push(to_fixed_point(&random_unit(&mut rng)).unwrap());
    }
    for key in &keys {
        let results: Vec<_> = cells
            .iter()
            .map(|c| c.registry.query(&c.ledger, c.operator, key, CONFIG.top_k).expect("query"))
            .collect();
        let lists: Vec<Vec<(&str, i64)>> = results
            .iter()
            .map(|r| r.candidates.iter().map(|c| (c.uri.as_str(), c.similarity)).collect())
            .collect();
        assert_eq!(lists[0], lists[1], "C-OOO vs E-OOF candidate lists differ");
        assert_eq!(lists[1], lists[2], "E-OOF vs E-FOF candidate lists differ");
        // E-OOF and E-FOF differ only in where prediction ran
        let (eoof, efof) = (&results[1], &results[2]);
        assert!(eoof.prediction.on_chain && !efof.prediction.on_chain);
        assert!(!eoof.retrieval.on_chain && !efof.retrieval.on_chain);
        assert_eq!(eoof.shard_id, efof.shard_id);
        assert_eq!(eoof.retrieval.distance_ops, efof.retrieval.distance_ops);
    }
    println!(
        "criterion 05 PASS: identical ranked candidate lists across C-OOO/E-OOF/E-FOF on \
         {} seeded queries at k={K}; E-OOF vs E-FOF differ only in prediction placement",
        keys.len()
    );
}

#[test]
fn criterion_06_k1_equals_global_brute_force() {
    let _g = gate();
    let c = cell(Variant::EFOF, 1);
    let mut rng = Rng::new(ACCEPT_SEED).fork("brute-force");
    let sample = FIXTURE.query_sample(CORPUS_SIZE, QUERY_COUNT);
    let mut keys: Vec<FixedPointVector> =
        sample.iter().map(|&i| FIXTURE.keys[i].clone()).collect();
    for _ in 0..100 {
        keys.push(to_fixed_point(&random_unit(&mut rng)).unwrap());
    }
    for key in &keys {
        let res = c.registry.query(&c.ledger, c.operator, key, CONFIG.top_k).expect("query");
        // straight-line global scan
        let mut oracle: Vec<(i64, usize)> = FIXTURE
            .keys
            .iter()
            .enumerate()
            .map(|(i, k)| (optreg_core::fingerprint::fixed_point_similarity(k, key), i))
            .collect();
        oracle.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let expect: Vec<(String, i64)> = oracle
            .iter()
            .take(CONFIG.top_k)
            .map(|(s, i)| (FIXTURE.bundle.assets[*i].manifest_cid.as_str().to_string(), *s))
            .collect();
        let got: Vec<(String, i64)> =
            res.candidates.iter().map(|c| (c.uri.clone(), c.similarity)).collect();
        assert_eq!(got, expect, "k=1 must equal the global scan exactly");
    }
    println!(
        "criterion 06 PASS: k=1 results equal the global brute-force scan on {} queries \
         (exact list equality)",
        keys.len()
    );
}

#[test]
fn criterion_07_score_symmetry_bit_exact() {
    let _g = gate();
    let cfg = &*CONFIG;
    for (name, weights) in [
        ("random", ScorerWeights::random(ACCEPT_SEED, cfg.gem_p)),
        (
            "analytic",
            ScorerWeights::analytic(cfg.matchnet_seed, cfg.gem_p, cfg.score_scale, cfg.score_bias),
        ),
    ] {
        let scorer = MatchScorer::new(FeatureExtractor::new(cfg.matchnet_seed), weights)
            .expect("scorer");
        for pair in 0..100u64 {
            let a = procedural_image("sym-a", 96, 96, ACCEPT_SEED ^ pair);
            let b = procedural_image("sym-b", 96, 96, ACCEPT_SEED ^ (pair + 5000));
            let ab = scorer.score(&a, &b).expect("score").0;
            let ba = scorer.score(&b, &a).expect("score").0;
            assert_eq!(
                ab.to_bits(),
                ba.to_bits(),
                "{name} weights asymmetric on pair {pair}: {ab} vs {ba}"
            );
        }
    }
    println!(
        "criterion 07 PASS: apportion score bit-exactly symmetric on 100 random pairs under \
         random and analytic weights"
    );
}

#[test]
fn criterion_08_apportionment_weights_exact_and_properties() {
    let _g = gate();
    let w = apportionment_weights(&[0.9, 0.75, 0.6], 0.7).expect("weights");
    assert!((w[0] - 0.8).abs() <= 1e-12 && (w[1] - 0.2).abs() <= 1e-12 && w[2] == 0.0);

    let mut rng = Rng::new(ACCEPT_SEED).fork("weights");
    let mut simplex_checked = 0;
    for _ in 0..1000 {
        let n = 1 + rng.below(8) as usize;
        let scores: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
        let lambda = rng.range_f64(0.0, 0.95);
        let w = apportionment_weights(&scores, lambda).expect("weights");
        assert!(w.iter().all(|&x| x >= 0.0));
        let any_positive = scores.iter().any(|&s| s > lambda);
        if any_positive {
            let sum: f64 = w.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12, "simplex sum {sum}");
            simplex_checked += 1;
        } else {
            assert!(w.iter().all(|&x| x == 0.0));
        }
        // monotonicity: raising one score never lowers its weight
        let i = rng.below(n as u64) as usize;
        let mut raised = scores.clone();
        raised[i] = (raised[i] + rng.range_f64(0.0, 1.0 - raised[i])).min(1.0);
        let w2 = apportionment_weights(&raised, lambda).expect("weights");
        assert!(
            w2[i] >= w[i] - 1e-12,
            "weight fell from {} to {} when score rose",
            w[i],
            w2[i]
        );
        // permutation invariance
        let mut perm: Vec<usize> = (0..n).collect();
        for j in (1..n).rev() {
            let r = rng.below(j as u64 + 1) as usize;
            perm.swap(j, r);
        }
        let permuted: Vec<f64> = perm.iter().map(|&j| scores[j]).collect();
        let wp = apportionment_weights(&permuted, lambda).expect("weights");
        for (out_idx, &src) in perm.iter().enumerate() {
            assert!((wp[out_idx] - w[src]).abs() <= 1e-12);
        }
    }
    println!(
        "criterion 08 PASS: hand example exact to 1e-12; simplex, monotonicity and permutation \
         properties on 1000 random score vectors ({simplex_checked} with positive mass)"
    );
}

#[test]
fn criterion_09_gradients_match_finite_differences() {
    let _g = gate();
    let h = 1e-5;
    let mut worst_contrastive = 0.0f64;
    let mut worst_bce = 0.0f64;
    let mut rng = Rng::new(ACCEPT_SEED).fork("gradients");
    for batch_idx in 0..10u64 {
        // contrastive batches of 4 random unit fingerprints
        let anchors: Vec<Fingerprint> = (0..4).map(|_| random_unit(&mut rng)).collect();
        let positives: Vec<Fingerprint> = (0..4).map(|_| random_unit(&mut rng)).collect();
        let batch = ContrastiveBatch::new(anchors, positives, 0.1).unwrap();
        let out = contrastive_loss(&batch).unwrap();
        let eval = |b: &ContrastiveBatch| contrastive_loss(b).unwrap().loss;
        for i in 0..4 {
            for d in (batch_idx as usize % 17..DIM).step_by(53) {
                for which in 0..2usize {
                    let mut plus = batch.clone();
                    let mut minus = batch.clone();
                    let (vp, vm) = if which == 0 {
                        (&mut plus.anchors[i], &mut minus.anchors[i])
                    } else {
                        (&mut plus.positives[i], &mut minus.positives[i])
                    };
                    let mut p = *vp.values();
                    let mut m = *vm.values();
                    p[d] += h;
                    m[d] -= h;
                    // renormalizing would change the function; compare against
                    // the raw-vector loss the analytic gradient differentiates
                    *vp = Fingerprint::new_unchecked(p);
                    *vm = Fingerprint::new_unchecked(m);
                    let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                    let an = if which == 0 {
                        out.anchor_grads[i][d]
                    } else {
                        out.positive_grads[i][d]
                    };
                    let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
                    worst_contrastive = worst_contrastive.max(rel);
                }
            }
        }
        // bce batches
        let n = 3 + rng.below(6) as usize;
        let preds: Vec<MatchScore> =
            (0..n).map(|_| MatchScore(rng.range_f64(0.05, 0.95))).collect();
        let labels: Vec<u8> = (0..n).map(|_| (rng.below(2)) as u8).collect();
        let (_, grads) = bce_loss(&preds, &labels).unwrap();
        for i in 0..n {
            let mut plus = preds.clone();
            let mut minus = preds.clone();
            plus[i].0 += h;
            minus[i].0 -= h;
            let fd = (bce_loss(&plus, &labels).unwrap().0 - bce_loss(&minus, &labels).unwrap().0)
                / (2.0 * h);
            let rel = (grads[i] - fd).abs() / grads[i].abs().max(fd.abs()).max(1e-8);
            worst_bce = worst_bce.max(rel);
        }
    }
    assert!(worst_contrastive <= 1e-4, "contrastive gradient error {worst_contrastive}");
    assert!(worst_bce <= 1e-4, "bce gradient error {worst_bce}");
    println!(
        "criterion 09 PASS: analytic gradients match central differences on 20 random batches \
         (contrastive max rel {worst_contrastive:.2e}, bce max rel {worst_bce:.2e}, limit 1e-4)"
    );
}

#[test]
fn criterion_10_ledger_replay_conservation_and_exact_splits() {
    let _g = gate();
    // replay a benchmark journal
    let c = cell(Variant::EFOF, 5);
    let genesis_supply = {
        let fresh = optreg_cli::state::fresh_ledger(optreg_cli::bench::operator_genesis());
        fresh.total_supply()
    };
    assert_eq!(c.ledger.total_supply(), genesis_supply, "token supply must be conserved");
    let records: Vec<JournalRecord> =
        c.ledger.journal().iter().cloned().map(JournalRecord::Tx).collect();
    let bytes = encode_journal(c.ledger.genesis(), c.ledger.schedule(), &records);
    let decoded = decode_journal(&bytes).expect("journal decodes");
    let txs = decoded.transactions();
    let replayed = Ledger::replay(
        decoded.genesis,
        decoded.schedule,
        optreg_cli::state::handlers(),
        &txs,
    )
    .expect("replay");
    assert_eq!(
        replayed.state_hash(),
        c.ledger.state_hash(),
        "replay must reproduce the state hash bit for bit"
    );

    // largest-remainder splits conserve the budget exactly
    let mut rng = Rng::new(ACCEPT_SEED).fork("splits");
    for _ in 0..1000 {
        let n = 1 + rng.below(12) as usize;
        let payees: Vec<_> = (0..n)
            .map(|i| {
                (
                    compute_cid(&(i as u64 ^ rng.next_u64()).to_le_bytes()),
                    optreg_core::ledger::Address::for_account("payee"),
                    rng.next_f64(),
                )
            })
            .collect();
        let budget = rng.below(1_000_000_000) as u128;
        let split = largest_remainder_split(&payees, budget);
        let positive = payees.iter().any(|(_, _, w)| *w > 0.0);
        let total: u128 = split.iter().sum();
        if positive && budget > 0 {
            assert_eq!(total, budget, "split must conserve the budget exactly");
        } else {
            assert_eq!(total, 0);
        }
    }
    println!(
        "criterion 10 PASS: {}-tx benchmark journal replays to an identical state hash, supply \
         conserved, 1000 random splits sum exactly to their budgets",
        txs.len()
    );
}

#[test]
fn criterion_11_end_to_end_demo() {
    let _g = gate();
    let started = Instant::now();
    let dir = std::env::temp_dir().join(format!("optreg-acceptance-demo-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    let ws = Workspace::at(&dir);
    let budget = 100_000u128;
    let first = demo::demo_dreambooth(&ws, budget, demo::DEMO_SEED, &CONFIG).expect("demo");
    assert_eq!(first.consent_report.opted_in, 3, "3 of 6 must be usable");
    assert_eq!(first.consent_report.opted_out, 3);
    for (name, ok) in &first.checks {
        assert!(ok, "demo safety check failed: {name}");
    }
    assert_eq!(first.total_paid, budget, "budget must be paid out in full");
    // rerun reproduces byte-identical reports
    let second = demo::run_demo(&ws, budget, demo::DEMO_SEED, &CONFIG).expect("demo rerun");
    assert_eq!(first.consent_json, second.consent_json);
    assert_eq!(first.apportionment_json, second.apportionment_json);
    assert_eq!(first.state_hash_hex, second.state_hash_hex);
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 30.0, "demo must finish inside 30s, took {elapsed:?}");
    let _ = std::fs::remove_dir_all(&dir);
    println!(
        "criterion 11 PASS: 6-image fixture filters to 3 usable, payments only to opted-in \
         wallets, rerun byte-identical, {:.1}s < 30s",
        elapsed.as_secs_f64()
    );
}

#[test]
fn criterion_12_manifest_mutation_soundness() {
    let _g = gate();
    use optreg_core::manifest::{
        sign_manifest, Assertion, Flag, SignerKey, TrainingMiningAssertion,
    };
    let signer = SignerKey::from_seed("soundness", ACCEPT_SEED);
    let mut trust = TrustList::new();
    trust.add_signer(&signer);
    let key = trust.key_of("soundness").unwrap();
    let manifest = sign_manifest(
        Manifest::new(
            compute_cid(b"asset under test"),
            vec![
                Assertion::TrainingMining(TrainingMiningAssertion::all(Flag::Allowed)),
                Assertion::Wallet(optreg_core::ledger::Address::for_account("w")),
                Assertion::Creator("Soundness Probe".into()),
            ],
            Vec::new(),
            "soundness",
        ),
        &signer,
    )
    .expect("signed");
    assert!(verify_manifest(&manifest, key));
    assert_eq!(consent_decision(Some(&manifest), &trust, CONFIG.consent_rule), Consent::OptedIn);

    let bytes = manifest.to_bytes();
    let mut rng = Rng::new(ACCEPT_SEED).fork("mutations");
    let mut parse_failures = 0;
    let mut verify_failures = 0;
    for _ in 0..1000 {
        let mut mutated = bytes.clone();
        let pos = rng.below(mutated.len() as u64) as usize;
        let mut replacement = rng.below(256) as u8;
        while replacement == mutated[pos] {
            replacement = rng.below(256) as u8;
        }
        mutated[pos] = replacement;
        match Manifest::from_bytes(&mutated) {
            Err(_) => parse_failures += 1,
            Ok(m) => {
                assert!(
                    !verify_manifest(&m, key),
                    "mutation at byte {pos} still verifies"
                );
                verify_failures += 1;
                assert_ne!(
                    consent_decision(Some(&m), &trust, CONFIG.consent_rule),
                    Consent::OptedIn,
                    "unverified manifest must never be OptedIn"
                );
            }
        }
    }
    assert_eq!(parse_failures + verify_failures, 1000);
    println!(
        "criterion 12 PASS: 1000 single-byte mutations all rejected ({parse_failures} failed \
         to parse, {verify_failures} failed signature verification); none yielded OptedIn"
    );
}
