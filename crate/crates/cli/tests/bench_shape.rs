//! Benchmark harness contracts: row arithmetic, CSV round trip, header
//! embedding, and the cross-variant cost orderings at a small scale.

use proptest::prelude::*;

use optreg_cli::bench::{
    bench_header, bench_sharding, bench_variants, parse_csv, render_csv, BenchConfig,
    BenchFixture, BenchRow, CachingScorer, PredictCost, QueryKind,
};
use optreg_core::config::Config;
use optreg_core::registry::Variant;

#[test]
fn sharding_rows_and_orderings_at_small_scale() {
    let cfg = Config::default();
    let bench_cfg = BenchConfig {
        corpus_size: 120,
        query_count: 24,
        shard_counts: vec![1, 3, 6],
        variants: vec![Variant::EOOF],
        seed: 909,
        timing_reps: 3,
    };
    let fx = BenchFixture::build(bench_cfg.corpus_size, bench_cfg.seed, &cfg).unwrap();
    let mut scorer = CachingScorer::new(&cfg).unwrap();
    let out = bench_sharding(&fx, &bench_cfg, Variant::EOOF, &mut scorer).unwrap();
    // 2 query kinds x 3 shard counts
    assert_eq!(out.rows.len(), 6);
    for row in &out.rows {
        row.validate().unwrap();
        if row.query_kind == QueryKind::Unperturbed {
            assert_eq!(row.accuracy_pct, 100.0);
        }
    }
    // csv round trip with an embedded header
    let header = bench_header(&bench_cfg, &cfg);
    let csv = render_csv(&out.rows, &header);
    assert!(csv.starts_with("# seed=909\n"));
    let (parsed_header, parsed_rows) = parse_csv(&csv).unwrap();
    assert_eq!(parsed_header, header);
    assert_eq!(parsed_rows.len(), out.rows.len());
}

#[test]
fn variant_bench_reproduces_cost_orderings() {
    let cfg = Config::default();
    let fx = BenchFixture::build(150, 31_337, &cfg).unwrap();
    let mut scorer = CachingScorer::new(&cfg).unwrap();
    let out = bench_variants(&fx, &[150], 3, 20, &Variant::ALL, &mut scorer, 2).unwrap();
    assert_eq!(out.rows.len(), 6, "3 variants x 2 query kinds");
    let gas_of = |v: Variant| {
        out.diagnostics.iter().find(|d| d.variant == v).map(|d| d.ingest_gas_total).unwrap()
    };
    let wall_of = |v: Variant| {
        out.diagnostics.iter().find(|d| d.variant == v).map(|d| d.ingest_wall_ms_total).unwrap()
    };
    // in-contract storage costs at least twice the event log, in gas and wall time
    assert!(gas_of(Variant::COOO) >= 2 * gas_of(Variant::EFOF));
    assert!(
        wall_of(Variant::COOO) > wall_of(Variant::EFOF),
        "C-OOO ingest ({:.1}ms) must be slower than E-FOF ({:.1}ms)",
        wall_of(Variant::COOO),
        wall_of(Variant::EFOF)
    );
    // event-log variants share identical ingest gas
    assert_eq!(gas_of(Variant::EOOF), gas_of(Variant::EFOF));
}

fn arbitrary_row() -> impl Strategy<Value = BenchRow> {
    (
        prop_oneof![Just(Variant::COOO), Just(Variant::EOOF), Just(Variant::EFOF)],
        1usize..100,
        1usize..100_000,
        any::<bool>(),
        0.0f64..=100.0,
        0.0f64..1e9,
        0.0f64..1e6,
        0.0f64..1e9,
    )
        .prop_map(|(variant, k, corpus_size, unp, acc, predict, retrieval, gas)| BenchRow {
            variant,
            k,
            corpus_size,
            query_kind: if unp { QueryKind::Unperturbed } else { QueryKind::Perturbed },
            accuracy_pct: (acc * 1e4).round() / 1e4,
            shard_predict_cost: if variant.predicts_on_chain_at_query() {
                PredictCost::GasPerQuery((predict * 10.0).round() / 10.0)
            } else {
                PredictCost::MillisPerQuery((predict * 1e6).round() / 1e6)
            },
            retrieval_ms: (retrieval * 1e6).round() / 1e6,
            ingest_gas_mean: (gas * 10.0).round() / 10.0,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn csv_round_trips_arbitrary_rows(rows in proptest::collection::vec(arbitrary_row(), 0..12)) {
        let csv = render_csv(&rows, &[("k".into(), "v".into())]);
        let (header, parsed) = parse_csv(&csv).unwrap();
        prop_assert_eq!(header, vec![("k".to_string(), "v".to_string())]);
        prop_assert_eq!(parsed, rows);
    }
}
