//! Benchmark harness: seeded corpora, per-cell deploy/ingest/query runs
//! across shard counts and placement variants, wall-clock and gas/op
//! accounting, CSV emission.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use optreg_core::config::{suite_description, Config};
use optreg_core::corpus::{self, CorpusBundle};
use optreg_core::fingerprint::{
    apply_perturbation, mild_suite, to_fixed_point, Fingerprint, Fingerprinter, FixedPointVector,
};
use optreg_core::image::ImageAsset;
use optreg_core::ledger::{Address, Genesis, Ledger};
use optreg_core::manifest::MemoryStore;
use optreg_core::matchnet::{FeatureExtractor, MatchScorer, PooledMatrix, ScorerWeights};
use optreg_core::registry::{
    assign_shard, cluster_corpus, resolve_match, CentroidSet, KeyEncoding, PairScorer, QueryResult,
    Registry, Variant,
};
use optreg_core::rng::Rng;
use optreg_core::{Error, Result};

pub const OPERATOR: &str = "operator";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryKind {
    Unperturbed,
    Perturbed,
}

impl QueryKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            QueryKind::Unperturbed => "unperturbed",
            QueryKind::Perturbed => "perturbed",
        }
    }
}

/// Cost of the shard-prediction phase in the row's native unit: mean gas
/// per query when it ran on-chain, mean milliseconds when off-chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PredictCost {
    GasPerQuery(f64),
    MillisPerQuery(f64),
}

impl PredictCost {
    fn value(&self) -> f64 {
        match self {
            PredictCost::GasPerQuery(v) | PredictCost::MillisPerQuery(v) => *v,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub variant: Variant,
    pub k: usize,
    pub corpus_size: usize,
    pub query_kind: QueryKind,
    pub accuracy_pct: f64,
    pub shard_predict_cost: PredictCost,
    pub retrieval_ms: f64,
    pub ingest_gas_mean: f64,
}

impl BenchRow {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.accuracy_pct) || self.accuracy_pct.is_nan() {
            return Err(Error::InvalidInput(format!("accuracy {}", self.accuracy_pct)));
        }
        for v in [self.shard_predict_cost.value(), self.retrieval_ms, self.ingest_gas_mean] {
            if v.is_nan() || v < 0.0 {
                return Err(Error::InvalidInput(format!("negative or NaN cost {v}")));
            }
        }
        Ok(())
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{:.4},{},{:.6},{:.1}",
            self.variant.as_str(),
            self.k,
            self.corpus_size,
            self.query_kind.as_str(),
            self.accuracy_pct,
            match self.shard_predict_cost {
                PredictCost::GasPerQuery(g) => format!("{g:.1}"),
                PredictCost::MillisPerQuery(ms) => format!("{ms:.6}"),
            },
            self.retrieval_ms,
            self.ingest_gas_mean,
        )
    }
}

pub const CSV_HEADER: &str =
    "variant,k,corpus_size,query_kind,accuracy_pct,shard_predict_ms_or_gas,retrieval_ms,ingest_gas_mean";

/// Per-cell measurements that back the trend assertions but do not appear
/// as CSV columns.
#[derive(Debug, Clone)]
pub struct CellDiagnostics {
    pub variant: Variant,
    pub k: usize,
    pub corpus_size: usize,
    /// Distance ops metered by one shard prediction (identical for every
    /// query of the cell).
    pub predict_ops_per_query: u64,
    /// Sum of per-query retrieval distance ops, first repetition.
    pub retrieval_ops_total: u64,
    pub ingest_gas_total: u64,
    pub ingest_wall_ms_total: f64,
    /// Median over repetitions of the summed per-query phase times.
    pub predict_wall_ms_median: f64,
    pub retrieval_wall_ms_median: f64,
    pub failures_shard_miss: usize,
    pub failures_rank_miss: usize,
    pub failures_verify_reject: usize,
}

/// Shared expensive inputs: corpus, manifests, fingerprints, keys.
pub struct BenchFixture {
    pub store: MemoryStore,
    pub bundle: CorpusBundle,
    pub fingerprints: Vec<Fingerprint>,
    pub keys: Vec<FixedPointVector>,
    pub fingerprinter: Fingerprinter,
    pub cfg: Config,
    pub seed: u64,
}

impl BenchFixture {
    pub fn build(corpus_size: usize, seed: u64, cfg: &Config) -> Result<BenchFixture> {
        let mut store = MemoryStore::new();
        let bundle = corpus::generate_corpus(corpus_size, seed, 0, &mut store)?;
        let fingerprinter = Fingerprinter::new(cfg.fingerprint_seed);
        let fingerprints = bundle
            .assets
            .iter()
            .map(|a| fingerprinter.compute(&a.image))
            .collect::<Result<Vec<_>>>()?;
        let keys =
            fingerprints.iter().map(to_fixed_point).collect::<Result<Vec<_>>>()?;
        Ok(BenchFixture { store, bundle, fingerprints, keys, fingerprinter, cfg: cfg.clone(), seed })
    }

    /// Seeded query sample without replacement from the first
    /// `corpus_size` assets.
    pub fn query_sample(&self, corpus_size: usize, count: usize) -> Vec<usize> {
        let mut rng = Rng::new(self.seed).fork("query-sample");
        let mut ids: Vec<usize> = (0..corpus_size).collect();
        for i in 0..count.min(corpus_size) {
            let j = i + rng.below((corpus_size - i) as u64) as usize;
            ids.swap(i, j);
        }
        ids.truncate(count.min(corpus_size));
        ids
    }

    /// The seeded perturbation for query slot `qi` over asset `idx`.
    pub fn perturbed_query(&self, qi: usize, idx: usize) -> Result<ImageAsset> {
        let suite = mild_suite(&self.cfg, self.seed ^ (idx as u64).wrapping_mul(0x9e37));
        let p = &suite[qi % suite.len()];
        let mut img = apply_perturbation(&self.bundle.assets[idx].image, p)?;
        img.id = format!("{}#p{}", img.id, qi % suite.len());
        Ok(img)
    }
}

/// Pair scorer that caches pooled matrices per image id and scores per
/// (query id, candidate id). Ids are content-unique in the harness:
/// corpus asset ids, CID-named candidates, and tagged perturbed queries.
pub struct CachingScorer {
    scorer: MatchScorer,
    pooled: HashMap<String, Arc<PooledMatrix>>,
    scores: HashMap<(String, String), f64>,
}

impl CachingScorer {
    pub fn new(cfg: &Config) -> Result<CachingScorer> {
        let scorer = MatchScorer::new(
            FeatureExtractor::new(cfg.matchnet_seed),
            ScorerWeights::analytic(cfg.matchnet_seed, cfg.gem_p, cfg.score_scale, cfg.score_bias),
        )?;
        Ok(CachingScorer { scorer, pooled: HashMap::new(), scores: HashMap::new() })
    }

    fn pooled_of(&mut self, image: &ImageAsset) -> Result<Arc<PooledMatrix>> {
        if let Some(p) = self.pooled.get(&image.id) {
            return Ok(p.clone());
        }
        let p = Arc::new(self.scorer.pooled(image)?);
        self.pooled.insert(image.id.clone(), p.clone());
        Ok(p)
    }
}

impl PairScorer for CachingScorer {
    fn score_pair(&mut self, query: &ImageAsset, candidate: &ImageAsset) -> Result<f64> {
        let key = (query.id.clone(), candidate.id.clone());
        if let Some(s) = self.scores.get(&key) {
            return Ok(*s);
        }
        let pq = self.pooled_of(query)?;
        let pc = self.pooled_of(candidate)?;
        let s = self.scorer.score_pooled(&pq, &pc)?.0;
        self.scores.insert(key, s);
        Ok(s)
    }
}

pub fn operator_genesis() -> Genesis {
    Genesis::new(vec![(OPERATOR.to_string(), u128::MAX / 4)])
}

/// A deployed, fully ingested cell ready for queries.
pub struct Cell {
    pub ledger: Ledger,
    pub registry: Registry,
    pub corpus_size: usize,
    pub ingest_gas_total: u64,
    pub ingest_wall_ms_total: f64,
    pub operator: Address,
}

/// Deploy and ingest the first `corpus_size` assets under (k, variant).
pub fn build_cell(
    fx: &BenchFixture,
    centroids: &CentroidSet,
    variant: Variant,
    corpus_size: usize,
    encoding: KeyEncoding,
) -> Result<Cell> {
    let operator = Address::for_account(OPERATOR);
    let mut ledger = crate::state::fresh_ledger(operator_genesis());
    let mut registry = Registry::deploy(&mut ledger, centroids, variant, operator)?;
    let mut ingest_gas_total = 0u64;
    let t0 = Instant::now();
    for i in 0..corpus_size {
        let uri = fx.bundle.assets[i].manifest_cid.as_str();
        let rcpt = registry.ingest(&mut ledger, operator, &fx.keys[i], uri, encoding)?;
        ingest_gas_total += rcpt.gas_used;
    }
    let ingest_wall_ms_total = t0.elapsed().as_secs_f64() * 1e3;
    registry.sync(&ledger);
    Ok(Cell { ledger, registry, corpus_size, ingest_gas_total, ingest_wall_ms_total, operator })
}

struct QuerySetOutcome {
    accuracy_pct: f64,
    predict_gas_mean: f64,
    predict_ops_per_query: u64,
    retrieval_ops_total: u64,
    predict_wall_ms_median: f64,
    retrieval_wall_ms_median: f64,
    shard_miss: usize,
    rank_miss: usize,
    verify_reject: usize,
}

/// Run one query set against a cell: `timing_reps` timed repetitions of
/// the predict and retrieve phases (results are deterministic, so
/// accuracy and resolution run once), then per-query verification.
#[allow(clippy::too_many_arguments)]
fn run_query_set(
    fx: &BenchFixture,
    cell: &Cell,
    queries: &[(usize, ImageAsset)],
    scorer: &mut CachingScorer,
    timing_reps: usize,
) -> Result<QuerySetOutcome> {
    let reps = timing_reps.max(1);
    let mut predict_ms: Vec<f64> = Vec::with_capacity(reps);
    let mut retrieve_ms: Vec<f64> = Vec::with_capacity(reps);
    let mut kept: Vec<QueryResult> = Vec::new();
    let mut predict_gas_total = 0u64;
    let mut predict_ops: u64 = 0;
    let mut retrieval_ops_total: u64 = 0;

    let query_keys: Vec<FixedPointVector> = queries
        .iter()
        .map(|(_, img)| to_fixed_point(&fx.fingerprinter.compute(img)?))
        .collect::<Result<Vec<_>>>()?;

    for rep in 0..reps {
        let mut predictions = Vec::with_capacity(queries.len());
        let t0 = Instant::now();
        for key in &query_keys {
            predictions.push(cell.registry.predict_shard(&cell.ledger, cell.operator, key)?);
        }
        let t1 = Instant::now();
        let mut results = Vec::with_capacity(queries.len());
        for (key, pred) in query_keys.iter().zip(&predictions) {
            results.push(cell.registry.retrieve(
                &cell.ledger,
                cell.operator,
                pred.shard_id,
                key,
                fx.cfg.top_k,
            )?);
        }
        let t2 = Instant::now();
        predict_ms.push((t1 - t0).as_secs_f64() * 1e3);
        retrieve_ms.push((t2 - t1).as_secs_f64() * 1e3);
        if rep == 0 {
            predict_gas_total = predictions.iter().map(|p| p.cost.gas).sum();
            predict_ops = predictions.first().map(|p| p.cost.distance_ops).unwrap_or(0);
            retrieval_ops_total = results.iter().map(|r| r.cost.distance_ops).sum();
            kept = predictions
                .iter()
                .zip(results)
                .map(|(p, r)| QueryResult {
                    shard_id: p.shard_id,
                    candidates: r.candidates,
                    prediction: p.cost,
                    retrieval: r.cost,
                })
                .collect();
        }
    }

    let mut correct = 0usize;
    let mut shard_miss = 0usize;
    let mut rank_miss = 0usize;
    let mut verify_reject = 0usize;
    for ((idx, image), result) in queries.iter().zip(&kept) {
        let expected_uri = fx.bundle.assets[*idx].manifest_cid.as_str();
        let (resolved, _) =
            resolve_match(image, result, scorer, fx.cfg.lambda, &fx.store)?;
        if resolved.as_ref().map(|m| m.uri.as_str()) == Some(expected_uri) {
            correct += 1;
            continue;
        }
        // classify the failure against the registered entry
        let registered_shard = assign_shard(&fx.keys[*idx], &cell.registry.deployment.centroids);
        if registered_shard != result.shard_id {
            shard_miss += 1;
        } else if !result.candidates.iter().any(|c| c.uri == expected_uri) {
            rank_miss += 1;
        } else {
            verify_reject += 1;
        }
    }

    Ok(QuerySetOutcome {
        accuracy_pct: 100.0 * correct as f64 / queries.len().max(1) as f64,
        predict_gas_mean: predict_gas_total as f64 / queries.len().max(1) as f64,
        predict_ops_per_query: predict_ops,
        retrieval_ops_total,
        predict_wall_ms_median: median(&mut predict_ms),
        retrieval_wall_ms_median: median(&mut retrieve_ms),
        shard_miss,
        rank_miss,
        verify_reject,
    })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if values.is_empty() {
        0.0
    } else {
        values[values.len() / 2]
    }
}

/// Everything one (variant, k, corpus size) cell produces.
pub struct CellOutput {
    pub rows: Vec<BenchRow>,
    pub diagnostics: Vec<CellDiagnostics>,
}

#[allow(clippy::too_many_arguments)]
pub fn run_cell(
    fx: &BenchFixture,
    centroids: &CentroidSet,
    variant: Variant,
    corpus_size: usize,
    query_ids: &[usize],
    scorer: &mut CachingScorer,
    timing_reps: usize,
    kinds: &[QueryKind],
) -> Result<CellOutput> {
    let cell = build_cell(fx, centroids, variant, corpus_size, KeyEncoding::IntArray)?;
    let k = centroids.k();
    let mut rows = Vec::new();
    let mut diagnostics = Vec::new();
    for kind in kinds {
        let queries: Vec<(usize, ImageAsset)> = match kind {
            QueryKind::Unperturbed => query_ids
                .iter()
                .map(|&i| (i, fx.bundle.assets[i].image.clone()))
                .collect(),
            QueryKind::Perturbed => query_ids
                .iter()
                .enumerate()
                .map(|(qi, &i)| Ok((i, fx.perturbed_query(qi, i)?)))
                .collect::<Result<Vec<_>>>()?,
        };
        let out = run_query_set(fx, &cell, &queries, scorer, timing_reps)?;
        let predict_cost = if variant.predicts_on_chain_at_query() {
            PredictCost::GasPerQuery(out.predict_gas_mean)
        } else {
            PredictCost::MillisPerQuery(out.predict_wall_ms_median / queries.len().max(1) as f64)
        };
        let row = BenchRow {
            variant,
            k,
            corpus_size,
            query_kind: *kind,
            accuracy_pct: out.accuracy_pct,
            shard_predict_cost: predict_cost,
            retrieval_ms: out.retrieval_wall_ms_median / queries.len().max(1) as f64,
            ingest_gas_mean: cell.ingest_gas_total as f64 / corpus_size.max(1) as f64,
        };
        row.validate()?;
        rows.push(row);
        diagnostics.push(CellDiagnostics {
            variant,
            k,
            corpus_size,
            predict_ops_per_query: out.predict_ops_per_query,
            retrieval_ops_total: out.retrieval_ops_total,
            ingest_gas_total: cell.ingest_gas_total,
            ingest_wall_ms_total: cell.ingest_wall_ms_total,
            predict_wall_ms_median: out.predict_wall_ms_median,
            retrieval_wall_ms_median: out.retrieval_wall_ms_median,
            failures_shard_miss: out.shard_miss,
            failures_rank_miss: out.rank_miss,
            failures_verify_reject: out.verify_reject,
        });
    }
    Ok(CellOutput { rows, diagnostics })
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub corpus_size: usize,
    pub query_count: usize,
    pub shard_counts: Vec<usize>,
    pub variants: Vec<Variant>,
    pub seed: u64,
    pub timing_reps: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            corpus_size: 2_000,
            query_count: 200,
            shard_counts: vec![1, 5, 25, 50],
            variants: Variant::ALL.to_vec(),
            seed: 424_242,
            timing_reps: 5,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        let max_k = self.shard_counts.iter().copied().max().unwrap_or(1);
        if self.corpus_size < max_k {
            return Err(Error::InvalidInput(format!(
                "corpus size {} below max shard count {max_k}",
                self.corpus_size
            )));
        }
        if self.query_count > self.corpus_size {
            return Err(Error::InvalidInput("query_count exceeds corpus_size".into()));
        }
        if self.shard_counts.is_empty() || self.variants.is_empty() {
            return Err(Error::InvalidInput("empty shard_counts or variants".into()));
        }
        Ok(())
    }
}

pub struct BenchOutput {
    pub rows: Vec<BenchRow>,
    pub diagnostics: Vec<CellDiagnostics>,
}

/// Cluster once per k, reused across variants.
pub fn centroid_cache(
    fx: &BenchFixture,
    corpus_size: usize,
    shard_counts: &[usize],
) -> Result<Vec<(usize, CentroidSet)>> {
    let mut out = Vec::new();
    for &k in shard_counts {
        out.push((
            k,
            cluster_corpus(
                &fx.fingerprints[..corpus_size],
                k,
                fx.seed ^ k as u64,
                fx.cfg.kmeans_tolerance,
            )?,
        ));
    }
    Ok(out)
}

/// Accuracy and cost across shard counts for one variant. Aborts if any
/// unperturbed query misses (the accuracy invariant).
pub fn bench_sharding(
    fx: &BenchFixture,
    cfg: &BenchConfig,
    variant: Variant,
    scorer: &mut CachingScorer,
) -> Result<BenchOutput> {
    cfg.validate()?;
    let queries = fx.query_sample(cfg.corpus_size, cfg.query_count);
    let centroids = centroid_cache(fx, cfg.corpus_size, &cfg.shard_counts)?;
    let mut rows = Vec::new();
    let mut diagnostics = Vec::new();
    for (k, set) in &centroids {
        let out = run_cell(
            fx,
            set,
            variant,
            cfg.corpus_size,
            &queries,
            scorer,
            cfg.timing_reps,
            &[QueryKind::Unperturbed, QueryKind::Perturbed],
        )?;
        for row in &out.rows {
            if row.query_kind == QueryKind::Unperturbed && row.accuracy_pct < 100.0 {
                return Err(Error::InvalidInput(format!(
                    "invariant breach: unperturbed accuracy {}% at k={k} ({})",
                    row.accuracy_pct,
                    variant.as_str()
                )));
            }
        }
        rows.extend(out.rows);
        diagnostics.extend(out.diagnostics);
    }
    Ok(BenchOutput { rows, diagnostics })
}

/// Cost/speed comparison of the three variants across corpus sizes at a
/// fixed k.
pub fn bench_variants(
    fx: &BenchFixture,
    corpus_sizes: &[usize],
    k: usize,
    query_count: usize,
    variants: &[Variant],
    scorer: &mut CachingScorer,
    timing_reps: usize,
) -> Result<BenchOutput> {
    let mut rows = Vec::new();
    let mut diagnostics = Vec::new();
    for &size in corpus_sizes {
        if size > fx.bundle.assets.len() {
            return Err(Error::InvalidInput(format!(
                "corpus size {size} exceeds fixture size {}",
                fx.bundle.assets.len()
            )));
        }
        let centroids = centroid_cache(fx, size, &[k])?;
        let queries = fx.query_sample(size, query_count.min(size));
        for &variant in variants {
            let out = run_cell(
                fx,
                &centroids[0].1,
                variant,
                size,
                &queries,
                scorer,
                timing_reps,
                &[QueryKind::Unperturbed, QueryKind::Perturbed],
            )?;
            rows.extend(out.rows);
            diagnostics.extend(out.diagnostics);
        }
    }
    Ok(BenchOutput { rows, diagnostics })
}

/// CSV with `# key=value` header comments embedding the full run config.
pub fn render_csv(rows: &[BenchRow], header: &[(String, String)]) -> String {
    let mut out = String::new();
    for (k, v) in header {
        out.push_str(&format!("# {k}={v}\n"));
    }
    out.push_str(CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.csv_line());
        out.push('\n');
    }
    out
}

pub fn bench_header(cfg: &BenchConfig, base: &Config) -> Vec<(String, String)> {
    let mut h = vec![
        ("seed".to_string(), cfg.seed.to_string()),
        ("corpus_size".to_string(), cfg.corpus_size.to_string()),
        ("query_count".to_string(), cfg.query_count.to_string()),
        (
            "shard_counts".to_string(),
            cfg.shard_counts.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(" "),
        ),
        (
            "variants".to_string(),
            cfg.variants.iter().map(|v| v.as_str().to_string()).collect::<Vec<_>>().join(" "),
        ),
        ("timing_reps".to_string(), cfg.timing_reps.to_string()),
        ("top_k".to_string(), base.top_k.to_string()),
        ("lambda".to_string(), format!("{}", base.lambda)),
        ("fingerprint_seed".to_string(), format!("{:#x}", base.fingerprint_seed)),
        ("matchnet_seed".to_string(), format!("{:#x}", base.matchnet_seed)),
    ];
    h.extend(suite_description(base));
    h
}

/// Parse a rendered CSV back into rows (used by `report` and tests).
pub fn parse_csv(text: &str) -> Result<(Vec<(String, String)>, Vec<BenchRow>)> {
    let mut header = Vec::new();
    let mut rows = Vec::new();
    let mut saw_columns = false;
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("# ") {
            if let Some((k, v)) = rest.split_once('=') {
                header.push((k.to_string(), v.to_string()));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        if !saw_columns {
            if line != CSV_HEADER {
                return Err(Error::Decode(format!("unexpected csv columns: {line}")));
            }
            saw_columns = true;
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 8 {
            return Err(Error::Decode(format!("csv row needs 8 fields: {line}")));
        }
        let variant = Variant::parse(parts[0])?;
        let parse_f = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| Error::Decode(format!("bad number {s:?}")))
        };
        let predict = if variant.predicts_on_chain_at_query() {
            PredictCost::GasPerQuery(parse_f(parts[5])?)
        } else {
            PredictCost::MillisPerQuery(parse_f(parts[5])?)
        };
        let row = BenchRow {
            variant,
            k: parts[1].parse().map_err(|_| Error::Decode("bad k".into()))?,
            corpus_size: parts[2].parse().map_err(|_| Error::Decode("bad corpus size".into()))?,
            query_kind: match parts[3] {
                "unperturbed" => QueryKind::Unperturbed,
                "perturbed" => QueryKind::Perturbed,
                other => return Err(Error::Decode(format!("bad query kind {other:?}"))),
            },
            accuracy_pct: parse_f(parts[4])?,
            shard_predict_cost: predict,
            retrieval_ms: parse_f(parts[6])?,
            ingest_gas_mean: parse_f(parts[7])?,
        };
        row.validate()?;
        rows.push(row);
    }
    Ok((header, rows))
}
