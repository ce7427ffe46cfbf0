use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};

use optreg_cli::bench::{
    bench_header, bench_sharding, bench_variants, parse_csv, render_csv, BenchConfig,
    BenchFixture, CachingScorer, OPERATOR,
};
use optreg_cli::demo::{demo_dreambooth, write_reports, DEMO_SEED};
use optreg_cli::state::{self, Workspace};
use optreg_cli::store::DirStore;
use optreg_core::corpus;
use optreg_core::fingerprint::{to_fixed_point, Fingerprinter};
use optreg_core::image::ImageAsset;
use optreg_core::ledger::Address;
use optreg_core::manifest::consent_decision;
use optreg_core::registry::{cluster_corpus, resolve_match, KeyEncoding, Variant};

/// Consent registry workbench: corpus generation, sharded-index
/// deployment on a simulated ledger, queries, benchmarks, and the
/// end-to-end payout demo.
#[derive(Parser)]
#[command(name = "optreg", version, about)]
struct Cli {
    /// Workspace directory holding corpus, store, journal and outputs.
    #[arg(long, global = true, default_value = "optreg-state")]
    state: PathBuf,
    /// Config file (key = value); defaults to <state>/config.txt when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for whatever the subcommand generates.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Placement variant: C-OOO, E-OOF or E-FOF.
    #[arg(long, global = true)]
    variant: Option<String>,
    /// Shard count.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Output path (file or directory, subcommand-dependent).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural corpus with signed manifests.
    GenCorpus {
        #[arg(long, default_value_t = 100)]
        n: usize,
        /// Per-mille of assets that opt out of training.
        #[arg(long, default_value_t = 300)]
        opt_out: u32,
        /// Overwrite an existing corpus.
        #[arg(long)]
        force: bool,
    },
    /// Cluster the corpus fingerprints into shard centroids.
    Cluster,
    /// Deploy the hero + shard contracts on a fresh chain.
    Deploy,
    /// Ingest every corpus entry into the deployed registry.
    Ingest {
        /// Key wire encoding: int-array or string.
        #[arg(long, default_value = "int-array")]
        encoding: String,
    },
    /// Query the registry with an image and resolve the match.
    Query {
        /// Path to a PPM image.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Corpus asset id to query with.
        #[arg(long)]
        asset: Option<String>,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
    },
    /// Sync off-chain shard indexers and write their snapshots.
    Sync,
    /// Accuracy and per-phase cost across shard counts.
    BenchSharding {
        #[arg(long, default_value_t = 2000)]
        corpus_size: usize,
        #[arg(long, default_value_t = 200)]
        queries: usize,
        /// Comma-separated shard counts.
        #[arg(long, default_value = "1,5,25,50")]
        k_list: String,
    },
    /// Cost/speed comparison of the placement variants over corpus sizes.
    BenchVariants {
        #[arg(long, default_value = "500,1000,2000")]
        corpus_sizes: String,
        #[arg(long, default_value_t = 100)]
        queries: usize,
    },
    /// Run the end-to-end consent/apportionment/payment demo.
    DemoDreambooth {
        #[arg(long)]
        fixture: Option<PathBuf>,
        #[arg(long, default_value_t = 100_000)]
        budget: u128,
    },
    /// Validate and summarize a benchmark CSV or report JSON.
    Report {
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Re-measure the calibration margins behind the shipped constants.
    Calibrate,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let ws = Workspace::at(&cli.state);
    let cfg = state::load_config(cli.config.as_deref(), &ws)?;
    let seed = cli.seed.unwrap_or(DEMO_SEED);
    match cli.command {
        Command::GenCorpus { n, opt_out, force } => {
            ws.ensure()?;
            let mut store = DirStore::open(ws.store_dir())?;
            let bundle = corpus::generate_corpus(n, seed, opt_out, &mut store)?;
            state::write_corpus(&ws, &bundle.assets, force)?;
            state::write_trust(&ws, &bundle.trust)?;
            let images: Vec<ImageAsset> =
                bundle.assets.iter().map(|a| a.image.clone()).collect();
            state::write_fingerprints(&ws, &images, &cfg)?;
            state::save_config(&cfg, &ws)?;
            println!(
                "corpus: {n} assets ({} opted out) under {}",
                bundle.assets.iter().filter(|a| !a.opted_in).count(),
                ws.corpus_dir().display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Cluster => {
            let k = cli.k.unwrap_or(5);
            let images = state::read_corpus(&ws)?;
            let enc = Fingerprinter::new(cfg.fingerprint_seed);
            let fps = images
                .iter()
                .map(|i| enc.compute(i))
                .collect::<optreg_core::Result<Vec<_>>>()?;
            let set = cluster_corpus(&fps, k, seed, cfg.kmeans_tolerance)?;
            state::write_centroids(&ws, &set)?;
            println!("clustered {} fingerprints into {k} shards", fps.len());
            Ok(ExitCode::SUCCESS)
        }
        Command::Deploy => {
            let variant = Variant::parse(cli.variant.as_deref().unwrap_or("E-FOF"))?;
            if ws.journal_path().exists() {
                bail!(
                    "{} already holds a chain; remove it to redeploy",
                    ws.journal_path().display()
                );
            }
            let centroids = state::read_centroids(&ws)?;
            let mut ledger = state::fresh_ledger(optreg_cli::bench::operator_genesis());
            let operator = Address::for_account(OPERATOR);
            let registry = optreg_core::registry::Registry::deploy(
                &mut ledger,
                &centroids,
                variant,
                operator,
            )?;
            state::write_registry_meta(&ws, &registry.deployment)?;
            state::write_journal(&ws, &ledger, true)?;
            println!(
                "deployed {} with k={} (hero {})",
                variant.as_str(),
                centroids.k(),
                registry.deployment.hero.to_hex()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Ingest { encoding } => {
            let encoding = match encoding.as_str() {
                "int-array" => KeyEncoding::IntArray,
                "string" => KeyEncoding::DecimalString,
                other => bail!("unknown encoding {other:?} (int-array or string)"),
            };
            let mut ledger = state::replay_journal(&ws)?;
            let registry = state::load_registry(&ws, &ledger)?;
            let images = state::read_corpus(&ws)?;
            let consent = state::read_consent_index(&ws)?;
            let enc = Fingerprinter::new(cfg.fingerprint_seed);
            let operator = Address::for_account(OPERATOR);
            let mut total_gas = 0u64;
            for (image, (_, manifest_cid, _, _)) in images.iter().zip(&consent) {
                let key = to_fixed_point(&enc.compute(image)?)?;
                let rcpt = registry.ingest(&mut ledger, operator, &key, manifest_cid, encoding)?;
                total_gas += rcpt.gas_used;
            }
            state::write_journal(&ws, &ledger, true)?;
            println!(
                "ingested {} entries, {total_gas} gas total ({} mean)",
                images.len(),
                total_gas / images.len().max(1) as u64
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Query { image, asset, top_k } => {
            let ledger = state::replay_journal(&ws)?;
            let registry = state::load_registry(&ws, &ledger)?;
            let store = DirStore::open(ws.store_dir())?;
            let trust = state::read_trust(&ws)?;
            let query_image = match (image, asset) {
                (Some(path), _) => {
                    let bytes = std::fs::read(&path).context("read query image")?;
                    ImageAsset::from_ppm(&path.display().to_string(), &bytes)?
                }
                (None, Some(id)) => state::read_corpus(&ws)?
                    .into_iter()
                    .find(|i| i.id == id)
                    .ok_or_else(|| anyhow!("asset {id:?} not in corpus"))?,
                (None, None) => bail!("pass --image PATH or --asset ID"),
            };
            let enc = Fingerprinter::new(cfg.fingerprint_seed);
            let key = to_fixed_point(&enc.compute(&query_image)?)?;
            let operator = Address::for_account(OPERATOR);
            let result = registry.query(&ledger, operator, &key, top_k)?;
            let mut scorer = CachingScorer::new(&cfg)?;
            let (resolved, warnings) =
                resolve_match(&query_image, &result, &mut scorer, cfg.lambda, &store)?;
            println!("shard {} ({} candidates)", result.shard_id, result.candidates.len());
            for c in &result.candidates {
                println!("  {}  sim {}", c.uri, c.similarity);
            }
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            match resolved {
                Some(m) => {
                    let decision = consent_decision(Some(&m.manifest), &trust, cfg.consent_rule);
                    println!("match: {} score {:.4} consent {}", m.uri, m.score, decision.as_str());
                }
                None => println!("no verified match"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Sync => {
            let ledger = state::replay_journal(&ws)?;
            let mut registry = state::load_registry(&ws, &ledger)?;
            registry.sync(&ledger);
            if registry.indexers.is_empty() {
                println!(
                    "variant {} keeps entries in contract storage; nothing to sync",
                    registry.variant().as_str()
                );
                return Ok(ExitCode::SUCCESS);
            }
            for idx in &registry.indexers {
                let events = ledger.get_events(Some(idx.shard_address), None, 0);
                let path = state::write_indexer_snapshot(&ws, idx, &events)?;
                println!(
                    "shard {}: {} entries, {} quarantined -> {}",
                    idx.shard_id,
                    idx.entries.len(),
                    idx.quarantined.len(),
                    path.display()
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::BenchSharding { corpus_size, queries, k_list } => {
            let shard_counts = parse_usize_list(&k_list)?;
            let variant = Variant::parse(cli.variant.as_deref().unwrap_or("E-OOF"))?;
            let bench_cfg = BenchConfig {
                corpus_size,
                query_count: queries,
                shard_counts,
                variants: vec![variant],
                seed,
                timing_reps: 5,
            };
            bench_cfg.validate()?;
            eprintln!("building fixture ({corpus_size} assets)...");
            let fx = BenchFixture::build(corpus_size, seed, &cfg)?;
            let mut scorer = CachingScorer::new(&cfg)?;
            let out = bench_sharding(&fx, &bench_cfg, variant, &mut scorer)?;
            let csv = render_csv(&out.rows, &bench_header(&bench_cfg, &cfg));
            ws.ensure()?;
            let path = cli.out.unwrap_or_else(|| ws.root.join("bench_sharding.csv"));
            std::fs::write(&path, &csv).context("write csv")?;
            print!("{csv}");
            eprintln!("wrote {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::BenchVariants { corpus_sizes, queries } => {
            let sizes = parse_usize_list(&corpus_sizes)?;
            let k = cli.k.unwrap_or(5);
            let max = sizes.iter().copied().max().unwrap_or(100);
            let bench_cfg = BenchConfig {
                corpus_size: max,
                query_count: queries,
                shard_counts: vec![k],
                variants: Variant::ALL.to_vec(),
                seed,
                timing_reps: 5,
            };
            eprintln!("building fixture ({max} assets)...");
            let fx = BenchFixture::build(max, seed, &cfg)?;
            let mut scorer = CachingScorer::new(&cfg)?;
            let out = bench_variants(&fx, &sizes, k, queries, &Variant::ALL, &mut scorer, 5)?;
            let csv = render_csv(&out.rows, &bench_header(&bench_cfg, &cfg));
            ws.ensure()?;
            let path = cli.out.unwrap_or_else(|| ws.root.join("bench_variants.csv"));
            std::fs::write(&path, &csv).context("write csv")?;
            print!("{csv}");
            eprintln!("wrote {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::DemoDreambooth { fixture, budget } => {
            let fixture_ws =
                Workspace::at(fixture.unwrap_or_else(|| ws.root.join("demo-fixture")));
            let outcome = demo_dreambooth(&fixture_ws, budget, seed, &cfg)?;
            println!("{}", outcome.consent_json);
            println!("{}", outcome.apportionment_json);
            println!("state hash: {}", outcome.state_hash_hex);
            for (name, ok) in &outcome.checks {
                println!("{} {}", if *ok { "PASS" } else { "FAIL" }, name);
            }
            if let Some(out) = cli.out {
                write_reports(&out, &outcome)?;
            }
            if outcome.all_checks_pass() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::FAILURE)
            }
        }
        Command::Report { csv, json } => {
            match (csv, json) {
                (Some(path), _) => {
                    let text = std::fs::read_to_string(&path).context("read csv")?;
                    let (header, rows) = parse_csv(&text)?;
                    println!(
                        "{}: {} rows, {} header entries",
                        path.display(),
                        rows.len(),
                        header.len()
                    );
                    for r in &rows {
                        r.validate()?;
                    }
                    let mean_acc: f64 = rows.iter().map(|r| r.accuracy_pct).sum::<f64>()
                        / rows.len().max(1) as f64;
                    println!("all rows validate; mean accuracy {mean_acc:.2}%");
                }
                (None, Some(path)) => {
                    let text = std::fs::read_to_string(&path).context("read json")?;
                    let value: serde_json::Value =
                        serde_json::from_str(&text).context("parse json")?;
                    let kind = if value.get("entries").is_some() {
                        "consent report"
                    } else if value.get("payments").is_some() {
                        "apportionment report"
                    } else {
                        "json document"
                    };
                    println!("{}: valid {kind}", path.display());
                }
                (None, None) => bail!("pass --csv FILE or --json FILE"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Calibrate => {
            let report = optreg_cli::calibrate::calibrate(seed, &cfg)?;
            for line in &report.lines {
                println!("{line}");
            }
            if let Some(out) = cli.out {
                let weights = optreg_core::matchnet::ScorerWeights::analytic(
                    cfg.matchnet_seed,
                    cfg.gem_p,
                    cfg.score_scale,
                    cfg.score_bias,
                );
                std::fs::write(&out, optreg_core::matchnet::encode_weights(&weights))
                    .context("write weights file")?;
                println!("wrote analytic scorer weights to {}", out.display());
            }
            Ok(if report.configured_ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}

fn parse_usize_list(s: &str) -> anyhow::Result<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| anyhow!("bad list entry {p:?}")))
        .collect()
}
