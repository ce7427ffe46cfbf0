//! Workspace layout and file IO for the CLI: corpus directory, chain
//! journal, trust list, centroid file, indexer snapshots, fingerprint
//! export.

use std::fs;
use std::path::{Path, PathBuf};

use optreg_core::config::Config;
use optreg_core::corpus::CorpusAsset;
use optreg_core::fingerprint::{encode_export_record, to_fixed_point, Fingerprinter};
use optreg_core::image::ImageAsset;
use optreg_core::ledger::{
    decode_journal, encode_event, encode_journal, DecodedJournal, EventRecord, GasSchedule,
    Genesis, HandlerRegistry, JournalRecord, Ledger,
};
use optreg_core::manifest::TrustList;
use optreg_core::registry::{
    decode_centroids, encode_centroids, standard_registry, CentroidSet, OffChainShardIndex,
};
use optreg_core::{Error, Result};

/// Paths inside a workspace directory.
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn at(root: impl AsRef<Path>) -> Workspace {
        Workspace { root: root.as_ref().to_path_buf() }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }
    pub fn store_dir(&self) -> PathBuf {
        self.root.join("store")
    }
    pub fn trust_path(&self) -> PathBuf {
        self.root.join("trust.list")
    }
    pub fn journal_path(&self) -> PathBuf {
        self.root.join("journal.chain")
    }
    pub fn centroids_path(&self) -> PathBuf {
        self.root.join("centroids.bin")
    }
    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.txt")
    }
    pub fn fingerprints_path(&self) -> PathBuf {
        self.root.join("fingerprints.bin")
    }
    pub fn indexer_dir(&self) -> PathBuf {
        self.root.join("indexers")
    }
    pub fn consent_index_path(&self) -> PathBuf {
        self.corpus_dir().join("consent.index")
    }

    pub fn ensure(&self) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(io_err("create workspace"))?;
        Ok(())
    }
}

fn io_err(what: &'static str) -> impl Fn(std::io::Error) -> Error {
    move |e| Error::Configuration(format!("{what}: {e}"))
}

pub fn load_config(explicit: Option<&Path>, ws: &Workspace) -> Result<Config> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let p = ws.config_path();
            if !p.exists() {
                return Ok(Config::default());
            }
            p
        }
    };
    let text = fs::read_to_string(&path).map_err(io_err("read config"))?;
    Config::parse(&text)
}

pub fn save_config(cfg: &Config, ws: &Workspace) -> Result<()> {
    ws.ensure()?;
    fs::write(ws.config_path(), cfg.to_text()).map_err(io_err("write config"))
}

// --- corpus directory -----------------------------------------------------

/// Write images as PPM files plus the line-delimited corpus index
/// (asset id, relative path) and the consent index used by benchmarks.
pub fn write_corpus(ws: &Workspace, assets: &[CorpusAsset], force: bool) -> Result<()> {
    let dir = ws.corpus_dir();
    if dir.exists()
        && !force
        && fs::read_dir(&dir).map_err(io_err("read corpus dir"))?.next().is_some()
    {
        return Err(Error::Configuration(format!(
            "{} already holds a corpus; pass --force to overwrite",
            dir.display()
        )));
    }
    fs::create_dir_all(&dir).map_err(io_err("create corpus dir"))?;
    let mut index = String::new();
    let mut consent = String::new();
    for a in assets {
        let rel = format!("{}.ppm", a.image.id);
        fs::write(dir.join(&rel), a.image.to_ppm()).map_err(io_err("write image"))?;
        index.push_str(&format!("{}\t{}\n", a.image.id, rel));
        consent.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            a.image.id,
            a.manifest_cid,
            a.wallet.to_hex(),
            if a.opted_in { "in" } else { "out" }
        ));
    }
    fs::write(dir.join("corpus.index"), index).map_err(io_err("write corpus index"))?;
    fs::write(ws.consent_index_path(), consent).map_err(io_err("write consent index"))?;
    Ok(())
}

/// Read the corpus back: (asset id, image) pairs in index order.
pub fn read_corpus(ws: &Workspace) -> Result<Vec<ImageAsset>> {
    let dir = ws.corpus_dir();
    let index = fs::read_to_string(dir.join("corpus.index")).map_err(io_err("read corpus index"))?;
    let mut images = Vec::new();
    for (lineno, line) in index.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, rel) = line
            .split_once('\t')
            .ok_or_else(|| Error::Decode(format!("corpus index line {}", lineno + 1)))?;
        let bytes = fs::read(dir.join(rel)).map_err(io_err("read image"))?;
        images.push(ImageAsset::from_ppm(id, &bytes)?);
    }
    Ok(images)
}

/// Consent index rows: (asset id, manifest cid, wallet hex, opted_in).
pub fn read_consent_index(ws: &Workspace) -> Result<Vec<(String, String, String, bool)>> {
    let text =
        fs::read_to_string(ws.consent_index_path()).map_err(io_err("read consent index"))?;
    let mut rows = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 4 {
            return Err(Error::Decode("consent index row needs 4 fields".into()));
        }
        rows.push((
            parts[0].to_string(),
            parts[1].to_string(),
            parts[2].to_string(),
            parts[3] == "in",
        ));
    }
    Ok(rows)
}

pub fn write_trust(ws: &Workspace, trust: &TrustList) -> Result<()> {
    ws.ensure()?;
    fs::write(ws.trust_path(), trust.to_text()).map_err(io_err("write trust list"))
}

pub fn read_trust(ws: &Workspace) -> Result<TrustList> {
    let text = fs::read_to_string(ws.trust_path()).map_err(io_err("read trust list"))?;
    TrustList::parse(&text)
}

pub fn write_centroids(ws: &Workspace, set: &CentroidSet) -> Result<()> {
    ws.ensure()?;
    fs::write(ws.centroids_path(), encode_centroids(set)).map_err(io_err("write centroids"))
}

pub fn read_centroids(ws: &Workspace) -> Result<CentroidSet> {
    let bytes = fs::read(ws.centroids_path()).map_err(io_err("read centroids"))?;
    decode_centroids(&bytes)
}

/// Export fingerprints for every corpus image.
pub fn write_fingerprints(ws: &Workspace, images: &[ImageAsset], cfg: &Config) -> Result<()> {
    let enc = Fingerprinter::new(cfg.fingerprint_seed);
    let mut out = Vec::new();
    for img in images {
        let fp = to_fixed_point(&enc.compute(img)?)?;
        out.extend_from_slice(&encode_export_record(&img.id, &fp));
    }
    fs::write(ws.fingerprints_path(), out).map_err(io_err("write fingerprints"))
}

// --- chain journal ----------------------------------------------------------

pub fn write_journal(ws: &Workspace, ledger: &Ledger, checkpoint: bool) -> Result<()> {
    ws.ensure()?;
    let mut records: Vec<JournalRecord> =
        ledger.journal().iter().cloned().map(JournalRecord::Tx).collect();
    if checkpoint {
        records.push(JournalRecord::Checkpoint(ledger.state_hash()));
    }
    let bytes = encode_journal(ledger.genesis(), ledger.schedule(), &records);
    fs::write(ws.journal_path(), bytes).map_err(io_err("write journal"))
}

pub fn read_journal(ws: &Workspace) -> Result<DecodedJournal> {
    let bytes = fs::read(ws.journal_path()).map_err(io_err("read journal"))?;
    decode_journal(&bytes)
}

/// Standard handler registry for replay.
pub fn handlers() -> HandlerRegistry {
    let mut h = HandlerRegistry::new();
    standard_registry(&mut h);
    h
}

/// Replay the journal into a live ledger, verifying any checkpoints.
pub fn replay_journal(ws: &Workspace) -> Result<Ledger> {
    let decoded = read_journal(ws)?;
    let mut ledger = Ledger::new(decoded.genesis.clone(), decoded.schedule.clone(), handlers());
    for rec in &decoded.records {
        match rec {
            JournalRecord::Tx(tx) => {
                ledger.submit(tx.clone())?;
            }
            JournalRecord::Checkpoint(expect) => {
                let got = ledger.state_hash();
                if &got != expect {
                    return Err(Error::Corruption(
                        "journal checkpoint does not match replayed state".into(),
                    ));
                }
            }
        }
    }
    Ok(ledger)
}

/// Fresh chain with the standard demo genesis.
pub fn fresh_ledger(genesis: Genesis) -> Ledger {
    Ledger::new(genesis, GasSchedule::default(), handlers())
}

// --- registry deployment metadata -----------------------------------------

/// Reconstructable deployment facts: variant, hero and shard addresses.
/// Centroids live in `centroids.bin`.
pub fn write_registry_meta(
    ws: &Workspace,
    deployment: &optreg_core::registry::RegistryDeployment,
) -> Result<()> {
    let mut text = format!("variant={}\nhero={}\n", deployment.variant.as_str(), deployment.hero.to_hex());
    for s in &deployment.shards {
        text.push_str(&format!("shard={}\n", s.to_hex()));
    }
    fs::write(ws.root.join("registry.meta"), text).map_err(io_err("write registry meta"))
}

pub fn read_registry_meta(
    ws: &Workspace,
) -> Result<(optreg_core::registry::Variant, optreg_core::ledger::Address, Vec<optreg_core::ledger::Address>)> {
    let text =
        fs::read_to_string(ws.root.join("registry.meta")).map_err(io_err("read registry meta"))?;
    let mut variant = None;
    let mut hero = None;
    let mut shards = Vec::new();
    for line in text.lines() {
        let Some((key, value)) = line.split_once('=') else { continue };
        match key {
            "variant" => variant = Some(optreg_core::registry::Variant::parse(value)?),
            "hero" => hero = Some(optreg_core::ledger::Address::from_hex(value)?),
            "shard" => shards.push(optreg_core::ledger::Address::from_hex(value)?),
            _ => {}
        }
    }
    Ok((
        variant.ok_or_else(|| Error::Decode("registry meta missing variant".into()))?,
        hero.ok_or_else(|| Error::Decode("registry meta missing hero".into()))?,
        shards,
    ))
}

/// Rebuild the registry facade from persisted state plus a replayed
/// ledger; syncs indexers and reads the centroid mirror where the variant
/// calls for them.
pub fn load_registry(ws: &Workspace, ledger: &Ledger) -> Result<optreg_core::registry::Registry> {
    use optreg_core::registry::{mirror_centroids, Registry, RegistryDeployment};
    let (variant, hero, shards) = read_registry_meta(ws)?;
    let centroids = read_centroids(ws)?;
    let deployment = RegistryDeployment { variant, hero, shards, centroids };
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
    let mut registry = Registry { deployment, indexers, mirror };
    registry.sync(ledger);
    Ok(registry)
}

// --- indexer snapshots --------------------------------------------------------

/// Persist one indexer as its cursor plus the wire-format event records it
/// has folded.
pub fn write_indexer_snapshot(
    ws: &Workspace,
    idx: &OffChainShardIndex,
    events: &[&EventRecord],
) -> Result<PathBuf> {
    let dir = ws.indexer_dir();
    fs::create_dir_all(&dir).map_err(io_err("create indexer dir"))?;
    let mut bytes = Vec::new();
    bytes.extend_from_slice(b"OPIX");
    bytes.extend_from_slice(&1u32.to_le_bytes());
    bytes.extend_from_slice(&(idx.shard_id as u32).to_le_bytes());
    bytes.extend_from_slice(&idx.last_seen_sequence.to_le_bytes());
    bytes.extend_from_slice(&(events.len() as u32).to_le_bytes());
    for e in events {
        bytes.extend_from_slice(&encode_event(e));
    }
    let path = dir.join(format!("shard-{:04}.events", idx.shard_id));
    fs::write(&path, bytes).map_err(io_err("write indexer snapshot"))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use optreg_core::corpus;
    use optreg_core::manifest::MemoryStore;

    fn temp_ws(tag: &str) -> Workspace {
        let dir = std::env::temp_dir().join(format!("optreg-ws-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        Workspace::at(dir)
    }

    #[test]
    fn corpus_round_trip() {
        let ws = temp_ws("corpus");
        ws.ensure().unwrap();
        let mut store = MemoryStore::new();
        let bundle = corpus::generate_corpus(5, 3, 300, &mut store).unwrap();
        write_corpus(&ws, &bundle.assets, false).unwrap();
        let images = read_corpus(&ws).unwrap();
        assert_eq!(images.len(), 5);
        for (img, asset) in images.iter().zip(&bundle.assets) {
            assert_eq!(img, &asset.image);
        }
        let consent = read_consent_index(&ws).unwrap();
        assert_eq!(consent.len(), 5);
        // refuses to clobber without force
        assert!(write_corpus(&ws, &bundle.assets, false).is_err());
        write_corpus(&ws, &bundle.assets, true).unwrap();
        let _ = fs::remove_dir_all(&ws.root);
    }

    #[test]
    fn config_defaults_when_absent() {
        let ws = temp_ws("config");
        let cfg = load_config(None, &ws).unwrap();
        assert_eq!(cfg, Config::default());
        let _ = fs::remove_dir_all(&ws.root);
    }
}
