//! Manifests, pair files, the auxiliary-attribute cache and JSON helpers.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use trident_core::aux::AuxCache;
use trident_core::data::{DatasetSplit, PairEntry, Phase, Record};
use trident_core::vocab::Composition;

use crate::error::{Error, Result};
use crate::formats::write_file;

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::read(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, to_json(value).as_bytes())
}

/// Pair-file path for `phase`, next to the manifest.
pub fn pair_file(manifest: &Path, phase: Phase) -> PathBuf {
    let name = match phase {
        Phase::Val => "val_pairs.json",
        Phase::Test => "test_pairs.json",
    };
    manifest.parent().unwrap_or(Path::new("")).join(name)
}

/// Loads a JSON Lines manifest plus the optional sibling pair files.
pub fn load_manifest(path: &Path) -> Result<DatasetSplit> {
    let text = fs::read_to_string(path).map_err(|e| Error::read(path, e))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        records.push(r);
    }
    let pairs = |phase| -> Result<Option<Vec<PairEntry>>> {
        let p = pair_file(path, phase);
        if p.exists() {
            Ok(Some(read_json(&p)?))
        } else {
            Ok(None)
        }
    };
    Ok(DatasetSplit::new(records, pairs(Phase::Val)?, pairs(Phase::Test)?)?)
}

/// Writes `manifest.jsonl`, `val_pairs.json` and `test_pairs.json` into `dir`.
pub fn write_manifest(dir: &Path, split: &DatasetSplit) -> Result<PathBuf> {
    let manifest = dir.join("manifest.jsonl");
    let mut text = String::new();
    for r in split.records() {
        text.push_str(&serde_json::to_string(r).expect("record"));
        text.push('\n');
    }
    write_file(&manifest, text.as_bytes())?;
    for phase in [Phase::Val, Phase::Test] {
        write_json(&pair_file(&manifest, phase), &split.phase_pairs(phase))?;
    }
    Ok(manifest)
}

fn parse_key(path: &Path, key: &str) -> Result<Composition> {
    match key.split_once(' ') {
        Some((a, o)) if !a.is_empty() && !o.trim().is_empty() => Ok(Composition::new(a, o)),
        _ => Err(Error::format(path, format!("cache key {key:?} is not \"attribute object\""))),
    }
}

/// Loads and validates a cache file; a missing file is an empty cache.
pub fn load_aux_cache(path: &Path, t: usize) -> Result<AuxCache> {
    let mut cache = AuxCache::new();
    if !path.exists() {
        return Ok(cache);
    }
    let raw: BTreeMap<String, Vec<String>> = read_json(path)?;
    for (key, words) in raw {
        let comp = parse_key(path, &key)?;
        cache.insert(comp, words, t).map_err(|e| Error::format(path, format!("entry {key:?}: {e}")))?;
    }
    Ok(cache)
}

pub fn aux_cache_json(cache: &AuxCache) -> String {
    let map: BTreeMap<String, &Vec<String>> = cache.entries.iter().map(|(c, w)| (c.key(), w)).collect();
    to_json(&map)
}

pub fn save_aux_cache(path: &Path, cache: &AuxCache) -> Result<()> {
    write_file(path, aux_cache_json(cache).as_bytes())
}

/// Appends one JSON line.
pub fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::write(path, e))?;
    let mut line = serde_json::to_string(value).expect("serializable value");
    line.push('\n');
    f.write_all(line.as_bytes()).map_err(|e| Error::write(path, e))
}
