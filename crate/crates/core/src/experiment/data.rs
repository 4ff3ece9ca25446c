//! Benchmark files: generation, loading with hash checks, and re-validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, Provenance};
use crate::benchgen::{
    gen_multi_obj_quadruplets, gen_single_obj_dataset, validate_quadruplet, Quadruplet, QuadrupletSpec,
    SingleObjSpec,
};
use crate::pools::{build_pool, PoolMode};
use crate::scene::{Query, Scene};
use crate::split::{split_seen_unseen, SplitSpec};
use crate::util::{mix_seed, sha256_hex, to_json_line, write_file};
use crate::vocab::Vocabulary;
use crate::{CoreError, Result};

pub const SCENES_FILE: &str = "scenes.jsonl";
pub const QUERIES_FILE: &str = "queries.jsonl";
pub const QUADRUPLETS_FILE: &str = "quadruplets.jsonl";
pub const SPLITS_FILE: &str = "splits.json";
pub const MANIFEST_FILE: &str = "manifest.json";

pub const DATA_FILES: [&str; 4] = [SCENES_FILE, QUERIES_FILE, QUADRUPLETS_FILE, SPLITS_FILE];

/// Scene/query partition plus the quadruplet partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSplits {
    #[serde(flatten)]
    pub queries: SplitSpec,
    pub train_quadruplets: Vec<String>,
    pub val_quadruplets: Vec<String>,
    pub test_quadruplets: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
    pub records: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataManifest {
    pub provenance: Provenance,
    pub files: Vec<FileEntry>,
    /// Hash over the file hashes; identifies the data across runs.
    pub data_hash: String,
}

impl DataManifest {
    fn new(provenance: Provenance, files: Vec<FileEntry>) -> Self {
        let listing: String = files.iter().map(|f| format!("{} {}\n", f.name, f.sha256)).collect();
        DataManifest {
            provenance,
            data_hash: sha256_hex(listing.as_bytes()),
            files,
        }
    }
}

/// A loaded benchmark, partitioned.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train_scenes: Vec<Scene>,
    pub test_scenes: Vec<Scene>,
    /// Single-object retrieval queries over the test scenes.
    pub queries: Vec<Query>,
    pub train_quads: Vec<Quadruplet>,
    pub val_quads: Vec<Quadruplet>,
    pub test_quads: Vec<Quadruplet>,
    pub splits: DataSplits,
    pub manifest: DataManifest,
}

/// Serialized files of a generated benchmark, in [`DATA_FILES`] order.
pub struct GeneratedFiles {
    pub files: Vec<(String, Vec<u8>)>,
    pub manifest: DataManifest,
}

fn jsonl<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for item in items {
        out.extend_from_slice(to_json_line(item)?.as_bytes());
        out.push(b'\n');
    }
    Ok(out)
}

fn pretty<T: Serialize>(item: &T) -> Result<Vec<u8>> {
    let mut text = serde_json::to_string_pretty(item).map_err(|e| CoreError::json("serialize", e))?;
    text.push('\n');
    Ok(text.into_bytes())
}

fn ids<'a>(quads: impl Iterator<Item = &'a Quadruplet>) -> Vec<String> {
    quads.map(|q| q.quad_id.clone()).collect()
}

/// Builds the benchmark in memory. Pure in the config.
pub fn generate(cfg: &ExperimentConfig) -> Result<GeneratedFiles> {
    cfg.validate()?;
    let g = &cfg.generation;
    let vocab = &cfg.vocabulary;
    let single = |n, prefix: &str, salt| {
        let spec = SingleObjSpec {
            n_scenes: n,
            attrs_per_object: g.attrs_per_object,
            objects_per_scene: g.objects_per_scene,
            grid: g.grid,
            id_prefix: prefix.to_string(),
        };
        gen_single_obj_dataset(vocab, &spec, mix_seed(cfg.seed, salt))
    };
    let train = single(g.train_scenes, "train", 1)?;
    let test = single(g.test_scenes, "test", 2)?;
    let (split, kept) = split_seen_unseen(&test.queries, &train.scenes, &test.scenes, g.k_unseen, cfg.seed)?;
    let quads = |n, prefix: &str, salt| {
        let spec = QuadrupletSpec {
            n,
            grid: g.grid,
            attrs_per_object: g.quad_attributes,
            extra_objects: g.extra_objects,
            id_prefix: prefix.to_string(),
        };
        gen_multi_obj_quadruplets(vocab, &spec, mix_seed(cfg.seed, salt))
    };
    let train_q = quads(g.train_quadruplets, "qtrain", 3)?;
    let val_q = quads(g.val_quadruplets, "qval", 4)?;
    let test_q = quads(g.test_quadruplets, "qtest", 5)?;

    let splits = DataSplits {
        queries: split,
        train_quadruplets: ids(train_q.iter()),
        val_quadruplets: ids(val_q.iter()),
        test_quadruplets: ids(test_q.iter()),
    };
    let scenes: Vec<Scene> = kept.into_iter().chain(test.scenes).collect();
    let all_quads: Vec<Quadruplet> = train_q.into_iter().chain(val_q).chain(test_q).collect();
    let files = vec![
        (SCENES_FILE.to_string(), jsonl(&scenes)?, scenes.len()),
        (QUERIES_FILE.to_string(), jsonl(&test.queries)?, test.queries.len()),
        (QUADRUPLETS_FILE.to_string(), jsonl(&all_quads)?, all_quads.len()),
        (SPLITS_FILE.to_string(), pretty(&splits)?, 1),
    ];
    let entries = files
        .iter()
        .map(|(name, bytes, records)| FileEntry {
            name: name.clone(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
            records: *records,
        })
        .collect();
    Ok(GeneratedFiles {
        manifest: DataManifest::new(cfg.provenance(), entries),
        files: files.into_iter().map(|(n, b, _)| (n, b)).collect(),
    })
}

/// Generates and writes the data files and the manifest into `dir`.
pub fn cmd_gen(cfg: &ExperimentConfig, dir: &Path) -> Result<DataManifest> {
    let generated = generate(cfg)?;
    for (name, bytes) in &generated.files {
        write_file(&dir.join(name), bytes)?;
    }
    write_file(&dir.join(MANIFEST_FILE), &pretty(&generated.manifest)?)?;
    Ok(generated.manifest)
}

fn parse_jsonl<T: serde::de::DeserializeOwned>(name: &str, bytes: &[u8]) -> Result<Vec<T>> {
    let text = std::str::from_utf8(bytes).map_err(|_| CoreError::Format {
        offset: 0,
        message: format!("{name} is not UTF-8"),
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| CoreError::json(format!("{name}:{}", n + 1), e)))
        .collect()
}

fn read(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let path = dir.join(name);
    fs::read(&path).map_err(|e| CoreError::io(&path, e))
}

fn pick(all: &BTreeMap<String, Quadruplet>, ids: &[String], which: &str) -> Result<Vec<Quadruplet>> {
    ids.iter()
        .map(|id| {
            all.get(id)
                .cloned()
                .ok_or_else(|| CoreError::Validation(format!("{which} quadruplet {id} is missing")))
        })
        .collect()
}

/// Loads a benchmark after checking every file against the manifest.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: DataManifest = serde_json::from_slice(&read(dir, MANIFEST_FILE)?)
        .map_err(|e| CoreError::json(MANIFEST_FILE, e))?;
    let mut contents = BTreeMap::new();
    for entry in &manifest.files {
        let bytes = read(dir, &entry.name)?;
        let actual = sha256_hex(&bytes);
        if actual != entry.sha256 {
            return Err(CoreError::Validation(format!(
                "{} has hash {actual}, the manifest records {}",
                entry.name, entry.sha256
            )));
        }
        contents.insert(entry.name.clone(), bytes);
    }
    let get = |name: &str| {
        contents
            .get(name)
            .ok_or_else(|| CoreError::Validation(format!("the manifest does not list {name}")))
    };
    let scenes: Vec<Scene> = parse_jsonl(SCENES_FILE, get(SCENES_FILE)?)?;
    let queries: Vec<Query> = parse_jsonl(QUERIES_FILE, get(QUERIES_FILE)?)?;
    let quads: Vec<Quadruplet> = parse_jsonl(QUADRUPLETS_FILE, get(QUADRUPLETS_FILE)?)?;
    let splits: DataSplits =
        serde_json::from_slice(get(SPLITS_FILE)?).map_err(|e| CoreError::json(SPLITS_FILE, e))?;

    let by_id: BTreeMap<&str, &Scene> = scenes.iter().map(|s| (s.scene_id.as_str(), s)).collect();
    let scene_list = |ids: &[String], which: &str| -> Result<Vec<Scene>> {
        ids.iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .map(|s| (*s).clone())
                    .ok_or_else(|| CoreError::Validation(format!("{which} scene {id} is missing")))
            })
            .collect()
    };
    let train_scenes = scene_list(&splits.queries.train_scenes, "train")?;
    let test_scenes = scene_list(&splits.queries.test_scenes, "test")?;
    let quad_map: BTreeMap<String, Quadruplet> = quads.into_iter().map(|q| (q.quad_id.clone(), q)).collect();
    Ok(Dataset {
        train_quads: pick(&quad_map, &splits.train_quadruplets, "train")?,
        val_quads: pick(&quad_map, &splits.val_quadruplets, "validation")?,
        test_quads: pick(&quad_map, &splits.test_quadruplets, "test")?,
        train_scenes,
        test_scenes,
        queries,
        splits,
        manifest,
    })
}

/// Counts reported by a successful validation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub queries: usize,
    pub seen: usize,
    pub unseen: usize,
    pub quadruplets: usize,
}

/// Re-checks every benchmark invariant on the files in `dir`.
pub fn validate_data(dir: &Path, vocab: &Vocabulary) -> Result<ValidationSummary> {
    let data = load_dataset(dir)?;
    let fail = |m: String| Err(CoreError::Validation(m));
    for s in data.train_scenes.iter().chain(&data.test_scenes) {
        s.validate(vocab)?;
    }
    let train_ids: BTreeSet<&str> = data.train_scenes.iter().map(|s| s.scene_id.as_str()).collect();
    if let Some(s) = data.test_scenes.iter().find(|s| train_ids.contains(s.scene_id.as_str())) {
        return fail(format!("scene {} is in both train and test", s.scene_id));
    }
    let split = &data.splits.queries;
    let query_ids: BTreeSet<&str> = data.queries.iter().map(|q| q.query_id.as_str()).collect();
    let seen: BTreeSet<&str> = split.seen.iter().map(String::as_str).collect();
    let unseen: BTreeSet<&str> = split.unseen.iter().map(String::as_str).collect();
    if !seen.is_disjoint(&unseen) {
        return fail("seen and unseen queries overlap".into());
    }
    if seen.union(&unseen).copied().collect::<BTreeSet<_>>() != query_ids {
        return fail("seen and unseen queries do not cover the query set".into());
    }
    for q in &data.queries {
        if q.is_multi() || q.attribute_count() < 2 {
            return fail(format!("query {} is not a single-object compound", q.query_id));
        }
        let rebuilt = Query::new(vocab, q.parts.clone(), Some(q.query_id.clone()))?;
        if rebuilt.tokens != q.tokens {
            return fail(format!("query {} has inconsistent tokens", q.query_id));
        }
        build_pool(q, &data.test_scenes, PoolMode::Or)?;
        if unseen.contains(q.query_id.as_str()) {
            if let Some(s) = data.train_scenes.iter().find(|s| q.is_true_of(s)) {
                return fail(format!("unseen query {} is realized by train scene {}", q.query_id, s.scene_id));
            }
        }
    }
    let mut quad_ids = BTreeSet::new();
    for q in data.train_quads.iter().chain(&data.val_quads).chain(&data.test_quads) {
        validate_quadruplet(vocab, q)?;
        if !quad_ids.insert(q.quad_id.as_str()) {
            return fail(format!("quadruplet {} is listed twice", q.quad_id));
        }
    }
    Ok(ValidationSummary {
        train_scenes: data.train_scenes.len(),
        test_scenes: data.test_scenes.len(),
        queries: data.queries.len(),
        seen: seen.len(),
        unseen: unseen.len(),
        quadruplets: quad_ids.len(),
    })
}
