//! Training, evaluation and the end-to-end run over a generated benchmark.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::data::{cmd_gen, load_dataset, Dataset};
use super::{cmd_compare, ComparisonTable, ExperimentConfig, Provenance};
use crate::backbone::{ImageFeatures, QueryFeatures, SyntheticBackbone};
use crate::benchgen::Quadruplet;
use crate::fusion::{init_model, load_checkpoint, save_checkpoint, FusionModel, Variant};
use crate::metrics::{
    map_by_attribute_count, map_over_pools, mean_ranks, multiobj_i2t_accuracy, multiobj_t2i_accuracy, MetricReport,
    QuadScores, ReportMeta, REPORT_SCHEMA_VERSION,
};
use crate::pools::{build_pools, PoolMode};
use crate::scene::{Query, Scene};
use crate::training::{encode_queries, encode_scenes, train, EncodedData, TrainHistory, TrainingData};
use crate::util::{to_json_line, write_file, write_json};
use crate::{CoreError, Result};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const RUN_FILE: &str = "run.json";
pub const TIMING_FILE: &str = "timing.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const FROZEN_NAME: &str = "FROZEN";
pub const ORACLE_NAME: &str = "ORACLE";

/// Checkpoint metadata keys.
pub const META_CONFIG_HASH: &str = "config_hash";
pub const META_DATA_HASH: &str = "data_hash";
pub const META_SEED: &str = "seed";
pub const META_TOOL_VERSION: &str = "tool_version";

/// Something that scores (scene, query) pairs.
pub enum Scorer {
    Model(Box<FusionModel>),
    /// Cosine of the pooled frozen embeddings, no training.
    Frozen,
    /// Ground-truth relevance as the score.
    Oracle,
}

impl Scorer {
    pub fn name(&self) -> String {
        match self {
            Scorer::Model(m) => m.variant().name().to_string(),
            Scorer::Frozen => FROZEN_NAME.to_string(),
            Scorer::Oracle => ORACLE_NAME.to_string(),
        }
    }
}

/// Scenes and queries with their frozen features, scored pair by pair.
struct Encoded<'a> {
    scenes: Vec<&'a Scene>,
    queries: Vec<&'a Query>,
    images: Vec<ImageFeatures>,
    texts: Vec<QueryFeatures>,
}

impl<'a> Encoded<'a> {
    fn new(backbone: &SyntheticBackbone, scenes: Vec<&'a Scene>, queries: Vec<&'a Query>) -> Result<Self> {
        let owned_s: Vec<Scene> = scenes.iter().map(|s| (*s).clone()).collect();
        let owned_q: Vec<Query> = queries.iter().map(|q| (*q).clone()).collect();
        Ok(Encoded {
            images: encode_scenes(backbone, &owned_s)?,
            texts: encode_queries(backbone, &owned_q)?,
            scenes,
            queries,
        })
    }

    fn score(&self, scorer: &Scorer, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
        match scorer {
            Scorer::Model(m) => {
                let images: Vec<&ImageFeatures> = self.images.iter().collect();
                let texts: Vec<&QueryFeatures> = self.texts.iter().collect();
                m.score_pairs(&images, &texts, pairs)
            }
            Scorer::Frozen => Ok(pairs
                .iter()
                .map(|&(i, j)| cosine(&self.images[i].pooled, &self.texts[j].pooled))
                .collect()),
            Scorer::Oracle => Ok(pairs
                .iter()
                .map(|&(i, j)| f64::from(u8::from(self.queries[j].is_true_of(self.scenes[i]))))
                .collect()),
        }
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// The four cross scores of every quadruplet.
pub fn quad_scores(scorer: &Scorer, backbone: &SyntheticBackbone, quads: &[Quadruplet]) -> Result<Vec<QuadScores>> {
    let scenes = quads.iter().flat_map(|q| [&q.image, &q.distractor]).collect();
    let queries = quads.iter().flat_map(|q| [&q.caption, &q.swapped]).collect();
    let enc = Encoded::new(backbone, scenes, queries)?;
    let pairs: Vec<(usize, usize)> = (0..quads.len())
        .flat_map(|k| {
            let (i, ip, m, mp) = (2 * k, 2 * k + 1, 2 * k, 2 * k + 1);
            [(i, m), (ip, m), (ip, mp), (i, mp)]
        })
        .collect();
    let s = enc.score(scorer, &pairs)?;
    Ok(s.chunks(4)
        .map(|c| QuadScores {
            image_caption: c[0],
            distractor_caption: c[1],
            distractor_swapped: c[2],
            image_swapped: c[3],
        })
        .collect())
}

/// Validation-quadruplet metrics recorded after each epoch.
pub fn validation_metrics(
    scorer: &Scorer,
    backbone: &SyntheticBackbone,
    quads: &[Quadruplet],
) -> Result<BTreeMap<String, f64>> {
    let qs = quad_scores(scorer, backbone, quads)?;
    let mean = qs
        .iter()
        .map(|q| q.image_caption + q.distractor_caption + q.distractor_swapped + q.image_swapped)
        .sum::<f64>()
        / (4 * qs.len()) as f64;
    Ok(BTreeMap::from([
        ("val_multiobj_t2i".to_string(), multiobj_t2i_accuracy(&qs)?),
        ("val_multiobj_i2t".to_string(), multiobj_i2t_accuracy(&qs)?),
        ("val_mean_score".to_string(), mean),
    ]))
}

/// Deterministic part of an epoch record; wall time goes to a separate file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub epoch: usize,
    pub loss: Option<f64>,
    pub val_metrics: BTreeMap<String, f64>,
}

/// Summary written next to a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub provenance: Provenance,
    pub data_hash: String,
    pub variant: Variant,
    pub parameters: usize,
    pub epochs: usize,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub final_val_metrics: BTreeMap<String, f64>,
}

pub struct TrainOutcome {
    pub model: FusionModel,
    pub history: TrainHistory,
    pub summary: RunSummary,
}

fn stamp(model: &mut FusionModel, provenance: &Provenance, data_hash: &str) {
    model.set_metadata(META_TOOL_VERSION, provenance.tool_version.clone());
    model.set_metadata(META_CONFIG_HASH, provenance.config_hash.clone());
    model.set_metadata(META_SEED, provenance.seed.to_string());
    model.set_metadata(META_DATA_HASH, data_hash);
}

/// Trains one variant in memory.
pub fn train_variant(cfg: &ExperimentConfig, data: &Dataset, variant: Variant) -> Result<TrainOutcome> {
    cfg.validate()?;
    let backbone = SyntheticBackbone::new(cfg.backbone.clone(), cfg.vocabulary.clone())?;
    let train_data = TrainingData::build(&cfg.vocabulary, &data.train_scenes, &data.train_quads)?;
    let encoded = EncodedData::new(&backbone, &train_data)?;
    let mut model = init_model(cfg.fusion_for(variant), &backbone)?;
    let tc = cfg.training_config();
    let mut validator = |m: &FusionModel, _epoch: usize| {
        // The scorer only borrows for the call; cloning keeps `Scorer` owning.
        validation_metrics(&Scorer::Model(Box::new(m.clone())), &backbone, &data.val_quads)
    };
    let history = train(&mut model, &tc, &train_data, &encoded, Some(&mut validator))?;
    let provenance = cfg.provenance();
    stamp(&mut model, &provenance, &data.manifest.data_hash);
    let last = history.epochs.last();
    let summary = RunSummary {
        provenance,
        data_hash: data.manifest.data_hash.clone(),
        variant,
        parameters: model.parameter_count(),
        epochs: tc.epochs,
        steps: tc.epochs * tc.steps_per_epoch,
        final_loss: last.and_then(|e| e.loss),
        final_val_metrics: last.map(|e| e.val_metrics.clone()).unwrap_or_default(),
    };
    Ok(TrainOutcome {
        model,
        history,
        summary,
    })
}

/// Log lines of a history: a provenance header, then one line per epoch.
pub fn train_log(provenance: &Provenance, data_hash: &str, history: &TrainHistory) -> Result<String> {
    #[derive(Serialize)]
    struct Header<'a> {
        provenance: &'a Provenance,
        data_hash: &'a str,
    }
    let mut out = to_json_line(&Header { provenance, data_hash })?;
    out.push('\n');
    for e in &history.epochs {
        out.push_str(&to_json_line(&LogLine {
            epoch: e.epoch,
            loss: e.loss,
            val_metrics: e.val_metrics.clone(),
        })?);
        out.push('\n');
    }
    Ok(out)
}

/// Trains `variant` on the data in `data_dir` and writes its run directory.
pub fn cmd_train(cfg: &ExperimentConfig, data_dir: &Path, variant: Variant, run_dir: &Path) -> Result<TrainOutcome> {
    let data = load_dataset(data_dir)?;
    let outcome = train_variant(cfg, &data, variant)?;
    save_checkpoint(&run_dir.join(CHECKPOINT_FILE), &outcome.model)?;
    let log = train_log(&outcome.summary.provenance, &outcome.summary.data_hash, &outcome.history)?;
    write_file(&run_dir.join(TRAIN_LOG_FILE), log.as_bytes())?;
    write_json(&run_dir.join(RUN_FILE), &outcome.summary)?;
    let seconds: Vec<f64> = outcome.history.epochs.iter().map(|e| e.seconds).collect();
    write_json(&run_dir.join(TIMING_FILE), &seconds)?;
    Ok(outcome)
}

/// Full metric report of `scorer` on the test split.
pub fn evaluate(cfg: &ExperimentConfig, data: &Dataset, scorer: &Scorer) -> Result<MetricReport> {
    let backbone = match scorer {
        Scorer::Model(m) => m.rebuild_backbone()?,
        _ => SyntheticBackbone::new(cfg.backbone.clone(), cfg.vocabulary.clone())?,
    };
    let enc = Encoded::new(&backbone, data.test_scenes.iter().collect(), data.queries.iter().collect())?;
    let n_q = data.queries.len();
    let pairs: Vec<(usize, usize)> = (0..data.test_scenes.len())
        .flat_map(|i| (0..n_q).map(move |j| (i, j)))
        .collect();
    let flat = enc.score(scorer, &pairs)?;
    let scene_index: BTreeMap<&str, usize> = data
        .test_scenes
        .iter()
        .enumerate()
        .map(|(i, s)| (s.scene_id.as_str(), i))
        .collect();

    let mut maps = Vec::new();
    let mut and_ranks = (0.0, 0.0);
    let mut curve = BTreeMap::new();
    for mode in PoolMode::ALL_MODES {
        let pools = build_pools(&data.queries, &data.test_scenes, mode)?;
        let scores: Vec<Vec<f64>> = pools
            .iter()
            .enumerate()
            .map(|(j, p)| p.candidates.iter().map(|c| flat[scene_index[c.as_str()] * n_q + j]).collect())
            .collect();
        maps.push(map_over_pools(&pools, &scores, &data.splits.queries)?);
        match mode {
            PoolMode::And => and_ranks = mean_ranks(&pools, &scores)?,
            PoolMode::Or => {
                let counts: Vec<usize> = data.queries.iter().map(Query::attribute_count).collect();
                curve = map_by_attribute_count(&pools, &scores, &counts)?;
            }
            PoolMode::All => {}
        }
    }
    let quads = quad_scores(scorer, &backbone, &data.test_quads)?;
    let provenance = cfg.provenance();
    let mut maps = maps.into_iter();
    let cola = maps.next().expect("three modes");
    let report = MetricReport {
        schema_version: REPORT_SCHEMA_VERSION,
        meta: ReportMeta {
            tool_version: provenance.tool_version,
            config_hash: provenance.config_hash,
            seed: provenance.seed,
            data_hash: data.manifest.data_hash.clone(),
            model: scorer.name(),
        },
        per_query_ap: cola.per_query.clone(),
        cola_map: cola,
        query_all_map: maps.next().expect("three modes"),
        overall_map: maps.next().expect("three modes"),
        mean_rank_relevant: and_ranks.0,
        mean_rank_irrelevant: and_ranks.1,
        multiobj_t2i: multiobj_t2i_accuracy(&quads)?,
        multiobj_i2t: multiobj_i2t_accuracy(&quads)?,
        map_by_attribute_count: curve,
    };
    report.validate()?;
    Ok(report)
}

/// Where a model to evaluate comes from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ScorerSource {
    Checkpoint(PathBuf),
    Frozen,
    Oracle,
}

impl ScorerSource {
    /// `frozen`, `oracle`, or a checkpoint path.
    pub fn parse(text: &str) -> Self {
        match text.to_ascii_lowercase().as_str() {
            "frozen" => ScorerSource::Frozen,
            "oracle" => ScorerSource::Oracle,
            _ => ScorerSource::Checkpoint(PathBuf::from(text)),
        }
    }

    pub fn load(&self) -> Result<Scorer> {
        Ok(match self {
            ScorerSource::Checkpoint(p) => Scorer::Model(Box::new(load_checkpoint(p)?)),
            ScorerSource::Frozen => Scorer::Frozen,
            ScorerSource::Oracle => Scorer::Oracle,
        })
    }
}

/// Evaluates and writes `report.json` and `report.csv` into `out_dir`.
pub fn cmd_eval(cfg: &ExperimentConfig, data_dir: &Path, source: &ScorerSource, out_dir: &Path) -> Result<MetricReport> {
    let data = load_dataset(data_dir)?;
    let scorer = source.load()?;
    if let Scorer::Model(m) = &scorer {
        if let Some(h) = m.metadata().get(META_DATA_HASH) {
            if *h != data.manifest.data_hash {
                return Err(CoreError::Validation(format!(
                    "the checkpoint was trained on data {h}, the data directory holds {}",
                    data.manifest.data_hash
                )));
            }
        }
    }
    let report = evaluate(cfg, &data, &scorer)?;
    write_file(&out_dir.join(REPORT_JSON), report.to_json().as_bytes())?;
    write_file(&out_dir.join(REPORT_CSV), report.to_csv().as_bytes())?;
    Ok(report)
}

/// Result of the end-to-end run.
pub struct ReproOutcome {
    pub table: ComparisonTable,
    pub reports: Vec<MetricReport>,
    pub seconds: f64,
}

/// Generates data, trains every configured variant, evaluates each plus the
/// frozen scorer, and writes the comparison into `out_dir`.
pub fn cmd_repro(
    cfg: &ExperimentConfig,
    data_dir: &Path,
    out_dir: &Path,
    mut progress: impl FnMut(&str),
) -> Result<ReproOutcome> {
    let started = Instant::now();
    cfg.validate()?;
    cmd_gen(cfg, data_dir)?;
    progress(&format!("generated data in {}", data_dir.display()));
    let data = load_dataset(data_dir)?;
    let mut report_paths = Vec::new();
    let mut reports = Vec::new();
    for &variant in &cfg.variants {
        let run_dir = out_dir.join(variant.name());
        let t = Instant::now();
        let outcome = train_variant(cfg, &data, variant)?;
        save_checkpoint(&run_dir.join(CHECKPOINT_FILE), &outcome.model)?;
        let log = train_log(&outcome.summary.provenance, &outcome.summary.data_hash, &outcome.history)?;
        write_file(&run_dir.join(TRAIN_LOG_FILE), log.as_bytes())?;
        write_json(&run_dir.join(RUN_FILE), &outcome.summary)?;
        let seconds: Vec<f64> = outcome.history.epochs.iter().map(|e| e.seconds).collect();
        write_json(&run_dir.join(TIMING_FILE), &seconds)?;
        let report = evaluate(cfg, &data, &Scorer::Model(Box::new(outcome.model)))?;
        write_file(&run_dir.join(REPORT_JSON), report.to_json().as_bytes())?;
        write_file(&run_dir.join(REPORT_CSV), report.to_csv().as_bytes())?;
        progress(&format!(
            "{variant}: t2i {:.2}%, cola map {:.4} ({:.1}s)",
            report.multiobj_t2i,
            report.cola_map.all.map,
            t.elapsed().as_secs_f64()
        ));
        report_paths.push(run_dir.join(REPORT_JSON));
        reports.push(report);
    }
    let frozen_dir = out_dir.join(FROZEN_NAME);
    let report = evaluate(cfg, &data, &Scorer::Frozen)?;
    write_file(&frozen_dir.join(REPORT_JSON), report.to_json().as_bytes())?;
    write_file(&frozen_dir.join(REPORT_CSV), report.to_csv().as_bytes())?;
    report_paths.push(frozen_dir.join(REPORT_JSON));
    reports.push(report);
    let table = cmd_compare(&cfg.compare, &report_paths, out_dir)?;
    Ok(ReproOutcome {
        table,
        reports,
        seconds: started.elapsed().as_secs_f64(),
    })
}
