use std::fs;

use super::*;
use crate::backbone::BackboneConfig;
use crate::benchgen::Span;
use crate::fusion::{load_checkpoint, Variant};
use crate::training::{BatchMode, BatchStrategy, TrainConfig};

/// Small enough that a full train-and-evaluate takes well under a second.
fn tiny(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        backbone: BackboneConfig {
            d_model: 8,
            grid: 2,
            ..BackboneConfig::default()
        },
        generation: GenConfig {
            grid: 2,
            train_scenes: 30,
            test_scenes: 12,
            objects_per_scene: Span::new(1, 3),
            train_quadruplets: 12,
            val_quadruplets: 4,
            test_quadruplets: 10,
            extra_objects: Span::new(0, 1),
            k_unseen: 3,
            ..GenConfig::default()
        },
        fusion: FusionDefaults {
            encoder_layers: 1,
            heads: 2,
            ..FusionDefaults::default()
        },
        training: TrainConfig {
            epochs: 2,
            steps_per_epoch: 3,
            batch: BatchStrategy {
                mode: BatchMode::Combined,
                batch_size: 4,
                hard_ratio: 0.5,
            },
            ..TrainConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

fn gen_into(cfg: &ExperimentConfig) -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    cmd_gen(cfg, dir.path()).unwrap();
    let data = load_dataset(dir.path()).unwrap();
    (dir, data)
}

#[test]
fn generation_is_a_pure_function_of_the_config() {
    let a = generate(&tiny(1)).unwrap();
    let b = generate(&tiny(1)).unwrap();
    assert_eq!(a.files, b.files);
    assert_eq!(a.manifest, b.manifest);
    assert_ne!(generate(&tiny(2)).unwrap().manifest.data_hash, a.manifest.data_hash);
}

#[test]
fn manifest_lists_every_file_with_counts() {
    let cfg = tiny(0);
    let (dir, data) = gen_into(&cfg);
    let m = &data.manifest;
    assert_eq!(m.files.iter().map(|f| f.name.as_str()).collect::<Vec<_>>(), DATA_FILES);
    let count = |name: &str| m.files.iter().find(|f| f.name == name).unwrap().records;
    assert_eq!(count(QUERIES_FILE), data.queries.len());
    assert_eq!(count(SCENES_FILE), data.train_scenes.len() + data.test_scenes.len());
    assert_eq!(count(QUADRUPLETS_FILE), 12 + 4 + 10);
    assert_eq!(data.test_scenes.len(), 12);
    assert_eq!((data.val_quads.len(), data.test_quads.len()), (4, 10));
    for f in &m.files {
        assert_eq!(fs::metadata(dir.path().join(&f.name)).unwrap().len(), f.bytes);
    }
    assert_eq!(m.provenance, cfg.provenance());
}

#[test]
fn generated_data_validates_and_tampering_is_caught() {
    let cfg = tiny(0);
    let (dir, data) = gen_into(&cfg);
    let s = validate_data(dir.path(), &cfg.vocabulary).unwrap();
    assert_eq!(s.queries, data.queries.len());
    assert_eq!(s.seen + s.unseen, s.queries);
    assert_eq!(s.unseen, 3);
    let path = dir.path().join(SCENES_FILE);
    let mut text = fs::read_to_string(&path).unwrap();
    text.push('\n');
    fs::write(&path, text).unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(err.to_string().contains(SCENES_FILE), "{err}");
}

#[test]
fn config_hash_ignores_paths_but_not_settings() {
    let a = tiny(0);
    let moved = ExperimentConfig {
        data_dir: Some("/elsewhere".into()),
        out_dir: Some("/other".into()),
        ..a.clone()
    };
    assert_eq!(a.hash(), moved.hash());
    assert_ne!(a.hash(), tiny(1).hash());
    let json = serde_json::to_string(&a).unwrap();
    assert_eq!(serde_json::from_str::<ExperimentConfig>(&json).unwrap(), a);
    assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sed": 1}"#).is_err());
    let partial: ExperimentConfig = serde_json::from_str(r#"{"seed": 5}"#).unwrap();
    assert_eq!(partial.training, TrainConfig::default());
}

#[test]
fn config_seed_reaches_fusion_and_training() {
    let cfg = tiny(9);
    assert_eq!(cfg.fusion_for(Variant::MmAdapter).seed, 9);
    assert_eq!(cfg.fusion_for(Variant::MmAdapter).d_model, 8);
    assert_eq!(cfg.training_config().seed, 9);
    let bad = ExperimentConfig {
        backbone: BackboneConfig { grid: 3, ..cfg.backbone.clone() },
        ..cfg
    };
    assert!(bad.validate().is_err());
}

#[test]
fn train_run_writes_reloadable_artifacts() {
    let cfg = tiny(0);
    let (dir, _) = gen_into(&cfg);
    let run = tempfile::tempdir().unwrap();
    let out = cmd_train(&cfg, dir.path(), Variant::Linear, run.path()).unwrap();
    for f in [CHECKPOINT_FILE, TRAIN_LOG_FILE, RUN_FILE, TIMING_FILE] {
        assert!(run.path().join(f).is_file(), "{f}");
    }
    let log = fs::read_to_string(run.path().join(TRAIN_LOG_FILE)).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 1 + cfg.training.epochs);
    assert!(lines[0].contains(&out.summary.data_hash));
    let last: LogLine = serde_json::from_str(lines[2]).unwrap();
    assert_eq!(last.epoch, 2);
    assert!(!log.contains("seconds"));

    let model = load_checkpoint(&run.path().join(CHECKPOINT_FILE)).unwrap();
    // weights only; optimizer moments are not checkpointed
    for (name, t) in out.model.params().iter() {
        assert_eq!(model.params().get(name).unwrap().values(), t.values(), "{name}");
    }
    assert_eq!(model.config(), out.model.config());
    assert_eq!(model.metadata()[META_DATA_HASH], out.summary.data_hash);
    assert_eq!(model.metadata()[META_SEED], "0");
    let data = load_dataset(dir.path()).unwrap();
    let bb = model.rebuild_backbone().unwrap();
    let again = validation_metrics(&Scorer::Model(Box::new(model)), &bb, &data.val_quads).unwrap();
    let logged = &out.summary.final_val_metrics;
    assert_eq!(again.len(), logged.len());
    for (k, v) in logged {
        assert_eq!(v.to_bits(), again[k].to_bits(), "{k}");
    }
    assert_eq!(out.summary.steps, 6);
}

#[test]
fn frozen_scorer_cannot_bind_without_noise() {
    let mut cfg = tiny(0);
    cfg.backbone.noise_sigma = 0.0;
    let (_dir, data) = gen_into(&cfg);
    let bb = crate::backbone::SyntheticBackbone::new(cfg.backbone.clone(), cfg.vocabulary.clone()).unwrap();
    for q in quad_scores(&Scorer::Frozen, &bb, &data.test_quads).unwrap() {
        assert_eq!(q.image_caption.to_bits(), q.image_swapped.to_bits());
        assert_eq!(q.distractor_caption.to_bits(), q.distractor_swapped.to_bits());
    }
    assert_eq!(evaluate(&cfg, &data, &Scorer::Frozen).unwrap().multiobj_t2i, 0.0);
}

#[test]
fn oracle_scorer_is_perfect() {
    let cfg = tiny(0);
    let (_dir, data) = gen_into(&cfg);
    let r = evaluate(&cfg, &data, &Scorer::Oracle).unwrap();
    for maps in [&r.cola_map, &r.query_all_map, &r.overall_map] {
        assert_eq!((maps.all.map, maps.seen.map, maps.unseen.map), (1.0, 1.0, 1.0));
    }
    assert_eq!((r.multiobj_t2i, r.multiobj_i2t), (100.0, 100.0));
    assert_eq!(r.meta.model, ORACLE_NAME);
}

#[test]
fn eval_command_matches_the_api_and_guards_the_data() {
    let cfg = tiny(0);
    let (dir, data) = gen_into(&cfg);
    let run = tempfile::tempdir().unwrap();
    let out = cmd_train(&cfg, dir.path(), Variant::MmAdapter, run.path()).unwrap();
    let src = ScorerSource::parse(run.path().join(CHECKPOINT_FILE).to_str().unwrap());
    let via_cmd = cmd_eval(&cfg, dir.path(), &src, run.path()).unwrap();
    let via_api = evaluate(&cfg, &data, &Scorer::Model(Box::new(out.model))).unwrap();
    assert_eq!(via_cmd, via_api);
    assert_eq!(fs::read_to_string(run.path().join(REPORT_JSON)).unwrap(), via_api.to_json());
    assert_eq!(fs::read_to_string(run.path().join(REPORT_CSV)).unwrap(), via_api.to_csv());

    let other = tempfile::tempdir().unwrap();
    cmd_gen(&tiny(5), other.path()).unwrap();
    let err = cmd_eval(&cfg, other.path(), &src, other.path()).unwrap_err();
    assert!(err.to_string().contains("trained on data"), "{err}");
    assert_eq!(ScorerSource::parse("FROZEN"), ScorerSource::Frozen);
    assert_eq!(ScorerSource::parse("oracle"), ScorerSource::Oracle);
}

#[test]
fn comparison_joins_reports_and_refuses_mixed_data() {
    let cfg = tiny(0);
    let (_dir, data) = gen_into(&cfg);
    let frozen = evaluate(&cfg, &data, &Scorer::Frozen).unwrap();
    let oracle = evaluate(&cfg, &data, &Scorer::Oracle).unwrap();
    let one = compare_reports(&cfg.compare, &[("f".into(), frozen.clone())]).unwrap();
    assert_eq!(one.rows.len(), 1);
    let t = compare_reports(&cfg.compare, &[("f".into(), frozen.clone()), ("o".into(), oracle.clone())]).unwrap();
    assert_eq!(t.rows[0].model, ORACLE_NAME);
    for col in &t.columns {
        let (m, g) = parse_cell(col);
        assert_eq!(t.value(FROZEN_NAME, col), frozen.value(&m, &g), "{col}");
        assert_eq!(t.value(ORACLE_NAME, col), oracle.value(&m, &g), "{col}");
    }
    assert_eq!(t.to_csv().lines().count(), 3);
    assert!(t.to_markdown().contains(&data.manifest.data_hash));

    let (_d2, data2) = gen_into(&tiny(3));
    let foreign = evaluate(&tiny(3), &data2, &Scorer::Frozen).unwrap();
    let err = compare_reports(&cfg.compare, &[("a".into(), frozen), ("b".into(), foreign)]).unwrap_err();
    assert!(err.to_string().contains(&data2.manifest.data_hash), "{err}");
    assert!(compare_reports(&cfg.compare, &[]).is_err());
}

#[test]
fn compare_command_reads_directories_and_files() {
    let cfg = tiny(0);
    let (dir, _) = gen_into(&cfg);
    let out = tempfile::tempdir().unwrap();
    let f = out.path().join("f");
    cmd_eval(&cfg, dir.path(), &ScorerSource::Frozen, &f).unwrap();
    let o = out.path().join("o");
    cmd_eval(&cfg, dir.path(), &ScorerSource::Oracle, &o).unwrap();
    let t = cmd_compare(&cfg.compare, &[f.clone(), o.join(REPORT_JSON)], out.path()).unwrap();
    assert_eq!(t.rows.len(), 2);
    assert_eq!(fs::read_to_string(out.path().join(COMPARE_CSV)).unwrap(), t.to_csv());
    assert!(out.path().join(COMPARE_MD).is_file());
}

#[test]
fn corrupted_gradient_fails_only_that_variant() {
    let results = run_gradcheck(0, &[Variant::Linear, Variant::FtLate], Some(Variant::FtLate)).unwrap();
    assert_eq!(results.len(), 4);
    for r in results {
        assert_eq!(r.passed, r.variant == Variant::Linear, "{:?}", r);
    }
}

#[test]
fn repeated_runs_are_byte_identical() {
    let mut cfg = tiny(0);
    cfg.variants = vec![Variant::Linear, Variant::MmPred];
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    cmd_repro(&cfg, &a.path().join("data"), a.path(), |_| {}).unwrap();
    cmd_repro(&cfg, &b.path().join("data"), b.path(), |_| {}).unwrap();
    let mut files = Vec::new();
    for sub in ["data", "LINEAR", "MM_PRED", FROZEN_NAME, "."] {
        for e in fs::read_dir(a.path().join(sub)).unwrap() {
            let p = e.unwrap().path();
            if p.is_file() && p.file_name().unwrap() != TIMING_FILE {
                files.push(p.strip_prefix(a.path()).unwrap().to_path_buf());
            }
        }
    }
    assert!(files.len() >= 5 + 5 + 5 + 2 + 2);
    for f in files {
        assert_eq!(fs::read(a.path().join(&f)).unwrap(), fs::read(b.path().join(&f)).unwrap(), "{}", f.display());
    }
}
