use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bindlab_tensor::{Graph, Tensor};

use super::*;
use crate::backbone::{BackboneConfig, SyntheticBackbone};
use crate::benchgen::{gen_multi_obj_quadruplets, gen_single_obj_dataset, QuadrupletSpec, SingleObjSpec, Span};
use crate::fusion::{init_model, FusionConfig, Variant};
use crate::scene::Scene;
use crate::vocab::Vocabulary;

fn toy_data() -> TrainingData {
    let vocab = Vocabulary::default();
    let single = gen_single_obj_dataset(
        &vocab,
        &SingleObjSpec {
            n_scenes: 12,
            attrs_per_object: Span::new(2, 3),
            objects_per_scene: Span::new(1, 3),
            grid: 2,
            id_prefix: "s".into(),
        },
        1,
    )
    .unwrap();
    let quads = gen_multi_obj_quadruplets(
        &vocab,
        &QuadrupletSpec {
            n: 6,
            grid: 2,
            attrs_per_object: 2,
            extra_objects: Span::new(0, 1),
            id_prefix: "m".into(),
        },
        2,
    )
    .unwrap();
    TrainingData::build(&vocab, &single.scenes, &quads).unwrap()
}

fn backbone() -> SyntheticBackbone {
    let cfg = BackboneConfig {
        d_model: 8,
        grid: 2,
        ..BackboneConfig::default()
    };
    SyntheticBackbone::new(cfg, Vocabulary::default()).unwrap()
}

fn scores(g: &mut Graph, rows: usize, cols: usize, values: Vec<f64>) -> bindlab_tensor::Var {
    g.constant(Tensor::from_vec(vec![rows, cols], values).unwrap())
}

#[test]
fn label_matrix_follows_the_truth_predicate() {
    let data = toy_data();
    let scenes: Vec<&Scene> = data.scenes.iter().collect();
    let queries: Vec<_> = data.queries.iter().collect();
    let m = label_matrix(&scenes, &queries);
    assert_eq!((m.rows, m.cols), (scenes.len(), queries.len()));
    for (i, s) in scenes.iter().enumerate() {
        for (j, q) in queries.iter().enumerate() {
            // independent check: some part-assignment to distinct placements
            let ok = match q.parts.as_slice() {
                [p] => s.placements.iter().any(|x| x.carries(&p.object, &p.attributes)),
                [a, b] => s.placements.iter().enumerate().any(|(u, x)| {
                    x.carries(&a.object, &a.attributes)
                        && s.placements.iter().enumerate().any(|(v, y)| u != v && y.carries(&b.object, &b.attributes))
                }),
                _ => unreachable!(),
            };
            assert_eq!(m.get(i, j), ok, "{} / {}", s.scene_id, q.query_id);
        }
    }
    for it in data.single.iter().chain(&data.multi) {
        assert!(m.get(it.scene, it.query));
    }
}

#[test]
fn label_matrix_small_examples() {
    let id = LabelMatrix::identity(3);
    assert_eq!(id.as_f64(), [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let m = LabelMatrix::from_fn(2, 3, |i, j| j == 2 * i);
    assert!(m.get(0, 0) && m.get(1, 2) && !m.get(1, 0));
    assert!(!m.col_has_positive(1));
    assert!(m.row_has_positive(1));
}

#[test]
fn bce_at_zero_scores_is_ln2() {
    let mut g = Graph::new();
    let s = scores(&mut g, 2, 3, vec![0.0; 6]);
    let l = sigmoid_bce_loss(&mut g, s, &LabelMatrix::from_fn(2, 3, |i, j| i == j), 10.0).unwrap();
    assert!((g.scalar(l).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn bce_saturates_without_overflow() {
    let mut g = Graph::new();
    let s = scores(&mut g, 2, 2, vec![100.0, -100.0, -100.0, 100.0]);
    let l = sigmoid_bce_loss(&mut g, s, &LabelMatrix::identity(2), 10.0).unwrap();
    assert!(g.scalar(l).unwrap() < 1e-300);
    let mut g = Graph::new();
    let s = scores(&mut g, 1, 1, vec![-100.0]);
    let l = sigmoid_bce_loss(&mut g, s, &LabelMatrix::identity(1), 10.0).unwrap();
    assert!((g.scalar(l).unwrap() - 1000.0).abs() < 1e-9);
}

#[test]
fn bce_matches_elementwise_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let (r, c) = (rng.random_range(1..5), rng.random_range(1..5));
        let v: Vec<f64> = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels = LabelMatrix::from_fn(r, c, |i, j| (i * 7 + j * 3) % 4 == 0);
        let scale = rng.random_range(0.5..12.0);
        let want = v
            .iter()
            .zip(labels.as_f64())
            .map(|(x, y)| {
                let p = 1.0 / (1.0 + (-scale * x).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / (r * c) as f64;
        let mut g = Graph::new();
        let s = scores(&mut g, r, c, v);
        let l = sigmoid_bce_loss(&mut g, s, &labels, scale).unwrap();
        assert!((g.scalar(l).unwrap() - want).abs() < 1e-12);
    }
}

#[test]
fn nce_of_uniform_scores_is_ln_n() {
    for n in 1..6 {
        let mut g = Graph::new();
        let s = scores(&mut g, n, n, vec![0.3; n * n]);
        let l = nce_loss(&mut g, s, &LabelMatrix::identity(n), 10.0).unwrap();
        assert!((g.scalar(l).unwrap() - (n as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn nce_vanishes_for_a_dominant_diagonal() {
    let mut g = Graph::new();
    let s = scores(&mut g, 3, 3, (0..9).map(|k| if k % 4 == 0 { 1.0 } else { -1.0 }).collect());
    let l = nce_loss(&mut g, s, &LabelMatrix::identity(3), 100.0).unwrap();
    assert!(g.scalar(l).unwrap() < 1e-80);
}

#[test]
fn nce_matches_softmax_formula_with_several_positives() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let n = rng.random_range(2..5);
        let v: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels = LabelMatrix::from_fn(n, n, |i, j| i == j || (i + 1) % n == j && i % 2 == 0);
        let scale = 5.0;
        let z = |i: usize, j: usize| scale * v[i * n + j];
        let side = |row: bool| -> f64 {
            (0..n)
                .map(|a| {
                    let at = |b: usize| if row { (a, b) } else { (b, a) };
                    let all: f64 = (0..n).map(|b| { let (i, j) = at(b); z(i, j).exp() }).sum();
                    let pos: f64 = (0..n)
                        .filter(|&b| { let (i, j) = at(b); labels.get(i, j) })
                        .map(|b| { let (i, j) = at(b); z(i, j).exp() })
                        .sum();
                    -(pos / all).ln()
                })
                .sum::<f64>()
                / n as f64
        };
        let want = 0.5 * (side(true) + side(false));
        let mut g = Graph::new();
        let s = scores(&mut g, n, n, v.clone());
        let l = nce_loss(&mut g, s, &labels, scale).unwrap();
        assert!((g.scalar(l).unwrap() - want).abs() < 1e-12);
    }
}

#[test]
fn nce_needs_a_positive_in_every_row_and_column() {
    let mut g = Graph::new();
    let s = scores(&mut g, 2, 2, vec![0.0; 4]);
    assert!(nce_loss(&mut g, s, &LabelMatrix::from_fn(2, 2, |i, _| i == 0), 1.0).is_err());
    assert!(nce_loss(&mut g, s, &LabelMatrix::from_fn(2, 2, |_, j| j == 0), 1.0).is_err());
    assert!(nce_loss(&mut g, s, &LabelMatrix::identity(3), 1.0).is_err());
}

#[test]
fn hard_negative_batches_hold_whole_quadruplets() {
    let data = toy_data();
    let strategy = BatchStrategy {
        mode: BatchMode::HardNeg,
        batch_size: 6,
        hard_ratio: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..50 {
        let b = sample_batch(&strategy, &data, &mut rng).unwrap();
        assert_eq!(b.items.len(), 6);
        for pair in b.items.chunks(2) {
            assert!(data.quads.iter().any(|q| q[..] == *pair));
        }
        assert!(b.origins.iter().all(|o| *o == Origin::Quad));
    }
}

#[test]
fn batch_sizes_are_validated() {
    let data = toy_data();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for mode in [BatchMode::HardNeg, BatchMode::Combined] {
        let odd = BatchStrategy { mode, batch_size: 3, hard_ratio: 0.5 };
        assert!(sample_batch(&odd, &data, &mut rng).is_err());
    }
    let zero = BatchStrategy { mode: BatchMode::SingleObj, batch_size: 0, hard_ratio: 0.0 };
    assert!(sample_batch(&zero, &data, &mut rng).is_err());
    let no_quads = TrainingData { quads: vec![], multi: vec![], ..toy_data() };
    let hard = BatchStrategy { mode: BatchMode::HardNeg, batch_size: 2, hard_ratio: 0.0 };
    assert!(sample_batch(&hard, &no_quads, &mut rng).is_err());
}

#[test]
fn combined_without_hard_ratio_never_draws_quadruplets() {
    let data = toy_data();
    let strategy = BatchStrategy {
        mode: BatchMode::Combined,
        batch_size: 8,
        hard_ratio: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let b = sample_batch(&strategy, &data, &mut rng).unwrap();
        assert!(b.origins.iter().all(|o| *o != Origin::Quad));
    }
}

#[test]
fn combined_mix_matches_hard_ratio() {
    let data = toy_data();
    for ratio in [0.25, 0.5, 0.8] {
        let strategy = BatchStrategy {
            mode: BatchMode::Combined,
            batch_size: 2,
            hard_ratio: ratio,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let trials = 10_000;
        let hits = (0..trials)
            .filter(|_| sample_batch(&strategy, &data, &mut rng).unwrap().origins[0] == Origin::Quad)
            .count();
        let frac = hits as f64 / trials as f64;
        assert!((frac - ratio).abs() < 0.02, "{ratio}: {frac}");
    }
}

#[test]
fn prepared_batches_dedupe_and_label() {
    let data = toy_data();
    let bb = backbone();
    let enc = EncodedData::new(&bb, &data).unwrap();
    let q = data.quads[0];
    let sampled = SampledBatch {
        items: vec![q[0], q[1], q[0]],
        origins: vec![Origin::Quad; 3],
    };
    let p = prepare_batch(&sampled, &data, &enc);
    assert_eq!((p.images.len(), p.queries.len()), (2, 2));
    // the distractor never satisfies the caption, nor the image the swap
    assert_eq!(p.labels.as_f64(), [1.0, 0.0, 0.0, 1.0]);
}

fn tiny_config(epochs: usize, steps: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        steps_per_epoch: steps,
        ..TrainConfig::default()
    }
}

fn model(variant: Variant) -> FusionModel {
    let cfg = FusionConfig {
        d_model: 8,
        encoder_layers: 1,
        heads: 2,
        ..FusionConfig::for_variant(variant)
    };
    init_model(cfg, &backbone()).unwrap()
}

#[test]
fn zero_steps_leave_parameters_untouched() {
    let data = toy_data();
    let enc = EncodedData::new(&backbone(), &data).unwrap();
    let mut m = model(Variant::MmAdapter);
    let before = m.clone();
    let h = train(&mut m, &tiny_config(2, 0), &data, &enc, None).unwrap();
    assert_eq!(m, before);
    assert_eq!(h.losses(), [None, None]);
}

#[test]
fn training_is_deterministic_per_seed() {
    let data = toy_data();
    let enc = EncodedData::new(&backbone(), &data).unwrap();
    let run = |seed| {
        let mut m = model(Variant::FtLate);
        let cfg = TrainConfig { seed, ..tiny_config(2, 5) };
        let h = train(&mut m, &cfg, &data, &enc, None).unwrap();
        (m, h.losses())
    };
    let (a, la) = run(3);
    let (b, lb) = run(3);
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert_ne!(run(4).1, la);
}

#[test]
fn adapter_loss_goes_down() {
    let data = toy_data();
    let enc = EncodedData::new(&backbone(), &data).unwrap();
    let mut m = model(Variant::MmAdapter);
    let mut calls = Vec::new();
    let mut validator = |_: &FusionModel, epoch: usize| {
        calls.push(epoch);
        Ok(BTreeMap::from([("k".to_string(), epoch as f64)]))
    };
    let h = train(&mut m, &tiny_config(10, 20), &data, &enc, Some(&mut validator)).unwrap();
    assert_eq!(calls, (1..=10).collect::<Vec<_>>());
    let losses: Vec<f64> = h.losses().into_iter().map(Option::unwrap).collect();
    assert!(losses[9] < losses[0], "{losses:?}");
    assert_eq!(h.epochs[4].val_metrics["k"], 5.0);
}

#[test]
fn non_finite_loss_aborts_training() {
    let data = toy_data();
    let enc = EncodedData::new(&backbone(), &data).unwrap();
    let mut m = model(Variant::MmPred);
    m.params_mut().get_mut("head.b").unwrap().values_mut()[0] = f64::NAN;
    let err = train(&mut m, &tiny_config(1, 3), &data, &enc, None).unwrap_err();
    assert!(matches!(err, CoreError::NonFiniteLoss { epoch: 1, batch: 1 }), "{err}");
}

#[test]
fn losses_parse_by_name() {
    assert_eq!("BCE".parse::<LossKind>().unwrap(), LossKind::SigmoidBce);
    assert_eq!("nce".parse::<LossKind>().unwrap(), LossKind::Nce);
    assert!("hinge".parse::<LossKind>().is_err());
    assert_eq!("hard-neg".parse::<BatchMode>().unwrap(), BatchMode::HardNeg);
}
