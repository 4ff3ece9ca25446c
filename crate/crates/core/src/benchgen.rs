//! Benchmark generation: single-object scenes with their compound queries,
//! and attribute-swapped quadruplets for multi-object binding.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scene::{Placement, Query, QueryPart, Scene};
use crate::util::mix_seed;
use crate::vocab::{Family, Vocabulary};
use crate::{CoreError, Result};

/// Inclusive integer range in configs and on the wire.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub min: usize,
    pub max: usize,
}

impl Span {
    pub const fn new(min: usize, max: usize) -> Self {
        Span { min, max }
    }

    fn sample(self, rng: &mut ChaCha8Rng) -> usize {
        rng.random_range(self.min..=self.max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SingleObjSpec {
    pub n_scenes: usize,
    pub attrs_per_object: Span,
    pub objects_per_scene: Span,
    pub grid: usize,
    pub id_prefix: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingleObjDataset {
    pub scenes: Vec<Scene>,
    pub queries: Vec<Query>,
}

fn families_present(vocab: &Vocabulary) -> Vec<(Family, Vec<String>)> {
    vocab.by_family().into_iter().filter(|(_, v)| !v.is_empty()).collect()
}

/// Attribute set with `k` distinct families, one uniform value each.
fn sample_attributes(
    families: &[(Family, Vec<String>)],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<String> {
    let mut chosen: Vec<&(Family, Vec<String>)> = families.choose_multiple(rng, k).collect();
    chosen.sort_by_key(|(f, _)| *f);
    chosen
        .into_iter()
        .map(|(_, values)| values.choose(rng).expect("non-empty family").clone())
        .collect()
}

/// All attribute subsets of size at least two, in canonical order.
fn compound_subsets(attrs: &[String]) -> Vec<Vec<String>> {
    let n = attrs.len();
    (0u32..(1 << n))
        .filter(|m| m.count_ones() >= 2)
        .map(|m| (0..n).filter(|i| m & (1 << i) != 0).map(|i| attrs[i].clone()).collect())
        .collect()
}

/// Every single-object compound with at least two attributes realized by
/// some instance of some scene, sorted by id.
pub fn compounds_in(vocab: &Vocabulary, scenes: &[Scene]) -> Result<Vec<Query>> {
    let mut seen: BTreeMap<String, Query> = BTreeMap::new();
    for scene in scenes {
        for p in &scene.placements {
            let attrs = vocab.canonical_attributes(&p.attributes)?;
            for subset in compound_subsets(&attrs) {
                let q = Query::single(vocab, &p.object, &subset)?;
                seen.entry(q.query_id.clone()).or_insert(q);
            }
        }
    }
    Ok(seen.into_values().collect())
}

pub fn gen_single_obj_dataset(vocab: &Vocabulary, spec: &SingleObjSpec, seed: u64) -> Result<SingleObjDataset> {
    vocab.validate()?;
    let families = families_present(vocab);
    let cells = spec.grid * spec.grid;
    let (a, o) = (spec.attrs_per_object, spec.objects_per_scene);
    if a.min > a.max || a.max > families.len() {
        return Err(CoreError::Generation(format!(
            "attrs_per_object {}..={} infeasible with {} attribute families",
            a.min,
            a.max,
            families.len()
        )));
    }
    if o.min == 0 || o.min > o.max || o.max > cells {
        return Err(CoreError::Generation(format!(
            "objects_per_scene {}..={} infeasible on a {}×{} grid",
            o.min, o.max, spec.grid, spec.grid
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5151));
    let cell_ids: Vec<usize> = (0..cells).collect();
    let width = digits(spec.n_scenes);
    let scenes: Vec<Scene> = (0..spec.n_scenes)
        .map(|i| {
            let count = o.sample(&mut rng);
            let mut chosen: Vec<usize> = cell_ids.choose_multiple(&mut rng, count).copied().collect();
            chosen.sort_unstable();
            let placements = chosen
                .into_iter()
                .map(|cell| {
                    let object = vocab.objects.choose(&mut rng).expect("validated").clone();
                    let k = a.sample(&mut rng);
                    Placement {
                        cell,
                        object,
                        attributes: sample_attributes(&families, k, &mut rng),
                    }
                })
                .collect();
            Scene {
                scene_id: format!("{}-{:0width$}", spec.id_prefix, i),
                grid: spec.grid,
                placements,
            }
        })
        .collect();
    let queries = compounds_in(vocab, &scenes)?;
    Ok(SingleObjDataset { scenes, queries })
}

fn digits(n: usize) -> usize {
    n.max(1).saturating_sub(1).to_string().len().max(5)
}

/// An image, its attribute-swapped distractor, and their two captions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quadruplet {
    pub quad_id: String,
    pub image: Scene,
    pub distractor: Scene,
    pub caption: Query,
    pub swapped: Query,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadrupletSpec {
    pub n: usize,
    pub grid: usize,
    pub attrs_per_object: usize,
    pub extra_objects: Span,
    pub id_prefix: String,
}

pub fn gen_multi_obj_quadruplets(vocab: &Vocabulary, spec: &QuadrupletSpec, seed: u64) -> Result<Vec<Quadruplet>> {
    vocab.validate()?;
    let swappable: Vec<(Family, Vec<String>)> =
        families_present(vocab).into_iter().filter(|(_, v)| v.len() >= 2).collect();
    let k = spec.attrs_per_object;
    if vocab.objects.len() < 2 {
        return Err(CoreError::Generation("need at least two distinct objects".into()));
    }
    if k == 0 || swappable.len() < k {
        return Err(CoreError::Generation(format!(
            "need {k} attribute families with two or more values, have {}",
            swappable.len()
        )));
    }
    let cells = spec.grid * spec.grid;
    if 2 + spec.extra_objects.max > cells || spec.extra_objects.min > spec.extra_objects.max {
        return Err(CoreError::Generation(format!(
            "{} extra objects do not fit a {}×{} grid",
            spec.extra_objects.max, spec.grid, spec.grid
        )));
    }
    if spec.extra_objects.max > 0 && vocab.objects.len() < 3 {
        return Err(CoreError::Generation("extra objects need a third object name".into()));
    }
    let all_families = families_present(vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x4a4a));
    let cell_ids: Vec<usize> = (0..cells).collect();
    let width = digits(spec.n);
    let mut out = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let pair: Vec<&String> = vocab.objects.choose_multiple(&mut rng, 2).collect();
        let (o1, o2) = (pair[0].clone(), pair[1].clone());
        let mut fams: Vec<&(Family, Vec<String>)> = swappable.choose_multiple(&mut rng, k).collect();
        fams.sort_by_key(|(f, _)| *f);
        let (mut a1, mut a2) = (Vec::new(), Vec::new());
        for (_, values) in fams {
            let two: Vec<&String> = values.choose_multiple(&mut rng, 2).collect();
            a1.push(two[0].clone());
            a2.push(two[1].clone());
        }
        let extras = spec.extra_objects.sample(&mut rng);
        let mut cells_used: Vec<usize> = cell_ids.choose_multiple(&mut rng, 2 + extras).copied().collect();
        let (c1, c2) = (cells_used[0], cells_used[1]);
        let others: Vec<&String> = vocab.objects.iter().filter(|o| **o != o1 && **o != o2).collect();
        let mut extra_placements = Vec::with_capacity(extras);
        for &cell in &cells_used[2..] {
            let n_attr = rng.random_range(0..=k.min(all_families.len()));
            extra_placements.push(Placement {
                cell,
                object: (*others.choose(&mut rng).expect("checked above")).clone(),
                attributes: sample_attributes(&all_families, n_attr, &mut rng),
            });
        }
        cells_used.truncate(2);
        let quad_id = format!("{}-{:0width$}", spec.id_prefix, i);
        let build = |id: String, first: &[String], second: &[String]| {
            let mut placements = vec![
                Placement {
                    cell: c1,
                    object: o1.clone(),
                    attributes: first.to_vec(),
                },
                Placement {
                    cell: c2,
                    object: o2.clone(),
                    attributes: second.to_vec(),
                },
            ];
            placements.extend(extra_placements.iter().cloned());
            placements.sort_by_key(|p| p.cell);
            Scene {
                scene_id: id,
                grid: spec.grid,
                placements,
            }
        };
        let image = build(format!("{quad_id}-a"), &a1, &a2);
        let distractor = build(format!("{quad_id}-b"), &a2, &a1);
        let caption = two_part_query(vocab, &o1, &a1, &o2, &a2)?;
        let swapped = two_part_query(vocab, &o1, &a2, &o2, &a1)?;
        let q = Quadruplet {
            quad_id,
            image,
            distractor,
            caption,
            swapped,
        };
        validate_quadruplet(vocab, &q)?;
        out.push(q);
    }
    Ok(out)
}

fn two_part_query(vocab: &Vocabulary, o1: &str, a1: &[String], o2: &str, a2: &[String]) -> Result<Query> {
    Query::new(
        vocab,
        vec![
            QueryPart {
                object: o1.to_string(),
                attributes: a1.to_vec(),
            },
            QueryPart {
                object: o2.to_string(),
                attributes: a2.to_vec(),
            },
        ],
        None,
    )
}

fn multiset(scene: &Scene) -> (BTreeMap<&str, usize>, BTreeMap<&str, usize>) {
    let mut objects = BTreeMap::new();
    let mut attributes = BTreeMap::new();
    for p in &scene.placements {
        *objects.entry(p.object.as_str()).or_insert(0) += 1;
        for a in &p.attributes {
            *attributes.entry(a.as_str()).or_insert(0) += 1;
        }
    }
    (objects, attributes)
}

/// Checks the swap relation between the two scenes and the truth of both
/// captions. Independent of how the quadruplet was generated.
pub fn validate_quadruplet(vocab: &Vocabulary, q: &Quadruplet) -> Result<()> {
    let fail = |m: String| Err(CoreError::Validation(format!("quadruplet {}: {m}", q.quad_id)));
    q.image.validate(vocab)?;
    q.distractor.validate(vocab)?;
    let [p1, p2] = q.caption.parts.as_slice() else {
        return fail("caption must have two parts".into());
    };
    let [s1, s2] = q.swapped.parts.as_slice() else {
        return fail("swapped caption must have two parts".into());
    };
    if p1.object == p2.object {
        return fail(format!("both targets are `{}`", p1.object));
    }
    if s1.object != p1.object || s2.object != p2.object {
        return fail("captions name different objects".into());
    }
    if s1.attributes != p2.attributes || s2.attributes != p1.attributes {
        return fail("swapped caption does not exchange the attribute sets".into());
    }
    let fam = |attrs: &[String]| -> Result<Vec<Family>> { attrs.iter().map(|a| vocab.family_of(a)).collect() };
    if fam(&p1.attributes)? != fam(&p2.attributes)? {
        return fail("swapped attributes are not family-aligned".into());
    }
    if p1.attributes.iter().zip(&p2.attributes).any(|(a, b)| a == b) {
        return fail("a swapped attribute is shared by both targets".into());
    }
    if q.image.grid != q.distractor.grid || q.image.placements.len() != q.distractor.placements.len() {
        return fail("scenes differ in layout".into());
    }
    let target = |p: &Placement| p.object == p1.object || p.object == p2.object;
    for (a, b) in q.image.placements.iter().zip(&q.distractor.placements) {
        if a.cell != b.cell || a.object != b.object {
            return fail(format!("cell {} differs in object", a.cell));
        }
        if !target(a) && a.attributes != b.attributes {
            return fail(format!("non-target cell {} changed", a.cell));
        }
        if target(a) {
            let mine = if a.object == p1.object { p1 } else { p2 };
            let theirs = if a.object == p1.object { p2 } else { p1 };
            let canon = vocab.canonical_attributes(&a.attributes)?;
            let canon_b = vocab.canonical_attributes(&b.attributes)?;
            if canon != mine.attributes || canon_b != theirs.attributes {
                return fail(format!("target on cell {} is not swapped", a.cell));
            }
        }
    }
    let count = |s: &Scene, o: &str| s.placements.iter().filter(|p| p.object == o).count();
    if count(&q.image, &p1.object) != 1 || count(&q.image, &p2.object) != 1 {
        return fail("each target object must appear exactly once".into());
    }
    if multiset(&q.image) != multiset(&q.distractor) {
        return fail("object or attribute multisets differ".into());
    }
    if !q.caption.is_true_of(&q.image) || !q.swapped.is_true_of(&q.distractor) {
        return fail("a caption does not describe its own scene".into());
    }
    if q.caption.is_true_of(&q.distractor) || q.swapped.is_true_of(&q.image) {
        return fail("a caption also describes the other scene".into());
    }
    Ok(())
}

/// Object and attribute names used anywhere in a set of scenes.
pub fn atoms(scenes: &[Scene]) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for s in scenes {
        for p in &s.placements {
            out.insert(p.object.clone());
            out.extend(p.attributes.iter().cloned());
        }
    }
    out
}

/// Randomly permutes a slice in place with a derived stream.
pub fn shuffle_with<T>(items: &mut [T], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    items.shuffle(&mut rng);
}
