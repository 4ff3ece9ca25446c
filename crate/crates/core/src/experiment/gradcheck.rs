//! Finite-difference check of every core variant under both losses.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use bindlab_tensor::{finite_difference_check_with, BoundParams, FdOptions, Graph, Stencil, Tensor};

use crate::backbone::{BackboneConfig, SyntheticBackbone};
use crate::benchgen::{gen_multi_obj_quadruplets, QuadrupletSpec, Span};
use crate::fusion::{init_model, FusionConfig, FusionModel, Variant};
use crate::training::{encode_queries, encode_scenes, label_matrix, LossKind};
use crate::util::mix_seed;
use crate::vocab::Vocabulary;
use crate::Result;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Five-point differences at this step keep both truncation and roundoff
/// well under the tolerance for losses of order one.
pub const GRADCHECK_STEP: f64 = 1e-3;
/// Gradients below this are indistinguishable from roundoff. NCE is
/// invariant to shifting all scores, so some coordinates have an exactly
/// zero gradient.
pub const GRADCHECK_FLOOR: f64 = 1e-6;
const GRADCHECK_D_MODEL: usize = 8;
/// Spread added to every parameter so zero-initialised heads do not hide
/// the gradients behind them.
const PERTURBATION_STD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckResult {
    pub variant: Variant,
    pub loss: LossKind,
    pub max_relative_error: f64,
    /// `parameter[index]` of the worst coordinate.
    pub worst: Option<String>,
    pub coordinates: usize,
    pub passed: bool,
}

fn perturbed(model: &mut FusionModel, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = model.params().names().map(str::to_string).collect();
    for name in names {
        let t = model.params_mut().get_mut(&name).expect("listed parameter");
        let noise = Tensor::randn(t.shape(), PERTURBATION_STD, &mut rng);
        for (v, n) in t.values_mut().iter_mut().zip(noise.values()) {
            *v += n;
        }
    }
    Ok(())
}

/// Checks `variants` × both losses on a one-quadruplet batch at width 8.
/// `corrupt` adds a bias to the first analytic gradient of that variant.
pub fn run_gradcheck_with(
    seed: u64,
    variants: &[Variant],
    corrupt: Option<Variant>,
    options: FdOptions,
) -> Result<Vec<GradcheckResult>> {
    let vocab = Vocabulary::default();
    let backbone = SyntheticBackbone::new(
        BackboneConfig {
            seed,
            d_model: GRADCHECK_D_MODEL,
            grid: 2,
            noise_sigma: 0.05,
            max_tokens: 16,
        },
        vocab.clone(),
    )?;
    let quads = gen_multi_obj_quadruplets(
        &vocab,
        &QuadrupletSpec {
            n: 1,
            grid: 2,
            attrs_per_object: 2,
            extra_objects: Span::new(0, 0),
            id_prefix: "gc".into(),
        },
        mix_seed(seed, 7),
    )?;
    let scenes: Vec<_> = quads.iter().flat_map(|q| [q.image.clone(), q.distractor.clone()]).collect();
    let queries: Vec<_> = quads.iter().flat_map(|q| [q.caption.clone(), q.swapped.clone()]).collect();
    let images = encode_scenes(&backbone, &scenes)?;
    let texts = encode_queries(&backbone, &queries)?;
    let labels = label_matrix(&scenes.iter().collect::<Vec<_>>(), &queries.iter().collect::<Vec<_>>());
    let image_refs: Vec<_> = images.iter().collect();
    let text_refs: Vec<_> = texts.iter().collect();

    let mut results = Vec::new();
    for &variant in variants {
        let config = FusionConfig {
            d_model: GRADCHECK_D_MODEL,
            encoder_layers: 1,
            heads: 2,
            seed,
            ..FusionConfig::for_variant(variant)
        };
        let mut model = init_model(config, &backbone)?;
        perturbed(&mut model, mix_seed(seed, variant as u64))?;
        for loss in LossKind::ALL {
            let forward = |g: &mut Graph, b: &BoundParams| -> Result<_> {
                let s = model.score_matrix_on(g, b, &image_refs, &text_refs)?;
                loss.record(g, s, &labels, model.config().logit_scale)
            };
            let report = finite_difference_check_with(model.params(), options, forward, |grads| {
                if corrupt == Some(variant) {
                    if let Some(v) = grads.values_mut().next().and_then(|g| g.first_mut()) {
                        *v += 0.05;
                    }
                }
            })?;
            results.push(GradcheckResult {
                variant,
                loss,
                max_relative_error: report.max_relative_error,
                worst: report.worst.map(|(n, k)| format!("{n}[{k}]")),
                coordinates: report.coordinates,
                passed: report.max_relative_error < GRADCHECK_TOLERANCE,
            });
        }
    }
    Ok(results)
}

pub fn run_gradcheck(seed: u64, variants: &[Variant], corrupt: Option<Variant>) -> Result<Vec<GradcheckResult>> {
    let options = FdOptions {
        step: GRADCHECK_STEP,
        stencil: Stencil::FivePoint,
        floor: GRADCHECK_FLOOR,
    };
    run_gradcheck_with(seed, variants, corrupt, options)
}
