use std::collections::BTreeMap;

use crate::{BoundParams, Graph, ParameterSet, TensorError, Var};
#[cfg(test)]
use crate::Result;

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Worst `|a − n| / max(|a|, |n|, floor)` over all checked coordinates.
    pub max_relative_error: f64,
    /// Parameter and flat index where the worst error occurred.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Difference formula for the numeric gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, truncation error O(h²).
    ThreePoint,
    /// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`, truncation error O(h⁴).
    FivePoint,
}

/// Step, stencil and denominator floor of a finite-difference check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdOptions {
    pub step: f64,
    pub stencil: Stencil,
    /// Lower bound on the relative-error denominator. Coordinates whose true
    /// gradient is zero (by an invariance of the loss) otherwise report pure
    /// roundoff as a large relative error.
    pub floor: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            step: 1e-5,
            stencil: Stencil::ThreePoint,
            floor: 1e-8,
        }
    }
}

/// Checks the gradient of a scalar-valued `forward` against central finite
/// differences with step `step`, over every coordinate of every parameter.
///
/// `forward` records the computation on the supplied graph using the bound
/// parameter handles and returns the scalar output.
pub fn finite_difference_check<F, E>(
    params: &ParameterSet,
    step: f64,
    forward: F,
) -> std::result::Result<GradCheckReport, E>
where
    F: Fn(&mut Graph, &BoundParams) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    finite_difference_check_with(params, FdOptions { step, ..FdOptions::default() }, forward, |_| {})
}

/// As [`finite_difference_check`], with a hook that may edit the analytic
/// gradients before comparison (fault injection in tests).
pub fn finite_difference_check_with<F, E, H>(
    params: &ParameterSet,
    options: FdOptions,
    forward: F,
    hook: H,
) -> std::result::Result<GradCheckReport, E>
where
    F: Fn(&mut Graph, &BoundParams) -> std::result::Result<Var, E>,
    E: From<TensorError>,
    H: FnOnce(&mut BTreeMap<String, Vec<f64>>),
{
    let FdOptions { step, stencil, floor } = options;
    if !(step > 0.0) {
        return Err(TensorError::Config(format!("finite-difference step must be positive, got {step}")).into());
    }
    if !(floor > 0.0) {
        return Err(TensorError::Config(format!("denominator floor must be positive, got {floor}")).into());
    }
    let mut analytic = analytic_grads(params, &forward)?;
    hook(&mut analytic);

    let base = evaluate(params, &forward)?;
    let again = evaluate(params, &forward)?;
    if base.to_bits() != again.to_bits() {
        return Err(TensorError::Contract(format!(
            "forward is not deterministic: {base} vs {again}"
        ))
        .into());
    }

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let mut probe = params.clone();
    for (name, grad) in &analytic {
        let len = grad.len();
        for k in 0..len {
            let original = probe.get(name).map(|t| t.values()[k]).unwrap_or_default();
            let mut at = |offset: f64| {
                set(&mut probe, name, k, original + offset);
                evaluate(&probe, &forward)
            };
            let numeric = match stencil {
                Stencil::ThreePoint => (at(step)? - at(-step)?) / (2.0 * step),
                Stencil::FivePoint => {
                    let near = at(step)? - at(-step)?;
                    let far = at(2.0 * step)? - at(-2.0 * step)?;
                    (8.0 * near - far) / (12.0 * step)
                }
            };
            set(&mut probe, name, k, original);
            let a = grad[k];
            let denom = a.abs().max(numeric.abs()).max(floor);
            let rel = (a - numeric).abs() / denom;
            report.coordinates += 1;
            if rel > report.max_relative_error || rel.is_nan() {
                report.max_relative_error = rel;
                report.worst = Some((name.clone(), k));
            }
        }
    }
    Ok(report)
}

fn set(params: &mut ParameterSet, name: &str, k: usize, value: f64) {
    if let Some(t) = params.get_mut(name) {
        t.values_mut()[k] = value;
    }
}

fn evaluate<F, E>(params: &ParameterSet, forward: &F) -> std::result::Result<f64, E>
where
    F: Fn(&mut Graph, &BoundParams) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let out = forward(&mut g, &bound)?;
    Ok(g.scalar(out)?)
}

fn analytic_grads<F, E>(
    params: &ParameterSet,
    forward: &F,
) -> std::result::Result<BTreeMap<String, Vec<f64>>, E>
where
    F: Fn(&mut Graph, &BoundParams) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let out = forward(&mut g, &bound)?;
    g.backward(out)?;
    let mut grads = BTreeMap::new();
    for (name, var) in bound.iter() {
        let len = params.get(name).map_or(0, |t| t.len());
        let grad = g.grad(var).map_or_else(|| vec![0.0; len], <[f64]>::to_vec);
        grads.insert(name.to_string(), grad);
    }
    Ok(grads)
}

#[cfg(test)]
fn max_relative_error<F>(params: &ParameterSet, step: f64, forward: F) -> Result<f64>
where
    F: Fn(&mut Graph, &BoundParams) -> Result<Var>,
{
    finite_difference_check(params, step, forward).map(|r| r.max_relative_error)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{multi_head_attention, AttentionWeights, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_is_nearly_exact() {
        let mut p = ParameterSet::new();
        p.insert("x", Tensor::from_vec(vec![3], vec![0.5, -1.0, 2.0]).unwrap())
            .unwrap();
        let err = max_relative_error(&p, 1e-5, |g, b| {
            let x = b.get("x")?;
            let sq = g.mul(x, x)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    fn curved(g: &mut Graph, b: &BoundParams) -> Result<Var> {
        let x = b.get("x")?;
        let y = g.gelu(x);
        let y = g.mul(y, y)?;
        let y = g.softplus(y);
        Ok(g.sum(y))
    }

    #[test]
    fn large_step_has_larger_error() {
        let mut p = ParameterSet::new();
        p.insert("x", Tensor::from_vec(vec![3], vec![0.8, -1.3, 2.1]).unwrap())
            .unwrap();
        let small = max_relative_error(&p, 1e-5, curved).unwrap();
        let large = max_relative_error(&p, 0.1, curved).unwrap();
        assert!(large > small, "{large} <= {small}");
        assert!(small < 1e-8);
    }

    #[test]
    fn nondeterministic_forward_is_detected() {
        use std::cell::Cell;
        let mut p = ParameterSet::new();
        p.insert("x", Tensor::zeros(&[1])).unwrap();
        let calls = Cell::new(0.0);
        let res = max_relative_error(&p, 1e-5, |g, b| {
            calls.set(calls.get() + 1.0);
            let x = b.get("x")?;
            let c = g.constant(Tensor::from_vec(vec![1], vec![calls.get()])?);
            let y = g.add(x, c)?;
            Ok(g.sum(y))
        });
        assert!(matches!(res, Err(TensorError::Contract(_))));
    }

    #[test]
    fn injected_fault_is_caught() {
        let mut p = ParameterSet::new();
        p.insert("x", Tensor::from_vec(vec![2], vec![0.3, 0.4]).unwrap())
            .unwrap();
        let report = finite_difference_check_with(
            &p,
            FdOptions::default(),
            |g: &mut Graph, b: &BoundParams| -> Result<Var> {
                let x = b.get("x")?;
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            |grads| grads.get_mut("x").unwrap()[1] += 0.01,
        )
        .unwrap();
        assert!(report.max_relative_error > 1e-3);
        assert_eq!(report.worst, Some(("x".to_string(), 1)));
    }

    /// A small composed graph touching every differentiable op.
    #[test]
    fn composed_graph_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 4;
        let mut p = ParameterSet::new();
        for (name, shape) in AttentionWeights::shapes("att", d) {
            p.insert(&name, Tensor::randn(&shape, 0.5, &mut rng)).unwrap();
        }
        p.insert("ln.g", Tensor::randn(&[d], 0.3, &mut rng)).unwrap();
        p.insert("ln.b", Tensor::randn(&[d], 0.3, &mut rng)).unwrap();
        p.insert("table", Tensor::randn(&[5, d], 1.0, &mut rng)).unwrap();
        p.insert("x", Tensor::randn(&[3, d], 1.0, &mut rng)).unwrap();
        let target = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let mask = [true, false, true, true, true, false];

        let err = max_relative_error(&p, 1e-5, |g, b| {
            let x = b.get("x")?;
            let xn = g.layer_norm(x, b.get("ln.g")?, b.get("ln.b")?, 1e-5)?;
            let w = AttentionWeights::from_bound(b, "att")?;
            let rows = g.gather_rows(b.get("table")?, &[1, 3, 1])?;
            let kv = g.concat_rows(&[xn, rows])?;
            let a = multi_head_attention(g, xn, kv, kv, &w, 2)?;
            let a = g.gelu(a);
            let pooled = g.mean_rows(a)?;
            let cos = g.cosine_rows(pooled, rows)?;
            let c = g.reshape(cos, vec![1, 3])?;
            let left = g.slice_cols(a, 0, 3)?;
            let left = g.slice_rows(left, 0, 2)?;
            let top = g.concat_rows(&[c, c])?;
            let z = g.sub(left, top)?;
            let z = g.mul_const(z, &target)?;
            let lse_r = g.logsumexp(z, 1, Some(&mask))?;
            let lse_c = g.logsumexp(z, 0, None)?;
            let sp = g.softplus(z);
            let t = g.transpose(sp)?;
            let s1 = g.sum(lse_r);
            let s2 = g.mean(lse_c);
            let s3 = g.mean(t);
            let s = g.add(s1, s2)?;
            let s = g.add(s, s3)?;
            Ok(g.scale(s, 0.7))
        })
        .unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }
}
