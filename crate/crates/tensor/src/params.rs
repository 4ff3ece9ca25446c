use std::collections::BTreeMap;

use crate::{Graph, Result, Tensor, TensorError, Var};

/// Named trainable tensors plus the optimizer state that goes with them.
///
/// Names iterate in lexicographic order, which fixes the order of every
/// reduction over parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    params: BTreeMap<String, Tensor>,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

/// Graph handles for every parameter of a set, keyed by name.
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub epsilon: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            betas: (0.9, 0.999),
            epsilon: 1e-8,
        }
    }
}

impl AdamW {
    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        let ok = self.learning_rate > 0.0
            && self.weight_decay >= 0.0
            && self.epsilon > 0.0
            && (0.0..1.0).contains(&b1)
            && b1 > 0.0
            && (0.0..1.0).contains(&b2)
            && b2 > 0.0;
        if ok {
            Ok(())
        } else {
            Err(TensorError::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter; names must be unique.
    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(TensorError::Contract(format!("duplicate parameter `{name}`")));
        }
        self.params
            .insert(name.to_string(), tensor.with_requires_grad(true));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Records every parameter as a leaf of `g`; `track` decides whether
    /// gradients flow to them.
    pub fn bind(&self, g: &mut Graph, track: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| (k.clone(), g.leaf(t.clone(), track)))
            .collect();
        BoundParams { vars }
    }

    /// Adds the gradients of the last backward pass on `g` into each
    /// parameter's gradient buffer. Parameters the pass did not reach are left
    /// untouched.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &BoundParams) -> Result<()> {
        for (name, var) in bound.iter() {
            if let Some(grad) = g.grad(var) {
                let t = self
                    .params
                    .get_mut(name)
                    .ok_or_else(|| TensorError::Contract(format!("unknown parameter `{name}`")))?;
                t.accumulate_grad(grad)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(Tensor::clear_grad);
    }

    /// One AdamW update of every parameter, then gradients are cleared.
    ///
    /// Decay is applied to the pre-update value: `p ← p − lr·wd·p`, followed
    /// by the bias-corrected Adam step.
    pub fn adamw_step(&mut self, opt: &AdamW) -> Result<()> {
        opt.validate()?;
        if let Some((name, _)) = self.params.iter().find(|(_, t)| t.grad().is_none()) {
            return Err(TensorError::Contract(format!(
                "parameter `{name}` has no gradient"
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = opt.betas;
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);
        for (name, tensor) in self.params.iter_mut() {
            let grad = tensor.grad().map(<[f64]>::to_vec).unwrap_or_default();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            let values = tensor.values_mut();
            for k in 0..values.len() {
                let gk = grad[k];
                values[k] -= opt.learning_rate * opt.weight_decay * values[k];
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                let m_hat = m[k] / bias1;
                let v_hat = v[k] / bias2;
                values[k] -= opt.learning_rate * m_hat / (v_hat.sqrt() + opt.epsilon);
            }
            tensor.clear_grad();
        }
        Ok(())
    }

    /// Moment buffers for `name`, present once it has been stepped.
    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments
            .get(name)
            .map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// Copies only the values of another set with identical names and shapes.
    pub fn same_layout(&self, other: &ParameterSet) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, grad: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::from_vec(vec![1], vec![value]).unwrap())
            .unwrap();
        p.get_mut("w").unwrap().set_grad(vec![grad]).unwrap();
        p
    }

    #[test]
    fn zero_grad_without_decay_is_a_no_op() {
        let mut p = single(1.5, 0.0);
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        p.adamw_step(&opt).unwrap();
        assert_eq!(p.get("w").unwrap().values(), &[1.5]);
        assert_eq!(p.step(), 1);
        assert!(p.get("w").unwrap().grad().is_none());
    }

    #[test]
    fn single_step_matches_closed_form() {
        let (x, g) = (0.7, -0.3);
        let opt = AdamW {
            learning_rate: 0.01,
            weight_decay: 0.1,
            betas: (0.9, 0.999),
            epsilon: 1e-8,
        };
        let mut p = single(x, g);
        p.adamw_step(&opt).unwrap();
        // after one step m̂ = g and v̂ = g², so the Adam move is lr·g/(|g|+eps)
        let decayed = x - 0.01 * 0.1 * x;
        let expected = decayed - 0.01 * g / (g.abs() + 1e-8);
        assert!((p.get("w").unwrap().values()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn decoupled_decay_shrinks_exactly() {
        let opt = AdamW {
            learning_rate: 0.05,
            weight_decay: 0.2,
            ..AdamW::default()
        };
        let mut p = single(2.0, 0.0);
        p.adamw_step(&opt).unwrap();
        assert_eq!(p.get("w").unwrap().values()[0], 2.0 - 0.05 * 0.2 * 2.0);
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut p = single(1.0, 0.0);
        p.insert("bias", Tensor::zeros(&[2])).unwrap();
        let err = p.adamw_step(&AdamW::default()).unwrap_err();
        assert!(err.to_string().contains("`bias`"), "{err}");
        assert_eq!(p.step(), 0);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut p = ParameterSet::new();
        p.insert("a", Tensor::zeros(&[1])).unwrap();
        assert!(p.insert("a", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn moments_match_parameter_shapes() {
        let mut p = ParameterSet::new();
        p.insert("m", Tensor::zeros(&[2, 3])).unwrap();
        p.get_mut("m").unwrap().set_grad(vec![1.0; 6]).unwrap();
        p.adamw_step(&AdamW::default()).unwrap();
        let (m, v) = p.moments("m").unwrap();
        assert_eq!((m.len(), v.len()), (6, 6));
    }

    #[test]
    fn graph_gradients_accumulate_into_parameters() {
        let mut p = ParameterSet::new();
        p.insert("x", Tensor::from_vec(vec![2], vec![1.0, -2.0]).unwrap())
            .unwrap();
        for _ in 0..2 {
            let mut g = Graph::new();
            let b = p.bind(&mut g, true);
            let x = b.get("x").unwrap();
            let s = g.sum(x);
            g.backward(s).unwrap();
            p.accumulate_grads(&g, &b).unwrap();
        }
        assert_eq!(p.get("x").unwrap().grad().unwrap(), &[2.0, 2.0]);
    }
}
