use indexmap::IndexMap;

use crate::element::Element;
use crate::error::{DiffError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::DTensor;

/// Ordered, uniquely named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGroup<E> {
    entries: IndexMap<String, DTensor<E>>,
}

impl<E: Element> ParamGroup<E> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    /// Registers a parameter; it is marked as requiring a gradient.
    pub fn insert(&mut self, name: impl Into<String>, tensor: DTensor<E>) -> Result<()> {
        let name = name.into();
        if name.is_empty() || self.entries.contains_key(&name) {
            return Err(DiffError::BadParamName(name));
        }
        self.entries.insert(name, tensor.with_grad());
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&DTensor<E>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DTensor<E>> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DTensor<E>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut DTensor<E>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.entries.values().map(DTensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.entries.values_mut().for_each(DTensor::zero_grad);
    }

    pub fn cast<F: Element>(&self) -> ParamGroup<F> {
        ParamGroup {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Records every parameter as a leaf of `graph`. Parameters for which
    /// `trainable` returns false enter as constants.
    pub fn bind_where(&self, graph: &mut Graph<E>, trainable: impl Fn(&str) -> bool) -> ParamVars {
        let vars = self
            .entries
            .iter()
            .map(|(name, t)| {
                let mut t = t.clone();
                t.requires_grad = trainable(name);
                (name.clone(), graph.leaf(&t))
            })
            .collect();
        ParamVars { vars }
    }

    pub fn bind(&self, graph: &mut Graph<E>) -> ParamVars {
        self.bind_where(graph, |_| true)
    }

    /// Adds the graph gradients of the bound parameters into their grad
    /// buffers. A bound parameter the loss did not reach, or one bound as a
    /// constant, receives a zero gradient.
    pub fn accumulate_grads(&mut self, graph: &Graph<E>, vars: &ParamVars) -> Result<()> {
        for (name, &v) in &vars.vars {
            let t = self
                .entries
                .get_mut(name)
                .ok_or_else(|| DiffError::UnknownParam(name.clone()))?;
            match graph.grad(v) {
                Some(g) => t.accumulate_grad(g)?,
                None => t.accumulate_grad(&vec![E::zero(); t.numel()])?,
            }
        }
        Ok(())
    }

    /// Global L2 norm of all gradient buffers.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .filter_map(DTensor::grad)
            .flat_map(|g| g.iter().map(|v| v.as_f64() * v.as_f64()))
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if max_norm > 0.0 && norm > max_norm {
            let s = E::from_f64(max_norm / norm);
            for t in self.entries.values_mut() {
                if let Some(g) = t.grad_mut() {
                    g.iter_mut().for_each(|v| *v = *v * s);
                }
            }
        }
        norm
    }
}

/// Graph handles of a bound [`ParamGroup`].
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: IndexMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_non_empty() {
        let mut p = ParamGroup::<f32>::new();
        p.insert("w", DTensor::zeros(&[2]).unwrap()).unwrap();
        assert!(p.insert("w", DTensor::zeros(&[2]).unwrap()).is_err());
        assert!(p.insert("", DTensor::zeros(&[2]).unwrap()).is_err());
        assert!(p.get("w").unwrap().requires_grad);
        assert_eq!(p.num_elements(), 2);
    }

    #[test]
    fn bind_and_collect() {
        let mut p = ParamGroup::<f64>::new();
        p.insert("a", DTensor::new(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        p.insert("frozen", DTensor::new(&[2], vec![3.0, 4.0]).unwrap()).unwrap();
        let mut g = Graph::new();
        let vars = p.bind_where(&mut g, |n| n != "frozen");
        let prod = g.mul(vars.get("a").unwrap(), vars.get("frozen").unwrap()).unwrap();
        let l = g.sum(prod);
        g.backward(l).unwrap();
        p.accumulate_grads(&g, &vars).unwrap();
        assert_eq!(p.get("a").unwrap().grad().unwrap(), &[3.0, 4.0]);
        assert_eq!(p.get("frozen").unwrap().grad().unwrap(), &[0.0, 0.0]);
        assert!(vars.get("nope").is_err());
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut p = ParamGroup::<f64>::new();
        p.insert("a", DTensor::zeros(&[2]).unwrap()).unwrap();
        p.get_mut("a").unwrap().accumulate_grad(&[3.0, 4.0]).unwrap();
        assert_eq!(p.clip_grad_norm(1.0), 5.0);
        let g = p.get("a").unwrap().grad().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);
    }
}
