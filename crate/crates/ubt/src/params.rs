//! Named parameter sets shared by every trainable model.
//!
//! Entry order is fixed at insertion and drives optimizer state layout and
//! checkpoint layout, so serialization round-trips are bit-exact and two runs
//! with the same seed see parameters in the same order.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Record every parameter as a tape leaf. Returned bindings resolve names
    /// to vars during the forward build and collect gradients afterwards.
    pub fn bind(&self, tape: &mut Tape) -> Result<Bound> {
        let mut vars = Vec::with_capacity(self.entries.len());
        let mut by_name = HashMap::with_capacity(self.entries.len());
        for (name, tensor) in &self.entries {
            let v = tape.leaf(tensor.clone())?;
            by_name.insert(name.clone(), v);
            vars.push(v);
        }
        Ok(Bound { vars, by_name })
    }

    /// Element-wise mean of checkpoints with identical names and shapes.
    pub fn average(sets: &[ParamSet]) -> Result<ParamSet> {
        let first = sets
            .first()
            .ok_or_else(|| Error::EmptyInput("average of zero checkpoints".into()))?;
        let mut out = first.clone();
        for other in &sets[1..] {
            if other.len() != first.len() {
                return Err(Error::Dimension("checkpoint parameter counts differ".into()));
            }
            for (i, (name, tensor)) in other.entries.iter().enumerate() {
                let (ref_name, acc) = &mut out.entries[i];
                if ref_name != name || acc.shape() != tensor.shape() {
                    return Err(Error::Dimension(format!(
                        "checkpoint mismatch at {ref_name} vs {name}"
                    )));
                }
                for (a, b) in acc.data_mut().iter_mut().zip(tensor.data()) {
                    *a += b;
                }
            }
        }
        let k = sets.len() as f64;
        for t in out.values_mut() {
            for v in t.data_mut() {
                *v /= k;
            }
        }
        Ok(out)
    }
}

/// Parameters bound onto one tape.
pub struct Bound {
    vars: Vec<Var>,
    by_name: HashMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter {name} not bound")))
    }

    /// Gradients in parameter entry order; zero tensors where the loss did
    /// not touch a parameter.
    pub fn grads(&self, params: &ParamSet, grads: &Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(params.entries.iter())
            .map(|(v, (_, t))| match grads.get(*v) {
                Some(g) => g.clone(),
                None => Tensor::zeros(t.shape().to_vec()),
            })
            .collect()
    }
}
