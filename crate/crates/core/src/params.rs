//! Named, ordered parameter storage.
//!
//! Iteration order is always the insertion order of the `Vec`, never a hash
//! map order, so checkpoints, optimizer walks, and censuses are reproducible.

use std::collections::HashMap;

use crate::error::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ParamId(pub usize);

#[derive(Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Clone, Default)]
pub struct ParamSet {
    entries: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], data: Vec<f32>) -> Result<ParamId> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Dimension(format!(
                "param {name}: shape {shape:?} does not match data length {}",
                data.len()
            )));
        }
        if self.index.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let grad = vec![0.0f32; data.len()];
        self.entries.push(Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
            grad,
        });
        self.index.insert(name.to_string(), self.entries.len() - 1);
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.entries[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.entries
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|p| p.data.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_and_lookup() {
        let mut ps = ParamSet::new();
        let id = ps.add("w", &[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(ps.get(id).name, "w");
        assert_eq!(ps.by_name("w"), Some(id));
        assert!(ps.by_name("nope").is_none());
        assert!(ps.add("w", &[1], vec![0.0]).is_err());
        assert!(ps.add("bad", &[2], vec![0.0; 3]).is_err());
    }
}
