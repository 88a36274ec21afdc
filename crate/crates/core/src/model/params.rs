use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{LensError, Result};
use crate::rng::{truncated_normal, LensRng};
use crate::tensor::Tensor;

/// Index of a parameter tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Named parameter tensors in manifest (creation) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

pub const INIT_STD: f64 = 0.02;

impl ParamStore {
    pub fn add(&mut self, name: String, shape: &[usize], init: Init, rng: &mut LensRng) -> ParamId {
        let mut t = Tensor::zeros(shape);
        match init {
            Init::Normal => {
                for v in t.data_mut() {
                    *v = truncated_normal(rng, INIT_STD) as f32;
                }
            }
            Init::Ones => t.data_mut().fill(1.0),
            Init::Zeros => {}
        }
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    /// Replaces the values of `name`, keeping its shape.
    pub fn set(&mut self, name: &str, data: Vec<f32>) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| LensError::Contract(format!("no parameter named {name}")))?;
        let shape = self.tensors[i].shape().to_vec();
        self.tensors[i] = Tensor::new(&shape, data)?;
        Ok(())
    }
}
