use crate::error::{Error, Result};
use crate::numlin::DenseMatrix;

pub type ParamId = usize;

/// A named tensor with its gradient buffer.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: DenseMatrix,
    pub grad: DenseMatrix,
    pub trainable: bool,
}

/// Flat registry of all parameters of a run (base weights and adapter
/// weights alike). `ParamId`s are stable indices into this registry.
#[derive(Debug, Clone, Default)]
pub struct Params {
    items: Vec<Param>,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    pub fn register(&mut self, name: &str, value: DenseMatrix, trainable: bool) -> Result<ParamId> {
        if self.items.iter().any(|p| p.name == name) {
            return Err(Error::Argument(format!("duplicate parameter name {name}")));
        }
        let grad = DenseMatrix::zeros(value.rows(), value.cols());
        self.items.push(Param {
            name: name.to_string(),
            value,
            grad,
            trainable,
        });
        Ok(self.items.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.items[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.items[id]
    }

    pub fn value(&self, id: ParamId) -> &DenseMatrix {
        &self.items[id].value
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.items.iter().position(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.items.iter().enumerate()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.items {
            for g in p.grad.data_mut() {
                *g = 0.0;
            }
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.items {
            p.trainable = trainable;
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.items
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }
}
