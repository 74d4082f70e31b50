use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Index of a freezable unit in a model's layer registry.
pub type LayerId = usize;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A trainable tensor and the freezable layer it belongs to.
#[derive(Clone, Debug)]
pub struct Parameter<T = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub layer_id: LayerId,
    /// Cleared while the owning layer is frozen.
    pub update_enabled: bool,
}

/// Owns every parameter of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f32> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor<T>,
        layer_id: LayerId,
    ) -> ParamId {
        self.params.push(Parameter {
            name: name.into(),
            tensor,
            layer_id,
            update_enabled: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter<T>)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn of_layer(&self, layer: LayerId) -> impl Iterator<Item = ParamId> + '_ {
        self.iter()
            .filter(move |(_, p)| p.layer_id == layer)
            .map(|(id, _)| id)
    }

    /// Sets the update flag on every parameter of `layer`.
    pub fn set_layer_enabled(&mut self, layer: LayerId, enabled: bool) -> Result<()> {
        let mut found = false;
        for p in self.params.iter_mut().filter(|p| p.layer_id == layer) {
            p.update_enabled = enabled;
            found = true;
        }
        if found {
            Ok(())
        } else {
            Err(Error::UnknownLayer(layer))
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Copy of the store at another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    layer_id: p.layer_id,
                    update_enabled: p.update_enabled,
                })
                .collect(),
        }
    }
}
