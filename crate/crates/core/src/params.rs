//! Named learnable parameters and their gradient buffers.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Role of a parameter, used for weight-decay exclusion and reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Weight,
    Bias,
    Norm,
    /// Rotation/reflection angles.
    Theta,
    /// Raw scale parameter `w` of the metric.
    ScaleW,
    /// Strict upper triangle of a skew-symmetric generator.
    Skew,
    /// Raw (pre-softplus) attenuation width.
    Sigma,
    /// Lower-triangular factor of the attenuation metric `A`.
    AFactor,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::Weight,
        ParamGroup::Bias,
        ParamGroup::Norm,
        ParamGroup::Theta,
        ParamGroup::ScaleW,
        ParamGroup::Skew,
        ParamGroup::Sigma,
        ParamGroup::AFactor,
    ];

    /// Only projection matrices receive weight decay.
    pub fn decays(self) -> bool {
        self == ParamGroup::Weight
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Weight => "weight",
            ParamGroup::Bias => "bias",
            ParamGroup::Norm => "norm",
            ParamGroup::Theta => "theta",
            ParamGroup::ScaleW => "w",
            ParamGroup::Skew => "skew",
            ParamGroup::Sigma => "sigma",
            ParamGroup::AFactor => "a_factor",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ParamGroup::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown parameter group {s:?}")))
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
    pub grad: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        value: Tensor,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name,
            group,
            value,
            grad,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Total count of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_value",
                format!("{}: {:?} vs {:?}", p.name, p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }
}
