use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub u32);

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    ConvKernel,
    Bias,
    PreluAlpha,
    BnScale,
    BnShift,
    /// A differentiable input registered only for gradient checking.
    Input,
}

impl Role {
    pub fn code(self) -> u8 {
        match self {
            Role::ConvKernel => 0,
            Role::Bias => 1,
            Role::PreluAlpha => 2,
            Role::BnScale => 3,
            Role::BnShift => 4,
            Role::Input => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<Role> {
        Some(match code {
            0 => Role::ConvKernel,
            1 => Role::Bias,
            2 => Role::PreluAlpha,
            3 => Role::BnScale,
            4 => Role::BnShift,
            5 => Role::Input,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::ConvKernel => "conv-kernel",
            Role::Bias => "bias",
            Role::PreluAlpha => "prelu-alpha",
            Role::BnScale => "bn-scale",
            Role::BnShift => "bn-shift",
            Role::Input => "input",
        }
    }
}

pub const PRELU_ALPHA_MIN: f64 = 0.001;
pub const PRELU_ALPHA_MAX: f64 = 0.999;

#[derive(Clone, Debug)]
pub struct Parameter {
    pub id: ParamId,
    pub name: String,
    pub role: Role,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Owns every learnable tensor of a model. Ids are dense indices.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, role: Role, value: Tensor) -> ParamId {
        let id = ParamId(self.params.len() as u32);
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { id, name: name.into(), role, value, grad });
        id
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0 as usize]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0 as usize]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.get(id).value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = self.get_mut(id);
        p.value.expect_same_shape(&value)?;
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of scalar parameters, excluding gradient-check inputs.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().filter(|p| p.role != Role::Input).map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) -> Result<()> {
        let p = self.get_mut(id);
        p.grad.expect_same_shape(g).map_err(|e| Error::Shape(format!("gradient for {}: {e}", p.name)))?;
        for (acc, v) in p.grad.data_mut().iter_mut().zip(g.data()) {
            *acc += v;
        }
        Ok(())
    }

    /// Clamp every PReLU slope into `[PRELU_ALPHA_MIN, PRELU_ALPHA_MAX]`.
    pub fn clamp_alphas(&mut self) {
        for p in self.params.iter_mut().filter(|p| p.role == Role::PreluAlpha) {
            p.value.data_mut().iter_mut().for_each(|a| *a = a.clamp(PRELU_ALPHA_MIN, PRELU_ALPHA_MAX));
        }
    }
}
