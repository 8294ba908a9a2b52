//! Named parameter storage and the small layer helpers shared by the
//! encoder and the matcher.

use std::collections::BTreeMap;

use bhreg_autograd::{Scalar, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Parameters keyed by module path, in `f64` master precision.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<f64>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f64>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f64>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<f64>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<f64>)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalars.
    pub fn size(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Push every parameter onto `tape`, cast to `T`.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| {
                let t = v.cast::<T>();
                let var = if trainable { tape.param(t) } else { tape.constant(t) };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    /// Parameter values in name order.
    pub fn tensors(&self) -> Vec<Tensor<f64>> {
        self.params.values().cloned().collect()
    }

    pub fn to_stored(&self) -> BTreeMap<String, StoredTensor> {
        self.params.iter().map(|(k, v)| (k.clone(), StoredTensor::from(v))).collect()
    }

    pub fn from_stored(stored: &BTreeMap<String, StoredTensor>) -> Result<Self> {
        let params = stored
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.to_tensor()?)))
            .collect::<Result<_>>()?;
        Ok(Self { params })
    }
}

/// Serialized tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&Tensor<f64>> for StoredTensor {
    fn from(t: &Tensor<f64>) -> Self {
        Self {
            rows: t.rows(),
            cols: t.cols(),
            data: t.data().to_vec(),
        }
    }
}

impl StoredTensor {
    pub fn to_tensor(&self) -> Result<Tensor<f64>> {
        Tensor::from_vec(self.rows, self.cols, self.data.clone()).map_err(CoreError::from)
    }
}

/// Tape handles of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Pair `names` with handles already on a tape, in the same order.
    pub fn from_vars(names: &[String], vars: &[Var]) -> Self {
        Self {
            vars: names.iter().cloned().zip(vars.iter().copied()).collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| CoreError::Config(format!("missing parameter {name}")))
    }

    /// Gradients of every bound parameter, in `f64`. Parameters the loss
    /// does not reach get zeros.
    pub fn grads<T: Scalar>(&self, tape: &Tape<T>) -> BTreeMap<String, Tensor<f64>> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let g = match tape.grad(v) {
                    Some(g) => g.cast::<f64>(),
                    None => {
                        let (r, c) = tape.shape(v);
                        Tensor::zeros(r, c)
                    }
                };
                (k.clone(), g)
            })
            .collect()
    }
}

/// Uniform Glorot initialization scaled by `gain`.
pub fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize, gain: f64) -> Tensor<f64> {
    let a = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(fan_in, fan_out, |_, _| rng.random_range(-a..=a))
}

/// `x W + b` with `W: in x out` and `b: 1 x out`.
pub fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    Ok(match b {
        Some(b) => tape.add_row(y, b)?,
        None => y,
    })
}
