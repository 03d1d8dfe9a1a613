//! Named parameter storage shared by every module.

use indexmap::IndexMap;
use rand::Rng;

use crate::autograd::Var;
use crate::error::{NomError, Result};
use crate::tensor::Tensor;

/// Initialisation std for projection weights and bias tables.
pub const INIT_STD: f64 = 0.02;

/// Ordered map from dotted parameter names to leaves. Insertion order is the
/// canonical order used for checkpoints and parameter tables.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: IndexMap<String, Var>,
    trainable: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    /// Rebuilds every leaf as trainable or constant. Constants keep inference
    /// free of recorded history.
    pub fn set_trainable(&mut self, trainable: bool) {
        if self.trainable == trainable {
            return;
        }
        self.trainable = trainable;
        for v in self.params.values_mut() {
            let t = v.value().clone();
            *v = if trainable {
                Var::parameter(t)
            } else {
                Var::constant(t)
            };
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let v = if self.trainable {
            Var::parameter(value)
        } else {
            Var::constant(value)
        };
        self.params.insert(name.into(), v);
    }

    /// Inserts an existing leaf as-is (used to bind perturbed values).
    pub fn insert_var(&mut self, name: impl Into<String>, var: Var) {
        self.params.insert(name.into(), var);
    }

    pub fn get(&self, name: &str) -> Result<&Var> {
        self.params
            .get(name)
            .ok_or_else(|| NomError::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Replaces the value of an existing parameter, keeping its trainability.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let trainable = self.trainable;
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| NomError::InvalidArgument(format!("unknown parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(NomError::shape("set_value", slot.shape(), value.shape()));
        }
        *slot = if trainable {
            Var::parameter(value)
        } else {
            Var::constant(value)
        };
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|v| v.value().numel()).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn num_scalars_under(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.value().numel())
            .sum()
    }

    pub fn zero_grad(&self) {
        for v in self.params.values() {
            v.zero_grad();
        }
    }

    /// Copy of the store whose leaves are the given vars, in store order.
    pub fn rebind(&self, vars: &[Var]) -> Result<ParamStore> {
        if vars.len() != self.params.len() {
            return Err(NomError::InvalidArgument(format!(
                "rebind with {} vars for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        let mut out = ParamStore {
            params: IndexMap::with_capacity(vars.len()),
            trainable: true,
        };
        for ((name, old), v) in self.params.iter().zip(vars) {
            if old.shape() != v.shape() {
                return Err(NomError::shape("rebind", old.shape(), v.shape()));
            }
            out.params.insert(name.clone(), v.clone());
        }
        Ok(out)
    }

    pub fn values(&self) -> Vec<Tensor> {
        self.params.values().map(|v| v.value().clone()).collect()
    }
}

pub(crate) fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) {
    store.insert(
        format!("{prefix}.weight"),
        Tensor::trunc_normal(&[fan_in, fan_out], INIT_STD, rng),
    );
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]));
}

pub(crate) fn init_conv<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    k: usize,
    cin: usize,
    cout: usize,
    rng: &mut R,
) {
    let std = (2.0 / (k * k * cin) as f64).sqrt();
    store.insert(
        format!("{prefix}.weight"),
        Tensor::trunc_normal(&[k, k, cin, cout], std, rng),
    );
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[cout]));
}

pub(crate) fn init_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.insert(format!("{prefix}.gamma"), Tensor::ones(&[dim]));
    store.insert(format!("{prefix}.beta"), Tensor::zeros(&[dim]));
}

/// `x · W + b` on a `[T, fan_in]` token matrix.
pub(crate) fn linear(x: &Var, store: &ParamStore, prefix: &str) -> Result<Var> {
    x.matmul(store.get(&format!("{prefix}.weight"))?)?
        .add_bias(store.get(&format!("{prefix}.bias"))?)
}

pub(crate) fn norm(x: &Var, store: &ParamStore, prefix: &str) -> Result<Var> {
    x.layer_norm(
        store.get(&format!("{prefix}.gamma"))?,
        store.get(&format!("{prefix}.beta"))?,
        LN_EPS,
    )
}

pub const LN_EPS: f64 = 1e-5;
