//! Named parameter arrays shared by every trainable module.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::NdArray;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: NdArray,
    pub trainable: bool,
}

/// Ordered map from parameter name to array. Names use `/`-separated
/// prefixes per module (`triplane/xy/level0`, `kan_static/layer1/spline`, ...).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: NdArray, trainable: bool) {
        self.entries.insert(name.into(), Param { value, trainable });
    }

    pub fn get(&self, name: &str) -> Result<&NdArray> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut NdArray> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|p| p.trainable)
    }

    /// Set the trainable flag on every entry whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Graph leaf for `name`: a named parameter when trainable, else a constant.
    pub fn leaf(&self, g: &mut Graph, name: &str) -> Result<Var> {
        let p = self
            .entries
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        Ok(if p.trainable {
            g.param(name, p.value.clone())
        } else {
            let v = g.constant(p.value.clone());
            g.label(v, name)
        })
    }

    /// Copy every entry under `prefix` from `other`, replacing existing ones.
    pub fn merge_prefix(&mut self, other: &ParamStore, prefix: &str) {
        for (name, p) in other.iter() {
            if name.starts_with(prefix) {
                self.entries.insert(name.clone(), p.clone());
            }
        }
    }

    /// Round every value through `f32`, the checkpoint precision.
    pub fn quantize_f32(&mut self) {
        for p in self.entries.values_mut() {
            for v in p.value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Zero every entry under `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, p) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                p.value.data_mut().fill(0.0);
            }
        }
    }
}
