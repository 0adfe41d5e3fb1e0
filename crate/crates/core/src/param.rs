//! Named, group-tagged trainable tensors.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Which network part a parameter belongs to; the discriminant is the
/// checkpoint group code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Group {
    Seg = 0,
    BackboneFull = 1,
    BackboneCrop = 2,
    Head = 3,
}

impl Group {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Group::Seg),
            1 => Some(Group::BackboneFull),
            2 => Some(Group::BackboneCrop),
            3 => Some(Group::Head),
            _ => None,
        }
    }

    pub fn is_backbone(self) -> bool {
        matches!(self, Group::BackboneFull | Group::BackboneCrop)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Seg => "seg",
            Group::BackboneFull => "backbone_full",
            Group::BackboneCrop => "backbone_crop",
            Group::Head => "head",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
    pub group: Group,
}

/// Ordered parameter collection with unique names.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

/// Parameters recorded as leaves on one tape, in store order.
pub struct Bound<'t, T: Scalar> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    /// Uses caller-recorded variables, one per store parameter in store order.
    pub fn from_vars(vars: Vec<Var<'t, T>>) -> Self {
        Self { vars }
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn var(&self, idx: usize) -> Var<'t, T> {
        self.vars[idx]
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Adds a trainable parameter and returns its index.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, group: Group) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        let idx = self.params.len();
        self.index.insert(name.clone(), idx);
        self.params.push(Parameter {
            name,
            tensor,
            trainable: true,
            group,
        });
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Parameter<T> {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Parameter<T> {
        &mut self.params[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.index_of(name).map(|i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Total number of scalar values.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params.iter().filter(|p| p.trainable).map(|p| p.name.clone()).collect()
    }

    /// Records every parameter on `tape`; only trainable ones track gradients.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone().with_requires_grad(p.trainable)))
            .collect();
        Bound { vars }
    }

    /// Records every parameter as a constant (inference).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        let vars = self.params.iter().map(|p| tape.constant(p.tensor.clone())).collect();
        Bound { vars }
    }

    /// Adds the tape gradients of trainable parameters into their buffers.
    pub fn accumulate_grads(&mut self, bound: &Bound<'_, T>) {
        for (p, v) in self.params.iter_mut().zip(&bound.vars) {
            if !p.trainable {
                continue;
            }
            if let Some(g) = v.grad() {
                p.tensor.accumulate_grad(g.data());
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub fn set_trainable(&mut self, pred: impl Fn(&Parameter<T>) -> bool) {
        for p in &mut self.params {
            p.trainable = pred(p);
        }
    }

    /// FNV-1a over names and value bits, one digest per parameter.
    pub fn checksums(&self) -> Vec<(String, u64)> {
        self.params.iter().map(|p| (p.name.clone(), tensor_checksum(&p.tensor))).collect()
    }
}

pub fn tensor_checksum<T: Scalar>(t: &Tensor<T>) -> u64 {
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(PRIME);
        }
    };
    for &d in t.shape() {
        eat(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        eat(&v.to_f64().unwrap_or(f64::NAN).to_bits().to_le_bytes());
    }
    h
}
