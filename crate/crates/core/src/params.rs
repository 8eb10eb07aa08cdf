//! Named parameter storage shared by the encoder, decoder, and classifier head.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Which part of the model owns a tensor; used for freezing and per-part learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    /// Dense block `i` together with the stem (i = 0) or the transition feeding it.
    EncoderBlock(usize),
    /// Normalization after the last dense block.
    EncoderHead,
    Decoder,
    /// Linear finding classifier used only for encoder pretraining.
    Classifier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Kind {
    Weight,
    /// Running statistics: saved and restored, never optimized.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub group: Group,
    pub kind: Kind,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: Group, kind: Kind) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            group,
            kind,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Places every tensor in `g`; weights selected by `trainable` collect gradients.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(ParamId, &Param) -> bool) -> Binding {
        let vars = self
            .iter()
            .map(|(id, p)| {
                let rg = p.kind == Kind::Weight && trainable(id, p);
                g.leaf(p.value.clone(), rg)
            })
            .collect();
        Binding { vars }
    }
}

/// Graph handles for every tensor of a [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Uniform samples in `[-bound, bound]`.
pub fn uniform<R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    if bound > 0.0 {
        t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-bound..=bound));
    }
    t
}
