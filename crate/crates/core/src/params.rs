//! Named parameter tensors and their routing groups.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which loss term is allowed to update a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    /// Trunk, individual-feature heads and the per-branch loss state,
    /// trained by the ensemble loss.
    Ensemble,
    /// Reconstruction decoders, trained by the reconstruction loss.
    Decoder,
    /// Meta heads, score, updater and embedding-loss state, trained by the
    /// embedding loss.
    Relational,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Ensemble, Group::Decoder, Group::Relational];

    /// Routing group for a parameter name, decided by its first component.
    pub fn of(name: &str) -> Option<Group> {
        let prefix = name.split('.').next().unwrap_or("");
        match prefix {
            "trunk" | "head" | "ind" => Some(Group::Ensemble),
            "decoder" => Some(Group::Decoder),
            "meta_a" | "meta_b" | "score" | "updater" | "emb" => Some(Group::Relational),
            _ => None,
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Ensemble => "theta_G",
            Group::Decoder => "theta_P",
            Group::Relational => "theta_h",
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if Group::of(&name).is_none() {
            return Err(Error::InvalidArgument(format!(
                "parameter `{name}` belongs to no routing group"
            )));
        }
        if self.tensors.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn group(&self, group: Group) -> impl Iterator<Item = (&str, &Tensor)> {
        self.iter().filter(move |(k, _)| Group::of(k) == Some(group))
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    /// Bitwise equality of every tensor in one group.
    pub fn group_bits_equal(&self, other: &Self, group: Group) -> bool {
        let a: Vec<_> = self.group(group).collect();
        let b: Vec<_> = other.group(group).collect();
        a.len() == b.len()
            && a.iter().zip(&b).all(|((na, ta), (nb, tb))| {
                na == nb
                    && ta.shape() == tb.shape()
                    && ta
                        .data()
                        .iter()
                        .zip(tb.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// Bitwise equality of every tensor.
    pub fn bits_equal(&self, other: &Self) -> bool {
        Group::ALL.iter().all(|&g| self.group_bits_equal(other, g))
            && self.len() == other.len()
    }
}
