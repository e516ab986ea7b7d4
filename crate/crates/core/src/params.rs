//! Named parameter storage, group/kind tags and gradient slots.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Layer group of the acoustic encoder (stem, three blocks, aggregation,
/// pooling, projection).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayerGroupId {
    G0,
    G1,
    G2,
    G3,
    G4,
    G5,
    G6,
}

impl LayerGroupId {
    pub const ALL: [LayerGroupId; 7] = [
        LayerGroupId::G0,
        LayerGroupId::G1,
        LayerGroupId::G2,
        LayerGroupId::G3,
        LayerGroupId::G4,
        LayerGroupId::G5,
        LayerGroupId::G6,
    ];

    /// Groups that own a squeeze-excitation module.
    pub const SE_GROUPS: [LayerGroupId; 3] = [LayerGroupId::G1, LayerGroupId::G2, LayerGroupId::G3];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn block_index(self) -> Option<usize> {
        match self {
            LayerGroupId::G1 => Some(0),
            LayerGroupId::G2 => Some(1),
            LayerGroupId::G3 => Some(2),
            _ => None,
        }
    }
}

impl fmt::Display for LayerGroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "G{}", self.index())
    }
}

impl FromStr for LayerGroupId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let digits = t.strip_prefix('G').or_else(|| t.strip_prefix('g'));
        digits
            .and_then(|d| d.parse::<usize>().ok())
            .and_then(LayerGroupId::from_index)
            .ok_or_else(|| Error::Spec(format!("unknown layer group `{s}` (expected G0..G6)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ParamKind {
    Conv,
    Bn,
    Se,
    Fc,
    Attn,
    Laf,
    /// AdaIN projection of a keyword-adaptive module.
    Kam,
    /// Learned classification head.
    Head,
}

impl fmt::Display for ParamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParamKind::Conv => "CONV",
            ParamKind::Bn => "BN",
            ParamKind::Se => "SE",
            ParamKind::Fc => "FC",
            ParamKind::Attn => "ATTN",
            ParamKind::Laf => "LAF",
            ParamKind::Kam => "KAM",
            ParamKind::Head => "HEAD",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamTag {
    pub group: LayerGroupId,
    pub kind: ParamKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedParameter {
    pub name: String,
    pub group: LayerGroupId,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
}

impl TaggedParameter {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub tag: T,
    pub value: Vec<f64>,
}

/// Non-trainable state (normalization running statistics).
#[derive(Clone, Debug, PartialEq)]
pub struct Buffer {
    pub name: String,
    pub value: Vec<f64>,
}

/// Insertion-ordered parameters plus buffers; names are unique across both.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    buffers: Vec<Buffer>,
    index: HashMap<String, usize>,
    buffer_index: HashMap<String, usize>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        Self { params: Vec::new(), buffers: Vec::new(), index: HashMap::new(), buffer_index: HashMap::new() }
    }
}

impl<T: Clone> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, tag: T, value: Vec<f64>) -> ParamId {
        let name = name.into();
        assert_eq!(shape.iter().product::<usize>(), value.len(), "parameter {name} shape");
        assert!(
            !self.index.contains_key(&name) && !self.buffer_index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, shape, tag, value });
        ParamId(id)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Vec<f64>) -> BufferId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name) && !self.buffer_index.contains_key(&name),
            "duplicate buffer name {name}"
        );
        let id = self.buffers.len();
        self.buffer_index.insert(name.clone(), id);
        self.buffers.push(Buffer { name, value });
        BufferId(id)
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].value
    }

    #[inline]
    pub fn value_mut(&mut self, id: ParamId) -> &mut Vec<f64> {
        &mut self.params[id.0].value
    }

    #[inline]
    pub fn buffer(&self, id: BufferId) -> &[f64] {
        &self.buffers[id.0].value
    }

    #[inline]
    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Vec<f64> {
        &mut self.buffers[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer] {
        &mut self.buffers
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn buffer_id_of(&self, name: &str) -> Option<BufferId> {
        self.buffer_index.get(name).copied().map(BufferId)
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Gradient accumulators; a slot is `None` when the parameter is not wanted.
#[derive(Clone, Debug)]
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn for_all<T: Clone>(store: &ParamStore<T>) -> Self {
        Self::masked(store, |_| true)
    }

    pub fn masked<T: Clone>(store: &ParamStore<T>, want: impl Fn(&Param<T>) -> bool) -> Self {
        let slots = store
            .params()
            .iter()
            .map(|p| if want(p) { Some(vec![0.0; p.value.len()]) } else { None })
            .collect();
        Self { slots }
    }

    #[inline]
    pub fn wants(&self, id: ParamId) -> bool {
        self.slots.get(id.0).is_some_and(|s| s.is_some())
    }

    #[inline]
    pub fn slot(&mut self, id: ParamId) -> Option<&mut Vec<f64>> {
        self.slots.get_mut(id.0).and_then(|s| s.as_mut())
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.slots.get(id.0).and_then(|s| s.as_deref())
    }

    pub fn any(&self) -> bool {
        self.slots.iter().any(|s| s.is_some())
    }

    pub fn zero(&mut self) {
        for s in self.slots.iter_mut().flatten() {
            s.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().flatten().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_parsing() {
        assert_eq!("G4".parse::<LayerGroupId>().unwrap(), LayerGroupId::G4);
        assert_eq!("g0".parse::<LayerGroupId>().unwrap(), LayerGroupId::G0);
        assert!("G7".parse::<LayerGroupId>().is_err());
        assert!("X1".parse::<LayerGroupId>().is_err());
        assert_eq!(LayerGroupId::G6.to_string(), "G6");
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_are_rejected() {
        let mut s: ParamStore<()> = ParamStore::new();
        s.add("a", vec![1], (), vec![0.0]);
        s.add_buffer("a", vec![0.0]);
    }

    #[test]
    fn masked_gradients() {
        let mut s: ParamStore<u8> = ParamStore::new();
        let a = s.add("a", vec![2], 0, vec![0.0; 2]);
        let b = s.add("b", vec![3], 1, vec![0.0; 3]);
        let mut g = Gradients::masked(&s, |p| p.tag == 1);
        assert!(!g.wants(a));
        assert!(g.wants(b));
        assert_eq!(g.slot(b).unwrap().len(), 3);
    }
}
