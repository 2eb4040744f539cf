use ndarray::{ArrayD, IxDyn};

use super::Scalar;

/// Role of a stored tensor; decides whether it is trained and decayed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution or dense weight (weight decay applies).
    Weight,
    Bias,
    NormScale,
    NormShift,
    /// Batch-norm running statistic, not trained.
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        self != ParamKind::Buffer
    }

    pub fn decayed(self) -> bool {
        self == ParamKind::Weight
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            ParamKind::Weight => 0,
            ParamKind::Bias => 1,
            ParamKind::NormScale => 2,
            ParamKind::NormShift => 3,
            ParamKind::Buffer => 4,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => ParamKind::Weight,
            1 => ParamKind::Bias,
            2 => ParamKind::NormScale,
            3 => ParamKind::NormShift,
            4 => ParamKind::Buffer,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Param<F> {
    pub name: String,
    pub kind: ParamKind,
    pub value: ArrayD<F>,
}

/// Flat, ordered registry of every tensor a network owns.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    entries: Vec<Param<F>>,
}

pub type ParamId = usize;

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, kind: ParamKind, value: ArrayD<F>) -> ParamId {
        self.entries.push(Param {
            name: name.into(),
            kind,
            value,
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Param<F>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Param<F>] {
        &mut self.entries
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &ArrayD<F> {
        &self.entries[id].value
    }

    #[inline]
    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.entries[id].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut ArrayD<F>> {
        self.entries
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
    }

    pub fn zeros_like(&self) -> Grads<F> {
        Grads {
            values: self
                .entries
                .iter()
                .map(|p| ArrayD::zeros(IxDyn(p.value.shape())))
                .collect(),
        }
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.kind.trainable())
            .map(|p| p.value.len())
            .sum()
    }
}

/// Gradients aligned index-for-index with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads<F> {
    pub values: Vec<ArrayD<F>>,
}

impl<F: Scalar> Grads<F> {
    #[inline]
    pub fn get(&self, id: ParamId) -> &ArrayD<F> {
        &self.values[id]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.values[id]
    }
}
