use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Which part of an adapted model owns a parameter or a recorded op.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ComponentTag {
    Base,
    Adapter,
    Connector,
    CondEmbedder,
    Other,
}

impl ComponentTag {
    pub const ALL: [ComponentTag; 5] = [
        ComponentTag::Base,
        ComponentTag::Adapter,
        ComponentTag::Connector,
        ComponentTag::CondEmbedder,
        ComponentTag::Other,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ComponentTag::Base => "base",
            ComponentTag::Adapter => "adapter",
            ComponentTag::Connector => "connector",
            ComponentTag::CondEmbedder => "cond-embedder",
            ComponentTag::Other => "other",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == name)
    }
}

impl fmt::Display for ComponentTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Rc<Vec<f32>>,
    pub tag: ComponentTag,
    pub trainable: bool,
}

impl Parameter {
    pub fn tensor(&self) -> Tensor {
        let mut t = Tensor::from_parts(self.shape.clone(), Rc::clone(&self.value));
        t.weight = true;
        t
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Registry of every parameter of a model, addressed by [`ParamId`] or by
/// unique dotted name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

/// Initialization recipe for a new parameter.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f32),
    /// Normal with the given standard deviation.
    Normal(f32),
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        tag: ComponentTag,
        rng: &mut Rng,
    ) -> ParamId {
        let n = crate::tensor::numel(shape);
        let data = match init {
            Init::Zeros => alloc::vec![0.0; n],
            Init::Ones => alloc::vec![1.0; n],
            Init::Uniform(b) => (0..n).map(|_| rng.uniform_in(-b, b)).collect(),
            Init::Normal(s) => (0..n).map(|_| s * rng.normal()).collect(),
        };
        self.add_value(name, shape, data, tag, true)
    }

    pub fn add_value(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        data: Vec<f32>,
        tag: ComponentTag,
        trainable: bool,
    ) -> ParamId {
        let name = name.into();
        assert_eq!(crate::tensor::numel(shape), data.len(), "{name}");
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Parameter {
            name,
            shape: shape.to_vec(),
            value: Rc::new(data),
            tag,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    /// Registers a value copy of `src` under a new name and owner.
    pub fn copy_param(&mut self, src: ParamId, name: impl Into<String>, tag: ComponentTag) -> ParamId {
        let p = &self.params[src.0];
        let (shape, data) = (p.shape.clone(), p.value.as_ref().clone());
        self.add_value(name, &shape, data, tag, true)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Result<&Parameter> {
        self.find(name)
            .map(|id| self.get(id))
            .ok_or_else(|| Error::UnknownParameter(name.into()))
    }

    pub fn tensor(&self, id: ParamId) -> Tensor {
        self.params[id.0].tensor()
    }

    /// Mutable access to the values; copies on write if a tape still holds them.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Vec<f32> {
        Rc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set_value(&mut self, id: ParamId, data: Vec<f32>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.len() != data.len() {
            return crate::error::shape_err("set_value", &p.shape, &[data.len()]);
        }
        p.value = Rc::new(data);
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.trainable = false;
        }
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn count_elements(&self, pred: impl Fn(&Parameter) -> bool) -> usize {
        self.params.iter().filter(|p| pred(p)).map(|p| p.len()).sum()
    }

    pub fn trainable_elements(&self) -> usize {
        self.count_elements(|p| p.trainable)
    }

    pub fn total_elements(&self) -> usize {
        self.count_elements(|_| true)
    }
}
