//! Named parameter storage and the per-forward binding of parameters to a tape.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::tape::{LayerKind, LayerLabel, Tape, Var};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// How [`ParamStore::init_uniform`] fills a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// `U(-b, b)` with `b = sqrt(1 / fan_in)`.
    Uniform { fan_in: usize },
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    init: Vec<Init>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            init: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a zero-filled parameter.
    pub fn register(&mut self, name: impl Into<String>, shape: Shape, init: Init) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(Tensor::zeros(shape));
        self.init.push(init);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.shape().len()).sum()
    }

    /// Fills every parameter according to its [`Init`], drawing uniform
    /// values in registration order.
    pub fn init_uniform(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (t, &init) in self.tensors.iter_mut().zip(&self.init) {
            match init {
                Init::Uniform { fan_in } => {
                    let bound = num_traits::Float::sqrt(1.0 / fan_in.max(1) as f64);
                    for v in t.data_mut() {
                        *v = T::of(rng.gen_range(-bound..bound));
                    }
                }
                Init::Zero => t.data_mut().iter_mut().for_each(|v| *v = T::zero()),
            }
        }
    }

    pub fn zero(&mut self, id: ParamId) {
        self.tensors[id.0].data_mut().iter_mut().for_each(|v| *v = T::zero());
    }

    /// Replaces a parameter's values, keeping its shape.
    pub fn set(&mut self, id: ParamId, tensor: Tensor<T>) -> Result<()> {
        if tensor.shape() != self.tensors[id.0].shape() {
            return Err(Error::shape(
                "parameter",
                alloc::format!("{}: {} vs {}", self.names[id.0], tensor.shape(), self.tensors[id.0].shape()),
            ));
        }
        self.tensors[id.0] = tensor;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            init: self.init.clone(),
        }
    }
}

/// How a forward pass treats parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Parameters require gradients.
    Train,
    /// Values only.
    Infer,
    /// Shapes only; nothing is computed.
    Trace,
}

/// One forward pass: a tape plus lazily bound parameter leaves.
pub struct Forward<'p, T: Scalar> {
    pub tape: Tape<T>,
    params: &'p ParamStore<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
}

impl<'p, T: Scalar> Forward<'p, T> {
    pub fn new(params: &'p ParamStore<T>, mode: Mode) -> Self {
        let tape = if mode == Mode::Trace { Tape::tracing() } else { Tape::new() };
        Forward {
            tape,
            params,
            bound: alloc::vec![None; params.len()],
            mode,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = match self.mode {
            Mode::Trace => self.tape.placeholder(self.params.get(id).shape(), true),
            Mode::Train => self.tape.leaf(self.params.get(id).clone(), true),
            Mode::Infer => self.tape.leaf(self.params.get(id).clone(), false),
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Records an input image or feature; in trace mode only its shape is kept.
    pub fn input(&mut self, tensor: &Tensor<T>, name: &str) -> Var {
        let v = if self.mode == Mode::Trace {
            self.tape.placeholder(tensor.shape(), false)
        } else {
            self.tape.constant(tensor.clone())
        };
        self.tape.label(
            v,
            LayerLabel {
                name: name.into(),
                kind: LayerKind::Input,
                geometry: None,
            },
        );
        v
    }

    /// Gradient of each parameter after `tape.backward`; `None` when unused.
    pub fn param_grads(&self) -> Vec<Option<&[T]>> {
        self.bound.iter().map(|b| b.and_then(|v| self.tape.grad(v))).collect()
    }

    pub fn bound_param(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    pub fn label(&mut self, v: Var, name: String, kind: LayerKind) {
        self.tape.label(v, LayerLabel { name, kind, geometry: None });
    }

    /// Fails with the stage name when a computed value is not finite.
    pub fn ensure_finite(&self, v: Var, stage: &str) -> Result<()> {
        if self.mode != Mode::Trace && !self.tape.all_finite(v) {
            return Err(Error::NonFinite { stage: stage.into() });
        }
        Ok(())
    }
}

/// A (de)convolution layer with bias and optional ReLU. The name may contain
/// `#`, replaced at call time by a branch or stack tag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvLayer {
    pub name: String,
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: ParamId,
    pub relu: bool,
}

impl ConvLayer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, spec: ConvSpec, relu: bool) -> Result<Self> {
        spec.validate().map_err(|e| e.in_layer(name))?;
        let base = name.replace('#', "");
        let base = base.trim_end_matches('_');
        let weight = store.register(alloc::format!("{base}.weight"), spec.weight_shape(), Init::Uniform { fan_in: spec.fan_in() });
        let bias = store.register(alloc::format!("{base}.bias"), Shape::vector(spec.out_channels), Init::Uniform { fan_in: spec.fan_in() });
        Ok(ConvLayer {
            name: name.into(),
            spec,
            weight,
            bias,
            relu,
        })
    }

    pub fn tagged_name(&self, tag: &str) -> String {
        self.name.replace('#', tag)
    }

    pub fn parameter_count(&self) -> usize {
        self.spec.parameter_count()
    }

    pub fn forward<T: Scalar>(&self, fwd: &mut Forward<'_, T>, x: Var, tag: &str) -> Result<Var> {
        let name = self.tagged_name(tag);
        let w = fwd.param(self.weight);
        let b = fwd.param(self.bias);
        let y = if self.spec.transposed {
            fwd.tape.transpose_conv2d(x, w, b, &self.spec)
        } else {
            fwd.tape.conv2d(x, w, b, &self.spec)
        }
        .map_err(|e| e.in_layer(&name))?;
        fwd.ensure_finite(y, &name)?;
        let kind = if self.spec.transposed { LayerKind::Deconv } else { LayerKind::Conv };
        fwd.tape.label(
            y,
            LayerLabel {
                name,
                kind,
                geometry: Some((self.spec.kernel, self.spec.stride, self.spec.padding)),
            },
        );
        if self.relu {
            fwd.tape.relu(y)
        } else {
            Ok(y)
        }
    }
}
