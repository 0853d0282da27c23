//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node holding its value, the operands it read
//! and the rule to push gradients back. [`Tape::backward`] walks the nodes in
//! exact reverse order of recording and accumulates gradients additively, so a
//! value consumed by several operations receives the sum of their
//! contributions.
//!
//! A tape created with [`Tape::tracing`] only propagates shapes: kernels are
//! skipped and values stay empty. Layer labels attached during tracing are
//! what the wiring dump reads.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU32, Ordering};

use crate::conv::{self, ConvSpec};
use crate::correlation::{self, CorrSpec};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};
use crate::warp;

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

/// What a labelled node represents in the wiring dump.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Input,
    Conv,
    Deconv,
    Add,
    Corr,
    Warp,
    ErrorMap,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Input => "Input",
            LayerKind::Conv => "Conv",
            LayerKind::Deconv => "Deconv",
            LayerKind::Add => "Add",
            LayerKind::Corr => "Corr",
            LayerKind::Warp => "Warp",
            LayerKind::ErrorMap => "ErrorMap",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerLabel {
    pub name: String,
    pub kind: LayerKind,
    /// Kernel, stride and padding for (de)convolutions.
    pub geometry: Option<(usize, usize, usize)>,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv { input: Var, weight: Var, bias: Var, spec: ConvSpec },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AbsDiff(Var, Var),
    Sum(Var),
    Concat(Vec<Var>),
    Correlation { left: Var, right: Var, max_disp: usize },
    Warp { source: Var, disparity: Var },
    UpsampleNearest { input: Var, factor: usize },
    MaskedL1 { pred: Var, target: Vec<T>, mask: Vec<bool>, count: usize },
    WeightedSum(Vec<(Var, T)>),
}

impl<T> Op<T> {
    /// Operands in the order they were read. Weights and biases are included.
    fn operands(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Conv { input, weight, bias, .. } => vec![*input, *weight, *bias],
            Op::Relu(a) | Op::Scale(a, _) | Op::Sum(a) => vec![*a],
            Op::UpsampleNearest { input, .. } => vec![*input],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AbsDiff(a, b) => vec![*a, *b],
            Op::Concat(parts) => parts.clone(),
            Op::Correlation { left, right, .. } => vec![*left, *right],
            Op::Warp { source, disparity } => vec![*source, *disparity],
            Op::MaskedL1 { pred, .. } => vec![*pred],
            Op::WeightedSum(terms) => terms.iter().map(|(v, _)| *v).collect(),
        }
    }

    /// Operands that carry data through the network (no parameters).
    fn data_operands(&self) -> Vec<Var> {
        match self {
            Op::Conv { input, .. } => vec![*input],
            other => other.operands(),
        }
    }
}

/// Ordered record of operations with their values and gradients.
#[derive(Debug)]
pub struct Tape<T: Scalar> {
    id: u32,
    tracing: bool,
    shapes: Vec<Shape>,
    values: Vec<Vec<T>>,
    grads: Vec<Option<Vec<T>>>,
    requires: Vec<bool>,
    ops: Vec<Op<T>>,
    labels: Vec<Option<LayerLabel>>,
    scratch: Vec<T>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            tracing: false,
            shapes: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            requires: Vec::new(),
            ops: Vec::new(),
            labels: Vec::new(),
            scratch: Vec::new(),
        }
    }

    /// A tape that propagates shapes only.
    pub fn tracing() -> Self {
        Tape {
            tracing: true,
            ..Self::new()
        }
    }

    pub fn is_tracing(&self) -> bool {
        self.tracing
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index() >= self.ops.len() {
            return Err(Error::Backward(alloc::format!(
                "value {:?} was not recorded on this tape",
                v
            )));
        }
        Ok(v.index())
    }

    fn push(&mut self, shape: Shape, value: Vec<T>, op: Op<T>) -> Var {
        let requires = op.operands().iter().any(|v| self.requires[v.index()]);
        let index = self.ops.len() as u32;
        self.shapes.push(shape);
        self.values.push(if self.tracing { Vec::new() } else { value });
        self.grads.push(None);
        self.requires.push(requires);
        self.ops.push(if requires || self.tracing { op } else { Op::Leaf });
        self.labels.push(None);
        Var { tape: self.id, index }
    }

    /// Records an input value. Gradients are only produced for values that
    /// require them (directly or through an operand).
    pub fn leaf(&mut self, tensor: Tensor<T>, requires_grad: bool) -> Var {
        let shape = tensor.shape();
        let v = self.push(shape, tensor.into_vec(), Op::Leaf);
        self.requires[v.index()] = requires_grad;
        v
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor, false)
    }

    /// Leaf known only by shape; on a non-tracing tape it is zero-filled.
    pub fn placeholder(&mut self, shape: Shape, requires_grad: bool) -> Var {
        let data = if self.tracing { Vec::new() } else { vec![T::zero(); shape.len()] };
        let v = self.push(shape, data, Op::Leaf);
        self.requires[v.index()] = requires_grad;
        v
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.shapes[v.index()]
    }

    /// Raw values; empty on a tracing tape.
    pub fn data(&self, v: Var) -> &[T] {
        &self.values[v.index()]
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        Tensor::from_vec(self.shape(v), self.values[v.index()].clone())
            .expect("tape values always match their shapes")
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.values[v.index()].first().copied().unwrap_or_else(T::nan)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.index()]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.index()].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        self.grad(v)
            .map(|g| Tensor::from_vec(self.shape(v), g.to_vec()).expect("gradient matches shape"))
    }

    pub fn all_finite(&self, v: Var) -> bool {
        self.values[v.index()].iter().all(|x| x.is_finite())
    }

    pub fn label(&mut self, v: Var, label: LayerLabel) {
        self.labels[v.index()] = Some(label);
    }

    pub fn label_of(&self, v: Var) -> Option<&LayerLabel> {
        self.labels[v.index()].as_ref()
    }

    /// Labelled nodes in recording order.
    pub fn labelled(&self) -> impl Iterator<Item = (Var, &LayerLabel)> + '_ {
        self.labels.iter().enumerate().filter_map(move |(i, l)| {
            l.as_ref().map(|l| {
                (
                    Var {
                        tape: self.id,
                        index: i as u32,
                    },
                    l,
                )
            })
        })
    }

    /// Nearest labelled ancestors reached through the data operands of `v`,
    /// skipping unlabelled intermediate nodes.
    pub fn labelled_inputs(&self, v: Var) -> Vec<Var> {
        let mut found = Vec::new();
        let mut stack: Vec<Var> = self.structural_operands(v);
        stack.reverse();
        while let Some(u) = stack.pop() {
            if self.labels[u.index()].is_some() {
                if !found.contains(&u) {
                    found.push(u);
                }
            } else {
                let mut next = self.structural_operands(u);
                next.reverse();
                stack.extend(next);
            }
        }
        found
    }

    fn structural_operands(&self, v: Var) -> Vec<Var> {
        // Non-requiring nodes drop their op on a gradient tape; tracing tapes
        // keep them because every leaf there requires grad.
        self.ops[v.index()].data_operands()
    }

    /// Shape of the first data operand, used for the dump's input resolution.
    pub fn primary_input_shape(&self, v: Var) -> Option<Shape> {
        self.ops[v.index()].data_operands().first().map(|u| self.shape(*u))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, alloc::format!("{sa} vs {sb}")));
        }
        Ok(sa)
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        if self.tracing {
            return Vec::new();
        }
        self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect()
    }

    fn check_conv(&self, x: Var, w: Var, b: Var, spec: &ConvSpec, transposed: bool) -> Result<Shape> {
        for v in [x, w, b] {
            self.check(v)?;
        }
        let op = if transposed { "transpose_conv2d" } else { "conv2d" };
        if spec.transposed != transposed {
            return Err(Error::config(op, "spec.transposed does not match the operation"));
        }
        let os = spec.output_shape(self.shape(x))?;
        if self.shape(w) != spec.weight_shape() {
            return Err(Error::shape(
                op,
                alloc::format!("weights {} expected {}", self.shape(w), spec.weight_shape()),
            ));
        }
        if self.shape(b).len() != spec.out_channels {
            return Err(Error::shape(
                op,
                alloc::format!("bias {} expected {} values", self.shape(b), spec.out_channels),
            ));
        }
        Ok(os)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: &ConvSpec) -> Result<Var> {
        let os = self.check_conv(x, w, b, spec, false)?;
        let value = if self.tracing {
            Vec::new()
        } else {
            let mut buf = core::mem::take(&mut self.scratch);
            let out = conv::conv2d_forward(spec, self.data(x), self.shape(x), self.data(w), self.data(b), os, &mut buf);
            self.scratch = buf;
            out
        };
        Ok(self.push(os, value, Op::Conv { input: x, weight: w, bias: b, spec: *spec }))
    }

    pub fn transpose_conv2d(&mut self, x: Var, w: Var, b: Var, spec: &ConvSpec) -> Result<Var> {
        let os = self.check_conv(x, w, b, spec, true)?;
        let value = if self.tracing {
            Vec::new()
        } else {
            let mut buf = core::mem::take(&mut self.scratch);
            let out = conv::deconv2d_forward(spec, self.data(x), self.shape(x), self.data(w), self.data(b), os, &mut buf);
            self.scratch = buf;
            out
        };
        Ok(self.push(os, value, Op::Conv { input: x, weight: w, bias: b, spec: *spec }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = if self.tracing {
            Vec::new()
        } else {
            self.data(x).iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect()
        };
        Ok(self.push(self.shape(x), value, Op::Relu(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let s = self.same_shape("add", a, b)?;
        let value = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(s, value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let s = self.same_shape("sub", a, b)?;
        let value = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(s, value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let s = self.same_shape("mul", a, b)?;
        let value = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(s, value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        self.check(x)?;
        let value = if self.tracing { Vec::new() } else { self.data(x).iter().map(|&v| v * factor).collect() };
        Ok(self.push(self.shape(x), value, Op::Scale(x, factor)))
    }

    /// Elementwise `|a - b|`; the derivative at zero is taken as zero.
    pub fn abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let s = self.same_shape("abs_diff", a, b)?;
        let value = self.zip_map(a, b, |x, y| (x - y).abs());
        Ok(self.push(s, value, Op::AbsDiff(a, b)))
    }

    /// Sum of all elements as a 1×1×1×1 value.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = if self.tracing { Vec::new() } else { vec![self.data(x).iter().copied().sum()] };
        Ok(self.push(Shape::scalar(), value, Op::Sum(x)))
    }

    /// Concatenates along channels in argument order.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat_channels", "no inputs"))?;
        for &p in parts {
            self.check(p)?;
        }
        let s0 = self.shape(first);
        for (i, &p) in parts.iter().enumerate() {
            let sp = self.shape(p);
            if !sp.same_spatial(&s0) {
                return Err(Error::shape(
                    "concat_channels",
                    alloc::format!("part 0 is {s0} but part {i} is {sp}"),
                ));
            }
        }
        let c: usize = parts.iter().map(|&p| self.shape(p).c).sum();
        let os = s0.with_c(c);
        let mut value = Vec::new();
        if !self.tracing {
            value.reserve(os.len());
            for n in 0..s0.n {
                for &p in parts {
                    let sp = self.shape(p);
                    value.extend_from_slice(&self.data(p)[n * sp.item()..(n + 1) * sp.item()]);
                }
            }
        }
        Ok(self.push(os, value, Op::Concat(parts.to_vec())))
    }

    pub fn correlation_1d(&mut self, left: Var, right: Var, spec: &CorrSpec) -> Result<Var> {
        self.check(left)?;
        self.check(right)?;
        let os = spec.output_shape(self.shape(left), self.shape(right))?;
        let value = if self.tracing {
            Vec::new()
        } else {
            correlation::forward(self.data(left), self.data(right), self.shape(left), spec.max_displacement)
        };
        Ok(self.push(
            os,
            value,
            Op::Correlation {
                left,
                right,
                max_disp: spec.max_displacement,
            },
        ))
    }

    /// Samples `source` at `(x - d(x, y), y)` with bilinear interpolation.
    pub fn warp_horizontal(&mut self, source: Var, disparity: Var) -> Result<Var> {
        self.check(source)?;
        self.check(disparity)?;
        let (ss, ds) = (self.shape(source), self.shape(disparity));
        if ds.c != 1 || !ss.same_spatial(&ds) {
            return Err(Error::shape(
                "warp_horizontal",
                alloc::format!("source {ss} with disparity {ds}"),
            ));
        }
        let value = if self.tracing { Vec::new() } else { warp::forward(self.data(source), ss, self.data(disparity)) };
        Ok(self.push(ss, value, Op::Warp { source, disparity }))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        self.check(x)?;
        if factor == 0 {
            return Err(Error::config("upsample_nearest", "factor must be positive"));
        }
        let s = self.shape(x);
        let os = Shape::new(s.n, s.c, s.h * factor, s.w * factor);
        let mut value = Vec::new();
        if !self.tracing {
            value.reserve(os.len());
            let src = self.data(x);
            for plane in src.chunks(s.plane().max(1)) {
                for y in 0..os.h {
                    let row = &plane[(y / factor) * s.w..(y / factor + 1) * s.w];
                    for &v in row {
                        value.extend(core::iter::repeat_n(v, factor));
                    }
                }
            }
        }
        Ok(self.push(os, value, Op::UpsampleNearest { input: x, factor }))
    }

    /// Mean of `|pred - target|` over pixels where `mask` is set.
    pub fn masked_l1(&mut self, pred: Var, target: &[T], mask: &[bool]) -> Result<Var> {
        self.check(pred)?;
        let s = self.shape(pred);
        if target.len() != s.len() || mask.len() != s.len() {
            return Err(Error::shape(
                "l1_loss",
                alloc::format!("prediction {s} with {} targets and {} mask entries", target.len(), mask.len()),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::NoValidPixels { op: "l1_loss" });
        }
        let value = if self.tracing {
            Vec::new()
        } else {
            let total: f64 = self
                .data(pred)
                .iter()
                .zip(target)
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|((&p, &t), _)| (p - t).abs().as_f64())
                .sum();
            vec![T::of(total / count as f64)]
        };
        Ok(self.push(
            Shape::scalar(),
            value,
            Op::MaskedL1 {
                pred,
                target: target.to_vec(),
                mask: mask.to_vec(),
                count,
            },
        ))
    }

    /// `Σ weight_i · term_i` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        if terms.is_empty() {
            return Err(Error::shape("weighted_sum", "no terms"));
        }
        for &(v, _) in terms {
            self.check(v)?;
            if self.shape(v) != Shape::scalar() {
                return Err(Error::shape("weighted_sum", alloc::format!("term of shape {}", self.shape(v))));
            }
        }
        let value = if self.tracing {
            Vec::new()
        } else {
            vec![terms.iter().map(|&(v, w)| self.scalar_value(v) * w).sum()]
        };
        Ok(self.push(Shape::scalar(), value, Op::WeightedSum(terms.to_vec())))
    }

    fn grad_buf<'g>(grads: &'g mut [Option<Vec<T>>], shapes: &[Shape], v: Var) -> &'g mut [T] {
        grads[v.index()].get_or_insert_with(|| vec![T::zero(); shapes[v.index()].len()])
    }

    /// Populates gradients of every value that requires them and is reachable
    /// from `loss`, which must be a 1×1×1×1 value recorded on this tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.check(loss)?;
        if self.tracing {
            return Err(Error::Backward("tracing tape carries no values".into()));
        }
        if self.shape(loss) != Shape::scalar() {
            return Err(Error::Backward(alloc::format!("loss must be scalar, got {}", self.shape(loss))));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[root] = Some(vec![T::one()]);
        for i in (0..=root).rev() {
            if !self.requires[i] {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.requires[v.index()]
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        let Tape {
            shapes,
            values,
            grads,
            requires,
            ops,
            scratch,
            ..
        } = self;
        let want = |v: &Var| requires[v.index()];
        match &ops[i] {
            Op::Leaf => {}
            Op::Conv { input, weight, bias, spec } => {
                let (xs, os) = (shapes[input.index()], shapes[i]);
                let x = &values[input.index()];
                let w = &values[weight.index()];
                let mut gx = want(input).then(|| grads[input.index()].take().unwrap_or_else(|| vec![T::zero(); xs.len()]));
                let mut gw = want(weight)
                    .then(|| grads[weight.index()].take().unwrap_or_else(|| vec![T::zero(); shapes[weight.index()].len()]));
                let mut gb = want(bias)
                    .then(|| grads[bias.index()].take().unwrap_or_else(|| vec![T::zero(); shapes[bias.index()].len()]));
                if spec.transposed {
                    conv::deconv2d_backward(spec, x, xs, w, g, os, gx.as_deref_mut(), gw.as_deref_mut(), gb.as_deref_mut(), scratch);
                } else {
                    conv::conv2d_backward(spec, x, xs, w, g, os, gx.as_deref_mut(), gw.as_deref_mut(), gb.as_deref_mut(), scratch);
                }
                // Restore in reverse so aliasing operands (same var twice) keep
                // every contribution.
                for (v, buf) in [(*bias, gb), (*weight, gw), (*input, gx)] {
                    if let Some(buf) = buf {
                        Self::merge(grads, v, buf);
                    }
                }
            }
            Op::Relu(a) => {
                if want(a) {
                    let x = &values[a.index()];
                    let ga = Self::grad_buf(grads, shapes, *a);
                    for ((o, &gv), &xv) in ga.iter_mut().zip(g).zip(x) {
                        if xv > T::zero() {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if want(v) {
                        Self::grad_buf(grads, shapes, *v).iter_mut().zip(g).for_each(|(o, &gv)| *o += gv);
                    }
                }
            }
            Op::Sub(a, b) => {
                if want(a) {
                    Self::grad_buf(grads, shapes, *a).iter_mut().zip(g).for_each(|(o, &gv)| *o += gv);
                }
                if want(b) {
                    Self::grad_buf(grads, shapes, *b).iter_mut().zip(g).for_each(|(o, &gv)| *o -= gv);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (values[a.index()].clone(), values[b.index()].clone());
                if want(a) {
                    let ga = Self::grad_buf(grads, shapes, *a);
                    for ((o, &gv), &y) in ga.iter_mut().zip(g).zip(&vb) {
                        *o += gv * y;
                    }
                }
                if want(b) {
                    let gb = Self::grad_buf(grads, shapes, *b);
                    for ((o, &gv), &x) in gb.iter_mut().zip(g).zip(&va) {
                        *o += gv * x;
                    }
                }
            }
            Op::Scale(a, factor) => {
                if want(a) {
                    let f = *factor;
                    Self::grad_buf(grads, shapes, *a).iter_mut().zip(g).for_each(|(o, &gv)| *o += gv * f);
                }
            }
            Op::AbsDiff(a, b) => {
                let signs: Vec<T> = values[a.index()]
                    .iter()
                    .zip(&values[b.index()])
                    .map(|(&x, &y)| sign(x - y))
                    .collect();
                if want(a) {
                    let ga = Self::grad_buf(grads, shapes, *a);
                    for ((o, &gv), &s) in ga.iter_mut().zip(g).zip(&signs) {
                        *o += gv * s;
                    }
                }
                if want(b) {
                    let gb = Self::grad_buf(grads, shapes, *b);
                    for ((o, &gv), &s) in gb.iter_mut().zip(g).zip(&signs) {
                        *o -= gv * s;
                    }
                }
            }
            Op::Sum(a) => {
                if want(a) {
                    let gv = g[0];
                    Self::grad_buf(grads, shapes, *a).iter_mut().for_each(|o| *o += gv);
                }
            }
            Op::Concat(parts) => {
                let os = shapes[i];
                let mut offset = 0;
                for p in parts {
                    let sp = shapes[p.index()];
                    if want(p) {
                        let gp = Self::grad_buf(grads, shapes, *p);
                        for n in 0..os.n {
                            let src = &g[n * os.item() + offset..n * os.item() + offset + sp.item()];
                            for (o, &gv) in gp[n * sp.item()..(n + 1) * sp.item()].iter_mut().zip(src) {
                                *o += gv;
                            }
                        }
                    }
                    offset += sp.item();
                }
            }
            Op::Correlation { left, right, max_disp } => {
                let s = shapes[left.index()];
                let mut gl = want(left).then(|| grads[left.index()].take().unwrap_or_else(|| vec![T::zero(); s.len()]));
                let mut gr = want(right).then(|| grads[right.index()].take().unwrap_or_else(|| vec![T::zero(); s.len()]));
                correlation::backward(
                    &values[left.index()],
                    &values[right.index()],
                    s,
                    *max_disp,
                    g,
                    gl.as_deref_mut(),
                    gr.as_deref_mut(),
                );
                for (v, buf) in [(*right, gr), (*left, gl)] {
                    if let Some(buf) = buf {
                        Self::merge(grads, v, buf);
                    }
                }
            }
            Op::Warp { source, disparity } => {
                let s = shapes[source.index()];
                let mut gs = want(source).then(|| grads[source.index()].take().unwrap_or_else(|| vec![T::zero(); s.len()]));
                let mut gd = want(disparity)
                    .then(|| grads[disparity.index()].take().unwrap_or_else(|| vec![T::zero(); shapes[disparity.index()].len()]));
                warp::backward(
                    &values[source.index()],
                    s,
                    &values[disparity.index()],
                    g,
                    gs.as_deref_mut(),
                    gd.as_deref_mut(),
                );
                for (v, buf) in [(*disparity, gd), (*source, gs)] {
                    if let Some(buf) = buf {
                        Self::merge(grads, v, buf);
                    }
                }
            }
            Op::UpsampleNearest { input, factor } => {
                if want(input) {
                    let (s, f) = (shapes[input.index()], *factor);
                    let os = shapes[i];
                    let gi = Self::grad_buf(grads, shapes, *input);
                    for (pi, plane) in g.chunks(os.plane().max(1)).enumerate() {
                        let dst = &mut gi[pi * s.plane()..(pi + 1) * s.plane()];
                        for y in 0..os.h {
                            let drow = &mut dst[(y / f) * s.w..(y / f + 1) * s.w];
                            for (x, &gv) in plane[y * os.w..(y + 1) * os.w].iter().enumerate() {
                                drow[x / f] += gv;
                            }
                        }
                    }
                }
            }
            Op::MaskedL1 { pred, target, mask, count } => {
                if want(pred) {
                    let scale = g[0] / T::of(*count as f64);
                    let p = &values[pred.index()];
                    let gp = grads[pred.index()].get_or_insert_with(|| vec![T::zero(); p.len()]);
                    for (((o, &pv), &t), &m) in gp.iter_mut().zip(p).zip(target).zip(mask) {
                        if m {
                            *o += scale * sign(pv - t);
                        }
                    }
                }
            }
            Op::WeightedSum(terms) => {
                for (v, w) in terms {
                    if want(v) {
                        Self::grad_buf(grads, shapes, *v)[0] += g[0] * *w;
                    }
                }
            }
        }
    }

    fn merge(grads: &mut [Option<Vec<T>>], v: Var, buf: Vec<T>) {
        match &mut grads[v.index()] {
            Some(existing) => existing.iter_mut().zip(&buf).for_each(|(o, &b)| *o += b),
            slot @ None => *slot = Some(buf),
        }
    }
}

#[allow(dead_code)]
fn _assert_send<T: Scalar>() {
    fn is_send<S: Send>() {}
    is_send::<Tape<T>>();
}

impl<T: Scalar> Tape<T> {
    /// Whether `v` would receive a gradient during backward.
    pub fn tracks(&self, v: Var) -> bool {
        self.wants(v)
    }
}
