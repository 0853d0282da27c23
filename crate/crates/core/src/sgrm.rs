//! Stacked guidance residual refinement. Each stack warps the right feature
//! by the current disparity, takes the absolute error against the left
//! feature as guidance and adds a predicted residual to the disparity.

use alloc::vec::Vec;

use crate::config::WidthMultiplier;
use crate::conv::ConvSpec;
use crate::correlation::CorrSpec;
use crate::error::{Error, Result};
use crate::params::{ConvLayer, Forward, ParamStore};
use crate::tape::{LayerKind, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SgrmConfig {
    pub width: WidthMultiplier,
    pub stack_count: usize,
    pub guidance: bool,
    pub fine_disp: usize,
    pub share_stacks: bool,
    /// Channels of the guidance feature pair (and of the left detail input).
    pub feature_channels: usize,
    /// Channels of an optional extra full-resolution context input.
    pub extra_channels: usize,
}

impl SgrmConfig {
    /// Channels of the concatenated refinement input.
    pub fn input_channels(&self) -> usize {
        1 + 2 * self.feature_channels + self.fine_disp + 1 + self.extra_channels
    }
}

/// `|left − warp(right, disparity)|`, differentiable in all three inputs.
pub fn compute_guidance<T: Scalar>(fwd: &mut Forward<'_, T>, disparity: Var, left: Var, right: Var, tag: &str) -> Result<Var> {
    let warped = fwd.tape.warp_horizontal(right, disparity)?;
    fwd.label(warped, alloc::format!("sgrm_warp{tag}"), LayerKind::Warp);
    let err = fwd.tape.abs_diff(left, warped)?;
    fwd.label(err, alloc::format!("sgrm_error{tag}"), LayerKind::ErrorMap);
    Ok(err)
}

/// One 3-down/3-up residual hourglass.
#[derive(Debug, Clone)]
pub struct Grm {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub conv3: ConvLayer,
    pub upconv3: ConvLayer,
    pub upconv2: ConvLayer,
    pub upconv1: ConvLayer,
    pub head: ConvLayer,
}

impl Grm {
    fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, config: &SgrmConfig) -> Result<Self> {
        let m = config.width;
        let (c32, c64, c128) = (m.channels(32)?, m.channels(64)?, m.channels(128)?);
        let cin = config.input_channels();
        let mut layer = |suffix: &str, spec, relu| ConvLayer::new(store, &alloc::format!("{prefix}_{suffix}"), spec, relu);
        Ok(Grm {
            conv1: layer("conv1", ConvSpec::same(3, 2, cin, c32), true)?,
            conv2: layer("conv2", ConvSpec::same(3, 2, c32, c64), true)?,
            conv3: layer("conv3", ConvSpec::same(3, 2, c64, c128), true)?,
            upconv3: layer("upconv3", ConvSpec::deconv(4, 2, 1, c128, c64), true)?,
            upconv2: layer("upconv2", ConvSpec::deconv(4, 2, 1, 2 * c64, c32), true)?,
            upconv1: layer("upconv1", ConvSpec::deconv(4, 2, 1, 2 * c32, c32), true)?,
            head: layer("res", ConvSpec::same(3, 1, c32 + cin, 1), false)?,
        })
    }

    pub fn layers(&self) -> [&ConvLayer; 7] {
        [&self.conv1, &self.conv2, &self.conv3, &self.upconv3, &self.upconv2, &self.upconv1, &self.head]
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().iter().map(|l| l.parameter_count()).sum()
    }

    /// Residual disparity for an assembled input.
    pub fn forward<T: Scalar>(&self, fwd: &mut Forward<'_, T>, input: Var, tag: &str) -> Result<Var> {
        let e1 = self.conv1.forward(fwd, input, tag)?;
        let e2 = self.conv2.forward(fwd, e1, tag)?;
        let e3 = self.conv3.forward(fwd, e2, tag)?;
        let d3 = self.upconv3.forward(fwd, e3, tag)?;
        let cat = fwd.tape.concat_channels(&[d3, e2])?;
        let d2 = self.upconv2.forward(fwd, cat, tag)?;
        let cat = fwd.tape.concat_channels(&[d2, e1])?;
        let d1 = self.upconv1.forward(fwd, cat, tag)?;
        let cat = fwd.tape.concat_channels(&[d1, input])?;
        self.head.forward(fwd, cat, tag)
    }
}

#[derive(Debug, Clone)]
pub struct Sgrm {
    pub config: SgrmConfig,
    modules: Vec<Grm>,
}

/// Full-resolution features the refinement reads.
#[derive(Debug, Clone, Copy)]
pub struct SgrmInputs {
    pub initial: Var,
    pub feature_left: Var,
    pub feature_right: Var,
    /// Compressed 1/2-scale features for the fine correlation.
    pub compressed_left: Var,
    pub compressed_right: Var,
    pub extra: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct SgrmOutputs {
    /// Disparity after each stack; the last is the network output.
    pub disparities: Vec<Var>,
    pub residuals: Vec<Var>,
    /// Guidance fed to each stack (zeros when disabled).
    pub guidance: Vec<Var>,
    pub fine_correlation: Var,
}

impl SgrmOutputs {
    pub fn output(&self) -> Var {
        *self.disparities.last().expect("at least one stack")
    }
}

impl Sgrm {
    pub fn new<T: Scalar>(config: SgrmConfig, store: &mut ParamStore<T>) -> Result<Self> {
        if !(1..=3).contains(&config.stack_count) {
            return Err(Error::config("sgrm", alloc::format!("stack count {} outside 1..=3", config.stack_count)));
        }
        let modules = if config.share_stacks {
            alloc::vec![Grm::new(store, "grm#", &config)?]
        } else {
            (1..=config.stack_count)
                .map(|i| Grm::new(store, &alloc::format!("grm{i}"), &config))
                .collect::<Result<_>>()?
        };
        Ok(Sgrm { config, modules })
    }

    pub fn module(&self, stack: usize) -> &Grm {
        &self.modules[stack.min(self.modules.len() - 1)]
    }

    pub fn modules(&self) -> &[Grm] {
        &self.modules
    }

    pub fn parameter_count(&self) -> usize {
        self.modules.iter().map(Grm::parameter_count).sum()
    }

    pub fn forward<T: Scalar>(&self, fwd: &mut Forward<'_, T>, inputs: SgrmInputs) -> Result<SgrmOutputs> {
        let spec = CorrSpec::new(self.config.fine_disp);
        let fine = fwd
            .tape
            .correlation_1d(inputs.compressed_left, inputs.compressed_right, &spec)
            .map_err(|e| e.in_layer("sgrm_fine_corr"))?;
        fwd.label(fine, "sgrm_fine_corr".into(), LayerKind::Corr);
        let fine_up = fwd.tape.upsample_nearest(fine, 2)?;

        let shape = fwd.tape.shape(inputs.feature_left);
        let zeros = if self.config.guidance {
            None
        } else {
            let z = if fwd.tape.is_tracing() {
                fwd.tape.placeholder(shape, false)
            } else {
                fwd.tape.constant(Tensor::zeros(shape))
            };
            Some(z)
        };

        let mut d = inputs.initial;
        let mut out = SgrmOutputs {
            disparities: Vec::with_capacity(self.config.stack_count),
            residuals: Vec::with_capacity(self.config.stack_count),
            guidance: Vec::with_capacity(self.config.stack_count),
            fine_correlation: fine,
        };
        for i in 0..self.config.stack_count {
            let tag = alloc::format!("{}", i + 1);
            let guidance = match zeros {
                Some(z) => z,
                None => compute_guidance(fwd, d, inputs.feature_left, inputs.feature_right, &tag)?,
            };
            let mut parts = alloc::vec![d, guidance, inputs.feature_left, fine_up];
            parts.extend(inputs.extra);
            let input = fwd.tape.concat_channels(&parts)?;
            let residual = self.module(i).forward(fwd, input, &tag)?;
            let next = fwd.tape.add(d, residual)?;
            fwd.label(next, alloc::format!("sgrm_disp{tag}"), LayerKind::Add);
            fwd.ensure_finite(next, &alloc::format!("sgrm_disp{tag}"))?;
            out.guidance.push(guidance);
            out.residuals.push(residual);
            out.disparities.push(next);
            d = next;
        }
        Ok(out)
    }
}

/// Zeroes the residual heads so every stack passes its input through.
pub fn zero_heads<T: Scalar>(sgrm: &Sgrm, store: &mut ParamStore<T>) {
    for m in sgrm.modules() {
        store.zero(m.head.weight);
        store.zero(m.head.bias);
    }
}
