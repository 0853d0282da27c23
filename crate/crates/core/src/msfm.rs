//! Multi-scale feature module: the Siamese encoder with additive fusion at
//! stacks 1, 2, 3 and 5 and the three feature products built from it.
//!
//! Layer names follow the reference layer table; `#` becomes `a` for the
//! left view and `b` for the right view. Both views share all weights.

use crate::config::WidthMultiplier;
use crate::conv::ConvSpec;
use crate::error::Result;
use crate::params::{ConvLayer, Forward, ParamStore};
use crate::tape::{LayerKind, Var};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MsfmConfig {
    pub width: WidthMultiplier,
    pub relu_on_reducers: bool,
}

/// Channel widths after applying the multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MsfmWidths {
    pub c16: usize,
    pub c32: usize,
    pub c64: usize,
    pub c128: usize,
    pub c256: usize,
    pub c512: usize,
}

impl MsfmWidths {
    pub fn new(m: WidthMultiplier) -> Result<Self> {
        Ok(MsfmWidths {
            c16: m.channels(16)?,
            c32: m.channels(32)?,
            c64: m.channels(64)?,
            c128: m.channels(128)?,
            c256: m.channels(256)?,
            c512: m.channels(512)?,
        })
    }

    /// Local Prior Feature width.
    pub fn prior(&self) -> usize {
        self.c64
    }

    /// Local Details width.
    pub fn details(&self) -> usize {
        self.c32
    }

    /// Compressed feature width.
    pub fn compressed(&self) -> usize {
        self.c16
    }
}

#[derive(Debug, Clone)]
pub struct Msfm {
    pub widths: MsfmWidths,
    conv1: ConvLayer,
    conv1_1: ConvLayer,
    conv2: ConvLayer,
    conv2_1: ConvLayer,
    conv3: ConvLayer,
    conv3_1: ConvLayer,
    conv4: ConvLayer,
    conv4_1: ConvLayer,
    conv5: ConvLayer,
    conv5_1: ConvLayer,
    down1: ConvLayer,
    up5: ConvLayer,
    prior_reduce: ConvLayer,
    up2: ConvLayer,
    up1: ConvLayer,
    details_reduce: ConvLayer,
    compress: ConvLayer,
}

/// Everything later modules read from the feature module.
#[derive(Debug, Clone, Copy)]
pub struct MsfmOutputs {
    /// 1/8 resolution, left view.
    pub local_prior_feature: Var,
    /// Right-view counterpart, only computed when a routing switch needs it.
    pub local_prior_feature_right: Option<Var>,
    pub local_details_left: Var,
    pub local_details_right: Var,
    pub compressed_left: Var,
    pub compressed_right: Var,
    /// element_wise_3a / element_wise_3b, the correlation inputs.
    pub middle_left: Var,
    pub middle_right: Var,
    /// element_wise_2a, decoder skip at 1/4.
    pub skip_quarter_left: Var,
    /// element_wise_1a, decoder skip at 1/2.
    pub skip_half_left: Var,
}

struct Branch {
    fused1: Var,
    fused2: Var,
    fused3: Var,
    conv5_1: Var,
    conv5: Var,
    details: Var,
    compressed: Var,
}

impl Msfm {
    pub fn new<T: Scalar>(config: MsfmConfig, store: &mut ParamStore<T>) -> Result<Self> {
        let c = MsfmWidths::new(config.width)?;
        let reducer_relu = config.relu_on_reducers;
        let mut layer = |name: &str, spec: ConvSpec, relu: bool| ConvLayer::new(store, name, spec, relu);
        Ok(Msfm {
            widths: c,
            conv1: layer("conv_1#", ConvSpec::same(7, 2, 3, c.c32), true)?,
            conv1_1: layer("conv_1#_1", ConvSpec::same(3, 1, c.c32, c.c32), true)?,
            conv2: layer("conv_2#", ConvSpec::same(5, 2, c.c32, c.c64), true)?,
            conv2_1: layer("conv_2#_1", ConvSpec::same(3, 1, c.c64, c.c64), true)?,
            conv3: layer("conv_3#", ConvSpec::same(5, 2, c.c64, c.c128), true)?,
            conv3_1: layer("conv_3#_1", ConvSpec::same(3, 1, c.c128, c.c128), true)?,
            conv4: layer("conv_4#", ConvSpec::same(3, 2, c.c128, c.c256), true)?,
            conv4_1: layer("conv_4#_1", ConvSpec::same(3, 1, c.c256, c.c256), true)?,
            conv5: layer("conv_5#", ConvSpec::same(3, 2, c.c256, c.c512), true)?,
            conv5_1: layer("conv_5#_1", ConvSpec::same(3, 1, c.c512, c.c512), true)?,
            down1: layer("down_sample_1#", ConvSpec::conv(3, 4, 1, c.c32, c.c32), true)?,
            up5: layer("upsample_5#", ConvSpec::deconv(4, 4, 0, c.c512, c.c512), true)?,
            prior_reduce: layer(
                "conv_convat1_5_3#",
                ConvSpec::conv(1, 1, 0, c.c32 + c.c512 + c.c128, c.c64),
                reducer_relu,
            )?,
            up2: layer("upsample_2#", ConvSpec::deconv(8, 4, 2, c.c64, c.c32), true)?,
            up1: layer("upsample_1#", ConvSpec::deconv(4, 2, 1, c.c32, c.c32), true)?,
            details_reduce: layer("conv_convat_#", ConvSpec::conv(1, 1, 0, 2 * c.c32, c.c32), reducer_relu)?,
            compress: layer("conv_1#_r", ConvSpec::same(3, 1, c.c32, c.c16), true)?,
        })
    }

    pub fn layers(&self) -> [&ConvLayer; 17] {
        [
            &self.conv1,
            &self.conv1_1,
            &self.conv2,
            &self.conv2_1,
            &self.conv3,
            &self.conv3_1,
            &self.conv4,
            &self.conv4_1,
            &self.conv5,
            &self.conv5_1,
            &self.down1,
            &self.up5,
            &self.prior_reduce,
            &self.up2,
            &self.up1,
            &self.details_reduce,
            &self.compress,
        ]
    }

    /// Learnable scalars of the module (shared between both views).
    pub fn parameter_count(&self) -> usize {
        self.layers().iter().map(|l| l.parameter_count()).sum()
    }

    fn fuse<T: Scalar>(fwd: &mut Forward<'_, T>, a: Var, b: Var, name: &str, tag: &str) -> Result<Var> {
        let v = fwd.tape.add(a, b)?;
        fwd.label(v, name.replace('#', tag), LayerKind::Add);
        Ok(v)
    }

    fn branch<T: Scalar>(&self, fwd: &mut Forward<'_, T>, image: Var, tag: &str) -> Result<Branch> {
        let c1 = self.conv1.forward(fwd, image, tag)?;
        let c1_1 = self.conv1_1.forward(fwd, c1, tag)?;
        let fused1 = Self::fuse(fwd, c1, c1_1, "element_wise_1#", tag)?;
        let c2 = self.conv2.forward(fwd, c1_1, tag)?;
        let c2_1 = self.conv2_1.forward(fwd, c2, tag)?;
        let fused2 = Self::fuse(fwd, c2, c2_1, "element_wise_2#", tag)?;
        let c3 = self.conv3.forward(fwd, c2_1, tag)?;
        let c3_1 = self.conv3_1.forward(fwd, c3, tag)?;
        let fused3 = Self::fuse(fwd, c3, c3_1, "element_wise_3#", tag)?;
        let c4 = self.conv4.forward(fwd, c3_1, tag)?;
        let c4_1 = self.conv4_1.forward(fwd, c4, tag)?;
        let c5 = self.conv5.forward(fwd, c4_1, tag)?;
        let c5_1 = self.conv5_1.forward(fwd, c5, tag)?;

        let u2 = self.up2.forward(fwd, fused2, tag)?;
        let u1 = self.up1.forward(fwd, fused1, tag)?;
        let cat = fwd.tape.concat_channels(&[u1, u2])?;
        let details = self.details_reduce.forward(fwd, cat, tag)?;
        let compressed = self.compress.forward(fwd, c1, tag)?;
        Ok(Branch {
            fused1,
            fused2,
            fused3,
            conv5: c5,
            conv5_1: c5_1,
            details,
            compressed,
        })
    }

    fn prior<T: Scalar>(&self, fwd: &mut Forward<'_, T>, b: &Branch, tag: &str) -> Result<Var> {
        let fused5 = Self::fuse(fwd, b.conv5, b.conv5_1, "element_wise_5#", tag)?;
        let down = self.down1.forward(fwd, b.fused1, tag)?;
        let up = self.up5.forward(fwd, fused5, tag)?;
        let cat = fwd.tape.concat_channels(&[down, up, b.fused3])?;
        self.prior_reduce.forward(fwd, cat, tag)
    }

    /// Runs both views. `right_prior` additionally builds the right-view
    /// Local Prior Feature.
    pub fn forward<T: Scalar>(
        &self,
        fwd: &mut Forward<'_, T>,
        left: Var,
        right: Var,
        right_prior: bool,
    ) -> Result<MsfmOutputs> {
        let l = self.branch(fwd, left, "a")?;
        let prior = self.prior(fwd, &l, "a")?;
        let r = self.branch(fwd, right, "b")?;
        let prior_right = if right_prior { Some(self.prior(fwd, &r, "b")?) } else { None };
        Ok(MsfmOutputs {
            local_prior_feature: prior,
            local_prior_feature_right: prior_right,
            local_details_left: l.details,
            local_details_right: r.details,
            compressed_left: l.compressed,
            compressed_right: r.compressed,
            middle_left: l.fused3,
            middle_right: r.fused3,
            skip_quarter_left: l.fused2,
            skip_half_left: l.fused1,
        })
    }
}
