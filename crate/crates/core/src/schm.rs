//! Skip-connection hourglass: cost volume at 1/8 scale, an encoder down to
//! 1/64 and a decoder that predicts disparity at every scale back to full
//! resolution.

use alloc::vec::Vec;

use crate::config::WidthMultiplier;
use crate::conv::ConvSpec;
use crate::correlation::CorrSpec;
use crate::error::{Error, Result};
use crate::params::{ConvLayer, Forward, ParamStore};
use crate::stereo::ScaledPrediction;
use crate::tape::{LayerKind, Var};
use crate::tensor::Scalar;

/// Decoder scales, coarse to fine, and their reference up-convolution widths.
const DECODER: [(u32, usize); 6] = [(32, 256), (16, 128), (8, 64), (4, 32), (2, 32), (1, 32)];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SchmConfig {
    pub width: WidthMultiplier,
    /// Channels of the cost volume (correlation plus context feature).
    pub cost_channels: usize,
    /// Channels of the skips joined at 1/4, 1/2 and full resolution.
    pub skip_quarter: usize,
    pub skip_half: usize,
    pub skip_full: usize,
    pub coarsest_prediction: bool,
}

/// Correlation of the 1/8-scale features followed by the context feature.
pub fn build_cost_volume<T: Scalar>(
    fwd: &mut Forward<'_, T>,
    left: Var,
    right: Var,
    context: Var,
    spec: &CorrSpec,
) -> Result<Var> {
    let corr = fwd.tape.correlation_1d(left, right, spec).map_err(|e| e.in_layer("schm_corr"))?;
    fwd.label(corr, "schm_corr".into(), LayerKind::Corr);
    fwd.tape.concat_channels(&[corr, context]).map_err(|e| e.in_layer("schm_cost"))
}

#[derive(Debug, Clone)]
struct Stage {
    scale: u32,
    up: ConvLayer,
    iconv: ConvLayer,
    pr: ConvLayer,
}

#[derive(Debug, Clone)]
pub struct Schm {
    encoder: [ConvLayer; 6],
    pr64: Option<ConvLayer>,
    stages: Vec<Stage>,
}

#[derive(Debug, Clone)]
pub struct SchmOutputs {
    /// Full-resolution prediction of the last decoder stage.
    pub initial: Var,
    /// Every supervised prediction, coarse to fine; the last is `initial`.
    pub predictions: Vec<ScaledPrediction>,
}

/// Skip features for the decoder, in the order the stages consume them.
#[derive(Debug, Clone, Copy)]
pub struct SchmSkips {
    pub quarter: Var,
    pub half: Var,
    pub full: Var,
}

impl Schm {
    pub fn new<T: Scalar>(config: SchmConfig, store: &mut ParamStore<T>) -> Result<Self> {
        let m = config.width;
        let (c128, c256, c512) = (m.channels(128)?, m.channels(256)?, m.channels(512)?);
        let mut conv = |name: &str, k, s, cin, cout, relu| ConvLayer::new(store, name, ConvSpec::same(k, s, cin, cout), relu);
        let encoder = [
            conv("schm_conv16", 3, 2, config.cost_channels, c128, true)?,
            conv("schm_conv16_1", 3, 1, c128, c128, true)?,
            conv("schm_conv32", 3, 2, c128, c256, true)?,
            conv("schm_conv32_1", 3, 1, c256, c256, true)?,
            conv("schm_conv64", 3, 2, c256, c512, true)?,
            conv("schm_conv64_1", 3, 1, c512, c512, true)?,
        ];
        let pr64 = if config.coarsest_prediction {
            Some(conv("schm_pr64", 3, 1, c512, 1, false)?)
        } else {
            None
        };
        let mut stages = Vec::with_capacity(DECODER.len());
        let mut below = c512;
        let mut has_pred = pr64.is_some();
        for (scale, reference) in DECODER {
            let c = m.channels(reference)?;
            let skip = match scale {
                32 => c256,
                16 => c128,
                8 => config.cost_channels,
                4 => config.skip_quarter,
                2 => config.skip_half,
                _ => config.skip_full,
            };
            let cat = c + skip + usize::from(has_pred);
            let up = ConvLayer::new(store, &alloc::format!("schm_up{scale}"), ConvSpec::deconv(4, 2, 1, below, c), true)?;
            let iconv = ConvLayer::new(store, &alloc::format!("schm_iconv{scale}"), ConvSpec::same(3, 1, cat, c), true)?;
            let pr = ConvLayer::new(store, &alloc::format!("schm_pr{scale}"), ConvSpec::same(3, 1, c, 1), false)?;
            stages.push(Stage { scale, up, iconv, pr });
            below = c;
            has_pred = true;
        }
        Ok(Schm { encoder, pr64, stages })
    }

    pub fn layers(&self) -> Vec<&ConvLayer> {
        let mut out: Vec<&ConvLayer> = self.encoder.iter().collect();
        out.extend(self.pr64.iter());
        for s in &self.stages {
            out.extend([&s.up, &s.iconv, &s.pr]);
        }
        out
    }

    /// The linear disparity heads, coarse to fine.
    pub fn prediction_heads(&self) -> Vec<&ConvLayer> {
        self.pr64.iter().chain(self.stages.iter().map(|s| &s.pr)).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().iter().map(|l| l.parameter_count()).sum()
    }

    pub fn forward<T: Scalar>(&self, fwd: &mut Forward<'_, T>, cost: Var, skips: SchmSkips) -> Result<SchmOutputs> {
        let mut x = cost;
        let mut encoded = Vec::with_capacity(6);
        for layer in &self.encoder {
            x = layer.forward(fwd, x, "")?;
            encoded.push(x);
        }
        let mut predictions = Vec::with_capacity(7);
        let mut pred = match &self.pr64 {
            Some(head) => {
                let p = head.forward(fwd, x, "")?;
                predictions.push(ScaledPrediction { var: p, scale: 64 });
                Some(p)
            }
            None => None,
        };
        for stage in &self.stages {
            let skip = match stage.scale {
                32 => encoded[3],
                16 => encoded[1],
                8 => cost,
                4 => skips.quarter,
                2 => skips.half,
                _ => skips.full,
            };
            let up = stage.up.forward(fwd, x, "")?;
            let mut parts = alloc::vec![up, skip];
            if let Some(p) = pred {
                let u = fwd.tape.upsample_nearest(p, 2)?;
                let u = fwd.tape.scale(u, T::of(2.0))?;
                parts.push(u);
            }
            let name = stage.iconv.tagged_name("");
            let cat = fwd.tape.concat_channels(&parts).map_err(|e| e.in_layer(&name))?;
            x = stage.iconv.forward(fwd, cat, "")?;
            let p = stage.pr.forward(fwd, x, "")?;
            predictions.push(ScaledPrediction { var: p, scale: stage.scale });
            pred = Some(p);
        }
        let initial = pred.ok_or_else(|| Error::Unsupported("hourglass without decoder".into()))?;
        Ok(SchmOutputs { initial, predictions })
    }
}
