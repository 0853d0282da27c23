//! The assembled stereo network.

use alloc::vec::Vec;

use crate::config::NetConfig;
use crate::correlation::CorrSpec;
use crate::error::{Error, Result};
use crate::msfm::{Msfm, MsfmConfig, MsfmOutputs, MsfmWidths};
use crate::params::{Forward, ParamStore};
use crate::schm::{build_cost_volume, Schm, SchmConfig, SchmOutputs, SchmSkips};
use crate::sgrm::{Sgrm, SgrmConfig, SgrmInputs, SgrmOutputs};
use crate::stereo::ScaledPrediction;
use crate::tape::Var;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct Network {
    pub config: NetConfig,
    pub msfm: Msfm,
    pub schm: Schm,
    pub sgrm: Sgrm,
}

#[derive(Debug, Clone)]
pub struct NetOutputs {
    pub features: MsfmOutputs,
    pub cost_volume: Var,
    pub schm: SchmOutputs,
    pub sgrm: SgrmOutputs,
}

impl NetOutputs {
    /// Final refined full-resolution disparity.
    pub fn disparity(&self) -> Var {
        self.sgrm.output()
    }

    /// Hourglass predictions followed by every refinement stack output.
    pub fn supervised(&self) -> Vec<ScaledPrediction> {
        let mut out = self.schm.predictions.clone();
        out.extend(self.sgrm.disparities.iter().map(|&var| ScaledPrediction { var, scale: 1 }));
        out
    }
}

impl Network {
    /// Builds the layer graph and registers every parameter in `store`.
    pub fn new<T: Scalar>(config: NetConfig, store: &mut ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let msfm = Msfm::new(
            MsfmConfig {
                width: config.width,
                relu_on_reducers: config.relu_on_reducers,
            },
            store,
        )?;
        let w: MsfmWidths = msfm.widths;
        let routing = config.routing;
        let context = if routing.local_prior_in_cost { w.prior() } else { w.c128 };
        let schm = Schm::new(
            SchmConfig {
                width: config.width,
                cost_channels: CorrSpec::new(config.max_disp).channels() + context,
                skip_quarter: w.c64,
                skip_half: w.c32,
                skip_full: w.details(),
                coarsest_prediction: config.coarsest_prediction,
            },
            store,
        )?;
        let sgrm = Sgrm::new(
            SgrmConfig {
                width: config.width,
                stack_count: config.stack_count,
                guidance: config.guidance,
                fine_disp: config.fine_disp,
                share_stacks: config.share_stacks,
                feature_channels: if routing.local_details_in_guidance { w.details() } else { w.prior() },
                extra_channels: if routing.local_prior_in_sgrm { w.prior() } else { 0 },
            },
            store,
        )?;
        Ok(Network { config, msfm, schm, sgrm })
    }

    pub fn parameter_count(&self) -> usize {
        self.msfm.parameter_count() + self.schm.parameter_count() + self.sgrm.parameter_count()
    }

    /// Equal weights, normalized by the number of supervised outputs.
    pub fn loss_weights<T: Scalar>(&self) -> Vec<T> {
        let n = self.schm.prediction_heads().len() + self.config.stack_count;
        alloc::vec![T::of(1.0 / n as f64); n]
    }

    /// Records the whole forward pass on `fwd`. Images are N×3×H×W with
    /// intensities in `[0, 1]`; they are mapped to `[-1, 1]` before the first
    /// convolution.
    pub fn forward<T: Scalar>(&self, fwd: &mut Forward<'_, T>, left: &Tensor<T>, right: &Tensor<T>) -> Result<NetOutputs> {
        let (ls, rs) = (left.shape(), right.shape());
        if ls != rs || ls.c != 3 {
            return Err(Error::shape("network", alloc::format!("images {ls} and {rs} must match with 3 channels")));
        }
        self.config.check_resolution(ls.h, ls.w)?;
        let l = fwd.input(&normalize(left), "image_left");
        let r = fwd.input(&normalize(right), "image_right");
        self.forward_vars(fwd, l, r)
    }

    pub fn forward_vars<T: Scalar>(&self, fwd: &mut Forward<'_, T>, left: Var, right: Var) -> Result<NetOutputs> {
        let routing = self.config.routing;
        let need_right_prior = !routing.local_details_in_guidance;
        let f = self.msfm.forward(fwd, left, right, need_right_prior)?;

        let context = if routing.local_prior_in_cost { f.local_prior_feature } else { f.middle_left };
        let cost = build_cost_volume(fwd, f.middle_left, f.middle_right, context, &CorrSpec::new(self.config.max_disp))?;
        let schm = self.schm.forward(
            fwd,
            cost,
            SchmSkips {
                quarter: f.skip_quarter_left,
                half: f.skip_half_left,
                full: f.local_details_left,
            },
        )?;

        let (feature_left, feature_right) = if routing.local_details_in_guidance {
            (f.local_details_left, f.local_details_right)
        } else {
            let right_prior = f.local_prior_feature_right.expect("computed when routing needs it");
            (
                fwd.tape.upsample_nearest(f.local_prior_feature, 8)?,
                fwd.tape.upsample_nearest(right_prior, 8)?,
            )
        };
        let extra = if routing.local_prior_in_sgrm {
            Some(fwd.tape.upsample_nearest(f.local_prior_feature, 8)?)
        } else {
            None
        };
        let sgrm = self.sgrm.forward(
            fwd,
            SgrmInputs {
                initial: schm.initial,
                feature_left,
                feature_right,
                compressed_left: f.compressed_left,
                compressed_right: f.compressed_right,
                extra,
            },
        )?;
        Ok(NetOutputs {
            features: f,
            cost_volume: cost,
            schm,
            sgrm,
        })
    }
}

fn normalize<T: Scalar>(image: &Tensor<T>) -> Tensor<T> {
    let (two, one) = (T::of(2.0), T::one());
    image.map(|v| two * v - one)
}
