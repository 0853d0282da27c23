//! Network configuration and the channel-width multiplier.

use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};

/// Rational factor in (0, 1] applied to every reference channel count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WidthMultiplier {
    num: u32,
    den: u32,
}

impl WidthMultiplier {
    pub const FULL: WidthMultiplier = WidthMultiplier { num: 1, den: 1 };

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 || num > den {
            return Err(Error::config("width_multiplier", alloc::format!("{num}/{den} is outside (0, 1]")));
        }
        let g = gcd(num, den);
        Ok(WidthMultiplier { num: num / g, den: den / g })
    }

    pub fn num(&self) -> u32 {
        self.num
    }

    pub fn den(&self) -> u32 {
        self.den
    }

    /// `ceil(channels · m)`, rejecting widths that collapse below two.
    pub fn channels(&self, reference: usize) -> Result<usize> {
        let scaled = (reference * self.num as usize).div_ceil(self.den as usize);
        if scaled < 2 {
            return Err(Error::config(
                "width_multiplier",
                alloc::format!("{reference} channels scaled by {self} collapse to {scaled}"),
            ));
        }
        Ok(scaled)
    }
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl Default for WidthMultiplier {
    fn default() -> Self {
        Self::FULL
    }
}

impl fmt::Display for WidthMultiplier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for WidthMultiplier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config("width_multiplier", alloc::format!("cannot parse {s:?}"));
        let s = s.trim();
        if let Some((n, d)) = s.split_once('/') {
            let n = n.trim().parse().map_err(|_| bad())?;
            let d = d.trim().parse().map_err(|_| bad())?;
            return WidthMultiplier::new(n, d);
        }
        if let Ok(n) = s.parse::<u32>() {
            return WidthMultiplier::new(n, 1);
        }
        let v: f64 = s.parse().map_err(|_| bad())?;
        if !(v > 0.0 && v <= 1.0) {
            return Err(bad());
        }
        // Accept exact reciprocals of integers and dyadic fractions.
        for den in [1u32, 2, 4, 8, 16, 32, 64, 3, 5, 6, 10, 12, 100] {
            let num = v * den as f64;
            if (num - num_traits::Float::round(num)).abs() < 1e-9 {
                return WidthMultiplier::new(num_traits::Float::round(num) as u32, den);
            }
        }
        Err(bad())
    }
}

/// Which fused features feed which sub-task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureRouting {
    /// Concatenate the Local Prior Feature with the correlation; otherwise the
    /// plain 1/8-scale left feature is used.
    pub local_prior_in_cost: bool,
    /// Use Local Details for the error map and refinement input; otherwise the
    /// Local Prior Features of both views, upsampled to full resolution.
    pub local_details_in_guidance: bool,
    /// Feed the upsampled Local Prior Feature to every refinement stack.
    pub local_prior_in_sgrm: bool,
}

impl Default for FeatureRouting {
    fn default() -> Self {
        FeatureRouting {
            local_prior_in_cost: true,
            local_details_in_guidance: true,
            local_prior_in_sgrm: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetConfig {
    pub width: WidthMultiplier,
    /// Correlation displacement range at 1/8 scale.
    pub max_disp: usize,
    /// Correlation displacement range of the compressed 1/2-scale features.
    pub fine_disp: usize,
    pub stack_count: usize,
    pub guidance: bool,
    pub share_stacks: bool,
    /// Adds a supervised 1/64-scale prediction at the hourglass bottleneck.
    pub coarsest_prediction: bool,
    pub routing: FeatureRouting,
    /// Apply ReLU after the 1×1 fusion reducers as well.
    pub relu_on_reducers: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            width: WidthMultiplier::FULL,
            max_disp: 40,
            fine_disp: 10,
            stack_count: 3,
            guidance: true,
            share_stacks: false,
            coarsest_prediction: false,
            routing: FeatureRouting::default(),
            relu_on_reducers: false,
        }
    }
}

impl NetConfig {
    /// Small configuration for single-core experiments.
    pub fn desk() -> Self {
        NetConfig {
            width: WidthMultiplier { num: 1, den: 8 },
            max_disp: 8,
            fine_disp: 4,
            ..NetConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.stack_count) {
            return Err(Error::config("sgrm", alloc::format!("stack count {} outside 1..=3", self.stack_count)));
        }
        self.width.channels(16)?;
        Ok(())
    }

    pub fn check_resolution(&self, h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || !h.is_multiple_of(64) || !w.is_multiple_of(64) {
            return Err(Error::config("input", alloc::format!("resolution {h}x{w} is not divisible by 64")));
        }
        if self.max_disp >= w / 8 {
            return Err(Error::config(
                "correlation_1d",
                alloc::format!("max displacement {} >= 1/8-scale width {}", self.max_disp, w / 8),
            ));
        }
        if self.fine_disp >= w / 2 {
            return Err(Error::config(
                "correlation_fine",
                alloc::format!("fine displacement {} >= 1/2-scale width {}", self.fine_disp, w / 2),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_scaling() {
        let m: WidthMultiplier = "1/8".parse().unwrap();
        assert_eq!(m.channels(32).unwrap(), 4);
        assert_eq!(m.channels(672).unwrap(), 84);
        assert_eq!(m.channels(16).unwrap(), 2);
        let tiny = WidthMultiplier::new(1, 16).unwrap();
        assert!(tiny.channels(16).is_err());
        assert_eq!("0.25".parse::<WidthMultiplier>().unwrap(), WidthMultiplier::new(1, 4).unwrap());
        assert_eq!("1".parse::<WidthMultiplier>().unwrap(), WidthMultiplier::FULL);
        assert!("2".parse::<WidthMultiplier>().is_err());
        assert_eq!(alloc::format!("{}", WidthMultiplier::new(2, 16).unwrap()), "1/8");
    }

    #[test]
    fn resolution_rules() {
        let c = NetConfig::desk();
        assert!(c.check_resolution(64, 128).is_ok());
        assert!(c.check_resolution(60, 128).is_err());
        let wide = NetConfig { max_disp: 16, ..NetConfig::desk() };
        assert!(wide.check_resolution(64, 128).is_err());
    }
}
