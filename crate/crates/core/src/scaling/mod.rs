//! Compound scaling of a staged baseline and network construction.

mod network;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{HeadConfig, MbConvConfig};

pub use network::{build_network, check_network_gradients, Block, Network};

pub const ARCH_FORMAT: u32 = 1;
pub const PRESET_NAMES: [&str; 9] = ["toy", "b0", "b1", "b2", "b3", "b4", "b5", "b6", "b7"];

const B0_TOML: &str = include_str!("../../data/efficientnet_b0.toml");
const TOY_TOML: &str = include_str!("../../data/toy.toml");

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingCoefficients {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub phi: f64,
}

impl Default for ScalingCoefficients {
    fn default() -> Self {
        ScalingCoefficients {
            alpha: 1.2,
            beta: 1.1,
            gamma: 1.15,
            phi: 0.0,
        }
    }
}

impl ScalingCoefficients {
    pub fn with_phi(phi: f64) -> Self {
        ScalingCoefficients {
            phi,
            ..Default::default()
        }
    }

    /// `(depth, width, resolution)` multipliers.
    pub fn multipliers(&self) -> (f64, f64, f64) {
        (self.alpha.powf(self.phi), self.beta.powf(self.phi), self.gamma.powf(self.phi))
    }

    /// Expected FLOPS growth per unit of phi.
    pub fn flops_base(&self) -> f64 {
        self.alpha * self.beta * self.beta * self.gamma * self.gamma
    }
}

/// `alpha * beta^2 * gamma^2 - 2`. The caller decides what is close enough.
pub fn check_constraint(c: &ScalingCoefficients) -> Result<f64> {
    for (name, v) in [("alpha", c.alpha), ("beta", c.beta), ("gamma", c.gamma)] {
        if !(v >= 1.0) || !v.is_finite() {
            return Err(invalid!("{name} = {v} must be a finite value >= 1"));
        }
    }
    Ok(c.flops_base() - 2.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    /// Convolution followed by ReLU.
    Conv,
    Mbconv,
    /// Two convolutions around an identity skip.
    Residual,
}

fn one() -> usize {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub kind: BlockKind,
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
    pub layers: usize,
    #[serde(default = "one")]
    pub expansion: usize,
}

fn default_unit() -> usize {
    8
}

/// A concrete architecture: input size, stages and head. Baselines and
/// scaled variants share this type and its text form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaledArch {
    pub format: u32,
    pub name: String,
    pub resolution: usize,
    #[serde(default = "default_unit")]
    pub channel_unit: usize,
    pub se_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaling: Option<ScalingCoefficients>,
    pub stem: StageSpec,
    #[serde(rename = "stage")]
    pub stages: Vec<StageSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top: Option<StageSpec>,
    pub head: HeadConfig,
}

/// Nearest multiple of `unit`, halves rounded up, never below `unit`.
pub fn round_to_unit(x: f64, unit: usize) -> usize {
    let u = unit as f64;
    (((x / u) + 0.5).floor() as usize * unit).max(unit)
}

impl ScaledArch {
    pub fn efficientnet_b0() -> Self {
        Self::from_toml(B0_TOML).expect("bundled baseline parses")
    }

    pub fn toy() -> Self {
        Self::from_toml(TOY_TOML).expect("bundled toy baseline parses")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let arch: ScaledArch = toml::from_str(text).map_err(|e| Error::Config(format!("architecture: {e}")))?;
        arch.validate()?;
        Ok(arch)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("architectures serialize")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Stem, stages and top in execution order.
    pub fn groups(&self) -> Vec<(String, StageSpec)> {
        let mut out = vec![("stem".to_string(), self.stem)];
        out.extend(self.stages.iter().enumerate().map(|(i, s)| (format!("stage{}", i + 1), *s)));
        if let Some(top) = self.top {
            out.push(("top".to_string(), top));
        }
        out
    }

    pub fn output_channels(&self) -> usize {
        self.top.unwrap_or(*self.stages.last().unwrap_or(&self.stem)).channels
    }

    /// Smallest input side that survives every stride.
    pub fn min_resolution(&self) -> usize {
        self.groups().iter().map(|(_, s)| s.stride).product()
    }

    pub fn with_head(mut self, head: HeadConfig) -> Self {
        self.head = head;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != ARCH_FORMAT {
            return Err(Error::Config(format!("unsupported architecture format {}", self.format)));
        }
        if self.channel_unit == 0 {
            return Err(Error::Config("channel_unit must be positive".into()));
        }
        if !(self.se_fraction > 0.0 && self.se_fraction <= 1.0) {
            return Err(Error::Config(format!("se_fraction {} not in (0, 1]", self.se_fraction)));
        }
        if self.stages.is_empty() {
            return Err(Error::Config("architecture has no stages".into()));
        }
        self.head.validate()?;
        let mut channels = 3;
        for (name, s) in self.groups() {
            let bad = |msg: String| Error::Config(format!("{name}: {msg}"));
            if s.layers == 0 {
                return Err(bad("layers must be at least 1".into()));
            }
            if s.kernel % 2 == 0 {
                return Err(bad(format!("kernel {} must be odd", s.kernel)));
            }
            if !matches!(s.stride, 1 | 2) {
                return Err(bad(format!("stride {} must be 1 or 2", s.stride)));
            }
            if s.channels == 0 || s.channels % self.channel_unit != 0 {
                return Err(bad(format!("channels {} not a positive multiple of {}", s.channels, self.channel_unit)));
            }
            if s.expansion == 0 {
                return Err(bad("expansion must be positive".into()));
            }
            if s.kind == BlockKind::Residual && (s.stride != 1 || s.channels != channels) {
                return Err(bad(format!(
                    "residual stages keep shape: need stride 1 and {channels} channels"
                )));
            }
            channels = s.channels;
        }
        if self.resolution < self.min_resolution() {
            return Err(invalid!(
                "resolution {} is below the minimum {} for this stride layout",
                self.resolution,
                self.min_resolution()
            ));
        }
        Ok(())
    }

    /// The MBConv config of block `j` in a stage fed `in_channels`.
    pub(crate) fn mbconv_config(&self, s: &StageSpec, in_channels: usize, j: usize) -> MbConvConfig {
        MbConvConfig {
            in_channels: if j == 0 { in_channels } else { s.channels },
            out_channels: s.channels,
            expansion_ratio: s.expansion,
            kernel_size: s.kernel,
            stride: if j == 0 { s.stride } else { 1 },
            se_fraction: self.se_fraction,
            se_variant: Default::default(),
        }
    }
}

/// Depth, width and resolution scaled by `c`. Stages take
/// `ceil(d * layers)` blocks; stem and top are only widened.
pub fn scale_arch(baseline: &ScaledArch, c: &ScalingCoefficients) -> Result<ScaledArch> {
    check_constraint(c)?;
    if !(c.phi >= 0.0) || !c.phi.is_finite() {
        return Err(invalid!("phi = {} must be finite and nonnegative", c.phi));
    }
    baseline.validate()?;
    let (d, w, r) = c.multipliers();
    let unit = baseline.channel_unit;
    let widen = |s: &StageSpec| StageSpec {
        channels: round_to_unit(w * s.channels as f64, unit),
        ..*s
    };
    let mut out = baseline.clone();
    out.stem = widen(&baseline.stem);
    out.top = baseline.top.as_ref().map(widen);
    out.stages = baseline
        .stages
        .iter()
        .map(|s| StageSpec {
            layers: (d * s.layers as f64).ceil() as usize,
            ..widen(s)
        })
        .collect();
    // Residual stages must keep their input width; follow the widened input.
    let mut prev = out.stem.channels;
    for s in &mut out.stages {
        if s.kind == BlockKind::Residual {
            s.channels = prev;
        }
        prev = s.channels;
    }
    out.resolution = (r * baseline.resolution as f64).round() as usize;
    if c.phi != 0.0 {
        out.scaling = Some(*c);
    }
    if out.resolution < out.min_resolution() {
        return Err(invalid!(
            "scaled resolution {} is below the minimum {}",
            out.resolution,
            out.min_resolution()
        ));
    }
    out.validate()?;
    Ok(out)
}

/// Same-padded output side.
fn out_side(h: usize, stride: usize) -> usize {
    h.div_ceil(stride)
}

/// FLOPs (2 per multiply-accumulate) of a same-padded `k x k` convolution
/// on an `h x w x c_in` input.
pub fn conv_flops(h: usize, w: usize, k: usize, stride: usize, c_in: usize, c_out: usize) -> u64 {
    let (oh, ow) = (out_side(h, stride) as u64, out_side(w, stride) as u64);
    2 * oh * ow * (k * k * c_in * c_out) as u64
}

/// Multiply-accumulates of convolutions, SE and dense layers, times two.
/// Biases, activations and pooling are not counted.
pub fn estimate_flops(arch: &ScaledArch) -> u64 {
    let mut macs: u64 = 0;
    let (mut h, mut w) = (arch.resolution as u64, arch.resolution as u64);
    let mut c_in = 3u64;
    for (_, s) in arch.groups() {
        let k2 = (s.kernel * s.kernel) as u64;
        let c_out = s.channels as u64;
        for j in 0..s.layers {
            let stride = if j == 0 { s.stride } else { 1 } as u64;
            let (oh, ow) = (out_side(h as usize, stride as usize) as u64, out_side(w as usize, stride as usize) as u64);
            match s.kind {
                BlockKind::Conv => macs += conv_flops(h as usize, w as usize, s.kernel, stride as usize, c_in as usize, c_out as usize) / 2,
                BlockKind::Residual => macs += 2 * oh * ow * k2 * c_out * c_out,
                BlockKind::Mbconv => {
                    let cfg = arch.mbconv_config(&s, c_in as usize, j);
                    let ce = cfg.expanded_channels() as u64;
                    let m = cfg.se_config().bottleneck as u64;
                    if cfg.expansion_ratio != 1 {
                        macs += h * w * c_in * ce;
                    }
                    macs += oh * ow * k2 * ce;
                    macs += 2 * ce * m;
                    macs += oh * ow * ce * c_out;
                }
            }
            h = oh;
            w = ow;
            c_in = c_out;
        }
    }
    let hd = arch.head;
    macs += c_in * hd.hidden_units as u64 + (hd.hidden_units * hd.outputs) as u64;
    2 * macs
}

/// `toy`, or `b0`..`b7`: the baseline scaled with phi = 0..7 and the default
/// coefficients, at 224 pixels for b0-b3 and 256 for b4-b7.
pub fn preset(name: &str) -> Result<ScaledArch> {
    if name == "toy" {
        return Ok(ScaledArch::toy());
    }
    let phi = name
        .strip_prefix('b')
        .and_then(|d| d.parse::<u32>().ok())
        .filter(|&p| p <= 7)
        .ok_or_else(|| invalid!("unknown preset {name:?}; expected one of {PRESET_NAMES:?}"))?;
    let mut arch = scale_arch(&ScaledArch::efficientnet_b0(), &ScalingCoefficients::with_phi(phi as f64))?;
    arch.name = format!("efficientnet-b{phi}");
    arch.resolution = if phi <= 3 { 224 } else { 256 };
    Ok(arch)
}

#[cfg(test)]
mod tests;
