use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Published channel ladders at full scale.
pub const ENCODER_CHANNELS: [usize; 5] = [32, 64, 128, 196, 448];
pub const DECODER_CHANNELS: [usize; 4] = [196, 128, 64, 48];
pub const FUSION_CHANNELS: usize = 448;
pub const INPUT_SIZE: usize = 448;
pub const ATTENTION_LAYERS: usize = 4;
/// Smallest channel count a scaled config may use.
pub const MIN_CHANNELS: usize = 4;

/// Which line branches feed the flow head, and whether they are fused.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Both decoders with the HV fusion module.
    Full,
    /// Both decoders; `F_h`, `F_v` are concatenated without fusion.
    NoFusion,
    /// Horizontal-line decoder only.
    HOnly,
    /// Vertical-line decoder only.
    VOnly,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::NoFusion, Variant::HOnly, Variant::VOnly, Variant::Full];

    pub fn has_h(self) -> bool {
        self != Variant::VOnly
    }

    pub fn has_v(self) -> bool {
        self != Variant::HOnly
    }

    pub fn fuses(self) -> bool {
        self == Variant::Full
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::NoFusion => "no_fusion",
            Variant::HOnly => "h_only",
            Variant::VOnly => "v_only",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no_fusion" => Ok(Variant::NoFusion),
            "h_only" => Ok(Variant::HOnly),
            "v_only" => Ok(Variant::VOnly),
            _ => Err(Error::invalid(format!(
                "unknown variant '{s}' (full, no_fusion, h_only, v_only)"
            ))),
        }
    }
}

/// Architecture knobs. `Default` is the published full-size network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub input_size: usize,
    pub encoder_channels: [usize; 5],
    pub decoder_channels: [usize; 4],
    /// Residual self-attention blocks after the encoder.
    pub attention_layers: usize,
    /// Channels of `F_h` / `F_v`.
    pub fusion_channels: usize,
    /// Divisor already applied to the channel counts above.
    pub scale_factor: usize,
    /// Adds fixed 2-D sinusoidal encodings to bottleneck attention inputs.
    pub positional_encoding: bool,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: INPUT_SIZE,
            encoder_channels: ENCODER_CHANNELS,
            decoder_channels: DECODER_CHANNELS,
            attention_layers: ATTENTION_LAYERS,
            fusion_channels: FUSION_CHANNELS,
            scale_factor: 1,
            positional_encoding: false,
            variant: Variant::Full,
        }
    }
}

fn scaled(c: usize, factor: usize) -> usize {
    (c / factor).max(MIN_CHANNELS)
}

impl ModelConfig {
    /// Published channel ladders divided by `scale_factor` (floored, at least 4).
    pub fn scaled(input_size: usize, scale_factor: usize) -> Self {
        let f = scale_factor.max(1);
        ModelConfig {
            input_size,
            encoder_channels: ENCODER_CHANNELS.map(|c| scaled(c, f)),
            decoder_channels: DECODER_CHANNELS.map(|c| scaled(c, f)),
            fusion_channels: scaled(FUSION_CHANNELS, f),
            scale_factor: f,
            ..Default::default()
        }
    }

    /// Desk-scale network used by tests and the toy experiments.
    pub fn toy(input_size: usize, scale_factor: usize) -> Self {
        Self::scaled(input_size, scale_factor)
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    /// Hidden width of the flow head.
    pub fn flow_hidden(&self) -> usize {
        (self.fusion_channels / 2).max(MIN_CHANNELS)
    }

    /// Spatial side of `F_h` / `F_v`.
    pub fn fusion_size(&self) -> usize {
        self.input_size / 8
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(16) {
            return Err(Error::invalid(format!(
                "input_size {} must be a positive multiple of 16",
                self.input_size
            )));
        }
        let all = self
            .encoder_channels
            .iter()
            .chain(&self.decoder_channels)
            .chain(std::iter::once(&self.fusion_channels));
        if let Some(c) = all.clone().find(|&&c| c < MIN_CHANNELS) {
            return Err(Error::invalid(format!("channel count {c} below {MIN_CHANNELS}")));
        }
        Ok(())
    }
}
