use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ini::Section;
use crate::nn::DEPTH;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Plain single-pass U-Net.
    UNet,
    /// Whole U-Net re-run with the previous mask concatenated to the image.
    RecSimple,
    /// Convolutional GRU in place of the bottleneck.
    RecMiddle,
    /// Convolutional GRU after the U-Net, before the head.
    RecLast,
    /// Single-gated recurrent unit over levels `l..4`.
    Sru,
    /// Dual-gated recurrent unit over levels `l..4`.
    Dru,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::UNet,
        Variant::RecSimple,
        Variant::RecMiddle,
        Variant::RecLast,
        Variant::Sru,
        Variant::Dru,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::UNet => "unet",
            Variant::RecSimple => "rec-simple",
            Variant::RecMiddle => "rec-middle",
            Variant::RecLast => "rec-last",
            Variant::Sru => "sru",
            Variant::Dru => "dru",
        }
    }

    /// Whether the recurrence level parameter applies.
    pub fn uses_level(self) -> bool {
        matches!(self, Variant::Sru | Variant::Dru)
    }

    fn default_feedback(self) -> bool {
        matches!(self, Variant::RecSimple | Variant::Sru | Variant::Dru)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == norm || v.name().replace('-', "") == norm)
            .ok_or_else(|| {
                Error::config(
                    "model.variant",
                    format!(
                        "unknown variant `{}` (expected one of unet, rec-simple, rec-middle, rec-last, sru, dru)",
                        s
                    ),
                )
            })
    }
}

/// Architecture descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Recurrence level `0..=4`; only meaningful for SRU/DRU.
    pub level: usize,
    pub iterations: usize,
    pub base_channels: usize,
    pub n_classes: usize,
    pub mask_feedback: bool,
    pub image_channels: usize,
    /// 3x3 conv stages per block.
    pub block_stages: usize,
}

const KEYS: [&str; 8] = [
    "variant",
    "level",
    "iterations",
    "base_channels",
    "n_classes",
    "mask_feedback",
    "image_channels",
    "block_stages",
];

impl ModelConfig {
    pub fn new(variant: Variant) -> Self {
        ModelConfig {
            variant,
            level: DEPTH,
            iterations: if variant == Variant::UNet { 1 } else { 3 },
            base_channels: 8,
            n_classes: 1,
            mask_feedback: variant.default_feedback(),
            image_channels: 3,
            block_stages: 1,
        }
    }

    pub fn dru(level: usize) -> Self {
        ModelConfig {
            level,
            ..Self::new(Variant::Dru)
        }
    }

    pub fn sru(level: usize) -> Self {
        ModelConfig {
            level,
            ..Self::new(Variant::Sru)
        }
    }

    pub fn with_iterations(mut self, n: usize) -> Self {
        self.iterations = n;
        self
    }

    pub fn with_image_channels(mut self, c: usize) -> Self {
        self.image_channels = c;
        self
    }

    pub fn with_base_channels(mut self, c: usize) -> Self {
        self.base_channels = c;
        self
    }

    /// Channels of the fed-back segmentation map.
    pub fn feedback_channels(&self) -> usize {
        if self.n_classes == 1 {
            1
        } else {
            self.n_classes
        }
    }

    /// Channels entering the network: image plus optional mask feedback.
    pub fn input_channels(&self) -> usize {
        self.image_channels
            + if self.mask_feedback {
                self.feedback_channels()
            } else {
                0
            }
    }

    /// Level at which the recurrent state lives.
    pub fn effective_level(&self) -> usize {
        match self.variant {
            Variant::Sru | Variant::Dru => self.level,
            Variant::RecMiddle => DEPTH,
            _ => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("model.iterations", "must be at least 1"));
        }
        if self.level > DEPTH {
            return Err(Error::config(
                "model.level",
                format!("must be in 0..={}, got {}", DEPTH, self.level),
            ));
        }
        if self.base_channels == 0 {
            return Err(Error::config("model.base_channels", "must be positive"));
        }
        if self.n_classes == 0 {
            return Err(Error::config("model.n_classes", "must be positive"));
        }
        if self.image_channels == 0 {
            return Err(Error::config("model.image_channels", "must be positive"));
        }
        if self.block_stages == 0 {
            return Err(Error::config("model.block_stages", "must be positive"));
        }
        if self.variant == Variant::UNet && self.mask_feedback {
            return Err(Error::config(
                "model.mask_feedback",
                "the plain U-Net takes no mask input; use rec-simple for mask feedback",
            ));
        }
        Ok(())
    }

    pub fn to_section(&self) -> Section {
        let mut s = Section::new("model");
        s.set("variant", self.variant);
        s.set("level", self.level);
        s.set("iterations", self.iterations);
        s.set("base_channels", self.base_channels);
        s.set("n_classes", self.n_classes);
        s.set("mask_feedback", self.mask_feedback);
        s.set("image_channels", self.image_channels);
        s.set("block_stages", self.block_stages);
        s
    }

    pub fn from_section(s: &Section) -> Result<Self> {
        s.check_keys(&KEYS)?;
        let variant: Variant = match s.get("variant") {
            Some(v) => v.parse()?,
            None => return Err(Error::config("model.variant", "missing")),
        };
        let mut c = ModelConfig::new(variant);
        if let Some(v) = s.parse("level")? {
            c.level = v;
        }
        if let Some(v) = s.parse("iterations")? {
            c.iterations = v;
        }
        if let Some(v) = s.parse("base_channels")? {
            c.base_channels = v;
        }
        if let Some(v) = s.parse("n_classes")? {
            c.n_classes = v;
        }
        if let Some(v) = s.parse_bool("mask_feedback")? {
            c.mask_feedback = v;
        }
        if let Some(v) = s.parse("image_channels")? {
            c.image_channels = v;
        }
        if let Some(v) = s.parse("block_stages")? {
            c.block_stages = v;
        }
        c.validate()?;
        Ok(c)
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.variant.uses_level() {
            write!(f, "{}({})", self.variant.name().to_uppercase(), self.level)
        } else {
            write!(f, "{}", self.variant.name())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn section_round_trip() {
        let c = ModelConfig::sru(2).with_iterations(5);
        assert_eq!(ModelConfig::from_section(&c.to_section()).unwrap(), c);
    }

    #[test]
    fn variants_parse() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("RecMiddle".parse::<Variant>().unwrap(), Variant::RecMiddle);
        assert!("lstm".parse::<Variant>().is_err());
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::dru(5).validate().is_err());
        assert!(ModelConfig::dru(4).with_iterations(0).validate().is_err());
        let mut u = ModelConfig::new(Variant::UNet);
        assert!(u.validate().is_ok());
        u.mask_feedback = true;
        assert!(u.validate().is_err());
    }
}
