//! Architecture descriptions and their content hash.
//!
//! The exact layer recipes live in `docs/architecture.md`; the defaults here
//! are tuned so the stock generator and critic land at roughly 10.7M and
//! 4.7M trainable parameters.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const GENERATOR_DEFAULT_WIDTH: usize = 42;
pub const CRITIC_DEFAULT_WIDTH: usize = 48;
pub const DEFAULT_SIGMA_MIN: f64 = 1e-3;

/// U-net generator description: five downsampling stages, channel scheme
/// `[w, 2w, 4w, 8w, 8w, 8w]`, two output heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub d: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub sigma_min: f64,
}

impl GeneratorSpec {
    pub fn new(d: usize, in_channels: usize, out_channels: usize, base_width: usize) -> Result<Self> {
        let spec = GeneratorSpec {
            d,
            in_channels,
            out_channels,
            base_width,
            sigma_min: DEFAULT_SIGMA_MIN,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_defaults(d: usize, in_channels: usize, out_channels: usize) -> Result<Self> {
        Self::new(d, in_channels, out_channels, GENERATOR_DEFAULT_WIDTH)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 {
            return Err(Error::InvalidSpec {
                reason: "generator base_width must be positive".into(),
            });
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidSpec {
                reason: "channel counts must be positive".into(),
            });
        }
        if self.d < 32 || self.d % 32 != 0 {
            return Err(Error::SideNotDivisible { d: self.d });
        }
        if self.sigma_min <= 0.0 {
            return Err(Error::InvalidSpec {
                reason: "sigma_min must be positive".into(),
            });
        }
        Ok(())
    }

    /// Encoder/decoder channel ladder `[w, 2w, 4w, 8w, 8w, 8w]`.
    pub fn channels(&self) -> [usize; 6] {
        let w = self.base_width;
        [w, 2 * w, 4 * w, 8 * w, 8 * w, 8 * w]
    }

    /// Decoder output channels per stage, deepest first.
    pub fn decoder_channels(&self) -> [usize; 5] {
        let w = self.base_width;
        [8 * w, 4 * w, 2 * w, w, w]
    }
}

/// Strided-convolution critic description: five downsampling steps, channel
/// scheme `[w, 2w, 4w, 8w, 8w]`, one mixing convolution, global mean, affine
/// map to a scalar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticSpec {
    pub d: usize,
    pub in_channels: usize,
    pub base_width: usize,
}

impl CriticSpec {
    pub fn new(d: usize, in_channels: usize, base_width: usize) -> Result<Self> {
        let spec = CriticSpec {
            d,
            in_channels,
            base_width,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_defaults(d: usize, in_channels: usize) -> Result<Self> {
        Self::new(d, in_channels, CRITIC_DEFAULT_WIDTH)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 {
            return Err(Error::InvalidSpec {
                reason: "critic base_width must be positive".into(),
            });
        }
        if self.in_channels == 0 {
            return Err(Error::InvalidSpec {
                reason: "channel count must be positive".into(),
            });
        }
        if self.d < 32 || self.d % 32 != 0 {
            return Err(Error::SideNotDivisible { d: self.d });
        }
        Ok(())
    }

    /// Channel ladder of the five strided convolutions `[w, 2w, 4w, 8w, 8w]`.
    pub fn channels(&self) -> [usize; 5] {
        let w = self.base_width;
        [w, 2 * w, 4 * w, 8 * w, 8 * w]
    }

    /// Output channels of the final mixing convolution.
    pub fn mix_channels(&self) -> usize {
        4 * self.base_width
    }
}

/// Joint description of a training pair, hashed into checkpoints so that a
/// file can never be loaded into a structurally different model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub generator: GeneratorSpec,
    pub critic: CriticSpec,
}

impl ModelSpec {
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("spec serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
