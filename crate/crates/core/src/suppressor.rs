//! Noise suppressor applied to layer inputs before augmentation, and the
//! data-to-noise-ratio (DNR) algebra that motivates it.
//!
//! A noisy observation is `x = h + w` (truth plus noise). With `h` and `w`
//! known separately the suppressor is the three-branch map
//!
//! ```text
//! chi(x) = 0              if h + w < 0
//!        = h + w          if h + w >= 0 and w < 0
//!        = (h + w)k + rho if h + w >= 0 and w > 0
//! ```
//!
//! A deployed layer only sees `x`, so the runtime rule clamps negatives to
//! zero and applies the affine branch on channels statically declared as
//! positive-noise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which branch to take for a non-negative observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseSign {
    Negative,
    Positive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuppressorChannel {
    pub active: bool,
    pub kappa: f64,
    pub rho: f64,
    /// Noise sign assumed for this channel at inference time.
    pub noise: NoiseSign,
}

impl SuppressorChannel {
    pub const INACTIVE: SuppressorChannel = SuppressorChannel {
        active: false,
        kappa: 1.0,
        rho: 0.0,
        noise: NoiseSign::Negative,
    };

    pub fn new(kappa: f64, rho: f64, noise: NoiseSign) -> Self {
        Self {
            active: true,
            kappa,
            rho,
            noise,
        }
    }

    /// Checks `|rho| >= bound * |kappa|` with `rho` and `kappa` of opposite
    /// sign, where `bound` is the caller's bound on `|h + w|`.
    pub fn validate(&self, bound: f64) -> Result<()> {
        if !self.active {
            return Ok(());
        }
        check_condition(bound, self.kappa, self.rho)
    }

    pub fn apply(&self, value: f64) -> f64 {
        if self.active {
            suppress(value, self.kappa, self.rho, self.noise)
        } else {
            value
        }
    }

    /// d(apply)/d(value); zero on the clamped branch.
    pub fn derivative(&self, value: f64) -> f64 {
        if !self.active {
            return 1.0;
        }
        if value < 0.0 {
            0.0
        } else {
            match self.noise {
                NoiseSign::Negative => 1.0,
                NoiseSign::Positive => self.kappa,
            }
        }
    }
}

/// Per-channel suppressor settings for one layer input.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SuppressorConfig {
    channels: Vec<SuppressorChannel>,
}

impl SuppressorConfig {
    pub fn inactive(width: usize) -> Self {
        Self {
            channels: vec![SuppressorChannel::INACTIVE; width],
        }
    }

    pub fn from_channels(channels: Vec<SuppressorChannel>) -> Self {
        Self { channels }
    }

    pub fn width(&self) -> usize {
        self.channels.len()
    }

    pub fn channels(&self) -> &[SuppressorChannel] {
        &self.channels
    }

    pub fn channel(&self, i: usize) -> &SuppressorChannel {
        &self.channels[i]
    }

    pub fn set(&mut self, i: usize, channel: SuppressorChannel) {
        self.channels[i] = channel;
    }

    pub fn is_active(&self) -> bool {
        self.channels.iter().any(|c| c.active)
    }

    pub fn validate(&self, bound: f64) -> Result<()> {
        self.channels.iter().try_for_each(|c| c.validate(bound))
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.channels).map(|(&v, c)| c.apply(v)).collect()
    }

    pub fn derivative(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.channels).map(|(&v, c)| c.derivative(v)).collect()
    }
}

/// Runtime suppressor keyed on the observed value only.
pub fn suppress(value: f64, kappa: f64, rho: f64, noise: NoiseSign) -> f64 {
    if value < 0.0 {
        0.0
    } else {
        match noise {
            NoiseSign::Negative => value,
            NoiseSign::Positive => value * kappa + rho,
        }
    }
}

/// The three-branch map with truth and noise observed separately. Zero noise
/// is treated as the pass-through branch.
pub fn suppress_known(truth: f64, noise: f64, kappa: f64, rho: f64) -> f64 {
    let sign = if noise > 0.0 {
        NoiseSign::Positive
    } else {
        NoiseSign::Negative
    };
    suppress(truth + noise, kappa, rho, sign)
}

fn check_condition(bound: f64, kappa: f64, rho: f64) -> Result<()> {
    let required = bound.abs() * kappa.abs();
    if rho.abs() < required || rho * kappa > 0.0 {
        return Err(Error::ConditionViolated {
            rho_abs: rho.abs(),
            required,
        });
    }
    Ok(())
}

/// Splits the suppressor output into its truth and noise parts.
///
/// Returns `(truth_out, noise_out)` with `truth_out + noise_out` equal to the
/// suppressor output for the matching noise sign.
pub fn suppressed_decomposition(truth: f64, noise: f64, kappa: f64, rho: f64) -> Result<(f64, f64)> {
    let observed = truth + noise;
    check_condition(observed, kappa, rho)?;
    Ok(if observed < 0.0 {
        (truth, -truth)
    } else if noise > 0.0 {
        (truth * kappa + rho, noise * kappa)
    } else {
        (truth, noise)
    })
}

/// Ratio of truth to noise; `None` when the noise is exactly zero.
pub fn dnr(truth: f64, noise: f64) -> Option<f64> {
    (noise != 0.0).then(|| truth / noise)
}

/// Magnitude of the DNR of the monomial `x_i^p x_j^q` given the DNRs of its
/// factors: `|1 / ((1 + 1/dnr_i)^p (1 + 1/dnr_j)^q - 1)|`.
pub fn dnr_of_monomial(dnr_i: f64, dnr_j: f64, p: u32, q: u32) -> Result<f64> {
    if dnr_i == 0.0 || dnr_j == 0.0 {
        return Err(Error::InvalidArgument("DNR factors must be nonzero".into()));
    }
    if p + q == 0 {
        return Err(Error::InvalidArgument("monomial degree must be >= 1".into()));
    }
    let growth = (1.0 + 1.0 / dnr_i).powi(p as i32) * (1.0 + 1.0 / dnr_j).powi(q as i32);
    let denom = growth - 1.0;
    if denom == 0.0 {
        return Err(Error::SingularDnr);
    }
    Ok((1.0 / denom).abs())
}
