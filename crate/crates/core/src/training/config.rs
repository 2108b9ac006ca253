use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::channel::ChannelFamily;
use crate::kan::SplineConfig;
use crate::{error::config, Error, Result};

/// Dimensions and seeds of the whole pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SystemConfig {
    /// Semantic dimension `D`.
    pub dim: usize,
    /// Symbols per token `D_ch`.
    pub channel_dim: usize,
    /// Output width of the vision featurizer, the projector's input width.
    pub feature_dim: usize,
    pub kan_hidden: usize,
    pub encoder_layers: usize,
    pub spline: SplineConfig,
    pub seed: u64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            channel_dim: 16,
            feature_dim: 24,
            kan_hidden: 24,
            encoder_layers: 2,
            spline: SplineConfig::default(),
            seed: 7,
        }
    }
}

impl SystemConfig {
    pub fn kan_dims(&self) -> [usize; 3] {
        [self.feature_dim, self.kan_hidden, self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.channel_dim == 0 || self.feature_dim == 0 || self.kan_hidden == 0 {
            return Err(config("pipeline dimensions must be positive"));
        }
        if self.dim > u16::MAX as usize || self.channel_dim > u16::MAX as usize {
            return Err(config("dimensions must fit the frame header"));
        }
        self.spline.basis()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Align,
    Finetune,
    Joint,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::Pretrain, Phase::Align, Phase::Finetune, Phase::Joint];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Align => "align",
            Phase::Finetune => "finetune",
            Phase::Joint => "joint",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Phase::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| config(format!("unknown phase {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 4, alpha: 4.0 }
    }
}

/// Which parameter groups an optimizer may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Trainable {
    pub embedding: bool,
    pub encoder: bool,
    pub head: bool,
    pub kan: bool,
    pub lora: bool,
    pub coder: bool,
}

impl Trainable {
    pub fn any_base(&self) -> bool {
        self.embedding || self.encoder || self.head
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhaseConfig {
    pub phase: Phase,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    /// Weight of the MSE term next to cross-entropy.
    pub lambda: f64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    /// Uniform SNR range in dB (joint phase).
    pub snr_range: (f64, f64),
    pub families: Vec<ChannelFamily>,
    pub lora: Option<LoraConfig>,
    /// Let base semantic-model weights update alongside the adapters.
    pub full_unfreeze: bool,
    /// Evaluation seeds for the joint phase's accuracy-vs-SNR table.
    pub eval_seeds: usize,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self::for_phase(Phase::Align)
    }
}

impl PhaseConfig {
    pub fn for_phase(phase: Phase) -> Self {
        let (steps, lr) = match phase {
            Phase::Pretrain => (10000, 1e-2),
            Phase::Align => (5000, 3e-3),
            Phase::Finetune => (8000, 2e-3),
            Phase::Joint => (5000, 2e-3),
        };
        Self {
            phase,
            steps,
            batch_size: 32,
            seed: 11 + phase as u64,
            lr,
            min_lr: 1e-5,
            weight_decay: 0.0,
            lambda: 0.1,
            clip_norm: 1.0,
            snr_range: (0.0, 18.0),
            families: vec![ChannelFamily::None, ChannelFamily::Awgn, ChannelFamily::Rayleigh],
            lora: matches!(phase, Phase::Finetune | Phase::Joint).then(LoraConfig::default),
            full_unfreeze: false,
            eval_seeds: 4,
        }
    }

    /// Parameter groups this phase updates.
    pub fn trainable(&self) -> Trainable {
        match self.phase {
            Phase::Pretrain => Trainable {
                embedding: true,
                encoder: true,
                head: true,
                ..Trainable::default()
            },
            Phase::Align => Trainable {
                kan: true,
                ..Trainable::default()
            },
            Phase::Finetune => Trainable {
                kan: true,
                lora: true,
                embedding: self.full_unfreeze,
                encoder: self.full_unfreeze,
                head: self.full_unfreeze,
                ..Trainable::default()
            },
            Phase::Joint => Trainable {
                kan: true,
                lora: true,
                coder: true,
                ..Trainable::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config("batch size must be positive"));
        }
        if !(self.lr > 0.0) || !(self.min_lr >= 0.0) || self.min_lr > self.lr {
            return Err(config("learning rates must satisfy 0 <= min_lr <= lr, lr > 0"));
        }
        if !(self.lambda >= 0.0) || !(self.clip_norm > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(config("lambda, weight decay and clip norm must be non-negative (clip > 0)"));
        }
        match self.phase {
            Phase::Finetune if self.lora.is_none() => {
                return Err(config("finetune phase needs a LoRA configuration"));
            }
            Phase::Joint => {
                if self.families.is_empty() {
                    return Err(config("joint phase needs at least one channel family"));
                }
                let (lo, hi) = self.snr_range;
                if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                    return Err(config("SNR range must be finite with lo <= hi"));
                }
            }
            Phase::Align | Phase::Pretrain if self.full_unfreeze => {
                return Err(config("full_unfreeze only applies to the finetune phase"));
            }
            _ => {}
        }
        if let Some(l) = self.lora {
            if l.rank == 0 {
                return Err(config("LoRA rank must be at least 1"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        SystemConfig::default().validate().unwrap();
        for p in Phase::ALL {
            let c = PhaseConfig::for_phase(p);
            c.validate().unwrap();
            assert_eq!(c.batch_size, 32);
        }
        assert_eq!(PhaseConfig::for_phase(Phase::Align).steps, 5000);
        assert_eq!(PhaseConfig::for_phase(Phase::Finetune).steps, 8000);
        assert_eq!(PhaseConfig::for_phase(Phase::Joint).steps, 5000);
        assert_eq!(PhaseConfig::for_phase(Phase::Joint).snr_range, (0.0, 18.0));
    }

    #[test]
    fn phase_contracts() {
        let align = PhaseConfig::for_phase(Phase::Align).trainable();
        assert!(align.kan && !align.any_base() && !align.lora && !align.coder);
        let ft = PhaseConfig::for_phase(Phase::Finetune).trainable();
        assert!(ft.kan && ft.lora && !ft.any_base() && !ft.coder);
        let joint = PhaseConfig::for_phase(Phase::Joint).trainable();
        assert!(joint.kan && joint.lora && joint.coder && !joint.any_base());
    }

    #[test]
    fn invalid_phase_configs() {
        let mut ft = PhaseConfig::for_phase(Phase::Finetune);
        ft.lora = None;
        assert!(matches!(ft.validate(), Err(Error::Config(_))));
        let mut joint = PhaseConfig::for_phase(Phase::Joint);
        joint.families.clear();
        assert!(matches!(joint.validate(), Err(Error::Config(_))));
        let mut align = PhaseConfig::for_phase(Phase::Align);
        align.full_unfreeze = true;
        assert!(align.validate().is_err());
        assert!("warmup".parse::<Phase>().is_err());
    }
}
