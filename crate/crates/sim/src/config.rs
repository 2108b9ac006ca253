//! Experiment configuration: one TOML file, overridable per field from the
//! command line with `--set section.key=value`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use m4sc_core::channel::{ChannelFamily, ChannelParams};
use m4sc_core::sharing::ComparatorConfig;
use m4sc_core::training::{LoraConfig, Phase, PhaseConfig, SystemConfig};
use serde::{Deserialize, Serialize};

/// Environment variable that replaces `output_dir`.
pub const OUT_ENV: &str = "M4SC_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every run seed is derived from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub system: SystemConfig,
    pub comparator: ComparatorConfig,
    pub channel: ChannelSettings,
    /// User count `U` for `simulate` and the overlap and tau sweeps.
    pub users: usize,
    /// Fraction `p` of each user's tokens drawn from the shared pool.
    pub overlap: f64,
    /// Tokens per user in sharing runs.
    pub tokens: usize,
    /// Seeds per sharing sweep point.
    pub seeds: usize,
    /// Channel seeds per SNR sweep point.
    pub eval_seeds: usize,
    pub sweep: SweepGrid,
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            output_dir: PathBuf::from("m4sc-out"),
            system: SystemConfig::default(),
            comparator: ComparatorConfig::default(),
            channel: ChannelSettings::default(),
            users: 4,
            overlap: 0.5,
            tokens: 8,
            seeds: 10,
            eval_seeds: 20,
            sweep: SweepGrid::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelSettings {
    pub family: ChannelFamily,
    pub snr_db: f64,
    pub h_min: f64,
}

impl Default for ChannelSettings {
    fn default() -> Self {
        Self {
            family: ChannelFamily::Awgn,
            snr_db: 12.0,
            h_min: m4sc_core::channel::DEFAULT_H_MIN,
        }
    }
}

impl ChannelSettings {
    pub fn params(&self, seed: u64) -> ChannelParams {
        ChannelParams {
            h_min: self.h_min,
            ..ChannelParams::new(self.family, self.snr_db, seed)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub users: Vec<usize>,
    pub snrs: Vec<f64>,
    pub families: Vec<ChannelFamily>,
    pub overlaps: Vec<f64>,
    pub taus: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            users: vec![1, 2, 4, 6, 8],
            snrs: vec![0.0, 3.0, 6.0, 9.0, 12.0, 15.0, 18.0],
            families: vec![ChannelFamily::None, ChannelFamily::Awgn, ChannelFamily::Rayleigh],
            overlaps: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            taus: vec![0.5, 0.7, 0.8, 0.9, 0.95, 0.99],
        }
    }
}

/// Sizes and seeds of the generated corpora.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub caption_samples: usize,
    pub mixed_samples: usize,
    pub eval_samples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 101,
            caption_samples: 5000,
            mixed_samples: 20000,
            eval_samples: 900,
        }
    }
}

/// Per-phase overrides on top of the built-in phase defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub pretrain: PhaseOverrides,
    pub align: PhaseOverrides,
    pub finetune: PhaseOverrides,
    pub joint: PhaseOverrides,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseOverrides {
    pub steps: Option<u64>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub lr: Option<f64>,
    pub min_lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub lambda: Option<f64>,
    pub clip_norm: Option<f64>,
    pub snr_range: Option<(f64, f64)>,
    pub families: Option<Vec<ChannelFamily>>,
    pub lora_rank: Option<usize>,
    pub lora_alpha: Option<f64>,
    pub full_unfreeze: Option<bool>,
    pub eval_seeds: Option<usize>,
}

impl TrainConfig {
    pub fn phase(&self, phase: Phase) -> PhaseConfig {
        let o = match phase {
            Phase::Pretrain => &self.pretrain,
            Phase::Align => &self.align,
            Phase::Finetune => &self.finetune,
            Phase::Joint => &self.joint,
        };
        let mut c = PhaseConfig::for_phase(phase);
        macro_rules! take {
            ($($f:ident),*) => {$( if let Some(v) = o.$f.clone() { c.$f = v; } )*};
        }
        take!(steps, batch_size, seed, lr, min_lr, weight_decay, lambda, clip_norm, snr_range, families, full_unfreeze, eval_seeds);
        if o.lora_rank.is_some() || o.lora_alpha.is_some() {
            let base = c.lora.unwrap_or_default();
            c.lora = Some(LoraConfig {
                rank: o.lora_rank.unwrap_or(base.rank),
                alpha: o.lora_alpha.unwrap_or(base.alpha),
            });
        }
        c
    }
}

impl ExperimentConfig {
    /// Reads `path` (defaults when `None`), then applies `M4SC_OUT` and the
    /// `key=value` overrides in order, then validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                text.parse::<toml::Table>()
                    .map_err(|e| anyhow::anyhow!("{}: {}", p.display(), one_line(&e.to_string())))?
            }
            None => toml::Table::new(),
        };
        if let Ok(out) = std::env::var(OUT_ENV) {
            if !out.is_empty() {
                table.insert("output_dir".into(), toml::Value::String(out));
            }
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| anyhow::anyhow!("invalid configuration: {}", one_line(&e.to_string())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        self.comparator.validate()?;
        if self.users == 0 {
            bail!("users must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            bail!("overlap must lie in [0, 1]");
        }
        if self.tokens == 0 || self.seeds == 0 || self.eval_seeds == 0 {
            bail!("tokens, seeds and eval_seeds must be positive");
        }
        self.channel.params(0).validate()?;
        if self.sweep.users.contains(&0) {
            bail!("sweep.users entries must be at least 1");
        }
        if self.sweep.overlaps.iter().any(|p| !(0.0..=1.0).contains(p)) {
            bail!("sweep.overlaps entries must lie in [0, 1]");
        }
        for &tau in &self.sweep.taus {
            ComparatorConfig {
                cosine_threshold: tau,
                ..self.comparator
            }
            .validate()?;
        }
        if self.sweep.snrs.iter().any(|s| !s.is_finite()) {
            bail!("sweep.snrs entries must be finite");
        }
        if self.data.eval_samples == 0 {
            bail!("data.eval_samples must be positive");
        }
        for p in Phase::ALL {
            self.train.phase(p).validate()?;
        }
        Ok(())
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.output_dir.join("checkpoints")
    }

    pub fn checkpoint_path(&self, phase: Phase) -> PathBuf {
        self.checkpoint_dir().join(format!("{phase}.m4ck"))
    }

    pub fn comparator_with_tau(&self, tau: f64) -> ComparatorConfig {
        ComparatorConfig {
            cosine_threshold: tau,
            ..self.comparator
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Sets a dotted key. The value is read as a TOML literal, falling back to a
/// bare string (so `channel.family=awgn` works unquoted).
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .with_context(|| format!("override {assignment:?} is not key=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key {key:?} is malformed");
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => bail!("override key {key:?} descends into a non-table value"),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = ExperimentConfig::default();
        let text = toml::to_string(&c).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let c = ExperimentConfig::load(
            None,
            &[
                "system.dim=16".into(),
                "channel.family=rayleigh".into(),
                "train.joint.steps=3".into(),
                "sweep.users=[2, 3]".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.system.dim, 16);
        assert_eq!(c.channel.family, ChannelFamily::Rayleigh);
        assert_eq!(c.train.phase(Phase::Joint).steps, 3);
        assert_eq!(c.train.phase(Phase::Align).steps, 5000);
        assert_eq!(c.sweep.users, vec![2, 3]);
    }

    #[test]
    fn bad_values_are_config_errors() {
        for bad in ["users=0", "overlap=1.5", "comparator.cosine_threshold=0", "nonsense=1", "system.dim=x"] {
            assert!(ExperimentConfig::load(None, &[bad.into()]).is_err(), "{bad}");
        }
        assert!(apply_override(&mut toml::Table::new(), "novalue").is_err());
    }

    #[test]
    fn lora_overrides_merge_with_defaults() {
        let c = ExperimentConfig::load(None, &["train.finetune.lora_rank=2".into()]).unwrap();
        let lora = c.train.phase(Phase::Finetune).lora.unwrap();
        assert_eq!((lora.rank, lora.alpha), (2, 4.0));
    }
}
