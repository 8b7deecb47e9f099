use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::aggregation::{Strategy, DEFAULT_ALPHA};
use crate::channel::default_onset;
use crate::data::{MIN_SIZE, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::model::{AdamConfig, ArchConfig};

pub const CONFIG_FORMAT_VERSION: u32 = 1;

/// Default per-client sample counts (143 samples in total).
pub const DESK_SAMPLE_COUNTS: [usize; 5] = [42, 24, 17, 36, 24];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Samples held by each client; its length is the number of clients.
    pub sample_counts: Vec<usize>,
    pub test_samples: usize,
    pub augment: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { sample_counts: DESK_SAMPLE_COUNTS.to_vec(), test_samples: 20, augment: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub local_epochs: usize,
    pub global_epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig { local_epochs: 12, global_epochs: 10, batch_size: 4, optimizer: AdamConfig::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelConfig {
    pub sigma_noise: f64,
    /// First noisy global epoch per client (`null` = always clean). Omitted means
    /// clients 3, 4 and 5 turn noisy at epochs 5, 4 and 3.
    pub onset_global_epoch: Option<Vec<Option<u32>>>,
}

impl ChannelConfig {
    pub fn onsets(&self, num_clients: usize) -> Vec<Option<u32>> {
        match &self.onset_global_epoch {
            Some(v) => v.clone(),
            None => (1..=num_clients).map(default_onset).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategyConfig {
    pub name: Strategy,
    pub alpha: f64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig { name: Strategy::Smart, alpha: DEFAULT_ALPHA }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub model: u64,
    pub data: u64,
    pub test: u64,
    pub channel: u64,
    pub shuffle: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds::from_master(0)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Seeds {
    /// Derives every seed from one master value.
    pub fn from_master(master: u64) -> Self {
        let s = |k: u64| splitmix64(master ^ splitmix64(k));
        Seeds { model: s(1), data: s(2), test: s(3), channel: s(4), shuffle: s(5) }
    }
}

/// Everything a simulation run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub format_version: u32,
    pub architecture: ArchConfig,
    pub data: DataConfig,
    pub protocol: ProtocolConfig,
    pub channel: ChannelConfig,
    pub strategy: StrategyConfig,
    pub seeds: Seeds,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            format_version: CONFIG_FORMAT_VERSION,
            architecture: ArchConfig::default(),
            data: DataConfig::default(),
            protocol: ProtocolConfig::default(),
            channel: ChannelConfig::default(),
            strategy: StrategyConfig::default(),
            seeds: Seeds::default(),
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn num_clients(&self) -> usize {
        self.data.sample_counts.len()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, reason: String| Err(Error::config(field, reason));
        if self.format_version != CONFIG_FORMAT_VERSION {
            return err("format_version", format!("expected {CONFIG_FORMAT_VERSION}, got {}", self.format_version));
        }
        self.architecture.validate().map_err(|e| Error::config("architecture", e.to_string()))?;
        let arch = &self.architecture;
        if arch.in_channels != 1 || arch.num_classes != NUM_CLASSES {
            return err(
                "architecture",
                format!("the synthetic data needs in_channels = 1 and num_classes = {NUM_CLASSES}"),
            );
        }
        if arch.input_size < MIN_SIZE {
            return err("architecture.input_size", format!("must be at least {MIN_SIZE}"));
        }
        let d = &self.data;
        if d.sample_counts.is_empty() {
            return err("data.sample_counts", "at least one client is required".into());
        }
        if let Some(i) = d.sample_counts.iter().position(|&m| m < 2) {
            return err(
                "data.sample_counts",
                format!("client {} needs at least 2 samples for a train/validation split", i + 1),
            );
        }
        if d.test_samples == 0 {
            return err("data.test_samples", "must be positive".into());
        }
        let p = &self.protocol;
        for (field, v) in [
            ("protocol.local_epochs", p.local_epochs),
            ("protocol.global_epochs", p.global_epochs),
            ("protocol.batch_size", p.batch_size),
        ] {
            if v == 0 {
                return err(field, "must be positive".into());
            }
        }
        let o = &p.optimizer;
        if !(o.lr.is_finite() && o.lr > 0.0) {
            return err("protocol.optimizer.lr", format!("must be positive, got {}", o.lr));
        }
        for (field, b) in [("protocol.optimizer.beta1", o.beta1), ("protocol.optimizer.beta2", o.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return err(field, format!("must lie in [0, 1), got {b}"));
            }
        }
        if !(o.eps.is_finite() && o.eps > 0.0) {
            return err("protocol.optimizer.eps", format!("must be positive, got {}", o.eps));
        }
        let c = &self.channel;
        if !(c.sigma_noise.is_finite() && c.sigma_noise >= 0.0) {
            return err("channel.sigma_noise", format!("must be finite and non-negative, got {}", c.sigma_noise));
        }
        let onsets = c.onsets(self.num_clients());
        if onsets.len() != self.num_clients() {
            return err(
                "channel.onset_global_epoch",
                format!("{} entries for {} clients", onsets.len(), self.num_clients()),
            );
        }
        if onsets.contains(&Some(0)) {
            return err("channel.onset_global_epoch", "global epochs are numbered from 1".into());
        }
        if !self.strategy.alpha.is_finite() {
            return err("strategy.alpha", "must be finite".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_desk_setup() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.num_clients(), 5);
        assert_eq!(cfg.data.sample_counts.iter().sum::<usize>(), 143);
        assert_eq!((cfg.protocol.local_epochs, cfg.protocol.global_epochs), (12, 10));
        assert_eq!(cfg.channel.onsets(5), vec![None, None, Some(5), Some(4), Some(3)]);
    }

    #[test]
    fn json_roundtrip_and_partial_documents() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
        let partial =
            RunConfig::from_json(r#"{"strategy": {"name": "naive"}, "channel": {"sigma_noise": 0.1}}"#).unwrap();
        assert_eq!(partial.strategy.name, Strategy::Naive);
        assert_eq!(partial.strategy.alpha, 10.0);
    }

    #[test]
    fn errors_name_the_field() {
        let cases = [
            (r#"{"channel": {"sigma_noise": -1.0}}"#, "channel.sigma_noise"),
            (r#"{"data": {"sample_counts": [4, 1]}}"#, "data.sample_counts"),
            (r#"{"protocol": {"batch_size": 0}}"#, "protocol.batch_size"),
            (r#"{"channel": {"onset_global_epoch": [null]}}"#, "channel.onset_global_epoch"),
            (r#"{"architecture": {"input_size": 30}}"#, "architecture"),
        ];
        for (text, field) in cases {
            match RunConfig::from_json(text) {
                Err(Error::InvalidConfig { field: f, .. }) => assert_eq!(f, field),
                other => panic!("{text}: {other:?}"),
            }
        }
        assert!(RunConfig::from_json(r#"{"strategy": {"name": "median"}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn master_seed_derivation_is_stable() {
        assert_eq!(Seeds::from_master(7), Seeds::from_master(7));
        assert_ne!(Seeds::from_master(7), Seeds::from_master(8));
        let s = Seeds::from_master(7);
        assert_ne!(s.data, s.test);
    }
}
