//! TOML run configuration: one file drives every subcommand.
//!
//! Each section mirrors the corresponding library configuration and
//! fills unspecified fields with the library defaults, so an empty (or
//! absent) file reproduces the reference setup. The effective
//! configuration — after command-line overrides — is serialized
//! canonically and hashed, and that hash is stamped into every output
//! file header, making outputs traceable to exactly one (config, seed)
//! pair.

use std::path::PathBuf;

use gaitmode::rf::RfConfig;
use gaitmode::ssl::FineTuneConfig;
use gaitmode::tcn::TcnConfig;
use gaitmode::Result;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Top-level run configuration. Every field has a default; sections
/// omit a `seed` to inherit the global one.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed; section seeds default to it.
    pub seed: u64,
    /// Directory of sequence CSVs consumed by training and evaluation.
    pub data_dir: Option<PathBuf>,
    pub cohort: CohortSection,
    pub tcn: TcnSection,
    pub rf: RfSection,
    pub ssl: SslSection,
    pub curve: CurveSection,
    pub simulate: SimulateSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> std::result::Result<RunConfig, toml::de::Error> {
        toml::from_str(text)
    }

    /// SHA-256 of the canonical serialization of the effective
    /// configuration. Formatting differences in the source file do not
    /// change the hash; any effective value change does.
    pub fn sha256_hex(&self) -> String {
        let canonical = toml::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn data_dir(&self) -> Result<&PathBuf> {
        self.data_dir.as_ref().ok_or_else(|| {
            gaitmode::Error::Invalid(
                "this command reads sequence CSVs; set data_dir in the config".into(),
            )
        })
    }
}

/// Synthetic cohort parameters for `gen-data`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSection {
    pub n_users: usize,
    pub seed: Option<u64>,
}

impl Default for CohortSection {
    fn default() -> Self {
        CohortSection {
            n_users: 5,
            seed: None,
        }
    }
}

impl CohortSection {
    pub fn seed(&self, global: u64) -> u64 {
        self.seed.unwrap_or(global)
    }
}

/// Mirror of the network configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TcnSection {
    pub n_blocks: usize,
    pub convs_per_block: usize,
    pub kernel_size: usize,
    pub dilations: Vec<usize>,
    pub channels: Vec<usize>,
    pub target_half_width: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub l2_weight: f64,
    pub dropout: f64,
    pub class_balanced: bool,
    pub val_fraction: f64,
    pub seed: Option<u64>,
}

impl Default for TcnSection {
    fn default() -> Self {
        let c = TcnConfig::default();
        TcnSection {
            n_blocks: c.n_blocks,
            convs_per_block: c.convs_per_block,
            kernel_size: c.kernel_size,
            dilations: c.dilations,
            channels: c.channels,
            target_half_width: c.target_half_width,
            learning_rate: c.learning_rate,
            batch_size: c.batch_size,
            epochs: c.epochs,
            l2_weight: c.l2_weight,
            dropout: c.dropout,
            class_balanced: c.class_balanced,
            val_fraction: c.val_fraction,
            seed: None,
        }
    }
}

impl TcnSection {
    pub fn to_config(&self, global_seed: u64) -> TcnConfig {
        TcnConfig {
            input_channels: TcnConfig::default().input_channels,
            n_blocks: self.n_blocks,
            convs_per_block: self.convs_per_block,
            kernel_size: self.kernel_size,
            dilations: self.dilations.clone(),
            channels: self.channels.clone(),
            target_half_width: self.target_half_width,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            l2_weight: self.l2_weight,
            dropout: self.dropout,
            class_balanced: self.class_balanced,
            val_fraction: self.val_fraction,
            seed: self.seed.unwrap_or(global_seed),
        }
    }
}

/// Mirror of the forest configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RfSection {
    pub window: usize,
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub features_per_split: usize,
    pub seed: Option<u64>,
}

impl Default for RfSection {
    fn default() -> Self {
        let c = RfConfig::default();
        RfSection {
            window: c.window,
            n_trees: c.n_trees,
            max_depth: c.max_depth,
            min_samples_leaf: c.min_samples_leaf,
            features_per_split: c.features_per_split,
            seed: None,
        }
    }
}

impl RfSection {
    pub fn to_config(&self, global_seed: u64) -> RfConfig {
        RfConfig {
            window: self.window,
            n_trees: self.n_trees,
            max_depth: self.max_depth,
            min_samples_leaf: self.min_samples_leaf,
            features_per_split: self.features_per_split,
            seed: self.seed.unwrap_or(global_seed),
        }
    }
}

/// Day-protocol parameters for `ssl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SslSection {
    /// Hindsight labeling offset; omitted → chosen by a window-curve
    /// pass on a held-out base split, clamped to ≤ 0.
    pub delta: Option<i64>,
    /// Pair orderings simulated per user, 1..=6.
    pub n_permutations: usize,
    pub epochs: usize,
    pub lr_scale: f64,
    pub base_replay_fraction: f64,
    pub seed: Option<u64>,
}

impl Default for SslSection {
    fn default() -> Self {
        let f = FineTuneConfig::default();
        SslSection {
            delta: None,
            n_permutations: 6,
            epochs: f.epochs,
            lr_scale: f.lr_scale,
            base_replay_fraction: f.base_replay_fraction,
            seed: None,
        }
    }
}

impl SslSection {
    pub fn to_fine_tune(&self, global_seed: u64) -> FineTuneConfig {
        FineTuneConfig {
            epochs: self.epochs,
            lr_scale: self.lr_scale,
            base_replay_fraction: self.base_replay_fraction,
            seed: self.seed.unwrap_or(global_seed),
        }
    }
}

/// Parameters for `window-curve`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurveSection {
    /// User whose sequences form the evaluation split; omitted → the
    /// highest user id in the dataset.
    pub holdout_user: Option<u32>,
}

/// Parameters for `simulate`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    /// Trained network checkpoint; defaults to `tcn.ckpt` in the
    /// output directory.
    pub checkpoint: Option<PathBuf>,
    /// Sequence CSV to replay; omitted → a fresh held-out synthetic
    /// user walking a mixed-mode plan.
    pub csv: Option<PathBuf>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_reproduces_the_library_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        let tcn = cfg.tcn.to_config(7);
        assert_eq!(tcn, TcnConfig { seed: 7, ..TcnConfig::default() });
        let rf = cfg.rf.to_config(9);
        assert_eq!(rf.seed, 9);
        assert_eq!(rf.n_trees, RfConfig::default().n_trees);
        assert_eq!(cfg.cohort.n_users, 5);
    }

    #[test]
    fn hash_tracks_effective_values_not_formatting() {
        let a = RunConfig::from_toml("seed = 3").unwrap();
        let b = RunConfig::from_toml("  seed   =  3  # comment\n").unwrap();
        let c = RunConfig::from_toml("seed = 4").unwrap();
        assert_eq!(a.sha256_hex(), b.sha256_hex());
        assert_ne!(a.sha256_hex(), c.sha256_hex());
        assert_eq!(a.sha256_hex().len(), 64);
    }

    #[test]
    fn section_seeds_override_the_global_seed() {
        let cfg = RunConfig::from_toml("seed = 1\n[tcn]\nseed = 5\n").unwrap();
        assert_eq!(cfg.tcn.to_config(cfg.seed).seed, 5);
        assert_eq!(cfg.rf.to_config(cfg.seed).seed, 1);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(RunConfig::from_toml("nonsense = true").is_err());
        assert!(RunConfig::from_toml("[tcn]\nlayers = 3").is_err());
    }
}
