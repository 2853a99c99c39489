//! Run configuration, its content hash, and named random substreams.

use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binarize::BinarizeConfig;
use crate::data::{DatasetDescriptor, DatasetSource, SplitFractions};
use crate::decoupled::{BacktrackConfig, OptimizerConfig, OptimizerKind};
use crate::error::{Error, Result};
use crate::space::SearchSpaceSpec;
use crate::supernet::NetConfig;
use crate::tangent::GgnConfig;

/// Operation-removal schedule (off by default).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RemovalConfig {
    pub enabled: bool,
    /// Training steps of each sampled single-path model before it is scored.
    pub steps_per_sample: usize,
    /// Never remove below this many active ops per edge.
    pub min_active: usize,
}

impl Default for RemovalConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            steps_per_sample: 2,
            min_active: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    /// Total epochs, Parent and Child epochs both counted.
    pub epochs: u64,
    pub parent_epochs_per_round: u64,
    pub child_epochs_per_round: u64,
    pub batch_size: usize,
    pub weight_opt: OptimizerConfig,
    /// Floor of the cosine schedule of the weight learning rate.
    pub weight_lr_floor: f64,
    pub arch_opt: OptimizerConfig,
    pub backtrack: BacktrackConfig,
    pub lambda: f64,
    pub mu: f64,
    pub ggn: GgnConfig,
    /// Keep architecture optimizer moments across inheritance.
    #[serde(default)]
    pub carry_moments: bool,
    pub norm_momentum: f64,
    #[serde(default)]
    pub removal: RemovalConfig,
    /// Write a checkpoint every this many epochs (0: only at the end).
    #[serde(default)]
    pub checkpoint_every: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub opt: OptimizerConfig,
    pub lr_floor: f64,
}

/// Random-search baseline settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    /// Candidates sharing the search epoch budget equally.
    pub candidates: usize,
}

/// Everything a run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub space: SearchSpaceSpec,
    pub net: NetConfig,
    pub binarize: BinarizeConfig,
    pub data: DatasetDescriptor,
    pub search: SearchConfig,
    pub retrain: RetrainConfig,
    pub baseline: BaselineConfig,
    pub seed: u64,
    /// Output directory; excluded from the config hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Small profile that runs in seconds on one CPU core.
    pub fn desk() -> Self {
        Self {
            space: SearchSpaceSpec::desk(),
            net: NetConfig {
                in_channels: 3,
                image_size: 12,
                num_classes: 2,
                init_channels: 8,
                num_cells: 4,
                reduction_cells: None,
                stem_multiplier: 1,
            },
            binarize: BinarizeConfig::default(),
            data: DatasetDescriptor {
                source: DatasetSource::SyntheticBlobs {
                    samples_per_class: 128,
                    sigma: 1.0,
                },
                channels: 3,
                image_size: 12,
                num_classes: 2,
                splits: SplitFractions {
                    search_train: 0.5,
                    search_val: 0.125,
                    final_train: 0.25,
                    test: 0.125,
                },
            },
            search: SearchConfig {
                epochs: 6,
                parent_epochs_per_round: 1,
                child_epochs_per_round: 1,
                batch_size: 32,
                weight_opt: OptimizerConfig {
                    momentum: 0.9,
                    weight_decay: 5e-4,
                    ..OptimizerConfig::sgd(0.05)
                },
                weight_lr_floor: 1e-3,
                arch_opt: OptimizerConfig {
                    beta1: 0.5,
                    weight_decay: 1e-3,
                    ..OptimizerConfig::adam(3e-3)
                },
                backtrack: BacktrackConfig::default(),
                lambda: 1e-3,
                mu: 0.2,
                ggn: GgnConfig::default(),
                carry_moments: false,
                norm_momentum: 0.1,
                removal: RemovalConfig::default(),
                checkpoint_every: 0,
            },
            retrain: RetrainConfig {
                epochs: 12,
                batch_size: 32,
                opt: OptimizerConfig::adam(5e-3),
                lr_floor: 1e-4,
            },
            baseline: BaselineConfig { candidates: 3 },
            seed: 0,
            out_dir: None,
        }
    }

    /// Full-scale search schedule: eight ops, four nodes, 105 epochs.
    pub fn full() -> Self {
        let mut c = Self::desk();
        c.space = SearchSpaceSpec::default();
        c.net = NetConfig {
            in_channels: 3,
            image_size: 32,
            num_classes: 10,
            init_channels: 16,
            num_cells: 6,
            reduction_cells: None,
            stem_multiplier: 3,
        };
        c.data.source = DatasetSource::CsvImages {
            path: PathBuf::from("data/cifar10.csv"),
        };
        c.data.channels = 3;
        c.data.image_size = 32;
        c.data.num_classes = 10;
        c.search.epochs = 105;
        c.search.batch_size = 64;
        c.search.weight_opt = OptimizerConfig {
            kind: OptimizerKind::Sgd,
            momentum: 0.9,
            weight_decay: 5e-4,
            ..OptimizerConfig::sgd(0.025)
        };
        c.search.lambda = 1e-4;
        c.search.mu = 0.2;
        c.retrain.epochs = 600;
        c.retrain.batch_size = 96;
        c
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.space.validate()?;
        self.net.validate()?;
        self.data.validate()?;
        if self.net.in_channels != self.data.channels
            || self.net.image_size != self.data.image_size
            || self.net.num_classes != self.data.num_classes
        {
            return Err(Error::Config("network and dataset shapes disagree".into()));
        }
        let s = &self.search;
        if s.lambda < 0.0 || s.mu < 0.0 {
            return Err(Error::Config("λ and μ must be non-negative".into()));
        }
        if !(s.backtrack.epsilon > 0.0 && s.backtrack.epsilon <= 1.0) {
            return Err(Error::Config("ε must lie in (0, 1]".into()));
        }
        if s.parent_epochs_per_round == 0 || s.child_epochs_per_round == 0 {
            return Err(Error::Config("each phase needs at least one epoch per round".into()));
        }
        if s.batch_size < 2 || self.retrain.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if self.baseline.candidates == 0 {
            return Err(Error::Config("baseline needs at least one candidate".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, output directory excluded.
    pub fn hash(&self) -> ConfigHash {
        let mut c = self.clone();
        c.out_dir = None;
        let json = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        let mut b = [0u8; 8];
        b.copy_from_slice(&digest[..8]);
        ConfigHash(u64::from_be_bytes(b))
    }
}

/// First 64 bits of the configuration digest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConfigHash(pub u64);

impl ConfigHash {
    pub fn hex(self) -> String {
        format!("{:016x}", self.0)
    }

    pub fn parse(s: &str) -> Result<Self> {
        u64::from_str_radix(s, 16)
            .map(ConfigHash)
            .map_err(|_| Error::Data(format!("`{s}` is not a config hash")))
    }
}

impl std::fmt::Display for ConfigHash {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.hex())
    }
}

/// Independent generator for the consumer `name`, derived from the master
/// seed; adding consumers never shifts another consumer's stream.
pub fn substream(master: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(name.as_bytes());
    let seed: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(seed)
}
