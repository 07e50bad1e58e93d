//! Scenario configuration: everything a run needs, from one seed.

use crate::agreement::ReplicaConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Frozen digest of the genesis block at difficulty 16, hex encoded. Guards
/// the canonical block byte layout; recomputed by tests and config loaders.
pub const GENESIS_DIGEST_D16: &str =
    "f100d51451b6364d0f1687f6493a6d29e1d84ed38a7860be585d5b696f4ef233";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config io: {0}")]
    Io(String),
    #[error("config parse: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Two-state churn: per-tick failure and recovery probabilities. The
/// stationary online fraction is recover / (fail + recover).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChurnParams {
    pub fail: f64,
    pub recover: f64,
}

impl ChurnParams {
    pub fn frozen() -> Self {
        ChurnParams {
            fail: 0.0,
            recover: 0.0,
        }
    }

    pub fn validate(&self, what: &str) -> Result<(), ConfigError> {
        for (name, p) in [("fail", self.fail), ("recover", self.recover)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(ConfigError::Invalid(format!(
                    "{what}.{name} = {p} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Network delay model, in ticks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum DelayModel {
    /// Every message takes exactly this many ticks.
    Fixed { ticks: u64 },
    /// Uniform over [min, max].
    Uniform { min: u64, max: u64 },
    /// Geometric-ish: exponential with the given mean, rounded up.
    Exponential { mean: f64 },
}

impl Default for DelayModel {
    fn default() -> Self {
        DelayModel::Fixed { ticks: 1 }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResourceConfig {
    /// Total unit resources |R|.
    pub total: usize,
    /// Fraction owned by the attacker.
    pub attacker_fraction: f64,
    pub churn: ChurnParams,
}

impl Default for ResourceConfig {
    fn default() -> Self {
        ResourceConfig {
            total: 64,
            attacker_fraction: 0.0,
            churn: ChurnParams {
                fail: 0.001,
                recover: 0.1,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiningConfig {
    /// Expected ticks between block discoveries across the whole network.
    pub tau_ticks: f64,
    /// Proof-of-work difficulty actually solved for each block.
    pub difficulty: u32,
    /// Nonce budget per solve.
    pub max_solve_attempts: u64,
    /// Whether mining runs at all (off for pure agreement scenarios).
    #[serde(default = "default_true")]
    pub enabled: bool,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            tau_ticks: 120.0,
            difficulty: 4,
            max_solve_attempts: 1 << 24,
            enabled: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    /// Synthetic pre-chain length (the migration cut height).
    pub chain_length: u64,
    /// Common-prefix safety margin k: the last k pre-chain blocks are
    /// re-committed through agreement instead of being trusted.
    pub safety_margin: u64,
    /// Online window j: the newest j eligible identities start online.
    pub online_window: u64,
    /// Attacker's share of pre-chain blocks outside the window.
    pub attacker_block_share: f64,
    /// Attacker's share of the last `online_window + safety_margin` blocks;
    /// defaults to `attacker_block_share`.
    pub attacker_window_share: Option<f64>,
    /// How many of the chosen initial voters start offline.
    pub initial_offline_voters: u64,
    /// Optional chain fixture to load instead of synthesizing.
    pub chain_file: Option<String>,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            chain_length: 30,
            safety_margin: 4,
            online_window: 7,
            attacker_block_share: 0.0,
            attacker_window_share: None,
            initial_offline_voters: 0,
            chain_file: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VoterChurnConfig {
    pub churn: ChurnParams,
}

impl Default for VoterChurnConfig {
    fn default() -> Self {
        VoterChurnConfig {
            churn: ChurnParams::frozen(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscoinConfig {
    /// Coins minted per committed block.
    pub reward: u64,
    /// Initial balance granted to every bootstrap voter account.
    pub initial_balance: i64,
    /// Inject one honest transfer every this many ticks (0 = never).
    pub tx_interval: u64,
    /// Value of injected transfers.
    pub tx_value: u64,
}

impl Default for DiscoinConfig {
    fn default() -> Self {
        DiscoinConfig {
            reward: 50,
            initial_balance: 1_000,
            tx_interval: 0,
            tx_value: 5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "strategy", rename_all = "kebab-case")]
pub enum AttackerStrategy {
    /// Attacker peers follow the protocol.
    #[default]
    Honest,
    /// Stop voting on block and join operations for other entities' peers
    /// once the attacker holds at least a third of the online voters.
    Withhold,
    /// Periodically inject a pair of conflicting transfers at two peers.
    DoubleSpend { period: u64, value: u64 },
    /// Scripted fault injection from this many attacker-held voters:
    /// dropped and duplicated messages plus equivocating pre-prepares.
    Byzantine {
        voters: usize,
        drop_prob: f64,
        dup_prob: f64,
        equivocate: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ScriptConfig {
    /// Force two simultaneous sibling blocks on the same parent at this
    /// tick (fork-resolution scenarios).
    pub fork_at: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub duration_ticks: u64,
    /// Sample the metric time series every this many ticks.
    pub sample_interval: u64,
    pub resources: ResourceConfig,
    pub voter_churn: VoterChurnConfig,
    pub mining: MiningConfig,
    pub bootstrap: BootstrapConfig,
    pub network: DelayModel,
    pub agreement: ReplicaConfig,
    pub discoin: DiscoinConfig,
    pub attacker: AttackerStrategy,
    pub script: ScriptConfig,
    /// Genesis difficulty field value (not solved for; the genesis block is
    /// a fixed constant).
    pub genesis_difficulty: u32,
    /// Optional integrity pin for the genesis digest at difficulty 16.
    pub expected_genesis_digest: Option<String>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 0,
            duration_ticks: 2_000,
            sample_interval: 1,
            resources: ResourceConfig::default(),
            voter_churn: VoterChurnConfig::default(),
            mining: MiningConfig::default(),
            bootstrap: BootstrapConfig::default(),
            network: DelayModel::default(),
            agreement: ReplicaConfig::default(),
            discoin: DiscoinConfig::default(),
            attacker: AttackerStrategy::default(),
            script: ScriptConfig::default(),
            genesis_difficulty: 16,
            expected_genesis_digest: None,
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.duration_ticks == 0 {
            return Err(ConfigError::Invalid("duration_ticks must be > 0".into()));
        }
        if self.sample_interval == 0 {
            return Err(ConfigError::Invalid("sample_interval must be > 0".into()));
        }
        self.resources.churn.validate("resources.churn")?;
        self.voter_churn.churn.validate("voter_churn.churn")?;
        if !(0.0..=1.0).contains(&self.resources.attacker_fraction) {
            return Err(ConfigError::Invalid(format!(
                "attacker_fraction {} outside [0, 1]",
                self.resources.attacker_fraction
            )));
        }
        if self.resources.total == 0 {
            return Err(ConfigError::Invalid("resources.total must be > 0".into()));
        }
        if self.mining.enabled && !(self.mining.tau_ticks > 0.0) {
            return Err(ConfigError::Invalid("mining.tau_ticks must be > 0".into()));
        }
        if self.mining.difficulty == 0 || self.mining.difficulty > 24 {
            return Err(ConfigError::Invalid(
                "mining.difficulty must be within 1..=24 (solved for in-process)".into(),
            ));
        }
        let b = &self.bootstrap;
        if b.safety_margin >= b.chain_length {
            return Err(ConfigError::Invalid(
                "bootstrap.safety_margin must be below chain_length".into(),
            ));
        }
        if b.online_window == 0 || b.online_window > b.chain_length - b.safety_margin {
            return Err(ConfigError::Invalid(
                "bootstrap.online_window outside 1..=chain_length-safety_margin".into(),
            ));
        }
        if !(0.0..=1.0).contains(&b.attacker_block_share) {
            return Err(ConfigError::Invalid(
                "bootstrap.attacker_block_share outside [0, 1]".into(),
            ));
        }
        if let Some(w) = b.attacker_window_share {
            if !(0.0..=1.0).contains(&w) {
                return Err(ConfigError::Invalid(
                    "bootstrap.attacker_window_share outside [0, 1]".into(),
                ));
            }
        }
        if let DelayModel::Uniform { min, max } = self.network {
            if min > max {
                return Err(ConfigError::Invalid("network min > max".into()));
            }
        }
        if let DelayModel::Exponential { mean } = self.network {
            if !(mean >= 0.0) {
                return Err(ConfigError::Invalid("network mean < 0".into()));
            }
        }
        if self.discoin.initial_balance < 0 {
            return Err(ConfigError::Invalid("initial_balance < 0".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ScenarioConfig::default();
        cfg.validate().unwrap();
        let text = toml::to_string(&cfg).unwrap();
        let back = ScenarioConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn sparse_toml_uses_defaults() {
        let cfg = ScenarioConfig::from_toml_str("seed = 7\nduration_ticks = 100\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.duration_ticks, 100);
        assert_eq!(cfg.mining.difficulty, 4);
    }

    #[test]
    fn bad_values_rejected() {
        assert!(ScenarioConfig::from_toml_str("duration_ticks = 0").is_err());
        let text = "[resources]\nattacker_fraction = 1.5\n";
        assert!(ScenarioConfig::from_toml_str(text).is_err());
        let text = "[bootstrap]\nchain_length = 5\nsafety_margin = 5\n";
        assert!(ScenarioConfig::from_toml_str(text).is_err());
    }
}
