//! Experiment configuration: a single TOML file describing the model, the
//! synthetic federation, the device fleet, and the run plan.
//!
//! Parsing is strict — unknown keys are errors — and every validation
//! failure names the offending key path.

use crate::data::FederationSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::{Hyper, OptimizerKind};
use crate::protocols::{ProtocolKind, RunPlan};
use crate::sim::DeviceProfile;
use std::path::Path;

fn default_batch_size() -> usize {
    8
}
fn default_lr() -> f64 {
    0.1
}
fn default_element_size() -> usize {
    4
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Sgd
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    pub protocol: ProtocolKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_steps: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_budget_s: Option<f64>,
    /// One flexibility ratio per client.
    pub qs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregation_period: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_steps: Option<u64>,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_align: Option<u64>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_element_size")]
    pub element_size: usize,
    #[serde(default)]
    pub server_seconds_per_block_per_sample: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceConfig {
    /// Client indices assigned to this profile.
    pub clients: Vec<usize>,
    pub profile: DeviceProfile,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed list; single runs use the first, sweeps iterate over all.
    pub seeds: Vec<u64>,
    pub model: ModelConfig,
    pub federation: FederationSpec,
    pub plan: PlanConfig,
    pub devices: Vec<DeviceConfig>,
}

impl ExperimentConfig {
    pub fn from_str(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        self.model.validate()?;
        self.federation.validate()?;
        if self.model.input_dim != self.federation.input_dim {
            return Err(Error::Config(format!(
                "model.input_dim = {} but federation.input_dim = {}",
                self.model.input_dim, self.federation.input_dim
            )));
        }
        if self.model.num_classes != self.federation.num_classes {
            return Err(Error::Config(format!(
                "model.num_classes = {} but federation.num_classes = {}",
                self.model.num_classes, self.federation.num_classes
            )));
        }
        let n = self.federation.num_clients;
        let mut owner = vec![None; n];
        for (di, d) in self.devices.iter().enumerate() {
            d.profile.validate(&format!("devices[{di}].profile"))?;
            for &c in &d.clients {
                if c >= n {
                    return Err(Error::Config(format!(
                        "devices[{di}].clients references client {c}, but there are only {n}"
                    )));
                }
                if let Some(prev) = owner[c] {
                    return Err(Error::Config(format!(
                        "client {c} assigned to both devices[{prev}] and devices[{di}]"
                    )));
                }
                owner[c] = Some(di);
            }
        }
        if let Some(c) = owner.iter().position(Option::is_none) {
            return Err(Error::Config(format!("client {c} has no device profile")));
        }
        self.run_plan().validate(n)?;
        Ok(())
    }

    /// Per-client device profiles in client order.
    pub fn device_table(&self) -> Vec<DeviceProfile> {
        let n = self.federation.num_clients;
        let mut table = vec![self.devices[0].profile.clone(); n];
        for d in &self.devices {
            for &c in &d.clients {
                table[c] = d.profile.clone();
            }
        }
        table
    }

    pub fn hyper(&self) -> Hyper {
        match self.plan.optimizer {
            OptimizerKind::Sgd => Hyper::sgd(self.plan.lr),
            OptimizerKind::Adam => Hyper::adam(self.plan.lr),
        }
    }

    pub fn run_plan(&self) -> RunPlan {
        RunPlan {
            protocol: self.plan.protocol,
            target_steps: self.plan.target_steps,
            time_budget_s: self.plan.time_budget_s,
            qs: self.plan.qs.clone(),
            aggregation_period: self.plan.aggregation_period,
            local_steps: self.plan.local_steps,
            lambda: self.plan.lambda,
            k_align: self.plan.k_align,
            batch_size: self.plan.batch_size,
            hyper: self.hyper(),
            element_size: self.plan.element_size,
            server_seconds_per_block_per_sample: self.plan.server_seconds_per_block_per_sample,
        }
    }

    /// Canonical serialized form; `dump(load(c))` is stable under reload.
    pub fn canonical_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Documented schema with every default spelled out; served by the CLI's
/// `print-config-reference` subcommand.
pub const CONFIG_REFERENCE: &str = r#"# Experiment configuration reference
# All keys are shown; [optional] keys list their defaults. Unknown keys are
# rejected. All randomness derives from `seeds` and `federation.seed`.

# Seed list: `run` uses the first seed, `sweep` averages over all of them.
seeds = [1, 2, 3, 4, 5]

[model]
input_dim = 32            # feature width of the synthetic data
hidden_dim = 32           # width d of every middle block
num_middle_blocks = 10    # M
num_classes = 8           # K
block_kind = "mlp_residual"   # or "attention_mlp_residual"
# seq_len = 4             # [optional] required only for attention blocks

[federation]
num_clients = 5
input_dim = 32            # must match model.input_dim
num_classes = 8           # must match model.num_classes
samples_per_client = 200
theta_max = 1.5           # per-client prototype rotation, radians in [0, pi]
label_alpha = 0.5         # Dirichlet concentration of label skew (> 0)
noise_sigma = 0.3
train_fraction = 0.8
seed = 0                  # data seed, combined with the run seed
# clusters_per_class = 1  # [optional] 2 = antipodal cluster pairs per class
# task = "prototype"      # [optional] or "conjunction" (pairwise concept labels)

[plan]
protocol = "flexp_sfl"    # or "sfl", "fedavg"
target_steps = 500        # exactly one of target_steps / time_budget_s
# time_budget_s = 60.0
qs = [0.5, 0.5, 0.5, 0.5, 0.5]   # flexibility ratio per client
# aggregation_period = 1  # [baselines only] E, rounds between aggregations
# local_steps = 1         # [fedavg only] H, local steps per round
lambda = 0.25             # [optional, default 0] alignment weight
k_align = 5               # [optional, default off] probe every K steps
batch_size = 8            # [optional, default 8]
optimizer = "sgd"         # [optional, default "sgd"] or "adam"
lr = 0.1                  # [optional, default 0.1]
element_size = 4          # [optional, default 4] wire floats: 4 or 8 bytes
server_seconds_per_block_per_sample = 0.0   # [optional, default 0]

# Each client must appear in exactly one device group.
[[devices]]
clients = [0, 1, 2, 3]

[devices.profile]
name = "fast-edge"
fwd_seconds_per_block_per_sample = 0.001
bwd_multiplier = 2.0      # [optional, default 2.0]
memory_bytes_budget = 1073741824
uplink_bytes_per_s = 1e6
downlink_bytes_per_s = 1e7
latency_s = 0.01
dropout_prob = 0.0        # [optional, default 0] per-round dropout chance

[[devices]]
clients = [4]

[devices.profile]
name = "slow-edge"
fwd_seconds_per_block_per_sample = 0.01
memory_bytes_budget = 268435456
uplink_bytes_per_s = 1e6
downlink_bytes_per_s = 1e7
latency_s = 0.01
"#;
