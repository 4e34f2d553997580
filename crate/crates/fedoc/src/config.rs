//! Experiment configuration: TOML parsing, defaults, validation.
//!
//! An empty config file yields the default simulation parameters (60 clients,
//! 500 rounds, 5 local epochs, 20-sample batches, 50 MHz total bandwidth,
//! 1 W / 5 W transmit powers, -174 dBm/Hz noise density, initial learning
//! rate 0.01 with 0.995 exponential decay). Unknown keys are rejected, not
//! ignored; validation errors carry field paths.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{FedocError, Result};

/// Which training algorithm drives a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlgorithmKind {
    FedocFastest,
    FedocFixed,
    Hfl,
    Fedmes,
    FlEocd,
}

impl AlgorithmKind {
    pub const ALL: [AlgorithmKind; 5] = [
        AlgorithmKind::FedocFastest,
        AlgorithmKind::FedocFixed,
        AlgorithmKind::Hfl,
        AlgorithmKind::Fedmes,
        AlgorithmKind::FlEocd,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AlgorithmKind::FedocFastest => "fedoc-fastest",
            AlgorithmKind::FedocFixed => "fedoc-fixed",
            AlgorithmKind::Hfl => "hfl",
            AlgorithmKind::Fedmes => "fedmes",
            AlgorithmKind::FlEocd => "fl-eocd",
        }
    }
}

impl fmt::Display for AlgorithmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AlgorithmKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "fedoc-fastest" => Ok(AlgorithmKind::FedocFastest),
            "fedoc-fixed" => Ok(AlgorithmKind::FedocFixed),
            "hfl" => Ok(AlgorithmKind::Hfl),
            "fedmes" => Ok(AlgorithmKind::Fedmes),
            "fl-eocd" => Ok(AlgorithmKind::FlEocd),
            other => Err(format!(
                "unknown algorithm '{other}' (expected fedoc-fastest, fedoc-fixed, hfl, fedmes, fl-eocd)"
            )),
        }
    }
}

/// Cloud aggregation interval. `inf` means cloud-free operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kappa {
    Every(u64),
    Inf,
}

impl Kappa {
    /// True when `round` (1-based) is a cloud aggregation round.
    pub fn divides(&self, round: usize) -> bool {
        match self {
            Kappa::Every(k) => *k > 0 && round % (*k as usize) == 0,
            Kappa::Inf => false,
        }
    }

    pub fn is_inf(&self) -> bool {
        matches!(self, Kappa::Inf)
    }
}

impl fmt::Display for Kappa {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Kappa::Every(k) => write!(f, "{k}"),
            Kappa::Inf => f.write_str("inf"),
        }
    }
}

impl FromStr for Kappa {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "inf" {
            Ok(Kappa::Inf)
        } else {
            s.parse::<u64>()
                .map(Kappa::Every)
                .map_err(|_| format!("kappa must be a positive integer or 'inf', got '{s}'"))
        }
    }
}

impl Serialize for Kappa {
    fn serialize<S: Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Kappa::Every(k) => ser.serialize_u64(*k),
            Kappa::Inf => ser.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Kappa {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        struct KappaVisitor;
        impl Visitor<'_> for KappaVisitor {
            type Value = Kappa;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a positive integer or the string \"inf\"")
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Kappa, E> {
                Ok(Kappa::Every(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Kappa, E> {
                if v < 0 {
                    Err(E::custom("kappa must be non-negative"))
                } else {
                    Ok(Kappa::Every(v as u64))
                }
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Kappa, E> {
                Kappa::from_str(v).map_err(E::custom)
            }
        }
        de.deserialize_any(KappaVisitor)
    }
}

/// How the relay client is chosen within an overlap region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelayPolicy {
    /// Uniform random among the overlap set, fixed for the run.
    Random,
    /// Lowest client id; handy for hand-checkable fixtures.
    LowestId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopologySpec {
    /// Number of edge servers (L).
    pub num_servers: usize,
    /// Total number of clients (K).
    pub num_clients: usize,
    /// Overlap-set sizes per adjacent pair; length must be L-1.
    pub overlap_sizes: Vec<usize>,
    pub cell_radius_m: f64,
    /// ES spacing is `2 * radius * (1 - overlap_fraction)`.
    pub overlap_fraction: f64,
    /// Solve the equal-effective-load equations for the per-cell LC counts.
    pub balance: bool,
    /// Explicit per-cell LC counts; overrides `balance` when present.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub local_counts: Option<Vec<usize>>,
    pub relay_policy: RelayPolicy,
}

impl Default for TopologySpec {
    fn default() -> Self {
        TopologySpec {
            num_servers: 3,
            num_clients: 60,
            overlap_sizes: vec![10, 10],
            cell_radius_m: 600.0,
            overlap_fraction: 0.25,
            balance: true,
            local_counts: None,
            relay_policy: RelayPolicy::Random,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Synthetic,
    Mnist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    // Synthetic blob parameters.
    pub classes: usize,
    pub dims: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub spread: f64,
    // MNIST (IDX files) parameters.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    /// Stratified training-subset size for desk-scale runs.
    pub desk_subset: usize,
    /// Use the full training set instead of the desk-scale subset.
    pub full_set: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            kind: DatasetKind::Synthetic,
            classes: 10,
            dims: 30,
            per_class: 600,
            test_per_class: 100,
            spread: 1.0,
            data_dir: None,
            desk_subset: 6000,
            full_set: false,
        }
    }
}

/// Which cell's class allowance an overlapping client draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OcClassSource {
    /// A randomly chosen home cell's allowance (recorded in the plan).
    Home,
    /// The union of both covering cells' allowances.
    Union,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSpec {
    pub classes_per_client: usize,
    pub classes_per_cell: usize,
    /// 0.0 = equal shard sizes; in (0, 1) spreads sizes linearly around the mean.
    pub size_skew: f64,
    pub oc_class_source: OcClassSource,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        PartitionSpec {
            classes_per_client: 2,
            classes_per_cell: 5,
            size_skew: 0.0,
            oc_class_source: OcClassSource::Home,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// eta0 * decay^(r-1), constant within a round.
    Exponential,
    /// 1 / (r * (E - 1)); the schedule assumed by the convergence bound.
    Theoretical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub eta0: f64,
    pub decay: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Exponential,
            eta0: 0.01,
            decay: 0.995,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchKind {
    Logistic,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSpec {
    pub kind: ArchKind,
    /// Hidden width for the MLP; 28 gives ~22k parameters on 784-dim input.
    pub hidden: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            kind: ArchKind::Logistic,
            hidden: 28,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSpec {
    /// Total number of rounds (R).
    pub rounds: usize,
    /// Local epochs per round (E); SGD iterations when `iteration_mode` is set.
    pub local_epochs: usize,
    pub batch_size: usize,
    /// Treat `local_epochs` as mini-batch iterations instead of data passes.
    pub iteration_mode: bool,
    pub schedule: ScheduleSpec,
    pub arch: ArchSpec,
    /// Target used by time-to-accuracy reporting and `sweep-kappa`.
    pub target_accuracy: f64,
}

impl Default for TrainingSpec {
    fn default() -> Self {
        TrainingSpec {
            rounds: 500,
            local_epochs: 5,
            batch_size: 20,
            iteration_mode: false,
            schedule: ScheduleSpec::default(),
            arch: ArchSpec::default(),
            target_accuracy: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LogBase {
    /// Rates in bits/s (Shannon capacity convention).
    Log2,
    /// Natural log, for sensitivity checks.
    Ln,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelayGainMode {
    /// Both relay legs use the worse of the ES-to-ROC and ROC-to-ES gains.
    Shared,
    /// Downlink leg uses the source-ES link gain, uplink leg the destination's.
    Distinct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelSpec {
    pub bandwidth_hz: f64,
    pub client_power_w: f64,
    pub es_power_w: f64,
    pub noise_dbm_per_hz: f64,
    pub pathloss_fixed_db: f64,
    pub pathloss_distance_coeff: f64,
    pub rayleigh_variance: f64,
    /// Per-epoch local compute time range in seconds, sampled per client.
    pub compute_time_range_s: [f64; 2],
    /// t_c: cloud round latency as a multiple of the slowest edge round.
    pub cloud_edge_ratio: f64,
    /// Model size in bits; defaults to parameter count x 64.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_bits: Option<u64>,
    pub log_base: LogBase,
    pub relay_gain_mode: RelayGainMode,
    /// Redraw small-scale fading each round instead of once per run.
    pub resample_gains_per_round: bool,
}

impl Default for ChannelSpec {
    fn default() -> Self {
        ChannelSpec {
            bandwidth_hz: 50e6,
            client_power_w: 1.0,
            es_power_w: 5.0,
            noise_dbm_per_hz: -174.0,
            pathloss_fixed_db: 128.1,
            pathloss_distance_coeff: 37.6,
            rayleigh_variance: 1.0,
            compute_time_range_s: [0.1, 0.2],
            cloud_edge_ratio: 10.0,
            model_bits: None,
            log_base: LogBase::Log2,
            relay_gain_mode: RelayGainMode::Shared,
            resample_gains_per_round: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub topology: u64,
    pub data: u64,
    pub training: u64,
    pub channel: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            topology: 1,
            data: 2,
            training: 3,
            channel: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpec {
    /// Evaluate on the test split every this many rounds.
    pub eval_interval: usize,
    /// Optional stratified test subset for faster evaluation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_subset: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// End the run at the first evaluation that reaches the target accuracy.
    pub stop_at_target: bool,
    /// Record per-round edge models in memory (costs rounds x L x params doubles).
    pub record_trajectories: bool,
    /// 0 disables periodic checkpoints.
    pub checkpoint_interval: usize,
}

impl Default for RunSpec {
    fn default() -> Self {
        RunSpec {
            eval_interval: 5,
            eval_subset: None,
            output_dir: None,
            stop_at_target: false,
            record_trajectories: false,
            checkpoint_interval: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub algorithm: AlgorithmKind,
    pub kappa: Kappa,
    pub topology: TopologySpec,
    pub dataset: DatasetSpec,
    pub partition: PartitionSpec,
    pub training: TrainingSpec,
    pub channel: ChannelSpec,
    pub seeds: Seeds,
    pub run: RunSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            algorithm: AlgorithmKind::FedocFastest,
            kappa: Kappa::Inf,
            topology: TopologySpec::default(),
            dataset: DatasetSpec::default(),
            partition: PartitionSpec::default(),
            training: TrainingSpec::default(),
            channel: ChannelSpec::default(),
            seeds: Seeds::default(),
            run: RunSpec::default(),
        }
    }
}

impl ExperimentConfig {
    /// Number of classes implied by the dataset spec.
    pub fn num_classes(&self) -> usize {
        match self.dataset.kind {
            DatasetKind::Synthetic => self.dataset.classes,
            DatasetKind::Mnist => 10,
        }
    }

    /// Resolve the MNIST data directory from config or `FEDOC_DATA_DIR`.
    pub fn mnist_dir(&self) -> Option<PathBuf> {
        self.dataset
            .data_dir
            .clone()
            .or_else(|| std::env::var_os("FEDOC_DATA_DIR").map(PathBuf::from))
    }

    /// Cap dataset size and round count for CI-scale runs.
    pub fn apply_desk_scale(&mut self) {
        self.training.rounds = self.training.rounds.min(60);
        match self.dataset.kind {
            DatasetKind::Synthetic => {
                self.dataset.per_class = self.dataset.per_class.min(100);
                self.dataset.test_per_class = self.dataset.test_per_class.min(50);
            }
            DatasetKind::Mnist => {
                self.dataset.full_set = false;
                self.dataset.desk_subset = self.dataset.desk_subset.min(6000);
            }
        }
    }

    /// Validate every field; returns all violations with field paths.
    pub fn validate(&self) -> Result<()> {
        let mut v: Vec<String> = Vec::new();
        let t = &self.topology;
        if t.num_servers == 0 {
            v.push("topology.num_servers: must be >= 1".into());
        }
        if t.num_clients == 0 {
            v.push("topology.num_clients: must be >= 1".into());
        }
        if t.num_servers >= 1 && t.overlap_sizes.len() + 1 != t.num_servers {
            v.push(format!(
                "topology.overlap_sizes: expected {} entries for {} servers, got {}",
                t.num_servers.saturating_sub(1),
                t.num_servers,
                t.overlap_sizes.len()
            ));
        }
        let any_overlap = t.overlap_sizes.iter().any(|&s| s > 0);
        if any_overlap && (t.overlap_fraction <= 0.0 || t.overlap_fraction >= 0.5) {
            v.push(format!(
                "topology.overlap_fraction: must be in (0, 0.5) when overlap regions are populated, got {}",
                t.overlap_fraction
            ));
        }
        if !any_overlap && !(0.0..0.5).contains(&t.overlap_fraction) {
            v.push(format!(
                "topology.overlap_fraction: must be in [0, 0.5), got {}",
                t.overlap_fraction
            ));
        }
        if t.cell_radius_m <= 0.0 {
            v.push("topology.cell_radius_m: must be positive".into());
        }
        if let Some(counts) = &t.local_counts {
            if counts.len() != t.num_servers {
                v.push(format!(
                    "topology.local_counts: expected {} entries, got {}",
                    t.num_servers,
                    counts.len()
                ));
            } else {
                let total: usize = counts.iter().sum::<usize>() + t.overlap_sizes.iter().sum::<usize>();
                if total != t.num_clients {
                    v.push(format!(
                        "topology.local_counts: counts plus overlaps total {total}, but topology.num_clients = {}",
                        t.num_clients
                    ));
                }
            }
        } else if t.balance && t.overlap_sizes.len() + 1 == t.num_servers {
            if let Err(e) =
                crate::topology::balanced_local_counts(t.num_clients, t.num_servers, &t.overlap_sizes)
            {
                v.push(format!("topology.balance: {e}"));
            }
        }

        let d = &self.dataset;
        match d.kind {
            DatasetKind::Synthetic => {
                if d.classes < 2 {
                    v.push("dataset.classes: must be >= 2".into());
                }
                if d.dims == 0 {
                    v.push("dataset.dims: must be >= 1".into());
                }
                if d.per_class == 0 {
                    v.push("dataset.per_class: must be >= 1".into());
                }
                if d.spread <= 0.0 {
                    v.push("dataset.spread: must be positive".into());
                }
            }
            DatasetKind::Mnist => {
                if self.mnist_dir().is_none() {
                    v.push("dataset.data_dir: required for kind = \"mnist\" (or set FEDOC_DATA_DIR)".into());
                }
            }
        }

        let p = &self.partition;
        let c = self.num_classes();
        if p.classes_per_client == 0 {
            v.push("partition.classes_per_client: must be >= 1".into());
        }
        if p.classes_per_client > p.classes_per_cell {
            v.push(format!(
                "partition.classes_per_client ({}) exceeds partition.classes_per_cell ({})",
                p.classes_per_client, p.classes_per_cell
            ));
        }
        if p.classes_per_cell > c {
            v.push(format!(
                "partition.classes_per_cell ({}) exceeds the dataset's {} classes",
                p.classes_per_cell, c
            ));
        }
        if !(0.0..1.0).contains(&p.size_skew) {
            v.push(format!("partition.size_skew: must be in [0, 1), got {}", p.size_skew));
        }

        let tr = &self.training;
        if tr.local_epochs == 0 {
            v.push("training.local_epochs: must be >= 1".into());
        }
        if tr.batch_size == 0 {
            v.push("training.batch_size: must be >= 1".into());
        }
        match tr.schedule.kind {
            ScheduleKind::Exponential => {
                if tr.schedule.eta0 <= 0.0 {
                    v.push("training.schedule.eta0: must be positive".into());
                }
                if tr.schedule.decay <= 0.0 || tr.schedule.decay > 1.0 {
                    v.push(format!(
                        "training.schedule.decay: must be in (0, 1], got {}",
                        tr.schedule.decay
                    ));
                }
            }
            ScheduleKind::Theoretical => {
                if tr.local_epochs < 2 {
                    v.push("training.schedule: theoretical schedule requires training.local_epochs >= 2".into());
                }
            }
        }
        if tr.arch.kind == ArchKind::Mlp && tr.arch.hidden == 0 {
            v.push("training.arch.hidden: must be >= 1 for the MLP".into());
        }
        if !(0.0..=1.0).contains(&tr.target_accuracy) {
            v.push(format!(
                "training.target_accuracy: must be in [0, 1], got {}",
                tr.target_accuracy
            ));
        }

        let ch = &self.channel;
        for (name, val) in [
            ("channel.bandwidth_hz", ch.bandwidth_hz),
            ("channel.client_power_w", ch.client_power_w),
            ("channel.es_power_w", ch.es_power_w),
            ("channel.rayleigh_variance", ch.rayleigh_variance),
        ] {
            if val <= 0.0 {
                v.push(format!("{name}: must be positive, got {val}"));
            }
        }
        if ch.cloud_edge_ratio < 0.0 {
            v.push(format!("channel.cloud_edge_ratio: must be >= 0, got {}", ch.cloud_edge_ratio));
        }
        let [lo, hi] = ch.compute_time_range_s;
        if lo <= 0.0 || hi < lo {
            v.push(format!(
                "channel.compute_time_range_s: need 0 < lo <= hi, got [{lo}, {hi}]"
            ));
        }
        if let Kappa::Every(0) = self.kappa {
            v.push("kappa: must be >= 1 or \"inf\"".into());
        }
        if self.run.eval_interval == 0 {
            v.push("run.eval_interval: must be >= 1".into());
        }

        if v.is_empty() {
            Ok(())
        } else {
            Err(FedocError::InvalidConfig { violations: v })
        }
    }
}

/// Parse a TOML config string; unknown keys are rejected.
pub fn from_toml_str(s: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| FedocError::InvalidConfig {
        violations: vec![e.to_string()],
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let s = std::fs::read_to_string(path).map_err(|e| FedocError::io(path, e))?;
    from_toml_str(&s)
}

pub fn to_toml_string(cfg: &ExperimentConfig) -> String {
    toml::to_string(cfg).expect("config serializes to TOML")
}

/// SHA-256 of the canonical JSON form; used as the run's content hash.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_string(cfg).expect("config serializes to JSON");
    let out = Sha256::digest(json.as_bytes());
    out.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_table_defaults() {
        let cfg = from_toml_str("").unwrap();
        assert_eq!(cfg.topology.num_clients, 60);
        assert_eq!(cfg.training.rounds, 500);
        assert_eq!(cfg.training.local_epochs, 5);
        assert_eq!(cfg.training.batch_size, 20);
        assert_eq!(cfg.channel.client_power_w, 1.0);
        assert_eq!(cfg.channel.es_power_w, 5.0);
        assert_eq!(cfg.channel.bandwidth_hz, 50e6);
        assert_eq!(cfg.channel.noise_dbm_per_hz, -174.0);
        assert_eq!(cfg.training.schedule.eta0, 0.01);
        assert_eq!(cfg.training.schedule.decay, 0.995);
        assert_eq!(cfg.topology.cell_radius_m, 600.0);
        assert_eq!(cfg.channel.cloud_edge_ratio, 10.0);
    }

    #[test]
    fn kappa_inf_sentinel() {
        let cfg = from_toml_str("kappa = \"inf\"").unwrap();
        assert!(cfg.kappa.is_inf());
        assert!(!cfg.kappa.divides(100));
        let cfg = from_toml_str("kappa = 10").unwrap();
        assert_eq!(cfg.kappa, Kappa::Every(10));
        assert!(cfg.kappa.divides(20));
        assert!(!cfg.kappa.divides(21));
    }

    #[test]
    fn class_budget_violation_names_both_fields() {
        let err = from_toml_str("[partition]\nclasses_per_client = 6\nclasses_per_cell = 5\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("classes_per_client"), "{msg}");
        assert!(msg.contains("classes_per_cell"), "{msg}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = from_toml_str("[topology]\nbogus_knob = 3\n").unwrap_err();
        assert!(err.to_string().contains("bogus_knob"), "{err}");
    }

    #[test]
    fn roundtrip_is_fixed_point() {
        let src = "kappa = \"inf\"\n[topology]\nnum_servers = 4\noverlap_sizes = [1, 2, 3]\n[dataset]\nkind = \"synthetic\"\nclasses = 4\n[partition]\nclasses_per_cell = 4\n";
        let a = from_toml_str(src).unwrap();
        let s1 = to_toml_string(&a);
        let b = from_toml_str(&s1).unwrap();
        assert_eq!(a, b);
        assert_eq!(s1, to_toml_string(&b));
        assert_eq!(config_hash(&a), config_hash(&b));
    }

    #[test]
    fn theoretical_schedule_requires_two_epochs() {
        let err = from_toml_str("[training]\nlocal_epochs = 1\n[training.schedule]\nkind = \"theoretical\"\n")
            .unwrap_err();
        assert!(err.to_string().contains("local_epochs"), "{err}");
    }

    #[test]
    fn desk_scale_caps() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_desk_scale();
        assert_eq!(cfg.training.rounds, 60);
        assert_eq!(cfg.dataset.per_class, 100);
    }
}
