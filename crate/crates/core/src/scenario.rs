//! Scenario files: one experiment, its configuration and run size.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{ChannelError, ChannelModel, ChannelOptions, ChannelTables};
use crate::config::{
    validate_assignments, validate_config, ConfigError, SignalAssignment, SignalId, SimConfig,
    ValidatedConfig,
};
use crate::protocol::KeyRateParams;
use crate::receiver::DeadTimeMode;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error("experiment {experiment} requires {what}")]
    Missing { experiment: String, what: String },
    #[error("unknown parameter {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for {key}")]
    BadValue { key: String, value: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// Crosstalk, SNR and tomography from time-bin frames.
    TimebinXt,
    /// All three signals with per-collection gating; checks that the
    /// delayed signal sees no crosstalk.
    TimebinB,
    /// Extinction ratio of destructive interference per output group.
    PhaseEr,
    /// Counts versus total phase and visibility fit.
    PhaseSweep,
    Bb84,
    Bb84Eve,
    /// Detection rates and system capacity.
    Capacity,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::TimebinXt => "timebin_xt",
            ExperimentKind::TimebinB => "timebin_b",
            ExperimentKind::PhaseEr => "phase_er",
            ExperimentKind::PhaseSweep => "phase_sweep",
            ExperimentKind::Bb84 => "bb84",
            ExperimentKind::Bb84Eve => "bb84_eve",
            ExperimentKind::Capacity => "capacity",
        }
    }
}

/// Output groups read out for each signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Collections {
    #[serde(rename = "A")]
    pub a: Vec<u8>,
    #[serde(rename = "B")]
    pub b: Vec<u8>,
    #[serde(rename = "C")]
    pub c: Vec<u8>,
}

impl Default for Collections {
    fn default() -> Self {
        Self {
            a: vec![1],
            b: vec![2, 3],
            c: vec![4, 5],
        }
    }
}

impl Collections {
    pub fn of(&self, s: SignalId) -> &[u8] {
        match s {
            SignalId::A => &self.a,
            SignalId::B => &self.b,
            SignalId::C => &self.c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReceiverSettings {
    /// Interferometer visibility.
    pub visibility: f64,
    pub dead_time_mode: DeadTimeMode,
    /// Dark counts per second per detector.
    pub dark_rate: f64,
}

impl Default for ReceiverSettings {
    fn default() -> Self {
        Self {
            visibility: 0.93,
            dead_time_mode: DeadTimeMode::NonParalyzable,
            dark_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseSettings {
    /// Transmitter differential phase for the extinction measurement.
    pub phi_a: f64,
    pub phi_b: f64,
    /// Transmitter phases for the sweep.
    pub phases: Vec<f64>,
}

impl Default for PhaseSettings {
    fn default() -> Self {
        Self {
            phi_a: PI,
            phi_b: 0.0,
            phases: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetRates {
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "B")]
    pub b: f64,
    #[serde(rename = "C")]
    pub c: f64,
}

impl TargetRates {
    pub fn of(&self, s: SignalId) -> f64 {
        match s {
            SignalId::A => self.a,
            SignalId::B => self.b,
            SignalId::C => self.c,
        }
    }
}

fn default_frames() -> u64 {
    1_000_000
}

fn default_slot() -> Option<usize> {
    Some(20)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub experiment: ExperimentKind,
    #[serde(default = "default_frames")]
    pub n_frames: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Channel table file; relative paths resolve against the scenario file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_data: Option<PathBuf>,
    /// Fixed slot for SNR and tomography frames; `None` draws uniformly.
    #[serde(default = "default_slot")]
    pub time_bin_slot: Option<usize>,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub channel: ChannelOptions,
    /// Channel used for the per-collection rate prediction of the
    /// capacity experiment.
    #[serde(default)]
    pub reference_channel: ChannelOptions,
    #[serde(default = "SignalAssignment::default_set")]
    pub signals: Vec<SignalAssignment>,
    #[serde(default)]
    pub collections: Collections,
    #[serde(default)]
    pub receiver: ReceiverSettings,
    #[serde(default)]
    pub phase: PhaseSettings,
    #[serde(default)]
    pub key_rate: KeyRateParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_cps: Option<TargetRates>,
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl Scenario {
    pub fn from_toml_str(s: &str) -> Result<Self, ScenarioError> {
        Ok(toml::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut s = Self::from_toml_str(&text)?;
        s.base_dir = path.parent().map(Path::to_path_buf);
        Ok(s)
    }

    pub fn validated_config(&self) -> Result<ValidatedConfig, ScenarioError> {
        Ok(validate_config(self.sim.clone())?)
    }

    fn tables(&self) -> Result<ChannelTables, ScenarioError> {
        match &self.channel_data {
            None => Ok(ChannelTables::builtin()),
            Some(p) => {
                let path = match (&self.base_dir, p.is_relative()) {
                    (Some(base), true) => base.join(p),
                    _ => p.clone(),
                };
                Ok(ChannelTables::load(&path)?)
            }
        }
    }

    pub fn channel_model(&self) -> Result<ChannelModel, ScenarioError> {
        Ok(ChannelModel::new(&self.tables()?, &self.channel)?)
    }

    pub fn reference_channel_model(&self) -> Result<ChannelModel, ScenarioError> {
        Ok(ChannelModel::new(&self.tables()?, &self.reference_channel)?)
    }

    /// Checks everything a run needs before any frame is simulated.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let cfg = self.validated_config()?;
        validate_assignments(&self.signals)?;
        self.channel_model()?;
        let missing = |what: &str| {
            Err(ScenarioError::Missing {
                experiment: self.experiment.name().into(),
                what: what.into(),
            })
        };
        if self.n_frames == 0 {
            return Err(ScenarioError::Invalid("n_frames must be positive".into()));
        }
        if self.signals.is_empty() {
            return missing("at least one signal");
        }
        if let Some(slot) = self.time_bin_slot {
            if slot >= cfg.d {
                return Err(ScenarioError::Invalid(format!("time_bin_slot {slot} >= d = {}", cfg.d)));
            }
        }
        for s in &self.signals {
            let groups = self.collections.of(s.signal);
            if groups.is_empty() || groups.iter().any(|&g| g == 0 || g > 5) {
                return Err(ScenarioError::Invalid(format!("bad collection for signal {}", s.signal)));
            }
        }
        let v = self.receiver.visibility;
        if !(v > 0.0 && v <= 1.0) {
            return Err(ScenarioError::Invalid(format!("visibility {v} outside (0, 1]")));
        }
        if matches!(self.experiment, ExperimentKind::Bb84 | ExperimentKind::Bb84Eve) {
            crate::protocol::key_rate(&self.key_rate).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        }
        match self.experiment {
            ExperimentKind::PhaseSweep if self.phase.phases.len() < 3 => missing("phase.phases with at least 3 values"),
            ExperimentKind::Capacity if self.target_cps.is_none() => missing("target_cps"),
            ExperimentKind::TimebinXt if self.signals.len() < 2 => missing("at least two signals"),
            _ => Ok(()),
        }
    }

    /// Sets a dotted key such as `sim.mu_in` or `n_frames` from its textual
    /// value. Only keys present in the serialized scenario are accepted.
    pub fn with_param(&self, key: &str, value: &str) -> Result<Scenario, ScenarioError> {
        let mut root = toml::Value::try_from(self).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        let bad = || ScenarioError::BadValue {
            key: key.into(),
            value: value.into(),
        };
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_table_mut()
                .and_then(|t| t.get_mut(part))
                .ok_or_else(|| ScenarioError::UnknownKey(key.into()))?;
        }
        let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let new = match (&*slot, parsed) {
            (toml::Value::Integer(_), toml::Value::Float(f)) if f.fract() == 0.0 && f.abs() < 9.0e18 => {
                toml::Value::Integer(f as i64)
            }
            (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (old, new) if std::mem::discriminant(old) == std::mem::discriminant(&new) => new,
            _ => return Err(bad()),
        };
        *slot = new;
        let mut out: Scenario = root.try_into().map_err(|_| bad())?;
        out.base_dir = self.base_dir.clone();
        Ok(out)
    }
}
