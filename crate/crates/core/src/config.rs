//! Shared configuration, unit conventions and signal assignments.
//!
//! Every time quantity is an integer number of picoseconds ([`Picos`]).
//! A frame period is split into two equal halves: the first (`Δt1`) starts at
//! 0, the second (`Δt2`) starts at `frame_window_ps`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Integer picoseconds.
pub type Picos = u64;

/// Number of quasi-degenerate mode groups in the fiber.
pub const MODE_GROUPS: usize = 5;

/// Intensity-modulator extinction ratio that puts the time-bin SNR at 11.3 dB
/// for the default frame geometry (see `encoder::calibrate_im_extinction`).
pub const DEFAULT_IM_EXTINCTION: f64 = 848.9;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("d must be at least 2 (got {0})")]
    TooFewSlots(usize),
    #[error("d * pulse period = {slots_span} ps exceeds the frame window of {window} ps")]
    SlotsExceedWindow { slots_span: Picos, window: Picos },
    #[error("frame period {period} ps must equal twice the frame window {window} ps")]
    PeriodNotTwiceWindow { period: Picos, window: Picos },
    #[error("frame rate {rate} Hz is inconsistent with 1/frame_period = {expected} Hz")]
    FrameRateMismatch { rate: f64, expected: f64 },
    #[error("detector efficiency must lie in [0, 1] (got {0})")]
    Efficiency(f64),
    #[error("time-bin fraction p_tb must lie in [0, 1] (got {0})")]
    TimeBinFraction(f64),
    #[error("histogram resolution {res} ps must be positive and divide the frame period {period} ps")]
    HistogramResolution { res: Picos, period: Picos },
    #[error("mean photon number must be positive and finite (got {0})")]
    MeanPhotons(f64),
    #[error("intensity-modulator extinction must exceed 1 (got {0})")]
    Extinction(f64),
    #[error("jitter sigma must be finite and non-negative (got {0})")]
    Jitter(f64),
    #[error("pulse period must be positive")]
    PulsePeriod,
    #[error("signal {signal:?}: HG{n}{p} belongs to group {expected}, not {given}")]
    ModeGroupMismatch {
        signal: SignalId,
        n: u8,
        p: u8,
        expected: u8,
        given: u8,
    },
    #[error("signal {0:?} is assigned to group {1}, outside 1..=5")]
    GroupOutOfRange(SignalId, u8),
    #[error("signals {0:?} and {1:?} share input group {2}")]
    SharedInputGroup(SignalId, SignalId, u8),
    #[error("signal {0:?} is listed more than once")]
    DuplicateSignal(SignalId),
    #[error("input photon budgets are unbalanced: {min} vs {max} photons/frame (> 5 %)")]
    Unbalanced { min: f64, max: f64 },
}

/// Simulation-wide parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Pulse slots per frame.
    pub d: usize,
    pub pulse_period_ps: Picos,
    /// Duration of one half-frame (`Δt1`).
    pub frame_window_ps: Picos,
    /// `Δt1 + Δt2`.
    pub frame_period_ps: Picos,
    pub frame_rate_hz: f64,
    /// Mean photons per frame at the fiber input.
    pub mu_in: f64,
    pub eta: f64,
    pub dead_time_ps: Picos,
    pub hist_res_ps: Picos,
    pub p_tb: f64,
    /// Linear on/off ratio of the intensity modulator; `inf` means no leakage.
    pub im_extinction: f64,
    pub jitter_sigma_ps: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            d: 64,
            pulse_period_ps: 1540,
            frame_window_ps: 100_000,
            frame_period_ps: 200_000,
            frame_rate_hz: 5.0e6,
            mu_in: 1.0,
            eta: 0.15,
            dead_time_ps: 100_000,
            hist_res_ps: 25,
            p_tb: 0.5,
            im_extinction: DEFAULT_IM_EXTINCTION,
            jitter_sigma_ps: 100.0,
            seed: 1,
        }
    }
}

/// A [`SimConfig`] whose invariants have been checked.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedConfig {
    cfg: SimConfig,
    hist_bins: usize,
}

impl ValidatedConfig {
    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    /// Number of histogram bins spanning one frame period.
    pub fn hist_bins(&self) -> usize {
        self.hist_bins
    }

    /// Start of the given half-frame window, in ps from frame start.
    pub fn window_offset(&self, window: Window) -> Picos {
        match window {
            Window::Dt1 => 0,
            Window::Dt2 => self.cfg.frame_window_ps,
        }
    }

    pub fn window_of(&self, t: Picos) -> Window {
        if t < self.cfg.frame_window_ps {
            Window::Dt1
        } else {
            Window::Dt2
        }
    }
}

impl std::ops::Deref for ValidatedConfig {
    type Target = SimConfig;

    fn deref(&self) -> &SimConfig {
        &self.cfg
    }
}

pub fn validate_config(cfg: SimConfig) -> Result<ValidatedConfig, ConfigError> {
    if cfg.d < 2 {
        return Err(ConfigError::TooFewSlots(cfg.d));
    }
    if cfg.pulse_period_ps == 0 {
        return Err(ConfigError::PulsePeriod);
    }
    let slots_span = cfg.d as Picos * cfg.pulse_period_ps;
    if slots_span > cfg.frame_window_ps {
        return Err(ConfigError::SlotsExceedWindow {
            slots_span,
            window: cfg.frame_window_ps,
        });
    }
    if cfg.frame_period_ps != 2 * cfg.frame_window_ps {
        return Err(ConfigError::PeriodNotTwiceWindow {
            period: cfg.frame_period_ps,
            window: cfg.frame_window_ps,
        });
    }
    let expected = 1.0e12 / cfg.frame_period_ps as f64;
    if !((cfg.frame_rate_hz - expected).abs() <= 1e-9 * expected) {
        return Err(ConfigError::FrameRateMismatch {
            rate: cfg.frame_rate_hz,
            expected,
        });
    }
    if !(0.0..=1.0).contains(&cfg.eta) {
        return Err(ConfigError::Efficiency(cfg.eta));
    }
    if !(0.0..=1.0).contains(&cfg.p_tb) {
        return Err(ConfigError::TimeBinFraction(cfg.p_tb));
    }
    if cfg.hist_res_ps == 0 || cfg.frame_period_ps % cfg.hist_res_ps != 0 {
        return Err(ConfigError::HistogramResolution {
            res: cfg.hist_res_ps,
            period: cfg.frame_period_ps,
        });
    }
    if !(cfg.mu_in > 0.0 && cfg.mu_in.is_finite()) {
        return Err(ConfigError::MeanPhotons(cfg.mu_in));
    }
    if !(cfg.im_extinction > 1.0) {
        return Err(ConfigError::Extinction(cfg.im_extinction));
    }
    if !(cfg.jitter_sigma_ps >= 0.0 && cfg.jitter_sigma_ps.is_finite()) {
        return Err(ConfigError::Jitter(cfg.jitter_sigma_ps));
    }
    let hist_bins = (cfg.frame_period_ps / cfg.hist_res_ps) as usize;
    Ok(ValidatedConfig { cfg, hist_bins })
}

/// Half of a frame period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Window {
    #[serde(rename = "dt1")]
    Dt1,
    #[serde(rename = "dt2")]
    Dt2,
}

impl Window {
    pub fn other(self) -> Window {
        match self {
            Window::Dt1 => Window::Dt2,
            Window::Dt2 => Window::Dt1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SignalId {
    A,
    B,
    C,
}

impl SignalId {
    pub const ALL: [SignalId; 3] = [SignalId::A, SignalId::B, SignalId::C];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl std::fmt::Display for SignalId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SignalId::A => "A",
            SignalId::B => "B",
            SignalId::C => "C",
        };
        f.write_str(s)
    }
}

/// Hermite-Gauss mode `HG_np`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HgMode {
    pub n: u8,
    pub p: u8,
}

impl HgMode {
    /// Group `j` holds the `j` modes with `n + p = j - 1`.
    pub fn group(self) -> u8 {
        self.n + self.p + 1
    }
}

/// Which fiber mode a transmitter signal is launched into.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalAssignment {
    pub signal: SignalId,
    pub input_mode: HgMode,
    /// 1-based mode group.
    pub input_group: u8,
    /// Delayed signals occupy `Δt2`.
    #[serde(default)]
    pub delayed: bool,
    /// Per-transmitter modulator extinction; falls back to the global value.
    #[serde(default)]
    pub im_extinction: Option<f64>,
}

impl SignalAssignment {
    pub fn new(signal: SignalId, n: u8, p: u8, delayed: bool) -> Self {
        let input_mode = HgMode { n, p };
        Self {
            signal,
            input_mode,
            input_group: input_mode.group(),
            delayed,
            im_extinction: None,
        }
    }

    /// A on HG00, B on HG11 delayed by one window, C on HG22.
    pub fn default_set() -> Vec<SignalAssignment> {
        vec![
            SignalAssignment::new(SignalId::A, 0, 0, false),
            SignalAssignment::new(SignalId::B, 1, 1, true),
            SignalAssignment::new(SignalId::C, 2, 2, false),
        ]
    }

    pub fn window(&self) -> Window {
        if self.delayed {
            Window::Dt2
        } else {
            Window::Dt1
        }
    }

    pub fn extinction(&self, cfg: &SimConfig) -> f64 {
        self.im_extinction.unwrap_or(cfg.im_extinction)
    }
}

/// Checks group membership and that no two signals share an input group.
pub fn validate_assignments(signals: &[SignalAssignment]) -> Result<(), ConfigError> {
    for (i, s) in signals.iter().enumerate() {
        if s.input_group == 0 || s.input_group as usize > MODE_GROUPS {
            return Err(ConfigError::GroupOutOfRange(s.signal, s.input_group));
        }
        let expected = s.input_mode.group();
        if expected != s.input_group {
            return Err(ConfigError::ModeGroupMismatch {
                signal: s.signal,
                n: s.input_mode.n,
                p: s.input_mode.p,
                expected,
                given: s.input_group,
            });
        }
        if let Some(ext) = s.im_extinction {
            if !(ext > 1.0) {
                return Err(ConfigError::Extinction(ext));
            }
        }
        for other in &signals[..i] {
            if other.signal == s.signal {
                return Err(ConfigError::DuplicateSignal(s.signal));
            }
            if other.input_group == s.input_group {
                return Err(ConfigError::SharedInputGroup(
                    other.signal,
                    s.signal,
                    s.input_group,
                ));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let v = validate_config(SimConfig::default()).unwrap();
        assert_eq!(v.hist_bins(), 8000);
        assert_eq!(v.window_offset(Window::Dt2), 100_000);
    }

    #[test]
    fn slots_must_fit_in_window() {
        let cfg = SimConfig {
            frame_window_ps: 90_000,
            frame_period_ps: 180_000,
            frame_rate_hz: 1.0e12 / 180_000.0,
            ..SimConfig::default()
        };
        assert_eq!(
            validate_config(cfg),
            Err(ConfigError::SlotsExceedWindow {
                slots_span: 98_560,
                window: 90_000
            })
        );
    }

    #[test]
    fn frame_rate_must_match_period() {
        let cfg = SimConfig {
            frame_rate_hz: 4.0e6,
            ..SimConfig::default()
        };
        assert!(matches!(
            validate_config(cfg),
            Err(ConfigError::FrameRateMismatch { .. })
        ));
    }

    #[test]
    fn rejects_out_of_range_probabilities() {
        let cfg = SimConfig {
            eta: 1.2,
            ..SimConfig::default()
        };
        assert_eq!(validate_config(cfg), Err(ConfigError::Efficiency(1.2)));
        let cfg = SimConfig {
            p_tb: -0.1,
            ..SimConfig::default()
        };
        assert_eq!(validate_config(cfg), Err(ConfigError::TimeBinFraction(-0.1)));
    }

    #[test]
    fn histogram_resolution_must_divide_period() {
        let cfg = SimConfig {
            hist_res_ps: 30_000,
            ..SimConfig::default()
        };
        assert!(matches!(
            validate_config(cfg),
            Err(ConfigError::HistogramResolution { .. })
        ));
    }

    #[test]
    fn default_assignment_groups() {
        let set = SignalAssignment::default_set();
        assert_eq!(
            set.iter().map(|s| s.input_group).collect::<Vec<_>>(),
            vec![1, 3, 5]
        );
        assert_eq!(set[1].window(), Window::Dt2);
        validate_assignments(&set).unwrap();
    }

    #[test]
    fn shared_group_is_rejected() {
        let set = vec![
            SignalAssignment::new(SignalId::A, 1, 0, false),
            SignalAssignment::new(SignalId::B, 0, 1, true),
        ];
        assert_eq!(
            validate_assignments(&set),
            Err(ConfigError::SharedInputGroup(SignalId::A, SignalId::B, 2))
        );
    }
}
