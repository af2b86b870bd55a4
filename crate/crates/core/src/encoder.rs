//! Transmitter side: time-bin and phase frame generation and scheduling.
//!
//! Intensity-modulator leakage is modeled as a uniform floor over the
//! occupied window. A time-bin frame with extinction `E` leaks from `d - 1`
//! dark slots, so the floor takes the fraction `f = (d-1) / (d-1+E)` of the
//! frame's photon budget.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, Picos, SignalAssignment, SignalId, ValidatedConfig};
use crate::frame::{FrameAmplitudes, FrameKind};
use crate::protocol::BasisChoice;
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("slot index {slot} out of range for d = {d}")]
    SlotOutOfRange { slot: usize, d: usize },
    #[error("mean photon number must be positive (got {0})")]
    MeanPhotons(f64),
    #[error("extinction ratio must exceed 1 (got {0})")]
    Extinction(f64),
    #[error("at least one frame must be scheduled")]
    NoFrames,
}

/// Floor fraction of the photon budget for a time-bin frame.
pub fn floor_fraction(d: usize, im_extinction: f64) -> f64 {
    if im_extinction.is_infinite() {
        return 0.0;
    }
    let dark = (d - 1) as f64;
    dark / (dark + im_extinction)
}

pub fn make_time_bin_frame(
    slot: usize,
    mu: f64,
    im_extinction: f64,
    d: usize,
) -> Result<FrameAmplitudes, EncoderError> {
    if slot >= d {
        return Err(EncoderError::SlotOutOfRange { slot, d });
    }
    if !(mu > 0.0) {
        return Err(EncoderError::MeanPhotons(mu));
    }
    if !(im_extinction > 1.0) {
        return Err(EncoderError::Extinction(im_extinction));
    }
    let f = floor_fraction(d, im_extinction);
    let floor_rate = mu * f;
    let mut slots = vec![Complex64::new(0.0, 0.0); d];
    slots[slot] = Complex64::new((mu - floor_rate).sqrt(), 0.0);
    Ok(FrameAmplitudes {
        slots,
        floor_rate,
        offset: 0,
        kind: FrameKind::TimeBin { slot },
    })
}

/// Uniform-amplitude train with phase `m * phi_a` on slot `m`.
///
/// Slots are 0-based; the 1-based ramp differs only by a global phase.
pub fn make_phase_frame(phi_a: f64, mu: f64, d: usize) -> Result<FrameAmplitudes, EncoderError> {
    if !(mu > 0.0) {
        return Err(EncoderError::MeanPhotons(mu));
    }
    let amp = (mu / d as f64).sqrt();
    let slots = (0..d)
        .map(|m| Complex64::from_polar(amp, m as f64 * phi_a))
        .collect();
    Ok(FrameAmplitudes {
        slots,
        floor_rate: 0.0,
        offset: 0,
        kind: FrameKind::Phase { phi_a },
    })
}

/// Extinction ratio that yields `target_snr_db` for a time-bin frame under the
/// slot-versus-floor SNR estimator of `analysis::snr_db`.
///
/// With pulse fraction `w = T_p / window`, the expected estimate is
/// `(1 - f) / f + w`, giving `E = (d - 1) * (10^(snr/10) - w)`.
pub fn calibrate_im_extinction(cfg: &ValidatedConfig, target_snr_db: f64) -> f64 {
    let w = cfg.pulse_period_ps as f64 / cfg.frame_window_ps as f64;
    let ratio = 10f64.powf(target_snr_db / 10.0);
    (cfg.d - 1) as f64 * (ratio - w)
}

/// Extinction ratio that yields a time-bin diagonal density-matrix element
/// `rho_jj = c_j / (c_j + cf_j)` equal to `target`.
pub fn extinction_for_slot_purity(cfg: &ValidatedConfig, target: f64) -> f64 {
    let w = cfg.pulse_period_ps as f64 / cfg.frame_window_ps as f64;
    let f = (1.0 - target) / (1.0 - w);
    (cfg.d - 1) as f64 * (1.0 - f) / f
}

/// How a transmitter fills its frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FramePolicy {
    /// Time-bin with probability `p_tb` (uniform slot), otherwise a random
    /// BB84 phase frame.
    Mixed,
    /// Time-bin only; `slot = None` draws a uniform slot per frame.
    TimeBin { slot: Option<usize> },
    /// Phase frames with a fixed differential phase.
    Phase { phi_a: f64 },
    /// Phase frames with random basis and bit.
    Bb84,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedFrame {
    pub frame: FrameAmplitudes,
    pub choice: Option<BasisChoice>,
}

/// Builds frame `frame_idx` of `signal`, drawing from that frame's own stream.
pub fn encode_frame(
    signal: &SignalAssignment,
    frame_idx: u64,
    cfg: &ValidatedConfig,
    policy: &FramePolicy,
    seed: u64,
) -> Result<EncodedFrame, EncoderError> {
    let mut rng = stream_rng(seed, Stream::Schedule(signal.signal, frame_idx));
    let ext = signal.extinction(cfg);
    let offset = frame_offset(signal, cfg);
    let (frame, choice) = match policy {
        FramePolicy::TimeBin { slot } => {
            let m = slot.unwrap_or_else(|| rng.random_range(0..cfg.d));
            (make_time_bin_frame(m, cfg.mu_in, ext, cfg.d)?, None)
        }
        FramePolicy::Phase { phi_a } => (make_phase_frame(*phi_a, cfg.mu_in, cfg.d)?, None),
        FramePolicy::Bb84 => {
            let choice = BasisChoice::random(&mut rng);
            (make_phase_frame(choice.phase(), cfg.mu_in, cfg.d)?, Some(choice))
        }
        FramePolicy::Mixed => {
            if rng.random_bool(cfg.p_tb) {
                let m = rng.random_range(0..cfg.d);
                (make_time_bin_frame(m, cfg.mu_in, ext, cfg.d)?, None)
            } else {
                let choice = BasisChoice::random(&mut rng);
                (make_phase_frame(choice.phase(), cfg.mu_in, cfg.d)?, Some(choice))
            }
        }
    };
    Ok(EncodedFrame {
        frame: frame.with_offset(offset),
        choice,
    })
}

pub fn frame_offset(signal: &SignalAssignment, cfg: &ValidatedConfig) -> Picos {
    cfg.window_offset(signal.window())
}

/// Materialized frame sequence for one signal.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSchedule {
    pub signal: SignalId,
    pub frames: Vec<(u64, FrameAmplitudes)>,
    pub tb_flags: Vec<bool>,
}

impl FrameSchedule {
    pub fn time_bin_fraction(&self) -> f64 {
        let n = self.tb_flags.iter().filter(|&&tb| tb).count();
        n as f64 / self.tb_flags.len() as f64
    }
}

pub fn schedule(
    signal: &SignalAssignment,
    n_frames: u64,
    cfg: &ValidatedConfig,
    policy: &FramePolicy,
    seed: u64,
) -> Result<FrameSchedule, EncoderError> {
    if n_frames == 0 {
        return Err(EncoderError::NoFrames);
    }
    let mut frames = Vec::with_capacity(n_frames as usize);
    let mut tb_flags = Vec::with_capacity(n_frames as usize);
    for i in 0..n_frames {
        let enc = encode_frame(signal, i, cfg, policy, seed)?;
        tb_flags.push(!enc.frame.is_phase());
        frames.push((i, enc.frame));
    }
    Ok(FrameSchedule {
        signal: signal.signal,
        frames,
        tb_flags,
    })
}

/// Input photon budgets must agree within 5 % of the largest.
pub fn check_input_balance(budgets: &[f64]) -> Result<(), ConfigError> {
    let max = budgets.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = budgets.iter().cloned().fold(f64::INFINITY, f64::min);
    if budgets.len() > 1 && (max - min) > 0.05 * max {
        return Err(ConfigError::Unbalanced { min, max });
    }
    Ok(())
}

/// Phase value of `phi` wrapped to `[0, 2pi)`.
pub fn wrap_phase(phi: f64) -> f64 {
    phi.rem_euclid(2.0 * PI)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{validate_config, SimConfig};
    use approx::assert_relative_eq;

    fn cfg() -> ValidatedConfig {
        validate_config(SimConfig::default()).unwrap()
    }

    #[test]
    fn perfect_modulator_has_no_floor() {
        let f = make_time_bin_frame(0, 1.0, f64::INFINITY, 64).unwrap();
        assert_eq!(f.floor_rate, 0.0);
        assert_eq!(f.slots[0].norm_sqr(), 1.0);
        assert!(f.slots[1..].iter().all(|a| a.norm_sqr() == 0.0));
    }

    #[test]
    fn extinction_63_gives_half_floor() {
        // f = 63 / (63 + 63)
        let f = make_time_bin_frame(0, 1.0, 63.0, 64).unwrap();
        assert_relative_eq!(f.floor_rate, 0.5, epsilon = 1e-15);
        assert_relative_eq!(f.slots[0].norm_sqr(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn slot_out_of_range() {
        assert_eq!(
            make_time_bin_frame(64, 1.0, 100.0, 64),
            Err(EncoderError::SlotOutOfRange { slot: 64, d: 64 })
        );
    }

    #[test]
    fn zero_phase_train() {
        let f = make_phase_frame(0.0, 1.0, 4).unwrap();
        for a in &f.slots {
            assert_relative_eq!(a.re, 0.5, epsilon = 1e-15);
            assert_relative_eq!(a.im, 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn pi_train_alternates() {
        let f = make_phase_frame(PI, 1.0, 64).unwrap();
        for w in f.slots.windows(2) {
            let dphi = (w[1] * w[0].conj()).arg();
            assert_relative_eq!(dphi.abs(), PI, epsilon = 1e-9);
        }
        for a in &f.slots {
            assert_relative_eq!(a.norm_sqr(), 1.0 / 64.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn quarter_turn_train() {
        let f = make_phase_frame(PI / 2.0, 2.0, 64).unwrap();
        assert_relative_eq!(f.pulse_photons(), 2.0, epsilon = 1e-12);
        // slot m carries phase m * pi/2; 1-based slot k carries k * pi/2
        assert_relative_eq!(wrap_phase(f.slots[1].arg()), PI / 2.0, epsilon = 1e-12);
        assert_relative_eq!(wrap_phase(f.slots[2].arg()), PI, epsilon = 1e-12);
        assert_relative_eq!(wrap_phase(f.slots[3].arg()), 1.5 * PI, epsilon = 1e-12);
    }

    #[test]
    fn calibration_matches_default_constant() {
        let e = calibrate_im_extinction(&cfg(), 11.3);
        assert!((e - crate::config::DEFAULT_IM_EXTINCTION).abs() < 0.05, "{e}");
    }

    #[test]
    fn slot_purity_inverse() {
        let c = cfg();
        let e = extinction_for_slot_purity(&c, 0.96);
        let f = floor_fraction(c.d, e);
        let w = c.pulse_period_ps as f64 / c.frame_window_ps as f64;
        assert_relative_eq!(1.0 - f * (1.0 - w), 0.96, epsilon = 1e-12);
    }

    #[test]
    fn all_time_bin_when_p_tb_is_one() {
        let c = validate_config(SimConfig {
            p_tb: 1.0,
            ..SimConfig::default()
        })
        .unwrap();
        let a = SignalAssignment::new(SignalId::A, 0, 0, false);
        let s = schedule(&a, 500, &c, &FramePolicy::Mixed, 3).unwrap();
        assert!(s.tb_flags.iter().all(|&t| t));
    }

    #[test]
    fn delayed_signal_frames_start_in_second_window() {
        let c = cfg();
        let b = SignalAssignment::new(SignalId::B, 1, 1, true);
        let s = schedule(&b, 200, &c, &FramePolicy::Mixed, 3).unwrap();
        assert!(s.frames.iter().all(|(_, f)| f.offset == 100_000));
    }

    #[test]
    fn balance_check() {
        check_input_balance(&[1.0, 0.97, 1.02]).unwrap();
        assert!(check_input_balance(&[1.0, 0.9]).is_err());
    }
}
