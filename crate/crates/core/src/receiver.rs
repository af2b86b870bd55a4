//! Receiver: delay interferometer, gated single-photon detectors and the
//! time-tagging histogram.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::ops::Range;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{FluxComponent, IntensityTrain, PhotonEvent};
use crate::config::{Picos, SignalId, ValidatedConfig, Window};

#[derive(Debug, Error, PartialEq)]
pub enum ReceiverError {
    #[error("photon events are not sorted by arrival time (index {0})")]
    Unsorted(usize),
    #[error("detector efficiency must lie in [0, 1] (got {0})")]
    Efficiency(f64),
    #[error("interferometer visibility must lie in (0, 1] (got {0})")]
    Visibility(f64),
    #[error("interferometer delay {delay} ps must equal the pulse period {period} ps")]
    Delay { delay: Picos, period: Picos },
    #[error("dark count rate must be finite and non-negative (got {0})")]
    DarkRate(f64),
}

/// Detector roles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DetectorKind {
    /// `D_T`, arrival-time detector.
    TimeBin,
    /// `D_P`, interferometer port dark for `phi_A + phi_B = pi`.
    Phase,
    /// `D'_P`, complementary interferometer port.
    PhaseConj,
    /// `D_IN`, transmitter-side monitor.
    Input,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gate {
    Dt1,
    Dt2,
    Always,
}

impl Gate {
    pub fn from_window(w: Window) -> Self {
        match w {
            Window::Dt1 => Gate::Dt1,
            Window::Dt2 => Gate::Dt2,
        }
    }

    /// Open interval within the frame period.
    pub fn span(self, cfg: &ValidatedConfig) -> Range<Picos> {
        match self {
            Gate::Dt1 => 0..cfg.frame_window_ps,
            Gate::Dt2 => cfg.frame_window_ps..cfg.frame_period_ps,
            Gate::Always => 0..cfg.frame_period_ps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeadTimeMode {
    /// Clicks during the dead time are lost and do not extend it.
    #[default]
    NonParalyzable,
    /// Every detected photon restarts the dead time.
    Paralyzable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub eta: f64,
    pub dead_time_ps: Picos,
    pub gate: Gate,
    /// Dark counts per second while the gate is open.
    pub dark_rate: f64,
    pub mode: DeadTimeMode,
}

impl DetectorConfig {
    pub fn from_sim(cfg: &ValidatedConfig, gate: Gate) -> Self {
        Self {
            eta: cfg.eta,
            dead_time_ps: cfg.dead_time_ps,
            gate,
            dark_rate: 0.0,
            mode: DeadTimeMode::NonParalyzable,
        }
    }

    pub fn validate(&self) -> Result<(), ReceiverError> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(ReceiverError::Efficiency(self.eta));
        }
        if !(self.dark_rate >= 0.0 && self.dark_rate.is_finite()) {
            return Err(ReceiverError::DarkRate(self.dark_rate));
        }
        Ok(())
    }
}

/// An accepted detector click.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectionRecord {
    /// Time within the frame period.
    pub t: Picos,
    pub frame_idx: u64,
    pub detector: DetectorKind,
    pub group: u8,
    pub mode: u8,
    /// `None` for dark counts.
    pub origin: Option<SignalId>,
}

impl DetectionRecord {
    pub fn absolute(&self, frame_period: Picos) -> u64 {
        self.frame_idx * frame_period + self.t
    }
}

/// Runs one detector over a time-ordered photon stream covering `frames`.
///
/// Photons outside the gate are ignored; the rest are kept with probability
/// `eta` and then subject to dead time. Dark counts arrive uniformly in the
/// gate and bypass the efficiency draw.
pub fn detect<R: Rng + ?Sized>(
    events: &[PhotonEvent],
    det: &DetectorConfig,
    cfg: &ValidatedConfig,
    frames: Range<u64>,
    rng: &mut R,
) -> Result<Vec<DetectionRecord>, ReceiverError> {
    det.validate()?;
    let period = cfg.frame_period_ps;
    if let Some(i) = events
        .windows(2)
        .position(|w| w[1].absolute(period) < w[0].absolute(period))
    {
        return Err(ReceiverError::Unsorted(i + 1));
    }
    let gate = det.gate.span(cfg);

    let mut candidates: Vec<DetectionRecord> = events
        .iter()
        .filter(|e| gate.contains(&e.t))
        .filter(|_| det.eta >= 1.0 || rng.random::<f64>() < det.eta)
        .map(|e| DetectionRecord {
            t: e.t,
            frame_idx: e.frame_idx,
            detector: e.path,
            group: e.out_group,
            mode: e.out_mode,
            origin: Some(e.origin),
        })
        .collect();

    if det.dark_rate > 0.0 {
        let mean = det.dark_rate * (gate.end - gate.start) as f64 * 1e-12;
        let poisson = Poisson::new(mean).map_err(|_| ReceiverError::DarkRate(det.dark_rate))?;
        let (detector, group, mode) = events
            .first()
            .map(|e| (e.path, e.out_group, e.out_mode))
            .unwrap_or((DetectorKind::TimeBin, 0, 0));
        for frame_idx in frames {
            let n = poisson.sample(rng) as u64;
            for _ in 0..n {
                candidates.push(DetectionRecord {
                    t: rng.random_range(gate.clone()),
                    frame_idx,
                    detector,
                    group,
                    mode,
                    origin: None,
                });
            }
        }
        candidates.sort_by_key(|r| r.absolute(period));
    }

    let mut out = Vec::with_capacity(candidates.len());
    let mut last: Option<u64> = None;
    for c in candidates {
        let t = c.absolute(period);
        let free = last.is_none_or(|l| t - l >= det.dead_time_ps);
        match det.mode {
            DeadTimeMode::NonParalyzable => {
                if free {
                    out.push(c);
                    last = Some(t);
                }
            }
            DeadTimeMode::Paralyzable => {
                if free {
                    out.push(c);
                }
                last = Some(t);
            }
        }
    }
    Ok(out)
}

/// Keeps records whose time falls in the given half-frame.
pub fn time_window_filter(
    records: &[DetectionRecord],
    window: Window,
    cfg: &ValidatedConfig,
) -> Vec<DetectionRecord> {
    records
        .iter()
        .filter(|r| cfg.window_of(r.t) == window)
        .copied()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmBlocked {
    #[default]
    None,
    /// Only the delayed replica reaches the output.
    Short,
    /// Only the undelayed replica reaches the output.
    Long,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterferometerConfig {
    pub delay_ps: Picos,
    pub phi_b: f64,
    /// Hardware visibility limit.
    pub visibility: f64,
    pub arm_blocked: ArmBlocked,
}

impl InterferometerConfig {
    pub fn new(
        cfg: &ValidatedConfig,
        phi_b: f64,
        visibility: f64,
        arm_blocked: ArmBlocked,
    ) -> Result<Self, ReceiverError> {
        let icfg = Self {
            delay_ps: cfg.pulse_period_ps,
            phi_b,
            visibility,
            arm_blocked,
        };
        icfg.validate(cfg)?;
        Ok(icfg)
    }

    pub fn validate(&self, cfg: &ValidatedConfig) -> Result<(), ReceiverError> {
        if !(self.visibility > 0.0 && self.visibility <= 1.0) {
            return Err(ReceiverError::Visibility(self.visibility));
        }
        if self.delay_ps != cfg.pulse_period_ps {
            return Err(ReceiverError::Delay {
                delay: self.delay_ps,
                period: cfg.pulse_period_ps,
            });
        }
        Ok(())
    }
}

/// Mean photons per output position on the two interferometer ports.
///
/// A `d`-pulse train yields `d + 1` positions. Position `k` overlaps pulse
/// `k` with the delayed copy of pulse `k - 1`; with equal pulse intensities
/// `I` the interior positions carry `I/2 * (1 +- V cos(phi_A + phi_B))` and the
/// two edge positions carry `I/4` on each port. A blocked arm leaves a flat
/// train of `I/4` per port.
pub fn interfere(c: &FluxComponent, icfg: &InterferometerConfig) -> (IntensityTrain, IntensityTrain) {
    let a = &c.amplitudes;
    let d = a.len();
    let zero = Complex64::new(0.0, 0.0);
    let rot = Complex64::from_polar(1.0, icfg.phi_b);
    let mut dp = vec![0.0; d + 1];
    let mut dpc = vec![0.0; d + 1];
    for k in 0..=d {
        let cur = if k < d { a[k] } else { zero };
        let prev = if k > 0 { a[k - 1] } else { zero };
        let (base, cross) = match icfg.arm_blocked {
            ArmBlocked::None => (
                (cur.norm_sqr() + prev.norm_sqr()) / 4.0,
                0.5 * icfg.visibility * (cur * prev.conj() * rot).re,
            ),
            ArmBlocked::Short => (prev.norm_sqr() / 4.0, 0.0),
            ArmBlocked::Long => (cur.norm_sqr() / 4.0, 0.0),
        };
        dp[k] = (base + cross).max(0.0);
        dpc[k] = (base - cross).max(0.0);
    }
    let floor = match icfg.arm_blocked {
        ArmBlocked::None => c.floor / 2.0,
        _ => c.floor / 4.0,
    };
    let train = |path, means| IntensityTrain {
        origin: c.origin,
        group: c.group,
        mode: c.mode.unwrap_or(0),
        path,
        offset: c.offset,
        means,
        floor,
    };
    (train(DetectorKind::Phase, dp), train(DetectorKind::PhaseConj, dpc))
}

/// Detection counts per `res`-wide bin over one frame period.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub res_ps: Picos,
    pub bins: Vec<u64>,
    pub n_frames: u64,
}

impl Histogram {
    pub fn new(cfg: &ValidatedConfig, n_frames: u64) -> Self {
        Self {
            res_ps: cfg.hist_res_ps,
            bins: vec![0; cfg.hist_bins()],
            n_frames,
        }
    }

    pub fn add(&mut self, t: Picos) {
        self.bins[(t / self.res_ps) as usize] += 1;
    }

    pub fn total(&self) -> u64 {
        self.bins.iter().sum()
    }

    /// Bin indices whose start lies in `[start, end)`.
    pub fn bin_range(&self, span: Range<Picos>) -> Range<usize> {
        let lo = span.start.div_ceil(self.res_ps) as usize;
        let hi = (span.end.div_ceil(self.res_ps) as usize).min(self.bins.len());
        lo.min(hi)..hi
    }

    /// Counts in bins whose start lies in `[start, end)`.
    pub fn counts_in(&self, span: Range<Picos>) -> u64 {
        self.bins[self.bin_range(span)].iter().sum()
    }

    pub fn merge(&mut self, other: &Histogram) {
        assert_eq!(self.bins.len(), other.bins.len());
        for (a, b) in self.bins.iter_mut().zip(&other.bins) {
            *a += b;
        }
        self.n_frames = self.n_frames.max(other.n_frames);
    }

    /// `bin_start_ps,count` rows, LF-terminated, preceded by that header.
    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(self.bins.len() * 12 + 20);
        s.push_str("bin_start_ps,count\n");
        for (i, c) in self.bins.iter().enumerate() {
            let _ = writeln!(s, "{},{}", i as u64 * self.res_ps, c);
        }
        s
    }
}

pub fn accumulate(records: &[DetectionRecord], cfg: &ValidatedConfig, n_frames: u64) -> Histogram {
    let mut h = Histogram::new(cfg, n_frames);
    for r in records {
        h.add(r.t);
    }
    h
}

/// Picosecond span of pulse position `k` in a train starting at `offset`.
pub fn slot_span(cfg: &ValidatedConfig, offset: Picos, k: usize) -> Range<Picos> {
    let start = offset + k as Picos * cfg.pulse_period_ps;
    start..start + cfg.pulse_period_ps
}

/// Interferometer phase that measures the given basis (`0` for X, `pi/2` for Z).
pub fn basis_phase(z_basis: bool) -> f64 {
    if z_basis {
        PI / 2.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{validate_config, SimConfig};
    use crate::encoder::make_phase_frame;
    use crate::rng::{stream_rng, Stream};
    use approx::assert_relative_eq;

    fn cfg() -> ValidatedConfig {
        validate_config(SimConfig::default()).unwrap()
    }

    fn photon(frame_idx: u64, t: Picos) -> PhotonEvent {
        PhotonEvent {
            t,
            out_group: 1,
            out_mode: 0,
            path: DetectorKind::TimeBin,
            frame_idx,
            origin: SignalId::A,
        }
    }

    fn ideal(gate: Gate, dead: Picos) -> DetectorConfig {
        DetectorConfig {
            eta: 1.0,
            dead_time_ps: dead,
            gate,
            dark_rate: 0.0,
            mode: DeadTimeMode::NonParalyzable,
        }
    }

    #[test]
    fn ideal_detector_keeps_everything() {
        let c = cfg();
        let ev: Vec<_> = (0..10).map(|i| photon(i, 1000 + i)).collect();
        let mut rng = stream_rng(1, Stream::Aux(0));
        let out = detect(&ev, &ideal(Gate::Always, 0), &c, 0..10, &mut rng).unwrap();
        assert_eq!(out.len(), 10);
    }

    #[test]
    fn dead_time_vetoes_close_photon() {
        let c = cfg();
        let ev = [photon(0, 10_000), photon(0, 60_000)];
        let mut rng = stream_rng(1, Stream::Aux(0));
        let out = detect(&ev, &ideal(Gate::Always, 100_000), &c, 0..1, &mut rng).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].t, 10_000);
    }

    #[test]
    fn paralyzable_extends_dead_time() {
        let c = cfg();
        let ev = [photon(0, 0), photon(0, 60_000), photon(0, 130_000)];
        let mut rng = stream_rng(1, Stream::Aux(0));
        let mut det = ideal(Gate::Always, 100_000);
        assert_eq!(detect(&ev, &det, &c, 0..1, &mut rng).unwrap().len(), 2);
        det.mode = DeadTimeMode::Paralyzable;
        assert_eq!(detect(&ev, &det, &c, 0..1, &mut rng).unwrap().len(), 1);
    }

    #[test]
    fn gate_drops_out_of_window_photons() {
        let c = cfg();
        let ev = [photon(0, 50_000), photon(1, 150_000)];
        let mut rng = stream_rng(1, Stream::Aux(0));
        let out = detect(&ev, &ideal(Gate::Dt2, 0), &c, 0..2, &mut rng).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].t, 150_000);
    }

    #[test]
    fn unsorted_input_is_an_error() {
        let c = cfg();
        let ev = [photon(1, 10), photon(0, 10)];
        let mut rng = stream_rng(1, Stream::Aux(0));
        assert_eq!(
            detect(&ev, &ideal(Gate::Always, 0), &c, 0..2, &mut rng),
            Err(ReceiverError::Unsorted(1))
        );
    }

    #[test]
    fn dark_counts_follow_rate() {
        let c = cfg();
        let mut rng = stream_rng(4, Stream::Aux(1));
        let det = DetectorConfig {
            dark_rate: 1.0e5,
            ..ideal(Gate::Dt1, 0)
        };
        // 1e5 /s * 100 ns = 0.01 per frame
        let out = detect(&[], &det, &c, 0..100_000, &mut rng).unwrap();
        assert!((out.len() as f64 - 1000.0).abs() < 4.0 * 1000f64.sqrt());
        assert!(out.iter().all(|r| r.t < 100_000 && r.origin.is_none()));
    }

    #[test]
    fn window_filter() {
        let c = cfg();
        let rec = |t| DetectionRecord {
            t,
            frame_idx: 0,
            detector: DetectorKind::TimeBin,
            group: 3,
            mode: 0,
            origin: None,
        };
        let kept = time_window_filter(&[rec(150_000), rec(50_000)], Window::Dt2, &c);
        assert_eq!(kept, vec![rec(150_000)]);
    }

    fn component(phi_a: f64, d: usize) -> FluxComponent {
        let f = make_phase_frame(phi_a, d as f64, d).unwrap();
        FluxComponent {
            origin: SignalId::A,
            group: 1,
            mode: Some(0),
            offset: 0,
            amplitudes: f.slots,
            floor: 0.0,
        }
    }

    #[test]
    fn destructive_port_is_dark() {
        let c = cfg();
        let icfg = InterferometerConfig::new(&c, 0.0, 1.0, ArmBlocked::None).unwrap();
        let (dp, dpc) = interfere(&component(PI, 64), &icfg);
        assert_eq!(dp.means.len(), 65);
        for k in 1..64 {
            assert!(dp.means[k] < 1e-12);
            assert_relative_eq!(dpc.means[k], 1.0, epsilon = 1e-12);
        }
        assert_relative_eq!(dp.means[0], 0.25, epsilon = 1e-12);
        assert_relative_eq!(dp.means[64], 0.25, epsilon = 1e-12);
    }

    #[test]
    fn constructive_port_with_hardware_visibility() {
        let c = cfg();
        let icfg = InterferometerConfig::new(&c, 0.0, 0.93, ArmBlocked::None).unwrap();
        let (dp, _) = interfere(&component(0.0, 64), &icfg);
        // I/2 (1 + V) with I = 1 per pulse; I_0 = I/2
        for k in 1..64 {
            assert_relative_eq!(dp.means[k], 0.5 * 1.93, epsilon = 1e-12);
        }
    }

    #[test]
    fn blocked_arm_gives_flat_train() {
        let c = cfg();
        let icfg = InterferometerConfig::new(&c, 0.0, 0.93, ArmBlocked::Long).unwrap();
        let (dp, dpc) = interfere(&component(PI, 64), &icfg);
        for k in 0..64 {
            assert_relative_eq!(dp.means[k], 0.25, epsilon = 1e-12);
            assert_relative_eq!(dpc.means[k], 0.25, epsilon = 1e-12);
        }
        assert_eq!(dp.means[64], 0.0);
    }

    #[test]
    fn visibility_and_delay_validation() {
        let c = cfg();
        assert_eq!(
            InterferometerConfig::new(&c, 0.0, 0.0, ArmBlocked::None),
            Err(ReceiverError::Visibility(0.0))
        );
        let bad = InterferometerConfig {
            delay_ps: 1000,
            phi_b: 0.0,
            visibility: 1.0,
            arm_blocked: ArmBlocked::None,
        };
        assert!(matches!(bad.validate(&c), Err(ReceiverError::Delay { .. })));
    }

    #[test]
    fn histogram_binning() {
        let c = cfg();
        let h = accumulate(&[], &c, 1);
        assert_eq!(h.total(), 0);
        assert_eq!(h.bins.len(), 8000);
        let r = DetectionRecord {
            t: 38_500,
            frame_idx: 0,
            detector: DetectorKind::TimeBin,
            group: 1,
            mode: 0,
            origin: None,
        };
        let h = accumulate(&[r], &c, 1);
        assert_eq!(h.bins[1540], 1);
        assert_eq!(h.total(), 1);
    }

    #[test]
    fn histogram_csv_format() {
        let c = validate_config(SimConfig {
            hist_res_ps: 50_000,
            ..SimConfig::default()
        })
        .unwrap();
        let mut h = Histogram::new(&c, 1);
        h.add(60_000);
        assert_eq!(
            h.to_csv(),
            "bin_start_ps,count\n0,0\n50000,1\n100000,0\n150000,0\n"
        );
    }

    #[test]
    fn bin_range_rounds_to_bin_starts() {
        let c = cfg();
        let h = Histogram::new(&c, 1);
        // slot 20: [30800, 32340) covers bins starting at 30800..=32325
        assert_eq!(h.bin_range(slot_span(&c, 0, 20)), 1232..1294);
    }
}
