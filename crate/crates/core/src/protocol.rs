//! Differential-phase BB84 over phase frames.
//!
//! Alice sets the phase step of a whole train: basis X uses `{0, pi}`, basis
//! Z uses `{pi/2, 3pi/2}`. Bob sets the interferometer phase to `0` (X) or
//! `pi/2` (Z). With matched bases `cos(phi_A + phi_B) = +-1` and one port
//! lights up; with mismatched bases the cosine vanishes and the ports are
//! equally likely.
//!
//! Each frame yields at most one bit. Clicks on the two non-interfering edge
//! positions are ignored, and a frame with no interior click or with clicks
//! on both ports is a null outcome.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{equipartition, propagate_to, ChannelModel, LaunchedFrame};
use crate::config::{SignalId, ValidatedConfig};
use crate::encoder::{make_phase_frame, EncodedFrame, EncoderError};
use crate::frame::FrameAmplitudes;
use crate::receiver::{
    detect, interfere, ArmBlocked, DetectorConfig, DetectorKind, Gate, InterferometerConfig,
};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("sequence lengths differ: {0:?}")]
    LengthMismatch([usize; 4]),
    #[error("frame {0} is not a phase frame")]
    NotPhaseFrame(u64),
    #[error("invalid key-rate parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Basis {
    X,
    Z,
}

impl Basis {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        if rng.random::<bool>() {
            Basis::Z
        } else {
            Basis::X
        }
    }
}

/// Alice's basis and bit for one phase frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BasisChoice {
    pub basis: Basis,
    pub bit: u8,
}

impl BasisChoice {
    pub fn new(basis: Basis, bit: u8) -> Self {
        debug_assert!(bit < 2);
        Self { basis, bit }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let basis = Basis::random(rng);
        let bit = rng.random::<bool>() as u8;
        Self { basis, bit }
    }

    /// X: 0 -> 0, 1 -> pi; Z: 0 -> pi/2, 1 -> 3pi/2.
    pub fn phase(self) -> f64 {
        let base = match self.basis {
            Basis::X => 0.0,
            Basis::Z => PI / 2.0,
        };
        base + PI * self.bit as f64
    }
}

/// Bob's interferometer setting for one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BobSetting {
    pub basis: Basis,
}

impl BobSetting {
    pub fn phi_b(self) -> f64 {
        match self.basis {
            Basis::X => 0.0,
            Basis::Z => PI / 2.0,
        }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            basis: Basis::random(rng),
        }
    }
}

/// Port that lights up for `choice` measured with `setting`, when bases match.
fn bright_port(choice: BasisChoice, setting: BobSetting) -> DetectorKind {
    if (choice.phase() + setting.phi_b()).cos() > 0.0 {
        DetectorKind::Phase
    } else {
        DetectorKind::PhaseConj
    }
}

/// Bit Bob assigns to a single-port click in his own basis.
pub fn decode_port(port: DetectorKind, setting: BobSetting) -> Option<u8> {
    (0..2u8).find(|&bit| bright_port(BasisChoice::new(setting.basis, bit), setting) == port)
}

/// Frame outcome from the presence of interior clicks on `D_P` and `D'_P`.
pub fn bob_decide(setting: BobSetting, dp_click: bool, dpc_click: bool) -> Option<u8> {
    match (dp_click, dpc_click) {
        (true, false) => decode_port(DetectorKind::Phase, setting),
        (false, true) => decode_port(DetectorKind::PhaseConj, setting),
        _ => None,
    }
}

/// Whether a click at `t` (within the frame) falls on an interior
/// interferometer position of a train starting at `offset`.
pub fn is_interior(t: u64, offset: u64, cfg: &ValidatedConfig) -> bool {
    if t < offset {
        return false;
    }
    let k = (t - offset) / cfg.pulse_period_ps;
    k >= 1 && k < cfg.d as u64
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlicePrepared {
    pub bits: Vec<u8>,
    pub bases: Vec<Basis>,
    pub frames: Vec<FrameAmplitudes>,
}

/// Uniform random bits and bases, one phase frame per pair.
pub fn alice_prepare<R: Rng + ?Sized>(
    n_frames: usize,
    mu: f64,
    d: usize,
    rng: &mut R,
) -> Result<AlicePrepared, ProtocolError> {
    let mut out = AlicePrepared {
        bits: Vec::with_capacity(n_frames),
        bases: Vec::with_capacity(n_frames),
        frames: Vec::with_capacity(n_frames),
    };
    for _ in 0..n_frames {
        let c = BasisChoice::random(rng);
        out.bits.push(c.bit);
        out.bases.push(c.basis);
        out.frames.push(make_phase_frame(c.phase(), mu, d)?);
    }
    Ok(out)
}

/// Intercept-resend: Eve measures in a random basis and re-prepares what she
/// saw. With her basis matching Alice's she reads the bit exactly; otherwise
/// her bit is a coin flip in her own basis.
pub fn eve_intercept<R: Rng + ?Sized>(
    frame: &EncodedFrame,
    mu: f64,
    rng: &mut R,
) -> Result<EncodedFrame, ProtocolError> {
    let Some(alice) = frame.choice else {
        return Ok(frame.clone());
    };
    let eve_basis = Basis::random(rng);
    let guess = if eve_basis == alice.basis {
        alice
    } else {
        BasisChoice::new(eve_basis, rng.random::<bool>() as u8)
    };
    let resent = make_phase_frame(guess.phase(), mu, frame.frame.d())?.with_offset(frame.frame.offset);
    Ok(EncodedFrame {
        frame: resent,
        choice: Some(alice),
    })
}

/// Receiver chain for a single phase frame: link, interferometer on the
/// collected groups, per-port detectors gated on the frame's window.
#[derive(Debug, Clone)]
pub struct PhaseReceiver<'a> {
    pub cfg: &'a ValidatedConfig,
    pub channel: &'a ChannelModel,
    pub input_group: u8,
    pub collect_groups: Vec<u8>,
    pub visibility: f64,
}

impl PhaseReceiver<'_> {
    pub fn measure(
        &self,
        frame: &FrameAmplitudes,
        setting: BobSetting,
        frame_idx: u64,
        seed: u64,
    ) -> Result<Option<u8>, ProtocolError> {
        if !frame.is_phase() {
            return Err(ProtocolError::NotPhaseFrame(frame_idx));
        }
        let flux = propagate_to(
            &[LaunchedFrame {
                origin: SignalId::A,
                input_group: self.input_group,
                frame,
            }],
            self.channel,
            &self.collect_groups,
        )
        .map_err(|e| ProtocolError::Params(e.to_string()))?;
        let icfg = InterferometerConfig::new(self.cfg, setting.phi_b(), self.visibility, ArmBlocked::None)
            .map_err(|e| ProtocolError::Params(e.to_string()))?;
        let mut trains = Vec::new();
        for c in equipartition(&flux) {
            let (dp, dpc) = interfere(&c, &icfg);
            trains.push(dp);
            trains.push(dpc);
        }
        let mut rng = stream_rng(seed, Stream::Photons(frame_idx));
        let events = crate::channel::sample_photons(&trains, frame_idx, self.cfg, &mut rng);
        let gate = Gate::from_window(self.cfg.window_of(frame.offset));
        let det = DetectorConfig::from_sim(self.cfg, gate);
        let mut clicked = [false; 2];
        for (i, port) in [DetectorKind::Phase, DetectorKind::PhaseConj].into_iter().enumerate() {
            // one detector per output mode
            let mut modes: Vec<(u8, u8)> = events
                .iter()
                .filter(|e| e.path == port)
                .map(|e| (e.out_group, e.out_mode))
                .collect();
            modes.sort_unstable();
            modes.dedup();
            for (g, m) in modes {
                let ev: Vec<_> = events
                    .iter()
                    .filter(|e| e.path == port && e.out_group == g && e.out_mode == m)
                    .copied()
                    .collect();
                let recs = detect(&ev, &det, self.cfg, frame_idx..frame_idx + 1, &mut rng)
                    .expect("events are time-ordered");
                if recs.iter().any(|r| is_interior(r.t, frame.offset, self.cfg)) {
                    clicked[i] = true;
                }
            }
        }
        Ok(bob_decide(setting, clicked[0], clicked[1]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiftResult {
    pub key_a: Vec<u8>,
    pub key_b: Vec<u8>,
    /// Error fraction on the parameter-estimation bits.
    pub qber: f64,
    pub pe_bits: usize,
}

/// Keeps frames with matching bases and a non-null outcome. The first
/// `pe_bits` sifted positions (all of them when `None`) estimate the QBER.
pub fn sift(
    bits_a: &[u8],
    bases_a: &[Basis],
    bases_b: &[Basis],
    bits_b: &[Option<u8>],
    pe_bits: Option<usize>,
) -> Result<SiftResult, ProtocolError> {
    let lens = [bits_a.len(), bases_a.len(), bases_b.len(), bits_b.len()];
    if lens.iter().any(|&l| l != lens[0]) {
        return Err(ProtocolError::LengthMismatch(lens));
    }
    let (key_a, key_b): (Vec<u8>, Vec<u8>) = (0..lens[0])
        .filter(|&i| bases_a[i] == bases_b[i])
        .filter_map(|i| bits_b[i].map(|b| (bits_a[i], b)))
        .unzip();
    let k = pe_bits.unwrap_or(key_a.len()).min(key_a.len());
    let errors = key_a[..k].iter().zip(&key_b[..k]).filter(|(a, b)| a != b).count();
    let qber = if k == 0 { 0.0 } else { errors as f64 / k as f64 };
    Ok(SiftResult {
        key_a,
        key_b,
        qber,
        pe_bits: k,
    })
}

/// Finite-key parameters for the BB84 bound of Tomamichel, Lim, Gisin and
/// Renner, Nat. Commun. 3, 634 (2012).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KeyRateParams {
    pub eps_sec: f64,
    pub eps_corr: f64,
    /// Tolerated channel error rate `Q_tol`.
    pub q_tol: f64,
    /// Raw key bits.
    pub n: f64,
    /// Parameter-estimation bits; `None` means `k = n`.
    pub k: Option<f64>,
    /// Preparation quality (1 for BB84).
    pub q: f64,
    /// Abort probability of the honest protocol.
    pub eps_rob: f64,
    /// Error-correction leakage relative to the Shannon limit,
    /// `leak_EC = f_ec * n * h(Q_tol)`.
    pub f_ec: f64,
    /// Expected number of exchanged qubits; `None` means `M = n`.
    pub m: Option<f64>,
}

impl Default for KeyRateParams {
    fn default() -> Self {
        Self {
            eps_sec: 1e-14,
            eps_corr: 1e-14,
            q_tol: 0.01,
            n: 1e6,
            k: None,
            q: 1.0,
            eps_rob: 0.18,
            f_ec: 1.1,
            m: None,
        }
    }
}

impl KeyRateParams {
    fn validate(&self) -> Result<(), ProtocolError> {
        let p = |s: &str| Err(ProtocolError::Params(s.into()));
        if !(self.eps_sec > 0.0 && self.eps_sec < 1.0) || !(self.eps_corr > 0.0 && self.eps_corr < 1.0) {
            return p("epsilons must lie in (0, 1)");
        }
        if !(self.q_tol >= 0.0 && self.q_tol <= 0.5) {
            return p("Q_tol must lie in [0, 0.5]");
        }
        if !(self.n >= 1.0 && self.k.unwrap_or(self.n) >= 1.0) {
            return p("n and k must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.eps_rob) {
            return p("eps_rob must lie in [0, 1]");
        }
        if !(self.f_ec >= 1.0) {
            return p("f_ec must be at least 1");
        }
        Ok(())
    }
}

pub fn binary_entropy(x: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        return 0.0;
    }
    -x * x.log2() - (1.0 - x) * (1.0 - x).log2()
}

/// Statistical deviation between the key and estimation-sample error rates:
/// `mu = sqrt((n+k)/(n k) * (k+1)/k * ln(2/eps_sec))`.
pub fn sampling_deviation(n: f64, k: f64, eps_sec: f64) -> f64 {
    ((n + k) / (n * k) * (k + 1.0) / k * (2.0 / eps_sec).ln()).sqrt()
}

/// Secure key length
/// `l = n (q - h(Q_tol + mu)) - leak_EC - log2(2 / (eps_sec^2 eps_corr))`.
pub fn key_length(p: &KeyRateParams) -> f64 {
    let mu = sampling_deviation(p.n, p.k.unwrap_or(p.n), p.eps_sec);
    let err = (p.q_tol + mu).min(0.5);
    let leak = p.f_ec * p.n * binary_entropy(p.q_tol);
    let correction = (2.0 / (p.eps_sec * p.eps_sec * p.eps_corr)).log2();
    p.n * (p.q - binary_entropy(err)) - leak - correction
}

/// Expected secret bits per exchanged qubit, `(1 - eps_rob) * l / M`,
/// clamped at zero when the bound leaves no key.
pub fn key_rate(p: &KeyRateParams) -> Result<f64, ProtocolError> {
    p.validate()?;
    let l = key_length(p);
    let m = p.m.unwrap_or(p.n);
    Ok(((1.0 - p.eps_rob) * l / m).max(0.0))
}

/// Interleaved frame stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Muxed<T> {
    pub frames: Vec<(bool, T)>,
    pub p_tb: f64,
}

impl<T> Muxed<T> {
    /// Data throughput given the capacity of an all-time-bin stream.
    pub fn effective_capacity(&self, time_bin_capacity: f64) -> f64 {
        self.p_tb * time_bin_capacity
    }
}

/// Interleaves data (time-bin) and security (phase) frames: each output
/// position takes a data frame with probability `p_tb` until either queue
/// runs dry, then drains the other. The flag is `true` for data frames.
pub fn frame_mux<T, R: Rng + ?Sized>(data: Vec<T>, phase: Vec<T>, p_tb: f64, rng: &mut R) -> Muxed<T> {
    let mut frames = Vec::with_capacity(data.len() + phase.len());
    let mut data = data.into_iter().peekable();
    let mut phase = phase.into_iter().peekable();
    loop {
        let take_data = match (data.peek().is_some(), phase.peek().is_some()) {
            (false, false) => break,
            (true, false) => true,
            (false, true) => false,
            (true, true) => rng.random::<f64>() < p_tb,
        };
        if take_data {
            frames.push((true, data.next().unwrap()));
        } else {
            frames.push((false, phase.next().unwrap()));
        }
    }
    Muxed { frames, p_tb }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{validate_config, SimConfig};
    use crate::rng::{stream_rng, Stream};

    #[test]
    fn phase_alphabet() {
        assert_eq!(BasisChoice::new(Basis::X, 0).phase(), 0.0);
        assert_eq!(BasisChoice::new(Basis::X, 1).phase(), PI);
        assert_eq!(BasisChoice::new(Basis::Z, 0).phase(), PI / 2.0);
        assert_eq!(BasisChoice::new(Basis::Z, 1).phase(), 1.5 * PI);
    }

    #[test]
    fn matched_basis_decodes_every_bit() {
        for basis in [Basis::X, Basis::Z] {
            let setting = BobSetting { basis };
            for bit in 0..2 {
                let port = bright_port(BasisChoice::new(basis, bit), setting);
                let (dp, dpc) = (port == DetectorKind::Phase, port == DetectorKind::PhaseConj);
                assert_eq!(bob_decide(setting, dp, dpc), Some(bit));
            }
        }
    }

    #[test]
    fn null_outcomes() {
        let s = BobSetting { basis: Basis::X };
        assert_eq!(bob_decide(s, false, false), None);
        assert_eq!(bob_decide(s, true, true), None);
    }

    #[test]
    fn alice_prepares_phase_frames() {
        let mut rng = stream_rng(3, Stream::Aux(0));
        let a = alice_prepare(100, 1.0, 64, &mut rng).unwrap();
        for i in 0..100 {
            let c = BasisChoice::new(a.bases[i], a.bits[i]);
            assert_eq!(a.frames[i].kind, crate::frame::FrameKind::Phase { phi_a: c.phase() });
        }
    }

    #[test]
    fn noiseless_matched_measurement_never_errs() {
        let cfg = validate_config(SimConfig {
            mu_in: 2.0,
            eta: 1.0,
            ..SimConfig::default()
        })
        .unwrap();
        let channel = ChannelModel::transparent();
        let rx = PhaseReceiver {
            cfg: &cfg,
            channel: &channel,
            input_group: 1,
            collect_groups: vec![1],
            visibility: 1.0,
        };
        let choice = BasisChoice::new(Basis::X, 1);
        let frame = make_phase_frame(choice.phase(), cfg.mu_in, cfg.d).unwrap();
        // an edge click can leave the bright port dead, so nulls remain possible
        let mut ones = 0;
        for i in 0..400 {
            let out = rx.measure(&frame, BobSetting { basis: Basis::X }, i, 5).unwrap();
            assert_ne!(out, Some(0));
            ones += (out == Some(1)) as u32;
        }
        assert!(ones > 300, "{ones}");
    }

    #[test]
    fn non_phase_frame_is_rejected() {
        let cfg = validate_config(SimConfig::default()).unwrap();
        let channel = ChannelModel::transparent();
        let rx = PhaseReceiver {
            cfg: &cfg,
            channel: &channel,
            input_group: 1,
            collect_groups: vec![1],
            visibility: 1.0,
        };
        let f = crate::encoder::make_time_bin_frame(3, 1.0, 100.0, 64).unwrap();
        assert_eq!(
            rx.measure(&f, BobSetting { basis: Basis::X }, 7, 1),
            Err(ProtocolError::NotPhaseFrame(7))
        );
    }

    #[test]
    fn eve_with_matching_basis_resends_alice_state() {
        let mut rng = stream_rng(11, Stream::Aux(0));
        let choice = BasisChoice::new(Basis::Z, 1);
        let enc = EncodedFrame {
            frame: make_phase_frame(choice.phase(), 1.0, 16).unwrap(),
            choice: Some(choice),
        };
        let mut unchanged = 0;
        for _ in 0..1000 {
            let out = eve_intercept(&enc, 1.0, &mut rng).unwrap();
            if out.frame == enc.frame {
                unchanged += 1;
            }
        }
        // matching basis (1/2) always, mismatched basis never reproduces the phase
        assert!((unchanged as f64 - 500.0).abs() < 4.0 * 250f64.sqrt(), "{unchanged}");
    }

    #[test]
    fn sift_noiseless() {
        let bits = [0, 1, 1, 0];
        let bases = [Basis::X, Basis::Z, Basis::X, Basis::Z];
        let bob = [Some(0), Some(1), Some(1), Some(0)];
        let s = sift(&bits, &bases, &bases, &bob, None).unwrap();
        assert_eq!(s.key_a, s.key_b);
        assert_eq!(s.qber, 0.0);
    }

    #[test]
    fn sift_length_mismatch() {
        assert!(matches!(
            sift(&[0], &[Basis::X], &[], &[None], None),
            Err(ProtocolError::LengthMismatch(_))
        ));
    }

    #[test]
    fn key_rate_defaults() {
        // Hand evaluation: mu = 8.1153e-3, h(Q_tol + mu) = 0.130835,
        // leak / n = 1.1 h(0.01) = 0.088878, correction / n = 1.405e-4
        let r = key_rate(&KeyRateParams::default()).unwrap();
        assert!((r - 0.639816).abs() < 1e-5, "{r}");
    }

    #[test]
    fn key_rate_collapses_at_half_error() {
        let p = KeyRateParams {
            q_tol: 0.5,
            ..KeyRateParams::default()
        };
        assert_eq!(key_rate(&p).unwrap(), 0.0);
    }

    #[test]
    fn key_rate_finite_size_penalty() {
        let small = KeyRateParams {
            n: 1e3,
            ..KeyRateParams::default()
        };
        assert!(key_rate(&small).unwrap() < 0.64);
    }

    #[test]
    fn mux_extremes() {
        let mut rng = stream_rng(1, Stream::Aux(3));
        let m = frame_mux(vec![1, 2, 3], vec![], 1.0, &mut rng);
        assert!(m.frames.iter().all(|(d, _)| *d));
        let m = frame_mux(vec![], vec![4, 5], 0.0, &mut rng);
        assert!(m.frames.iter().all(|(d, _)| !*d));
        let m = frame_mux(vec![1], vec![2], 0.9, &mut rng);
        assert_eq!(m.effective_capacity(1000.0), 900.0);
    }
}
