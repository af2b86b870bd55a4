//! End-to-end frame engine: transmitters, link, receiver probes, detectors.
//!
//! Frames are generated in parallel batches. Every random draw that belongs
//! to a frame comes from that frame's own stream, so the photon stream does
//! not depend on the number of worker threads. Detectors then run
//! sequentially over the time-ordered stream of their own input, which lets
//! dead time reach across frame boundaries.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{
    propagate_to, sample_photons, ChannelError, ChannelModel, IntensityTrain,
    LaunchedFrame, PhotonEvent,
};
use crate::config::{ConfigError, SignalAssignment, ValidatedConfig};
use crate::encoder::{check_input_balance, encode_frame, EncoderError, FramePolicy};
use crate::frame::FrameKind;
use crate::protocol::{eve_intercept, Basis, BasisChoice, BobSetting, ProtocolError};
use crate::receiver::{
    detect, interfere, ArmBlocked, DeadTimeMode, DetectionRecord, DetectorConfig, DetectorKind,
    Gate, InterferometerConfig, ReceiverError,
};
use crate::rng::{stream_rng, Stream};

const BATCH: u64 = 1 << 15;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Receiver(#[from] ReceiverError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("no frames to simulate")]
    NoFrames,
    #[error("probe {0:?} collects no output group")]
    EmptyProbe(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transmitter {
    pub assignment: SignalAssignment,
    pub policy: FramePolicy,
}

/// Interferometer phase source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PhiB {
    Fixed(f64),
    /// Bob draws X or Z per frame.
    BobBasis,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProbePath {
    /// Straight to a time-of-arrival detector per mode.
    Direct,
    /// Delay interferometer with one detector per port and mode.
    Interferometer {
        phi_b: PhiB,
        visibility: f64,
        arm: ArmBlocked,
    },
}

/// A set of output groups read out through one receiver path.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub name: String,
    pub groups: Vec<u8>,
    pub path: ProbePath,
    pub gate: Gate,
}

#[derive(Debug, Clone)]
pub struct Experiment<'a> {
    pub cfg: &'a ValidatedConfig,
    pub channel: &'a ChannelModel,
    pub transmitters: Vec<Transmitter>,
    pub probes: Vec<Probe>,
    pub eve: bool,
    pub n_frames: u64,
    pub dead_time_mode: DeadTimeMode,
    pub dark_rate: f64,
}

/// What was sent in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMeta {
    /// Per transmitter, in experiment order.
    pub kinds: Vec<FrameKind>,
    pub choices: Vec<Option<BasisChoice>>,
    pub bob: Option<Basis>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Accepted clicks per probe, time-ordered.
    pub records: Vec<Vec<DetectionRecord>>,
    pub meta: Vec<FrameMeta>,
    /// Launched mean photons per transmitter, summed over frames.
    pub launched: Vec<f64>,
    pub n_frames: u64,
}

fn path_index(kind: DetectorKind) -> u64 {
    match kind {
        DetectorKind::TimeBin => 0,
        DetectorKind::Phase => 1,
        DetectorKind::PhaseConj => 2,
        DetectorKind::Input => 3,
    }
}

/// Detector identity within a run: probe, output group, mode, port.
fn detector_key(probe: usize, e: &PhotonEvent) -> u64 {
    ((probe as u64) << 24) | ((e.out_group as u64) << 16) | ((e.out_mode as u64) << 8) | path_index(e.path)
}

struct FrameResult {
    events: Vec<(usize, PhotonEvent)>,
    meta: FrameMeta,
    launched: Vec<f64>,
}

impl Experiment<'_> {
    fn validate(&self) -> Result<(), SimError> {
        if self.n_frames == 0 {
            return Err(SimError::NoFrames);
        }
        let assignments: Vec<_> = self.transmitters.iter().map(|t| t.assignment.clone()).collect();
        crate::config::validate_assignments(&assignments)?;
        for p in &self.probes {
            if p.groups.is_empty() {
                return Err(SimError::EmptyProbe(p.name.clone()));
            }
            for &g in &p.groups {
                if g == 0 || g as usize > crate::config::MODE_GROUPS {
                    return Err(ChannelError::GroupOutOfRange(g).into());
                }
            }
            if let ProbePath::Interferometer { visibility, .. } = p.path {
                InterferometerConfig::new(self.cfg, 0.0, visibility, ArmBlocked::None)?;
            }
        }
        DetectorConfig {
            eta: self.cfg.eta,
            dead_time_ps: self.cfg.dead_time_ps,
            gate: Gate::Always,
            dark_rate: self.dark_rate,
            mode: self.dead_time_mode,
        }
        .validate()?;
        Ok(())
    }

    fn frame(&self, idx: u64) -> Result<FrameResult, SimError> {
        let cfg = self.cfg;
        let seed = cfg.seed;
        let mut encoded = Vec::with_capacity(self.transmitters.len());
        for t in &self.transmitters {
            encoded.push(encode_frame(&t.assignment, idx, cfg, &t.policy, seed)?);
        }
        if self.eve {
            let mut rng = stream_rng(seed, Stream::Eve(idx));
            for e in encoded.iter_mut() {
                *e = eve_intercept(e, cfg.mu_in, &mut rng)?;
            }
        }
        let bob = self
            .probes
            .iter()
            .any(|p| matches!(p.path, ProbePath::Interferometer { phi_b: PhiB::BobBasis, .. }))
            .then(|| BobSetting::random(&mut stream_rng(seed, Stream::Bob(idx))));

        let launched: Vec<LaunchedFrame<'_>> = self
            .transmitters
            .iter()
            .zip(&encoded)
            .map(|(t, e)| LaunchedFrame {
                origin: t.assignment.signal,
                input_group: t.assignment.input_group,
                frame: &e.frame,
            })
            .collect();

        let mut trains: Vec<IntensityTrain> = Vec::new();
        let mut owner: Vec<usize> = Vec::new();
        for (pi, probe) in self.probes.iter().enumerate() {
            let flux = propagate_to(&launched, self.channel, &probe.groups)?;
            match probe.path {
                ProbePath::Direct => {
                    for c in &flux.components {
                        trains.extend(IntensityTrain::direct(c).split_modes());
                    }
                }
                ProbePath::Interferometer { phi_b, visibility, arm } => {
                    let phi = match phi_b {
                        PhiB::Fixed(p) => p,
                        PhiB::BobBasis => bob.expect("drawn above").phi_b(),
                    };
                    let icfg = InterferometerConfig {
                        delay_ps: cfg.pulse_period_ps,
                        phi_b: phi,
                        visibility,
                        arm_blocked: arm,
                    };
                    for c in &flux.components {
                        let (dp, dpc) = interfere(c, &icfg);
                        trains.extend(dp.split_modes());
                        trains.extend(dpc.split_modes());
                    }
                }
            }
            owner.resize(trains.len(), pi);
        }

        // Each probe samples its own copy of the light.
        let mut rng = stream_rng(seed, Stream::Photons(idx));
        let mut events = Vec::new();
        let mut start = 0;
        while start < trains.len() {
            let pi = owner[start];
            let end = start + owner[start..].iter().take_while(|&&o| o == pi).count();
            for e in sample_photons(&trains[start..end], idx, cfg, &mut rng) {
                events.push((pi, e));
            }
            start = end;
        }

        Ok(FrameResult {
            events,
            meta: FrameMeta {
                kinds: encoded.iter().map(|e| e.frame.kind).collect(),
                choices: encoded.iter().map(|e| e.choice).collect(),
                bob: bob.map(|b| b.basis),
            },
            launched: encoded.iter().map(|e| e.frame.mean_photons()).collect(),
        })
    }

    pub fn run(&self) -> Result<RunOutput, SimError> {
        self.validate()?;
        let mut streams: BTreeMap<u64, (usize, Vec<PhotonEvent>)> = BTreeMap::new();
        let mut meta = Vec::with_capacity(self.n_frames as usize);
        let mut launched = vec![0.0; self.transmitters.len()];
        let mut first = 0;
        while first < self.n_frames {
            let last = (first + BATCH).min(self.n_frames);
            let batch: Vec<FrameResult> = (first..last)
                .into_par_iter()
                .map(|i| self.frame(i))
                .collect::<Result<_, _>>()?;
            for fr in batch {
                for (pi, e) in fr.events {
                    streams
                        .entry(detector_key(pi, &e))
                        .or_insert_with(|| (pi, Vec::new()))
                        .1
                        .push(e);
                }
                for (sum, l) in launched.iter_mut().zip(&fr.launched) {
                    *sum += l;
                }
                meta.push(fr.meta);
            }
            first = last;
        }
        check_input_balance(&launched)?;

        let streams: Vec<(u64, usize, Vec<PhotonEvent>)> =
            streams.into_iter().map(|(k, (p, v))| (k, p, v)).collect();
        let detected: Vec<(usize, Vec<DetectionRecord>)> = streams
            .par_iter()
            .map(|(key, pi, events)| {
                let det = DetectorConfig {
                    eta: self.cfg.eta,
                    dead_time_ps: self.cfg.dead_time_ps,
                    gate: self.probes[*pi].gate,
                    dark_rate: self.dark_rate,
                    mode: self.dead_time_mode,
                };
                let mut rng = stream_rng(self.cfg.seed, Stream::Detector(*key));
                detect(events, &det, self.cfg, 0..self.n_frames, &mut rng).map(|r| (*pi, r))
            })
            .collect::<Result<_, _>>()?;

        let mut records = vec![Vec::new(); self.probes.len()];
        for (pi, recs) in detected {
            records[pi].extend(recs);
        }
        let period = self.cfg.frame_period_ps;
        for r in records.iter_mut() {
            r.sort_by_key(|x| (x.absolute(period), x.group, x.mode, path_index(x.detector)));
        }
        Ok(RunOutput {
            records,
            meta,
            launched,
            n_frames: self.n_frames,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{validate_config, SignalId, SimConfig};

    fn cfg(seed: u64) -> ValidatedConfig {
        validate_config(SimConfig {
            seed,
            ..SimConfig::default()
        })
        .unwrap()
    }

    fn one_signal<'a>(cfg: &'a ValidatedConfig, ch: &'a ChannelModel, n: u64) -> Experiment<'a> {
        Experiment {
            cfg,
            channel: ch,
            transmitters: vec![Transmitter {
                assignment: SignalAssignment::new(SignalId::A, 0, 0, false),
                policy: FramePolicy::TimeBin { slot: None },
            }],
            probes: vec![Probe {
                name: "A".into(),
                groups: vec![1],
                path: ProbePath::Direct,
                gate: Gate::Dt1,
            }],
            eve: false,
            n_frames: n,
            dead_time_mode: DeadTimeMode::NonParalyzable,
            dark_rate: 0.0,
        }
    }

    #[test]
    fn transparent_rate_matches_poisson_thinning() {
        let c = cfg(9);
        let ch = ChannelModel::transparent();
        let out = one_signal(&c, &ch, 100_000).run().unwrap();
        // one click at most per frame: 1 - exp(-0.15)
        let p = 1.0 - (-0.15f64).exp();
        let n = out.records[0].len() as f64;
        let sigma = (100_000.0 * p * (1.0 - p)).sqrt();
        assert!((n - 100_000.0 * p).abs() < 4.0 * sigma, "{n}");
    }

    #[test]
    fn deterministic_under_seed() {
        let c = cfg(4);
        let ch = ChannelModel::transparent();
        let a = one_signal(&c, &ch, 5_000).run().unwrap();
        let b = one_signal(&c, &ch, 5_000).run().unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.meta, b.meta);
    }

    #[test]
    fn empty_run_is_rejected() {
        let c = cfg(1);
        let ch = ChannelModel::transparent();
        assert!(matches!(one_signal(&c, &ch, 0).run(), Err(SimError::NoFrames)));
    }
}
