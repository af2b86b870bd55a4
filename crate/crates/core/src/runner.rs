//! Experiment drivers, artifact output and parameter sweeps.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;
use thiserror::Error;

use crate::analysis::{
    capacity, capacity_from_rate, counts_per_second, crosstalk_db, error_budget, extinction_ratio_db,
    fit_visibility, snr_db, tomography, tomography_from_hist, AnalysisError, Db, MetricsReport, Snr,
};
use crate::channel::ChannelModel;
use crate::config::{validate_config, Picos, SignalAssignment, SimConfig, ValidatedConfig, Window};
use crate::encoder::FramePolicy;
use crate::frame::FrameKind;
use crate::protocol::{bob_decide, is_interior, key_rate, sift, BobSetting};
use crate::receiver::{accumulate, slot_span, ArmBlocked, DetectionRecord, DetectorKind, Gate};
use crate::scenario::{ExperimentKind, Scenario, ScenarioError};
use crate::sim::{Experiment, PhiB, Probe, ProbePath, RunOutput, SimError, Transmitter};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Protocol(#[from] crate::protocol::ProtocolError),
    #[error("sweep needs at least one value")]
    EmptyValues,
}

impl RunError {
    /// Whether the failure stems from the input rather than the run.
    pub fn is_config(&self) -> bool {
        match self {
            RunError::Scenario(ScenarioError::Io { .. }) => false,
            RunError::Scenario(_) | RunError::EmptyValues => true,
            RunError::Protocol(crate::protocol::ProtocolError::Params(_)) => true,
            RunError::Sim(SimError::Config(_) | SimError::NoFrames | SimError::EmptyProbe(_)) => true,
            _ => false,
        }
    }
}

/// Report plus named text artifacts (CSV files).
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub report: MetricsReport,
    pub files: BTreeMap<String, String>,
}

struct Ctx<'a> {
    sc: &'a Scenario,
    cfg: ValidatedConfig,
    channel: ChannelModel,
}

impl Ctx<'_> {
    fn experiment(&self, transmitters: Vec<Transmitter>, probes: Vec<Probe>, eve: bool) -> Experiment<'_> {
        Experiment {
            cfg: &self.cfg,
            channel: &self.channel,
            transmitters,
            probes,
            eve,
            n_frames: self.sc.n_frames,
            dead_time_mode: self.sc.receiver.dead_time_mode,
            dark_rate: self.sc.receiver.dark_rate,
        }
    }

    fn collection(&self, s: &SignalAssignment) -> Vec<u8> {
        self.sc.collections.of(s.signal).to_vec()
    }

    fn cps(&self, counts: u64) -> Result<f64, RunError> {
        Ok(counts_per_second(counts, self.sc.n_frames, self.cfg.frame_rate_hz)?)
    }

    fn window_span(&self, w: Window) -> std::ops::Range<Picos> {
        Gate::from_window(w).span(&self.cfg)
    }
}

fn direct(name: String, groups: Vec<u8>, gate: Gate) -> Probe {
    Probe {
        name,
        groups,
        path: ProbePath::Direct,
        gate,
    }
}

fn interior_count(records: &[DetectionRecord], cfg: &ValidatedConfig, port: DetectorKind) -> u64 {
    records
        .iter()
        .filter(|r| r.detector == port && is_interior(r.t, cfg.window_offset(cfg.window_of(r.t)), cfg))
        .count() as u64
}

/// Executes a scenario in memory.
pub fn execute(sc: &Scenario) -> Result<RunArtifacts, RunError> {
    sc.validate()?;
    let ctx = Ctx {
        sc,
        cfg: sc.validated_config()?,
        channel: sc.channel_model()?,
    };
    info!(
        "running {} with {} frames, seed {}",
        sc.experiment.name(),
        sc.n_frames,
        sc.sim.seed
    );
    let mut report = MetricsReport::new(sc.experiment.name(), sc.sim.seed, sc.n_frames);
    let mut files = BTreeMap::new();
    match sc.experiment {
        ExperimentKind::TimebinXt => timebin_xt(&ctx, &mut report, &mut files)?,
        ExperimentKind::TimebinB => timebin_b(&ctx, &mut report, &mut files)?,
        ExperimentKind::PhaseEr => phase_er(&ctx, &mut report, &mut files)?,
        ExperimentKind::PhaseSweep => phase_sweep(&ctx, &mut report, &mut files)?,
        ExperimentKind::Bb84 => bb84(&ctx, false, &mut report, &mut files)?,
        ExperimentKind::Bb84Eve => bb84(&ctx, true, &mut report, &mut files)?,
        ExperimentKind::Capacity => capacity_run(&ctx, &mut report, &mut files)?,
    }
    Ok(RunArtifacts { report, files })
}

type Files = BTreeMap<String, String>;

fn timebin_xt(ctx: &Ctx<'_>, report: &mut MetricsReport, files: &mut Files) -> Result<(), RunError> {
    let cfg = &ctx.cfg;
    let v = ctx.sc.receiver.visibility;
    let mut worst_snr: Option<f64> = None;
    for s in &ctx.sc.signals {
        let gate = Gate::from_window(s.window());
        let tx = Transmitter {
            assignment: s.clone(),
            policy: FramePolicy::TimeBin {
                slot: ctx.sc.time_bin_slot,
            },
        };
        let out = ctx
            .experiment(vec![tx], vec![direct(s.signal.to_string(), ctx.collection(s), gate)], false)
            .run()?;
        let recs = &out.records[0];
        let hist = accumulate(recs, cfg, out.n_frames);
        let window = gate.span(cfg);
        let offset = cfg.window_offset(s.window());
        let (snr, tomo) = match ctx.sc.time_bin_slot {
            Some(slot) => {
                let pulse = slot_span(cfg, offset, slot);
                (
                    snr_db(&hist, pulse.clone(), window.clone())?,
                    tomography_from_hist(&hist, pulse, window, v, cfg.d)?,
                )
            }
            None => aligned_snr(recs, &out, cfg, offset, v)?,
        };
        worst_snr = Some(worst_snr.map_or(snr.p_snr, |w: f64| w.max(snr.p_snr)));
        report.cps_per_collection.insert(s.signal.to_string(), ctx.cps(recs.len() as u64)?);
        report.snr.insert(s.signal.to_string(), snr);
        report.tomography.insert(s.signal.to_string(), tomo);
        files.insert(format!("hist_single_{}.csv", s.signal), hist.to_csv());
    }

    // Pairwise crosstalk: the second signal is moved to the other half-frame.
    let mut worst_xt: Option<f64> = None;
    let signals = &ctx.sc.signals;
    let mut xt_csv = String::from("detected_at,leaked_from,signal_counts,leak_counts,xt_db,p_xt\n");
    for i in 0..signals.len() {
        for j in i + 1..signals.len() {
            let first = signals[i].clone();
            let mut second = signals[j].clone();
            second.delayed = !first.delayed;
            let pair = [first, second];
            let txs = pair
                .iter()
                .map(|s| Transmitter {
                    assignment: s.clone(),
                    policy: FramePolicy::TimeBin { slot: None },
                })
                .collect();
            let probes = pair
                .iter()
                .map(|s| direct(s.signal.to_string(), ctx.collection(s), Gate::Always))
                .collect();
            let out = ctx.experiment(txs, probes, false).run()?;
            for (k, me) in pair.iter().enumerate() {
                let other = &pair[1 - k];
                let hist = accumulate(&out.records[k], cfg, out.n_frames);
                let xt = crosstalk_db(
                    &hist,
                    ctx.window_span(me.window()),
                    ctx.window_span(me.window().other()),
                )?;
                if xt.xt_db.is_finite() {
                    worst_xt = Some(worst_xt.map_or(xt.p_xt, |w: f64| w.max(xt.p_xt)));
                }
                let _ = writeln!(
                    xt_csv,
                    "{},{},{},{},{},{}",
                    me.signal, other.signal, xt.signal_counts, xt.leak_counts, xt.xt_db, xt.p_xt
                );
                files.insert(format!("hist_xt_{}_{}.csv", me.signal, other.signal), hist.to_csv());
                report.xt.insert(format!("{}<-{}", me.signal, other.signal), xt);
            }
        }
    }
    files.insert("xt.csv".into(), xt_csv);
    if let (Some(p_xt), Some(p_snr)) = (worst_xt, worst_snr) {
        report.error_budget = Some(error_budget(p_xt.min(1.0), p_snr.min(1.0), cfg.d)?);
    }
    Ok(())
}

/// SNR and slot purity from frames with varying slots, using each frame's
/// own pulse position.
fn aligned_snr(
    recs: &[DetectionRecord],
    out: &RunOutput,
    cfg: &ValidatedConfig,
    offset: Picos,
    v: f64,
) -> Result<(Snr, crate::analysis::Tomography), RunError> {
    let (mut cj, mut cf) = (0u64, 0u64);
    for r in recs {
        match out.meta[r.frame_idx as usize].kinds[0] {
            FrameKind::TimeBin { slot } if slot_span(cfg, offset, slot).contains(&r.t) => cj += 1,
            _ => cf += 1,
        }
    }
    if cj + cf == 0 {
        return Err(AnalysisError::Empty.into());
    }
    let w = cfg.frame_window_ps as f64;
    let tp = cfg.pulse_period_ps as f64;
    let floor = cf as f64 * w / (w - tp);
    let snr = Snr {
        snr_db: Db::from_ratio(cj as f64, floor),
        p_snr: if cj == 0 { 1.0 } else { floor / cj as f64 },
        pulse_counts: cj,
        floor_counts: floor,
    };
    Ok((snr, tomography(cj, cf, v, cfg.d)?))
}

fn timebin_b(ctx: &Ctx<'_>, report: &mut MetricsReport, files: &mut Files) -> Result<(), RunError> {
    let cfg = &ctx.cfg;
    let signals = &ctx.sc.signals;
    let txs = signals
        .iter()
        .map(|s| Transmitter {
            assignment: s.clone(),
            policy: FramePolicy::TimeBin { slot: None },
        })
        .collect();
    let probes = signals
        .iter()
        .map(|s| direct(s.signal.to_string(), ctx.collection(s), Gate::from_window(s.window())))
        .collect();
    let out = ctx.experiment(txs, probes, false).run()?;
    let mut per_group: BTreeMap<u8, u64> = BTreeMap::new();
    for (k, s) in signals.iter().enumerate() {
        let recs = &out.records[k];
        for r in recs {
            *per_group.entry(r.group).or_default() += 1;
        }
        let leak = recs.iter().filter(|r| r.origin != Some(s.signal)).count() as u64;
        report.values.insert(format!("foreign_counts_{}", s.signal), leak as f64);
        report.cps_per_collection.insert(s.signal.to_string(), ctx.cps(recs.len() as u64)?);
        let hist = accumulate(recs, cfg, out.n_frames);
        let alone = signals.iter().all(|o| o.signal == s.signal || o.window() != s.window());
        if alone {
            if let Ok(xt) = crosstalk_db(&hist, ctx.window_span(s.window()), ctx.window_span(s.window().other())) {
                report.xt.insert(format!("{}<-others", s.signal), xt);
            }
        }
        files.insert(format!("hist_{}.csv", s.signal), hist.to_csv());
    }
    let mut csv = String::from("group,cps\n");
    for (g, c) in per_group {
        let cps = ctx.cps(c)?;
        report.cps_per_group.insert(format!("group{g}"), cps);
        let _ = writeln!(csv, "{g},{cps}");
    }
    files.insert("cps_per_group.csv".into(), csv);
    let aggregate: f64 = report.cps_per_collection.values().sum();
    report.values.insert("aggregate_cps".into(), aggregate);
    report.capacity_qubits_per_s = Some(capacity_from_rate(aggregate, cfg.d));
    Ok(())
}

fn phase_er(ctx: &Ctx<'_>, report: &mut MetricsReport, files: &mut Files) -> Result<(), RunError> {
    let cfg = &ctx.cfg;
    let sc = ctx.sc;
    let groups: Vec<u8> = (1..=crate::config::MODE_GROUPS as u8).collect();
    let run = |arm: ArmBlocked| -> Result<RunOutput, RunError> {
        let txs = sc
            .signals
            .iter()
            .map(|s| Transmitter {
                assignment: s.clone(),
                policy: FramePolicy::Phase { phi_a: sc.phase.phi_a },
            })
            .collect();
        let probes = groups
            .iter()
            .map(|&g| Probe {
                name: format!("group{g}"),
                groups: vec![g],
                path: ProbePath::Interferometer {
                    phi_b: PhiB::Fixed(sc.phase.phi_b),
                    visibility: sc.receiver.visibility,
                    arm,
                },
                gate: Gate::Always,
            })
            .collect();
        Ok(ctx.experiment(txs, probes, false).run()?)
    };
    let open = run(ArmBlocked::None)?;
    let short = run(ArmBlocked::Short)?;
    let long = run(ArmBlocked::Long)?;
    let mut csv = String::from("group,c0,ci,er_db,p_phi\n");
    let (mut er_sum, mut p_sum, mut n) = (0.0, 0.0, 0);
    for (k, g) in groups.iter().enumerate() {
        let ci = interior_count(&open.records[k], cfg, DetectorKind::Phase) as f64;
        let c0 = 0.5
            * (interior_count(&short.records[k], cfg, DetectorKind::Phase)
                + interior_count(&long.records[k], cfg, DetectorKind::Phase)) as f64;
        let Ok(er) = extinction_ratio_db(c0, ci) else {
            continue;
        };
        let _ = writeln!(csv, "{g},{c0},{ci},{},{}", er.er_db, er.p_phi);
        if er.er_db.is_finite() {
            er_sum += er.er_db.value();
            p_sum += er.p_phi;
            n += 1;
        }
        report.er.insert(format!("group{g}"), er);
        if k == 0 {
            files.insert("hist_phase_dp_group1.csv".into(), accumulate(&open.records[0], cfg, open.n_frames).to_csv());
        }
    }
    if n > 0 {
        report.er_mean_db = Some(Db(er_sum / n as f64));
        report.p_phi_mean = Some(p_sum / n as f64);
    }
    report
        .notes
        .push("extinction counts exclude the two non-interfering edge positions of each train".into());
    files.insert("er_per_group.csv".into(), csv);
    Ok(())
}

fn reseeded(cfg: &ValidatedConfig, k: u64) -> ValidatedConfig {
    validate_config(SimConfig {
        seed: cfg.seed.wrapping_add(k.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        ..cfg.config().clone()
    })
    .expect("only the seed changed")
}

fn phase_sweep(ctx: &Ctx<'_>, report: &mut MetricsReport, files: &mut Files) -> Result<(), RunError> {
    let sc = ctx.sc;
    let mut points: Vec<Vec<(f64, f64)>> = vec![Vec::new(); sc.signals.len()];
    for (k, &phi) in sc.phase.phases.iter().enumerate() {
        let cfg = reseeded(&ctx.cfg, k as u64);
        let txs = sc
            .signals
            .iter()
            .map(|s| Transmitter {
                assignment: s.clone(),
                policy: FramePolicy::Phase { phi_a: phi },
            })
            .collect();
        let probes = sc
            .signals
            .iter()
            .map(|s| Probe {
                name: s.signal.to_string(),
                groups: ctx.collection(s),
                path: ProbePath::Interferometer {
                    phi_b: PhiB::Fixed(sc.phase.phi_b),
                    visibility: sc.receiver.visibility,
                    arm: ArmBlocked::None,
                },
                gate: Gate::from_window(s.window()),
            })
            .collect();
        let exp = Experiment {
            cfg: &cfg,
            ..ctx.experiment(txs, probes, false)
        };
        let out = exp.run()?;
        for (si, recs) in out.records.iter().enumerate() {
            let c = interior_count(recs, &cfg, DetectorKind::Phase) as f64;
            points[si].push((phi + sc.phase.phi_b, c));
        }
    }
    let mut csv = String::from("total_phase");
    for s in &sc.signals {
        let _ = write!(csv, ",{}", s.signal);
    }
    csv.push('\n');
    for k in 0..sc.phase.phases.len() {
        let _ = write!(csv, "{}", points[0][k].0);
        for p in &points {
            let _ = write!(csv, ",{}", p[k].1);
        }
        csv.push('\n');
    }
    files.insert("counts_vs_phase.csv".into(), csv);
    for (si, s) in sc.signals.iter().enumerate() {
        report.visibility.insert(s.signal.to_string(), fit_visibility(&points[si])?);
    }
    Ok(())
}

fn bb84(ctx: &Ctx<'_>, eve: bool, report: &mut MetricsReport, files: &mut Files) -> Result<(), RunError> {
    let cfg = &ctx.cfg;
    let sc = ctx.sc;
    let v = sc.receiver.visibility;
    let txs = sc
        .signals
        .iter()
        .map(|s| Transmitter {
            assignment: s.clone(),
            policy: FramePolicy::Bb84,
        })
        .collect();
    let probes = sc
        .signals
        .iter()
        .map(|s| Probe {
            name: s.signal.to_string(),
            groups: ctx.collection(s),
            path: ProbePath::Interferometer {
                phi_b: PhiB::BobBasis,
                visibility: v,
                arm: ArmBlocked::None,
            },
            gate: Gate::from_window(s.window()),
        })
        .collect();
    let out = ctx.experiment(txs, probes, eve).run()?;
    let n = out.n_frames as usize;
    let oracle = if eve { 0.25 + (1.0 - v) / 4.0 } else { (1.0 - v) / 2.0 };
    let mut csv = String::from("signal,sifted_bits,qber,qber_sigma,oracle\n");
    for (si, s) in sc.signals.iter().enumerate() {
        let offset = cfg.window_offset(s.window());
        let mut clicks = vec![[false; 2]; n];
        for r in &out.records[si] {
            if !is_interior(r.t, offset, cfg) {
                continue;
            }
            match r.detector {
                DetectorKind::Phase => clicks[r.frame_idx as usize][0] = true,
                DetectorKind::PhaseConj => clicks[r.frame_idx as usize][1] = true,
                _ => {}
            }
        }
        let mut bits_a = Vec::with_capacity(n);
        let mut bases_a = Vec::with_capacity(n);
        let mut bases_b = Vec::with_capacity(n);
        let mut bits_b = Vec::with_capacity(n);
        for (meta, c) in out.meta.iter().zip(&clicks) {
            let choice = meta.choices[si].expect("BB84 frames carry a choice");
            let bob = BobSetting {
                basis: meta.bob.expect("Bob draws a basis per frame"),
            };
            bits_a.push(choice.bit);
            bases_a.push(choice.basis);
            bases_b.push(bob.basis);
            bits_b.push(bob_decide(bob, c[0], c[1]));
        }
        let res = sift(&bits_a, &bases_a, &bases_b, &bits_b, None)?;
        let nb = res.key_a.len() as f64;
        let sigma = if nb > 0.0 { (oracle * (1.0 - oracle) / nb).sqrt() } else { f64::NAN };
        report.values.insert(format!("qber_{}", s.signal), res.qber);
        report.values.insert(format!("sifted_bits_{}", s.signal), nb);
        report.values.insert(format!("qber_sigma_{}", s.signal), sigma);
        if si == 0 {
            report.qber_sifted = Some(res.qber);
            report.sifted_bits = Some(res.key_a.len() as u64);
        }
        let _ = writeln!(csv, "{},{},{},{},{}", s.signal, res.key_a.len(), res.qber, sigma, oracle);
    }
    report.qber_oracle = Some(oracle);
    report.key_rate = Some(key_rate(&sc.key_rate)?);
    files.insert("qber.csv".into(), csv);
    Ok(())
}

fn capacity_run(ctx: &Ctx<'_>, report: &mut MetricsReport, files: &mut Files) -> Result<(), RunError> {
    let cfg = &ctx.cfg;
    let sc = ctx.sc;
    let targets = sc.target_cps.as_ref().expect("validated");

    let s = &sc.signals[0];
    let groups = ctx.collection(s);
    let tx = Transmitter {
        assignment: s.clone(),
        policy: FramePolicy::TimeBin { slot: None },
    };
    let gate = Gate::from_window(s.window());
    let out = ctx
        .experiment(vec![tx], vec![direct(s.signal.to_string(), groups.clone(), gate)], false)
        .run()?;
    let counts = out.records[0].len() as u64;
    let mc = ctx.cps(counts)?;
    let sigma = (counts as f64).sqrt() * cfg.frame_rate_hz / sc.n_frames as f64;
    let transfer: f64 = groups.iter().map(|&h| ctx.channel.transfer(h, s.input_group)).sum();
    let analytic = capacity(1.0, cfg.mu_in, cfg.eta, cfg.frame_rate_hz, transfer, 2);
    report.values.insert("single_cps_mc".into(), mc);
    report.values.insert("single_cps_sigma".into(), sigma);
    report.values.insert("single_cps_analytic".into(), analytic);
    report.values.insert(
        "single_capacity_analytic".into(),
        capacity(1.0, cfg.mu_in, cfg.eta, cfg.frame_rate_hz, transfer, cfg.d),
    );
    files.insert("hist_single.csv".into(), accumulate(&out.records[0], cfg, out.n_frames).to_csv());

    // Per-collection prediction through the measured channel tables.
    let reference = sc.reference_channel_model()?;
    let mut csv = String::from("signal,target_cps,predicted_cps,relative_deviation\n");
    let mut predicted_sum = 0.0;
    let mut target_sum = 0.0;
    for s in &SignalAssignment::default_set() {
        let transfer: f64 = sc
            .collections
            .of(s.signal)
            .iter()
            .map(|&h| reference.transfer(h, s.input_group))
            .sum();
        let predicted = cfg.mu_in * cfg.eta * cfg.frame_rate_hz * transfer;
        let target = targets.of(s.signal);
        let dev = predicted / target - 1.0;
        predicted_sum += predicted;
        target_sum += target;
        report.cps_per_collection.insert(s.signal.to_string(), predicted);
        report.values.insert(format!("target_cps_{}", s.signal), target);
        report.values.insert(format!("predicted_deviation_{}", s.signal), dev);
        let _ = writeln!(csv, "{},{},{},{}", s.signal, target, predicted, dev);
    }
    files.insert("cps_per_collection.csv".into(), csv);
    let cp = capacity_from_rate(target_sum, cfg.d);
    report.values.insert("aggregate_target_cps".into(), target_sum);
    report.values.insert("aggregate_predicted_cps".into(), predicted_sum);
    report.values.insert("capacity_predicted".into(), capacity_from_rate(predicted_sum, cfg.d));
    report.values.insert("capacity_unit_efficiency".into(), cp / cfg.eta);
    report.capacity_qubits_per_s = Some(cp);
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    experiment: &'static str,
    seed: u64,
    n_frames: u64,
    scenario: &'a Scenario,
    files: Vec<String>,
}

fn write_file(dir: &Path, name: &str, content: &str) -> Result<(), RunError> {
    let path = dir.join(name);
    std::fs::write(&path, content).map_err(|source| RunError::Io { path, source })
}

/// Runs a scenario and writes `report.json`, `manifest.json` and the CSV
/// artifacts into `out_dir`.
pub fn run(sc: &Scenario, out_dir: &Path) -> Result<MetricsReport, RunError> {
    let artifacts = execute(sc)?;
    std::fs::create_dir_all(out_dir).map_err(|source| RunError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    write_file(out_dir, "report.json", &artifacts.report.to_json())?;
    for (name, content) in &artifacts.files {
        write_file(out_dir, name, content)?;
    }
    let mut names: Vec<String> = artifacts.files.keys().cloned().collect();
    names.push("report.json".into());
    names.sort();
    let manifest = Manifest {
        tool: "sdmq",
        version: env!("CARGO_PKG_VERSION"),
        experiment: sc.experiment.name(),
        seed: sc.sim.seed,
        n_frames: sc.n_frames,
        scenario: sc,
        files: names,
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write_file(out_dir, "manifest.json", &text)?;
    info!("wrote artifacts to {}", out_dir.display());
    Ok(artifacts.report)
}

fn flatten(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, String>) {
    match v {
        serde_json::Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        serde_json::Value::Number(n) => {
            out.insert(prefix.to_string(), n.to_string());
        }
        serde_json::Value::Bool(b) => {
            out.insert(prefix.to_string(), b.to_string());
        }
        serde_json::Value::String(s) if s == "inf" || s == "-inf" || s == "nan" => {
            out.insert(prefix.to_string(), s.clone());
        }
        _ => {}
    }
}

/// One run per value of `key`, merged into a CSV with one row per value and
/// one column per scalar report entry.
pub fn sweep(sc: &Scenario, key: &str, values: &[String]) -> Result<String, RunError> {
    if values.is_empty() {
        return Err(RunError::EmptyValues);
    }
    let variants: Vec<Scenario> = values
        .iter()
        .map(|v| sc.with_param(key, v))
        .collect::<Result<_, _>>()?;
    for v in &variants {
        v.validate()?;
    }
    let mut rows = Vec::with_capacity(values.len());
    let mut columns = BTreeSet::new();
    for (value, variant) in values.iter().zip(&variants) {
        info!("sweep {key} = {value}");
        let report = execute(variant)?.report;
        let json = serde_json::to_value(&report).expect("report serializes");
        let mut flat = BTreeMap::new();
        flatten("", &json, &mut flat);
        flat.remove("seed");
        columns.extend(flat.keys().cloned());
        rows.push((value.clone(), flat));
    }
    let mut csv = String::from(key);
    for c in &columns {
        let _ = write!(csv, ",{c}");
    }
    csv.push('\n');
    for (value, flat) in rows {
        csv.push_str(&value);
        for c in &columns {
            csv.push(',');
            if let Some(x) = flat.get(c) {
                csv.push_str(x);
            }
        }
        csv.push('\n');
    }
    Ok(csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario(text: &str) -> Scenario {
        Scenario::from_toml_str(text).unwrap()
    }

    #[test]
    fn sweep_rejects_empty_values() {
        let sc = scenario("experiment = \"bb84\"\nn_frames = 10\n");
        assert!(matches!(sweep(&sc, "sim.mu_in", &[]), Err(RunError::EmptyValues)));
    }

    #[test]
    fn sweep_rejects_unknown_key() {
        let sc = scenario("experiment = \"bb84\"\nn_frames = 10\n");
        let err = sweep(&sc, "sim.bogus", &["1".into()]).unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn key_rate_sweep_is_monotone() {
        let sc = scenario(
            "experiment = \"bb84\"\nn_frames = 200\n[[signals]]\nsignal = \"A\"\ninput_mode = { n = 0, p = 0 }\ninput_group = 1\n",
        );
        let values: Vec<String> = ["1e3", "1e4", "1e5", "1e6"].iter().map(|s| s.to_string()).collect();
        let csv = sweep(&sc, "key_rate.n", &values).unwrap();
        let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
        let col = header.iter().position(|h| *h == "key_rate").unwrap();
        let r: Vec<f64> = csv
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(col).unwrap().parse().unwrap())
            .collect();
        assert!(r.windows(2).all(|w| w[1] >= w[0]), "{r:?}");
    }
}
