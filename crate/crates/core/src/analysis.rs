//! Figures of merit from histograms and counts.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::config::Picos;
use crate::receiver::Histogram;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("histogram has no counts in the requested spans")]
    Empty,
    #[error("frame count must be positive")]
    NoFrames,
    #[error("visibility fit needs at least 3 distinct phases, got {0}")]
    TooFewPhases(usize),
    #[error("phase set spans {0:.3} rad, need more than pi")]
    NarrowPhaseSpan(f64),
    #[error("degenerate phase set")]
    Degenerate,
    #[error("probability out of range: {0}")]
    Probability(f64),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// A decibel value that may be infinite. Infinite values serialize as the
/// strings `"inf"` and `"-inf"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Db(pub f64);

impl Db {
    pub fn from_ratio(num: f64, den: f64) -> Db {
        if den == 0.0 {
            Db(if num > 0.0 { f64::INFINITY } else { f64::NAN })
        } else if num == 0.0 {
            Db(f64::NEG_INFINITY)
        } else {
            Db(10.0 * (num / den).log10())
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_finite(self) -> bool {
        self.0.is_finite()
    }

    /// Linear probability `10^(-x/10)`.
    pub fn to_probability(self) -> f64 {
        10f64.powf(-self.0 / 10.0)
    }
}

pub fn probability_to_db(p: f64) -> Db {
    Db(-10.0 * p.log10())
}

impl fmt::Display for Db {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 == f64::INFINITY {
            f.write_str("inf")
        } else if self.0 == f64::NEG_INFINITY {
            f.write_str("-inf")
        } else {
            write!(f, "{:.4}", self.0)
        }
    }
}

impl Serialize for Db {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            s.serialize_f64(self.0)
        } else if self.0.is_nan() {
            s.serialize_str("nan")
        } else {
            s.serialize_str(if self.0 > 0.0 { "inf" } else { "-inf" })
        }
    }
}

impl<'de> Deserialize<'de> for Db {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(x) => Ok(Db(x)),
            Raw::Str(s) => match s.as_str() {
                "inf" => Ok(Db(f64::INFINITY)),
                "-inf" => Ok(Db(f64::NEG_INFINITY)),
                "nan" => Ok(Db(f64::NAN)),
                other => Err(serde::de::Error::custom(format!("bad dB value {other:?}"))),
            },
        }
    }
}

/// Total counts scaled to a per-second rate.
pub fn counts_per_second(counts: u64, n_frames: u64, frame_rate_hz: f64) -> Result<f64, AnalysisError> {
    if n_frames == 0 {
        return Err(AnalysisError::NoFrames);
    }
    Ok(counts as f64 * frame_rate_hz / n_frames as f64)
}

pub fn histogram_cps(hist: &Histogram, span: Range<Picos>, frame_rate_hz: f64) -> Result<f64, AnalysisError> {
    counts_per_second(hist.counts_in(span), hist.n_frames, frame_rate_hz)
}

/// Expected detection rate `mu * eta * R_f * IL`.
pub fn theoretical_rate(mu: f64, eta: f64, frame_rate_hz: f64, il_db: f64) -> f64 {
    mu * eta * frame_rate_hz * 10f64.powf(il_db / 10.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Crosstalk {
    /// Suppression of the leaked window relative to the signal window.
    pub xt_db: Db,
    pub p_xt: f64,
    pub signal_counts: u64,
    pub leak_counts: u64,
    pub eliminated: bool,
}

/// `XT = 10 log10(c_signal / c_leak)` from the counts in the signal's own
/// half-frame and in the other one. No leaked counts means the crosstalk was
/// eliminated and `XT` is infinite.
pub fn crosstalk_db(
    hist: &Histogram,
    signal_span: Range<Picos>,
    leak_span: Range<Picos>,
) -> Result<Crosstalk, AnalysisError> {
    let signal = hist.counts_in(signal_span);
    let leak = hist.counts_in(leak_span);
    if signal == 0 && leak == 0 {
        return Err(AnalysisError::Empty);
    }
    let xt = Db::from_ratio(signal as f64, leak as f64);
    Ok(Crosstalk {
        xt_db: xt,
        p_xt: leak as f64 / signal.max(1) as f64,
        signal_counts: signal,
        leak_counts: leak,
        eliminated: leak == 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snr {
    pub snr_db: Db,
    pub p_snr: f64,
    pub pulse_counts: u64,
    /// Counts outside the pulse slot, rescaled to the full window.
    pub floor_counts: f64,
}

/// Pulse-slot counts over the floor counts of the rest of the window,
/// rescaled to the window length.
pub fn snr_db(hist: &Histogram, pulse: Range<Picos>, window: Range<Picos>) -> Result<Snr, AnalysisError> {
    if pulse.start < window.start || pulse.end > window.end {
        return Err(AnalysisError::Invalid("pulse slot outside window".into()));
    }
    let pulse_counts = hist.counts_in(pulse.clone());
    let total = hist.counts_in(window.clone());
    if total == 0 {
        return Err(AnalysisError::Empty);
    }
    let w = (window.end - window.start) as f64;
    let p = (pulse.end - pulse.start) as f64;
    let floor = (total - pulse_counts) as f64 * w / (w - p);
    let snr = Db::from_ratio(pulse_counts as f64, floor);
    Ok(Snr {
        snr_db: snr,
        p_snr: if pulse_counts == 0 { 1.0 } else { floor / pulse_counts as f64 },
        pulse_counts,
        floor_counts: floor,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extinction {
    pub er_db: Db,
    pub p_phi: f64,
}

/// `ER = 10 log10(2 c0 / ci)` with `c0` the single-arm counts and `ci` the
/// counts under destructive interference; `p_phi = ci / (2 c0)`.
pub fn extinction_ratio_db(c0: f64, ci: f64) -> Result<Extinction, AnalysisError> {
    if !(c0 >= 0.0 && ci >= 0.0) {
        return Err(AnalysisError::Invalid("negative counts".into()));
    }
    if c0 == 0.0 {
        return Err(AnalysisError::Empty);
    }
    Ok(Extinction {
        er_db: Db::from_ratio(2.0 * c0, ci),
        p_phi: ci / (2.0 * c0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisibilityFit {
    pub i0: f64,
    pub visibility: f64,
    /// Root-mean-square residual of the fit.
    pub residual: f64,
}

/// Least-squares fit of `I(phi) = I0 (1 + V cos phi)`.
///
/// The model is linear in `(I0, I0 V)` on the basis `(1, cos phi)`, so the
/// normal equations give the answer directly.
pub fn fit_visibility(points: &[(f64, f64)]) -> Result<VisibilityFit, AnalysisError> {
    let mut distinct: Vec<f64> = points.iter().map(|p| crate::encoder::wrap_phase(p.0)).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    if distinct.len() < 3 {
        return Err(if distinct.len() <= 1 {
            AnalysisError::Degenerate
        } else {
            AnalysisError::TooFewPhases(distinct.len())
        });
    }
    // largest gap on the circle decides the covered arc
    let mut max_gap = 2.0 * std::f64::consts::PI - (distinct[distinct.len() - 1] - distinct[0]);
    for w in distinct.windows(2) {
        max_gap = max_gap.max(w[1] - w[0]);
    }
    let span = 2.0 * std::f64::consts::PI - max_gap;
    if span <= std::f64::consts::PI {
        return Err(AnalysisError::NarrowPhaseSpan(span));
    }

    let n = points.len() as f64;
    let (mut sc, mut scc, mut sy, mut scy) = (0.0, 0.0, 0.0, 0.0);
    for &(phi, y) in points {
        let c = phi.cos();
        sc += c;
        scc += c * c;
        sy += y;
        scy += c * y;
    }
    let det = n * scc - sc * sc;
    if det.abs() < 1e-12 * n * n {
        return Err(AnalysisError::Degenerate);
    }
    let a = (scc * sy - sc * scy) / det;
    let b = (n * scy - sc * sy) / det;
    let ss: f64 = points
        .iter()
        .map(|&(phi, y)| (y - a - b * phi.cos()).powi(2))
        .sum();
    let visibility = if a > 0.0 { (b / a).clamp(0.0, 1.0) } else { 0.0 };
    Ok(VisibilityFit {
        i0: a,
        visibility,
        residual: (ss / n).sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tomography {
    pub rho_jj: f64,
    pub rho_kk: f64,
    /// Adjacent off-diagonal element `V sqrt(P_i P_j)` with `P = 1/d`.
    pub rho_ij: f64,
}

/// Diagonal elements from the counts in the occupied slot (`c_j`) and in
/// the rest of the window (`cf_j`); the off-diagonal from the visibility.
pub fn tomography(c_j: u64, cf_j: u64, visibility: f64, d: usize) -> Result<Tomography, AnalysisError> {
    if d < 2 {
        return Err(AnalysisError::Invalid("d must be at least 2".into()));
    }
    if c_j + cf_j == 0 {
        return Err(AnalysisError::Empty);
    }
    let rho_jj = c_j as f64 / (c_j + cf_j) as f64;
    Ok(Tomography {
        rho_jj,
        rho_kk: (1.0 - rho_jj) / (d - 1) as f64,
        rho_ij: visibility / d as f64,
    })
}

pub fn tomography_from_hist(
    hist: &Histogram,
    pulse: Range<Picos>,
    window: Range<Picos>,
    visibility: f64,
    d: usize,
) -> Result<Tomography, AnalysisError> {
    let c_j = hist.counts_in(pulse);
    let total = hist.counts_in(window);
    tomography(c_j, total.saturating_sub(c_j), visibility, d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorBudget {
    pub p_s: f64,
    pub qber: f64,
}

/// Symbol error `p_s = sqrt(p_xt^2 + p_snr^2)` and per-bit error
/// `p_s / log2 d`.
pub fn error_budget(p_xt: f64, p_snr: f64, d: usize) -> Result<ErrorBudget, AnalysisError> {
    for p in [p_xt, p_snr] {
        if !(0.0..=1.0).contains(&p) {
            return Err(AnalysisError::Probability(p));
        }
    }
    if d < 2 {
        return Err(AnalysisError::Invalid("d must be at least 2".into()));
    }
    let p_s = p_xt.hypot(p_snr);
    Ok(ErrorBudget {
        p_s,
        qber: p_s / (d as f64).log2(),
    })
}

/// `C_p = Q mu eta R_f IL log2 d` in qubits per second.
pub fn capacity(q_eff: f64, mu: f64, eta: f64, frame_rate_hz: f64, il_linear: f64, d: usize) -> f64 {
    q_eff * mu * eta * frame_rate_hz * il_linear * (d as f64).log2()
}

/// Capacity from measured aggregate counts: each detection carries
/// `log2 d` qubits.
pub fn capacity_from_rate(aggregate_cps: f64, d: usize) -> f64 {
    aggregate_cps * (d as f64).log2()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub experiment: String,
    pub seed: u64,
    pub n_frames: u64,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub cps_per_group: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub cps_per_collection: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub xt: BTreeMap<String, Crosstalk>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub snr: BTreeMap<String, Snr>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub er: BTreeMap<String, Extinction>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub er_mean_db: Option<Db>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub p_phi_mean: Option<f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub visibility: BTreeMap<String, VisibilityFit>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub tomography: BTreeMap<String, Tomography>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error_budget: Option<ErrorBudget>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub qber_sifted: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sifted_bits: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub qber_oracle: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub key_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub capacity_qubits_per_s: Option<f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub values: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub notes: Vec<String>,
}

impl MetricsReport {
    pub fn new(experiment: &str, seed: u64, n_frames: u64) -> Self {
        Self {
            experiment: experiment.to_string(),
            seed,
            n_frames,
            ..Self::default()
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}
