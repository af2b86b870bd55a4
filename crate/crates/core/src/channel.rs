//! Mode-multiplexed few-mode fiber link.
//!
//! Power launched into input group `g` reaches output group `h` with
//! probability `xt[h][g]` after a group-wise insertion loss. Mixing is
//! incoherent between groups and between signals, while each signal's
//! contribution to one output mode keeps its pulse-to-pulse phases.

use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Picos, SignalId, ValidatedConfig, MODE_GROUPS};
use crate::frame::FrameAmplitudes;
use crate::receiver::DetectorKind;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("signals {0} and {1} are launched into the same input group {2}")]
    Assignment(SignalId, SignalId, u8),
    #[error("input group {0} outside 1..=5")]
    GroupOutOfRange(u8),
    #[error("injected flux is zero")]
    ZeroInjection,
    #[error("invalid channel table: {0}")]
    Table(String),
    #[error("reading channel data file: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing channel data file: {0}")]
    Parse(#[from] toml::de::Error),
}

const BUILTIN_TABLES: &str = include_str!("../../../data/fmf_tables.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Distance {
    #[serde(rename = "40m")]
    M40,
    #[serde(rename = "8km")]
    Km8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsertionLossTable {
    #[serde(rename = "40m")]
    pub m40: [f64; MODE_GROUPS],
    #[serde(rename = "8km")]
    pub km8: [f64; MODE_GROUPS],
}

impl InsertionLossTable {
    pub fn row(&self, distance: Distance) -> &[f64; MODE_GROUPS] {
        match distance {
            Distance::M40 => &self.m40,
            Distance::Km8 => &self.km8,
        }
    }

    fn validate(&self) -> Result<(), ChannelError> {
        if self.m40.iter().chain(&self.km8).any(|&v| !(v <= 0.0)) {
            return Err(ChannelError::Table(
                "insertion loss entries must be <= 0 dB".into(),
            ));
        }
        Ok(())
    }
}

/// Column-stochastic group coupling matrix, indexed `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrosstalkMatrix {
    xt: [[f64; MODE_GROUPS]; MODE_GROUPS],
}

impl CrosstalkMatrix {
    /// Converts dB entries to linear power and rescales each input column to
    /// sum to one.
    pub fn from_db(rows_db: &[[f64; MODE_GROUPS]; MODE_GROUPS]) -> Result<Self, ChannelError> {
        let mut xt = [[0.0; MODE_GROUPS]; MODE_GROUPS];
        for g in 0..MODE_GROUPS {
            let col: Vec<f64> = (0..MODE_GROUPS)
                .map(|h| 10f64.powf(rows_db[h][g] / 10.0))
                .collect();
            let sum: f64 = col.iter().sum();
            for h in 0..MODE_GROUPS {
                xt[h][g] = col[h] / sum;
            }
        }
        let m = Self { xt };
        m.check()?;
        Ok(m)
    }

    pub fn identity() -> Self {
        let mut xt = [[0.0; MODE_GROUPS]; MODE_GROUPS];
        for (g, row) in xt.iter_mut().enumerate() {
            row[g] = 1.0;
        }
        Self { xt }
    }

    fn check(&self) -> Result<(), ChannelError> {
        for g in 0..MODE_GROUPS {
            let diag = self.xt[g][g];
            for h in 0..MODE_GROUPS {
                let v = self.xt[h][g];
                if !(v > 0.0 && v < 1.0) {
                    return Err(ChannelError::Table(format!(
                        "coupling ({}, {}) = {v} outside (0, 1)",
                        h + 1,
                        g + 1
                    )));
                }
                if h != g && v >= diag {
                    return Err(ChannelError::Table(format!(
                        "column {} is not diagonally dominant",
                        g + 1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Fraction of power from input group `input` reaching group `output`
    /// (both 1-based).
    pub fn get(&self, output: u8, input: u8) -> f64 {
        self.xt[output as usize - 1][input as usize - 1]
    }

    pub fn column(&self, input: u8) -> [f64; MODE_GROUPS] {
        let g = input as usize - 1;
        std::array::from_fn(|h| self.xt[h][g])
    }
}

/// Raw link characterization as stored in the channel data file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelTables {
    pub insertion_loss_db: InsertionLossTable,
    pub crosstalk_db: CrosstalkRows,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrosstalkRows {
    pub rows: [[f64; MODE_GROUPS]; MODE_GROUPS],
}

impl ChannelTables {
    pub fn from_toml_str(s: &str) -> Result<Self, ChannelError> {
        let t: ChannelTables = toml::from_str(s)?;
        t.insertion_loss_db.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, ChannelError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Tables shipped in `data/fmf_tables.toml`.
    pub fn builtin() -> Self {
        Self::from_toml_str(BUILTIN_TABLES).expect("built-in channel tables are valid")
    }
}

/// Insertion loss and coupling as seen by the simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelModel {
    il_db: [f64; MODE_GROUPS],
    xt: CrosstalkMatrix,
}

/// Knobs for turning measured tables into a [`ChannelModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelOptions {
    pub distance: Distance,
    /// Loss of the input multiplexer, removed from every insertion loss so that
    /// `mu_in` is referred to the fiber input.
    pub input_mdm_loss_db: f64,
    /// Same insertion loss for every group, overriding the table.
    pub uniform_il_db: Option<f64>,
    /// Replace the coupling matrix by the identity.
    pub no_crosstalk: bool,
}

impl Default for ChannelOptions {
    fn default() -> Self {
        Self {
            distance: Distance::Km8,
            input_mdm_loss_db: 4.2,
            uniform_il_db: None,
            no_crosstalk: false,
        }
    }
}

impl ChannelModel {
    pub fn new(tables: &ChannelTables, opts: &ChannelOptions) -> Result<Self, ChannelError> {
        let row = tables.insertion_loss_db.row(opts.distance);
        let il_db = match opts.uniform_il_db {
            Some(v) => [v; MODE_GROUPS],
            None => std::array::from_fn(|g| row[g] + opts.input_mdm_loss_db),
        };
        let xt = if opts.no_crosstalk {
            CrosstalkMatrix::identity()
        } else {
            CrosstalkMatrix::from_db(&tables.crosstalk_db.rows)?
        };
        Ok(Self { il_db, xt })
    }

    /// Lossless, coupling-free link.
    pub fn transparent() -> Self {
        Self {
            il_db: [0.0; MODE_GROUPS],
            xt: CrosstalkMatrix::identity(),
        }
    }

    pub fn from_parts(il_db: [f64; MODE_GROUPS], xt: CrosstalkMatrix) -> Self {
        Self { il_db, xt }
    }

    pub fn il_db(&self, group: u8) -> f64 {
        self.il_db[group as usize - 1]
    }

    pub fn il_linear(&self, group: u8) -> f64 {
        10f64.powf(self.il_db(group) / 10.0)
    }

    pub fn crosstalk(&self) -> &CrosstalkMatrix {
        &self.xt
    }

    /// Mean fraction of photons launched into `input` that leave in `output`.
    pub fn transfer(&self, output: u8, input: u8) -> f64 {
        self.il_linear(input) * self.xt.get(output, input)
    }
}

/// One signal's contribution to an output group (`mode = None`) or to a
/// single output mode.
#[derive(Debug, Clone, PartialEq)]
pub struct FluxComponent {
    pub origin: SignalId,
    pub group: u8,
    pub mode: Option<u8>,
    pub offset: Picos,
    pub amplitudes: Vec<Complex64>,
    pub floor: f64,
}

impl FluxComponent {
    pub fn mean_photons(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>() + self.floor
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroupFlux {
    pub components: Vec<FluxComponent>,
}

impl GroupFlux {
    pub fn total(&self) -> f64 {
        self.components.iter().map(|c| c.mean_photons()).sum()
    }

    /// Mean photons per output group (index 0 is group 1).
    pub fn group_totals(&self) -> [f64; MODE_GROUPS] {
        let mut out = [0.0; MODE_GROUPS];
        for c in &self.components {
            out[c.group as usize - 1] += c.mean_photons();
        }
        out
    }

    /// Incoherent per-slot intensity in one group, summed over signals with
    /// equal offset.
    pub fn slot_intensities(&self, group: u8, offset: Picos) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for c in self
            .components
            .iter()
            .filter(|c| c.group == group && c.offset == offset)
        {
            if out.is_empty() {
                out = vec![0.0; c.amplitudes.len()];
            }
            for (o, a) in out.iter_mut().zip(&c.amplitudes) {
                *o += a.norm_sqr();
            }
        }
        out
    }
}

/// A frame entering the link.
#[derive(Debug, Clone, Copy)]
pub struct LaunchedFrame<'a> {
    pub origin: SignalId,
    pub input_group: u8,
    pub frame: &'a FrameAmplitudes,
}

pub fn propagate(frames: &[LaunchedFrame<'_>], channel: &ChannelModel) -> Result<GroupFlux, ChannelError> {
    propagate_to(frames, channel, &[1, 2, 3, 4, 5])
}

/// [`propagate`] restricted to the listed output groups.
pub fn propagate_to(
    frames: &[LaunchedFrame<'_>],
    channel: &ChannelModel,
    outputs: &[u8],
) -> Result<GroupFlux, ChannelError> {
    for (i, f) in frames.iter().enumerate() {
        if f.input_group == 0 || f.input_group as usize > MODE_GROUPS {
            return Err(ChannelError::GroupOutOfRange(f.input_group));
        }
        if let Some(prev) = frames[..i].iter().find(|p| p.input_group == f.input_group) {
            return Err(ChannelError::Assignment(prev.origin, f.origin, f.input_group));
        }
    }
    let mut components = Vec::with_capacity(frames.len() * outputs.len());
    for f in frames {
        for &h in outputs {
            let power = channel.transfer(h, f.input_group);
            if power == 0.0 {
                continue;
            }
            let scale = power.sqrt();
            components.push(FluxComponent {
                origin: f.origin,
                group: h,
                mode: None,
                offset: f.frame.offset,
                amplitudes: f.frame.slots.iter().map(|a| a * scale).collect(),
                floor: f.frame.floor_rate * power,
            });
        }
    }
    Ok(GroupFlux { components })
}

/// Splits each group's flux evenly over its `j` modes.
pub fn equipartition(flux: &GroupFlux) -> Vec<FluxComponent> {
    let mut out = Vec::new();
    for c in &flux.components {
        let j = c.group as usize;
        let scale = (1.0 / j as f64).sqrt();
        for mode in 0..j {
            out.push(FluxComponent {
                origin: c.origin,
                group: c.group,
                mode: Some(mode as u8),
                offset: c.offset,
                amplitudes: c.amplitudes.iter().map(|a| a * scale).collect(),
                floor: c.floor / j as f64,
            });
        }
    }
    out
}

/// Ratio of total output to injected mean photon number, in dB.
pub fn measure_insertion_loss(
    frame: &FrameAmplitudes,
    input_group: u8,
    channel: &ChannelModel,
) -> Result<f64, ChannelError> {
    let injected = frame.mean_photons();
    if !(injected > 0.0) {
        return Err(ChannelError::ZeroInjection);
    }
    let flux = propagate(
        &[LaunchedFrame {
            origin: SignalId::A,
            input_group,
            frame,
        }],
        channel,
    )?;
    Ok(10.0 * (flux.total() / injected).log10())
}

/// Mean photons per pulse position arriving at one detector.
///
/// Position `k` is centred at `offset + k * T_p + T_p / 2`; the floor is
/// uniform over `[offset, offset + window)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityTrain {
    pub origin: SignalId,
    pub group: u8,
    pub mode: u8,
    pub path: DetectorKind,
    pub offset: Picos,
    pub means: Vec<f64>,
    pub floor: f64,
}

impl IntensityTrain {
    /// Direct (non-interferometric) detection of one mode component.
    pub fn direct(c: &FluxComponent) -> Self {
        Self {
            origin: c.origin,
            group: c.group,
            mode: c.mode.unwrap_or(0),
            path: DetectorKind::TimeBin,
            offset: c.offset,
            means: c.amplitudes.iter().map(|a| a.norm_sqr()).collect(),
            floor: c.floor,
        }
    }

    pub fn total(&self) -> f64 {
        self.means.iter().sum::<f64>() + self.floor
    }

    /// Splits a whole-group train evenly over the group's modes. Same
    /// result as detecting each mode of [`equipartition`].
    pub fn split_modes(self) -> Vec<IntensityTrain> {
        let j = self.group as usize;
        let scale = 1.0 / j as f64;
        (0..j)
            .map(|m| IntensityTrain {
                mode: m as u8,
                means: self.means.iter().map(|x| x * scale).collect(),
                floor: self.floor * scale,
                ..self.clone()
            })
            .collect()
    }
}

/// A photon arriving at a detector input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhotonEvent {
    /// Arrival time within the frame period.
    pub t: Picos,
    pub out_group: u8,
    pub out_mode: u8,
    pub path: DetectorKind,
    pub frame_idx: u64,
    pub origin: SignalId,
}

impl PhotonEvent {
    pub fn absolute(&self, frame_period: Picos) -> u64 {
        self.frame_idx * frame_period + self.t
    }
}

/// Poisson photon sampling for one frame.
///
/// A single Poisson draw of the frame's total mean is split over trains,
/// positions and floor in proportion to their means, which has the same
/// law as independent Poisson counts per position. Arrival times get
/// Gaussian jitter and are clamped to the train's own window. The returned
/// events are sorted by time.
pub fn sample_photons<R: Rng + ?Sized>(
    trains: &[IntensityTrain],
    frame_idx: u64,
    cfg: &ValidatedConfig,
    rng: &mut R,
) -> Vec<PhotonEvent> {
    let total: f64 = trains.iter().map(|t| t.total()).sum();
    if !(total > 0.0) {
        return Vec::new();
    }
    let n = Poisson::new(total).map(|p| p.sample(rng) as u64).unwrap_or(0);
    if n == 0 {
        return Vec::new();
    }
    let tp = cfg.pulse_period_ps;
    let window = cfg.frame_window_ps;
    let jitter = (cfg.jitter_sigma_ps > 0.0).then(|| Normal::new(0.0, cfg.jitter_sigma_ps).unwrap());
    let mut events = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let mut u = rng.random::<f64>() * total;
        let mut picked = None;
        'trains: for train in trains {
            let t_total = train.total();
            if u >= t_total {
                u -= t_total;
                continue;
            }
            for (k, &m) in train.means.iter().enumerate() {
                if u < m {
                    picked = Some((train, Some(k)));
                    break 'trains;
                }
                u -= m;
            }
            picked = Some((train, None));
            break;
        }
        // Rounding can leave u just past the last bucket.
        let (train, pos) = picked.unwrap_or_else(|| {
            let last = trains.iter().rev().find(|t| t.total() > 0.0).unwrap();
            (last, None)
        });
        let lo = train.offset;
        let hi = train.offset + window - 1;
        let t = match pos {
            Some(k) => {
                let centre = (train.offset + k as Picos * tp + tp / 2) as f64;
                let dt = jitter.map(|j| j.sample(rng)).unwrap_or(0.0);
                let t = (centre + dt).round();
                (t.max(lo as f64) as Picos).min(hi)
            }
            None => rng.random_range(lo..=hi),
        };
        events.push(PhotonEvent {
            t,
            out_group: train.group,
            out_mode: train.mode,
            path: train.path,
            frame_idx,
            origin: train.origin,
        });
    }
    events.sort_by_key(|e| e.t);
    events
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{validate_config, SimConfig};
    use crate::encoder::{make_phase_frame, make_time_bin_frame};
    use crate::rng::{stream_rng, Stream};
    use approx::assert_relative_eq;

    fn model() -> ChannelModel {
        ChannelModel::new(&ChannelTables::builtin(), &ChannelOptions::default()).unwrap()
    }

    #[test]
    fn builtin_tables_parse() {
        let t = ChannelTables::builtin();
        assert_eq!(t.insertion_loss_db.km8[3], -12.06);
        assert_eq!(t.crosstalk_db.rows[0][0], -0.67);
    }

    #[test]
    fn column_one_diagonal() {
        // 10^(-0.067) / 1.000557 from the raw column sum
        let xt = model().crosstalk().clone();
        assert_relative_eq!(xt.get(1, 1), 0.856561, epsilon = 1e-5);
    }

    #[test]
    fn column_five_distribution() {
        let col = model().crosstalk().column(5);
        // dB -> linear, divided by the column sum 0.99960206
        let expected = [0.00449959, 0.01476294, 0.03590648, 0.14098498, 0.80384601];
        for (c, e) in col.iter().zip(expected) {
            assert_relative_eq!(*c, e, epsilon = 1e-7);
        }
    }

    #[test]
    fn transparent_channel_is_identity() {
        let f = make_phase_frame(0.3, 1.0, 8).unwrap();
        let flux = propagate(
            &[LaunchedFrame {
                origin: SignalId::A,
                input_group: 2,
                frame: &f,
            }],
            &ChannelModel::transparent(),
        )
        .unwrap();
        let c: Vec<_> = flux.components.iter().filter(|c| c.mean_photons() > 0.0).collect();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].group, 2);
        assert_eq!(c[0].amplitudes, f.slots);
    }

    #[test]
    fn shared_input_group_rejected() {
        let f = make_phase_frame(0.0, 1.0, 8).unwrap();
        let frames = [
            LaunchedFrame {
                origin: SignalId::A,
                input_group: 3,
                frame: &f,
            },
            LaunchedFrame {
                origin: SignalId::B,
                input_group: 3,
                frame: &f,
            },
        ];
        assert!(matches!(
            propagate(&frames, &model()),
            Err(ChannelError::Assignment(SignalId::A, SignalId::B, 3))
        ));
    }

    #[test]
    fn insertion_loss_matches_table() {
        let f = make_time_bin_frame(3, 1.0, 500.0, 64).unwrap();
        let opts = ChannelOptions {
            input_mdm_loss_db: 0.0,
            ..ChannelOptions::default()
        };
        let m = ChannelModel::new(&ChannelTables::builtin(), &opts).unwrap();
        assert_relative_eq!(measure_insertion_loss(&f, 4, &m).unwrap(), -12.06, epsilon = 1e-9);
        let opts = ChannelOptions {
            distance: Distance::M40,
            input_mdm_loss_db: 0.0,
            ..ChannelOptions::default()
        };
        let m = ChannelModel::new(&ChannelTables::builtin(), &opts).unwrap();
        assert_relative_eq!(measure_insertion_loss(&f, 2, &m).unwrap(), -7.21, epsilon = 1e-9);
        assert_relative_eq!(
            measure_insertion_loss(&f, 2, &ChannelModel::transparent()).unwrap(),
            0.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn equipartition_splits_groups() {
        let f = make_time_bin_frame(0, 0.09, f64::INFINITY, 4).unwrap();
        let flux = GroupFlux {
            components: vec![
                FluxComponent {
                    origin: SignalId::B,
                    group: 3,
                    mode: None,
                    offset: 0,
                    amplitudes: f.slots.clone(),
                    floor: 0.0,
                },
                FluxComponent {
                    origin: SignalId::A,
                    group: 1,
                    mode: None,
                    offset: 0,
                    amplitudes: f.slots.clone(),
                    floor: 0.0,
                },
            ],
        };
        let modes = equipartition(&flux);
        assert_eq!(modes.len(), 4);
        for m in modes.iter().filter(|m| m.group == 3) {
            assert_relative_eq!(m.mean_photons(), 0.03, epsilon = 1e-15);
        }
        let g1: Vec<_> = modes.iter().filter(|m| m.group == 1).collect();
        assert_relative_eq!(g1[0].mean_photons(), 0.09, epsilon = 1e-15);
        let total: f64 = modes.iter().map(|m| m.mean_photons()).sum();
        assert_relative_eq!(total, flux.total(), epsilon = 1e-15);
    }

    #[test]
    fn zero_flux_yields_no_photons() {
        let cfg = validate_config(SimConfig::default()).unwrap();
        let train = IntensityTrain {
            origin: SignalId::A,
            group: 1,
            mode: 0,
            path: DetectorKind::TimeBin,
            offset: 0,
            means: vec![0.0; 64],
            floor: 0.0,
        };
        let mut rng = stream_rng(1, Stream::Aux(0));
        assert!(sample_photons(&[train], 0, &cfg, &mut rng).is_empty());
    }

    #[test]
    fn timestamps_cluster_on_slot_centre() {
        let cfg = validate_config(SimConfig::default()).unwrap();
        let mut means = vec![0.0; 64];
        means[20] = 2.0;
        let train = IntensityTrain {
            origin: SignalId::B,
            group: 3,
            mode: 1,
            path: DetectorKind::TimeBin,
            offset: 100_000,
            means,
            floor: 0.0,
        };
        let centre = 100_000 + 20 * 1540 + 770;
        let mut n = 0;
        for i in 0..2000 {
            let mut rng = stream_rng(9, Stream::Photons(i));
            for e in sample_photons(std::slice::from_ref(&train), i, &cfg, &mut rng) {
                assert!((e.t as i64 - centre as i64).abs() < 800);
                n += 1;
            }
        }
        // Poisson(4000)
        assert!((n as f64 - 4000.0).abs() < 4.0 * 4000f64.sqrt(), "{n}");
    }
}
