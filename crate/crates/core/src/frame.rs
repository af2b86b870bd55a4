//! Complex slot amplitudes of one frame.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::config::Picos;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FrameKind {
    /// A single pulse in `slot` (0-based).
    TimeBin { slot: usize },
    /// A full train with constant differential phase between adjacent pulses.
    Phase { phi_a: f64 },
}

/// One frame as emitted by a transmitter.
///
/// `|slots[m]|^2` is the mean photon number carried by pulse `m`; `floor_rate`
/// is extra mean photon number spread uniformly over the occupied window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameAmplitudes {
    pub slots: Vec<Complex64>,
    pub floor_rate: f64,
    /// Start of the occupied half-frame within the frame period.
    pub offset: Picos,
    pub kind: FrameKind,
}

impl FrameAmplitudes {
    pub fn d(&self) -> usize {
        self.slots.len()
    }

    pub fn slot_intensities(&self) -> Vec<f64> {
        self.slots.iter().map(|a| a.norm_sqr()).collect()
    }

    pub fn pulse_photons(&self) -> f64 {
        self.slots.iter().map(|a| a.norm_sqr()).sum()
    }

    /// Total mean photon number, pulses plus floor.
    pub fn mean_photons(&self) -> f64 {
        self.pulse_photons() + self.floor_rate
    }

    pub fn is_phase(&self) -> bool {
        matches!(self.kind, FrameKind::Phase { .. })
    }

    pub fn with_offset(mut self, offset: Picos) -> Self {
        self.offset = offset;
        self
    }
}
