//! Frame scheduling statistics and per-frame photon budgets.

use proptest::prelude::*;
use sdmq::config::{validate_config, SignalAssignment, SignalId, SimConfig};
use sdmq::encoder::{encode_frame, make_phase_frame, make_time_bin_frame, FramePolicy};
use sdmq::protocol::{Basis, BasisChoice};
use sdmq::rng::{stream_rng, Stream};

#[test]
fn time_bin_fraction_is_binomial() {
    let cfg = validate_config(SimConfig::default()).unwrap();
    let sig = SignalAssignment::new(SignalId::B, 1, 1, true);
    let n = 1_000_000u64;
    let tb = (0..n)
        .filter(|&i| !encode_frame(&sig, i, &cfg, &FramePolicy::Mixed, 21).unwrap().frame.is_phase())
        .count();
    let frac = tb as f64 / n as f64;
    assert!((frac - 0.5).abs() <= 0.002, "{frac}");
}

#[test]
fn basis_choices_are_balanced() {
    let n = 1_000_000u64;
    let z = (0..n)
        .filter(|&i| {
            let mut rng = stream_rng(4, Stream::Schedule(SignalId::A, i));
            BasisChoice::random(&mut rng).basis == Basis::Z
        })
        .count();
    let frac = z as f64 / n as f64;
    assert!((frac - 0.5).abs() <= 0.0015, "{frac}");
}

#[test]
fn floor_takes_half_at_extinction_63() {
    let f = make_time_bin_frame(0, 1.0, 63.0, 64).unwrap();
    assert!((f.floor_rate - 0.5).abs() < 1e-15);
    assert!((f.slots[0].norm_sqr() - 0.5).abs() < 1e-15);
}

proptest! {
    #[test]
    fn frames_carry_exactly_mu(slot in 0usize..64, mu in 1e-3f64..10.0, ext in 1.5f64..1e6, phi in -7.0f64..7.0) {
        let tb = make_time_bin_frame(slot, mu, ext, 64).unwrap();
        prop_assert!((tb.mean_photons() - mu).abs() <= 1e-12 * mu);
        let ph = make_phase_frame(phi, mu, 64).unwrap();
        prop_assert!((ph.mean_photons() - mu).abs() <= 1e-12 * mu);
        let i = ph.slot_intensities();
        let (lo, hi) = i.iter().fold((f64::MAX, 0.0f64), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        prop_assert!((hi / lo - 1.0).abs() < 1e-12);
    }
}
