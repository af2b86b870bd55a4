//! Photon-level Monte Carlo simulator for multilevel time-bin and phase
//! transmission over a mode-multiplexed few-mode fiber link.

pub mod analysis;
pub mod channel;
pub mod config;
pub mod encoder;
pub mod frame;
pub mod protocol;
pub mod receiver;
pub mod rng;
pub mod runner;
pub mod scenario;
pub mod sim;
