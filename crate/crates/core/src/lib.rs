//! Pixel-level optical haptic control: constant-luminance color vibration codec,
//! photodiode receiver simulation, symbol detection and latency modelling.

pub mod actuator;
pub mod afe;
pub mod colorspace;
pub mod config;
pub mod detector;
pub mod encoder;
pub mod pairgen;
pub mod psychofit;
pub mod repro;
pub mod simharness;
