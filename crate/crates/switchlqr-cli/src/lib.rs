//! Experiment harness for the switched-LQR library: configuration, scenario
//! generation, Monte Carlo execution, file outputs, and built-in self tests.

pub mod config;
pub mod experiment;
pub mod output;
pub mod scenario;
pub mod selftest;
