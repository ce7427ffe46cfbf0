//! Harness library behind the `optreg` binary: file formats and IO, the
//! benchmark runner, the end-to-end demo, and calibration.

pub mod bench;
pub mod calibrate;
pub mod demo;
pub mod state;
pub mod store;
