//! Campaign runner: TOML configs in, record streams, CSV tables, a report
//! and SVG charts out.

pub mod campaign;
pub mod chart;
pub mod commands;
pub mod config;
pub mod fsio;
pub mod report;
pub mod tables;
