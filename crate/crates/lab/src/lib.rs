//! Std companion of `sent-core`: TOML config, file formats, the `sent`
//! command line and the desk-scale GRPO/SENT comparison.

pub mod cli;
pub mod config;
pub mod experiment;
pub mod formats;
