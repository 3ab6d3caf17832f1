//! Command-line pipeline over `gram-core`.

pub mod app;
pub mod config;
pub mod error;
pub mod stages;
