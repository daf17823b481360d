//! Configuration, CLI studies, and report writers around octrl-core.

pub mod config;
pub mod error;
pub mod expr;
pub mod report;
pub mod studies;
