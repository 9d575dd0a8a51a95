pub mod artifacts;
pub mod commands;
pub mod config;
pub mod report;
pub mod seeds;
pub mod suites;
