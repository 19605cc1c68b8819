//! Experiment orchestration: configuration, stage pipelines, reports.

pub mod accounting;
pub mod commands;
pub mod config;
pub mod pipeline;
pub mod report;
