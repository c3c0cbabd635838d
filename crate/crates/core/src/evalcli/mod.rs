//! Metrics, run configuration, and the command-line front end.

pub mod cli;
pub mod config;
pub mod metrics;

pub use metrics::{flicker_score, psnr, ssim, ssim_with, MetricReport, PsnrReport};
