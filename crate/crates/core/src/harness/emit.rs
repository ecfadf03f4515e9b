use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use super::metrics::MetricsReport;

pub const CSV_COLUMNS: [&str; 12] = [
    "scenario",
    "seed",
    "trials",
    "delivery_ratio",
    "wire_duplicates",
    "app_duplicates",
    "rerr_success",
    "rerr_stranded",
    "mean_delay_us",
    "max_delay_us",
    "frames_corrupted",
    "frames_total",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

pub fn to_csv(report: &MetricsReport) -> String {
    let row = [
        report.scenario.replace(',', "_"),
        report.seed.to_string(),
        report.trials.to_string(),
        report.delivery_ratio.to_string(),
        report.wire_duplicates.to_string(),
        report.app_duplicates.to_string(),
        report.rerr_success.to_string(),
        report.rerr_stranded.to_string(),
        report.mean_delay_us.to_string(),
        report.max_delay_us.to_string(),
        report.frames_corrupted.to_string(),
        report.frames_total.to_string(),
    ];
    format!("{}\n{}\n", CSV_COLUMNS.join(","), row.join(","))
}

pub fn to_json(report: &MetricsReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report fields are serializable");
    s.push('\n');
    s
}

pub fn from_json(text: &str) -> serde_json::Result<MetricsReport> {
    serde_json::from_str(text)
}

/// Write `<dir>/<scenario>.<ext>` and return its path.
pub fn emit(report: &MetricsReport, format: Format, dir: &Path) -> io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("{}.{}", report.scenario, format.extension()));
    let body = match format {
        Format::Csv => to_csv(report),
        Format::Json => to_json(report),
    };
    fs::write(&path, body)?;
    Ok(path)
}
