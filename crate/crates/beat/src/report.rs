//! Recall tables and CSV files.

use std::fmt::Write as _;

use beat_core::ablation::AblationResult;
use beat_core::config::TrainConfig;
use beat_core::eval::RecallReport;
use sha2::{Digest, Sha256};

/// First 16 hex digits of the SHA-256 of the config's JSON form.
pub fn config_digest(config: &TrainConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    let mut s = hex::encode(Sha256::digest(&json));
    s.truncate(16);
    s
}

pub struct ReportRow<'a> {
    pub exp_id: &'a str,
    pub label: &'a str,
    pub config: &'a TrainConfig,
    pub report: &'a RecallReport,
}

impl<'a> From<&'a AblationResult> for ReportRow<'a> {
    fn from(r: &'a AblationResult) -> Self {
        Self { exp_id: &r.row.exp_id, label: &r.row.label, config: &r.row.config, report: &r.report }
    }
}

fn cell(r: &RecallReport, k: usize) -> String {
    r.at(k).map_or_else(|| "-".to_string(), |v| format!("{v:.2}"))
}

pub fn table(rows: &[ReportRow<'_>]) -> String {
    let w = rows.iter().map(|r| r.exp_id.len().max(r.label.len())).max().unwrap_or(0).max(6);
    let mut s = format!("{:<w$}  {:<w$}  {:>7}  {:>7}  {:>7}\n", "exp_id", "config", "R@1", "R@5", "R@10");
    for r in rows {
        let rp = r.report;
        writeln!(s, "{:<w$}  {:<w$}  {:>7}  {:>7}  {:>7}", r.exp_id, r.label, cell(rp, 1), cell(rp, 5), cell(rp, 10)).unwrap();
    }
    s
}

pub fn csv(rows: &[ReportRow<'_>]) -> String {
    let mut s = String::from("exp_id,config_digest,R@1,R@5,R@10\n");
    for r in rows {
        let rp = r.report;
        writeln!(s, "{},{},{},{},{}", r.exp_id, config_digest(r.config), cell(rp, 1), cell(rp, 5), cell(rp, 10)).unwrap();
    }
    s
}
