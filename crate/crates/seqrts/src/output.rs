//! Metrics, summary, tune report and run manifest files.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use seqrts_core::metrics::{BlockMetrics, Summary};

use crate::config::Config;
use crate::error::AppError;
use crate::fmt::{float, opt_float};
use crate::harness::TuneReport;

pub const METRICS_HEADER: [&str; 12] = [
    "participant_id",
    "day",
    "block",
    "n_risk",
    "y",
    "mad",
    "kl",
    "hellinger",
    "ipp",
    "mean_sed",
    "end_prop",
    "hour_var",
];

pub const TUNE_HEADER: [&str; 4] = ["n0_hat", "mean_block_y", "mean_kl", "mean_mad"];

fn csv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out)
}

fn finish<W: Write>(mut w: csv::Writer<W>) -> csv::Result<W> {
    w.flush()?;
    w.into_inner().map_err(|e| csv::Error::from(e.into_error()))
}

/// Metrics CSV text; block 0 is the whole day.
pub fn metrics_csv(rows: &[BlockMetrics]) -> String {
    let mut w = csv_writer(Vec::new());
    w.write_record(METRICS_HEADER).expect("in-memory write");
    for m in rows {
        w.write_record([
            m.participant_id.to_string(),
            m.day.to_string(),
            m.unit.code().to_string(),
            m.n_risk.to_string(),
            m.y.to_string(),
            opt_float(m.mad),
            opt_float(m.kl),
            opt_float(m.hellinger),
            float(m.ipp),
            m.covariates.mean_sed.to_string(),
            float(m.covariates.end_prop),
            m.covariates.hour_var.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(finish(w).expect("in-memory write")).expect("UTF-8")
}

pub fn tune_csv(report: &TuneReport) -> String {
    let mut w = csv_writer(Vec::new());
    w.write_record(TUNE_HEADER).expect("in-memory write");
    for p in &report.points {
        w.write_record([float(p.n0_hat), float(p.mean_block_y), opt_float(p.mean_kl), opt_float(p.mean_mad)])
            .expect("in-memory write");
    }
    String::from_utf8(finish(w).expect("in-memory write")).expect("UTF-8")
}

pub fn pretty_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

pub fn summary_json(summary: &Summary, units: &BTreeMap<String, usize>) -> String {
    #[derive(Serialize)]
    struct Doc<'a> {
        included_units: &'a BTreeMap<String, usize>,
        #[serde(flatten)]
        summary: &'a Summary,
    }
    pretty_json(&Doc { included_units: units, summary })
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: u64,
    pub config: Config,
    /// SHA-256 of every output file, keyed by file name.
    pub outputs: BTreeMap<String, String>,
}

/// Collects output files of one command and writes them with a manifest.
pub struct OutputDir<'a> {
    dir: &'a Path,
    digests: BTreeMap<String, String>,
}

impl<'a> OutputDir<'a> {
    pub fn create(dir: &'a Path) -> Result<Self, AppError> {
        std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir.display(), e))?;
        Ok(OutputDir { dir, digests: BTreeMap::new() })
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<(), AppError> {
        let path = self.dir.join(name);
        std::fs::write(&path, contents).map_err(|e| AppError::io(path.display(), e))?;
        self.digests.insert(name.to_string(), hex::encode(Sha256::digest(contents.as_bytes())));
        Ok(())
    }

    /// Write the effective config and the manifest over everything written so far.
    pub fn finish(mut self, command: &str, seed: u64, config: &Config) -> Result<(), AppError> {
        self.write("config.json", &config.to_json())?;
        let manifest = RunManifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            seed,
            config: config.clone(),
            outputs: self.digests,
        };
        let path = self.dir.join("manifest.json");
        std::fs::write(&path, pretty_json(&manifest)).map_err(|e| AppError::io(path.display(), e))
    }
}
