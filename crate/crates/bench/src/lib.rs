//! Experiment harness for the calendering controller: configuration,
//! grid and ablation runs, aggregate tables and interval plots.

pub mod config;
mod error;
pub mod grid;
pub mod plot;
pub mod report;

use std::path::{Path, PathBuf};

pub use config::{load_config, Config};
pub use error::{Error, Result};
pub use grid::{RunRecord, Scenario};

use crate::error::io_error;

/// Writes `aggregate/tableV.csv`, the ablation tables when `ablation` has
/// records, and `plots/*.svg`. Returns the files written.
pub fn emit_outputs(records: &[RunRecord], out: &Path, ablation: Option<&Scenario>) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        return Err(Error::Other("no run records to report".into()));
    }
    let agg = out.join("aggregate");
    std::fs::create_dir_all(&agg).map_err(io_error(&agg))?;
    let summaries = report::summarize(records);
    let mut written = vec![agg.join("tableV.csv")];
    report::write_table_v(&written[0], &summaries)?;
    if let Some(s) = ablation.filter(|s| summaries.iter().any(|x| x.scenario.name() == s.name())) {
        report::write_ablation_tables(&agg, &summaries, s)?;
        written.extend(report::ABLATION_TABLES.iter().map(|t| agg.join(t.file)));
    }
    written.extend(plot::write_plots(&out.join("plots"), records)?);
    Ok(written)
}
