use std::io::Write;

use hbdc::metrics::bits_to_megabytes;
use serde::Serialize;

use crate::pipeline::RunResults;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub dataset: String,
    pub seed: u64,
    pub mode: String,
    pub purity: f64,
    pub nmi: f64,
    pub total_bits: u64,
    pub cost_mb: f64,
    pub upper_bound_mb: f64,
    pub n_codes: usize,
}

/// One row per run, sorted by dataset name then seed.
pub fn report_rows(runs: &[RunResults]) -> Vec<ReportRow> {
    let mut rows: Vec<ReportRow> = runs
        .iter()
        .map(|r| ReportRow {
            dataset: r.name.clone(),
            seed: r.seed,
            mode: format!("{:?}", r.mode).to_lowercase(),
            purity: r.purity,
            nmi: r.nmi,
            total_bits: r.ledger.total_bits,
            cost_mb: bits_to_megabytes(r.ledger.total_bits),
            upper_bound_mb: bits_to_megabytes(r.ledger.upper_bound_bits),
            n_codes: r.n_codes,
        })
        .collect();
    rows.sort_by(|a, b| a.dataset.cmp(&b.dataset).then(a.seed.cmp(&b.seed)));
    rows
}

pub fn write_report<W: Write>(runs: &[RunResults], out: W) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in report_rows(runs) {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
