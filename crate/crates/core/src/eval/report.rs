use std::io::Write;

use super::experiment::ExperimentReport;
use crate::error::{PimError, Result};

pub const TSV_HEADER: &str =
    "experiment\tmethod\tbudget\tmacro_f1_mean\tmacro_f1_std\taccuracy_mean\taccuracy_std\tn_runs\tconfig_fingerprint";

/// One row per experiment, method and budget.
pub fn write_tsv<W: Write>(reports: &[ExperimentReport], mut w: W) -> Result<()> {
    let io = |e| PimError::io("<tsv>", e);
    writeln!(w, "{TSV_HEADER}").map_err(io)?;
    for r in reports {
        for m in &r.results {
            let method = serde_json::to_value(m.method)?;
            writeln!(
                w,
                "{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{}\t{}",
                r.name,
                method.as_str().unwrap_or_default(),
                m.budget,
                m.macro_f1.mean,
                m.macro_f1.std,
                m.accuracy.mean,
                m.accuracy.std,
                m.macro_f1.n,
                m.config_fingerprint
            )
            .map_err(io)?;
        }
    }
    Ok(())
}

pub fn to_tsv(reports: &[ExperimentReport]) -> Result<String> {
    let mut buf = Vec::new();
    write_tsv(reports, &mut buf)?;
    Ok(String::from_utf8(buf).expect("ascii table"))
}
