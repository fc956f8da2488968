//! Metrics CSV: one row per (epoch, split).

use std::fs::File;
use std::path::Path;

use metanorm::train::EpochRecord;

use crate::error::CliError;

pub const HEADER: &str = "epoch,split,loss,error_rate,lr,wall_time_s";

/// The fields of one row, in header order.
pub fn row_fields(r: &EpochRecord) -> [String; 6] {
    [
        r.epoch.to_string(),
        r.split.to_string(),
        r.loss.to_string(),
        r.error_rate.to_string(),
        r.lr.to_string(),
        format!("{:.6}", r.wall_time_s),
    ]
}

/// Writes rows as they arrive so a run that aborts keeps what it produced.
pub struct MetricsWriter {
    out: csv::Writer<File>,
    path: String,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self, CliError> {
        let out = csv::Writer::from_path(path).map_err(|e| CliError::io(path.display(), e))?;
        let mut w = Self {
            out,
            path: path.display().to_string(),
        };
        w.write(HEADER.split(','))?;
        Ok(w)
    }

    fn write<I: IntoIterator<Item = S>, S: AsRef<[u8]>>(&mut self, fields: I) -> Result<(), CliError> {
        self.out
            .write_record(fields)
            .and_then(|_| self.out.flush().map_err(csv::Error::from))
            .map_err(|e| CliError::io(&self.path, e))
    }

    pub fn record(&mut self, r: &EpochRecord) -> Result<(), CliError> {
        self.write(row_fields(r))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use metanorm::train::Phase;

    #[test]
    fn row_format() {
        let r = EpochRecord {
            epoch: 3,
            split: Phase::Val,
            loss: 0.25,
            error_rate: 0.125,
            lr: 0.1,
            wall_time_s: 1.5,
        };
        assert_eq!(row_fields(&r).join(","), "3,val,0.25,0.125,0.1,1.500000");
        assert_eq!(HEADER.split(',').count(), row_fields(&r).len());
    }
}
