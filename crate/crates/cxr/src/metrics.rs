//! Per-epoch learning curves as CSV (`epoch,train_loss,val_loss,val_cider`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Empty when validation scoring was skipped.
    pub val_cider: Option<f64>,
}

pub fn write_csv(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let tmp = path.with_extension("csv.tmp");
    {
        let mut w = csv::Writer::from_path(&tmp)?;
        if rows.is_empty() {
            w.write_record(["epoch", "train_loss", "val_loss", "val_cider"])?;
        }
        for r in rows {
            w.serialize(r)?;
        }
        w.flush().map_err(io_err(&tmp))?;
    }
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn read_csv(path: &Path) -> Result<Vec<EpochMetrics>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Into::into)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_missing_cider() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let rows = vec![
            EpochMetrics { epoch: 1, train_loss: 2.5, val_loss: 2.25, val_cider: None },
            EpochMetrics { epoch: 2, train_loss: 0.1 + 0.2, val_loss: 1.0 / 3.0, val_cider: Some(0.75) },
        ];
        write_csv(&path, &rows).unwrap();
        assert_eq!(read_csv(&path).unwrap(), rows);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,train_loss,val_loss,val_cider\n1,2.5,2.25,\n"));
    }
}
