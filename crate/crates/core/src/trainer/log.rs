//! Per-batch training records and their CSV form.

use std::io::Write;

use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub epoch: usize,
    pub batch: usize,
    /// Batch-mean losses `f̂_0 … f̂_L`.
    pub losses: Vec<f64>,
    /// Dual state after the step; `None` for unconstrained training.
    pub lambda: Option<Vec<f64>>,
    pub slack: Option<Vec<f64>>,
    pub g: Option<Vec<f64>>,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub num_layers: usize,
    pub records: Vec<LogRecord>,
}

impl TrainingLog {
    pub fn new(num_layers: usize) -> Self {
        TrainingLog {
            num_layers,
            records: Vec::new(),
        }
    }

    pub fn header(&self) -> Vec<String> {
        let l = self.num_layers;
        let mut h = vec!["epoch".to_string(), "batch".to_string()];
        h.extend((0..=l).map(|i| format!("f{i}")));
        h.extend((1..=l).map(|i| format!("lambda{i}")));
        h.extend((1..=l).map(|i| format!("u{i}")));
        h.extend((1..=l).map(|i| format!("g{i}")));
        h.push("wall_ms".to_string());
        h
    }

    /// Writes a header row and one row per batch. Columns without a value
    /// (dual quantities of unconstrained runs) are left empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.header())?;
        let l = self.num_layers;
        for r in &self.records {
            let mut row = vec![r.epoch.to_string(), r.batch.to_string()];
            row.extend(r.losses.iter().map(f64::to_string));
            for col in [&r.lambda, &r.slack, &r.g] {
                match col {
                    Some(v) => row.extend(v.iter().map(f64::to_string)),
                    None => row.extend(std::iter::repeat_n(String::new(), l)),
                }
            }
            row.push(r.wall_ms.to_string());
            w.write_record(&row)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Mean of `f̂_L` over the batches of each epoch.
    pub fn epoch_final_losses(&self) -> Vec<f64> {
        let mut out: Vec<(f64, usize)> = Vec::new();
        for r in &self.records {
            if out.len() <= r.epoch {
                out.resize(r.epoch + 1, (0.0, 0));
            }
            out[r.epoch].0 += r.losses[self.num_layers];
            out[r.epoch].1 += 1;
        }
        out.into_iter().map(|(s, n)| s / n as f64).collect()
    }
}
