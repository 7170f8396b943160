use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{train, TrainConfig, TrainingData};
use crate::error::{Error, Result};
use crate::unet::{UNet, UNetConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub phis: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub epochs: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            phis: vec![1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0, 1.0 / 2.0],
            batch_sizes: vec![1, 2, 4, 8, 16],
            epochs: 60,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.phis.is_empty() || self.batch_sizes.is_empty() {
            return Err(Error::config("grid axes must not be empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub phi: f64,
    pub batch_size: usize,
    /// Maximum validation mean IoU over the run, or the error that ended it.
    pub result: std::result::Result<f64, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub cells: Vec<GridCell>,
}

impl GridResult {
    /// Best successful cell; ties keep the first in grid order.
    pub fn argmax(&self) -> Option<&GridCell> {
        let mut best: Option<&GridCell> = None;
        for c in &self.cells {
            if let Ok(v) = c.result {
                if best.is_none_or(|b| v > *b.result.as_ref().unwrap()) {
                    best = Some(c);
                }
            }
        }
        best
    }

    /// Columns `row,phi,batch_size,max_val_mean_iou,status`; one `cell` row
    /// per grid point in Φ-major order followed by one `argmax` row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["row", "phi", "batch_size", "max_val_mean_iou", "status"])?;
        for c in &self.cells {
            let (value, status) = match &c.result {
                Ok(v) => (v.to_string(), "ok".to_string()),
                Err(e) => (String::new(), format!("failed: {e}")),
            };
            w.write_record(["cell", &c.phi.to_string(), &c.batch_size.to_string(), &value, &status])?;
        }
        match self.argmax() {
            Some(c) => w.write_record([
                "argmax",
                &c.phi.to_string(),
                &c.batch_size.to_string(),
                &c.result.as_ref().unwrap().to_string(),
                "ok",
            ])?,
            None => w.write_record(["argmax", "", "", "", "no successful cell"])?,
        }
        w.flush().map_err(|e| Error::io("<grid csv>", e))?;
        Ok(())
    }
}

/// Trains one model per (Φ, batch size) cell. Every cell starts from a
/// network built with `model_seed` and trains with `base` apart from batch
/// size and epoch count. A failing cell is recorded and the rest continue.
pub fn grid_search(
    spec: &GridSpec,
    architecture: &UNetConfig,
    data: &TrainingData,
    base: &TrainConfig,
    model_seed: u64,
) -> Result<GridResult> {
    spec.validate()?;
    let points: Vec<(f64, usize)> = spec
        .phis
        .iter()
        .flat_map(|&phi| spec.batch_sizes.iter().map(move |&b| (phi, b)))
        .collect();
    let cells = points
        .par_iter()
        .map(|&(phi, batch_size)| {
            let result = (|| {
                let net = UNet::build(UNetConfig { phi, ..architecture.clone() }, model_seed)?;
                let cfg = TrainConfig {
                    batch_size,
                    epochs: spec.epochs,
                    ..base.clone()
                };
                let out = train(net, data, &cfg)?;
                out.history
                    .iter()
                    .filter_map(|r| r.val_mean_iou)
                    .reduce(f64::max)
                    .ok_or_else(|| Error::data("run produced no validation score"))
            })();
            GridCell {
                phi,
                batch_size,
                result: result.map_err(|e| format!("{}: {e}", e.category())),
            }
        })
        .collect();
    Ok(GridResult { cells })
}
