//! Mean activity of the inter-stage features, for watching how information flows
//! between stages during training.

use candle_core::{DType, Tensor};
use serde::Serialize;

use crate::error::Result;
use crate::network::DerainModel;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticsDump {
    pub epoch: usize,
    /// Mean of `H` per encoder–decoder stage (`tau + 1` entries).
    pub h_means: Vec<f64>,
    /// Per-stage, per-scale means of `O`, finest scale first.
    pub o_means: Vec<Vec<f64>>,
}

impl DiagnosticsDump {
    pub fn record_count(&self) -> (usize, usize) {
        (self.h_means.len(), self.o_means.iter().map(Vec::len).sum())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("dump serializes")
    }
}

fn mean(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.mean_all()?.to_scalar::<f64>()?)
}

/// Runs `batch` (normalized, size divisible by 4) through the model and records the
/// means of every stage's `H` and `O`.
pub fn dump_diagnostics(model: &DerainModel, batch: &Tensor, epoch: usize) -> Result<DiagnosticsDump> {
    let out = model.forward(batch)?;
    let h_means = out.hidden.iter().map(mean).collect::<Result<Vec<_>>>()?;
    let o_means = out
        .cross_stage
        .iter()
        .map(|o| o.per_scale.iter().map(mean).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(DiagnosticsDump {
        epoch,
        h_means,
        o_means,
    })
}
