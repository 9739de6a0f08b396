//! Debug dumps: attention weights and per-layer GTK states of one batch.

use std::path::{Path, PathBuf};

use mumo_core::model::{Model, ModelBatch, Trace};
use mumo_core::tensor::{Scalar, Tape};
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Serialize)]
struct LayerDump<'a> {
    layer: usize,
    /// `[batch, d]`, row-major.
    gtk: &'a [f64],
}

/// Runs one traced forward pass.
pub fn trace_batch<T: Scalar>(model: &Model<T>, batch: &ModelBatch) -> Result<Trace> {
    let tape = Tape::new();
    let ctx = model.bind(&tape, false, 0).with_trace();
    model.forward(&ctx, batch)?;
    Ok(ctx.take_trace().unwrap_or_default())
}

/// Writes `attention.json` and `layers.json` into `dir`; returns both paths.
pub fn write_trace(dir: &Path, trace: &Trace) -> Result<[PathBuf; 2]> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let attention = dir.join("attention.json");
    let layers = dir.join("layers.json");
    let text = serde_json::to_string(&trace.attention).map_err(|e| Error::json("attention dump", e))?;
    std::fs::write(&attention, text).map_err(|e| Error::io(&attention, e))?;
    let rows: Vec<LayerDump> = trace
        .layer_gtk
        .iter()
        .enumerate()
        .map(|(i, g)| LayerDump { layer: i + 1, gtk: g })
        .collect();
    let text = serde_json::to_string(&rows).map_err(|e| Error::json("layer dump", e))?;
    std::fs::write(&layers, text).map_err(|e| Error::io(&layers, e))?;
    Ok([attention, layers])
}
