//! CSV output: cost sweeps, training history, and per-clip embeddings.
//! Every writer is deterministic byte for byte.

use std::fs;
use std::path::Path;

use crate::attention::{cost_report, WindowSpec};
use crate::error::{Error, Result};
use crate::eval::{cls_embeddings, parallel_map, worker_count};
use crate::model::Model;
use crate::synth::Dataset;
use crate::train::EpochRecord;

pub const COST_HEADER: &str = "F,H,W,f,h,w,cost_local,cost_global,cost_logo_total,cost_full,cost_spatial_only,cost_divided,cost_mixing,ordering_ok";
pub const HISTORY_HEADER: &str = "epoch,loss_total,loss_ce,loss_compact,train_uar,train_war";

/// `(F, H, W, f, h, w)`: grid extents then window extents.
pub type CostConfig = (usize, usize, usize, usize, usize, usize);

/// One CSV row per config. Invalid configs keep their row, with empty cost
/// cells and an `error:` marker in the last column naming the bad axis.
pub fn cost_csv(grid: &[CostConfig]) -> String {
    let rows = parallel_map(grid, worker_count(), |_, &(gf, gh, gw, wf, wh, ww)| {
        match cost_report(gf, gh, gw, &WindowSpec::new(wf, wh, ww)) {
            Ok(r) => format!(
                "{gf},{gh},{gw},{wf},{wh},{ww},{},{},{},{},{},{},{},{}",
                r.cost_local,
                r.cost_global,
                r.cost_logo_total,
                r.cost_full,
                r.cost_spatial_only,
                r.cost_divided,
                r.cost_mixing,
                r.ordering_ok()
            ),
            Err(Error::Window { axis, .. }) => {
                format!("{gf},{gh},{gw},{wf},{wh},{ww},,,,,,,,error:{axis}")
            }
            Err(_) => format!("{gf},{gh},{gw},{wf},{wh},{ww},,,,,,,,error:invalid"),
        }
    });
    let mut out = String::with_capacity(COST_HEADER.len() + 1 + rows.len() * 48);
    out.push_str(COST_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row);
        out.push('\n');
    }
    out
}

/// Parses a grid file: one `F,H,W,f,h,w` config per line, `#` comments and
/// blank lines skipped.
pub fn parse_cost_grid(text: &str) -> Result<Vec<CostConfig>> {
    let mut grid = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 6 {
            return Err(Error::config(format!(
                "grid line {}: expected 6 comma-separated integers, got {raw:?}",
                lineno + 1
            )));
        }
        let mut values = [0usize; 6];
        for (slot, field) in values.iter_mut().zip(&fields) {
            *slot = field.parse().map_err(|_| {
                Error::config(format!("grid line {}: {field:?} is not an integer", lineno + 1))
            })?;
        }
        let [gf, gh, gw, wf, wh, ww] = values;
        grid.push((gf, gh, gw, wf, wh, ww));
    }
    Ok(grid)
}

pub fn history_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.loss_total, r.loss_ce, r.loss_compact, r.train_uar, r.train_war
        ));
    }
    out
}

/// One row per clip: the label, then the final classification-token
/// embedding.
pub fn embeddings_csv(model: &Model, dataset: &Dataset) -> Result<String> {
    let embeddings = cls_embeddings(model, dataset, worker_count())?;
    let d = model.config.embed_dim;
    let mut out = String::from("label");
    for i in 0..d {
        out.push_str(&format!(",f{i}"));
    }
    out.push('\n');
    for (label, e) in dataset.labels.iter().zip(&embeddings) {
        out.push_str(&label.to_string());
        for v in e.data() {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn export_embeddings(model: &Model, dataset: &Dataset, path: &Path) -> Result<()> {
    write_text(path, &embeddings_csv(model, dataset)?)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
