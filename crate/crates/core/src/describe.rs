//! Static layer tables.
//!
//! Every module can walk its own structure for a given input shape without
//! touching any tensor data, producing one [`LayerRecord`] per primitive
//! operation with its output shape, parameter count and multiply-accumulate
//! count. The efficiency report and the `describe` command are both built
//! from these tables.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};

/// Batch, channels, height, width.
pub type Shape4 = [usize; 4];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    BatchNorm,
    Activation,
    Elementwise,
    Pool,
    Resize,
    Concat,
    Rotate,
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerRecord {
    pub name: String,
    pub kind: LayerKind,
    pub output: Shape4,
    pub params: u64,
    pub macs: u64,
}

pub(crate) fn numel(s: Shape4) -> u64 {
    s.iter().map(|&d| d as u64).product()
}

/// Collects layer records while modules walk their structure.
#[derive(Debug, Default)]
pub struct Tracer {
    records: Vec<LayerRecord>,
}

impl Tracer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(
        &mut self,
        name: impl Into<String>,
        kind: LayerKind,
        output: Shape4,
        params: u64,
        macs: u64,
    ) -> Result<Shape4> {
        let name = name.into();
        if output.contains(&0) {
            return Err(Error::input(format!(
                "layer {name} ({kind:?}) has a degenerate or dynamic output shape {output:?}"
            )));
        }
        self.records.push(LayerRecord {
            name,
            kind,
            output,
            params,
            macs,
        });
        Ok(output)
    }

    /// One unit of work per output element (activations, products, sums).
    pub fn elementwise(&mut self, name: impl Into<String>, kind: LayerKind, s: Shape4) -> Result<Shape4> {
        self.record(name, kind, s, 0, numel(s))
    }

    pub fn finish(self) -> LayerTable {
        LayerTable {
            rows: self.records,
        }
    }
}

/// The flattened layer table of a network for one input shape.
#[derive(Debug, Clone, Serialize)]
pub struct LayerTable {
    pub rows: Vec<LayerRecord>,
}

impl LayerTable {
    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    /// MACs of all rows whose name starts with `prefix`.
    pub fn macs_under(&self, prefix: &str) -> u64 {
        self.rows
            .iter()
            .filter(|r| r.name.starts_with(prefix))
            .map(|r| r.macs)
            .sum()
    }

    pub fn params_under(&self, prefix: &str) -> u64 {
        self.rows
            .iter()
            .filter(|r| r.name.starts_with(prefix))
            .map(|r| r.params)
            .sum()
    }

    /// Fixed-width text rendering, one row per layer plus a total line.
    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:<11}  {:<22}  {:>12}  {:>16}",
            "name", "kind", "output", "params", "macs"
        );
        for r in &self.rows {
            let shape = format!("{:?}", r.output);
            let _ = writeln!(
                out,
                "{:<width$}  {:<11}  {:<22}  {:>12}  {:>16}",
                r.name,
                format!("{:?}", r.kind),
                shape,
                r.params,
                r.macs
            );
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:<11}  {:<22}  {:>12}  {:>16}",
            "total",
            "",
            "",
            self.total_params(),
            self.total_macs()
        );
        out
    }
}
