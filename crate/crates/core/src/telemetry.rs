//! Activated-expert counters per (layer, projection).
//!
//! Every token routed through an adapted matrix is one observation. Averages
//! are token-weighted: the global average is total activations over total
//! observations.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The four adapted attention projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Q,
    K,
    V,
    O,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Projection::Q, Projection::K, Projection::V, Projection::O];

    pub fn as_str(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
            Projection::O => "o",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Projection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "q" => Ok(Projection::Q),
            "k" => Ok(Projection::K),
            "v" => Ok(Projection::V),
            "o" => Ok(Projection::O),
            other => Err(Error::Validation(format!("unknown projection id {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub active_sum: u64,
    pub observations: u64,
}

impl Cell {
    pub fn average(&self) -> Option<f64> {
        (self.observations > 0).then(|| self.active_sum as f64 / self.observations as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    n_experts: usize,
    /// `cells[layer][projection]`.
    cells: Vec<[Cell; 4]>,
}

impl ActivationStats {
    pub fn new(n_layers: usize, n_experts: usize) -> Self {
        Self {
            n_experts,
            cells: vec![[Cell::default(); 4]; n_layers],
        }
    }

    pub fn n_layers(&self) -> usize {
        self.cells.len()
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    pub fn record(&mut self, layer: usize, projection: Projection, count: usize) -> Result<()> {
        if count > self.n_experts {
            return Err(Error::Validation(format!(
                "active count {count} exceeds {} experts",
                self.n_experts
            )));
        }
        let n_layers = self.n_layers();
        let cell = self
            .cells
            .get_mut(layer)
            .ok_or_else(|| Error::Validation(format!("layer {layer} out of range (have {n_layers})")))?;
        let cell = &mut cell[projection.index()];
        cell.active_sum += count as u64;
        cell.observations += 1;
        Ok(())
    }

    pub fn cell(&self, layer: usize, projection: Projection) -> Option<Cell> {
        self.cells.get(layer).map(|c| c[projection.index()])
    }

    pub fn average(&self, layer: usize, projection: Projection) -> Option<f64> {
        self.cell(layer, projection).and_then(|c| c.average())
    }

    /// Token-weighted mean over every cell.
    pub fn global_average(&self) -> Option<f64> {
        let (sum, obs) = self
            .cells
            .iter()
            .flatten()
            .fold((0u64, 0u64), |(s, o), c| (s + c.active_sum, o + c.observations));
        (obs > 0).then(|| sum as f64 / obs as f64)
    }

    /// Mean over the four projections of one layer.
    pub fn layer_average(&self, layer: usize) -> Option<f64> {
        let cells = self.cells.get(layer)?;
        let (sum, obs) = cells
            .iter()
            .fold((0u64, 0u64), |(s, o), c| (s + c.active_sum, o + c.observations));
        (obs > 0).then(|| sum as f64 / obs as f64)
    }

    pub fn total_observations(&self) -> u64 {
        self.cells.iter().flatten().map(|c| c.observations).sum()
    }

    pub fn merge(&self, other: &ActivationStats) -> Result<ActivationStats> {
        if self.n_layers() != other.n_layers() || self.n_experts != other.n_experts {
            return Err(Error::shape(
                "ActivationStats::merge",
                format!("{} layers, {} experts", self.n_layers(), self.n_experts),
                format!("{} layers, {} experts", other.n_layers(), other.n_experts),
            ));
        }
        let cells = self
            .cells
            .iter()
            .zip(&other.cells)
            .map(|(a, b)| {
                std::array::from_fn(|i| Cell {
                    active_sum: a[i].active_sum + b[i].active_sum,
                    observations: a[i].observations + b[i].observations,
                })
            })
            .collect();
        Ok(ActivationStats {
            n_experts: self.n_experts,
            cells,
        })
    }

    /// Writes `layer,projection,avg_active,observations`, rows in
    /// (layer, projection) order; cells without observations get an empty
    /// average.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["layer", "projection", "avg_active", "observations"])?;
        for (layer, cells) in self.cells.iter().enumerate() {
            for p in Projection::ALL {
                let c = cells[p.index()];
                let avg = c.average().map(|a| format!("{a:.4}")).unwrap_or_default();
                w.write_record([layer.to_string(), p.to_string(), avg, c.observations.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn export_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// One parsed row of the activations CSV.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct CsvRow {
    pub layer: usize,
    pub projection: Projection,
    pub avg_active: Option<f64>,
    pub observations: u64,
}

pub fn parse_csv<R: Read>(reader: R) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_reader(reader);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_and_average() {
        let mut s = ActivationStats::new(2, 8);
        s.record(0, Projection::Q, 3).unwrap();
        s.record(0, Projection::Q, 5).unwrap();
        assert_eq!(s.average(0, Projection::Q), Some(4.0));
        assert_eq!(s.average(1, Projection::V), None);
        assert!(matches!(s.record(0, Projection::Q, 9), Err(Error::Validation(_))));
        assert!(s.record(2, Projection::Q, 1).is_err());
        assert!(matches!("x".parse::<Projection>(), Err(Error::Validation(_))));
    }

    #[test]
    fn merge_is_commutative_with_identity() {
        let mut a = ActivationStats::new(2, 4);
        let mut b = ActivationStats::new(2, 4);
        a.record(0, Projection::K, 2).unwrap();
        a.record(1, Projection::O, 4).unwrap();
        b.record(0, Projection::K, 1).unwrap();
        let empty = ActivationStats::new(2, 4);
        assert_eq!(a.merge(&empty).unwrap(), a);
        assert_eq!(a.merge(&b).unwrap(), b.merge(&a).unwrap());
        assert_eq!(a.merge(&b).unwrap().average(0, Projection::K), Some(1.5));
        assert!(a.merge(&ActivationStats::new(3, 4)).is_err());
    }

    #[test]
    fn csv_layout() {
        let mut s = ActivationStats::new(1, 8);
        s.record(0, Projection::Q, 3).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "layer,projection,avg_active,observations");
        assert_eq!(lines[1], "0,q,3.0000,1");
        assert_eq!(lines[2], "0,k,,0");
        let mut again = Vec::new();
        s.write_csv(&mut again).unwrap();
        assert_eq!(buf, again);

        let rows = parse_csv(text.as_bytes()).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].avg_active, Some(3.0));
        assert_eq!(rows[1].avg_active, None);
    }
}
