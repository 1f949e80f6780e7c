//! Labeled datasets, per-site shards and the CSV dataset format.
//!
//! CSV layout: header `f0,…,f{d-1},label`, one sample per row, integer truth
//! label in the last column.

use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::LengthMismatch(features.len(), labels.len()));
        }
        if let Some(first) = features.first() {
            let d = first.len();
            if let Some(bad) = features.iter().find(|r| r.len() != d) {
                return Err(Error::Shape(format!(
                    "row has {} features, expected {d}",
                    bad.len()
                )));
            }
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let d = self.dim();
        let header: Vec<String> = (0..d)
            .map(|i| format!("f{i}"))
            .chain(["label".to_string()])
            .collect();
        writeln!(out, "{}", header.join(","))?;
        let mut line = String::new();
        for (row, label) in self.features.iter().zip(&self.labels) {
            line.clear();
            for v in row {
                line.push_str(&format!("{v},"));
            }
            line.push_str(&label.to_string());
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut lines = BufReader::new(input).lines();
        let header = lines.next().ok_or(Error::EmptyInput)??;
        let columns = header.split(',').count();
        if columns < 2 {
            return Err(Error::Shape(
                "CSV needs at least one feature and a label".into(),
            ));
        }
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() != columns {
                return Err(Error::Shape(format!(
                    "row {} has {} columns, header has {columns}",
                    n + 1,
                    cells.len()
                )));
            }
            let parse_err = |c: &str| Error::Shape(format!("row {}: cannot parse {c:?}", n + 1));
            let row = cells[..columns - 1]
                .iter()
                .map(|c| c.parse::<f64>().map_err(|_| parse_err(c)))
                .collect::<Result<Vec<_>>>()?;
            let label = cells[columns - 1]
                .parse::<usize>()
                .map_err(|_| parse_err(cells[columns - 1]))?;
            features.push(row);
            labels.push(label);
        }
        Dataset::new(features, labels)
    }
}

/// Per-feature min–max scaling to `[0, 1]`. Constant features map to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMax {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows.first().ok_or(Error::EmptyShard)?;
        let mut min = first.clone();
        let mut max = first.clone();
        for row in rows {
            for (k, &v) in row.iter().enumerate() {
                min[k] = min[k].min(v);
                max[k] = max[k].max(v);
            }
        }
        Ok(Self { min, max })
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.min.iter().zip(&self.max))
            .map(|(&v, (&lo, &hi))| {
                let span = hi - lo;
                if span > 0.0 {
                    (v - lo) / span
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Data held by one sub-site. Features are normalized with statistics of
/// this shard only.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub site: usize,
    /// Row ids in the source dataset.
    pub indices: Vec<usize>,
    pub features: Vec<Vec<f64>>,
    /// Truth labels, carried for evaluation only.
    pub labels: Vec<usize>,
    pub norm: MinMax,
    /// Seed driving this site's batch selection.
    pub seed: u64,
}

impl Shard {
    pub fn from_rows(
        site: usize,
        indices: Vec<usize>,
        raw: Vec<Vec<f64>>,
        labels: Vec<usize>,
        seed: u64,
    ) -> Result<Self> {
        if raw.len() != labels.len() || raw.len() != indices.len() {
            return Err(Error::LengthMismatch(raw.len(), labels.len()));
        }
        let norm = MinMax::fit(&raw)?;
        let features = raw.iter().map(|r| norm.apply(r)).collect();
        Ok(Self {
            site,
            indices,
            features,
            labels,
            norm,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }
}
