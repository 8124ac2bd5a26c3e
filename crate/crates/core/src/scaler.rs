//! Per-column min-max scaling and label encoding.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::mask::MaskMatrix;
use crate::table::{Cell, ColumnKind, Table};

#[derive(Debug, Clone, PartialEq)]
pub enum ColumnScaler {
    /// Maps observed `min → 0` and `max → 1`; constant columns map to 0.5.
    MinMax { min: f64, max: f64 },
    /// Dense label ids in first-appearance order.
    Labels {
        labels: Vec<String>,
        index: HashMap<String, usize>,
    },
    /// Text columns are not scaled.
    Identity,
}

impl ColumnScaler {
    fn labels(labels: Vec<String>) -> Self {
        let index = labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        ColumnScaler::Labels { labels, index }
    }

    pub fn scale(&self, v: f64) -> f64 {
        match self {
            ColumnScaler::MinMax { min, max } if max > min => (v - min) / (max - min),
            ColumnScaler::MinMax { .. } => 0.5,
            _ => v,
        }
    }

    pub fn unscale(&self, s: f64) -> f64 {
        match self {
            ColumnScaler::MinMax { min, max } if max > min => min + s * (max - min),
            ColumnScaler::MinMax { min, .. } => *min,
            _ => s,
        }
    }

    pub fn num_labels(&self) -> usize {
        match self {
            ColumnScaler::Labels { labels, .. } => labels.len(),
            _ => 0,
        }
    }

    pub fn label_id(&self, label: &str) -> Option<usize> {
        match self {
            ColumnScaler::Labels { index, .. } => index.get(label).copied(),
            _ => None,
        }
    }

    pub fn label(&self, id: usize) -> Option<&str> {
        match self {
            ColumnScaler::Labels { labels, .. } => labels.get(id).map(String::as_str),
            _ => None,
        }
    }

    /// Position of a label id on the [0, 1] scale: `id / (K-1)`, 0.5 when K = 1.
    pub fn id_to_unit(&self, id: usize) -> f64 {
        let k = self.num_labels();
        if k <= 1 {
            0.5
        } else {
            id as f64 / (k - 1) as f64
        }
    }

    /// Nearest valid label id for a value on the [0, 1] scale.
    pub fn unit_to_id(&self, s: f64) -> usize {
        let k = self.num_labels();
        if k <= 1 {
            return 0;
        }
        let top = (k - 1) as f64;
        (s.clamp(0.0, 1.0) * top).round().clamp(0.0, top) as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scalers {
    columns: Vec<ColumnScaler>,
}

impl Scalers {
    /// Fits on cells that are present in `t` and observed in `m`.
    pub fn fit(t: &Table, m: &MaskMatrix) -> Result<Scalers> {
        t.check_mask(m)?;
        let columns = (0..t.d())
            .map(|j| {
                let observed = (0..t.n())
                    .filter(|&i| m.is_observed(i, j))
                    .map(|i| t.cell(i, j))
                    .filter(|c| !c.is_missing());
                match t.kind(j) {
                    ColumnKind::Numerical => {
                        let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
                        for c in observed {
                            if let Cell::Number(v) = c {
                                min = min.min(*v);
                                max = max.max(*v);
                            }
                        }
                        if min > max {
                            return Err(Error::UnscalableColumn(t.names()[j].clone()));
                        }
                        Ok(ColumnScaler::MinMax { min, max })
                    }
                    ColumnKind::Categorical => {
                        let mut labels: Vec<String> = Vec::new();
                        let mut seen = HashMap::new();
                        for c in observed {
                            match c {
                                Cell::Category(s) => {
                                    if !seen.contains_key(s) {
                                        seen.insert(s.clone(), labels.len());
                                        labels.push(s.clone());
                                    }
                                }
                                other => {
                                    return Err(Error::Codec(format!(
                                        "fit expects raw labels, found {other:?}"
                                    )))
                                }
                            }
                        }
                        Ok(ColumnScaler::labels(labels))
                    }
                    ColumnKind::Text => Ok(ColumnScaler::Identity),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Scalers { columns })
    }

    pub fn column(&self, j: usize) -> &ColumnScaler {
        &self.columns[j]
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    fn check(&self, t: &Table) -> Result<()> {
        if t.d() != self.columns.len() {
            return Err(Error::Schema(format!(
                "scalers cover {} columns, table has {}",
                self.columns.len(),
                t.d()
            )));
        }
        Ok(())
    }

    /// Raw table → scaled numbers and label ids.
    pub fn apply(&self, t: &Table) -> Result<Table> {
        self.check(t)?;
        t.map_cells(|_, j, cell| {
            let s = &self.columns[j];
            Ok(match cell {
                Cell::Number(v) => Cell::Number(s.scale(*v)),
                Cell::Category(label) => Cell::CategoryId(s.label_id(label).ok_or_else(|| {
                    Error::Codec(format!("category `{label}` unseen when fitting column {j}"))
                })?),
                other => other.clone(),
            })
        })
    }

    /// Scaled table → raw numbers and labels.
    pub fn invert(&self, t: &Table) -> Result<Table> {
        self.check(t)?;
        t.map_cells(|_, j, cell| {
            let s = &self.columns[j];
            Ok(match cell {
                Cell::Number(v) => Cell::Number(s.unscale(*v)),
                Cell::CategoryId(id) => Cell::Category(
                    s.label(*id)
                        .ok_or_else(|| Error::Codec(format!("unknown category id {id} in column {j}")))?
                        .to_string(),
                ),
                other => other.clone(),
            })
        })
    }

    /// Value on the [0, 1] scale for numerical and categorical cells of a
    /// scaled or raw table; `None` for missing and text cells.
    pub fn unit_value(&self, j: usize, cell: &Cell) -> Option<f64> {
        let s = &self.columns[j];
        match cell {
            Cell::Number(v) => Some(*v),
            Cell::CategoryId(id) => Some(s.id_to_unit(*id)),
            Cell::Category(label) => s.label_id(label).map(|id| s.id_to_unit(id)),
            _ => None,
        }
    }

    /// Like [`Scalers::unit_value`] but for a raw table: numbers are scaled first.
    pub fn raw_unit_value(&self, j: usize, cell: &Cell) -> Option<f64> {
        match cell {
            Cell::Number(v) => Some(self.columns[j].scale(*v)),
            other => self.unit_value(j, other),
        }
    }
}
