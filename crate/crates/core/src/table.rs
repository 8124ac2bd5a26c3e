//! Mixed-type table model and CSV ingestion/emission.
//!
//! A [`Table`] is an immutable `n × d` grid of [`Cell`]s where each column has
//! exactly one [`ColumnKind`]. Missing cells are [`Cell::Missing`]; in CSV form
//! they are empty fields.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mask::MaskMatrix;

/// Distinct-value ratio at or below which a non-numeric column is inferred
/// to be categorical.
pub const CATEGORICAL_RATIO: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ColumnKind {
    Numerical,
    Categorical,
    Text,
}

impl ColumnKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ColumnKind::Numerical => "numerical",
            ColumnKind::Categorical => "categorical",
            ColumnKind::Text => "text",
        }
    }

    /// Numerical and categorical targets share the scalar regression head.
    pub fn is_scalar(&self) -> bool {
        !matches!(self, ColumnKind::Text)
    }
}

impl fmt::Display for ColumnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ColumnKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "numerical" | "numeric" | "num" => Ok(ColumnKind::Numerical),
            "categorical" | "category" | "cat" => Ok(ColumnKind::Categorical),
            "text" | "string" => Ok(ColumnKind::Text),
            other => Err(Error::Schema(format!("unknown column kind `{other}`"))),
        }
    }
}

/// One table cell. Categorical cells are either raw labels or, after
/// scaling, dense integer ids.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Missing,
    Number(f64),
    Category(String),
    CategoryId(usize),
    Text(String),
}

impl Cell {
    pub fn is_missing(&self) -> bool {
        matches!(self, Cell::Missing)
    }

    fn fits(&self, kind: ColumnKind) -> bool {
        matches!(
            (self, kind),
            (Cell::Missing, _)
                | (Cell::Number(_), ColumnKind::Numerical)
                | (Cell::Category(_), ColumnKind::Categorical)
                | (Cell::CategoryId(_), ColumnKind::Categorical)
                | (Cell::Text(_), ColumnKind::Text)
        )
    }

    /// Text rendering used in CSV output and prompt serialization.
    pub fn render(&self) -> String {
        match self {
            Cell::Missing => String::new(),
            Cell::Number(v) => format_number(*v),
            Cell::Category(s) | Cell::Text(s) => s.clone(),
            Cell::CategoryId(id) => id.to_string(),
        }
    }
}

/// Shortest representation that parses back to the same `f64`.
pub fn format_number(v: f64) -> String {
    format!("{v}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    names: Vec<String>,
    kinds: Vec<ColumnKind>,
    cells: Vec<Cell>,
    n: usize,
}

impl Table {
    pub fn new(names: Vec<String>, kinds: Vec<ColumnKind>, rows: Vec<Vec<Cell>>) -> Result<Self> {
        if names.len() != kinds.len() {
            return Err(Error::Schema(format!(
                "{} column names but {} kinds",
                names.len(),
                kinds.len()
            )));
        }
        let d = names.len();
        if d == 0 {
            return Err(Error::Structure("table has no columns".into()));
        }
        if rows.is_empty() {
            return Err(Error::EmptyInput);
        }
        let n = rows.len();
        let mut cells = Vec::with_capacity(n * d);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != d {
                return Err(Error::Structure(format!(
                    "row {i} has {} cells, expected {d}",
                    row.len()
                )));
            }
            for (j, cell) in row.into_iter().enumerate() {
                if !cell.fits(kinds[j]) {
                    return Err(Error::Schema(format!(
                        "cell ({i},{j}) {cell:?} does not match column kind {}",
                        kinds[j]
                    )));
                }
                cells.push(cell);
            }
        }
        Ok(Table {
            names,
            kinds,
            cells,
            n,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.kinds.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn kinds(&self) -> &[ColumnKind] {
        &self.kinds
    }

    pub fn kind(&self, j: usize) -> ColumnKind {
        self.kinds[j]
    }

    pub fn cell(&self, i: usize, j: usize) -> &Cell {
        &self.cells[i * self.d() + j]
    }

    pub fn row(&self, i: usize) -> &[Cell] {
        let d = self.d();
        &self.cells[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[Cell]> {
        self.cells.chunks(self.d())
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = &Cell> {
        self.cells.iter().skip(j).step_by(self.d())
    }

    /// Mask with 1 for every present cell and 0 for every missing one.
    pub fn observed_mask(&self) -> MaskMatrix {
        let bits = self.cells.iter().map(|c| !c.is_missing()).collect();
        MaskMatrix::from_bits(self.n, self.d(), bits).expect("shape matches by construction")
    }

    /// Copy of the table with every cell whose mask entry is 0 set to missing.
    pub fn apply_mask(&self, mask: &MaskMatrix) -> Result<Table> {
        self.check_mask(mask)?;
        let d = self.d();
        let cells = self
            .cells
            .iter()
            .enumerate()
            .map(|(k, c)| {
                if mask.is_observed(k / d, k % d) {
                    c.clone()
                } else {
                    Cell::Missing
                }
            })
            .collect();
        Ok(Table {
            names: self.names.clone(),
            kinds: self.kinds.clone(),
            cells,
            n: self.n,
        })
    }

    pub fn check_mask(&self, mask: &MaskMatrix) -> Result<()> {
        if mask.n() != self.n || mask.d() != self.d() {
            return Err(Error::Shape(format!(
                "mask is {}x{}, table is {}x{}",
                mask.n(),
                mask.d(),
                self.n,
                self.d()
            )));
        }
        Ok(())
    }

    /// Rows `start..end` as a new table.
    pub fn slice_rows(&self, start: usize, end: usize) -> Table {
        assert!(start < end && end <= self.n, "row slice {start}..{end} out of range");
        let d = self.d();
        Table {
            names: self.names.clone(),
            kinds: self.kinds.clone(),
            cells: self.cells[start * d..end * d].to_vec(),
            n: end - start,
        }
    }

    /// Rebuilds the table with every cell passed through `f(i, j, cell)`.
    pub fn map_cells<F>(&self, mut f: F) -> Result<Table>
    where
        F: FnMut(usize, usize, &Cell) -> Result<Cell>,
    {
        let d = self.d();
        let rows = (0..self.n)
            .map(|i| (0..d).map(|j| f(i, j, self.cell(i, j))).collect())
            .collect::<Result<Vec<Vec<Cell>>>>()?;
        Table::new(self.names.clone(), self.kinds.clone(), rows)
    }

    pub fn same_schema(&self, other: &Table) -> bool {
        self.names == other.names && self.kinds == other.kinds
    }
}

/// Column kinds inferred from raw string columns.
pub fn infer_kind(values: &[&str]) -> ColumnKind {
    let observed: Vec<&str> = values.iter().copied().filter(|v| !v.is_empty()).collect();
    if observed.is_empty() || observed.iter().all(|v| parse_number(v).is_some()) {
        return ColumnKind::Numerical;
    }
    let distinct: HashSet<&str> = observed.iter().copied().collect();
    let ratio = distinct.len() as f64 / observed.len() as f64;
    let multiword = observed.iter().any(|v| v.split_whitespace().count() > 1);
    if ratio <= CATEGORICAL_RATIO && !multiword {
        ColumnKind::Categorical
    } else {
        ColumnKind::Text
    }
}

fn parse_number(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Loads a CSV with a mandatory header row. Empty fields are missing cells.
pub fn load_csv(path: impl AsRef<Path>, schema: Option<&[ColumnKind]>) -> Result<Table> {
    let bytes = fs::read(path.as_ref())?;
    parse_csv(&bytes, schema)
}

pub fn parse_csv(bytes: &[u8], schema: Option<&[ColumnKind]>) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(bytes);
    let names: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if names.is_empty() || (names.len() == 1 && names[0].is_empty()) {
        return Err(Error::Structure("missing header row".into()));
    }
    let d = names.len();
    let mut raw: Vec<Vec<String>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != d {
            return Err(Error::Structure(format!(
                "data row {i} has {} fields, header has {d}",
                record.len()
            )));
        }
        raw.push(record.iter().map(str::to_string).collect());
    }
    if raw.is_empty() {
        return Err(Error::EmptyInput);
    }
    let kinds: Vec<ColumnKind> = match schema {
        Some(kinds) if kinds.len() != d => {
            return Err(Error::Schema(format!(
                "schema lists {} columns, header has {d}",
                kinds.len()
            )))
        }
        Some(kinds) => kinds.to_vec(),
        None => (0..d)
            .map(|j| {
                let col: Vec<&str> = raw.iter().map(|r| r[j].as_str()).collect();
                infer_kind(&col)
            })
            .collect(),
    };
    let rows = raw
        .into_iter()
        .enumerate()
        .map(|(i, fields)| {
            fields
                .into_iter()
                .enumerate()
                .map(|(j, field)| to_cell(field, kinds[j], i, &names[j]))
                .collect::<Result<Vec<Cell>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Table::new(names, kinds, rows)
}

fn to_cell(field: String, kind: ColumnKind, row: usize, name: &str) -> Result<Cell> {
    if field.is_empty() {
        return Ok(Cell::Missing);
    }
    Ok(match kind {
        ColumnKind::Numerical => Cell::Number(parse_number(&field).ok_or_else(|| {
            Error::Schema(format!("row {row}, column `{name}`: `{field}` is not a number"))
        })?),
        ColumnKind::Categorical => Cell::Category(field),
        ColumnKind::Text => Cell::Text(field),
    })
}

pub fn to_csv_bytes(t: &Table) -> Result<Vec<u8>> {
    let mut writer = csv::WriterBuilder::new().from_writer(Vec::new());
    writer.write_record(t.names())?;
    for row in t.rows() {
        writer.write_record(row.iter().map(Cell::render))?;
    }
    writer
        .into_inner()
        .map_err(|e| Error::Io(e.into_error()))
}

/// Writes the table as CSV; the file is replaced atomically.
pub fn write_csv(t: &Table, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &to_csv_bytes(t)?)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Column schema sidecar: one `name:kind` line per column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    pub columns: Vec<(String, ColumnKind)>,
}

impl Schema {
    pub fn of(t: &Table) -> Schema {
        Schema {
            columns: t.names().iter().cloned().zip(t.kinds().iter().copied()).collect(),
        }
    }

    pub fn kinds(&self) -> Vec<ColumnKind> {
        self.columns.iter().map(|(_, k)| *k).collect()
    }

    pub fn parse(text: &str) -> Result<Schema> {
        let columns = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|line| {
                let (name, kind) = line
                    .rsplit_once(':')
                    .ok_or_else(|| Error::Schema(format!("schema line `{line}` lacks `:`")))?;
                Ok((name.to_string(), kind.parse()?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Schema { columns })
    }

    pub fn render(&self) -> String {
        self.columns
            .iter()
            .map(|(name, kind)| format!("{name}:{kind}\n"))
            .collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Schema> {
        Schema::parse(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.render().as_bytes())
    }
}
