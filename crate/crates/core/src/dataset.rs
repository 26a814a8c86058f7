//! Tabular ingestion: schema, delimited-text loading, categorical encoding,
//! zero imputation and stratified K-fold partitioning.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Categorical,
    Numerical,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Donor,
    Recipient,
    #[default]
    Unspecified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
    #[serde(default)]
    pub role: Role,
}

impl Column {
    pub fn new(name: impl Into<String>, kind: ColumnKind, role: Role) -> Self {
        Column {
            name: name.into(),
            kind,
            role,
        }
    }
}

/// Ordered feature columns. Names are unique and there is at least one column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Column>", into = "Vec<Column>")]
pub struct FeatureSchema {
    columns: Vec<Column>,
}

impl FeatureSchema {
    pub fn new(columns: Vec<Column>) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::Schema(
                "at least one feature column is required".into(),
            ));
        }
        let mut seen = HashSet::new();
        for c in &columns {
            if c.name.is_empty() {
                return Err(Error::Schema("column names must be non-empty".into()));
            }
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Schema(format!("duplicate column `{}`", c.name)));
            }
        }
        Ok(FeatureSchema { columns })
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    /// Column indices carrying the given role, ascending.
    pub fn indices_with_role(&self, role: Role) -> Vec<usize> {
        self.columns
            .iter()
            .enumerate()
            .filter(|(_, c)| c.role == role)
            .map(|(i, _)| i)
            .collect()
    }
}

impl TryFrom<Vec<Column>> for FeatureSchema {
    type Error = Error;

    fn try_from(columns: Vec<Column>) -> Result<Self> {
        FeatureSchema::new(columns)
    }
}

impl From<FeatureSchema> for Vec<Column> {
    fn from(schema: FeatureSchema) -> Self {
        schema.columns
    }
}

fn default_id_column() -> String {
    "id".to_string()
}

fn default_delimiter() -> char {
    ','
}

/// Everything needed to read a data file: the identifier column, the binary
/// label columns, the delimiter, and the feature schema.
///
/// On disk this is a TOML document:
///
/// ```toml
/// id_column = "id"
/// labels = ["rejection", "infection"]
/// delimiter = ","
///
/// [[columns]]
/// name = "age"
/// kind = "numerical"
/// role = "recipient"
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TableSchemaFile", into = "TableSchemaFile")]
pub struct TableSchema {
    pub id_column: String,
    pub labels: Vec<String>,
    pub delimiter: char,
    pub features: FeatureSchema,
}

#[derive(Serialize, Deserialize)]
struct TableSchemaFile {
    #[serde(default = "default_id_column")]
    id_column: String,
    #[serde(default)]
    labels: Vec<String>,
    #[serde(default = "default_delimiter")]
    delimiter: char,
    columns: Vec<Column>,
}

impl TryFrom<TableSchemaFile> for TableSchema {
    type Error = Error;

    fn try_from(f: TableSchemaFile) -> Result<Self> {
        TableSchema::new(
            f.id_column,
            f.labels,
            f.delimiter,
            FeatureSchema::new(f.columns)?,
        )
    }
}

impl From<TableSchema> for TableSchemaFile {
    fn from(s: TableSchema) -> Self {
        TableSchemaFile {
            id_column: s.id_column,
            labels: s.labels,
            delimiter: s.delimiter,
            columns: s.features.columns,
        }
    }
}

impl TableSchema {
    pub fn new(
        id_column: String,
        labels: Vec<String>,
        delimiter: char,
        features: FeatureSchema,
    ) -> Result<Self> {
        if !delimiter.is_ascii() || delimiter == '"' || delimiter == '\n' {
            return Err(Error::Schema(format!(
                "unsupported delimiter {delimiter:?}"
            )));
        }
        let mut names: HashSet<&str> = features.columns.iter().map(|c| c.name.as_str()).collect();
        if !names.insert(id_column.as_str()) {
            return Err(Error::Schema(format!(
                "id column `{id_column}` clashes with a feature"
            )));
        }
        for l in &labels {
            if !names.insert(l.as_str()) {
                return Err(Error::Schema(format!(
                    "label `{l}` is duplicated or clashes with a feature"
                )));
            }
        }
        Ok(TableSchema {
            id_column,
            labels,
            delimiter,
            features,
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("schema serializes to TOML")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Cell {
    Missing,
    Number(f64),
    Text(String),
}

impl Cell {
    pub fn is_missing(&self) -> bool {
        matches!(self, Cell::Missing)
    }

    fn render(&self) -> String {
        match self {
            Cell::Missing => String::new(),
            Cell::Number(v) => format!("{v}"),
            Cell::Text(s) => s.clone(),
        }
    }
}

/// Rows as read from disk: feature cells in schema order, plus ids and
/// (when every label column is present in the header) binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub ids: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
    pub labels: Option<Vec<Vec<u8>>>,
}

impl RawTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

fn parse_cell(raw: &str, kind: ColumnKind, line: u64, column: &str) -> Result<Cell> {
    let s = raw.trim();
    if s.is_empty() {
        return Ok(Cell::Missing);
    }
    match kind {
        ColumnKind::Categorical => Ok(Cell::Text(s.to_string())),
        ColumnKind::Numerical => s
            .parse::<f64>()
            .map(Cell::Number)
            .map_err(|_| Error::BadCell {
                line,
                column: column.to_string(),
                message: format!("`{s}` is not a number"),
            }),
    }
}

/// Read a delimited-text file whose header names every schema column.
///
/// Empty cells are marked [`Cell::Missing`]. The id column is optional
/// (row numbers are used when absent). Labels are read only if all label
/// columns are present; a partial set is a header mismatch.
pub fn load_table(path: impl AsRef<Path>, schema: &TableSchema) -> Result<RawTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter as u8)
        .flexible(true)
        .has_headers(true)
        .from_reader(BufReader::new(file));

    let header: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let position: HashMap<&str, usize> = header
        .iter()
        .enumerate()
        .map(|(i, h)| (h.as_str(), i))
        .collect();
    let lookup = |name: &str| {
        position
            .get(name)
            .copied()
            .ok_or_else(|| Error::HeaderMismatch {
                path: path.to_path_buf(),
                column: name.to_string(),
            })
    };

    let feature_pos = schema
        .features
        .columns()
        .iter()
        .map(|c| lookup(&c.name))
        .collect::<Result<Vec<_>>>()?;
    let id_pos = position.get(schema.id_column.as_str()).copied();
    let present: Vec<bool> = schema
        .labels
        .iter()
        .map(|l| position.contains_key(l.as_str()))
        .collect();
    let label_pos = if !schema.labels.is_empty() && present.iter().all(|&p| p) {
        Some(
            schema
                .labels
                .iter()
                .map(|l| lookup(l))
                .collect::<Result<Vec<_>>>()?,
        )
    } else if present.iter().any(|&p| p) {
        // some but not all label columns present
        let missing = schema
            .labels
            .iter()
            .zip(&present)
            .find(|(_, &p)| !p)
            .map(|(l, _)| l);
        return Err(Error::HeaderMismatch {
            path: path.to_path_buf(),
            column: missing.cloned().unwrap_or_default(),
        });
    } else {
        None
    };

    let mut ids = Vec::new();
    let mut rows = Vec::new();
    let mut labels = label_pos.as_ref().map(|_| Vec::new());
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(i as u64 + 2);
        if record.len() != header.len() {
            return Err(Error::RowArity {
                line,
                expected: header.len(),
                found: record.len(),
            });
        }
        let row = schema
            .features
            .columns()
            .iter()
            .zip(&feature_pos)
            .map(|(c, &p)| parse_cell(&record[p], c.kind, line, &c.name))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
        ids.push(match id_pos {
            Some(p) => record[p].trim().to_string(),
            None => i.to_string(),
        });
        if let (Some(pos), Some(out)) = (&label_pos, labels.as_mut()) {
            let mut ys = Vec::with_capacity(pos.len());
            for (name, &p) in schema.labels.iter().zip(pos) {
                ys.push(match record[p].trim() {
                    "0" => 0,
                    "1" => 1,
                    other => {
                        return Err(Error::BadCell {
                            line,
                            column: name.clone(),
                            message: format!("label must be 0 or 1, found `{other}`"),
                        })
                    }
                });
            }
            out.push(ys);
        }
    }
    Ok(RawTable { ids, rows, labels })
}

/// Write a table in the format read by [`load_table`]: id, features in
/// schema order, then labels when present.
pub fn write_table(path: impl AsRef<Path>, schema: &TableSchema, table: &RawTable) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = csv::WriterBuilder::new()
        .delimiter(schema.delimiter as u8)
        .from_writer(BufWriter::new(file));

    let mut header = vec![schema.id_column.clone()];
    header.extend(schema.features.columns().iter().map(|c| c.name.clone()));
    if table.labels.is_some() {
        header.extend(schema.labels.iter().cloned());
    }
    writer.write_record(&header)?;
    for (i, row) in table.rows.iter().enumerate() {
        let mut rec = Vec::with_capacity(header.len());
        rec.push(table.ids[i].clone());
        rec.extend(row.iter().map(Cell::render));
        if let Some(labels) = &table.labels {
            rec.extend(labels[i].iter().map(|y| y.to_string()));
        }
        writer.write_record(&rec)?;
    }
    let mut inner = writer
        .into_inner()
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    inner.flush().map_err(|e| Error::io(path, e))
}

/// First-appearance category list for one column; code `i + 1` maps to
/// `categories[i]`, code 0 is missing or unknown.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryCodes {
    pub categories: Vec<String>,
}

impl CategoryCodes {
    pub fn code(&self, value: &str) -> f64 {
        self.categories
            .iter()
            .position(|c| c == value)
            .map_or(0.0, |i| (i + 1) as f64)
    }

    pub fn decode(&self, code: usize) -> Option<&str> {
        code.checked_sub(1)
            .and_then(|i| self.categories.get(i))
            .map(String::as_str)
    }
}

/// Fitted categorical code maps, retained so prediction-time rows encode
/// exactly as training rows did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub schema: FeatureSchema,
    /// One entry per schema column; `None` for numerical columns.
    pub codes: Vec<Option<CategoryCodes>>,
}

impl Encoder {
    pub fn fit(schema: &FeatureSchema, rows: &[Vec<Cell>]) -> Self {
        let mut codes: Vec<Option<CategoryCodes>> = schema
            .columns()
            .iter()
            .map(|c| (c.kind == ColumnKind::Categorical).then(CategoryCodes::default))
            .collect();
        let mut index: Vec<HashMap<String, usize>> = vec![HashMap::new(); schema.len()];
        for row in rows {
            for (j, cell) in row.iter().enumerate() {
                if let (Some(map), Cell::Text(s)) = (codes[j].as_mut(), cell) {
                    if !index[j].contains_key(s) {
                        index[j].insert(s.clone(), map.categories.len());
                        map.categories.push(s.clone());
                    }
                }
            }
        }
        Encoder {
            schema: schema.clone(),
            codes,
        }
    }

    /// Encode one row. Missing numerical cells become NaN (imputed later);
    /// missing or unseen categories become code 0.
    pub fn transform_row(&self, row: &[Cell]) -> Result<Vec<f64>> {
        if row.len() != self.schema.len() {
            return Err(Error::Shape {
                expected: self.schema.len(),
                got: row.len(),
            });
        }
        Ok(row
            .iter()
            .zip(&self.codes)
            .map(|(cell, codes)| match (cell, codes) {
                (Cell::Missing, Some(_)) => 0.0,
                (Cell::Missing, None) => f64::NAN,
                (Cell::Text(s), Some(map)) => map.code(s),
                (Cell::Number(v), Some(map)) => map.code(&format!("{v}")),
                (Cell::Number(v), None) => *v,
                (Cell::Text(s), None) => s.trim().parse().unwrap_or(f64::NAN),
            })
            .collect())
    }

    pub fn transform(&self, rows: &[Vec<Cell>]) -> Result<Array2<f64>> {
        let mut x = Array2::zeros((rows.len(), self.schema.len()));
        for (i, row) in rows.iter().enumerate() {
            let enc = self.transform_row(row)?;
            x.row_mut(i).iter_mut().zip(enc).for_each(|(d, v)| *d = v);
        }
        Ok(x)
    }

    /// Reverse a categorical code for column `column`.
    pub fn decode(&self, column: usize, code: usize) -> Option<&str> {
        self.codes.get(column)?.as_ref()?.decode(code)
    }
}

/// Encoded feature matrix with binary multi-label targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub x: Array2<f64>,
    pub y: Array2<u8>,
    pub schema: FeatureSchema,
    pub ids: Vec<String>,
    pub label_names: Vec<String>,
}

impl Cohort {
    pub fn new(
        x: Array2<f64>,
        y: Array2<u8>,
        schema: FeatureSchema,
        ids: Vec<String>,
        label_names: Vec<String>,
    ) -> Result<Self> {
        if x.nrows() != y.nrows() || x.nrows() != ids.len() {
            return Err(Error::Shape {
                expected: x.nrows(),
                got: if x.nrows() != y.nrows() {
                    y.nrows()
                } else {
                    ids.len()
                },
            });
        }
        if x.ncols() != schema.len() {
            return Err(Error::Shape {
                expected: schema.len(),
                got: x.ncols(),
            });
        }
        if y.ncols() != label_names.len() {
            return Err(Error::Shape {
                expected: label_names.len(),
                got: y.ncols(),
            });
        }
        if y.iter().any(|&v| v > 1) {
            return Err(Error::Schema("labels must be 0 or 1".into()));
        }
        Ok(Cohort {
            x,
            y,
            schema,
            ids,
            label_names,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_tasks(&self) -> usize {
        self.y.ncols()
    }

    pub fn has_missing(&self) -> bool {
        self.x.iter().any(|v| v.is_nan())
    }

    pub fn labels(&self, task: usize) -> Vec<u8> {
        self.y.column(task).to_vec()
    }

    pub fn select_x(&self, rows: &[usize]) -> Array2<f64> {
        self.x.select(Axis(0), rows)
    }

    pub fn select_y(&self, rows: &[usize]) -> Array2<u8> {
        self.y.select(Axis(0), rows)
    }
}

/// Fit code maps on `raw` and encode it. Missing numerical cells are NaN
/// until [`impute_zero`] runs.
pub fn encode(raw: &RawTable, schema: &TableSchema) -> Result<(Cohort, Encoder)> {
    let encoder = Encoder::fit(&schema.features, &raw.rows);
    let x = encoder.transform(&raw.rows)?;
    let (y, names) = match &raw.labels {
        Some(labels) => {
            let m = schema.labels.len();
            let mut y = Array2::zeros((raw.len(), m));
            for (i, row) in labels.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    y[[i, j]] = v;
                }
            }
            (y, schema.labels.clone())
        }
        None => (Array2::zeros((raw.len(), 0)), Vec::new()),
    };
    let cohort = Cohort::new(x, y, schema.features.clone(), raw.ids.clone(), names)?;
    Ok((cohort, encoder))
}

pub fn impute_zero_matrix(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| if v.is_nan() { 0.0 } else { v });
}

/// Replace every missing entry with 0.0.
pub fn impute_zero(mut cohort: Cohort) -> Cohort {
    impute_zero_matrix(&mut cohort.x);
    cohort
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
}

/// Seeded shuffle followed by stratification on the joint label pattern.
///
/// Rows are shuffled, grouped by their full label vector (groups in
/// ascending pattern order, shuffled order inside each group), laid out
/// back to back, and dealt round-robin. Each pattern's per-fold count then
/// differs by at most one, as do the fold sizes.
pub fn kfold_split(y: &Array2<u8>, k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    let n = y.nrows();
    if k < 2 {
        return Err(Error::Config(format!("K must be at least 2, got {k}")));
    }
    if k > n {
        return Err(Error::Config(format!(
            "K = {k} exceeds the number of rows ({n})"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut groups: BTreeMap<Vec<u8>, Vec<usize>> = BTreeMap::new();
    for &i in &order {
        groups.entry(y.row(i).to_vec()).or_default().push(i);
    }
    let mut fold_of = vec![0usize; n];
    for (pos, &row) in groups.values().flatten().enumerate() {
        fold_of[row] = pos % k;
    }

    Ok((0..k)
        .map(|f| {
            let (test_rows, train_rows): (Vec<usize>, Vec<usize>) =
                (0..n).partition(|&i| fold_of[i] == f);
            FoldSplit {
                fold_index: f,
                train_rows,
                test_rows,
            }
        })
        .collect())
}
