//! CSV and JSON emission, CSV reading, and the `%.17g` float format.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde_json::{Map, Value};

use crate::CliError;

/// `printf("%.17g", v)`.
pub fn fmt_g17(v: f64) -> String {
    const P: i32 = 17;
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{:.*e}", (P - 1) as usize, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..P).contains(&exp) {
        let fixed = format!("{:.*}", (P - 1 - exp) as usize, v);
        strip_zeros(&fixed).to_string()
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", strip_zeros(mantissa), exp.abs())
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Where a subcommand writes its primary output.
pub enum Sink {
    Stdout,
    File { path: PathBuf, file: File },
}

impl Sink {
    /// Creates the file up front so an unwritable path fails before any
    /// computation.
    pub fn open(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Sink::Stdout),
            Some(p) => {
                let file = File::create(p).map_err(|e| CliError::io(p, e))?;
                Ok(Sink::File { path: p.to_path_buf(), file })
            }
        }
    }

    pub fn write(&mut self, stdout: &mut dyn Write, bytes: &[u8]) -> Result<(), CliError> {
        match self {
            Sink::Stdout => stdout.write_all(bytes).map_err(|e| CliError::io(Path::new("<stdout>"), e)),
            Sink::File { path, file } => file.write_all(bytes).map_err(|e| CliError::io(path, e)),
        }
    }
}

/// A rectangular table of numbers with named columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Table { header: header.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    /// Columns named `prefix1 .. prefixN`.
    pub fn from_matrix(m: &Array2<f64>, prefix: &str) -> Self {
        let mut t = Table::new((1..=m.ncols()).map(|j| format!("{prefix}{j}")));
        t.rows = m.rows().into_iter().map(|r| r.to_vec()).collect();
        t
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_matrix(&self) -> Array2<f64> {
        let cols = self.header.len();
        Array2::from_shape_fn((self.rows.len(), cols), |(i, j)| self.rows[i][j])
    }

    /// Header row, `%.17g` fields, LF line endings.
    pub fn to_csv(&self) -> Result<Vec<u8>, CliError> {
        if let Some(v) = self.rows.iter().flatten().find(|v| !v.is_finite()) {
            return Err(CliError::Numerical(format!("refusing to write non-finite value {v} to CSV")));
        }
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        let csv_err = |e: csv::Error| CliError::Numerical(format!("CSV encoding failed: {e}"));
        w.write_record(&self.header).map_err(csv_err)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| fmt_g17(*v))).map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| CliError::Numerical(format!("CSV encoding failed: {e}")))
    }

    pub fn read_csv(path: &Path) -> Result<Self, CliError> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let header: Vec<String> = r
            .headers()
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut table = Table { header, rows: Vec::new() };
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            let row = rec
                .iter()
                .map(|f| {
                    f.parse::<f64>().map_err(|_| {
                        CliError::Input(format!("{}: row {}: `{f}` is not a number", path.display(), i + 1))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            table.rows.push(row);
        }
        Ok(table)
    }
}

/// Reads an `n x m` numeric CSV (header row required) into a matrix.
pub fn read_matrix(path: &Path) -> Result<Array2<f64>, CliError> {
    let t = Table::read_csv(path)?;
    if t.rows.is_empty() {
        return Err(CliError::Input(format!("{}: no data rows", path.display())));
    }
    Ok(t.to_matrix())
}

/// Pretty-printed JSON object with `schema_version: 1` first, plus a newline.
pub fn to_json(fields: Map<String, Value>) -> Vec<u8> {
    let mut obj = Map::new();
    obj.insert("schema_version".into(), Value::from(1));
    obj.extend(fields);
    let mut out = serde_json::to_vec_pretty(&Value::Object(obj)).expect("JSON values serialize");
    out.push(b'\n');
    out
}

pub fn write_stderr(stderr: &mut dyn Write, msg: &str) {
    let _ = writeln!(stderr, "{msg}");
}
