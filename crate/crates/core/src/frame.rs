//! Tabular designs: one row per experimental unit, every column a factor.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Role a factor plays in a design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactorKind {
    /// Attached to the unit; never moves during the search.
    Plot,
    /// Carried by the permuted rows.
    Treatment,
    /// Levels define the classes inside which interchanges are legal.
    Swap,
    /// Groups units for heterogeneous residual variances.
    Grouping,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Factor {
    pub name: String,
    pub levels: Vec<String>,
    pub kind: FactorKind,
}

/// Column-oriented table of factors. Level order is order of first appearance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DesignFrame {
    names: Vec<String>,
    codes: Vec<Vec<u32>>,
    levels: Vec<Vec<String>>,
    nrows: usize,
}

impl DesignFrame {
    pub fn from_columns(columns: Vec<(String, Vec<String>)>) -> Result<Self> {
        let nrows = columns.first().map(|(_, v)| v.len()).unwrap_or(0);
        let mut frame = DesignFrame {
            names: Vec::with_capacity(columns.len()),
            codes: Vec::with_capacity(columns.len()),
            levels: Vec::with_capacity(columns.len()),
            nrows,
        };
        for (name, values) in columns {
            frame.push_column(name, values)?;
        }
        Ok(frame)
    }

    pub fn read_csv<R: Read>(reader: R, context: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(reader);
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::csv(context, e))?
            .iter()
            .map(str::to_owned)
            .collect();
        let mut columns: Vec<Vec<String>> = vec![Vec::new(); header.len()];
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::csv(context, e))?;
            for (c, v) in rec.iter().enumerate() {
                columns[c].push(v.to_owned());
            }
        }
        Self::from_columns(header.into_iter().zip(columns).collect())
    }

    pub fn from_csv_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(file, &path.display().to_string())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(&self.names)
            .map_err(|e| Error::csv("writing design", e))?;
        for r in 0..self.nrows {
            wtr.write_record((0..self.ncols()).map(|c| self.value(c, r)))
                .map_err(|e| Error::csv("writing design", e))?;
        }
        wtr.flush()
            .map_err(|e| Error::csv("writing design", csv::Error::from(e)))?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn require(&self, name: &str) -> Result<usize> {
        self.column_index(name)
            .ok_or_else(|| Error::UnknownFactor(name.to_owned()))
    }

    pub fn levels(&self, col: usize) -> &[String] {
        &self.levels[col]
    }

    pub fn codes(&self, col: usize) -> &[u32] {
        &self.codes[col]
    }

    pub fn code(&self, col: usize, row: usize) -> usize {
        self.codes[col][row] as usize
    }

    pub fn value(&self, col: usize, row: usize) -> &str {
        &self.levels[col][self.codes[col][row] as usize]
    }

    pub fn column_values(&self, col: usize) -> Vec<String> {
        (0..self.nrows).map(|r| self.value(col, r).to_owned()).collect()
    }

    pub fn factor(&self, name: &str, kind: FactorKind) -> Result<Factor> {
        let col = self.require(name)?;
        Ok(Factor {
            name: name.to_owned(),
            levels: self.levels[col].clone(),
            kind,
        })
    }

    /// Adds a column, replacing any existing column of the same name.
    pub fn push_column(&mut self, name: String, values: Vec<String>) -> Result<()> {
        if self.names.is_empty() && self.codes.is_empty() {
            self.nrows = values.len();
        }
        if values.len() != self.nrows {
            return Err(Error::Dimension(format!(
                "column `{name}` has {} rows, frame has {}",
                values.len(),
                self.nrows
            )));
        }
        let mut index: HashMap<String, u32> = HashMap::new();
        let mut levels = Vec::new();
        let codes = values
            .into_iter()
            .map(|v| {
                *index.entry(v.clone()).or_insert_with(|| {
                    levels.push(v);
                    (levels.len() - 1) as u32
                })
            })
            .collect();
        match self.column_index(&name) {
            Some(c) => {
                self.codes[c] = codes;
                self.levels[c] = levels;
            }
            None => {
                self.names.push(name);
                self.codes.push(codes);
                self.levels.push(levels);
            }
        }
        Ok(())
    }

    /// Returns a copy whose listed columns are re-read through `perm`: row `u`
    /// of the result carries the values of row `perm[u]` in those columns.
    pub fn permute_columns(&self, cols: &[usize], perm: &[usize]) -> DesignFrame {
        let mut out = self.clone();
        for &c in cols {
            out.codes[c] = perm.iter().map(|&t| self.codes[c][t]).collect();
        }
        out
    }

    pub fn select_rows(&self, rows: &[usize]) -> DesignFrame {
        let columns = (0..self.ncols())
            .map(|c| {
                (
                    self.names[c].clone(),
                    rows.iter().map(|&r| self.value(c, r).to_owned()).collect(),
                )
            })
            .collect();
        // Columns are rebuilt from valid values, so this cannot fail.
        DesignFrame::from_columns(columns).expect("row selection preserves shape")
    }

    /// Frame formed by stacking `self` on top of `other` (same header).
    pub fn vstack(&self, other: &DesignFrame) -> Result<DesignFrame> {
        if self.names != other.names {
            return Err(Error::Dimension("frames have different headers".into()));
        }
        let columns = (0..self.ncols())
            .map(|c| {
                let mut v = self.column_values(c);
                v.extend(other.column_values(c));
                (self.names[c].clone(), v)
            })
            .collect();
        DesignFrame::from_columns(columns)
    }
}
