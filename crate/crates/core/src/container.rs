//! Line-delimited numeric table used for memory snapshots and dataset caches.
//!
//! ```text
//! lrctl-table 1
//! dt 0.001
//! <more `key value` metadata lines>
//! rows 3 cols 1000
//! <3 lines of 1000 whitespace-separated reals>
//! ```
//!
//! Values are written in shortest round-trip form, so a load after a save is
//! bit-exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &str = "lrctl-table";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NumericTable {
    pub metadata: BTreeMap<String, String>,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl NumericTable {
    pub fn new(cols: usize) -> Self {
        Self {
            metadata: BTreeMap::new(),
            cols,
            data: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        if self.cols == 0 {
            0
        } else {
            self.data.len() / self.cols
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.cols {
            return Err(Error::Contract(format!(
                "row has {} values, table has {} columns",
                row.len(),
                self.cols
            )));
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.metadata.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format {
                offset: 0,
                message: format!("missing metadata key `{key}`"),
            })
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        let raw = self.get(key)?;
        raw.parse().map_err(|_| Error::Format {
            offset: 0,
            message: format!("metadata `{key}` is not a number: {raw}"),
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{MAGIC} {VERSION}").unwrap();
        for (k, v) in &self.metadata {
            writeln!(out, "{k} {v}").unwrap();
        }
        writeln!(out, "rows {} cols {}", self.rows(), self.cols).unwrap();
        for r in 0..self.rows() {
            let line: Vec<String> = self.row(r).iter().map(|v| format!("{v:e}")).collect();
            writeln!(out, "{}", line.join(" ")).unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut offset = 0u64;
        let mut lines = text.split_inclusive('\n').map(|l| {
            let start = offset;
            offset += l.len() as u64;
            (start, l.trim_end_matches(['\n', '\r']))
        });
        let fail = |at: u64, message: String| Error::Format { offset: at, message };

        let (at, header) = lines.next().ok_or_else(|| fail(0, "empty file".into()))?;
        let mut head = header.split_whitespace();
        if head.next() != Some(MAGIC) {
            return Err(fail(at, format!("expected `{MAGIC}` header")));
        }
        let version: u32 = head
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| fail(at, "missing format version".into()))?;
        if version != VERSION {
            return Err(fail(at, format!("unsupported format version {version}")));
        }

        let mut metadata = BTreeMap::new();
        let (rows, cols) = loop {
            let (at, line) = lines
                .next()
                .ok_or_else(|| fail(text.len() as u64, "missing `rows .. cols ..` line".into()))?;
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                ["rows", r, "cols", c] => {
                    let r: usize = r.parse().map_err(|_| fail(at, format!("bad row count {r}")))?;
                    let c: usize = c.parse().map_err(|_| fail(at, format!("bad column count {c}")))?;
                    break (r, c);
                }
                [key, value] => {
                    metadata.insert(key.to_string(), value.to_string());
                }
                _ => return Err(fail(at, format!("malformed metadata line `{line}`"))),
            }
        };

        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let (at, line) = lines
                .next()
                .ok_or_else(|| fail(text.len() as u64, format!("truncated: expected {rows} rows, found {r}")))?;
            let before = data.len();
            for tok in line.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| fail(at, format!("row {r}: bad value `{tok}`")))?;
                data.push(v);
            }
            if data.len() - before != cols {
                return Err(fail(
                    at,
                    format!("row {r} has {} values, expected {cols}", data.len() - before),
                ));
            }
        }
        if let Some((at, extra)) = lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(fail(at, format!("unexpected trailing content `{extra}`")));
        }
        Ok(Self {
            metadata,
            cols,
            data,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}
