//! Role-tagged observational datasets and their CSV representation.
//!
//! CSV files carry a header of `role:name` cells, e.g. `outcome:y`,
//! `treatment:a0`, ..., `backdoor:x1`. Columns sharing a role form one
//! (possibly vector-valued) variable, in header order. Values are written
//! in shortest round-trip decimal form, so a write/read cycle is exact.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// The causal role a variable plays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Outcome,
    Treatment,
    #[serde(rename = "backdoor")]
    BackDoor,
    #[serde(rename = "frontdoor")]
    FrontDoor,
    #[serde(rename = "confounder")]
    ObservedConfounder,
}

impl Role {
    pub const ALL: [Role; 5] = [
        Role::Outcome,
        Role::Treatment,
        Role::BackDoor,
        Role::FrontDoor,
        Role::ObservedConfounder,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Role::Outcome => "outcome",
            Role::Treatment => "treatment",
            Role::BackDoor => "backdoor",
            Role::FrontDoor => "frontdoor",
            Role::ObservedConfounder => "confounder",
        }
    }

    pub(crate) fn index(self) -> usize {
        match self {
            Role::Outcome => 0,
            Role::Treatment => 1,
            Role::BackDoor => 2,
            Role::FrontDoor => 3,
            Role::ObservedConfounder => 4,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Role {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Role::ALL
            .into_iter()
            .find(|r| r.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown role `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoleBlock {
    pub names: Vec<String>,
    pub values: Matrix,
}

/// `n` observations; one block of columns per role.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnarDataset {
    n: usize,
    blocks: BTreeMap<Role, RoleBlock>,
    pub provenance: Option<String>,
}

impl ColumnarDataset {
    pub fn new(n: usize) -> Self {
        ColumnarDataset {
            n,
            blocks: BTreeMap::new(),
            provenance: None,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Adds the block for `role`. Column names default to `<role><k>`.
    pub fn insert(&mut self, role: Role, names: Option<Vec<String>>, values: Matrix) -> Result<()> {
        if values.rows() != self.n {
            return Err(Error::DimensionMismatch {
                context: "dataset column length",
                expected: self.n,
                got: values.rows(),
            });
        }
        if self.blocks.contains_key(&role) {
            return Err(Error::Config(format!("duplicate role `{role}` in dataset")));
        }
        if values.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset column"));
        }
        let names = match names {
            Some(names) => {
                if names.len() != values.cols() {
                    return Err(Error::DimensionMismatch {
                        context: "dataset column names",
                        expected: values.cols(),
                        got: names.len(),
                    });
                }
                names
            }
            None if role == Role::Outcome && values.cols() == 1 => vec!["y".to_string()],
            None => {
                let prefix = match role {
                    Role::Outcome => "y",
                    Role::Treatment => "a",
                    Role::BackDoor => "x",
                    Role::FrontDoor => "m",
                    Role::ObservedConfounder => "o",
                };
                (0..values.cols()).map(|k| format!("{prefix}{k}")).collect()
            }
        };
        self.blocks.insert(role, RoleBlock { names, values });
        Ok(())
    }

    pub fn roles(&self) -> impl Iterator<Item = Role> + '_ {
        self.blocks.keys().copied()
    }

    pub fn has(&self, role: Role) -> bool {
        self.blocks.contains_key(&role)
    }

    pub fn block(&self, role: Role) -> Result<&Matrix> {
        self.blocks
            .get(&role)
            .map(|b| &b.values)
            .ok_or(Error::MissingColumn(role))
    }

    pub fn dim(&self, role: Role) -> Result<usize> {
        Ok(self.block(role)?.cols())
    }

    pub fn outcome(&self) -> Result<Vec<f64>> {
        let y = self.block(Role::Outcome)?;
        if y.cols() != 1 {
            return Err(Error::DimensionMismatch {
                context: "outcome column count",
                expected: 1,
                got: y.cols(),
            });
        }
        Ok(y.as_slice().to_vec())
    }

    pub fn require(&self, roles: &[Role]) -> Result<()> {
        for &r in roles {
            self.block(r)?;
        }
        Ok(())
    }

    pub fn select_rows(&self, indices: &[usize]) -> ColumnarDataset {
        ColumnarDataset {
            n: indices.len(),
            blocks: self
                .blocks
                .iter()
                .map(|(&r, b)| {
                    (
                        r,
                        RoleBlock {
                            names: b.names.clone(),
                            values: b.values.select_rows(indices),
                        },
                    )
                })
                .collect(),
            provenance: self.provenance.clone(),
        }
    }

    /// Splits into the first `k` rows and the rest.
    pub fn split_at(&self, k: usize) -> (ColumnarDataset, ColumnarDataset) {
        let k = k.min(self.n);
        let head: Vec<usize> = (0..k).collect();
        let tail: Vec<usize> = (k..self.n).collect();
        (self.select_rows(&head), self.select_rows(&tail))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let header: Vec<String> = self
            .blocks
            .iter()
            .flat_map(|(r, b)| b.names.iter().map(move |name| format!("{r}:{name}")))
            .collect();
        w.write_record(&header).map_err(csv_write_err)?;
        let mut record = Vec::with_capacity(header.len());
        for i in 0..self.n {
            record.clear();
            for b in self.blocks.values() {
                record.extend(b.values.row(i).iter().map(|v| format!("{v}")));
            }
            w.write_record(&record).map_err(csv_write_err)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    /// Reads and validates a role-tagged CSV. Every cell must parse as a
    /// finite number and an `outcome` column must be present.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = r
            .headers()
            .map_err(|e| Error::Csv {
                row: 0,
                column: String::new(),
                message: e.to_string(),
            })?
            .clone();
        let mut layout: Vec<(Role, String)> = Vec::with_capacity(headers.len());
        let mut seen = std::collections::BTreeSet::new();
        for h in headers.iter() {
            let (role, name) = h.split_once(':').ok_or_else(|| Error::Csv {
                row: 0,
                column: h.to_string(),
                message: "header must have the form `role:name`".into(),
            })?;
            let role: Role = role.trim().parse().map_err(|_| Error::Csv {
                row: 0,
                column: h.to_string(),
                message: format!("unknown role `{role}`"),
            })?;
            if !seen.insert(h.to_string()) {
                return Err(Error::Csv {
                    row: 0,
                    column: h.to_string(),
                    message: "duplicate column".into(),
                });
            }
            layout.push((role, name.trim().to_string()));
        }
        let mut columns: Vec<Vec<f64>> = vec![Vec::new(); layout.len()];
        for (row_idx, rec) in r.records().enumerate() {
            let row = row_idx + 1;
            let rec = rec.map_err(|e| Error::Csv {
                row,
                column: String::new(),
                message: e.to_string(),
            })?;
            if rec.len() != layout.len() {
                return Err(Error::Csv {
                    row,
                    column: String::new(),
                    message: format!("expected {} fields, found {}", layout.len(), rec.len()),
                });
            }
            for (k, cell) in rec.iter().enumerate() {
                let column = || format!("{}:{}", layout[k].0, layout[k].1);
                let v: f64 = cell.trim().parse().map_err(|_| Error::Csv {
                    row,
                    column: column(),
                    message: format!("cannot parse `{cell}` as a number"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Csv {
                        row,
                        column: column(),
                        message: format!("non-finite value `{cell}`"),
                    });
                }
                columns[k].push(v);
            }
        }
        let n = columns.first().map_or(0, Vec::len);
        let mut by_role: BTreeMap<Role, Vec<usize>> = BTreeMap::new();
        for (k, (role, _)) in layout.iter().enumerate() {
            by_role.entry(*role).or_default().push(k);
        }
        if !by_role.contains_key(&Role::Outcome) {
            return Err(Error::Csv {
                row: 0,
                column: "outcome".into(),
                message: "missing outcome column".into(),
            });
        }
        if by_role[&Role::Outcome].len() != 1 {
            return Err(Error::Csv {
                row: 0,
                column: "outcome".into(),
                message: "exactly one outcome column is required".into(),
            });
        }
        let mut ds = ColumnarDataset::new(n);
        for (role, ks) in by_role {
            let mut m = Matrix::zeros(n, ks.len());
            for (c, &k) in ks.iter().enumerate() {
                for i in 0..n {
                    m.set(i, c, columns[k][i]);
                }
            }
            let names = ks.iter().map(|&k| layout[k].1.clone()).collect();
            ds.insert(role, Some(names), m)?;
        }
        Ok(ds)
    }

    pub fn read_csv_file(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut ds = Self::read_csv(std::io::BufReader::new(f))?;
        ds.provenance = Some(path.display().to_string());
        Ok(ds)
    }
}

fn csv_write_err(e: csv::Error) -> Error {
    Error::Csv {
        row: 0,
        column: String::new(),
        message: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ColumnarDataset {
        let mut ds = ColumnarDataset::new(3);
        ds.insert(
            Role::Outcome,
            None,
            Matrix::from_row_major(3, 1, vec![1.5, -2.0, 0.1]).unwrap(),
        )
        .unwrap();
        ds.insert(
            Role::Treatment,
            None,
            Matrix::from_row_major(3, 2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(),
        )
        .unwrap();
        ds.insert(
            Role::BackDoor,
            Some(vec!["x1".into()]),
            Matrix::from_row_major(3, 1, vec![1e-300, 7.25, -0.0]).unwrap(),
        )
        .unwrap();
        ds
    }

    #[test]
    fn csv_header_uses_role_tags() {
        let mut buf = Vec::new();
        sample().write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "outcome:y,treatment:a0,treatment:a1,backdoor:x1"
        );
    }

    #[test]
    fn non_finite_cell_names_row_and_column() {
        let text = "outcome:y,backdoor:x1\n1.0,2.0\n3.0,NaN\n";
        match ColumnarDataset::read_csv(text.as_bytes()) {
            Err(Error::Csv { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "backdoor:x1");
            }
            other => panic!("unexpected {other:?}"),
        }
        let text = "outcome:y,backdoor:x1\n1.0,inf\n";
        assert!(matches!(
            ColumnarDataset::read_csv(text.as_bytes()),
            Err(Error::Csv { row: 1, .. })
        ));
    }

    #[test]
    fn malformed_headers_are_rejected() {
        assert!(ColumnarDataset::read_csv("y,x\n1,2\n".as_bytes()).is_err());
        assert!(ColumnarDataset::read_csv("outcome:y,bogus:x\n1,2\n".as_bytes()).is_err());
        assert!(ColumnarDataset::read_csv("backdoor:x\n1\n".as_bytes()).is_err());
        assert!(ColumnarDataset::read_csv("outcome:y,outcome:y\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn missing_role_is_reported() {
        let ds = sample();
        assert!(matches!(
            ds.block(Role::FrontDoor),
            Err(Error::MissingColumn(Role::FrontDoor))
        ));
    }

    proptest! {
        #[test]
        fn csv_roundtrip_is_exact(values in prop::collection::vec(-1e6..1e6f64, 1..40)) {
            let n = values.len();
            let mut ds = ColumnarDataset::new(n);
            ds.insert(Role::Outcome, None, Matrix::from_row_major(n, 1, values.clone()).unwrap()).unwrap();
            let sq: Vec<f64> = values.iter().map(|v| v * v.sin()).collect();
            ds.insert(Role::FrontDoor, None, Matrix::from_row_major(n, 1, sq).unwrap()).unwrap();
            let mut buf = Vec::new();
            ds.write_csv(&mut buf).unwrap();
            let back = ColumnarDataset::read_csv(buf.as_slice()).unwrap();
            prop_assert_eq!(back, ds);
        }
    }
}
