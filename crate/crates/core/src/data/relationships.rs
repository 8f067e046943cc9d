use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// A named set of unordered perturbation pairs with distinct endpoints.
///
/// Pairs are stored canonically as `(min, max)` so membership is symmetric.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RelationshipDb {
    pub name: String,
    pairs: BTreeSet<(String, String)>,
}

impl RelationshipDb {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            pairs: BTreeSet::new(),
        }
    }

    pub fn from_pairs<I, A, B>(name: impl Into<String>, pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (A, B)>,
        A: Into<String>,
        B: Into<String>,
    {
        let mut db = Self::new(name);
        for (a, b) in pairs {
            db.insert(a, b)?;
        }
        Ok(db)
    }

    /// Insert a pair; returns `false` if it was already present.
    pub fn insert(&mut self, a: impl Into<String>, b: impl Into<String>) -> Result<bool> {
        let (a, b) = (a.into(), b.into());
        if a == b {
            return Err(Error::InvalidArgument(format!("self-pair {a:?}")));
        }
        let key = if a < b { (a, b) } else { (b, a) };
        Ok(self.pairs.insert(key))
    }

    pub fn contains(&self, a: &str, b: &str) -> bool {
        let key = if a < b {
            (a.to_owned(), b.to_owned())
        } else {
            (b.to_owned(), a.to_owned())
        };
        self.pairs.contains(&key)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.pairs.iter().map(|(a, b)| (a.as_str(), b.as_str()))
    }

    /// Keep only pairs whose endpoints both satisfy `keep`.
    pub fn restrict(&self, mut keep: impl FnMut(&str) -> bool) -> Self {
        Self {
            name: self.name.clone(),
            pairs: self
                .pairs
                .iter()
                .filter(|(a, b)| keep(a) && keep(b))
                .cloned()
                .collect(),
        }
    }
}

const NAME_PREFIX: &str = "#database=";
const HEADER: &str = "perturbation_a,perturbation_b";

impl RelationshipDb {
    /// Two-column pair list: a `#database=<name>` line, a header, then one pair per line.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "{NAME_PREFIX}{}", self.name)?;
        writeln!(out, "{HEADER}")?;
        for (a, b) in self.pairs() {
            writeln!(out, "{a},{b}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut lines = file.lines();
        let first = lines.next().transpose()?.unwrap_or_default();
        let (name, header) = match first.strip_prefix(NAME_PREFIX) {
            Some(name) => (name.trim().to_string(), lines.next().transpose()?.unwrap_or_default()),
            None => (
                path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
                first,
            ),
        };
        if header.trim() != HEADER {
            return Err(bad(format!("expected header {HEADER:?}, found {header:?}")));
        }
        let mut db = Self::new(name);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut cols = line.split(',').map(str::trim);
            match (cols.next(), cols.next(), cols.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    db.insert(a, b).map_err(|e| bad(format!("line {}: {e}", i + 3)))?;
                }
                _ => return Err(bad(format!("line {}: expected two columns", i + 3))),
            }
        }
        Ok(db)
    }
}
