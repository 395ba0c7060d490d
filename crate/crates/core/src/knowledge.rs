//! Partially known system matrix over a monomial basis, and the first-layer
//! knowledge matrix, weight mask and activation mask derived from it.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::monomial::{ExponentVector, MonomialBasis};

/// One entry of the system matrix: a known coefficient (possibly zero) or an
/// unknown to be learned.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Entry {
    Known(f64),
    Unknown,
}

impl Entry {
    pub fn is_known(&self) -> bool {
        matches!(self, Entry::Known(_))
    }

    pub fn known_value(&self) -> Option<f64> {
        match self {
            Entry::Known(v) => Some(*v),
            Entry::Unknown => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeSpec {
    out_dim: usize,
    basis: MonomialBasis,
    entries: Vec<Entry>,
}

impl KnowledgeSpec {
    /// `entries` is row-major, `out_dim x basis.len()`.
    pub fn new(basis: MonomialBasis, out_dim: usize, entries: Vec<Entry>) -> Result<Self> {
        if out_dim == 0 {
            return Err(Error::InvalidArgument("knowledge needs at least one output".into()));
        }
        if entries.len() != out_dim * basis.len() {
            return Err(Error::DimensionMismatch {
                expected: out_dim * basis.len(),
                actual: entries.len(),
            });
        }
        if let Some(bad) = entries.iter().position(|e| matches!(e, Entry::Known(v) if !v.is_finite())) {
            return Err(Error::NonFinite {
                context: format!("knowledge entry ({}, {})", bad / basis.len(), bad % basis.len()),
            });
        }
        let spec = Self {
            out_dim,
            basis,
            entries,
        };
        if spec.is_fully_known() {
            log::warn!("every knowledge entry is known; the model has nothing to learn");
        }
        Ok(spec)
    }

    pub fn all_unknown(basis: MonomialBasis, out_dim: usize) -> Result<Self> {
        let n = basis.len() * out_dim;
        Self::new(basis, out_dim, vec![Entry::Unknown; n])
    }

    /// Builds the matrix entry by entry from the output row and the monomial.
    pub fn from_fn(
        basis: MonomialBasis,
        out_dim: usize,
        mut f: impl FnMut(usize, usize, &ExponentVector) -> Entry,
    ) -> Result<Self> {
        let mut entries = Vec::with_capacity(out_dim * basis.len());
        for i in 0..out_dim {
            for (j, term) in basis.terms().iter().enumerate() {
                entries.push(f(i, j, term));
            }
        }
        Self::new(basis, out_dim, entries)
    }

    /// Parses whitespace-separated rows where each token is a real number
    /// (known) or `*` (unknown). Blank lines and `#` comments are skipped.
    pub fn parse(text: &str, basis: MonomialBasis, out_dim: usize) -> Result<Self> {
        let cols = basis.len();
        let mut entries = Vec::with_capacity(out_dim * cols);
        let mut rows = 0;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            rows += 1;
            if rows > out_dim {
                return Err(Error::parse(
                    lineno + 1,
                    None,
                    format!("more than {out_dim} knowledge rows"),
                ));
            }
            let mut count = 0;
            for (c, token) in line.split_whitespace().enumerate() {
                count += 1;
                if count > cols {
                    return Err(Error::parse(
                        lineno + 1,
                        Some(c + 1),
                        format!("row has more than {cols} entries"),
                    ));
                }
                let entry = if token == "*" {
                    Entry::Unknown
                } else {
                    let v: f64 = token.parse().map_err(|_| {
                        Error::parse(lineno + 1, Some(c + 1), format!("bad knowledge token {token:?}"))
                    })?;
                    if !v.is_finite() {
                        return Err(Error::parse(lineno + 1, Some(c + 1), "non-finite known value"));
                    }
                    Entry::Known(v)
                };
                entries.push(entry);
            }
            if count != cols {
                return Err(Error::parse(
                    lineno + 1,
                    Some(count + 1),
                    format!("row has {count} entries, expected {cols}"),
                ));
            }
        }
        if rows != out_dim {
            return Err(Error::parse(
                text.lines().count(),
                None,
                format!("found {rows} knowledge rows, expected {out_dim}"),
            ));
        }
        Self::new(basis, out_dim, entries)
    }

    /// Inverse of [`KnowledgeSpec::parse`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for i in 0..self.out_dim {
            let row: Vec<String> = (0..self.cols())
                .map(|j| match self.get(i, j) {
                    Entry::Known(v) => format!("{v:?}"),
                    Entry::Unknown => "*".to_string(),
                })
                .collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn cols(&self) -> usize {
        self.basis.len()
    }

    pub fn basis(&self) -> &MonomialBasis {
        &self.basis
    }

    pub fn get(&self, i: usize, j: usize) -> Entry {
        self.entries[i * self.cols() + j]
    }

    pub fn is_fully_known(&self) -> bool {
        self.entries.iter().all(Entry::is_known)
    }

    pub fn known_count(&self) -> usize {
        self.entries.iter().filter(|e| e.is_known()).count()
    }

    /// All `(row, column, value)` triples with a known value.
    pub fn known_positions(&self) -> Vec<(usize, usize, f64)> {
        (0..self.out_dim)
            .flat_map(|i| (0..self.cols()).map(move |j| (i, j)))
            .filter_map(|(i, j)| self.get(i, j).known_value().map(|v| (i, j, v)))
            .collect()
    }

    /// The matrix with unknown entries filled by `fill(i, j)`.
    pub fn realize(&self, mut fill: impl FnMut(usize, usize) -> f64) -> DMatrix<f64> {
        DMatrix::from_fn(self.out_dim, self.cols(), |i, j| match self.get(i, j) {
            Entry::Known(v) => v,
            Entry::Unknown => fill(i, j),
        })
    }

    pub fn first_layer_masks(&self) -> EditedMasks {
        let k = self.realize(|_, _| 0.0);
        let m = DMatrix::from_fn(self.out_dim, self.cols(), |i, j| !self.get(i, j).is_known());
        let a = (0..self.out_dim).map(|i| m.row(i).iter().any(|&t| t)).collect();
        EditedMasks { k, m, a }
    }
}

/// Knowledge matrix `k`, weight mask `m` (true = trainable) and activation
/// mask `a` (true = activation applied) of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EditedMasks {
    pub k: DMatrix<f64>,
    pub m: DMatrix<bool>,
    pub a: Vec<bool>,
}

impl EditedMasks {
    /// Known entries are frozen and `a[i]` is off exactly when row `i` of the
    /// mask is empty.
    pub fn check_invariants(&self) -> Result<()> {
        for i in 0..self.k.nrows() {
            for j in 0..self.k.ncols() {
                if self.k[(i, j)] != 0.0 && self.m[(i, j)] {
                    return Err(Error::ShapeMismatch(format!(
                        "knowledge entry ({i}, {j}) is also trainable"
                    )));
                }
            }
        }
        for (i, &ai) in self.a.iter().enumerate() {
            let any = self.m.row(i).iter().any(|&t| t);
            if ai != any {
                return Err(Error::ShapeMismatch(format!(
                    "activation mask row {i} is {ai} but weight mask row has trainable={any}"
                )));
            }
        }
        Ok(())
    }

    pub fn trainable_count(&self) -> usize {
        self.m.iter().filter(|&&t| t).count()
    }
}

/// For each first-layer output `k`, the input-monomial indices it can depend
/// on: positions with a nonzero known value or a trainable weight.
pub fn dependency_sets(masks: &EditedMasks) -> Vec<BTreeSet<usize>> {
    (0..masks.k.nrows())
        .map(|i| {
            (0..masks.k.ncols())
                .filter(|&j| masks.k[(i, j)] != 0.0 || masks.m[(i, j)])
                .collect()
        })
        .collect()
}
