use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// A set of `n` points in `d` dimensions, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Points {
    data: Vec<f64>,
    n: usize,
    d: usize,
}

impl Points {
    pub fn new(data: Vec<f64>, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::DegenerateData("zero-dimensional points".into()));
        }
        if !data.len().is_multiple_of(d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: data.len() % d,
            });
        }
        let n = data.len() / d;
        Ok(Self { data, n, d })
    }

    pub fn empty(d: usize) -> Self {
        Self {
            data: Vec::new(),
            n: 0,
            d,
        }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let d = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            let r = r.as_ref();
            if r.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(data, d)
    }

    /// One-dimensional points from scalars.
    pub fn from_scalars(xs: &[f64]) -> Self {
        Self {
            data: xs.to_vec(),
            n: xs.len(),
            d: 1,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.d)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn push(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                found: row.len(),
            });
        }
        self.data.extend_from_slice(row);
        self.n += 1;
        Ok(())
    }

    pub fn extend(&mut self, other: &Points) -> Result<()> {
        if other.d != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                found: other.d,
            });
        }
        self.data.extend_from_slice(&other.data);
        self.n += other.n;
        Ok(())
    }

    pub fn select(&self, idx: &[usize]) -> Points {
        let mut data = Vec::with_capacity(idx.len() * self.d);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Points {
            data,
            n: idx.len(),
            d: self.d,
        }
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.d, &self.data)
    }
}
