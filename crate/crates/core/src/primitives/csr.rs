//! Compressed sparse row matrices and their `MDYS` binary container.

use std::io::{Read, Write};

use thiserror::Error;

/// Magic bytes opening every serialized matrix.
pub const MDYS_MAGIC: &[u8; 4] = b"MDYS";
/// Current container version.
pub const MDYS_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CsrError {
    #[error("row_ptr must have length n_rows + 1 = {expected}, got {got}")]
    RowPtrLength { expected: usize, got: usize },
    #[error("row_ptr must start at 0 and end at nnz = {nnz}")]
    RowPtrBounds { nnz: usize },
    #[error("row_ptr decreases at row {row}")]
    RowPtrDecreasing { row: usize },
    #[error("col_idx and values differ in length ({cols} vs {values})")]
    LengthMismatch { cols: usize, values: usize },
    #[error("column index {col} out of range for {n_cols} columns (row {row})")]
    ColumnOutOfRange { row: usize, col: usize, n_cols: usize },
    #[error("column indices not strictly increasing in row {row}")]
    UnsortedRow { row: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("row index {row} out of range for {n_rows} rows")]
    RowOutOfRange { row: usize, n_rows: usize },
    #[error("bad container: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A sparse matrix in CSR layout with `f64` values.
///
/// Structural invariants are checked on construction and preserved by every
/// transform: `row_ptr` starts at zero, never decreases and ends at `nnz`;
/// column indices are strictly increasing within a row and below `n_cols`.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn new(
        n_rows: usize,
        n_cols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self, CsrError> {
        let m = Self {
            n_rows,
            n_cols,
            row_ptr,
            col_idx,
            values,
        };
        m.validate()?;
        Ok(m)
    }

    /// An all-zero matrix.
    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        Self {
            n_rows,
            n_cols,
            row_ptr: vec![0; n_rows + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds a matrix from per-row `(col, value)` lists. Entries within a row
    /// may come in any order; duplicate columns are rejected.
    pub fn from_rows(n_cols: usize, rows: &[Vec<(usize, f64)>]) -> Result<Self, CsrError> {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for row in rows {
            let mut sorted = row.clone();
            sorted.sort_by_key(|&(c, _)| c);
            for (c, v) in sorted {
                col_idx.push(c);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        Self::new(rows.len(), n_cols, row_ptr, col_idx, values)
    }

    /// Builds a matrix from `(row, col, value)` triplets.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self, CsrError> {
        let mut rows = vec![Vec::new(); n_rows];
        for &(r, c, v) in triplets {
            if r >= n_rows {
                return Err(CsrError::RowOutOfRange { row: r, n_rows });
            }
            rows[r].push((c, v));
        }
        Self::from_rows(n_cols, &rows)
    }

    /// Builds a matrix from a dense row-major slice, skipping exact zeros.
    pub fn from_dense(n_rows: usize, n_cols: usize, dense: &[f64]) -> Result<Self, CsrError> {
        if dense.len() != n_rows * n_cols {
            return Err(CsrError::DimensionMismatch {
                expected: n_rows * n_cols,
                got: dense.len(),
            });
        }
        let rows: Vec<Vec<(usize, f64)>> = dense
            .chunks(n_cols.max(1))
            .take(n_rows)
            .map(|r| {
                r.iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(|(c, v)| (c, *v))
                    .collect()
            })
            .collect();
        Self::from_rows(n_cols, &rows)
    }

    pub fn validate(&self) -> Result<(), CsrError> {
        if self.row_ptr.len() != self.n_rows + 1 {
            return Err(CsrError::RowPtrLength {
                expected: self.n_rows + 1,
                got: self.row_ptr.len(),
            });
        }
        if self.col_idx.len() != self.values.len() {
            return Err(CsrError::LengthMismatch {
                cols: self.col_idx.len(),
                values: self.values.len(),
            });
        }
        let nnz = self.values.len();
        if self.row_ptr[0] != 0 || self.row_ptr[self.n_rows] != nnz {
            return Err(CsrError::RowPtrBounds { nnz });
        }
        for row in 0..self.n_rows {
            let (start, end) = (self.row_ptr[row], self.row_ptr[row + 1]);
            if end < start {
                return Err(CsrError::RowPtrDecreasing { row });
            }
            let cols = &self.col_idx[start..end];
            for (k, &c) in cols.iter().enumerate() {
                if c >= self.n_cols {
                    return Err(CsrError::ColumnOutOfRange {
                        row,
                        col: c,
                        n_cols: self.n_cols,
                    });
                }
                if k > 0 && cols[k - 1] >= c {
                    return Err(CsrError::UnsortedRow { row });
                }
            }
        }
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Column indices and values of one row.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.col_idx[s..e], &self.values[s..e])
    }

    /// Iterates `(col, value)` pairs of row `i`.
    pub fn row_iter(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (c, v) = self.row(i);
        c.iter().copied().zip(v.iter().copied())
    }

    /// Entry lookup by binary search within the row.
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).ok().map(|k| vals[k])
    }

    /// Sparse-dense product `m · v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>, CsrError> {
        if v.len() != self.n_cols {
            return Err(CsrError::DimensionMismatch {
                expected: self.n_cols,
                got: v.len(),
            });
        }
        Ok((0..self.n_rows)
            .map(|i| self.row_iter(i).map(|(c, x)| x * v[c]).sum())
            .collect())
    }

    /// Transposed product `mᵀ · v`.
    pub fn transpose_matvec(&self, v: &[f64]) -> Result<Vec<f64>, CsrError> {
        if v.len() != self.n_rows {
            return Err(CsrError::DimensionMismatch {
                expected: self.n_rows,
                got: v.len(),
            });
        }
        let mut out = vec![0.0; self.n_cols];
        for (i, vi) in v.iter().enumerate() {
            for (c, x) in self.row_iter(i) {
                out[c] += x * vi;
            }
        }
        Ok(out)
    }

    /// New matrix made of the selected rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self, CsrError> {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for &r in rows {
            if r >= self.n_rows {
                return Err(CsrError::RowOutOfRange {
                    row: r,
                    n_rows: self.n_rows,
                });
            }
            let (c, v) = self.row(r);
            col_idx.extend_from_slice(c);
            values.extend_from_slice(v);
            row_ptr.push(col_idx.len());
        }
        Ok(Self {
            n_rows: rows.len(),
            n_cols: self.n_cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    /// New matrix keeping only the listed columns, renumbered in list order.
    /// `cols` must be strictly increasing.
    pub fn select_cols(&self, cols: &[usize]) -> Result<Self, CsrError> {
        let mut remap = vec![usize::MAX; self.n_cols];
        for (new, &old) in cols.iter().enumerate() {
            if old >= self.n_cols {
                return Err(CsrError::DimensionMismatch {
                    expected: self.n_cols,
                    got: old,
                });
            }
            remap[old] = new;
        }
        let rows: Vec<Vec<(usize, f64)>> = (0..self.n_rows)
            .map(|i| {
                self.row_iter(i)
                    .filter(|(c, _)| remap[*c] != usize::MAX)
                    .map(|(c, v)| (remap[c], v))
                    .collect()
            })
            .collect();
        Self::from_rows(cols.len(), &rows)
    }

    /// Stacks matrices vertically; all must share `n_cols`.
    pub fn vstack(parts: &[&CsrMatrix]) -> Result<Self, CsrError> {
        let n_cols = parts.first().map_or(0, |m| m.n_cols);
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for m in parts {
            if m.n_cols != n_cols {
                return Err(CsrError::DimensionMismatch {
                    expected: n_cols,
                    got: m.n_cols,
                });
            }
            let base = col_idx.len();
            row_ptr.extend(m.row_ptr[1..].iter().map(|p| p + base));
            col_idx.extend_from_slice(&m.col_idx);
            values.extend_from_slice(&m.values);
        }
        Ok(Self {
            n_rows: row_ptr.len() - 1,
            n_cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    /// Copy with columns shifted right by `offset` into a wider space.
    pub fn shift_cols(&self, offset: usize, n_cols: usize) -> Result<Self, CsrError> {
        Self::new(
            self.n_rows,
            n_cols,
            self.row_ptr.clone(),
            self.col_idx.iter().map(|c| c + offset).collect(),
            self.values.clone(),
        )
    }

    /// Dense row-major copy.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_rows * self.n_cols];
        for i in 0..self.n_rows {
            for (c, v) in self.row_iter(i) {
                out[i * self.n_cols + c] = v;
            }
        }
        out
    }

    /// Writes the little-endian `MDYS` container.
    ///
    /// Layout: magic `MDYS`, version `u16`, `n_rows u64`, `n_cols u64`,
    /// `nnz u64`, then `row_ptr` as `u64[n_rows+1]`, `col_idx` as `u64[nnz]`
    /// and `values` as `f64[nnz]`.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CsrError> {
        w.write_all(MDYS_MAGIC)?;
        w.write_all(&MDYS_VERSION.to_le_bytes())?;
        for n in [self.n_rows, self.n_cols, self.nnz()] {
            w.write_all(&(n as u64).to_le_bytes())?;
        }
        for &p in &self.row_ptr {
            w.write_all(&(p as u64).to_le_bytes())?;
        }
        for &c in &self.col_idx {
            w.write_all(&(c as u64).to_le_bytes())?;
        }
        for &v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(30 + 8 * (self.n_rows + 1 + 2 * self.nnz()));
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, CsrError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MDYS_MAGIC {
            return Err(CsrError::Format("bad magic".into()));
        }
        let mut ver = [0u8; 2];
        r.read_exact(&mut ver)?;
        let version = u16::from_le_bytes(ver);
        if version != MDYS_VERSION {
            return Err(CsrError::Format(format!("unsupported version {version}")));
        }
        let n_rows = read_u64(&mut r)? as usize;
        let n_cols = read_u64(&mut r)? as usize;
        let nnz = read_u64(&mut r)? as usize;
        let row_ptr = (0..=n_rows)
            .map(|_| read_u64(&mut r).map(|x| x as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let col_idx = (0..nnz)
            .map(|_| read_u64(&mut r).map(|x| x as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let values = (0..nnz)
            .map(|_| read_u64(&mut r).map(f64::from_bits))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(n_rows, n_cols, row_ptr, col_idx, values)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CsrError> {
        Self::read_from(bytes)
    }
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, std::io::Error> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dense_matvec(n_rows: usize, n_cols: usize, dense: &[f64], v: &[f64]) -> Vec<f64> {
        (0..n_rows)
            .map(|i| (0..n_cols).map(|j| dense[i * n_cols + j] * v[j]).sum())
            .collect()
    }

    #[test]
    fn identity_matvec() {
        let m = CsrMatrix::from_triplets(3, 3, &[(0, 0, 1.0), (1, 1, 1.0), (2, 2, 1.0)]).unwrap();
        assert_eq!(m.matvec(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn empty_row_gives_zero() {
        let m = CsrMatrix::from_triplets(3, 2, &[(0, 0, 2.0), (2, 1, -1.0)]).unwrap();
        let out = m.matvec(&[5.0, 7.0]).unwrap();
        assert_eq!(out[1], 0.0);
        assert_eq!(out, vec![10.0, 0.0, -7.0]);
    }

    #[test]
    fn matvec_against_dense_reference() {
        // fixed 5x4 matrix with some empty slots
        let dense = [
            0.5, 0.0, -1.25, 0.0, //
            0.0, 0.0, 0.0, 0.0, //
            3.0, 1.0, 0.0, 2.5, //
            0.0, -0.75, 0.0, 0.0, //
            1.5, 0.0, 4.0, -2.0,
        ];
        let m = CsrMatrix::from_dense(5, 4, &dense).unwrap();
        let v = [0.3, -1.7, 2.2, 0.9];
        let got = m.matvec(&v).unwrap();
        let want = dense_matvec(5, 4, &dense, &v);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let m = CsrMatrix::zeros(2, 3);
        assert!(matches!(
            m.matvec(&[1.0]),
            Err(CsrError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn invalid_structures_rejected() {
        assert!(CsrMatrix::new(1, 3, vec![0, 2], vec![2, 1], vec![1.0, 1.0]).is_err());
        assert!(CsrMatrix::new(1, 3, vec![0, 1], vec![3], vec![1.0]).is_err());
        assert!(CsrMatrix::new(2, 3, vec![0, 2, 1], vec![0, 1], vec![1.0, 1.0]).is_err());
        assert!(CsrMatrix::new(1, 3, vec![1, 1], vec![0], vec![1.0]).is_err());
    }

    #[test]
    fn container_rejects_bad_magic() {
        let mut bytes = CsrMatrix::zeros(2, 2).to_bytes();
        bytes[0] = b'X';
        assert!(CsrMatrix::from_bytes(&bytes).is_err());
    }

    fn arb_matrix() -> impl Strategy<Value = CsrMatrix> {
        (1usize..8, 1usize..8).prop_flat_map(|(r, c)| {
            proptest::collection::vec(proptest::option::weighted(0.4, -5.0f64..5.0), r * c)
                .prop_map(move |cells| {
                    let dense: Vec<f64> = cells.into_iter().map(|x| x.unwrap_or(0.0)).collect();
                    CsrMatrix::from_dense(r, c, &dense).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn transforms_preserve_invariants(m in arb_matrix(), seed in 0usize..100) {
            prop_assert!(m.validate().is_ok());
            let rows: Vec<usize> = (0..m.n_rows()).rev().chain([seed % m.n_rows()]).collect();
            prop_assert!(m.select_rows(&rows).unwrap().validate().is_ok());
            let cols: Vec<usize> = (0..m.n_cols()).filter(|c| c % 2 == seed % 2).collect();
            prop_assert!(m.select_cols(&cols).unwrap().validate().is_ok());
            let stacked = CsrMatrix::vstack(&[&m, &m]).unwrap();
            prop_assert!(stacked.validate().is_ok());
            prop_assert_eq!(stacked.nnz(), 2 * m.nnz());
        }

        #[test]
        fn container_round_trip(m in arb_matrix()) {
            let back = CsrMatrix::from_bytes(&m.to_bytes()).unwrap();
            prop_assert_eq!(back, m);
        }

        #[test]
        fn transpose_matvec_matches_dense(m in arb_matrix()) {
            let v: Vec<f64> = (0..m.n_rows()).map(|i| i as f64 - 1.5).collect();
            let got = m.transpose_matvec(&v).unwrap();
            let d = m.to_dense();
            for j in 0..m.n_cols() {
                let want: f64 = (0..m.n_rows()).map(|i| d[i * m.n_cols() + j] * v[i]).sum();
                prop_assert!((got[j] - want).abs() < 1e-12);
            }
        }
    }
}
