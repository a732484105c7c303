//! Dense matrix and rank-3 tensor primitives, plus the two convolution
//! operators the factorization is written against.
//!
//! Time runs along matrix columns. Both convolutions treat out-of-range time
//! indices as zero, so a reconstruction is defined over every column.

use std::fmt;
use std::io::{BufRead, Write};
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{}) [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            write!(f, "\n  {:?}", &self.row(r)[..self.cols.min(12)])?;
        }
        write!(f, "\n]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, checking the length and that
    /// every entry is finite.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(format!("matrix must be non-empty, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::dims("Matrix::from_vec", rows * cols, data.len()));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite entry at ({}, {})",
                pos / cols,
                pos % cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let ncols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(Error::invalid("ragged rows"));
        }
        Self::from_vec(rows.len(), ncols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dims("matmul", format!("{} inner rows", self.cols), other.rows));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_transposed(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::dims("matmul_transposed", self.cols, other.cols));
        }
        Ok(Matrix::from_fn(self.rows, other.rows, |i, j| {
            dot(self.row(i), other.row(j))
        }))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.check_same_shape(other, "zip_map")?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn scale(&self, k: f64) -> Matrix {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Entrywise inner product `⟨A, B⟩ = Σ A_ij B_ij`.
    pub fn inner(&self, other: &Matrix) -> Result<f64> {
        self.check_same_shape(other, "inner")?;
        Ok(dot(&self.data, &other.data))
    }

    /// Largest absolute entrywise difference.
    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Copy of the column range `[start, end)`.
    pub fn columns(&self, start: usize, end: usize) -> Matrix {
        let width = end - start;
        let mut out = Matrix::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[start..end]);
        }
        out
    }

    pub(crate) fn check_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dims(
                op,
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        Ok(())
    }

    /// Writes one row per line, comma separated, no header.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        for r in 0..self.rows {
            wtr.write_record(self.row(r).iter().map(|v| format_real(*v)))?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Matrix> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(r);
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            rows.push(parse_record(&rec)?);
        }
        Matrix::from_rows(&rows)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Pattern tensor of shape `D × J × L` (data dimension, factor, lag).
///
/// Storage is lag-major so each lag slice `O_{··ℓ}` is a contiguous `D × J`
/// block.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    d: usize,
    j: usize,
    l: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor3({}x{}x{})", self.d, self.j, self.l)
    }
}

impl Tensor3 {
    pub fn zeros(d: usize, j: usize, l: usize) -> Self {
        Tensor3 {
            d,
            j,
            l,
            data: vec![0.0; d * j * l],
        }
    }

    pub fn from_fn(d: usize, j: usize, l: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut t = Self::zeros(d, j, l);
        for lag in 0..l {
            for row in 0..d {
                for factor in 0..j {
                    t[(row, factor, lag)] = f(row, factor, lag);
                }
            }
        }
        t
    }

    /// Builds from per-lag `D × J` slices.
    pub fn from_lag_slices(slices: &[Matrix]) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::invalid("tensor needs at least one lag"))?;
        let (d, j) = first.shape();
        let mut data = Vec::with_capacity(d * j * slices.len());
        for s in slices {
            if s.shape() != (d, j) {
                return Err(Error::dims(
                    "Tensor3::from_lag_slices",
                    format!("{d}x{j}"),
                    format!("{}x{}", s.rows(), s.cols()),
                ));
            }
            data.extend_from_slice(s.as_slice());
        }
        Ok(Tensor3 {
            d,
            j,
            l: slices.len(),
            data,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.d, self.j, self.l)
    }

    pub fn data_dim(&self) -> usize {
        self.d
    }

    pub fn factors(&self) -> usize {
        self.j
    }

    pub fn lags(&self) -> usize {
        self.l
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn lag_slice(&self, lag: usize) -> Matrix {
        let n = self.d * self.j;
        Matrix {
            rows: self.d,
            cols: self.j,
            data: self.data[lag * n..(lag + 1) * n].to_vec(),
        }
    }

    pub fn set_lag_slice(&mut self, lag: usize, m: &Matrix) {
        assert_eq!(m.shape(), (self.d, self.j));
        let n = self.d * self.j;
        self.data[lag * n..(lag + 1) * n].copy_from_slice(m.as_slice());
    }

    /// Pattern of factor `j` as a `D × L` matrix.
    pub fn factor_pattern(&self, factor: usize) -> Matrix {
        Matrix::from_fn(self.d, self.l, |row, lag| self[(row, factor, lag)])
    }

    pub fn scale_factor(&mut self, factor: usize, k: f64) {
        for lag in 0..self.l {
            for row in 0..self.d {
                self[(row, factor, lag)] *= k;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs_diff(&self, other: &Tensor3) -> f64 {
        assert_eq!(self.dims(), other.dims());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Header line `D J L`, then one `D × J` CSV block per lag, blocks
    /// separated by a blank line.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{} {} {}", self.d, self.j, self.l)?;
        for lag in 0..self.l {
            if lag > 0 {
                writeln!(w)?;
            }
            self.lag_slice(lag).write_csv(&mut w)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(mut r: R) -> Result<Tensor3> {
        let mut header = String::new();
        r.read_line(&mut header)?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|tok| tok.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::invalid(format!("tensor header `{}`: {e}", header.trim())))?;
        let [d, j, l] = dims[..] else {
            return Err(Error::invalid(format!(
                "tensor header must be `D J L`, got `{}`",
                header.trim()
            )));
        };
        // The csv reader skips the blank separator lines.
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(r);
        let mut data = Vec::with_capacity(d * j * l);
        let mut nrows = 0;
        for rec in rdr.records() {
            let row = parse_record(&rec?)?;
            if row.len() != j {
                return Err(Error::dims("Tensor3::read_csv", j, row.len()));
            }
            data.extend(row);
            nrows += 1;
        }
        if nrows != d * l {
            return Err(Error::dims("Tensor3::read_csv rows", d * l, nrows));
        }
        Ok(Tensor3 { d, j, l, data })
    }
}

impl Index<(usize, usize, usize)> for Tensor3 {
    type Output = f64;

    #[inline]
    fn index(&self, (d, j, l): (usize, usize, usize)) -> &f64 {
        debug_assert!(d < self.d && j < self.j && l < self.l);
        &self.data[(l * self.d + d) * self.j + j]
    }
}

impl IndexMut<(usize, usize, usize)> for Tensor3 {
    #[inline]
    fn index_mut(&mut self, (d, j, l): (usize, usize, usize)) -> &mut f64 {
        debug_assert!(d < self.d && j < self.j && l < self.l);
        &mut self.data[(l * self.d + d) * self.j + j]
    }
}

fn format_real(v: f64) -> String {
    // `{}` on f64 prints the shortest string that round-trips exactly.
    format!("{v}")
}

fn parse_record(rec: &csv::StringRecord) -> Result<Vec<f64>> {
    rec.iter()
        .map(|field| {
            field
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::invalid(format!("bad real `{field}`: {e}")))
        })
        .collect()
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Convolutional reconstruction `X̃ = O ∗ H`:
/// `X̃_{dt} = Σ_j Σ_ℓ O_{djℓ} H_{j,t−ℓ}`, with `H` zero before column 0.
pub fn conv_forward(o: &Tensor3, h: &Matrix) -> Result<Matrix> {
    let (d, j, l) = o.dims();
    if h.rows() != j {
        return Err(Error::dims("conv_forward (factors)", j, h.rows()));
    }
    let t = h.cols();
    let mut out = Matrix::zeros(d, t);
    for lag in 0..l.min(t) {
        for row in 0..d {
            let out_row = &mut out.data[row * t..(row + 1) * t];
            for factor in 0..j {
                let w = o[(row, factor, lag)];
                if w == 0.0 {
                    continue;
                }
                axpy(w, &h.row(factor)[..t - lag], &mut out_row[lag..]);
            }
        }
    }
    Ok(out)
}

/// Transposed convolution `O ⋆ X`:
/// `(O ⋆ X)_{jt} = Σ_ℓ Σ_d O_{djℓ} X_{d,t+ℓ}`, with `X` zero past the last
/// column. This is the adjoint of [`conv_forward`] in its `H` argument.
pub fn conv_transpose(o: &Tensor3, x: &Matrix) -> Result<Matrix> {
    let (d, j, l) = o.dims();
    if x.rows() != d {
        return Err(Error::dims("conv_transpose (data rows)", d, x.rows()));
    }
    let t = x.cols();
    let mut out = Matrix::zeros(j, t);
    for lag in 0..l.min(t) {
        for factor in 0..j {
            let out_row = &mut out.data[factor * t..(factor + 1) * t];
            for row in 0..d {
                let w = o[(row, factor, lag)];
                if w == 0.0 {
                    continue;
                }
                axpy(w, &x.row(row)[lag..], &mut out_row[..t - lag]);
            }
        }
    }
    Ok(out)
}

/// Shifts columns by `shift` positions: positive moves right (delay),
/// negative moves left (advance). Vacated columns are zero.
pub fn shift_columns(m: &Matrix, shift: isize) -> Result<Matrix> {
    let t = m.cols();
    if shift.unsigned_abs() >= t {
        return Err(Error::invalid(format!("shift {shift} out of range for {t} columns")));
    }
    let mut out = Matrix::zeros(m.rows(), t);
    let k = shift.unsigned_abs();
    for r in 0..m.rows() {
        let src = m.row(r);
        let dst = out.row_mut(r);
        if shift >= 0 {
            dst[k..].copy_from_slice(&src[..t - k]);
        } else {
            dst[..t - k].copy_from_slice(&src[k..]);
        }
    }
    Ok(out)
}

/// Squared Frobenius distance `Σ (A − B)²`.
pub fn frobenius_sq(a: &Matrix, b: &Matrix) -> Result<f64> {
    a.check_same_shape(b, "frobenius_sq")?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Dense `T × T` band matrix with ones where `|i − j| < L`.
///
/// Only useful for small `T`; the factorization uses [`smooth_rows`], which
/// applies the same operator without materializing it.
pub fn smoothing_matrix(t: usize, l: usize) -> Matrix {
    Matrix::from_fn(t, t, |i, j| if i.abs_diff(j) < l { 1.0 } else { 0.0 })
}

/// `M · S` for the band matrix `S = smoothing_matrix(T, L)`: each entry
/// becomes the sum of its row over the window `|t − t'| < L`.
pub fn smooth_rows(m: &Matrix, l: usize) -> Matrix {
    let t = m.cols();
    let mut out = Matrix::zeros(m.rows(), t);
    let mut prefix = vec![0.0; t + 1];
    for r in 0..m.rows() {
        let row = m.row(r);
        for (i, v) in row.iter().enumerate() {
            prefix[i + 1] = prefix[i] + v;
        }
        let dst = out.row_mut(r);
        for (c, slot) in dst.iter_mut().enumerate() {
            let lo = c.saturating_sub(l - 1);
            let hi = (c + l).min(t);
            *slot = prefix[hi] - prefix[lo];
        }
    }
    out
}
