//! Dense and banded linear algebra for state solves, adjoint sweeps and rank checks.
//!
//! Banded matrices keep one row-major strip per row covering columns
//! `i - lower_bw ..= i + upper_bw`. The LU factorization pivots within the band
//! and lets the upper factor grow to `lower_bw + upper_bw` superdiagonals, the
//! same fill pattern as LAPACK's `gbtrf`.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error(
        "singular matrix: pivot {pivot:.3e} at column {column} is below tolerance {tolerance:.3e}"
    )]
    Singular {
        column: usize,
        pivot: f64,
        tolerance: f64,
    },
    #[error("empty matrix")]
    EmptyMatrix,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid bandwidth: lower {lower}, upper {upper} for dimension {n}")]
    InvalidBandwidth {
        n: usize,
        lower: usize,
        upper: usize,
    },
    #[error("pivot tolerance must be positive, got {0}")]
    InvalidTolerance(f64),
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Self {
            rows: r,
            cols: c,
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `selfᵀ · x`.
    pub fn tr_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a * xi;
            }
        }
        out
    }

    pub fn mul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.rows);
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Partial-pivoted LU of a square matrix.
    pub fn lu(&self, pivot_tol: f64) -> Result<DenseLu> {
        DenseLu::factor(self, pivot_tol)
    }
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Square matrix with `lower_bw` sub- and `upper_bw` superdiagonals.
#[derive(Debug, Clone, PartialEq)]
pub struct BandedMatrix {
    n: usize,
    lower_bw: usize,
    upper_bw: usize,
    bands: Vec<f64>,
}

impl BandedMatrix {
    pub fn zeros(n: usize, lower_bw: usize, upper_bw: usize) -> Result<Self> {
        if n == 0 {
            return Err(LinalgError::EmptyMatrix);
        }
        if lower_bw >= n || upper_bw >= n {
            return Err(LinalgError::InvalidBandwidth {
                n,
                lower: lower_bw,
                upper: upper_bw,
            });
        }
        let width = lower_bw + upper_bw + 1;
        Ok(Self {
            n,
            lower_bw,
            upper_bw,
            bands: vec![0.0; n * width],
        })
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut m = Self::zeros(n, 0, 0)?;
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        Ok(m)
    }

    /// Copies the band of a dense square matrix; entries outside the band are dropped.
    pub fn from_dense(a: &DenseMatrix, lower_bw: usize, upper_bw: usize) -> Result<Self> {
        if a.rows() != a.cols() {
            return Err(LinalgError::DimensionMismatch {
                expected: a.rows(),
                got: a.cols(),
            });
        }
        let mut m = Self::zeros(a.rows(), lower_bw, upper_bw)?;
        for i in 0..m.n {
            for j in m.col_range(i) {
                m.set(i, j, a[(i, j)]);
            }
        }
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn lower_bw(&self) -> usize {
        self.lower_bw
    }

    pub fn upper_bw(&self) -> usize {
        self.upper_bw
    }

    fn width(&self) -> usize {
        self.lower_bw + self.upper_bw + 1
    }

    pub fn in_band(&self, i: usize, j: usize) -> bool {
        j + self.lower_bw >= i && j <= i + self.upper_bw
    }

    fn col_range(&self, i: usize) -> std::ops::Range<usize> {
        i.saturating_sub(self.lower_bw)..(i + self.upper_bw + 1).min(self.n)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i >= self.n || j >= self.n || !self.in_band(i, j) {
            return 0.0;
        }
        self.bands[i * self.width() + j + self.lower_bw - i]
    }

    /// Sets an entry; panics outside the band.
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        assert!(
            i < self.n && j < self.n && self.in_band(i, j),
            "entry ({i}, {j}) outside band"
        );
        let w = self.width();
        self.bands[i * w + j + self.lower_bw - i] = v;
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let cur = self.get(i, j);
        self.set(i, j, cur + v);
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut d = DenseMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for j in self.col_range(i) {
                d[(i, j)] = self.get(i, j);
            }
        }
        d
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        (0..self.n)
            .map(|i| self.col_range(i).map(|j| self.get(i, j) * x[j]).sum())
            .collect()
    }

    pub fn tr_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        let mut out = vec![0.0; self.n];
        for i in 0..self.n {
            for j in self.col_range(i) {
                out[j] += self.get(i, j) * x[i];
            }
        }
        out
    }

    pub fn max_row_sum(&self) -> f64 {
        (0..self.n)
            .map(|i| self.col_range(i).map(|j| self.get(i, j).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Scale-aware singularity threshold: `1e-10 · max row sum`.
    pub fn default_pivot_tol(&self) -> f64 {
        let s = self.max_row_sum();
        if s > 0.0 {
            1e-10 * s
        } else {
            f64::MIN_POSITIVE
        }
    }
}

/// LU factors of a [`BandedMatrix`] stored as a sequence of row interchanges and
/// Gauss transforms followed by a banded upper factor.
#[derive(Debug, Clone)]
pub struct BandedFactorization {
    n: usize,
    lower_bw: usize,
    /// Upper factor width: `lower_bw + upper_bw + 1` entries per row starting at the diagonal.
    u_width: usize,
    upper: Vec<f64>,
    multipliers: Vec<f64>,
    pivots: Vec<usize>,
    min_pivot: f64,
}

impl BandedFactorization {
    pub fn dim(&self) -> usize {
        self.n
    }

    /// Smallest pivot magnitude met during elimination.
    pub fn min_pivot(&self) -> f64 {
        self.min_pivot
    }

    pub fn pivots(&self) -> &[usize] {
        &self.pivots
    }

    fn u(&self, i: usize, j: usize) -> f64 {
        if j < i || j - i >= self.u_width || j >= self.n {
            0.0
        } else {
            self.upper[i * self.u_width + j - i]
        }
    }

    fn mult(&self, k: usize, r: usize) -> f64 {
        self.multipliers[k * self.lower_bw + r - 1]
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.n {
            return Err(LinalgError::DimensionMismatch {
                expected: self.n,
                got: b.len(),
            });
        }
        let n = self.n;
        let mut y = b.to_vec();
        for k in 0..n {
            let p = self.pivots[k];
            if p != k {
                y.swap(k, p);
            }
            let yk = y[k];
            if yk != 0.0 {
                for r in 1..=self.lower_bw.min(n - 1 - k) {
                    y[k + r] -= self.mult(k, r) * yk;
                }
            }
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for j in (i + 1)..(i + self.u_width).min(n) {
                s -= self.u(i, j) * y[j];
            }
            y[i] = s / self.u(i, i);
        }
        Ok(y)
    }

    /// Solves `Aᵀ x = b`.
    pub fn solve_transpose(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.n {
            return Err(LinalgError::DimensionMismatch {
                expected: self.n,
                got: b.len(),
            });
        }
        let n = self.n;
        let mut z = b.to_vec();
        // Uᵀ z = b, forward.
        for i in 0..n {
            let mut s = z[i];
            for j in i.saturating_sub(self.u_width - 1)..i {
                s -= self.u(j, i) * z[j];
            }
            z[i] = s / self.u(i, i);
        }
        // Undo the Gauss transforms and interchanges in reverse order.
        for k in (0..n).rev() {
            let mut s = z[k];
            for r in 1..=self.lower_bw.min(n - 1 - k) {
                s -= self.mult(k, r) * z[k + r];
            }
            z[k] = s;
            let p = self.pivots[k];
            if p != k {
                z.swap(k, p);
            }
        }
        Ok(z)
    }
}

/// Banded LU with partial pivoting restricted to the band.
pub fn banded_lu_factor(a: &BandedMatrix, pivot_tol: f64) -> Result<BandedFactorization> {
    if !(pivot_tol > 0.0) {
        return Err(LinalgError::InvalidTolerance(pivot_tol));
    }
    let n = a.n;
    let kl = a.lower_bw;
    let ku = a.upper_bw;
    // Working rows cover columns i - kl ..= i + kl + ku.
    let ww = 2 * kl + ku + 1;
    let mut work = vec![0.0; n * ww];
    let at = |i: usize, j: usize| i * ww + j + kl - i;
    for i in 0..n {
        for j in a.col_range(i) {
            work[at(i, j)] = a.get(i, j);
        }
    }
    let mut multipliers = vec![0.0; n * kl];
    let mut pivots = vec![0usize; n];
    let mut min_pivot = f64::INFINITY;

    for k in 0..n {
        let last_row = (k + kl).min(n - 1);
        let last_col = (k + kl + ku).min(n - 1);
        let mut p = k;
        let mut best = work[at(k, k)].abs();
        for i in (k + 1)..=last_row {
            let v = work[at(i, k)].abs();
            if v > best {
                best = v;
                p = i;
            }
        }
        pivots[k] = p;
        min_pivot = min_pivot.min(best);
        if best < pivot_tol || !best.is_finite() {
            return Err(LinalgError::Singular {
                column: k,
                pivot: best,
                tolerance: pivot_tol,
            });
        }
        if p != k {
            for j in k..=last_col {
                work.swap(at(k, j), at(p, j));
            }
        }
        let pivot = work[at(k, k)];
        for i in (k + 1)..=last_row {
            let m = work[at(i, k)] / pivot;
            multipliers[k * kl + (i - k) - 1] = m;
            work[at(i, k)] = 0.0;
            if m != 0.0 {
                for j in (k + 1)..=last_col {
                    let ukj = work[at(k, j)];
                    work[at(i, j)] -= m * ukj;
                }
            }
        }
    }

    let u_width = kl + ku + 1;
    let mut upper = vec![0.0; n * u_width];
    for i in 0..n {
        for d in 0..u_width {
            let j = i + d;
            if j < n {
                upper[i * u_width + d] = work[at(i, j)];
            }
        }
    }
    Ok(BandedFactorization {
        n,
        lower_bw: kl,
        u_width,
        upper,
        multipliers,
        pivots,
        min_pivot,
    })
}

pub fn banded_solve(f: &BandedFactorization, b: &[f64]) -> Result<Vec<f64>> {
    f.solve(b)
}

pub fn banded_solve_transpose(f: &BandedFactorization, b: &[f64]) -> Result<Vec<f64>> {
    f.solve_transpose(b)
}

/// Dense LU with partial pivoting (`P A = L U`).
#[derive(Debug, Clone)]
pub struct DenseLu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    min_pivot: f64,
}

impl DenseLu {
    pub fn factor(a: &DenseMatrix, pivot_tol: f64) -> Result<Self> {
        if !(pivot_tol > 0.0) {
            return Err(LinalgError::InvalidTolerance(pivot_tol));
        }
        if a.rows() == 0 {
            return Err(LinalgError::EmptyMatrix);
        }
        if a.rows() != a.cols() {
            return Err(LinalgError::DimensionMismatch {
                expected: a.rows(),
                got: a.cols(),
            });
        }
        let n = a.rows();
        let mut lu = a.as_slice().to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut min_pivot = f64::INFINITY;
        for k in 0..n {
            let (p, best) = (k..n)
                .map(|i| (i, lu[i * n + k].abs()))
                .fold((k, -1.0), |acc, c| if c.1 > acc.1 { c } else { acc });
            min_pivot = min_pivot.min(best);
            if best < pivot_tol || !best.is_finite() {
                return Err(LinalgError::Singular {
                    column: k,
                    pivot: best,
                    tolerance: pivot_tol,
                });
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let pivot = lu[k * n + k];
            for i in (k + 1)..n {
                let m = lu[i * n + k] / pivot;
                lu[i * n + k] = m;
                if m != 0.0 {
                    for j in (k + 1)..n {
                        lu[i * n + j] -= m * lu[k * n + j];
                    }
                }
            }
        }
        Ok(Self {
            n,
            lu,
            perm,
            min_pivot,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn min_pivot(&self) -> f64 {
        self.min_pivot
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.n;
        if b.len() != n {
            return Err(LinalgError::DimensionMismatch {
                expected: n,
                got: b.len(),
            });
        }
        let mut y: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let s: f64 = (0..i).map(|j| self.lu[i * n + j] * y[j]).sum();
            y[i] -= s;
        }
        for i in (0..n).rev() {
            let s: f64 = ((i + 1)..n).map(|j| self.lu[i * n + j] * y[j]).sum();
            y[i] = (y[i] - s) / self.lu[i * n + i];
        }
        Ok(y)
    }

    pub fn solve_transpose(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.n;
        if b.len() != n {
            return Err(LinalgError::DimensionMismatch {
                expected: n,
                got: b.len(),
            });
        }
        // Aᵀ = Uᵀ Lᵀ P, so solve Uᵀ w = b, Lᵀ v = w, x = Pᵀ v.
        let mut w = b.to_vec();
        for i in 0..n {
            let s: f64 = (0..i).map(|j| self.lu[j * n + i] * w[j]).sum();
            w[i] = (w[i] - s) / self.lu[i * n + i];
        }
        for i in (0..n).rev() {
            let s: f64 = ((i + 1)..n).map(|j| self.lu[j * n + i] * w[j]).sum();
            w[i] -= s;
        }
        let mut x = vec![0.0; n];
        for (k, &p) in self.perm.iter().enumerate() {
            x[p] = w[k];
        }
        Ok(x)
    }

    pub fn inverse(&self) -> DenseMatrix {
        let n = self.n;
        let mut inv = DenseMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let col = self.solve(&e).expect("dimension checked");
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
            e[j] = 0.0;
        }
        inv
    }
}

/// Rank estimate from Householder QR with column pivoting: the number of
/// `|R_kk|` above `tol · |R_00|`.
pub fn numerical_rank(a: &DenseMatrix, tol: f64) -> Result<usize> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(LinalgError::EmptyMatrix);
    }
    if !(tol > 0.0) {
        return Err(LinalgError::InvalidTolerance(tol));
    }
    let (m, n) = (a.rows(), a.cols());
    // Column-major copy keeps column operations contiguous.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let steps = m.min(n);
    let mut diag = Vec::with_capacity(steps);
    for k in 0..steps {
        let (p, _) = (k..n)
            .map(|j| (j, cols[j][k..].iter().map(|v| v * v).sum::<f64>()))
            .fold((k, -1.0), |acc, c| if c.1 > acc.1 { c } else { acc });
        cols.swap(k, p);
        let norm = cols[k][k..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            diag.push(0.0);
            break;
        }
        let alpha = if cols[k][k] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = cols[k][k..].to_vec();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        diag.push(alpha.abs());
        if vnorm2 == 0.0 {
            continue;
        }
        for col in cols.iter_mut().skip(k + 1) {
            let dot: f64 = v.iter().zip(&col[k..]).map(|(a, b)| a * b).sum();
            let s = 2.0 * dot / vnorm2;
            for (c, vi) in col[k..].iter_mut().zip(&v) {
                *c -= s * vi;
            }
        }
    }
    let largest = diag.first().copied().unwrap_or(0.0);
    if largest == 0.0 {
        return Ok(0);
    }
    Ok(diag.iter().filter(|d| **d > tol * largest).count())
}

pub fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tridiag_221() -> BandedMatrix {
        let d = DenseMatrix::from_rows(&[
            vec![2.0, 1.0, 0.0],
            vec![1.0, 2.0, 1.0],
            vec![0.0, 1.0, 2.0],
        ]);
        BandedMatrix::from_dense(&d, 1, 1).unwrap()
    }

    /// Plain Gaussian elimination on a dense copy, used as the reference path.
    fn dense_gauss_solve(a: &DenseMatrix, b: &[f64]) -> Vec<f64> {
        let n = a.rows();
        let mut m: Vec<Vec<f64>> = a.to_rows();
        let mut x = b.to_vec();
        for k in 0..n {
            let p = (k..n)
                .max_by(|&i, &j| m[i][k].abs().partial_cmp(&m[j][k].abs()).unwrap())
                .unwrap();
            m.swap(k, p);
            x.swap(k, p);
            for i in (k + 1)..n {
                let f = m[i][k] / m[k][k];
                for j in k..n {
                    m[i][j] -= f * m[k][j];
                }
                x[i] -= f * x[k];
            }
        }
        for i in (0..n).rev() {
            let s: f64 = ((i + 1)..n).map(|j| m[i][j] * x[j]).sum();
            x[i] = (x[i] - s) / m[i][i];
        }
        x
    }

    #[test]
    fn identity_factorization_has_unit_pivots() {
        let id = BandedMatrix::from_dense(&DenseMatrix::identity(3), 1, 1).unwrap();
        let f = banded_lu_factor(&id, 1e-10).unwrap();
        assert_eq!(f.min_pivot(), 1.0);
        let b = [3.0, -1.5, 7.25];
        assert_eq!(banded_solve(&f, &b).unwrap(), b.to_vec());
        assert_eq!(banded_solve_transpose(&f, &b).unwrap(), b.to_vec());
    }

    #[test]
    fn tridiagonal_solve_matches_elimination() {
        let a = tridiag_221();
        let oracle = dense_gauss_solve(&a.to_dense(), &[1.0, 0.0, 0.0]);
        assert_relative_eq!(oracle[0], 0.75, epsilon = 1e-15);
        assert_relative_eq!(oracle[1], -0.5, epsilon = 1e-15);
        assert_relative_eq!(oracle[2], 0.25, epsilon = 1e-15);

        let f = banded_lu_factor(&a, a.default_pivot_tol()).unwrap();
        let x = banded_solve(&f, &[1.0, 0.0, 0.0]).unwrap();
        for (xi, oi) in x.iter().zip(&oracle) {
            assert_relative_eq!(xi, oi, epsilon = 1e-14);
        }
        // symmetric, so the transpose solve agrees
        let xt = banded_solve_transpose(&f, &[1.0, 0.0, 0.0]).unwrap();
        for (xi, oi) in xt.iter().zip(&oracle) {
            assert_relative_eq!(xi, oi, epsilon = 1e-14);
        }
    }

    #[test]
    fn rank_one_is_singular() {
        let d = DenseMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        let a = BandedMatrix::from_dense(&d, 1, 1).unwrap();
        let err = banded_lu_factor(&a, a.default_pivot_tol()).unwrap_err();
        assert!(matches!(err, LinalgError::Singular { column: 1, .. }));
    }

    #[test]
    fn transpose_solve_nonsymmetric() {
        let d = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]);
        let oracle = dense_gauss_solve(&d.transpose(), &[1.0, 1.0]);
        assert_relative_eq!(oracle[0], 1.0);
        assert_relative_eq!(oracle[1], -1.0);
        let a = BandedMatrix::from_dense(&d, 1, 1).unwrap();
        let f = banded_lu_factor(&a, 1e-12).unwrap();
        let x = banded_solve_transpose(&f, &[1.0, 1.0]).unwrap();
        assert_relative_eq!(x[0], 1.0, epsilon = 1e-15);
        assert_relative_eq!(x[1], -1.0, epsilon = 1e-15);
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let f = banded_lu_factor(&tridiag_221(), 1e-10).unwrap();
        assert_eq!(banded_solve(&f, &[0.0; 3]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn pivoting_inside_band() {
        // Zero leading entry forces an interchange within the band.
        let d = DenseMatrix::from_rows(&[
            vec![0.0, 1.0, 0.0, 0.0],
            vec![2.0, 1.0, 3.0, 0.0],
            vec![0.0, 4.0, 1.0, 1.0],
            vec![0.0, 0.0, 1.0, 5.0],
        ]);
        let a = BandedMatrix::from_dense(&d, 1, 1).unwrap();
        let f = banded_lu_factor(&a, 1e-12).unwrap();
        assert_eq!(f.pivots()[0], 1);
        let b = [1.0, 2.0, 3.0, 4.0];
        let x = banded_solve(&f, &b).unwrap();
        let oracle = dense_gauss_solve(&d, &b);
        for (xi, oi) in x.iter().zip(&oracle) {
            assert_relative_eq!(xi, oi, epsilon = 1e-13);
        }
        let xt = banded_solve_transpose(&f, &b).unwrap();
        let oracle_t = dense_gauss_solve(&d.transpose(), &b);
        for (xi, oi) in xt.iter().zip(&oracle_t) {
            assert_relative_eq!(xi, oi, epsilon = 1e-13);
        }
    }

    #[test]
    fn invalid_tolerance_rejected() {
        assert!(matches!(
            banded_lu_factor(&tridiag_221(), 0.0),
            Err(LinalgError::InvalidTolerance(_))
        ));
    }

    #[test]
    fn dense_lu_round_trip() {
        let a = DenseMatrix::from_rows(&[
            vec![4.0, -2.0, 1.0],
            vec![3.0, 6.0, -4.0],
            vec![2.0, 1.0, 8.0],
        ]);
        let lu = a.lu(1e-12).unwrap();
        let b = [1.0, -2.0, 0.5];
        let x = lu.solve(&b).unwrap();
        let back = a.mul_vec(&x);
        for (l, r) in back.iter().zip(&b) {
            assert_relative_eq!(l, r, epsilon = 1e-13);
        }
        let xt = lu.solve_transpose(&b).unwrap();
        let back_t = a.tr_mul_vec(&xt);
        for (l, r) in back_t.iter().zip(&b) {
            assert_relative_eq!(l, r, epsilon = 1e-13);
        }
        let prod = a.mul(&lu.inverse());
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((prod[(i, j)] - e).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn rank_examples() {
        assert_eq!(numerical_rank(&DenseMatrix::identity(4), 1e-10).unwrap(), 4);
        let prop = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]);
        assert_eq!(numerical_rank(&prop, 1e-10).unwrap(), 1);
        assert_eq!(
            numerical_rank(&DenseMatrix::zeros(0, 3), 1e-10),
            Err(LinalgError::EmptyMatrix)
        );
        assert_eq!(numerical_rank(&DenseMatrix::zeros(2, 2), 1e-10).unwrap(), 0);
    }

    #[test]
    fn rank_of_orthogonal_columns() {
        // Columns taken from a Householder reflector I - 2vvᵀ/‖v‖², which is orthogonal.
        let v = [1.0, -2.0, 0.5, 3.0, 1.5];
        let vv: f64 = v.iter().map(|x| x * x).sum();
        let mut q = DenseMatrix::zeros(5, 3);
        for i in 0..5 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                q[(i, j)] = e - 2.0 * v[i] * v[j] / vv;
            }
        }
        let qtq = q.transpose().mul(&q);
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((qtq[(i, j)] - e).abs() < 1e-14);
            }
        }
        assert_eq!(numerical_rank(&q, 1e-10).unwrap(), 3);
    }
}
