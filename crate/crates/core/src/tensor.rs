//! Dense vector/matrix kernels and the seeded PRNG everything else computes with.
//!
//! The workloads here are tiny (K <= 16 classes, D <= 64 latent dimensions), so
//! the Cholesky factorization is the plain unblocked algorithm and there is no
//! BLAS surface. The PRNG is SplitMix64 with Box-Muller normal draws; the same
//! seed yields the same stream on every platform because only integer ops and
//! IEEE-754 double arithmetic are involved.

use std::io::Write;
use std::sync::OnceLock;

use crate::error::{Error, Result};

/// Dense column of f64 values. Non-empty, all entries finite.
#[derive(Clone, Debug, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Invalid("vector must be non-empty".into()));
        }
        if let Some(ix) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("vector entry {ix} is not finite")));
        }
        Ok(Self { data })
    }

    pub fn zeros(n: usize) -> Self {
        Self { data: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm2(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// self += w * other
    pub fn add_scaled(&mut self, other: &Vector, w: f64) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += w * b;
        }
    }

    pub fn scale(&mut self, w: f64) {
        for a in self.data.iter_mut() {
            *a *= w;
        }
    }

    /// Debugging dump: the vector as one CSV line, '.' decimal, no header.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        let line = self
            .data
            .iter()
            .map(|v| format_f64(*v))
            .collect::<Vec<_>>()
            .join(",");
        writeln!(out, "{line}")?;
        Ok(())
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Invalid("matrix dimensions must be positive".into()));
        }
        if data.len() != rows * cols {
            return Err(Error::DimMismatch(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(ix) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("matrix entry {ix} is not finite")));
        }
        Ok(Self { data, rows, cols })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            data: vec![0.0; rows * cols],
            rows,
            cols,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn add_at(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] += v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// y = A x
    pub fn matvec(&self, x: &Vector) -> Vector {
        debug_assert_eq!(self.cols, x.len());
        let mut y = Vector::zeros(self.rows);
        for r in 0..self.rows {
            let row = self.row(r);
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(x.as_slice()) {
                acc += a * b;
            }
            y[r] = acc;
        }
        y
    }

    /// y = A^T x
    pub fn matvec_transposed(&self, x: &Vector) -> Vector {
        debug_assert_eq!(self.rows, x.len());
        let mut y = Vector::zeros(self.cols);
        for r in 0..self.rows {
            let row = self.row(r);
            let xr = x[r];
            for (c, a) in row.iter().enumerate() {
                y[c] += a * xr;
            }
        }
        y
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                if (self.get(i, j) - self.get(j, i)).abs() > tol {
                    return false;
                }
            }
        }
        true
    }

    /// Debugging dump: one row per line, '.' decimal, no header.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        for r in 0..self.rows {
            let line = self
                .row(r)
                .iter()
                .map(|v| format_f64(*v))
                .collect::<Vec<_>>()
                .join(",");
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

/// 17 significant digits: enough to round-trip any f64 exactly.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Symmetric positive-definite matrix with a lazily computed Cholesky factor.
#[derive(Debug)]
pub struct SpdMatrix {
    base: Matrix,
    chol: OnceLock<Matrix>,
}

impl Clone for SpdMatrix {
    fn clone(&self) -> Self {
        Self {
            base: self.base.clone(),
            chol: OnceLock::new(),
        }
    }
}

impl SpdMatrix {
    /// Wraps a symmetric matrix. Positive definiteness is only established
    /// when the factor is first requested.
    pub fn new(base: Matrix) -> Result<Self> {
        if !base.is_symmetric(1e-12) {
            return Err(Error::Invalid(
                "SPD base matrix must be symmetric within 1e-12".into(),
            ));
        }
        Ok(Self {
            base,
            chol: OnceLock::new(),
        })
    }

    pub fn base(&self) -> &Matrix {
        &self.base
    }

    pub fn dim(&self) -> usize {
        self.base.rows()
    }

    /// Lower-triangular factor L with L L^T = base.
    pub fn chol(&self) -> Result<&Matrix> {
        if let Some(l) = self.chol.get() {
            return Ok(l);
        }
        let l = cholesky(&self.base)?;
        Ok(self.chol.get_or_init(|| l))
    }
}

/// Unblocked Cholesky factorization of a symmetric positive-definite matrix.
/// Returns the lower-triangular L with L L^T = m.
pub fn cholesky(m: &Matrix) -> Result<Matrix> {
    if m.rows() != m.cols() {
        return Err(Error::DimMismatch(format!(
            "cholesky needs a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    let n = m.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = m.get(j, j);
        for k in 0..j {
            let v = l.get(j, k);
            diag -= v * v;
        }
        if diag <= 0.0 || !diag.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j });
        }
        let d = diag.sqrt();
        l.set(j, j, d);
        for i in (j + 1)..n {
            let mut sum = m.get(i, j);
            for k in 0..j {
                sum -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, sum / d);
        }
    }
    Ok(l)
}

/// Forward substitution: solves L x = b for lower-triangular L.
pub fn solve_lower(l: &Matrix, b: &Vector) -> Result<Vector> {
    let n = l.rows();
    if l.cols() != n || b.len() != n {
        return Err(Error::DimMismatch(format!(
            "solve_lower: L is {}x{}, b has length {}",
            l.rows(),
            l.cols(),
            b.len()
        )));
    }
    let mut x = Vector::zeros(n);
    for i in 0..n {
        let d = l.get(i, i);
        if d <= 0.0 {
            return Err(Error::SingularTriangular { row: i });
        }
        let mut sum = b[i];
        for j in 0..i {
            sum -= l.get(i, j) * x[j];
        }
        x[i] = sum / d;
    }
    Ok(x)
}

/// Back substitution: solves L^T x = b for lower-triangular L.
pub fn solve_lower_transposed(l: &Matrix, b: &Vector) -> Result<Vector> {
    let n = l.rows();
    if l.cols() != n || b.len() != n {
        return Err(Error::DimMismatch(format!(
            "solve_lower_transposed: L is {}x{}, b has length {}",
            l.rows(),
            l.cols(),
            b.len()
        )));
    }
    let mut x = Vector::zeros(n);
    for i in (0..n).rev() {
        let d = l.get(i, i);
        if d <= 0.0 {
            return Err(Error::SingularTriangular { row: i });
        }
        let mut sum = b[i];
        for j in (i + 1)..n {
            sum -= l.get(j, i) * x[j];
        }
        x[i] = sum / d;
    }
    Ok(x)
}

/// Solves (L L^T) x = b, i.e. applies the inverse of the factored SPD matrix.
pub fn spd_solve(l: &Matrix, b: &Vector) -> Result<Vector> {
    let w = solve_lower(l, b)?;
    solve_lower_transposed(l, &w)
}

/// log det(L L^T) = 2 * sum_i log L_ii.
pub fn logdet_from_chol(l: &Matrix) -> Result<f64> {
    let n = l.rows();
    let mut acc = 0.0;
    for i in 0..n {
        let d = l.get(i, i);
        if d <= 0.0 {
            return Err(Error::SingularTriangular { row: i });
        }
        acc += d.ln();
    }
    Ok(2.0 * acc)
}

/// SplitMix64 generator with Box-Muller standard-normal draws.
///
/// Normal draws come in Box-Muller pairs; the second value of each pair is
/// cached, so one `next_normal` call consumes either two or zero uniforms.
#[derive(Clone, Debug)]
pub struct Rng {
    state: u64,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            state: seed,
            spare_normal: None,
        }
    }

    /// Child seed for worker `index`; workers use `seed + index` streams.
    pub fn child_seed(seed: u64, index: u64) -> u64 {
        seed.wrapping_add(index)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform in (0, 1]; safe as a log argument.
    fn next_open01(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). Multiply-shift; bias is < 2^-53 for desk-scale n.
    pub fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (((self.next_u64() as u128) * (n as u128)) >> 64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.next_open01();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_below(i + 1);
            xs.swap(i, j);
        }
    }
}

/// n i.i.d. standard-normal draws, deterministic per seed.
pub fn normal_draws(rng: &mut Rng, n: usize) -> Vector {
    let mut v = Vector::zeros(n);
    for i in 0..n {
        v[i] = rng.next_normal();
    }
    v
}
