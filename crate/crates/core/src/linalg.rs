//! Dense linear algebra for small matrices.
//!
//! Everything here is sized for latent dimensions (d ≤ 64) and MLP layers of a
//! few hundred units; there is no blocking or SIMD beyond what the compiler
//! finds in the inner loops.

use std::fmt;
use std::ops::{Deref, Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{domain_err, shape_err, Error, Result};

/// Relative asymmetry tolerated by routines that require a symmetric input.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Eigenvalues above `-PSD_CLAMP` are treated as round-off and clamped to zero.
pub const PSD_CLAMP: f64 = 1e-10;
const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_OFF_TOL: f64 = 1e-12;

/// A dense vector of finite reals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return domain_err(format!("non-finite vector entry at index {i}"));
        }
        Ok(Self(data))
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    /// `scale` times the `i`-th standard basis vector of length `n`.
    pub fn basis(n: usize, i: usize, scale: f64) -> Self {
        let mut v = vec![0.0; n];
        v[i] = scale;
        Self(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn l2_norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        Vector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn add(&self, other: &Vector) -> Vector {
        Vector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn scale(&self, s: f64) -> Vector {
        Vector(self.0.iter().map(|a| a * s).collect())
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Row-major dense matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::from_vec(raw.rows, raw.cols, raw.data)
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return shape_err(format!("{rows}x{cols} matrix needs {} entries, got {}", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("ragged rows");
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.same_shape(other)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    /// `self += s * other`, shapes assumed equal.
    pub fn axpy(&mut self, s: f64, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn trace(&self) -> f64 {
        self.diagonal().iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        l2_norm(&self.data)
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if !self.is_square() {
            return false;
        }
        for i in 0..self.rows {
            for j in i + 1..self.cols {
                let (a, b) = (self[(i, j)], self[(j, i)]);
                if (a - b).abs() > tol * a.abs().max(1.0) {
                    return false;
                }
            }
        }
        true
    }

    fn same_shape(&self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return shape_err(format!("{:?} vs {:?}", self.shape(), other.shape()));
        }
        Ok(())
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return shape_err(format!("{}x{} matrix times vector of length {}", self.rows, self.cols, v.len()));
        }
        Ok((0..self.rows).map(|r| self.row(r).iter().zip(v).map(|(a, b)| a * b).sum()).collect())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return shape_err(format!("matmul {}x{} by {}x{}", a.rows, a.cols, b.rows, b.cols));
    }
    Ok(matmul_unchecked(a, b))
}

pub(crate) fn matmul_unchecked(a: &Matrix, b: &Matrix) -> Matrix {
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(n, m);
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out.data[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `aᵀ · b` without materialising the transpose.
pub(crate) fn matmul_tn(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.rows, b.rows);
    let (k, n, m) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(n, m);
    for p in 0..k {
        let arow = &a.data[p * n..(p + 1) * n];
        let brow = &b.data[p * m..(p + 1) * m];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a · bᵀ` without materialising the transpose.
pub(crate) fn matmul_nt(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.cols, b.cols);
    let (n, k, m) = (a.rows, a.cols, b.rows);
    let mut out = Matrix::zeros(n, m);
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b.data[j * k..(j + 1) * k];
            out.data[i * m + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    m.frobenius_norm()
}

/// Eigendecomposition of a symmetric matrix.
///
/// Eigenvalues are sorted in descending order; ties keep the order in which
/// the Jacobi iteration left them on the diagonal (i.e. original index order).
/// `eigenvectors` holds the eigenvectors as columns.
#[derive(Clone, Debug)]
pub struct SymEig {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

impl SymEig {
    /// `Q diag(f(λ)) Qᵀ`.
    pub fn synthesize(&self, f: impl Fn(usize, f64) -> f64) -> Matrix {
        let n = self.eigenvalues.len();
        let q = &self.eigenvectors;
        let w: Vec<f64> = self.eigenvalues.iter().enumerate().map(|(i, &l)| f(i, l)).collect();
        let mut out = Matrix::zeros(n, n);
        for r in 0..n {
            for c in r..n {
                let v: f64 = (0..n).map(|k| q[(r, k)] * w[k] * q[(c, k)]).sum();
                out[(r, c)] = v;
                out[(c, r)] = v;
            }
        }
        out
    }
}

pub fn sym_eig(m: &Matrix) -> Result<SymEig> {
    if !m.is_square() {
        return domain_err(format!("sym_eig needs a square matrix, got {}x{}", m.rows, m.cols));
    }
    if !m.is_symmetric(SYMMETRY_TOL) {
        return domain_err("sym_eig input is not symmetric");
    }
    if !m.is_finite() {
        return domain_err("sym_eig input has non-finite entries");
    }
    let n = m.rows;
    let mut a = m.clone();
    for i in 0..n {
        for j in i + 1..n {
            let avg = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = avg;
            a[(j, i)] = avg;
        }
    }
    let mut q = Matrix::identity(n);
    let tol = JACOBI_OFF_TOL * m.frobenius_norm().max(1.0);
    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if off_diagonal_norm(&a) <= tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for r in p + 1..n {
                jacobi_rotate(&mut a, &mut q, p, r);
            }
        }
    }
    if !converged && off_diagonal_norm(&a) > tol {
        return Err(Error::Numerical(format!("Jacobi eigensolver did not converge in {JACOBI_MAX_SWEEPS} sweeps")));
    }

    let mut order: Vec<usize> = (0..n).collect();
    // stable sort: equal eigenvalues stay in index order
    order.sort_by(|&i, &j| a[(j, j)].partial_cmp(&a[(i, i)]).unwrap_or(std::cmp::Ordering::Equal));
    let eigenvalues = order.iter().map(|&i| a[(i, i)]).collect();
    let mut eigenvectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for r in 0..n {
            eigenvectors[(r, dst)] = q[(r, src)];
        }
    }
    Ok(SymEig { eigenvalues, eigenvectors })
}

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.rows;
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[(i, j)] * a[(i, j)];
            }
        }
    }
    s.sqrt()
}

/// One two-sided rotation zeroing `a[p, r]`, accumulated into `q`.
fn jacobi_rotate(a: &mut Matrix, q: &mut Matrix, p: usize, r: usize) {
    let apr = a[(p, r)];
    if apr == 0.0 {
        return;
    }
    let n = a.rows;
    let theta = (a[(r, r)] - a[(p, p)]) / (2.0 * apr);
    let t = if theta >= 0.0 {
        1.0 / (theta + (1.0 + theta * theta).sqrt())
    } else {
        -1.0 / (-theta + (1.0 + theta * theta).sqrt())
    };
    let c = 1.0 / (1.0 + t * t).sqrt();
    let s = t * c;
    for k in 0..n {
        let akp = a[(k, p)];
        let akr = a[(k, r)];
        a[(k, p)] = c * akp - s * akr;
        a[(k, r)] = s * akp + c * akr;
    }
    for k in 0..n {
        let apk = a[(p, k)];
        let ark = a[(r, k)];
        a[(p, k)] = c * apk - s * ark;
        a[(r, k)] = s * apk + c * ark;
    }
    a[(p, r)] = 0.0;
    a[(r, p)] = 0.0;
    for k in 0..n {
        let qkp = q[(k, p)];
        let qkr = q[(k, r)];
        q[(k, p)] = c * qkp - s * qkr;
        q[(k, r)] = s * qkp + c * qkr;
    }
}

/// Symmetric PSD square root.
pub fn psd_sqrt(m: &Matrix) -> Result<Matrix> {
    let eig = sym_eig(m)?;
    let min = eig.eigenvalues.last().copied().unwrap_or(0.0);
    if min < -PSD_CLAMP {
        return Err(Error::NotPsd(min));
    }
    Ok(eig.synthesize(|_, l| l.max(0.0).sqrt()))
}

/// Inverse and log-determinant of a symmetric positive definite matrix.
pub fn spd_inverse_logdet(m: &Matrix) -> Result<(Matrix, f64)> {
    let eig = sym_eig(m)?;
    let max = eig.eigenvalues.first().copied().unwrap_or(0.0);
    let min = eig.eigenvalues.last().copied().unwrap_or(0.0);
    if min <= 1e-12 * max.abs().max(f64::MIN_POSITIVE) || min <= 0.0 {
        return domain_err(format!("matrix is not positive definite (min eigenvalue {min:e})"));
    }
    let logdet = eig.eigenvalues.iter().map(|l| l.ln()).sum();
    Ok((eig.synthesize(|_, l| 1.0 / l), logdet))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let b = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &b).unwrap(), b);
        assert_eq!(matmul(&m(&[&[1.0, 2.0]]), &m(&[&[3.0], &[4.0]])).unwrap(), m(&[&[11.0]]));
        let a = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn transposed_products_agree() {
        let a = m(&[&[1.0, -2.0, 0.5], &[3.0, 0.0, 1.0]]);
        let b = m(&[&[2.0, 1.0], &[0.0, -1.0]]);
        assert_eq!(matmul_tn(&b, &a), matmul(&b.transpose(), &a).unwrap());
        let c = m(&[&[1.0, 1.0, 1.0], &[0.0, 2.0, -1.0], &[4.0, 0.0, 0.0]]);
        assert_eq!(matmul_nt(&a, &c), matmul(&a, &c.transpose()).unwrap());
    }

    #[test]
    fn eig_of_diagonal() {
        let e = sym_eig(&Matrix::diag(&[3.0, 1.0])).unwrap();
        assert_eq!(e.eigenvalues, vec![3.0, 1.0]);
        assert_eq!(e.eigenvectors, Matrix::identity(2));
        // reversed diagonal gets permuted columns
        let e = sym_eig(&Matrix::diag(&[1.0, 3.0])).unwrap();
        assert_eq!(e.eigenvalues, vec![3.0, 1.0]);
        assert_eq!(e.eigenvectors, m(&[&[0.0, 1.0], &[1.0, 0.0]]));
    }

    #[test]
    fn eig_two_by_two() {
        let e = sym_eig(&m(&[&[2.0, 1.0], &[1.0, 2.0]])).unwrap();
        assert!((e.eigenvalues[0] - 3.0).abs() < 1e-12);
        assert!((e.eigenvalues[1] - 1.0).abs() < 1e-12);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let v0 = e.eigenvectors.col(0);
        let v1 = e.eigenvectors.col(1);
        assert!((v0[0].abs() - s).abs() < 1e-12 && (v0[0] - v0[1]).abs() < 1e-12);
        assert!((v1[0].abs() - s).abs() < 1e-12 && (v1[0] + v1[1]).abs() < 1e-12);
    }

    #[test]
    fn eig_tie_is_stable() {
        let e = sym_eig(&Matrix::identity(2)).unwrap();
        assert_eq!(e.eigenvalues, vec![1.0, 1.0]);
        assert_eq!(e.eigenvectors, Matrix::identity(2));
    }

    #[test]
    fn eig_rejects_bad_input() {
        assert!(matches!(sym_eig(&Matrix::zeros(2, 3)), Err(Error::Domain(_))));
        assert!(matches!(sym_eig(&m(&[&[1.0, 2.0], &[0.0, 1.0]])), Err(Error::Domain(_))));
    }

    #[test]
    fn psd_sqrt_examples() {
        assert_eq!(psd_sqrt(&Matrix::identity(3)).unwrap(), Matrix::identity(3));
        let r = psd_sqrt(&Matrix::diag(&[4.0, 9.0])).unwrap();
        assert!(r.max_abs_diff(&Matrix::diag(&[2.0, 3.0])) < 1e-14);
        assert!(matches!(psd_sqrt(&m(&[&[0.0, 1.0], &[1.0, 0.0]])), Err(Error::NotPsd(_))));
    }

    #[test]
    fn norms() {
        assert_eq!(Vector::new(vec![3.0, 4.0]).unwrap().l2_norm(), 5.0);
        assert_eq!(frobenius_norm(&Matrix::zeros(2, 2)), 0.0);
        assert!((frobenius_norm(&Matrix::identity(2)) - 2f64.sqrt()).abs() < 1e-15);
        assert!(Vector::new(vec![1.0, f64::NAN]).is_err());
    }

    fn random_symmetric() -> impl Strategy<Value = Matrix> {
        (1usize..=8).prop_flat_map(|n| {
            prop::collection::vec(-5.0f64..5.0, n * n).prop_map(move |v| {
                let mut a = Matrix::from_vec(n, n, v).unwrap();
                for i in 0..n {
                    for j in 0..i {
                        a[(i, j)] = a[(j, i)];
                    }
                }
                a
            })
        })
    }

    proptest! {
        #[test]
        fn eig_reconstructs(a in random_symmetric()) {
            let e = sym_eig(&a).unwrap();
            let n = a.rows();
            let q = &e.eigenvectors;
            let qtq = matmul(&q.transpose(), q).unwrap();
            prop_assert!(qtq.sub(&Matrix::identity(n)).unwrap().frobenius_norm() <= 1e-8);
            let rec = e.synthesize(|_, l| l);
            prop_assert!(rec.sub(&a).unwrap().frobenius_norm() <= 1e-8 * a.frobenius_norm().max(1.0));
            prop_assert!((e.eigenvalues.iter().sum::<f64>() - a.trace()).abs() <= 1e-9 * a.frobenius_norm().max(1.0));
            prop_assert!(e.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        }

        #[test]
        fn sqrt_squares_back(b in (1usize..=6).prop_flat_map(|n| prop::collection::vec(-2.0f64..2.0, n * n)
            .prop_map(move |v| Matrix::from_vec(n, n, v).unwrap()))) {
            let psd = matmul(&b.transpose(), &b).unwrap();
            let r = psd_sqrt(&psd).unwrap();
            let sq = matmul(&r, &r).unwrap();
            prop_assert!(sq.sub(&psd).unwrap().frobenius_norm() <= 1e-8 * psd.frobenius_norm().max(1.0));
        }
    }
}
