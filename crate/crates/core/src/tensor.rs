//! Minimal dense linear-algebra kernels.
//!
//! Everything is `f64` and row-major. Summation order is fixed: every
//! reduction runs left-to-right over the contiguous index (column index for
//! matrix rows, element index for vectors), so results are bit-reproducible
//! across runs. No SIMD reassociation, no blocking.
//!
//! Shape mismatches are reported as [`Error::Shape`] with both shapes in the
//! message; none of the kernels silently broadcast.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Dense vector of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Self {
        Vector { data }
    }

    pub fn zeros(len: usize) -> Self {
        Vector {
            data: vec![0.0; len],
        }
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

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    /// True iff every entry is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Euclidean norm, summed left-to-right.
    pub fn norm2(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
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

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Vector { data }
    }
}

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data. `data.len()` must equal
    /// `rows * cols`.
    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "Matrix::from_rows",
                expected: format!("{} entries for {}x{}", rows * cols, rows, cols),
                got: format!("{} entries", data.len()),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
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

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// `m · v`. Each output entry accumulates over columns left-to-right.
pub fn matvec(m: &Matrix, v: &Vector) -> Result<Vector> {
    if m.cols != v.len() {
        return Err(Error::Shape {
            op: "matvec",
            expected: format!("vector of length {} for {}x{} matrix", m.cols, m.rows, m.cols),
            got: format!("vector of length {}", v.len()),
        });
    }
    let mut out = Vector::zeros(m.rows);
    for i in 0..m.rows {
        let row = m.row(i);
        let mut acc = 0.0;
        for j in 0..m.cols {
            acc += row[j] * v[j];
        }
        out[i] = acc;
    }
    Ok(out)
}

/// `mᵀ · v` without materializing the transpose.
///
/// Accumulation runs over rows of `m` in ascending order, which is the same
/// order `matvec(&m.transpose(), v)` uses, so the two agree bit-for-bit.
pub fn transpose_matvec(m: &Matrix, v: &Vector) -> Result<Vector> {
    if m.rows != v.len() {
        return Err(Error::Shape {
            op: "transpose_matvec",
            expected: format!("vector of length {} for {}x{} matrix", m.rows, m.rows, m.cols),
            got: format!("vector of length {}", v.len()),
        });
    }
    let mut out = Vector::zeros(m.cols);
    for i in 0..m.rows {
        let row = m.row(i);
        let vi = v[i];
        for j in 0..m.cols {
            out[j] += row[j] * vi;
        }
    }
    Ok(out)
}

/// Rank-1 outer product `u vᵀ` with shape `(u.len, v.len)`.
pub fn outer(u: &Vector, v: &Vector) -> Matrix {
    let mut out = Matrix::zeros(u.len(), v.len());
    for i in 0..u.len() {
        let ui = u[i];
        for j in 0..v.len() {
            out.data[i * v.len() + j] = ui * v[j];
        }
    }
    out
}

/// Dot product, accumulated left-to-right.
pub fn dot(u: &Vector, v: &Vector) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape {
            op: "dot",
            expected: format!("length {}", u.len()),
            got: format!("length {}", v.len()),
        });
    }
    let mut acc = 0.0;
    for i in 0..u.len() {
        acc += u[i] * v[i];
    }
    Ok(acc)
}

/// `y ← y + alpha · x`.
pub fn axpy(alpha: f64, x: &Vector, y: &mut Vector) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Shape {
            op: "axpy",
            expected: format!("length {}", y.len()),
            got: format!("length {}", x.len()),
        });
    }
    for i in 0..x.len() {
        y[i] += alpha * x[i];
    }
    Ok(())
}

/// Elementwise product `u ⊙ v`.
pub fn hadamard(u: &Vector, v: &Vector) -> Result<Vector> {
    if u.len() != v.len() {
        return Err(Error::Shape {
            op: "hadamard",
            expected: format!("length {}", u.len()),
            got: format!("length {}", v.len()),
        });
    }
    let mut out = Vector::zeros(u.len());
    for i in 0..u.len() {
        out[i] = u[i] * v[i];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vec2(a: f64, b: f64) -> Vector {
        Vector::new(vec![a, b])
    }

    #[test]
    fn matvec_identity() {
        let m = Matrix::identity(2);
        let v = vec2(3.0, 4.0);
        assert_eq!(matvec(&m, &v).unwrap().as_slice(), &[3.0, 4.0]);
    }

    #[test]
    fn matvec_hand_checked_2x2() {
        let m = Matrix::from_rows(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let v = vec2(1.0, 1.0);
        assert_eq!(matvec(&m, &v).unwrap().as_slice(), &[3.0, 7.0]);
    }

    #[test]
    fn matvec_zero_matrix() {
        let m = Matrix::zeros(3, 2);
        let v = vec2(5.0, -1.0);
        assert_eq!(matvec(&m, &v).unwrap().as_slice(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn matvec_shape_error_names_both_shapes() {
        let m = Matrix::zeros(2, 3);
        let v = vec2(1.0, 2.0);
        let err = matvec(&m, &v).unwrap_err().to_string();
        assert!(err.contains("2x3"), "{err}");
        assert!(err.contains("length 2"), "{err}");
    }

    #[test]
    fn outer_basis_vectors() {
        let m = outer(&vec2(1.0, 0.0), &vec2(0.0, 1.0));
        assert_eq!(m.as_slice(), &[0.0, 1.0, 0.0, 0.0]);

        let m = outer(&Vector::new(vec![2.0]), &Vector::new(vec![3.0]));
        assert_eq!(m.as_slice(), &[6.0]);

        let m = outer(&vec2(1.0, 0.0), &vec2(1.0, 0.0));
        assert_eq!(m[(0, 0)], 1.0);
        assert_eq!(m[(0, 1)], 0.0);
        assert_eq!(m[(1, 0)], 0.0);
        assert_eq!(m[(1, 1)], 0.0);
    }

    #[test]
    fn dot_and_hadamard_small_cases() {
        assert_eq!(dot(&vec2(1.0, 2.0), &vec2(3.0, 4.0)).unwrap(), 11.0);
        assert_eq!(
            hadamard(&vec2(1.0, 2.0), &vec2(3.0, 4.0)).unwrap().as_slice(),
            &[3.0, 8.0]
        );
    }

    #[test]
    fn transpose_matvec_small_case() {
        let m = Matrix::from_rows(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let v = vec2(1.0, 0.0);
        assert_eq!(transpose_matvec(&m, &v).unwrap().as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn axpy_accumulates() {
        let x = vec2(1.0, -2.0);
        let mut y = vec2(10.0, 10.0);
        axpy(0.5, &x, &mut y).unwrap();
        assert_eq!(y.as_slice(), &[10.5, 9.0]);
    }

    proptest! {
        /// matvec(mᵀ, v) and transpose_matvec(m, v) share a summation order
        /// and must agree exactly, not just approximately.
        #[test]
        fn transpose_matvec_matches_explicit_transpose(
            rows in 1usize..12, cols in 1usize..12, seed in 0u64..500
        ) {
            let (m, _, u) = random_instance(rows, cols, seed);
            let a = matvec(&m.transpose(), &u).unwrap();
            let b = transpose_matvec(&m, &u).unwrap();
            prop_assert_eq!(a.as_slice(), b.as_slice());
        }

        /// Adjoint identity <u, Mv> = <Mᵀu, v>; this is what the gradient
        /// check ultimately leans on.
        #[test]
        fn adjoint_identity(rows in 1usize..64, cols in 1usize..64, seed in 0u64..500) {
            let (m, v, u) = random_instance(rows, cols, seed);
            let lhs = dot(&u, &matvec(&m, &v).unwrap()).unwrap();
            let rhs = dot(&transpose_matvec(&m, &u).unwrap(), &v).unwrap();
            let scale = 1.0 + lhs.abs().max(rhs.abs());
            prop_assert!((lhs - rhs).abs() / scale < 1e-12);
        }
    }

    /// Deterministic pseudo-random matrix and conforming vectors with
    /// entries in [-1, 1].
    fn random_instance(rows: usize, cols: usize, seed: u64) -> (Matrix, Vector, Vector) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let m = Matrix::from_rows(rows, cols, data).unwrap();
        let v = Vector::new((0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let u = Vector::new((0..rows).map(|_| rng.gen_range(-1.0..1.0)).collect());
        (m, v, u)
    }
}
