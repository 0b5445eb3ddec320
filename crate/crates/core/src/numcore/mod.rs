//! Dense vectors and matrices with the handful of differentiable primitives
//! the post-network and the losses are built from.
//!
//! Every primitive comes as a forward function and a backward rule. The
//! [`Tape`] records primitive applications and replays the backward rules in
//! reverse order; [`gradient_check`] compares analytic gradients against
//! central differences.

mod gradcheck;
mod tape;

pub use gradcheck::gradient_check;
pub use tape::{Gradients, Tape, Var};
pub(crate) use tape::softmax_xent;

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    DimensionMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("degenerate input to {op}: norm {norm:e} is below the zero-norm guard")]
    Degenerate { op: &'static str, norm: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("empty input to {0}")]
    Empty(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("function evaluation failed at probe point: {0}")]
    Evaluation(String),
}

/// A dense real vector with at least one element, all finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector<T = f64> {
    values: Vec<T>,
}

impl<T: Scalar> Vector<T> {
    pub fn new(values: Vec<T>) -> Result<Self, NumError> {
        if values.is_empty() {
            return Err(NumError::Empty("Vector::new"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(NumError::NonFinite("Vector::new"));
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![T::zero(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_inner(self) -> Vec<T> {
        self.values
    }

    pub fn norm(&self) -> T {
        norm(&self.values)
    }

    pub fn dot(&self, other: &Self) -> Result<T, NumError> {
        check_dim("dot", self.dim(), other.dim())?;
        Ok(dot(&self.values, &other.values))
    }
}

impl<T> std::ops::Index<usize> for Vector<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        &self.values[i]
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T = f64> {
    rows: usize,
    cols: usize,
    values: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, values: Vec<T>) -> Result<Self, NumError> {
        if rows == 0 || cols == 0 {
            return Err(NumError::Empty("Matrix::new"));
        }
        check_dim("Matrix::new", rows * cols, values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(NumError::NonFinite("Matrix::new"));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, NumError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            check_dim("Matrix::from_rows", cols, row.len())?;
            values.extend_from_slice(row);
        }
        Self::new(rows.len(), cols, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.values
    }
}

pub(crate) fn check_dim(op: &'static str, expected: usize, got: usize) -> Result<(), NumError> {
    if expected == got {
        Ok(())
    } else {
        Err(NumError::DimensionMismatch { op, expected, got })
    }
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub(crate) fn norm<T: Scalar>(x: &[T]) -> T {
    dot(x, x).sqrt()
}

// Slice kernels shared by the value-level API and the tape.

pub(crate) fn matvec_kernel<T: Scalar>(w: &[T], rows: usize, cols: usize, x: &[T], out: &mut [T]) {
    for (i, o) in out.iter_mut().enumerate().take(rows) {
        *o = dot(&w[i * cols..(i + 1) * cols], x);
    }
}

/// Accumulates `Wᵀg` into `dx` and `g xᵀ` into `dw`.
pub(crate) fn matvec_backward_kernel<T: Scalar>(
    w: &[T],
    cols: usize,
    x: &[T],
    g: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
) {
    if let Some(dx) = dx {
        for (i, &gi) in g.iter().enumerate() {
            if gi == T::zero() {
                continue;
            }
            for (d, &wij) in dx.iter_mut().zip(&w[i * cols..(i + 1) * cols]) {
                *d += wij * gi;
            }
        }
    }
    if let Some(dw) = dw {
        for (i, &gi) in g.iter().enumerate() {
            if gi == T::zero() {
                continue;
            }
            for (d, &xj) in dw[i * cols..(i + 1) * cols].iter_mut().zip(x) {
                *d += gi * xj;
            }
        }
    }
}

/// `y = W x + b`.
pub fn affine<T: Scalar>(
    x: &Vector<T>,
    w: &Matrix<T>,
    b: &Vector<T>,
) -> Result<Vector<T>, NumError> {
    check_dim("affine (W.cols vs x)", w.cols, x.dim())?;
    check_dim("affine (b vs W.rows)", w.rows, b.dim())?;
    let mut out = vec![T::zero(); w.rows];
    matvec_kernel(&w.values, w.rows, w.cols, x.as_slice(), &mut out);
    for (o, &bi) in out.iter_mut().zip(b.as_slice()) {
        *o += bi;
    }
    Ok(Vector { values: out })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineGrads<T> {
    pub dx: Vector<T>,
    pub dw: Matrix<T>,
    pub db: Vector<T>,
}

/// Backward rule of [`affine`] for upstream gradient `g = dL/dy`.
pub fn affine_backward<T: Scalar>(
    x: &Vector<T>,
    w: &Matrix<T>,
    g: &Vector<T>,
) -> Result<AffineGrads<T>, NumError> {
    check_dim("affine_backward (x)", w.cols, x.dim())?;
    check_dim("affine_backward (g)", w.rows, g.dim())?;
    let mut dx = Vector::zeros(w.cols);
    let mut dw = Matrix::zeros(w.rows, w.cols);
    matvec_backward_kernel(
        &w.values,
        w.cols,
        x.as_slice(),
        g.as_slice(),
        Some(dx.as_mut_slice()),
        Some(dw.as_mut_slice()),
    );
    Ok(AffineGrads {
        dx,
        dw,
        db: g.clone(),
    })
}

pub fn relu<T: Scalar>(x: &Vector<T>) -> Vector<T> {
    Vector {
        values: x.values.iter().map(|&v| v.max(T::zero())).collect(),
    }
}

/// Gradient passes where `x > 0`; zero elsewhere, including at exactly 0.
pub fn relu_backward<T: Scalar>(x: &Vector<T>, g: &Vector<T>) -> Result<Vector<T>, NumError> {
    check_dim("relu_backward", x.dim(), g.dim())?;
    Ok(Vector {
        values: x
            .values
            .iter()
            .zip(&g.values)
            .map(|(&xi, &gi)| if xi > T::zero() { gi } else { T::zero() })
            .collect(),
    })
}

pub fn l2_normalize<T: Scalar>(x: &Vector<T>) -> Result<Vector<T>, NumError> {
    let n = x.norm();
    if !(n > T::eps_norm()) {
        return Err(NumError::Degenerate {
            op: "l2_normalize",
            norm: n.to_f64_lossy(),
        });
    }
    Ok(Vector {
        values: x.values.iter().map(|&v| v / n).collect(),
    })
}

/// Backward rule of [`l2_normalize`]: `(I − y yᵀ) g / ‖x‖`.
pub fn l2_normalize_backward<T: Scalar>(
    x: &Vector<T>,
    g: &Vector<T>,
) -> Result<Vector<T>, NumError> {
    check_dim("l2_normalize_backward", x.dim(), g.dim())?;
    let y = l2_normalize(x)?;
    let n = x.norm();
    let mut out = vec![T::zero(); x.dim()];
    normalize_backward_kernel(y.as_slice(), n, g.as_slice(), &mut out);
    Ok(Vector { values: out })
}

pub(crate) fn normalize_backward_kernel<T: Scalar>(y: &[T], norm: T, g: &[T], out: &mut [T]) {
    let yg = dot(y, g);
    for ((o, &yi), &gi) in out.iter_mut().zip(y).zip(g) {
        *o += (gi - yi * yg) / norm;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> Vector {
        Vector::new(x.to_vec()).unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn affine_identity_and_forced_values() {
        let w = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(affine(&v(&[1.0, 2.0]), &w, &v(&[0.0, 0.0])).unwrap(), v(&[1.0, 2.0]));
        let w = Matrix::from_rows(&[vec![2.0, 3.0]]).unwrap();
        assert_eq!(affine(&v(&[1.0, 1.0]), &w, &v(&[-5.0])).unwrap(), v(&[0.0]));
    }

    #[test]
    fn affine_rejects_bad_shapes() {
        let w = Matrix::<f64>::zeros(2, 3);
        assert!(matches!(
            affine(&v(&[1.0, 2.0]), &w, &v(&[0.0, 0.0])),
            Err(NumError::DimensionMismatch { .. })
        ));
        assert!(affine(&v(&[1.0, 2.0, 3.0]), &w, &v(&[0.0])).is_err());
    }

    #[test]
    fn affine_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = v(&random_vec(&mut rng, 8));
        let w = Matrix::new(4, 8, random_vec(&mut rng, 32)).unwrap();
        let b = v(&random_vec(&mut rng, 4));
        // L = c · affine(x, W, b) for a fixed random c.
        let c = v(&random_vec(&mut rng, 4));
        let loss = |x: &Vector, w: &Matrix, b: &Vector| affine(x, w, b).unwrap().dot(&c).unwrap();
        let grads = affine_backward(&x, &w, &c).unwrap();
        let h = 1e-5;
        let rel = |a: f64, n: f64| (a - n).abs() / 1f64.max(a.abs()).max(n.abs());
        for j in 0..8 {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.as_mut_slice()[j] += h;
            xm.as_mut_slice()[j] -= h;
            let fd = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * h);
            assert!(rel(grads.dx[j], fd) < 1e-6);
        }
        for k in 0..32 {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp.as_mut_slice()[k] += h;
            wm.as_mut_slice()[k] -= h;
            let fd = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * h);
            assert!(rel(grads.dw.as_slice()[k], fd) < 1e-6);
        }
        for i in 0..4 {
            let (mut bp, mut bm) = (b.clone(), b.clone());
            bp.as_mut_slice()[i] += h;
            bm.as_mut_slice()[i] -= h;
            let fd = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * h);
            assert!(rel(grads.db[i], fd) < 1e-6);
        }
    }

    #[test]
    fn relu_values_and_subgradient_at_zero() {
        assert_eq!(relu(&v(&[-1.0, 0.0, 2.0])), v(&[0.0, 0.0, 2.0]));
        assert_eq!(relu(&v(&[0.5, 3.0])), v(&[0.5, 3.0]));
        let g = relu_backward(&v(&[-1.0, 0.0, 2.0]), &v(&[5.0, 5.0, 5.0])).unwrap();
        assert_eq!(g, v(&[0.0, 0.0, 5.0]));
    }

    #[test]
    fn relu_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = random_vec(&mut rng, 12)
            .into_iter()
            .map(|v| if v.abs() < 1e-3 { 0.5 } else { v })
            .collect();
        let c = random_vec(&mut rng, 12);
        let x = v(&x);
        let g = relu_backward(&x, &v(&c)).unwrap();
        let h = 1e-5;
        for j in 0..12 {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.as_mut_slice()[j] += h;
            xm.as_mut_slice()[j] -= h;
            let f = |z: &Vector| dot(relu(z).as_slice(), &c);
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((g[j] - fd).abs() / 1f64.max(fd.abs()) < 1e-6);
        }
    }

    #[test]
    fn l2_normalize_values() {
        let y = l2_normalize(&v(&[3.0, 4.0])).unwrap();
        assert!((y[0] - 0.6).abs() < 1e-15 && (y[1] - 0.8).abs() < 1e-15);
        let unit = v(&[0.0, 1.0, 0.0]);
        assert_eq!(l2_normalize(&unit).unwrap(), unit);
        assert!(matches!(
            l2_normalize(&v(&[0.0, 1e-13])),
            Err(NumError::Degenerate { .. })
        ));
    }

    #[test]
    fn l2_normalize_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = v(&random_vec(&mut rng, 16));
        let c = random_vec(&mut rng, 16);
        let f = |z: &Vector| dot(l2_normalize(z).unwrap().as_slice(), &c);
        let g = l2_normalize_backward(&x, &v(&c)).unwrap();
        let h = 1e-5;
        for j in 0..16 {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.as_mut_slice()[j] += h;
            xm.as_mut_slice()[j] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((g[j] - fd).abs() / 1f64.max(fd.abs()) < 1e-6);
        }
    }

    #[test]
    fn vector_rejects_non_finite() {
        assert!(Vector::new(vec![1.0, f64::NAN]).is_err());
        assert!(Vector::<f64>::new(vec![]).is_err());
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn f32_primitives_work() {
        let y = l2_normalize(&Vector::new(vec![3.0f32, 4.0]).unwrap()).unwrap();
        assert!((y[0] - 0.6).abs() < 1e-6);
    }
}
