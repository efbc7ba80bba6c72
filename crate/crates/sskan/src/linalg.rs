//! Minimal dense row-major matrix used by the model kernels.
//!
//! The simulation and gradient code evaluates every matrix-vector product
//! with explicit loops in a fixed left-to-right accumulation order so that
//! results are bit-reproducible and match the documented conventions.
//! Least squares goes through nalgebra's SVD; eigenvalue magnitudes come
//! from the characteristic polynomial (the matrices here are tiny and the
//! QR iteration of general-purpose solvers stalls on the nilpotent
//! companion forms that filter realizations produce).

use nalgebra::DMatrix;
use rustfft::num_complex::Complex;

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Mat { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// Row-major view of the entries.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `out[r] += sum_c self[r][c] * x[c]`, accumulated left to right.
    pub fn matvec_acc(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            let mut acc = 0.0;
            for c in 0..self.cols {
                acc += row[c] * x[c];
            }
            out[r] += acc;
        }
    }

    /// `out[c] += sum_r self[r][c] * x[r]` (transposed product).
    pub fn tr_matvec_acc(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            for c in 0..self.cols {
                out[c] += row[c] * x[r];
            }
        }
    }

    /// Squared Frobenius norm.
    pub fn frobenius_sq(&self) -> f64 {
        let mut acc = 0.0;
        for v in &self.data {
            acc += v * v;
        }
        acc
    }

    /// Largest eigenvalue magnitude.
    pub fn spectral_radius(&self) -> f64 {
        assert_eq!(self.rows, self.cols, "spectral radius of square matrices only");
        if self.rows == 0 {
            return 0.0;
        }
        polynomial_root_radius(&self.characteristic_polynomial())
    }

    /// Monic characteristic polynomial coefficients `[c_1, ..., c_n]` of
    /// `lambda^n + c_1 lambda^(n-1) + ... + c_n`, via Faddeev-LeVerrier.
    fn characteristic_polynomial(&self) -> Vec<f64> {
        let n = self.rows;
        let mut coeffs = Vec::with_capacity(n);
        let mut m = self.clone();
        for k in 1..=n {
            let trace: f64 = (0..n).map(|i| m.get(i, i)).sum();
            let c = -trace / k as f64;
            coeffs.push(c);
            if k == n {
                break;
            }
            // m <- A * (m + c I)
            let mut shifted = m.clone();
            for i in 0..n {
                shifted.set(i, i, shifted.get(i, i) + c);
            }
            let mut next = Mat::zeros(n, n);
            for r in 0..n {
                for cidx in 0..n {
                    let mut acc = 0.0;
                    for t in 0..n {
                        acc += self.get(r, t) * shifted.get(t, cidx);
                    }
                    next.set(r, cidx, acc);
                }
            }
            m = next;
        }
        coeffs
    }
}

/// Largest root magnitude of a monic polynomial, by Durand-Kerner
/// iteration. Converges for multiple roots too (slowly, which is fine at
/// these sizes) and never stalls.
fn polynomial_root_radius(coeffs: &[f64]) -> f64 {
    let n = coeffs.len();
    if n == 0 {
        return 0.0;
    }
    if n == 1 {
        return coeffs[0].abs();
    }
    let eval = |z: Complex<f64>| {
        let mut acc = Complex::new(1.0, 0.0);
        for &c in coeffs {
            acc = acc * z + Complex::new(c, 0.0);
        }
        acc
    };
    let seed = Complex::new(0.4, 0.9);
    let mut roots: Vec<Complex<f64>> = (0..n).map(|i| seed.powu(i as u32 + 1)).collect();
    for _ in 0..400 {
        let mut moved = 0.0f64;
        for i in 0..n {
            let mut denom = Complex::new(1.0, 0.0);
            for j in 0..n {
                if j != i {
                    denom *= roots[i] - roots[j];
                }
            }
            if denom.norm() < 1e-300 {
                continue;
            }
            let delta = eval(roots[i]) / denom;
            roots[i] -= delta;
            moved = moved.max(delta.norm());
        }
        if moved < 1e-13 {
            break;
        }
    }
    roots.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Rank-one accumulation `grad[r][c] += left[r] * right[c]`.
pub fn outer_acc(grad: &mut Mat, left: &[f64], right: &[f64]) {
    debug_assert_eq!(left.len(), grad.rows);
    debug_assert_eq!(right.len(), grad.cols);
    for r in 0..grad.rows {
        for c in 0..grad.cols {
            grad.data[r * grad.cols + c] += left[r] * right[c];
        }
    }
}

/// Least-squares solution of `design * x ~= target` via SVD.
///
/// Returns the minimum-norm solution when the system is rank deficient.
pub fn lstsq(design: &DMatrix<f64>, target: &[f64]) -> Vec<f64> {
    let rhs = nalgebra::DVector::from_column_slice(target);
    let svd = design.clone().svd(true, true);
    let sol = svd
        .solve(&rhs, 1e-12)
        .expect("SVD least squares cannot fail when both factors are computed");
    sol.as_slice().to_vec()
}
