//! Uniform B-spline bases: evaluation, derivatives and grid updates.
//!
//! A [`SplineBasis`] of degree `d` over `G` uniform intervals on
//! `[lo, hi]` carries `G + 2d + 1` knots (the grid is extended `d` knots
//! beyond each domain end, keeping uniform spacing rather than clamping)
//! and defines `G + d` basis functions. Inside the domain the functions
//! form a partition of unity; beyond the extended knot span they vanish.

use crate::linalg::lstsq;
use nalgebra::DMatrix;
use thiserror::Error;

/// Highest supported spline degree; bounds the fixed-size evaluation window.
pub const MAX_DEGREE: usize = 7;

/// Number of samples per basis function used when refitting on a new grid.
const REFIT_SAMPLES_PER_BASIS: usize = 10;

/// Relative margin added on both sides of an observed range by [`update_grid`].
const GRID_UPDATE_MARGIN: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum SplineError {
    #[error("invalid-domain: domain_lo {lo} must be below domain_hi {hi}")]
    InvalidDomain { lo: f64, hi: f64 },
    #[error("invalid-size: n_intervals must be at least 1, got {0}")]
    InvalidSize(usize),
    #[error("invalid-degree: degree must be in 1..={MAX_DEGREE}, got {0}")]
    InvalidDegree(usize),
    #[error("degenerate-range: observed range width {0} is below 1e-9")]
    DegenerateRange(f64),
    #[error("coefficient-length: expected {expected} coefficients, got {got}")]
    CoeffLength { expected: usize, got: usize },
}

/// Family of uniform B-spline basis functions on an interval.
///
/// Immutable after construction; grid updates return a new basis.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineBasis {
    degree: usize,
    domain_lo: f64,
    domain_hi: f64,
    n_intervals: usize,
    knots: Vec<f64>,
}

/// The nonzero basis values at one evaluation point.
///
/// `values[j]` holds basis function `start + j` for `j in 0..=degree`;
/// indices outside `0..basis_count` refer to functions that are not part
/// of the basis and must be skipped.
#[derive(Debug, Clone, Copy)]
pub struct BasisWindow {
    pub start: isize,
    pub len: usize,
    pub values: [f64; MAX_DEGREE + 1],
}

impl SplineBasis {
    /// Builds a uniform basis of the given degree over `n_intervals`
    /// intervals spanning `[domain_lo, domain_hi]`.
    pub fn uniform(
        degree: usize,
        domain_lo: f64,
        domain_hi: f64,
        n_intervals: usize,
    ) -> Result<Self, SplineError> {
        if degree < 1 || degree > MAX_DEGREE {
            return Err(SplineError::InvalidDegree(degree));
        }
        if !(domain_lo < domain_hi) || !domain_lo.is_finite() || !domain_hi.is_finite() {
            return Err(SplineError::InvalidDomain {
                lo: domain_lo,
                hi: domain_hi,
            });
        }
        if n_intervals < 1 {
            return Err(SplineError::InvalidSize(n_intervals));
        }
        let mut basis = SplineBasis {
            degree,
            domain_lo,
            domain_hi,
            n_intervals,
            knots: Vec::new(),
        };
        basis.knots = (0..=(n_intervals + 2 * degree))
            .map(|i| basis.knot(i as isize))
            .collect();
        Ok(basis)
    }

    /// Default edge basis: cubic over 5 intervals on `[-1, 1]`.
    pub fn default_edge_basis() -> Self {
        SplineBasis::uniform(3, -1.0, 1.0, 5).expect("default basis parameters are valid")
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.domain_lo, self.domain_hi)
    }

    pub fn n_intervals(&self) -> usize {
        self.n_intervals
    }

    /// Number of basis functions, `G + degree`.
    pub fn basis_count(&self) -> usize {
        self.n_intervals + self.degree
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    fn step(&self) -> f64 {
        (self.domain_hi - self.domain_lo) / self.n_intervals as f64
    }

    /// Knot value at any (possibly virtual) index on the uniform grid.
    ///
    /// For indices inside `0..knots.len()` this reproduces the stored knot
    /// vector bit for bit; outside it continues the uniform spacing, which
    /// lets the evaluation window slide past the boundary without special
    /// cases.
    fn knot(&self, i: isize) -> f64 {
        self.domain_lo + (i - self.degree as isize) as f64 * self.step()
    }

    /// Index `s` with `knot(s) <= x < knot(s+1)`, without clamping.
    fn raw_span(&self, x: f64) -> isize {
        let rel = (x - self.domain_lo) / self.step();
        self.degree as isize + rel.floor() as isize
    }

    /// Evaluates the `degree + 1` basis functions that can be nonzero on
    /// the interval `[knot(span), knot(span+1))` via the Cox-de Boor
    /// triangle. The caller picks the span; evaluating outside that
    /// interval yields the polynomial extension of those pieces.
    fn window_at_span(&self, x: f64, span: isize) -> BasisWindow {
        let d = self.degree;
        let mut values = [0.0; MAX_DEGREE + 1];
        let mut left = [0.0; MAX_DEGREE + 1];
        let mut right = [0.0; MAX_DEGREE + 1];
        values[0] = 1.0;
        for j in 1..=d {
            left[j] = x - self.knot(span + 1 - j as isize);
            right[j] = self.knot(span + j as isize) - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = values[r] / denom;
                values[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            values[j] = saved;
        }
        BasisWindow {
            start: span - d as isize,
            len: d + 1,
            values,
        }
    }

    /// Nonzero basis values at `x`. Returns `None` when `x` lies outside
    /// the extended knot span (all basis functions are zero there).
    pub fn window(&self, x: f64) -> Option<BasisWindow> {
        if !x.is_finite() || x < self.knots[0] || x >= self.knots[self.knots.len() - 1] {
            return None;
        }
        Some(self.window_at_span(x, self.raw_span(x)))
    }

    /// Nonzero basis values and first derivatives at `x`.
    pub fn window_with_derivative(&self, x: f64) -> Option<(BasisWindow, BasisWindow)> {
        if !x.is_finite() || x < self.knots[0] || x >= self.knots[self.knots.len() - 1] {
            return None;
        }
        let span = self.raw_span(x);
        let vals = self.window_at_span(x, span);
        Some((vals, self.derivative_window_at_span(x, span)))
    }

    /// Derivatives via degree reduction: on a uniform grid
    /// `B'_{i,d}(x) = (B_{i,d-1}(x) - B_{i+1,d-1}(x)) / h`.
    fn derivative_window_at_span(&self, x: f64, span: isize) -> BasisWindow {
        let d = self.degree;
        let h = self.step();
        let mut derivs = [0.0; MAX_DEGREE + 1];
        if d == 1 {
            // Lower-degree functions are interval indicators.
            derivs[0] = -1.0 / h;
            derivs[1] = 1.0 / h;
        } else {
            let lower = self.lower_degree_window_at_span(x, span);
            // lower.values[j] = B_{span-d+1+j, d-1}(x) for j in 0..d.
            for i in 0..=d {
                let b_i = if i >= 1 { lower.values[i - 1] } else { 0.0 };
                let b_next = if i < d { lower.values[i] } else { 0.0 };
                derivs[i] = (b_i - b_next) / h;
            }
        }
        BasisWindow {
            start: span - d as isize,
            len: d + 1,
            values: derivs,
        }
    }

    /// Degree `d-1` triangle on the same span (the `d` functions
    /// `B_{span-d+1 .. span, d-1}`).
    fn lower_degree_window_at_span(&self, x: f64, span: isize) -> BasisWindow {
        let d = self.degree - 1;
        let mut values = [0.0; MAX_DEGREE + 1];
        let mut left = [0.0; MAX_DEGREE + 1];
        let mut right = [0.0; MAX_DEGREE + 1];
        values[0] = 1.0;
        for j in 1..=d {
            left[j] = x - self.knot(span + 1 - j as isize);
            right[j] = self.knot(span + j as isize) - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = values[r] / denom;
                values[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            values[j] = saved;
        }
        BasisWindow {
            start: span - d as isize,
            len: d + 1,
            values,
        }
    }

    /// Dense vector of all basis values at `x`.
    pub fn eval(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.basis_count()];
        self.eval_into(x, &mut out);
        out
    }

    pub fn eval_into(&self, x: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.basis_count());
        out.fill(0.0);
        if let Some(w) = self.window(x) {
            scatter_window(&w, self.basis_count(), out);
        }
    }

    /// Dense vector of all basis derivatives at `x`.
    pub fn eval_derivative(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.basis_count()];
        out.fill(0.0);
        if let Some((_, dw)) = self.window_with_derivative(x) {
            scatter_window(&dw, self.basis_count(), &mut out);
        }
        out
    }

    /// Value of the spline curve `sum_i coeffs[i] * B_i(x)`.
    pub fn curve(&self, coeffs: &[f64], x: f64) -> f64 {
        debug_assert_eq!(coeffs.len(), self.basis_count());
        match self.window(x) {
            Some(w) => window_dot(&w, coeffs),
            None => 0.0,
        }
    }

    /// Curve value with the boundary polynomial pieces extended beyond the
    /// domain: the evaluation span is clamped to the domain intervals, so
    /// outside `[lo, hi]` the nearest polynomial piece continues smoothly.
    /// Splines that represent a polynomial extend to that same polynomial.
    pub fn curve_extrapolated(&self, coeffs: &[f64], x: f64) -> f64 {
        debug_assert_eq!(coeffs.len(), self.basis_count());
        let d = self.degree as isize;
        let span = self
            .raw_span(x)
            .clamp(d, d + self.n_intervals as isize - 1);
        let w = self.window_at_span(x, span);
        window_dot(&w, coeffs)
    }

    /// Least-squares B-spline coefficients for samples `(xs, ys)`.
    pub fn fit_coeffs(&self, xs: &[f64], ys: &[f64]) -> Vec<f64> {
        assert_eq!(xs.len(), ys.len());
        let n = self.basis_count();
        let mut design = DMatrix::zeros(xs.len(), n);
        let mut row = vec![0.0; n];
        for (s, &x) in xs.iter().enumerate() {
            self.eval_into(x, &mut row);
            for i in 0..n {
                design[(s, i)] = row[i];
            }
        }
        lstsq(&design, ys)
    }
}

fn scatter_window(w: &BasisWindow, basis_count: usize, out: &mut [f64]) {
    for j in 0..w.len {
        let idx = w.start + j as isize;
        if idx >= 0 && (idx as usize) < basis_count {
            out[idx as usize] = w.values[j];
        }
    }
}

/// Dot product of a window with a dense coefficient vector, skipping
/// window entries that fall outside the basis.
pub fn window_dot(w: &BasisWindow, coeffs: &[f64]) -> f64 {
    let mut acc = 0.0;
    for j in 0..w.len {
        let idx = w.start + j as isize;
        if idx >= 0 && (idx as usize) < coeffs.len() {
            acc += coeffs[idx as usize] * w.values[j];
        }
    }
    acc
}

/// Re-spans a basis to an observed input range and refits coefficients.
///
/// The new basis keeps the degree and interval count and spans the
/// observed range padded by a 5% margin on each side. The old curve is
/// sampled densely over the new domain (boundary pieces polynomially
/// extended) and the new coefficients solve the least-squares fit, so the
/// represented function is preserved on the overlap; curves that are
/// polynomials of the degree are preserved exactly.
pub fn update_grid(
    basis: &SplineBasis,
    coeffs: &[f64],
    observed_lo: f64,
    observed_hi: f64,
) -> Result<(SplineBasis, Vec<f64>), SplineError> {
    if coeffs.len() != basis.basis_count() {
        return Err(SplineError::CoeffLength {
            expected: basis.basis_count(),
            got: coeffs.len(),
        });
    }
    let width = observed_hi - observed_lo;
    if !(width > 1e-9) {
        return Err(SplineError::DegenerateRange(width));
    }
    let margin = GRID_UPDATE_MARGIN * width;
    let new_basis = SplineBasis::uniform(
        basis.degree(),
        observed_lo - margin,
        observed_hi + margin,
        basis.n_intervals(),
    )?;
    let n_samples = REFIT_SAMPLES_PER_BASIS * new_basis.basis_count();
    let (lo, hi) = new_basis.domain();
    let mut xs = Vec::with_capacity(n_samples);
    let mut ys = Vec::with_capacity(n_samples);
    for s in 0..n_samples {
        let x = lo + (hi - lo) * s as f64 / (n_samples - 1) as f64;
        xs.push(x);
        ys.push(basis.curve_extrapolated(coeffs, x));
    }
    let new_coeffs = new_basis.fit_coeffs(&xs, &ys);
    Ok((new_basis, new_coeffs))
}
