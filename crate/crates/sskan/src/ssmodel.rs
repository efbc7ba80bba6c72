//! SS-KAN dynamical models and their free-run simulation.
//!
//! The general model augments a discrete-time linear state space with KAN
//! nonlinearities on the state transition and output map:
//!
//! ```text
//! x(k+1) = A x(k) + B u(k) + KAN_f(x(k), u(k))
//! y(k)   = C x(k) + D u(k) + KAN_g(x(k), u(k))
//! ```
//!
//! The cascade variant chains linear block -> scalar KAN -> linear block
//! for Wiener-Hammerstein structures. All simulation is free-run: the
//! rollout never reads measured outputs. KAN inputs are the concatenation
//! `(x_1..x_nx, u_1..u_nu)` in that order.

use crate::kan::{KanError, KanNetwork};
use crate::linalg::Mat;
use crate::spline::SplineBasis;
use crate::trainer::Normalization;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension-mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite-state: state diverged at time index {step}")]
    NonFiniteState { step: usize },
    #[error("unstable-spec: filter pole magnitude {0} is not below 1")]
    UnstableSpec(f64),
    #[error("order-mismatch: filter must be order 3 (4 numerator and 4 denominator coefficients), got {b} numerator / {a} denominator")]
    OrderMismatch { b: usize, a: usize },
    #[error(transparent)]
    Kan(#[from] KanError),
}

/// Discrete-time linear state-space block `(A, B, C, D)`.
#[derive(Debug, Clone)]
pub struct LinearSS {
    a: Mat,
    b: Mat,
    c: Mat,
    d: Mat,
}

impl LinearSS {
    pub fn new(a: Mat, b: Mat, c: Mat, d: Mat) -> Result<Self, ModelError> {
        let n_x = a.rows();
        if a.cols() != n_x {
            return Err(ModelError::DimensionMismatch(format!(
                "A must be square, got {}x{}",
                a.rows(),
                a.cols()
            )));
        }
        if b.rows() != n_x || c.cols() != n_x || d.rows() != c.rows() || d.cols() != b.cols() {
            return Err(ModelError::DimensionMismatch(format!(
                "inconsistent linear dimensions: A {}x{}, B {}x{}, C {}x{}, D {}x{}",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols(),
                c.rows(),
                c.cols(),
                d.rows(),
                d.cols()
            )));
        }
        Ok(LinearSS { a, b, c, d })
    }

    pub fn zeros(n_x: usize, n_u: usize, n_y: usize) -> Self {
        LinearSS {
            a: Mat::zeros(n_x, n_x),
            b: Mat::zeros(n_x, n_u),
            c: Mat::zeros(n_y, n_x),
            d: Mat::zeros(n_y, n_u),
        }
    }

    pub fn n_x(&self) -> usize {
        self.a.rows()
    }

    pub fn n_u(&self) -> usize {
        self.b.cols()
    }

    pub fn n_y(&self) -> usize {
        self.c.rows()
    }

    pub fn a(&self) -> &Mat {
        &self.a
    }

    pub fn b(&self) -> &Mat {
        &self.b
    }

    pub fn c(&self) -> &Mat {
        &self.c
    }

    pub fn d(&self) -> &Mat {
        &self.d
    }

    pub fn a_mut(&mut self) -> &mut Mat {
        &mut self.a
    }

    pub fn b_mut(&mut self) -> &mut Mat {
        &mut self.b
    }

    pub fn c_mut(&mut self) -> &mut Mat {
        &mut self.c
    }

    pub fn d_mut(&mut self) -> &mut Mat {
        &mut self.d
    }

    /// Spectral radius of `A`; diagnostic only, stability is enforced at
    /// initialization but not during training.
    pub fn spectral_radius(&self) -> f64 {
        self.a.spectral_radius()
    }

    /// Sum of squared Frobenius norms of `A`, `B`, `C`, `D`.
    pub fn frobenius_sq(&self) -> f64 {
        self.a.frobenius_sq() + self.b.frobenius_sq() + self.c.frobenius_sq() + self.d.frobenius_sq()
    }
}

/// One simulated trajectory: outputs, visited states and the state that
/// would seed the next segment.
#[derive(Debug, Clone)]
pub struct Rollout {
    /// Outputs, `n_y` values per step.
    pub y: Vec<f64>,
    /// States `x(0..N-1)`, `n_x` values per step.
    pub x: Vec<f64>,
    /// `x(N)`, the carry-over state.
    pub final_state: Vec<f64>,
}

/// The general SS-KAN model.
#[derive(Debug, Clone)]
pub struct SsKanModel {
    pub linear: LinearSS,
    pub kan_f: KanNetwork,
    /// `None` encodes the designated zero network (purely linear output map).
    pub kan_g: Option<KanNetwork>,
    pub normalization: Normalization,
}

impl SsKanModel {
    pub fn new(
        linear: LinearSS,
        kan_f: KanNetwork,
        kan_g: Option<KanNetwork>,
        normalization: Normalization,
    ) -> Result<Self, ModelError> {
        let expect_in = linear.n_x() + linear.n_u();
        if kan_f.input_width() != expect_in || kan_f.output_width() != linear.n_x() {
            return Err(ModelError::DimensionMismatch(format!(
                "KAN_f must map {} -> {}, got {} -> {}",
                expect_in,
                linear.n_x(),
                kan_f.input_width(),
                kan_f.output_width()
            )));
        }
        if let Some(g) = &kan_g {
            if g.input_width() != expect_in || g.output_width() != linear.n_y() {
                return Err(ModelError::DimensionMismatch(format!(
                    "KAN_g must map {} -> {}, got {} -> {}",
                    expect_in,
                    linear.n_y(),
                    g.input_width(),
                    g.output_width()
                )));
            }
        }
        Ok(SsKanModel {
            linear,
            kan_f,
            kan_g,
            normalization,
        })
    }

    pub fn n_x(&self) -> usize {
        self.linear.n_x()
    }

    pub fn n_u(&self) -> usize {
        self.linear.n_u()
    }

    pub fn n_y(&self) -> usize {
        self.linear.n_y()
    }

    /// One step of the recursion. Returns `(x_next, y)`.
    pub fn step(&self, x: &[f64], u: &[f64]) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        if x.len() != self.n_x() || u.len() != self.n_u() {
            return Err(ModelError::DimensionMismatch(format!(
                "step expects state width {} and input width {}, got {} and {}",
                self.n_x(),
                self.n_u(),
                x.len(),
                u.len()
            )));
        }
        let mut z = Vec::with_capacity(x.len() + u.len());
        z.extend_from_slice(x);
        z.extend_from_slice(u);

        let mut x_next = vec![0.0; self.n_x()];
        self.linear.a.matvec_acc(x, &mut x_next);
        self.linear.b.matvec_acc(u, &mut x_next);
        let f = self.kan_f.forward(&z)?;
        for (xi, fi) in x_next.iter_mut().zip(&f) {
            *xi += fi;
        }

        let mut y = vec![0.0; self.n_y()];
        self.linear.c.matvec_acc(x, &mut y);
        self.linear.d.matvec_acc(u, &mut y);
        if let Some(g) = &self.kan_g {
            let gv = g.forward(&z)?;
            for (yi, gi) in y.iter_mut().zip(&gv) {
                *yi += gi;
            }
        }
        if x_next.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteState { step: 0 });
        }
        Ok((x_next, y))
    }

    /// Free-run simulation over an input sequence (`n_u` values per step).
    pub fn rollout(&self, u: &[f64], x0: &[f64]) -> Result<Rollout, ModelError> {
        let n_u = self.n_u();
        let n_x = self.n_x();
        let n_y = self.n_y();
        if u.len() % n_u != 0 || u.is_empty() {
            return Err(ModelError::DimensionMismatch(format!(
                "input sequence length {} is not a nonzero multiple of n_u = {n_u}",
                u.len()
            )));
        }
        if x0.len() != n_x {
            return Err(ModelError::DimensionMismatch(format!(
                "initial state width {} does not match n_x = {n_x}",
                x0.len()
            )));
        }
        let steps = u.len() / n_u;
        let mut x = x0.to_vec();
        let mut ys = Vec::with_capacity(steps * n_y);
        let mut xs = Vec::with_capacity(steps * n_x);
        for k in 0..steps {
            let uk = &u[k * n_u..(k + 1) * n_u];
            xs.extend_from_slice(&x);
            let (x_next, y) = self.step(&x, uk).map_err(|e| match e {
                ModelError::NonFiniteState { .. } => ModelError::NonFiniteState { step: k },
                other => other,
            })?;
            ys.extend_from_slice(&y);
            x = x_next;
        }
        Ok(Rollout {
            y: ys,
            x: xs,
            final_state: x,
        })
    }
}

/// One cascade step's intermediate values.
#[derive(Debug, Clone)]
pub struct CascadeStep {
    pub x1_next: Vec<f64>,
    pub x2_next: Vec<f64>,
    pub v: f64,
    pub w: f64,
    pub y: f64,
}

/// A cascade trajectory with the intermediate signals exposed.
#[derive(Debug, Clone)]
pub struct CascadeRollout {
    pub y: Vec<f64>,
    pub v: Vec<f64>,
    pub w: Vec<f64>,
    /// Front-block states per step.
    pub x1: Vec<f64>,
    /// Back-block states per step.
    pub x2: Vec<f64>,
    pub final_x1: Vec<f64>,
    pub final_x2: Vec<f64>,
}

/// Wiener-Hammerstein cascade: SISO linear block, scalar KAN, SISO linear
/// block.
#[derive(Debug, Clone)]
pub struct CascadeModel {
    pub front: LinearSS,
    pub mid_kan: KanNetwork,
    pub back: LinearSS,
    pub normalization: Normalization,
}

impl CascadeModel {
    pub fn new(
        front: LinearSS,
        mid_kan: KanNetwork,
        back: LinearSS,
        normalization: Normalization,
    ) -> Result<Self, ModelError> {
        if front.n_u() != 1 || front.n_y() != 1 || back.n_u() != 1 || back.n_y() != 1 {
            return Err(ModelError::DimensionMismatch(
                "cascade blocks must be SISO".into(),
            ));
        }
        if mid_kan.input_width() != 1 || mid_kan.output_width() != 1 {
            return Err(ModelError::DimensionMismatch(
                "cascade KAN must map 1 -> 1".into(),
            ));
        }
        Ok(CascadeModel {
            front,
            mid_kan,
            back,
            normalization,
        })
    }

    /// One step of the five cascade equations.
    pub fn step(&self, x1: &[f64], x2: &[f64], u: f64) -> Result<CascadeStep, ModelError> {
        if x1.len() != self.front.n_x() || x2.len() != self.back.n_x() {
            return Err(ModelError::DimensionMismatch(format!(
                "cascade state widths {} / {} expected, got {} / {}",
                self.front.n_x(),
                self.back.n_x(),
                x1.len(),
                x2.len()
            )));
        }
        let u_slice = [u];

        let mut v_acc = vec![0.0; 1];
        self.front.c.matvec_acc(x1, &mut v_acc);
        self.front.d.matvec_acc(&u_slice, &mut v_acc);
        let v = v_acc[0];

        let w = self.mid_kan.forward(&[v])?[0];
        let w_slice = [w];

        let mut x1_next = vec![0.0; self.front.n_x()];
        self.front.a.matvec_acc(x1, &mut x1_next);
        self.front.b.matvec_acc(&u_slice, &mut x1_next);

        let mut x2_next = vec![0.0; self.back.n_x()];
        self.back.a.matvec_acc(x2, &mut x2_next);
        self.back.b.matvec_acc(&w_slice, &mut x2_next);

        let mut y_acc = vec![0.0; 1];
        self.back.c.matvec_acc(x2, &mut y_acc);
        self.back.d.matvec_acc(&w_slice, &mut y_acc);
        let y = y_acc[0];

        if !v.is_finite()
            || !w.is_finite()
            || !y.is_finite()
            || x1_next.iter().any(|a| !a.is_finite())
            || x2_next.iter().any(|a| !a.is_finite())
        {
            return Err(ModelError::NonFiniteState { step: 0 });
        }
        Ok(CascadeStep {
            x1_next,
            x2_next,
            v,
            w,
            y,
        })
    }

    /// Free-run cascade simulation returning the intermediate `v` and `w`
    /// sequences alongside the output.
    pub fn rollout(&self, u: &[f64], x1_0: &[f64], x2_0: &[f64]) -> Result<CascadeRollout, ModelError> {
        if u.is_empty() {
            return Err(ModelError::DimensionMismatch(
                "input sequence must be nonempty".into(),
            ));
        }
        let mut x1 = x1_0.to_vec();
        let mut x2 = x2_0.to_vec();
        let mut out = CascadeRollout {
            y: Vec::with_capacity(u.len()),
            v: Vec::with_capacity(u.len()),
            w: Vec::with_capacity(u.len()),
            x1: Vec::with_capacity(u.len() * self.front.n_x()),
            x2: Vec::with_capacity(u.len() * self.back.n_x()),
            final_x1: Vec::new(),
            final_x2: Vec::new(),
        };
        for (k, &uk) in u.iter().enumerate() {
            out.x1.extend_from_slice(&x1);
            out.x2.extend_from_slice(&x2);
            let step = self.step(&x1, &x2, uk).map_err(|e| match e {
                ModelError::NonFiniteState { .. } => ModelError::NonFiniteState { step: k },
                other => other,
            })?;
            out.y.push(step.y);
            out.v.push(step.v);
            out.w.push(step.w);
            x1 = step.x1_next;
            x2 = step.x2_next;
        }
        out.final_x1 = x1;
        out.final_x2 = x2;
        Ok(out)
    }
}

/// Discrete transfer function `H(z) = (b0 + b1 z^-1 + ...) / (1 + a1 z^-1 + ...)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub b: Vec<f64>,
    pub a: Vec<f64>,
}

impl FilterSpec {
    /// Controllable-canonical-form realization of a third-order filter.
    pub fn to_state_space(&self) -> Result<LinearSS, ModelError> {
        if self.b.len() != 4 || self.a.len() != 4 {
            return Err(ModelError::OrderMismatch {
                b: self.b.len(),
                a: self.a.len(),
            });
        }
        if (self.a[0] - 1.0).abs() > 1e-12 {
            return Err(ModelError::DimensionMismatch(
                "filter denominator must be monic (a[0] = 1)".into(),
            ));
        }
        let (a1, a2, a3) = (self.a[1], self.a[2], self.a[3]);
        let b0 = self.b[0];
        let a = Mat::from_rows(3, 3, vec![-a1, -a2, -a3, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let radius = a.spectral_radius();
        if radius >= 1.0 {
            return Err(ModelError::UnstableSpec(radius));
        }
        let b = Mat::from_rows(3, 1, vec![1.0, 0.0, 0.0]);
        let c = Mat::from_rows(
            1,
            3,
            vec![
                self.b[1] - b0 * a1,
                self.b[2] - b0 * a2,
                self.b[3] - b0 * a3,
            ],
        );
        let d = Mat::from_rows(1, 1, vec![b0]);
        LinearSS::new(a, b, c, d)
    }
}

/// Stable, weakly damped linear system close to an identity mapping:
/// `A = 0.99 I` plus a small normal perturbation, `B` and `C` uniform in
/// `(-0.1, 0.1)`, `D = 0`. The spectral radius is forced into
/// `[0.95, 0.999]`.
pub fn init_stable_linear(n_x: usize, n_u: usize, n_y: usize, seed: u64) -> LinearSS {
    assert!(n_x >= 1 && n_u >= 1 && n_y >= 1);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let perturb = Normal::new(0.0, 0.01).expect("valid normal");
    let small = Uniform::new(-0.1, 0.1);

    let mut a = Mat::identity(n_x);
    for v in a.as_mut_slice().iter_mut() {
        *v = 0.99 * *v + perturb.sample(&mut rng);
    }
    let radius = a.spectral_radius();
    if !(0.95..=0.999).contains(&radius) {
        let scale = 0.99 / radius;
        for v in a.as_mut_slice().iter_mut() {
            *v *= scale;
        }
    }
    let mut b = Mat::zeros(n_x, n_u);
    for v in b.as_mut_slice().iter_mut() {
        *v = small.sample(&mut rng);
    }
    let mut c = Mat::zeros(n_y, n_x);
    for v in c.as_mut_slice().iter_mut() {
        *v = small.sample(&mut rng);
    }
    let d = Mat::zeros(n_y, n_u);
    LinearSS::new(a, b, c, d).expect("constructed dimensions are consistent")
}

/// Cascade model realized from two third-order filter specs with a
/// near-identity scalar KAN between them.
///
/// Each first-layer edge is the least-squares spline fit of the identity
/// on the basis domain and each second-layer edge the fit of
/// `x / hidden_width`, so the composed KAN is the identity up to spline
/// fit error; both linear blocks are controllable canonical forms.
pub fn init_cascade_from_filters(
    front_spec: &FilterSpec,
    back_spec: &FilterSpec,
    hidden_width: usize,
    basis: &SplineBasis,
) -> Result<CascadeModel, ModelError> {
    assert!(hidden_width >= 1);
    let front = front_spec.to_state_space()?;
    let back = back_spec.to_state_space()?;
    let mid_kan = near_identity_kan(hidden_width, basis);
    CascadeModel::new(front, mid_kan, back, Normalization::identity())
}

/// Scalar 1 -> hidden -> 1 KAN fitted to the identity on the basis domain.
pub fn near_identity_kan(hidden_width: usize, basis: &SplineBasis) -> KanNetwork {
    use crate::kan::{KanEdge, KanLayer};
    use std::sync::Arc;

    let (lo, hi) = basis.domain();
    let n_fit = 20 * basis.basis_count();
    let xs: Vec<f64> = (0..n_fit)
        .map(|s| lo + (hi - lo) * s as f64 / (n_fit - 1) as f64)
        .collect();
    let ident = basis.fit_coeffs(&xs, &xs);
    let scaled: Vec<f64> = ident.iter().map(|c| c / hidden_width as f64).collect();
    let shared = Arc::new(basis.clone());

    let first_edges: Vec<KanEdge> = (0..hidden_width)
        .map(|_| KanEdge::new(Arc::clone(&shared), ident.clone(), 0.0, 1.0))
        .collect();
    let second_edges: Vec<KanEdge> = (0..hidden_width)
        .map(|_| KanEdge::new(Arc::clone(&shared), scaled.clone(), 0.0, 1.0))
        .collect();
    KanNetwork::from_layers(vec![
        KanLayer::from_edges(1, hidden_width, first_edges),
        KanLayer::from_edges(hidden_width, 1, second_edges),
    ])
    .expect("chained widths are consistent")
}
