//! Exact reverse-mode gradients of the training loss through a rollout.
//!
//! The models have a small fixed operator set (matrix-vector products,
//! SiLU, B-splines), so gradients are hand-derived: the forward pass
//! caches states and KAN layer inputs, and a time-reversed sweep
//! accumulates adjoints. Gradients are truncated at segment boundaries
//! (states flow forward across segments, gradients do not), and every
//! accumulation runs in a fixed order so results are bit-reproducible.
//!
//! The flat parameter vector orders blocks as
//! `[A, B, C, D, kan_f, kan_g]` for the general model and
//! `[front A..D, mid KAN, back A..D]` for the cascade, each matrix
//! row-major and each KAN layer-major, edge-major (output index outer),
//! with `[coeffs.., w_b, w_s]` per edge.

use crate::kan::{silu, silu_derivative, KanNetwork};
use crate::linalg::{outer_acc, Mat};
use crate::spline::window_dot;
use crate::ssmodel::{CascadeModel, ModelError, SsKanModel};
use crate::trainer::Normalization;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("non-finite-loss: loss diverged{}", match step { Some(k) => format!(" at time index {k}"), None => String::new() })]
    NonFiniteLoss { step: Option<usize> },
    #[error("length-mismatch: parameter vector has {got} entries, layout expects {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("segment-mismatch: {0}")]
    SegmentMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Regularization weights of the training loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Penalties {
    pub lambda_l1: f64,
    pub lambda_l2: f64,
}

impl Penalties {
    pub fn none() -> Self {
        Penalties {
            lambda_l1: 0.0,
            lambda_l2: 0.0,
        }
    }
}

/// Which parameter blocks enter the flat vector.
///
/// Freezing the KANs (zero networks held at zero) turns the model into
/// the linear baseline while keeping the same trainer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PackSpec {
    pub include_kans: bool,
}

impl Default for PackSpec {
    fn default() -> Self {
        PackSpec { include_kans: true }
    }
}

/// Named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: &'static str,
    pub offset: usize,
    pub len: usize,
}

/// Index map from parameter blocks to flat offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    sections: Vec<Section>,
    total: usize,
}

impl ParamLayout {
    fn new(blocks: Vec<(&'static str, usize)>) -> Self {
        let mut sections = Vec::with_capacity(blocks.len());
        let mut offset = 0;
        for (name, len) in blocks {
            sections.push(Section { name, offset, len });
            offset += len;
        }
        ParamLayout {
            sections,
            total: offset,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn sections(&self) -> &[Section] {
        &self.sections
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }
}

/// One training segment: aligned input/output sequences plus the state
/// the rollout starts from.
#[derive(Debug, Clone, Copy)]
pub struct Segment<'a> {
    pub u: &'a [f64],
    pub y: &'a [f64],
    pub x0: &'a [f64],
}

/// Loss, exact gradient and the carry-over state of one segment.
#[derive(Debug, Clone)]
pub struct SegmentEval {
    pub loss: f64,
    /// The data term of the loss (mean squared error over the segment).
    pub mse: f64,
    pub grad: Vec<f64>,
    pub final_state: Vec<f64>,
}

/// Simulated outputs plus carry-over state, in normalized units.
#[derive(Debug, Clone)]
pub struct SimTrace {
    pub y: Vec<f64>,
    pub final_state: Vec<f64>,
}

/// A model the trainer can pack, simulate and differentiate.
pub trait TrainableModel {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;

    fn layout(&self, spec: PackSpec) -> ParamLayout;
    fn pack(&self, spec: PackSpec) -> Vec<f64>;
    fn unpack(&mut self, params: &[f64], spec: PackSpec) -> Result<(), DiffError>;

    /// Free-run simulation from a stacked initial state.
    fn simulate(&self, u: &[f64], x0: &[f64]) -> Result<SimTrace, DiffError>;

    /// Loss of Eq-style form (mean squared error over the segment plus the
    /// L2 matrix penalty and L1 KAN penalty) and its exact gradient.
    fn loss_and_gradient(
        &self,
        segment: &Segment,
        penalties: &Penalties,
        spec: PackSpec,
    ) -> Result<SegmentEval, DiffError>;

    /// Sum of absolute values of all KAN parameters.
    fn kan_l1(&self) -> f64;

    /// Sum of squared Frobenius norms of all linear matrices.
    fn linear_frobenius_sq(&self) -> f64;

    /// Re-spans every edge's spline grid to the input range observed while
    /// simulating over `u`; edges whose observed range is degenerate keep
    /// their grid.
    fn update_grids(&mut self, u: &[f64], x0: &[f64]) -> Result<(), DiffError>;

    fn normalization(&self) -> &Normalization;
    fn set_normalization(&mut self, n: Normalization);
}

fn kan_param_count(net: &KanNetwork) -> usize {
    net.layers()
        .iter()
        .map(|l| l.edges().iter().map(|e| e.coeffs().len() + 2).sum::<usize>())
        .sum()
}

fn pack_mat(out: &mut Vec<f64>, m: &Mat) {
    out.extend_from_slice(m.as_slice());
}

fn unpack_mat(params: &[f64], cursor: &mut usize, m: &mut Mat) {
    let len = m.as_slice().len();
    m.as_mut_slice().copy_from_slice(&params[*cursor..*cursor + len]);
    *cursor += len;
}

fn pack_kan(out: &mut Vec<f64>, net: &KanNetwork) {
    for layer in net.layers() {
        for edge in layer.edges() {
            out.extend_from_slice(edge.coeffs());
            out.push(edge.w_b());
            out.push(edge.w_s());
        }
    }
}

fn unpack_kan(params: &[f64], cursor: &mut usize, net: &mut KanNetwork) {
    for layer in net.layers_mut() {
        for edge in layer.edges_mut() {
            let n = edge.coeffs().len();
            edge.coeffs_mut().copy_from_slice(&params[*cursor..*cursor + n]);
            *cursor += n;
            edge.set_w_b(params[*cursor]);
            edge.set_w_s(params[*cursor + 1]);
            *cursor += 2;
        }
    }
}

/// Layer inputs recorded during the forward pass, `[layer][step * n_in + i]`.
struct NetworkCache {
    layer_inputs: Vec<Vec<f64>>,
}

impl NetworkCache {
    fn new(net: &KanNetwork, steps: usize) -> Self {
        NetworkCache {
            layer_inputs: net
                .layers()
                .iter()
                .map(|l| Vec::with_capacity(steps * l.n_in()))
                .collect(),
        }
    }

    /// Runs the forward pass for one step, recording every layer input.
    fn forward(&mut self, net: &KanNetwork, input: &[f64], out: &mut [f64]) {
        let mut current = input.to_vec();
        for (l, layer) in net.layers().iter().enumerate() {
            self.layer_inputs[l].extend_from_slice(&current);
            let mut next = vec![0.0; layer.n_out()];
            layer.forward_into(&current, &mut next);
            current = next;
        }
        out.copy_from_slice(&current);
    }
}

/// Backpropagates `upstream` through the network at step `k`.
///
/// Parameter gradients are written at `grad[base..]` following the pack
/// order (skipped when `base` is `None`); the gradient with respect to
/// the network input is accumulated into `input_grad`.
fn backprop_network(
    net: &KanNetwork,
    cache: &NetworkCache,
    k: usize,
    upstream: &[f64],
    base: Option<usize>,
    grad: &mut [f64],
    input_grad: &mut [f64],
) {
    // Offsets of each layer's parameter block within the KAN section.
    let mut layer_bases = Vec::with_capacity(net.layers().len());
    let mut acc = 0;
    for layer in net.layers() {
        layer_bases.push(acc);
        acc += layer
            .edges()
            .iter()
            .map(|e| e.coeffs().len() + 2)
            .sum::<usize>();
    }

    let mut g = upstream.to_vec();
    for l in (0..net.layers().len()).rev() {
        let layer = &net.layers()[l];
        let n_in = layer.n_in();
        let inputs = &cache.layer_inputs[l][k * n_in..(k + 1) * n_in];
        let mut g_in = vec![0.0; n_in];
        let mut edge_offset = layer_bases[l];
        for j in 0..layer.n_out() {
            let up = g[j];
            for i in 0..n_in {
                let edge = layer.edge(j, i);
                let n_coeff = edge.coeffs().len();
                let x = inputs[i];
                let (spline_val, spline_der, window) =
                    match edge.basis().window_with_derivative(x) {
                        Some((w, dw)) => (
                            window_dot(&w, edge.coeffs()),
                            window_dot(&dw, edge.coeffs()),
                            Some(w),
                        ),
                        None => (0.0, 0.0, None),
                    };
                if up != 0.0 {
                    if let Some(section) = base {
                        let edge_base = section + edge_offset;
                        if let Some(w) = &window {
                            let scale = up * edge.w_s();
                            for t in 0..w.len {
                                let idx = w.start + t as isize;
                                if idx >= 0 && (idx as usize) < n_coeff {
                                    grad[edge_base + idx as usize] += scale * w.values[t];
                                }
                            }
                        }
                        grad[edge_base + n_coeff] += up * silu(x);
                        grad[edge_base + n_coeff + 1] += up * spline_val;
                    }
                    g_in[i] += up * (edge.w_b() * silu_derivative(x) + edge.w_s() * spline_der);
                }
                edge_offset += n_coeff + 2;
            }
        }
        g = g_in;
    }
    for (o, gi) in input_grad.iter_mut().zip(&g) {
        *o += gi;
    }
}

/// Adds `lambda_l2 * 2 * p` for linear sections and `lambda_l1 * sign(p)`
/// for KAN sections (subgradient 0 at 0), following the layout.
fn add_penalty_gradients(
    layout: &ParamLayout,
    params: &[f64],
    penalties: &Penalties,
    grad: &mut [f64],
) {
    for section in layout.sections() {
        let kan = section.name.contains("kan");
        for idx in section.offset..section.offset + section.len {
            let p = params[idx];
            if kan {
                grad[idx] += penalties.lambda_l1 * sign(p);
            } else {
                grad[idx] += penalties.lambda_l2 * 2.0 * p;
            }
        }
    }
}

fn sign(p: f64) -> f64 {
    if p > 0.0 {
        1.0
    } else if p < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_segment(
    seg: &Segment,
    n_u: usize,
    n_y: usize,
    state_dim: usize,
) -> Result<usize, DiffError> {
    if seg.u.is_empty() || seg.u.len() % n_u != 0 {
        return Err(DiffError::SegmentMismatch(format!(
            "input length {} is not a nonzero multiple of {n_u}",
            seg.u.len()
        )));
    }
    let steps = seg.u.len() / n_u;
    if seg.y.len() != steps * n_y {
        return Err(DiffError::SegmentMismatch(format!(
            "output length {} does not match {} steps of width {n_y}",
            seg.y.len(),
            steps
        )));
    }
    if seg.x0.len() != state_dim {
        return Err(DiffError::SegmentMismatch(format!(
            "initial state width {} does not match state dimension {state_dim}",
            seg.x0.len()
        )));
    }
    Ok(steps)
}

impl TrainableModel for SsKanModel {
    fn state_dim(&self) -> usize {
        self.n_x()
    }

    fn input_dim(&self) -> usize {
        self.n_u()
    }

    fn output_dim(&self) -> usize {
        self.n_y()
    }

    fn layout(&self, spec: PackSpec) -> ParamLayout {
        let (n_x, n_u, n_y) = (self.n_x(), self.n_u(), self.n_y());
        let mut blocks = vec![
            ("A", n_x * n_x),
            ("B", n_x * n_u),
            ("C", n_y * n_x),
            ("D", n_y * n_u),
        ];
        if spec.include_kans {
            blocks.push(("kan_f", kan_param_count(&self.kan_f)));
            if let Some(g) = &self.kan_g {
                blocks.push(("kan_g", kan_param_count(g)));
            }
        }
        ParamLayout::new(blocks)
    }

    fn pack(&self, spec: PackSpec) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.layout(spec).total());
        pack_mat(&mut out, self.linear.a());
        pack_mat(&mut out, self.linear.b());
        pack_mat(&mut out, self.linear.c());
        pack_mat(&mut out, self.linear.d());
        if spec.include_kans {
            pack_kan(&mut out, &self.kan_f);
            if let Some(g) = &self.kan_g {
                pack_kan(&mut out, g);
            }
        }
        out
    }

    fn unpack(&mut self, params: &[f64], spec: PackSpec) -> Result<(), DiffError> {
        let expected = self.layout(spec).total();
        if params.len() != expected {
            return Err(DiffError::LengthMismatch {
                expected,
                got: params.len(),
            });
        }
        let mut cursor = 0;
        unpack_mat(params, &mut cursor, self.linear.a_mut());
        unpack_mat(params, &mut cursor, self.linear.b_mut());
        unpack_mat(params, &mut cursor, self.linear.c_mut());
        unpack_mat(params, &mut cursor, self.linear.d_mut());
        if spec.include_kans {
            unpack_kan(params, &mut cursor, &mut self.kan_f);
            if let Some(g) = &mut self.kan_g {
                unpack_kan(params, &mut cursor, g);
            }
        }
        Ok(())
    }

    fn simulate(&self, u: &[f64], x0: &[f64]) -> Result<SimTrace, DiffError> {
        let rollout = self.rollout(u, x0)?;
        Ok(SimTrace {
            y: rollout.y,
            final_state: rollout.final_state,
        })
    }

    fn loss_and_gradient(
        &self,
        segment: &Segment,
        penalties: &Penalties,
        spec: PackSpec,
    ) -> Result<SegmentEval, DiffError> {
        let (n_x, n_u, n_y) = (self.n_x(), self.n_u(), self.n_y());
        let steps = check_segment(segment, n_u, n_y, n_x)?;
        let layout = self.layout(spec);

        // Forward pass with caches.
        let mut states = Vec::with_capacity((steps + 1) * n_x);
        states.extend_from_slice(segment.x0);
        let mut y_model = vec![0.0; steps * n_y];
        let mut cache_f = NetworkCache::new(&self.kan_f, steps);
        let mut cache_g = self.kan_g.as_ref().map(|g| NetworkCache::new(g, steps));
        let mut z = vec![0.0; n_x + n_u];
        let mut f_out = vec![0.0; n_x];
        let mut g_out = vec![0.0; n_y];
        for k in 0..steps {
            let x_k = &states[k * n_x..(k + 1) * n_x];
            let u_k = &segment.u[k * n_u..(k + 1) * n_u];
            z[..n_x].copy_from_slice(x_k);
            z[n_x..].copy_from_slice(u_k);

            let y_k = &mut y_model[k * n_y..(k + 1) * n_y];
            self.linear.c().matvec_acc(x_k, y_k);
            self.linear.d().matvec_acc(u_k, y_k);
            if let (Some(g), Some(cache)) = (&self.kan_g, cache_g.as_mut()) {
                cache.forward(g, &z, &mut g_out);
                for (yi, gi) in y_k.iter_mut().zip(&g_out) {
                    *yi += gi;
                }
            }

            let mut x_next = vec![0.0; n_x];
            self.linear.a().matvec_acc(x_k, &mut x_next);
            self.linear.b().matvec_acc(u_k, &mut x_next);
            cache_f.forward(&self.kan_f, &z, &mut f_out);
            for (xi, fi) in x_next.iter_mut().zip(&f_out) {
                *xi += fi;
            }
            if x_next.iter().any(|v| !v.is_finite()) {
                return Err(DiffError::NonFiniteLoss { step: Some(k) });
            }
            states.extend_from_slice(&x_next);
        }

        let mut mse = 0.0;
        for (ym, yd) in y_model.iter().zip(segment.y) {
            let r = ym - yd;
            mse += r * r;
        }
        mse /= steps as f64;
        let loss =
            mse + penalties.lambda_l2 * self.linear_frobenius_sq() + penalties.lambda_l1 * self.kan_l1();
        if !loss.is_finite() {
            return Err(DiffError::NonFiniteLoss { step: None });
        }

        // Reverse sweep.
        let mut grad = vec![0.0; layout.total()];
        let sec = |name: &str| layout.section(name).map(|s| s.offset);
        let (a_off, b_off, c_off, d_off) = (
            sec("A").unwrap(),
            sec("B").unwrap(),
            sec("C").unwrap(),
            sec("D").unwrap(),
        );
        let f_off = sec("kan_f");
        let g_off = sec("kan_g");

        let mut a_grad = Mat::zeros(n_x, n_x);
        let mut b_grad = Mat::zeros(n_x, n_u);
        let mut c_grad = Mat::zeros(n_y, n_x);
        let mut d_grad = Mat::zeros(n_y, n_u);
        let mut lambda_next = vec![0.0; n_x];
        let mut g_y = vec![0.0; n_y];
        let mut g_z = vec![0.0; n_x + n_u];
        for k in (0..steps).rev() {
            let x_k = &states[k * n_x..(k + 1) * n_x];
            let u_k = &segment.u[k * n_u..(k + 1) * n_u];
            for c in 0..n_y {
                g_y[c] = 2.0 / steps as f64 * (y_model[k * n_y + c] - segment.y[k * n_y + c]);
            }
            g_z.fill(0.0);

            c_grad_acc(&mut c_grad, &g_y, x_k);
            c_grad_acc(&mut d_grad, &g_y, u_k);
            if let (Some(g), Some(cache)) = (&self.kan_g, cache_g.as_ref()) {
                backprop_network(g, cache, k, &g_y, g_off, &mut grad, &mut g_z);
            }

            c_grad_acc(&mut a_grad, &lambda_next, x_k);
            c_grad_acc(&mut b_grad, &lambda_next, u_k);
            backprop_network(&self.kan_f, &cache_f, k, &lambda_next, f_off, &mut grad, &mut g_z);

            let mut lambda = vec![0.0; n_x];
            self.linear.c().tr_matvec_acc(&g_y, &mut lambda);
            self.linear.a().tr_matvec_acc(&lambda_next, &mut lambda);
            for i in 0..n_x {
                lambda[i] += g_z[i];
            }
            lambda_next = lambda;
        }

        grad[a_off..a_off + n_x * n_x]
            .iter_mut()
            .zip(a_grad.as_slice())
            .for_each(|(g, v)| *g += v);
        grad[b_off..b_off + n_x * n_u]
            .iter_mut()
            .zip(b_grad.as_slice())
            .for_each(|(g, v)| *g += v);
        grad[c_off..c_off + n_y * n_x]
            .iter_mut()
            .zip(c_grad.as_slice())
            .for_each(|(g, v)| *g += v);
        grad[d_off..d_off + n_y * n_u]
            .iter_mut()
            .zip(d_grad.as_slice())
            .for_each(|(g, v)| *g += v);

        let params = self.pack(spec);
        add_penalty_gradients(&layout, &params, penalties, &mut grad);

        Ok(SegmentEval {
            loss,
            mse,
            grad,
            final_state: states[steps * n_x..].to_vec(),
        })
    }

    fn kan_l1(&self) -> f64 {
        self.kan_f.l1_norm() + self.kan_g.as_ref().map_or(0.0, |g| g.l1_norm())
    }

    fn linear_frobenius_sq(&self) -> f64 {
        self.linear.frobenius_sq()
    }

    fn update_grids(&mut self, u: &[f64], x0: &[f64]) -> Result<(), DiffError> {
        let rollout = self.rollout(u, x0)?;
        let (n_x, n_u) = (self.n_x(), self.n_u());
        let steps = u.len() / n_u;
        let batch: Vec<Vec<f64>> = (0..steps)
            .map(|k| {
                let mut z = Vec::with_capacity(n_x + n_u);
                z.extend_from_slice(&rollout.x[k * n_x..(k + 1) * n_x]);
                z.extend_from_slice(&u[k * n_u..(k + 1) * n_u]);
                z
            })
            .collect();
        update_network_grids(&mut self.kan_f, &batch)?;
        if let Some(g) = &mut self.kan_g {
            update_network_grids(g, &batch)?;
        }
        Ok(())
    }

    fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    fn set_normalization(&mut self, n: Normalization) {
        self.normalization = n;
    }
}

/// Rank-one adjoint accumulation shared by the matrix gradients.
fn c_grad_acc(grad: &mut Mat, rows: &[f64], cols: &[f64]) {
    outer_acc(grad, rows, cols);
}

fn update_network_grids(net: &mut KanNetwork, batch: &[Vec<f64>]) -> Result<(), DiffError> {
    let ranges = net.observed_ranges(batch).map_err(ModelError::from)?;
    for (l, layer_ranges) in ranges.iter().enumerate() {
        let layer = &mut net.layers_mut()[l];
        for (e, &(lo, hi)) in layer_ranges.iter().enumerate() {
            if hi - lo > 1e-9 {
                layer.edges_mut()[e]
                    .update_grid(lo, hi)
                    .map_err(crate::kan::KanError::from)
                    .map_err(ModelError::from)?;
            }
        }
    }
    Ok(())
}

impl TrainableModel for CascadeModel {
    fn state_dim(&self) -> usize {
        self.front.n_x() + self.back.n_x()
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn output_dim(&self) -> usize {
        1
    }

    fn layout(&self, spec: PackSpec) -> ParamLayout {
        let fx = self.front.n_x();
        let bx = self.back.n_x();
        let mut blocks = vec![
            ("front.A", fx * fx),
            ("front.B", fx),
            ("front.C", fx),
            ("front.D", 1),
        ];
        if spec.include_kans {
            blocks.push(("kan", kan_param_count(&self.mid_kan)));
        }
        blocks.extend_from_slice(&[
            ("back.A", bx * bx),
            ("back.B", bx),
            ("back.C", bx),
            ("back.D", 1),
        ]);
        ParamLayout::new(blocks)
    }

    fn pack(&self, spec: PackSpec) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.layout(spec).total());
        pack_mat(&mut out, self.front.a());
        pack_mat(&mut out, self.front.b());
        pack_mat(&mut out, self.front.c());
        pack_mat(&mut out, self.front.d());
        if spec.include_kans {
            pack_kan(&mut out, &self.mid_kan);
        }
        pack_mat(&mut out, self.back.a());
        pack_mat(&mut out, self.back.b());
        pack_mat(&mut out, self.back.c());
        pack_mat(&mut out, self.back.d());
        out
    }

    fn unpack(&mut self, params: &[f64], spec: PackSpec) -> Result<(), DiffError> {
        let expected = self.layout(spec).total();
        if params.len() != expected {
            return Err(DiffError::LengthMismatch {
                expected,
                got: params.len(),
            });
        }
        let mut cursor = 0;
        unpack_mat(params, &mut cursor, self.front.a_mut());
        unpack_mat(params, &mut cursor, self.front.b_mut());
        unpack_mat(params, &mut cursor, self.front.c_mut());
        unpack_mat(params, &mut cursor, self.front.d_mut());
        if spec.include_kans {
            unpack_kan(params, &mut cursor, &mut self.mid_kan);
        }
        unpack_mat(params, &mut cursor, self.back.a_mut());
        unpack_mat(params, &mut cursor, self.back.b_mut());
        unpack_mat(params, &mut cursor, self.back.c_mut());
        unpack_mat(params, &mut cursor, self.back.d_mut());
        Ok(())
    }

    fn simulate(&self, u: &[f64], x0: &[f64]) -> Result<SimTrace, DiffError> {
        let fx = self.front.n_x();
        let rollout = self.rollout(u, &x0[..fx], &x0[fx..])?;
        let mut final_state = rollout.final_x1;
        final_state.extend_from_slice(&rollout.final_x2);
        Ok(SimTrace {
            y: rollout.y,
            final_state,
        })
    }

    fn loss_and_gradient(
        &self,
        segment: &Segment,
        penalties: &Penalties,
        spec: PackSpec,
    ) -> Result<SegmentEval, DiffError> {
        let fx = self.front.n_x();
        let bx = self.back.n_x();
        let steps = check_segment(segment, 1, 1, fx + bx)?;
        let layout = self.layout(spec);

        // Forward pass with caches.
        let mut x1s = Vec::with_capacity((steps + 1) * fx);
        let mut x2s = Vec::with_capacity((steps + 1) * bx);
        x1s.extend_from_slice(&segment.x0[..fx]);
        x2s.extend_from_slice(&segment.x0[fx..]);
        let mut vs = vec![0.0; steps];
        let mut ws = vec![0.0; steps];
        let mut y_model = vec![0.0; steps];
        let mut cache = NetworkCache::new(&self.mid_kan, steps);
        let mut w_out = vec![0.0; 1];
        for k in 0..steps {
            let x1 = &x1s[k * fx..(k + 1) * fx];
            let x2 = &x2s[k * bx..(k + 1) * bx];
            let u_k = [segment.u[k]];

            let mut v_acc = vec![0.0; 1];
            self.front.c().matvec_acc(x1, &mut v_acc);
            self.front.d().matvec_acc(&u_k, &mut v_acc);
            let v = v_acc[0];
            vs[k] = v;

            cache.forward(&self.mid_kan, &[v], &mut w_out);
            let w = w_out[0];
            ws[k] = w;
            let w_slice = [w];

            let mut y_acc = vec![0.0; 1];
            self.back.c().matvec_acc(x2, &mut y_acc);
            self.back.d().matvec_acc(&w_slice, &mut y_acc);
            y_model[k] = y_acc[0];

            let mut x1_next = vec![0.0; fx];
            self.front.a().matvec_acc(x1, &mut x1_next);
            self.front.b().matvec_acc(&u_k, &mut x1_next);
            let mut x2_next = vec![0.0; bx];
            self.back.a().matvec_acc(x2, &mut x2_next);
            self.back.b().matvec_acc(&w_slice, &mut x2_next);

            if !v.is_finite()
                || !w.is_finite()
                || !y_model[k].is_finite()
                || x1_next.iter().any(|a| !a.is_finite())
                || x2_next.iter().any(|a| !a.is_finite())
            {
                return Err(DiffError::NonFiniteLoss { step: Some(k) });
            }
            x1s.extend_from_slice(&x1_next);
            x2s.extend_from_slice(&x2_next);
        }

        let mut mse = 0.0;
        for k in 0..steps {
            let r = y_model[k] - segment.y[k];
            mse += r * r;
        }
        mse /= steps as f64;
        let loss =
            mse + penalties.lambda_l2 * self.linear_frobenius_sq() + penalties.lambda_l1 * self.kan_l1();
        if !loss.is_finite() {
            return Err(DiffError::NonFiniteLoss { step: None });
        }

        // Reverse sweep.
        let mut grad = vec![0.0; layout.total()];
        let off = |name: &str| layout.section(name).map(|s| s.offset);
        let kan_off = off("kan");

        let mut fa = Mat::zeros(fx, fx);
        let mut fb = Mat::zeros(fx, 1);
        let mut fc = Mat::zeros(1, fx);
        let mut fd = Mat::zeros(1, 1);
        let mut ba = Mat::zeros(bx, bx);
        let mut bb = Mat::zeros(bx, 1);
        let mut bc = Mat::zeros(1, bx);
        let mut bd = Mat::zeros(1, 1);

        let mut lambda1_next = vec![0.0; fx];
        let mut lambda2_next = vec![0.0; bx];
        for k in (0..steps).rev() {
            let x1 = &x1s[k * fx..(k + 1) * fx];
            let x2 = &x2s[k * bx..(k + 1) * bx];
            let u_k = [segment.u[k]];
            let w_k = [ws[k]];
            let g_y = [2.0 / steps as f64 * (y_model[k] - segment.y[k])];

            // y(k) = C2 x2 + D2 w  and  x2(k+1) = A2 x2 + B2 w.
            outer_acc(&mut bc, &g_y, x2);
            outer_acc(&mut bd, &g_y, &w_k);
            outer_acc(&mut ba, &lambda2_next, x2);
            outer_acc(&mut bb, &lambda2_next, &w_k);
            let mut g_w = [0.0];
            self.back.d().tr_matvec_acc(&g_y, &mut g_w);
            self.back.b().tr_matvec_acc(&lambda2_next, &mut g_w);

            // w = KAN(v).
            let mut g_v = [0.0];
            backprop_network(&self.mid_kan, &cache, k, &g_w, kan_off, &mut grad, &mut g_v);

            // v = C1 x1 + D1 u  and  x1(k+1) = A1 x1 + B1 u.
            outer_acc(&mut fc, &g_v, x1);
            outer_acc(&mut fd, &g_v, &u_k);
            outer_acc(&mut fa, &lambda1_next, x1);
            outer_acc(&mut fb, &lambda1_next, &u_k);

            let mut lambda1 = vec![0.0; fx];
            self.front.c().tr_matvec_acc(&g_v, &mut lambda1);
            self.front.a().tr_matvec_acc(&lambda1_next, &mut lambda1);
            lambda1_next = lambda1;

            let mut lambda2 = vec![0.0; bx];
            self.back.c().tr_matvec_acc(&g_y, &mut lambda2);
            self.back.a().tr_matvec_acc(&lambda2_next, &mut lambda2);
            lambda2_next = lambda2;
        }

        for (name, m) in [
            ("front.A", &fa),
            ("front.B", &fb),
            ("front.C", &fc),
            ("front.D", &fd),
            ("back.A", &ba),
            ("back.B", &bb),
            ("back.C", &bc),
            ("back.D", &bd),
        ] {
            let o = off(name).expect("linear sections always present");
            grad[o..o + m.as_slice().len()]
                .iter_mut()
                .zip(m.as_slice())
                .for_each(|(g, v)| *g += v);
        }

        let params = self.pack(spec);
        add_penalty_gradients(&layout, &params, penalties, &mut grad);

        let mut final_state = x1s[steps * fx..].to_vec();
        final_state.extend_from_slice(&x2s[steps * bx..]);
        Ok(SegmentEval {
            loss,
            mse,
            grad,
            final_state,
        })
    }

    fn kan_l1(&self) -> f64 {
        self.mid_kan.l1_norm()
    }

    fn linear_frobenius_sq(&self) -> f64 {
        self.front.frobenius_sq() + self.back.frobenius_sq()
    }

    fn update_grids(&mut self, u: &[f64], x0: &[f64]) -> Result<(), DiffError> {
        let fx = self.front.n_x();
        let rollout = self.rollout(u, &x0[..fx], &x0[fx..])?;
        let batch: Vec<Vec<f64>> = rollout.v.iter().map(|&v| vec![v]).collect();
        update_network_grids(&mut self.mid_kan, &batch)
    }

    fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    fn set_normalization(&mut self, n: Normalization) {
        self.normalization = n;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kan::KanNetwork;
    use crate::spline::SplineBasis;
    use crate::ssmodel::{init_stable_linear, LinearSS};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn silverbox_like(seed: u64) -> SsKanModel {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let linear = init_stable_linear(2, 1, 1, seed);
        let kan_f = KanNetwork::init(&[3, 2, 2], &SplineBasis::default_edge_basis(), &mut rng);
        SsKanModel::new(linear, kan_f, None, Normalization::identity()).unwrap()
    }

    #[test]
    fn silverbox_preset_parameter_count_by_enumeration() {
        let model = silverbox_like(1);
        let layout = model.layout(PackSpec::default());
        // Enumerate: linear part 2*2 + 2*1 + 1*2 + 1*1 = 9; the KAN has
        // 3*2 + 2*2 = 10 edges of 8 coefficients + w_b + w_s each.
        let mut expected = 2 * 2 + 2 * 1 + 1 * 2 + 1 * 1;
        for layer in model.kan_f.layers() {
            for edge in layer.edges() {
                expected += edge.coeffs().len() + 2;
            }
        }
        assert_eq!(expected, 9 + 100);
        assert_eq!(layout.total(), expected);
        assert_eq!(model.pack(PackSpec::default()).len(), expected);
    }

    #[test]
    fn pack_unpack_round_trip_is_bit_identical() {
        let model = silverbox_like(2);
        let spec = PackSpec::default();
        let params = model.pack(spec);
        let mut other = silverbox_like(3);
        other.unpack(&params, spec).unwrap();
        assert_eq!(other.pack(spec), params);

        // Perturbing one flat entry changes exactly one scalar parameter.
        for k in [0, 8, 9, 30, params.len() - 1] {
            let mut perturbed = params.clone();
            perturbed[k] += 0.5;
            let mut m2 = silverbox_like(2);
            m2.unpack(&perturbed, spec).unwrap();
            let repacked = m2.pack(spec);
            let diffs = repacked
                .iter()
                .zip(&params)
                .filter(|(a, b)| a != b)
                .count();
            assert_eq!(diffs, 1);
        }
    }

    #[test]
    fn unpack_rejects_wrong_length() {
        let mut model = silverbox_like(2);
        let err = model.unpack(&[0.0; 5], PackSpec::default()).unwrap_err();
        assert!(matches!(err, DiffError::LengthMismatch { expected: 109, got: 5 }));
    }

    #[test]
    fn zero_residual_zero_penalty_gives_zero_loss() {
        // Rollout the model itself to build matching data.
        let model = silverbox_like(5);
        let mut rng = ChaCha12Rng::seed_from_u64(50);
        let u: Vec<f64> = (0..30).map(|_| rng.gen_range(-0.8..0.8)).collect();
        let sim = model.simulate(&u, &[0.0, 0.0]).unwrap();
        let seg = Segment {
            u: &u,
            y: &sim.y,
            x0: &[0.0, 0.0],
        };
        let eval = model
            .loss_and_gradient(&seg, &Penalties::none(), PackSpec::default())
            .unwrap();
        assert_eq!(eval.loss, 0.0);
        let layout = model.layout(PackSpec::default());
        for name in ["C", "D"] {
            let s = layout.section(name).unwrap();
            for g in &eval.grad[s.offset..s.offset + s.len] {
                assert_eq!(*g, 0.0, "{name} gradient must vanish at zero residual");
            }
        }
    }

    #[test]
    fn single_step_linear_gradient_matches_closed_form() {
        // One step from x0: y = C x0 + D u; mse = (y - y_d)^2.
        let linear = init_stable_linear(2, 1, 1, 9);
        let kan_f = KanNetwork::zero(&[3, 2], &SplineBasis::default_edge_basis());
        let model = SsKanModel::new(linear, kan_f, None, Normalization::identity()).unwrap();
        let x0 = [0.4, -0.7];
        let u = [0.9];
        let y_data = [0.2];
        let seg = Segment {
            u: &u,
            y: &y_data,
            x0: &x0,
        };
        let eval = model
            .loss_and_gradient(&seg, &Penalties::none(), PackSpec::default())
            .unwrap();
        let y = model.linear.c().get(0, 0) * x0[0]
            + model.linear.c().get(0, 1) * x0[1]
            + model.linear.d().get(0, 0) * u[0];
        let r = y - y_data[0];
        let layout = model.layout(PackSpec::default());
        let c_off = layout.section("C").unwrap().offset;
        let d_off = layout.section("D").unwrap().offset;
        assert!((eval.grad[c_off] - 2.0 * r * x0[0]).abs() < 1e-10);
        assert!((eval.grad[c_off + 1] - 2.0 * r * x0[1]).abs() < 1e-10);
        assert!((eval.grad[d_off] - 2.0 * r * u[0]).abs() < 1e-10);
        // A and B never influence a single-step output.
        let a_off = layout.section("A").unwrap().offset;
        for g in &eval.grad[a_off..a_off + 6] {
            assert_eq!(*g, 0.0);
        }
    }

    /// Central finite differences over the packed parameters.
    fn finite_difference_grad<M: TrainableModel + Clone>(
        model: &M,
        seg: &Segment,
        pen: &Penalties,
        spec: PackSpec,
        step: f64,
    ) -> Vec<f64> {
        let params = model.pack(spec);
        let mut fd = vec![0.0; params.len()];
        for i in 0..params.len() {
            let mut up = model.clone();
            let mut p = params.clone();
            p[i] += step;
            up.unpack(&p, spec).unwrap();
            let loss_up = up.loss_and_gradient(seg, pen, spec).unwrap().loss;
            let mut dn = model.clone();
            p[i] -= 2.0 * step;
            dn.unpack(&p, spec).unwrap();
            let loss_dn = dn.loss_and_gradient(seg, pen, spec).unwrap().loss;
            fd[i] = (loss_up - loss_dn) / (2.0 * step);
        }
        fd
    }

    fn assert_grad_close(analytic: &[f64], fd: &[f64]) {
        for (i, (a, f)) in analytic.iter().zip(fd).enumerate() {
            let denom = a.abs().max(f.abs());
            if denom < 1e-8 {
                assert!(
                    (a - f).abs() < 1e-8,
                    "component {i}: {a} vs fd {f} (absolute)"
                );
            } else {
                assert!(
                    (a - f).abs() / denom < 1e-4,
                    "component {i}: {a} vs fd {f} (relative {})",
                    (a - f).abs() / denom
                );
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences_general_model() {
        let mut rng = ChaCha12Rng::seed_from_u64(123);
        let model = silverbox_like(11);
        let u: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x0 = [0.1, -0.2];
        let seg = Segment {
            u: &u,
            y: &y,
            x0: &x0,
        };
        let pen = Penalties {
            lambda_l1: 1e-4,
            lambda_l2: 1e-4,
        };
        let spec = PackSpec::default();
        let eval = model.loss_and_gradient(&seg, &pen, spec).unwrap();
        let fd = finite_difference_grad(&model, &seg, &pen, spec, 1e-5);
        assert_grad_close(&eval.grad, &fd);
    }

    #[test]
    fn gradient_matches_finite_differences_with_kan_g() {
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let linear = init_stable_linear(2, 1, 1, 21);
        let basis = SplineBasis::default_edge_basis();
        let kan_f = KanNetwork::init(&[3, 2, 2], &basis, &mut rng);
        let mut kan_g = KanNetwork::init(&[3, 1], &basis, &mut rng);
        for layer in kan_g.layers_mut() {
            for e in layer.edges_mut() {
                e.set_w_b(0.3);
            }
        }
        let model =
            SsKanModel::new(linear, kan_f, Some(kan_g), Normalization::identity()).unwrap();
        let u: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let seg = Segment {
            u: &u,
            y: &y,
            x0: &[0.0, 0.0],
        };
        let pen = Penalties {
            lambda_l1: 0.0,
            lambda_l2: 1e-3,
        };
        let spec = PackSpec::default();
        let eval = model.loss_and_gradient(&seg, &pen, spec).unwrap();
        let fd = finite_difference_grad(&model, &seg, &pen, spec, 1e-5);
        assert_grad_close(&eval.grad, &fd);
    }

    #[test]
    fn gradient_matches_finite_differences_cascade() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let front = crate::ssmodel::FilterSpec {
            b: vec![0.2, 0.1, 0.0, 0.0],
            a: vec![1.0, -0.5, 0.06, 0.0],
        };
        let back = crate::ssmodel::FilterSpec {
            b: vec![0.3, 0.0, 0.1, 0.0],
            a: vec![1.0, -0.4, 0.03, 0.0],
        };
        let model = crate::ssmodel::init_cascade_from_filters(
            &front,
            &back,
            3,
            &SplineBasis::default_edge_basis(),
        )
        .unwrap();
        let u: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..20).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let seg = Segment {
            u: &u,
            y: &y,
            x0: &[0.0; 6],
        };
        let pen = Penalties {
            lambda_l1: 1e-4,
            lambda_l2: 1e-4,
        };
        let spec = PackSpec::default();
        let eval = model.loss_and_gradient(&seg, &pen, spec).unwrap();
        let fd = finite_difference_grad(&model, &seg, &pen, spec, 1e-5);
        assert_grad_close(&eval.grad, &fd);
    }

    #[test]
    fn l1_subgradient_is_zero_at_zero_and_loss_moves_linearly() {
        let linear = LinearSS::zeros(1, 1, 1);
        let kan_f = KanNetwork::zero(&[2, 1], &SplineBasis::default_edge_basis());
        let model = SsKanModel::new(linear, kan_f, None, Normalization::identity()).unwrap();
        let seg = Segment {
            u: &[0.5],
            y: &[0.0],
            x0: &[0.0],
        };
        let pen = Penalties {
            lambda_l1: 0.3,
            lambda_l2: 0.0,
        };
        let spec = PackSpec::default();
        let eval = model.loss_and_gradient(&seg, &pen, spec).unwrap();
        let layout = model.layout(spec);
        let kan = layout.section("kan_f").unwrap();
        // Every KAN parameter is zero, so the L1 subgradient vanishes there.
        // Data-term gradients for spline coefficients can be nonzero, but
        // the w_b entry sees silu(0.5) pressure only from the data term,
        // which is zero here (y matches: all params zero -> y = 0 = data).
        for g in &eval.grad[kan.offset..kan.offset + kan.len] {
            assert_eq!(*g, 0.0);
        }
        // Perturbing a zero parameter by +/- delta moves the L1 term by
        // lambda * delta.
        let params = model.pack(spec);
        let delta = 1e-3;
        for sgn in [1.0, -1.0] {
            let mut p = params.clone();
            p[kan.offset] += sgn * delta;
            let mut m = model.clone();
            m.unpack(&p, spec).unwrap();
            let with = m.loss_and_gradient(&seg, &pen, spec).unwrap().loss;
            let l1_change = with - eval.loss;
            // The spline perturbation also changes the data term; isolate
            // by computing with lambda = 0.
            let without_pen = m
                .loss_and_gradient(&seg, &Penalties::none(), spec)
                .unwrap()
                .loss
                - model
                    .loss_and_gradient(&seg, &Penalties::none(), spec)
                    .unwrap()
                    .loss;
            assert!(
                (l1_change - without_pen - pen.lambda_l1 * delta).abs() < 1e-12,
                "L1 term change mismatch for sign {sgn}"
            );
        }
    }

    #[test]
    fn penalty_gradient_scales_linearly_in_lambda() {
        let model = silverbox_like(31);
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let u: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let seg = Segment {
            u: &u,
            y: &y,
            x0: &[0.0, 0.0],
        };
        let spec = PackSpec::default();
        let g0 = model
            .loss_and_gradient(&seg, &Penalties::none(), spec)
            .unwrap()
            .grad;
        let layout = model.layout(spec);
        let a_sec = layout.section("A").unwrap();
        for lambda in [0.5, 2.0] {
            let pen = Penalties {
                lambda_l1: 0.0,
                lambda_l2: lambda,
            };
            let g = model.loss_and_gradient(&seg, &pen, spec).unwrap().grad;
            let params = model.pack(spec);
            for i in a_sec.offset..a_sec.offset + a_sec.len {
                let expect = g0[i] + lambda * 2.0 * params[i];
                assert!((g[i] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn evaluation_is_deterministic() {
        let model = silverbox_like(41);
        let u: Vec<f64> = (0..25).map(|k| (k as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..25).map(|k| (k as f64 * 0.21).cos()).collect();
        let seg = Segment {
            u: &u,
            y: &y,
            x0: &[0.0, 0.0],
        };
        let pen = Penalties {
            lambda_l1: 1e-4,
            lambda_l2: 1e-4,
        };
        let a = model
            .loss_and_gradient(&seg, &pen, PackSpec::default())
            .unwrap();
        let b = model
            .loss_and_gradient(&seg, &pen, PackSpec::default())
            .unwrap();
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.grad, b.grad);
    }

    #[test]
    fn frozen_kans_shrink_the_layout() {
        let model = silverbox_like(51);
        let frozen = PackSpec {
            include_kans: false,
        };
        assert_eq!(model.layout(frozen).total(), 9);
        let eval_spec = model.layout(PackSpec::default());
        assert_eq!(eval_spec.total(), 109);
    }
}
