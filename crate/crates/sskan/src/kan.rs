//! Kolmogorov-Arnold networks: learnable univariate edge functions
//! composed into layers and networks.
//!
//! Every edge computes `phi(x) = w_b * silu(x) + w_s * sum_i c_i B_i(x)`;
//! a layer maps its input vector through an `n_out x n_in` grid of edges
//! and sums per output node; a network chains layers.

use crate::spline::{update_grid, window_dot, SplineBasis, SplineError};
use rand::Rng;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum KanError {
    #[error("dimension-mismatch: expected input of width {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty-batch: observed ranges need at least one input vector")]
    EmptyBatch,
    #[error("chain-mismatch: layer {layer} outputs {out} values but the next layer expects {next_in}")]
    ChainMismatch {
        layer: usize,
        out: usize,
        next_in: usize,
    },
    #[error(transparent)]
    Spline(#[from] SplineError),
}

/// `x * sigmoid(x)`, the residual activation carried by every edge.
pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Derivative of [`silu`]: `sigmoid(x) * (1 + x * (1 - sigmoid(x)))`.
pub fn silu_derivative(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// One learnable univariate function.
#[derive(Debug, Clone)]
pub struct KanEdge {
    basis: Arc<SplineBasis>,
    coeffs: Vec<f64>,
    w_b: f64,
    w_s: f64,
}

impl KanEdge {
    pub fn new(basis: Arc<SplineBasis>, coeffs: Vec<f64>, w_b: f64, w_s: f64) -> Self {
        assert_eq!(
            coeffs.len(),
            basis.basis_count(),
            "coefficient count must equal the basis count"
        );
        KanEdge {
            basis,
            coeffs,
            w_b,
            w_s,
        }
    }

    /// Edge with all parameters zero on the given basis.
    pub fn zero(basis: Arc<SplineBasis>) -> Self {
        let n = basis.basis_count();
        KanEdge::new(basis, vec![0.0; n], 0.0, 0.0)
    }

    pub fn basis(&self) -> &SplineBasis {
        &self.basis
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn w_b(&self) -> f64 {
        self.w_b
    }

    pub fn w_s(&self) -> f64 {
        self.w_s
    }

    pub fn set_w_b(&mut self, v: f64) {
        self.w_b = v;
    }

    pub fn set_w_s(&mut self, v: f64) {
        self.w_s = v;
    }

    /// `w_b * silu(x) + w_s * sum_i c_i B_i(x)`.
    pub fn forward(&self, x: f64) -> f64 {
        let spline = match self.basis.window(x) {
            Some(w) => window_dot(&w, &self.coeffs),
            None => 0.0,
        };
        self.w_b * silu(x) + self.w_s * spline
    }

    /// Value together with the derivative with respect to the input.
    pub fn forward_with_input_grad(&self, x: f64) -> (f64, f64) {
        let (spline, spline_der) = match self.basis.window_with_derivative(x) {
            Some((w, dw)) => (window_dot(&w, &self.coeffs), window_dot(&dw, &self.coeffs)),
            None => (0.0, 0.0),
        };
        (
            self.w_b * silu(x) + self.w_s * spline,
            self.w_b * silu_derivative(x) + self.w_s * spline_der,
        )
    }

    /// Replaces the basis and coefficients after a grid update.
    pub fn set_spline(&mut self, basis: Arc<SplineBasis>, coeffs: Vec<f64>) {
        assert_eq!(coeffs.len(), basis.basis_count());
        self.basis = basis;
        self.coeffs = coeffs;
    }

    /// Re-spans this edge's grid to an observed input range, preserving
    /// the represented function on the overlap.
    pub fn update_grid(&mut self, observed_lo: f64, observed_hi: f64) -> Result<(), SplineError> {
        let (basis, coeffs) = update_grid(&self.basis, &self.coeffs, observed_lo, observed_hi)?;
        self.set_spline(Arc::new(basis), coeffs);
        Ok(())
    }
}

/// A matrix of edges: output `j` is the sum of `edges[j][i]` applied to
/// input `i`.
#[derive(Debug, Clone)]
pub struct KanLayer {
    n_in: usize,
    n_out: usize,
    edges: Vec<KanEdge>,
}

impl KanLayer {
    pub fn from_edges(n_in: usize, n_out: usize, edges: Vec<KanEdge>) -> Self {
        assert_eq!(edges.len(), n_in * n_out, "edge grid dimension mismatch");
        KanLayer {
            n_in,
            n_out,
            edges,
        }
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    /// Edge feeding output `j` from input `i`.
    pub fn edge(&self, j: usize, i: usize) -> &KanEdge {
        &self.edges[j * self.n_in + i]
    }

    pub fn edge_mut(&mut self, j: usize, i: usize) -> &mut KanEdge {
        &mut self.edges[j * self.n_in + i]
    }

    /// Edges in row-major order (output-major).
    pub fn edges(&self) -> &[KanEdge] {
        &self.edges
    }

    pub fn edges_mut(&mut self) -> &mut [KanEdge] {
        &mut self.edges
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, KanError> {
        if x.len() != self.n_in {
            return Err(KanError::DimensionMismatch {
                expected: self.n_in,
                got: x.len(),
            });
        }
        let mut out = vec![0.0; self.n_out];
        self.forward_into(x, &mut out);
        Ok(out)
    }

    pub(crate) fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        for j in 0..self.n_out {
            let mut acc = 0.0;
            for i in 0..self.n_in {
                acc += self.edges[j * self.n_in + i].forward(x[i]);
            }
            out[j] = acc;
        }
    }
}

/// Layers chained so that each layer's output width feeds the next.
#[derive(Debug, Clone)]
pub struct KanNetwork {
    layers: Vec<KanLayer>,
}

impl KanNetwork {
    pub fn from_layers(layers: Vec<KanLayer>) -> Result<Self, KanError> {
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].n_out != pair[1].n_in {
                return Err(KanError::ChainMismatch {
                    layer: l,
                    out: pair[0].n_out,
                    next_in: pair[1].n_in,
                });
            }
        }
        Ok(KanNetwork { layers })
    }

    /// Randomly initialized network over `widths` (input, hidden..., output).
    ///
    /// Spline coefficients start at `uniform(-0.1/sqrt(n), 0.1/sqrt(n))`
    /// with `n` the basis count, `w_s = 1` and `w_b = 0`, so the network is
    /// a near-zero perturbation and the surrounding model stays close to
    /// its stable linear initialization. The SiLU residual enters once
    /// `w_b` trains away from zero.
    pub fn init(widths: &[usize], basis: &SplineBasis, rng: &mut impl Rng) -> Self {
        assert!(widths.len() >= 2, "a network needs at least one layer");
        let shared = Arc::new(basis.clone());
        let n = shared.basis_count();
        let half_width = 0.1 / (n as f64).sqrt();
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for w in widths.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let mut edges = Vec::with_capacity(n_in * n_out);
            for _ in 0..n_in * n_out {
                let coeffs: Vec<f64> = (0..n)
                    .map(|_| rng.gen_range(-half_width..half_width))
                    .collect();
                edges.push(KanEdge::new(Arc::clone(&shared), coeffs, 0.0, 1.0));
            }
            layers.push(KanLayer::from_edges(n_in, n_out, edges));
        }
        KanNetwork { layers }
    }

    /// Network with every parameter zero (identically zero function).
    pub fn zero(widths: &[usize], basis: &SplineBasis) -> Self {
        assert!(widths.len() >= 2);
        let shared = Arc::new(basis.clone());
        let layers = widths
            .windows(2)
            .map(|w| {
                let edges = (0..w[0] * w[1])
                    .map(|_| KanEdge::zero(Arc::clone(&shared)))
                    .collect();
                KanLayer::from_edges(w[0], w[1], edges)
            })
            .collect();
        KanNetwork { layers }
    }

    pub fn layers(&self) -> &[KanLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [KanLayer] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].n_out
    }

    /// Widths as (input, hidden..., output).
    pub fn widths(&self) -> Vec<usize> {
        let mut w: Vec<usize> = self.layers.iter().map(|l| l.n_in).collect();
        w.push(self.output_width());
        w
    }

    /// Sequential composition of the layer maps.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, KanError> {
        if x.len() != self.input_width() {
            return Err(KanError::DimensionMismatch {
                expected: self.input_width(),
                got: x.len(),
            });
        }
        let mut current = x.to_vec();
        for layer in &self.layers {
            let mut next = vec![0.0; layer.n_out];
            layer.forward_into(&current, &mut next);
            current = next;
        }
        Ok(current)
    }

    /// Sum of absolute values of every spline coefficient, `w_b` and `w_s`.
    pub fn l1_norm(&self) -> f64 {
        let mut acc = 0.0;
        for layer in &self.layers {
            for edge in &layer.edges {
                for c in &edge.coeffs {
                    acc += c.abs();
                }
                acc += edge.w_b.abs();
                acc += edge.w_s.abs();
            }
        }
        acc
    }

    /// Per-edge `(lo, hi)` input ranges over a batch of network inputs,
    /// indexed `[layer][j * n_in + i]` like the edge grids.
    pub fn observed_ranges(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<(f64, f64)>>, KanError> {
        if inputs.is_empty() {
            return Err(KanError::EmptyBatch);
        }
        let mut ranges: Vec<Vec<(f64, f64)>> = self
            .layers
            .iter()
            .map(|l| vec![(f64::INFINITY, f64::NEG_INFINITY); l.edges.len()])
            .collect();
        for input in inputs {
            if input.len() != self.input_width() {
                return Err(KanError::DimensionMismatch {
                    expected: self.input_width(),
                    got: input.len(),
                });
            }
            let mut current = input.clone();
            for (l, layer) in self.layers.iter().enumerate() {
                for j in 0..layer.n_out {
                    for i in 0..layer.n_in {
                        let slot = &mut ranges[l][j * layer.n_in + i];
                        slot.0 = slot.0.min(current[i]);
                        slot.1 = slot.1.max(current[i]);
                    }
                }
                let mut next = vec![0.0; layer.n_out];
                layer.forward_into(&current, &mut next);
                current = next;
            }
        }
        Ok(ranges)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn basis() -> SplineBasis {
        SplineBasis::default_edge_basis()
    }

    #[test]
    fn silu_reference_values() {
        assert_eq!(silu(0.0), 0.0);
        assert!(silu(-50.0).abs() < 1e-20);
        // 1 / (1 + e^{-1}) evaluated independently.
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((silu(1.0) - expected).abs() < 1e-15);
        assert!((silu(1.0) - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn silu_derivative_matches_finite_difference() {
        let h = 1e-6;
        for x in [-3.0, -0.7, 0.0, 0.4, 2.5] {
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((silu_derivative(x) - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn edge_with_zero_spline_is_pure_silu() {
        let e = KanEdge::new(Arc::new(basis()), vec![0.0; 8], 1.0, 1.0);
        for x in [-2.0, -0.3, 0.0, 1.4, 9.0] {
            assert_eq!(e.forward(x), silu(x));
        }
    }

    #[test]
    fn edge_spline_part_fits_square() {
        let b = basis();
        let xs: Vec<f64> = (0..100).map(|s| -1.0 + 2.0 * s as f64 / 99.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x * x).collect();
        let coeffs = b.fit_coeffs(&xs, &ys);
        let e = KanEdge::new(Arc::new(b), coeffs, 0.0, 1.0);
        for s in 0..200 {
            let x = -1.0 + 2.0 * s as f64 / 199.0;
            assert!((e.forward(x) - x * x).abs() < 1e-6, "x^2 fit off at {x}");
        }
    }

    #[test]
    fn edge_is_linear_in_coefficients() {
        let b = Arc::new(basis());
        let a: Vec<f64> = (0..8).map(|i| 0.1 * i as f64 - 0.3).collect();
        let c: Vec<f64> = (0..8).map(|i| (-0.2f64).powi(i as i32 % 3 + 1)).collect();
        let sum: Vec<f64> = a.iter().zip(&c).map(|(x, y)| x + y).collect();
        let ea = KanEdge::new(Arc::clone(&b), a, 0.0, 1.0);
        let ec = KanEdge::new(Arc::clone(&b), c, 0.0, 1.0);
        let es = KanEdge::new(b, sum, 0.0, 1.0);
        for x in [-0.9, -0.1, 0.33, 0.8] {
            assert!((es.forward(x) - (ea.forward(x) + ec.forward(x))).abs() < 1e-12);
        }
    }

    #[test]
    fn single_edge_layer_equals_edge() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let net = KanNetwork::init(&[1, 1], &basis(), &mut rng);
        let layer = &net.layers()[0];
        for x in [-1.0, 0.2, 0.9] {
            let via_layer = layer.forward(&[x]).unwrap();
            assert_eq!(via_layer[0], layer.edge(0, 0).forward(x));
        }
    }

    #[test]
    fn layer_matches_double_loop_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let net = KanNetwork::init(&[2, 3], &basis(), &mut rng);
        let layer = &net.layers()[0];
        let x = [0.37, -0.81];
        let out = layer.forward(&x).unwrap();
        for j in 0..3 {
            let mut oracle = 0.0;
            for i in 0..2 {
                oracle += layer.edge(j, i).forward(x[i]);
            }
            assert!((out[j] - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_rejects_wrong_width() {
        let net = KanNetwork::zero(&[2, 2], &basis());
        assert!(matches!(
            net.layers()[0].forward(&[1.0]),
            Err(KanError::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn layer_is_additive_over_inputs() {
        // With the second input pinned at a common root of its edges, the
        // output depends on the first input only.
        let b = Arc::new(basis());
        let mut edges = Vec::new();
        for j in 0..2 {
            for i in 0..2 {
                let mut e = KanEdge::zero(Arc::clone(&b));
                if i == 0 {
                    e.set_w_b(1.0 + j as f64);
                }
                edges.push(e);
            }
        }
        let layer = KanLayer::from_edges(2, 2, edges);
        let base = layer.forward(&[0.5, 0.0]).unwrap();
        for second in [-0.4, 0.1, 0.8] {
            let out = layer.forward(&[0.5, second]).unwrap();
            assert_eq!(out, base);
        }
    }

    #[test]
    fn network_composition_and_zero_network() {
        let zero = KanNetwork::zero(&[3, 2, 2], &basis());
        assert_eq!(zero.forward(&[0.3, -0.5, 1.0]).unwrap(), vec![0.0, 0.0]);

        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let single = KanNetwork::init(&[2, 3], &basis(), &mut rng);
        let x = [0.11, -0.62];
        assert_eq!(
            single.forward(&x).unwrap(),
            single.layers()[0].forward(&x).unwrap()
        );
    }

    #[test]
    fn two_layer_identity_composition() {
        // Second layer fitted to the identity passes the first layer's
        // output through nearly unchanged.
        let b = basis();
        let xs: Vec<f64> = (0..100).map(|s| -1.0 + 2.0 * s as f64 / 99.0).collect();
        let ident = b.fit_coeffs(&xs, &xs);
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let first = KanNetwork::init(&[2, 2], &b, &mut rng).layers()[0].clone();
        let second = KanLayer::from_edges(
            2,
            2,
            vec![
                KanEdge::new(Arc::new(b.clone()), ident.clone(), 0.0, 1.0),
                KanEdge::zero(Arc::new(b.clone())),
                KanEdge::zero(Arc::new(b.clone())),
                KanEdge::new(Arc::new(b.clone()), ident.clone(), 0.0, 1.0),
            ],
        );
        let net = KanNetwork::from_layers(vec![first.clone(), second]).unwrap();
        for x in [[-0.8, 0.2], [0.05, 0.4], [0.6, -0.33]] {
            let mid = first.forward(&x).unwrap();
            let out = net.forward(&x).unwrap();
            // First-layer outputs stay well inside [-1, 1] for the small init.
            assert!((out[0] - mid[0]).abs() < 1e-4);
            assert!((out[1] - mid[1]).abs() < 1e-4);
        }
    }

    #[test]
    fn l1_norm_examples() {
        let zero = KanNetwork::zero(&[2, 2], &basis());
        assert_eq!(zero.l1_norm(), 0.0);

        let b2 = SplineBasis::uniform(1, -1.0, 1.0, 1).unwrap();
        let edge = KanEdge::new(Arc::new(b2), vec![1.0, -2.0], 0.5, -1.0);
        let layer = KanLayer::from_edges(1, 1, vec![edge]);
        let net = KanNetwork::from_layers(vec![layer]).unwrap();
        assert_eq!(net.l1_norm(), 4.5);
    }

    #[test]
    fn l1_norm_matches_enumeration_and_is_homogeneous() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let mut net = KanNetwork::init(&[3, 2, 1], &basis(), &mut rng);
        for layer in net.layers_mut() {
            for e in layer.edges_mut() {
                e.set_w_b(rng.gen_range(-1.0..1.0));
                e.set_w_s(rng.gen_range(-1.0..1.0));
            }
        }
        let mut oracle = 0.0;
        for layer in net.layers() {
            for e in layer.edges() {
                oracle += e.coeffs().iter().map(|c| c.abs()).sum::<f64>();
                oracle += e.w_b().abs() + e.w_s().abs();
            }
        }
        assert!((net.l1_norm() - oracle).abs() < 1e-12);

        for s in [2.0, -3.0] {
            let mut scaled = net.clone();
            for layer in scaled.layers_mut() {
                for e in layer.edges_mut() {
                    for c in e.coeffs_mut() {
                        *c *= s;
                    }
                    let wb = e.w_b();
                    let ws = e.w_s();
                    e.set_w_b(wb * s);
                    e.set_w_s(ws * s);
                }
            }
            assert!((scaled.l1_norm() - s.abs() * net.l1_norm()).abs() < 1e-9);
        }
    }

    #[test]
    fn observed_ranges_examples() {
        let net = KanNetwork::zero(&[1, 1], &basis());
        let same = net.observed_ranges(&vec![vec![0.25]; 4]).unwrap();
        assert_eq!(same[0][0], (0.25, 0.25));

        let batch = vec![vec![-1.0], vec![0.0], vec![2.0]];
        let r = net.observed_ranges(&batch).unwrap();
        assert_eq!(r[0][0], (-1.0, 2.0));

        assert!(matches!(
            net.observed_ranges(&[]),
            Err(KanError::EmptyBatch)
        ));
    }

    #[test]
    fn observed_ranges_second_layer_tracks_first_layer_outputs() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let net = KanNetwork::init(&[2, 2, 1], &basis(), &mut rng);
        let batch: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![(i as f64 / 19.0) * 2.0 - 1.0, ((i * 7) % 20) as f64 / 10.0 - 1.0])
            .collect();
        let ranges = net.observed_ranges(&batch).unwrap();
        // Recompute first-layer outputs independently.
        let first = &net.layers()[0];
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for input in &batch {
            let out = first.forward(input).unwrap();
            for i in 0..2 {
                lo[i] = lo[i].min(out[i]);
                hi[i] = hi[i].max(out[i]);
            }
        }
        let second = &net.layers()[1];
        for j in 0..second.n_out() {
            for i in 0..second.n_in() {
                let got = ranges[1][j * second.n_in() + i];
                assert!((got.0 - lo[i]).abs() < 1e-15);
                assert!((got.1 - hi[i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let net = KanNetwork::init(&[3, 2, 2], &basis(), &mut rng);
        let x = [0.21, -0.43, 0.77];
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        assert_eq!(a, b);
    }
}
