//! Interpretability tooling: univariate slices through trained KANs,
//! polynomial fits, term-dominance shares and affine-aligned comparison
//! against oracle nonlinearities.
//!
//! A slice pins all but one network input at fixed values (typically the
//! training-data means) and sweeps the remaining coordinate over a grid;
//! the resulting curves are what make the learned model readable.

use crate::kan::{KanError, KanNetwork};
use crate::linalg::lstsq;
use nalgebra::DMatrix;
use serde::Serialize;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum InterpError {
    #[error("index-out-of-range: varied input {index} of a {width}-input network")]
    IndexOutOfRange { index: usize, width: usize },
    #[error("invalid-grid: {0}")]
    InvalidGrid(String),
    #[error("rank-deficient: the sample grid cannot support a degree-{degree} fit")]
    RankDeficient { degree: usize },
    #[error("all-zero-coefficients: dominance shares are undefined")]
    AllZeroCoefficients,
    #[error("degenerate-curve: the learned curve is constant; reporting the raw error")]
    DegenerateCurve,
    #[error("empty-report: refusing to emit files for an empty slice")]
    EmptyReport,
    #[error("io-error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Kan(#[from] KanError),
}

/// Polynomial fit of one slice channel, coefficients in ascending order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolyFit {
    pub degree: usize,
    pub coeffs: Vec<f64>,
    pub residual_rms: f64,
}

/// Best affine correspondence between a learned curve and an oracle curve.
///
/// The input map sends learned abscissae onto the oracle axis
/// (`v = in_scale * x + in_offset`); the output map rescales the learned
/// values (`out_scale * f + out_offset`). `max_abs_error` is the aligned
/// sup-norm discrepancy over the oracle grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AffineAlignment {
    pub in_scale: f64,
    pub in_offset: f64,
    pub out_scale: f64,
    pub out_offset: f64,
    pub max_abs_error: f64,
    /// Set when the learned curve was constant against a varying oracle;
    /// the reported error is then unaligned.
    pub degenerate: bool,
}

/// One univariate slice through a network.
#[derive(Debug, Clone, Serialize)]
pub struct SliceReport {
    pub varied_index: usize,
    pub varied_name: String,
    pub fixed_values: Vec<f64>,
    pub grid: Vec<f64>,
    /// One response curve per network output channel.
    pub responses: Vec<Vec<f64>>,
    pub polyfit: Option<PolyFit>,
    pub alignment: Option<AffineAlignment>,
}

/// Uniform slice grid of `n` points over `[lo, hi]`.
pub fn slice_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|s| lo + (hi - lo) * s as f64 / (n - 1) as f64)
        .collect()
}

/// Evaluates the network over `grid` with input `varied_index` swept and
/// the others pinned at `fixed_values`.
pub fn slice(
    net: &KanNetwork,
    varied_index: usize,
    varied_name: &str,
    fixed_values: &[f64],
    grid: &[f64],
) -> Result<SliceReport, InterpError> {
    let width = net.input_width();
    if varied_index >= width {
        return Err(InterpError::IndexOutOfRange {
            index: varied_index,
            width,
        });
    }
    if fixed_values.len() != width {
        return Err(InterpError::InvalidGrid(format!(
            "fixed values must cover all {width} inputs, got {}",
            fixed_values.len()
        )));
    }
    if grid.len() < 2 || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(InterpError::InvalidGrid(
            "the grid must be strictly increasing with at least 2 points".into(),
        ));
    }
    let mut responses = vec![Vec::with_capacity(grid.len()); net.output_width()];
    let mut input = fixed_values.to_vec();
    for &x in grid {
        input[varied_index] = x;
        let out = net.forward(&input)?;
        for (c, v) in out.iter().enumerate() {
            responses[c].push(*v);
        }
    }
    Ok(SliceReport {
        varied_index,
        varied_name: varied_name.to_string(),
        fixed_values: fixed_values.to_vec(),
        grid: grid.to_vec(),
        responses,
        polyfit: None,
        alignment: None,
    })
}

/// Ordinary least-squares polynomial fit; returns ascending coefficients
/// and the residual RMS.
pub fn polyfit(xs: &[f64], ys: &[f64], degree: usize) -> Result<PolyFit, InterpError> {
    if xs.len() != ys.len() || xs.len() <= degree {
        return Err(InterpError::RankDeficient { degree });
    }
    let mut design = DMatrix::zeros(xs.len(), degree + 1);
    for (r, &x) in xs.iter().enumerate() {
        let mut pow = 1.0;
        for c in 0..=degree {
            design[(r, c)] = pow;
            pow *= x;
        }
    }
    // A degenerate grid (too few distinct abscissae) shows up as rank loss.
    let svd = design.clone().svd(false, false);
    let max_sv = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let rank = svd
        .singular_values
        .iter()
        .filter(|s| **s > 1e-12 * max_sv)
        .count();
    if rank < degree + 1 {
        return Err(InterpError::RankDeficient { degree });
    }
    let coeffs = lstsq(&design, ys);
    let mut sq = 0.0;
    for (r, &x) in xs.iter().enumerate() {
        let mut fit = 0.0;
        let mut pow = 1.0;
        for c in 0..=degree {
            fit += coeffs[c] * pow;
            pow *= x;
        }
        let res = fit - ys[r];
        sq += res * res;
    }
    Ok(PolyFit {
        degree,
        coeffs,
        residual_rms: (sq / xs.len() as f64).sqrt(),
    })
}

impl SliceReport {
    /// Fits channel `channel` with a polynomial and stores the result.
    pub fn fit_channel(&mut self, channel: usize, degree: usize) -> Result<&PolyFit, InterpError> {
        let fit = polyfit(&self.grid, &self.responses[channel], degree)?;
        self.polyfit = Some(fit);
        Ok(self.polyfit.as_ref().unwrap())
    }

    /// Peak-to-peak extent of one response channel.
    pub fn channel_range(&self, channel: usize) -> f64 {
        let ys = &self.responses[channel];
        let lo = ys.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        hi - lo
    }
}

/// Relative weight of each polynomial term at the domain boundary:
/// `share_j = |c_j| r^j / sum_i |c_i| r^i`.
pub fn dominance(coeffs: &[f64], half_width: f64) -> Result<Vec<f64>, InterpError> {
    let mut weights = Vec::with_capacity(coeffs.len());
    let mut pow = 1.0;
    for c in coeffs {
        weights.push(c.abs() * pow);
        pow *= half_width;
    }
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        return Err(InterpError::AllZeroCoefficients);
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

fn interp_clamped(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[xs.len() - 1] {
        return ys[ys.len() - 1];
    }
    let mut hi = xs.partition_point(|v| *v < x);
    if hi == 0 {
        hi = 1;
    }
    let lo = hi - 1;
    let t = (x - xs[lo]) / (xs[hi] - xs[lo]);
    ys[lo] + t * (ys[hi] - ys[lo])
}

/// Sum of squared errors of the best output-affine match for a candidate
/// input map, plus that output map.
fn output_fit(
    learned_x: &[f64],
    learned_y: &[f64],
    oracle_x: &[f64],
    oracle_y: &[f64],
    in_scale: f64,
    in_offset: f64,
) -> (f64, f64, f64) {
    let n = oracle_x.len() as f64;
    let mut sl = 0.0;
    let mut sw = 0.0;
    let mut sll = 0.0;
    let mut slw = 0.0;
    let mut values = Vec::with_capacity(oracle_x.len());
    for (&v, &w) in oracle_x.iter().zip(oracle_y) {
        let x = (v - in_offset) / in_scale;
        let l = interp_clamped(learned_x, learned_y, x);
        values.push(l);
        sl += l;
        sw += w;
        sll += l * l;
        slw += l * w;
    }
    let var = sll - sl * sl / n;
    let (a, b) = if var.abs() < 1e-14 {
        (0.0, sw / n)
    } else {
        let a = (slw - sl * sw / n) / var;
        (a, (sw - a * sl) / n)
    };
    let mut sse = 0.0;
    for (l, &w) in values.iter().zip(oracle_y) {
        let r = a * l + b - w;
        sse += r * r;
    }
    (sse, a, b)
}

fn golden_min(mut f: impl FnMut(f64) -> f64, mut lo: f64, mut hi: f64, iters: usize) -> f64 {
    let phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - phi * (hi - lo);
    let mut d = lo + phi * (hi - lo);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..iters {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - phi * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + phi * (hi - lo);
            fd = f(d);
        }
    }
    0.5 * (lo + hi)
}

/// Least-squares affine correspondence between a learned curve and an
/// oracle curve sampled on their own grids.
///
/// The search runs coordinate descent (golden section per coordinate)
/// over the input map, starting from the map that overlays the two
/// abscissa ranges, with the output map solved in closed form at every
/// candidate. A cascade's internal signal is identifiable only up to
/// affine transformation, which is exactly the freedom granted here.
pub fn affine_align(
    learned_x: &[f64],
    learned_y: &[f64],
    oracle_x: &[f64],
    oracle_y: &[f64],
) -> Result<AffineAlignment, InterpError> {
    if learned_x.len() != learned_y.len()
        || oracle_x.len() != oracle_y.len()
        || learned_x.len() < 2
        || oracle_x.len() < 2
    {
        return Err(InterpError::InvalidGrid(
            "alignment needs two sampled curves with at least 2 points".into(),
        ));
    }
    let l_mean = learned_y.iter().sum::<f64>() / learned_y.len() as f64;
    let l_var = learned_y
        .iter()
        .map(|v| (v - l_mean) * (v - l_mean))
        .sum::<f64>()
        / learned_y.len() as f64;
    let o_mean = oracle_y.iter().sum::<f64>() / oracle_y.len() as f64;
    let o_var = oracle_y
        .iter()
        .map(|v| (v - o_mean) * (v - o_mean))
        .sum::<f64>()
        / oracle_y.len() as f64;
    if l_var < 1e-18 && o_var >= 1e-18 {
        let raw = learned_y
            .iter()
            .zip(oracle_y)
            .map(|(l, w)| (l - w).abs())
            .fold(0.0f64, f64::max);
        return Ok(AffineAlignment {
            in_scale: 1.0,
            in_offset: 0.0,
            out_scale: 1.0,
            out_offset: 0.0,
            max_abs_error: raw,
            degenerate: true,
        });
    }

    let l_span = learned_x[learned_x.len() - 1] - learned_x[0];
    let o_span = oracle_x[oracle_x.len() - 1] - oracle_x[0];
    let s0 = o_span / l_span;
    let mut candidates = Vec::with_capacity(2);
    for dir in [1.0, -1.0] {
        let mut s = dir * s0;
        // Center the ranges onto each other for this orientation.
        let mut o = (oracle_x[0] + oracle_x[oracle_x.len() - 1]) / 2.0
            - s * (learned_x[0] + learned_x[learned_x.len() - 1]) / 2.0;
        let mut sse = output_fit(learned_x, learned_y, oracle_x, oracle_y, s, o).0;
        for _round in 0..12 {
            let lo_s = 0.2 * s.abs();
            let hi_s = 5.0 * s.abs();
            s = dir
                * golden_min(
                    |cand| {
                        output_fit(learned_x, learned_y, oracle_x, oracle_y, dir * cand, o).0
                    },
                    lo_s,
                    hi_s,
                    60,
                );
            let o_width = o_span.abs().max(1e-9);
            o = golden_min(
                |cand| output_fit(learned_x, learned_y, oracle_x, oracle_y, s, cand).0,
                o - o_width,
                o + o_width,
                60,
            );
            sse = output_fit(learned_x, learned_y, oracle_x, oracle_y, s, o).0;
        }
        candidates.push((sse, s, o));
    }
    // Odd or symmetric curves align equally well mirrored; keep the
    // orientation-preserving map unless mirroring is better by more than
    // numerical noise on the oracle's energy scale.
    let energy: f64 = oracle_y.iter().map(|w| w * w).sum();
    let tie_margin = 1e-9 * energy + 1e-300;
    let (_, in_scale, in_offset) = if candidates[1].0 < candidates[0].0 - tie_margin {
        candidates[1]
    } else {
        candidates[0]
    };
    let (_, out_scale, out_offset) =
        output_fit(learned_x, learned_y, oracle_x, oracle_y, in_scale, in_offset);
    let mut max_abs_error = 0.0f64;
    for (&v, &w) in oracle_x.iter().zip(oracle_y) {
        let x = (v - in_offset) / in_scale;
        let aligned = out_scale * interp_clamped(learned_x, learned_y, x) + out_offset;
        max_abs_error = max_abs_error.max((aligned - w).abs());
    }
    Ok(AffineAlignment {
        in_scale,
        in_offset,
        out_scale,
        out_offset,
        max_abs_error,
        degenerate: false,
    })
}

/// Writes a slice as `x,response_1..response_c[,fit]` CSV plus a JSON
/// sidecar (same path with `.json`) carrying the fit and metadata.
pub fn emit_plot_data(report: &SliceReport, csv_path: &Path) -> Result<(), InterpError> {
    if report.grid.is_empty() || report.responses.is_empty() {
        return Err(InterpError::EmptyReport);
    }
    let mut out = String::from("x");
    for c in 0..report.responses.len() {
        out.push_str(&format!(",response_{}", c + 1));
    }
    if report.polyfit.is_some() {
        out.push_str(",fit");
    }
    out.push('\n');
    for (s, &x) in report.grid.iter().enumerate() {
        out.push_str(&format!("{x:?}"));
        for resp in &report.responses {
            out.push_str(&format!(",{:?}", resp[s]));
        }
        if let Some(fit) = &report.polyfit {
            let mut val = 0.0;
            let mut pow = 1.0;
            for c in &fit.coeffs {
                val += c * pow;
                pow *= x;
            }
            out.push_str(&format!(",{val:?}"));
        }
        out.push('\n');
    }
    std::fs::write(csv_path, out)?;
    let sidecar = csv_path.with_extension("json");
    let json = serde_json::to_string_pretty(report).expect("slice reports serialize");
    std::fs::write(sidecar, json)?;
    Ok(())
}

/// Writes a time-domain comparison as `k,y_data,y_model,error` CSV.
pub fn emit_error_series(
    y_data: &[f64],
    y_model: &[f64],
    csv_path: &Path,
) -> Result<(), InterpError> {
    if y_data.is_empty() || y_data.len() != y_model.len() {
        return Err(InterpError::EmptyReport);
    }
    let mut out = String::from("k,y_data,y_model,error\n");
    for (k, (d, m)) in y_data.iter().zip(y_model).enumerate() {
        out.push_str(&format!("{k},{d:?},{m:?},{:?}\n", d - m));
    }
    std::fs::write(csv_path, out)?;
    Ok(())
}
