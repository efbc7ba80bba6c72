//! Synthetic ground-truth systems, excitation signals, CSV I/O and the
//! best-linear-approximation baseline.
//!
//! The two oracles mirror the benchmark families the models target: a
//! forced Duffing oscillator (`m x'' + c x' + k x + alpha x^3 = u`)
//! integrated with fixed-step RK4, and a Wiener-Hammerstein cascade of
//! two third-order filters around a diode-style saturation. Generators
//! are pure functions of their spec and seed.

use crate::ssmodel::{FilterSpec, ModelError};
use crate::trainer::{evaluate, normalize_fit, train, TrainConfig, TrainError, TrainReport};
use crate::SsKanModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("aliasing: f_max {f_max} Hz must lie below the Nyquist frequency {nyquist} Hz")]
    Aliasing { f_max: f64, nyquist: f64 },
    #[error("sample-rate-too-low: {fs} Hz does not resolve the dynamics (need at least {required} Hz)")]
    SampleRateTooLow { fs: f64, required: f64 },
    #[error("unstable-integration: state magnitude exceeded 1e6 at step {step}")]
    UnstableIntegration { step: usize },
    #[error("invalid-spec: {0}")]
    InvalidSpec(String),
    #[error("malformed-header: expected `k,u,y`, found `{found}`")]
    MalformedHeader { found: String },
    #[error("non-numeric-cell: column {column} on line {line} is not a number")]
    NonNumericCell { line: usize, column: &'static str },
    #[error("length-mismatch: line {line} has {got} fields, expected {expected}")]
    RowLength {
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error("io-error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Where a dataset came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    SyntheticDuffing,
    SyntheticWh,
    ExternalCsv,
}

/// A time-indexed SISO input/output record.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sample_rate: f64,
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    /// Gaussian measurement noise added to the output channel.
    pub fn with_output_noise(mut self, std: f64, seed: u64) -> Dataset {
        if std > 0.0 {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            for y in &mut self.y {
                let n: f64 = StandardNormal.sample(&mut rng);
                *y += std * n;
            }
        }
        self
    }
}

/// Forced Duffing oscillator coefficients, all positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DuffingParams {
    pub mass: f64,
    pub damping: f64,
    pub stiffness: f64,
    pub cubic_stiffness: f64,
}

impl DuffingParams {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.mass <= 0.0
            || self.damping < 0.0
            || self.stiffness <= 0.0
            || self.cubic_stiffness < 0.0
        {
            return Err(DataError::InvalidSpec(format!(
                "Duffing parameters must be positive (damping and cubic term nonnegative): {self:?}"
            )));
        }
        Ok(())
    }

    /// Undamped natural frequency of the linear part, in Hz.
    pub fn natural_frequency_hz(&self) -> f64 {
        (self.stiffness / self.mass).sqrt() / (2.0 * std::f64::consts::PI)
    }

    /// Cubic stiffness making the cubic force equal the linear force at a
    /// peak displacement: `alpha * x^3 = k * x` at `x = x_peak`.
    pub fn alpha_matching_linear_force(stiffness: f64, x_peak: f64) -> f64 {
        stiffness / (x_peak * x_peak)
    }
}

/// Default oscillator: unit mass and stiffness, light damping. The cubic
/// term is a placeholder; experiment presets calibrate it against the
/// actual excitation's peak displacement.
pub fn default_duffing_params() -> DuffingParams {
    DuffingParams {
        mass: 1.0,
        damping: 0.3,
        stiffness: 1.0,
        cubic_stiffness: 1.0,
    }
}

/// Fixed-step RK4 integration of the Duffing oscillator with zero-order
/// hold on the input. The output is the position sequence sampled before
/// each step.
pub fn simulate_duffing(
    params: &DuffingParams,
    u: &[f64],
    sample_rate: f64,
    x0: f64,
    v0: f64,
) -> Result<Dataset, DataError> {
    params.validate()?;
    let required = 20.0 * params.natural_frequency_hz();
    if sample_rate < required {
        return Err(DataError::SampleRateTooLow {
            fs: sample_rate,
            required,
        });
    }
    let h = 1.0 / sample_rate;
    let accel = |x: f64, v: f64, drive: f64| {
        (drive - params.damping * v - params.stiffness * x - params.cubic_stiffness * x * x * x)
            / params.mass
    };
    let mut x = x0;
    let mut v = v0;
    let mut y = Vec::with_capacity(u.len());
    for (k, &drive) in u.iter().enumerate() {
        y.push(x);
        // Classic RK4 on (x, v) with the input held constant over the step.
        let k1x = v;
        let k1v = accel(x, v, drive);
        let k2x = v + 0.5 * h * k1v;
        let k2v = accel(x + 0.5 * h * k1x, v + 0.5 * h * k1v, drive);
        let k3x = v + 0.5 * h * k2v;
        let k3v = accel(x + 0.5 * h * k2x, v + 0.5 * h * k2v, drive);
        let k4x = v + h * k3v;
        let k4v = accel(x + h * k3x, v + h * k3v, drive);
        x += h / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x);
        v += h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
        if x.abs() > 1e6 || v.abs() > 1e6 {
            return Err(DataError::UnstableIntegration { step: k });
        }
    }
    Ok(Dataset {
        sample_rate,
        u: u.to_vec(),
        y,
        provenance: Provenance::SyntheticDuffing,
    })
}

/// Wiener-Hammerstein oracle: front filter, diode saturation, back filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhOracleSpec {
    pub front: FilterSpec,
    pub back: FilterSpec,
    /// Input level where the diode starts conducting.
    pub knee: f64,
    /// Small-signal gain of the linear region.
    pub slope: f64,
    /// Output asymptote of the saturated region.
    pub sat_level: f64,
    /// Standard deviation of Gaussian measurement noise on the output.
    pub noise_std: f64,
}

impl WhOracleSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        // Stability and order are checked by the state-space realization.
        self.front.to_state_space()?;
        self.back.to_state_space()?;
        if self.knee <= 0.0 || self.slope <= 0.0 || self.sat_level <= self.slope * self.knee {
            return Err(DataError::InvalidSpec(format!(
                "diode needs knee > 0, slope > 0 and sat_level > slope * knee: {self:?}"
            )));
        }
        if self.noise_std < 0.0 {
            return Err(DataError::InvalidSpec("noise_std must be nonnegative".into()));
        }
        Ok(())
    }

    /// The static nonlinearity: linear below the knee (the diode is off),
    /// a smooth tanh saturation toward `sat_level` above it. Passes
    /// through the origin and is C1 at the knee.
    pub fn diode(&self, v: f64) -> f64 {
        if v <= self.knee {
            self.slope * v
        } else {
            let at_knee = self.slope * self.knee;
            let span = self.sat_level - at_knee;
            at_knee + span * (self.slope * (v - self.knee) / span).tanh()
        }
    }
}

/// Third-order Chebyshev lowpass pair used as the default oracle filters
/// (type I front, type II back, both unit DC gain, digital at the record's
/// sample rate).
pub fn default_wh_spec() -> WhOracleSpec {
    WhOracleSpec {
        front: FilterSpec {
            b: vec![
                0.015404643097177097,
                0.04621392929153129,
                0.04621392929153129,
                0.015404643097177097,
            ],
            a: vec![
                1.0,
                -1.989974916313894,
                1.5715176988788273,
                -0.45830563778751643,
            ],
        },
        back: FilterSpec {
            b: vec![
                0.10269264396970272,
                0.0029343170500268994,
                0.0029343170500268764,
                0.1026926439697027,
            ],
            a: vec![
                1.0,
                -1.6445973839083794,
                1.0918807951794998,
                -0.2360294892316611,
            ],
        },
        knee: 0.5,
        slope: 1.0,
        sat_level: 0.8,
        noise_std: 0.0,
    }
}

/// Transposed direct-form II single filter pass.
pub fn filter_df2t(spec: &FilterSpec, input: &[f64]) -> Vec<f64> {
    let b = &spec.b;
    let a = &spec.a;
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    let mut s3 = 0.0;
    let mut out = Vec::with_capacity(input.len());
    for &x in input {
        let y = b[0] * x + s1;
        s1 = b[1] * x - a[1] * y + s2;
        s2 = b[2] * x - a[2] * y + s3;
        s3 = b[3] * x - a[3] * y;
        out.push(y);
    }
    out
}

/// A simulated Wiener-Hammerstein record with the hidden intermediate
/// signals, which stay test-only and never reach training.
#[derive(Debug, Clone)]
pub struct WhSimulation {
    pub dataset: Dataset,
    /// The front filter output (nonlinearity input).
    pub v: Vec<f64>,
    /// The nonlinearity output (back filter input).
    pub w: Vec<f64>,
}

/// Simulates `u -> front filter -> diode -> back filter -> y` at
/// `sample_rate`, with optional output noise drawn from `noise_seed`.
pub fn simulate_wh(
    spec: &WhOracleSpec,
    u: &[f64],
    sample_rate: f64,
    noise_seed: u64,
) -> Result<WhSimulation, DataError> {
    spec.validate()?;
    let v = filter_df2t(&spec.front, u);
    let w: Vec<f64> = v.iter().map(|&x| spec.diode(x)).collect();
    let y = filter_df2t(&spec.back, &w);
    let dataset = Dataset {
        sample_rate,
        u: u.to_vec(),
        y,
        provenance: Provenance::SyntheticWh,
    }
    .with_output_noise(spec.noise_std, noise_seed);
    Ok(WhSimulation { dataset, v, w })
}

fn check_band(n_samples: usize, sample_rate: f64, f_max: f64) -> Result<usize, DataError> {
    let nyquist = sample_rate / 2.0;
    if f_max >= nyquist {
        return Err(DataError::Aliasing { f_max, nyquist });
    }
    if n_samples < 4 {
        return Err(DataError::InvalidSpec(
            "signal generation needs at least 4 samples".into(),
        ));
    }
    let bins = (f_max * n_samples as f64 / sample_rate).floor() as usize;
    if bins < 1 {
        return Err(DataError::InvalidSpec(format!(
            "band up to {f_max} Hz excites no DFT bin at {n_samples} samples"
        )));
    }
    Ok(bins)
}

/// Random-phase multisine: equal-amplitude cosines on every DFT bin up to
/// `f_max`, scaled to the requested RMS amplitude.
pub fn multisine(
    n_samples: usize,
    sample_rate: f64,
    f_max: f64,
    amplitude: f64,
    seed: u64,
) -> Result<Vec<f64>, DataError> {
    let bins = check_band(n_samples, sample_rate, f_max)?;
    if amplitude == 0.0 {
        return Ok(vec![0.0; n_samples]);
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let per_line = amplitude * (2.0 / bins as f64).sqrt();
    let mut spectrum = vec![Complex::new(0.0, 0.0); n_samples];
    for k in 1..=bins {
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let line = Complex::from_polar(per_line / 2.0, phase);
        spectrum[k] = line;
        spectrum[n_samples - k] = line.conj();
    }
    let mut planner = FftPlanner::new();
    // The unnormalized inverse transform sums the lines directly.
    planner
        .plan_fft_inverse(n_samples)
        .process(&mut spectrum);
    Ok(spectrum.iter().map(|c| c.re).collect())
}

/// Low-pass filtered white Gaussian noise with a linear amplitude ramp
/// from `amp_start` to `amp_end`; the stationary part has unit sample
/// standard deviation before the ramp is applied.
pub fn filtered_gaussian_ramp(
    n_samples: usize,
    sample_rate: f64,
    f_max: f64,
    amp_start: f64,
    amp_end: f64,
    seed: u64,
) -> Result<Vec<f64>, DataError> {
    let bins = check_band(n_samples, sample_rate, f_max)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut spectrum: Vec<Complex<f64>> = (0..n_samples)
        .map(|_| {
            let x: f64 = StandardNormal.sample(&mut rng);
            Complex::new(x, 0.0)
        })
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n_samples).process(&mut spectrum);
    // Brick-wall lowpass: keep DC and the excited band on both sides.
    for k in 1..n_samples {
        let mirrored = k.min(n_samples - k);
        if mirrored > bins {
            spectrum[k] = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n_samples).process(&mut spectrum);
    let mut signal: Vec<f64> = spectrum
        .iter()
        .map(|c| c.re / n_samples as f64)
        .collect();
    let mean = signal.iter().sum::<f64>() / n_samples as f64;
    let var = signal.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n_samples as f64;
    let std = var.sqrt();
    for (k, x) in signal.iter_mut().enumerate() {
        let ramp = amp_start + (amp_end - amp_start) * k as f64 / (n_samples - 1) as f64;
        *x = ramp * (*x - mean) / std;
    }
    Ok(signal)
}

/// Writes the `k,u,y` CSV schema, one sample per row, shortest
/// round-trip decimal representation.
pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut out = String::with_capacity(dataset.len() * 32 + 8);
    out.push_str("k,u,y\n");
    for k in 0..dataset.len() {
        writeln!(out, "{},{:?},{:?}", k, dataset.u[k], dataset.y[k])
            .expect("writing to a string cannot fail");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads the `k,u,y` CSV schema. The sample rate is not part of the file;
/// callers that know it (e.g. from a manifest) should overwrite the
/// default of 1 Hz.
pub fn load_csv(path: &Path) -> Result<Dataset, DataError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    let normalized: Vec<&str> = header.split(',').map(str::trim).collect();
    if normalized != ["k", "u", "y"] {
        return Err(DataError::MalformedHeader {
            found: header.to_string(),
        });
    }
    let mut u = Vec::new();
    let mut y = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(DataError::RowLength {
                line: line_no,
                expected: 3,
                got: fields.len(),
            });
        }
        fields[0]
            .trim()
            .parse::<f64>()
            .map_err(|_| DataError::NonNumericCell {
                line: line_no,
                column: "k",
            })?;
        u.push(
            fields[1]
                .trim()
                .parse::<f64>()
                .map_err(|_| DataError::NonNumericCell {
                    line: line_no,
                    column: "u",
                })?,
        );
        y.push(
            fields[2]
                .trim()
                .parse::<f64>()
                .map_err(|_| DataError::NonNumericCell {
                    line: line_no,
                    column: "y",
                })?,
        );
    }
    Ok(Dataset {
        sample_rate: 1.0,
        u,
        y,
        provenance: Provenance::ExternalCsv,
    })
}

/// The linear baseline fit and its test evaluation.
#[derive(Debug, Clone)]
pub struct BlaFit {
    pub model: SsKanModel,
    pub test_rmse: f64,
    pub test_rmse_norm: f64,
    pub report: TrainReport,
}

/// Best linear approximation: an SS-KAN model with both KANs frozen at
/// zero, trained by the same trainer, evaluated on the test record.
pub fn fit_bla(
    train_data: &Dataset,
    test_data: &Dataset,
    n_x: usize,
    config: &TrainConfig,
) -> Result<BlaFit, DataError> {
    use crate::kan::KanNetwork;
    use crate::spline::SplineBasis;
    use crate::ssmodel::init_stable_linear;

    let norm = normalize_fit(train_data)?;
    let linear = init_stable_linear(n_x, 1, 1, config.seed);
    let kan_f = KanNetwork::zero(&[n_x + 1, n_x], &SplineBasis::default_edge_basis());
    let model = SsKanModel::new(linear, kan_f, None, norm)
        .expect("BLA construction dimensions are consistent");
    let mut bla_config = config.clone();
    bla_config.train_kans = false;
    bla_config.grid_update_epochs.clear();
    let (trained, report) = train(model, &norm.apply(train_data), &bla_config)?;
    let eval = evaluate(&trained, test_data)?;
    Ok(BlaFit {
        model: trained,
        test_rmse: eval.rmse,
        test_rmse_norm: eval.rmse_norm,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn undamped_unforced_duffing_conserves_energy() {
        let params = DuffingParams {
            mass: 1.0,
            damping: 0.0,
            stiffness: 1.0,
            cubic_stiffness: 0.0,
        };
        let fs = 100.0;
        let u = vec![0.0; 10_000];
        // Track both states by re-integrating manually alongside.
        let ds = simulate_duffing(&params, &u, fs, 1.0, 0.0).unwrap();
        // Energy from position samples: E = 0.5 k x^2 + 0.5 m v^2 stays at
        // 0.5; check the position envelope instead of reconstructing v:
        // at the extremes |x| = sqrt(2 E / k). Simpler: re-simulate with a
        // velocity probe by finite differences is noisy, so assert through
        // the invariant that max |x| over any late window stays at 1.
        let late = &ds.y[9_000..];
        let peak = late.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(
            (peak - 1.0).abs() < 1e-6,
            "amplitude drifted to {peak} after 1e4 steps"
        );
    }

    #[test]
    fn equilibrium_stays_at_zero() {
        let ds = simulate_duffing(&default_duffing_params(), &vec![0.0; 100], 50.0, 0.0, 0.0)
            .unwrap();
        assert!(ds.y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn hardening_spring_reduces_step_overshoot() {
        let base = DuffingParams {
            mass: 1.0,
            damping: 0.3,
            stiffness: 1.0,
            cubic_stiffness: 0.0,
        };
        let hard = DuffingParams {
            cubic_stiffness: 3.0,
            ..base
        };
        let u = vec![0.5; 4_000];
        let fs = 50.0;
        let linear = simulate_duffing(&base, &u, fs, 0.0, 0.0).unwrap();
        let nonlinear = simulate_duffing(&hard, &u, fs, 0.0, 0.0).unwrap();
        let peak = |ds: &Dataset| ds.y.iter().fold(0.0f64, |m, v| m.max(*v));
        assert!(
            peak(&nonlinear) < peak(&linear),
            "hardening spring must overshoot less: {} vs {}",
            peak(&nonlinear),
            peak(&linear)
        );
    }

    #[test]
    fn rk4_is_fourth_order_on_the_linear_oscillator() {
        let params = DuffingParams {
            mass: 1.0,
            damping: 0.0,
            stiffness: 1.0,
            cubic_stiffness: 0.0,
        };
        // Analytic solution x(t) = cos(t) for x0 = 1, v0 = 0.
        let horizon = 20.0;
        let error_at = |fs: f64| {
            let n = (horizon * fs) as usize;
            let ds = simulate_duffing(&params, &vec![0.0; n], fs, 1.0, 0.0).unwrap();
            ds.y
                .iter()
                .enumerate()
                .map(|(k, y)| (y - (k as f64 / fs).cos()).abs())
                .fold(0.0f64, f64::max)
        };
        let coarse = error_at(20.0);
        let fine = error_at(40.0);
        let ratio = coarse / fine;
        assert!(
            (12.0..20.0).contains(&ratio),
            "step halving changed the error by {ratio}x"
        );
    }

    #[test]
    fn duffing_guards() {
        let params = default_duffing_params();
        assert!(matches!(
            simulate_duffing(&params, &[0.0], 1.0, 0.0, 0.0),
            Err(DataError::SampleRateTooLow { .. })
        ));
        let negative = DuffingParams {
            mass: -1.0,
            ..params
        };
        assert!(negative.validate().is_err());
        // A violent kick against an inverted spring cannot stay bounded.
        let runaway = DuffingParams {
            mass: 1e-6,
            damping: 0.0,
            stiffness: 1e-9,
            cubic_stiffness: 0.0,
        };
        let r = simulate_duffing(&runaway, &vec![1e6; 50_000], 20.0 * runaway.natural_frequency_hz() + 50.0, 0.0, 0.0);
        assert!(matches!(r, Err(DataError::UnstableIntegration { .. })));
    }

    #[test]
    fn wh_identity_nonlinearity_equals_series_filters() {
        // A huge knee keeps the diode in its linear unit-slope region.
        let mut spec = default_wh_spec();
        spec.knee = 1e6;
        spec.sat_level = 2e6;
        let u: Vec<f64> = (0..500).map(|k| (0.21 * k as f64).sin()).collect();
        let sim = simulate_wh(&spec, &u, 1.0, 0).unwrap();
        let series = filter_df2t(&spec.back, &filter_df2t(&spec.front, &u));
        for (a, b) in sim.dataset.y.iter().zip(&series) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn wh_dc_response_settles_at_back_gain_times_saturation() {
        let spec = default_wh_spec();
        let u = vec![50.0; 4_000];
        let sim = simulate_wh(&spec, &u, 1.0, 0).unwrap();
        let dc_back: f64 = spec.back.b.iter().sum::<f64>() / spec.back.a.iter().sum::<f64>();
        // Deep saturation: w -> sat_level.
        let settled = sim.dataset.y[3_999];
        assert!(
            (settled - dc_back * spec.sat_level).abs() < 1e-6,
            "settled at {settled}, expected {}",
            dc_back * spec.sat_level
        );
        let zero = simulate_wh(&spec, &vec![0.0; 10], 1.0, 0).unwrap();
        assert!(zero.dataset.y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn wh_small_signals_scale_linearly() {
        let spec = default_wh_spec();
        let u: Vec<f64> = (0..400).map(|k| 0.05 * (0.37 * k as f64).sin()).collect();
        let scaled: Vec<f64> = u.iter().map(|v| 3.0 * v).collect();
        let a = simulate_wh(&spec, &u, 1.0, 0).unwrap();
        let b = simulate_wh(&spec, &scaled, 1.0, 0).unwrap();
        for (ya, yb) in a.dataset.y.iter().zip(&b.dataset.y) {
            if ya.abs() > 1e-6 {
                assert!(
                    (yb - 3.0 * ya).abs() <= 0.01 * (3.0 * ya).abs() + 1e-12,
                    "small-signal scaling broke: {yb} vs {}",
                    3.0 * ya
                );
            }
        }
    }

    #[test]
    fn multisine_spectrum_is_flat_on_excited_bins() {
        let n = 4096;
        let fs = 10.0;
        let f_max = 3.0;
        let sig = multisine(n, fs, f_max, 0.8, 42).unwrap();
        let bins = (f_max * n as f64 / fs).floor() as usize;
        // Direct DFT probe per bin, independent of the FFT synthesis.
        let probe = |k: usize| -> f64 {
            let mut re = 0.0;
            let mut im = 0.0;
            for (t, &x) in sig.iter().enumerate() {
                let ang = std::f64::consts::TAU * k as f64 * t as f64 / n as f64;
                re += x * ang.cos();
                im -= x * ang.sin();
            }
            (re * re + im * im).sqrt()
        };
        let reference = probe(1);
        for k in [2, bins / 2, bins] {
            let ratio = probe(k) / reference;
            let db = 20.0 * ratio.log10();
            assert!(db.abs() < 0.1, "bin {k} deviates {db} dB");
        }
        for k in [bins + 1, bins + 7, n / 2 - 1] {
            assert!(probe(k) < 1e-8 * reference, "bin {k} should be empty");
        }
        // RMS matches the requested amplitude.
        let rms = (sig.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        assert!((rms - 0.8).abs() < 1e-10);
    }

    #[test]
    fn multisine_determinism_and_zero_amplitude() {
        let a = multisine(1024, 10.0, 3.0, 1.0, 7).unwrap();
        let b = multisine(1024, 10.0, 3.0, 1.0, 7).unwrap();
        assert_eq!(a, b);
        let z = multisine(1024, 10.0, 3.0, 0.0, 7).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
        assert!(matches!(
            multisine(1024, 10.0, 5.0, 1.0, 7),
            Err(DataError::Aliasing { .. })
        ));
    }

    #[test]
    fn filtered_ramp_statistics() {
        let n = 8192;
        let flat = filtered_gaussian_ramp(n, 10.0, 3.0, 0.7, 0.7, 3).unwrap();
        let mean = flat.iter().sum::<f64>() / n as f64;
        let std =
            (flat.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64).sqrt();
        assert!((std - 0.7).abs() < 0.07, "stationary std {std}");

        let ramp = filtered_gaussian_ramp(n, 10.0, 3.0, 0.2, 1.0, 3).unwrap();
        let rms = |w: &[f64]| (w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64).sqrt();
        assert!(rms(&ramp[..n / 8]) < rms(&ramp[7 * n / 8..]));

        let again = filtered_gaussian_ramp(n, 10.0, 3.0, 0.2, 1.0, 3).unwrap();
        assert_eq!(ramp, again);
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = std::env::temp_dir().join("sskan-datagen-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.csv");
        let ds = Dataset {
            sample_rate: 10.0,
            u: vec![0.1, -2.5e-7, 3.333333333333333],
            y: vec![1.0 / 3.0, 2.0f64.sqrt(), -0.0],
            provenance: Provenance::SyntheticDuffing,
        };
        save_csv(&ds, &path).unwrap();
        let back = load_csv(&path).unwrap();
        assert_eq!(back.u, ds.u);
        assert_eq!(back.y, ds.y);

        let fixture = dir.join("fixture.csv");
        std::fs::write(&fixture, "k,u,y\n0,1.5,2.5\n1,-0.25,0.125\n2,3,4\n").unwrap();
        let parsed = load_csv(&fixture).unwrap();
        assert_eq!(parsed.u, vec![1.5, -0.25, 3.0]);
        assert_eq!(parsed.y, vec![2.5, 0.125, 4.0]);

        let bad_header = dir.join("bad_header.csv");
        std::fs::write(&bad_header, "k,u\n0,1\n").unwrap();
        assert!(matches!(
            load_csv(&bad_header),
            Err(DataError::MalformedHeader { .. })
        ));

        let bad_cell = dir.join("bad_cell.csv");
        std::fs::write(&bad_cell, "k,u,y\n0,1.0,oops\n").unwrap();
        match load_csv(&bad_cell) {
            Err(DataError::NonNumericCell { line, column }) => {
                assert_eq!(line, 2);
                assert_eq!(column, "y");
            }
            other => panic!("expected non-numeric-cell, got {other:?}"),
        }

        let short_row = dir.join("short_row.csv");
        std::fs::write(&short_row, "k,u,y\n0,1.0\n").unwrap();
        assert!(matches!(
            load_csv(&short_row),
            Err(DataError::RowLength { line: 2, .. })
        ));
    }
}
