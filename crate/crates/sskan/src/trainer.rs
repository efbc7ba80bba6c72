//! Training: normalization, the AdamW loop with sequential segments and
//! state carry-over, and per-epoch reporting.
//!
//! The training record is split into fixed-size segments walked in
//! temporal order. Each segment produces one AdamW update; the final
//! rollout state of a segment seeds the next one (gradients are truncated
//! at segment boundaries). A trailing partial segment is excluded from
//! updates but included in the epoch metrics, which are recomputed at
//! epoch end from a full free-run pass with the epoch's final parameters.

use crate::datagen::Dataset;
use crate::diffengine::{DiffError, PackSpec, Penalties, Segment, TrainableModel};
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("zero-range-channel: channel {0} has no variation, cannot normalize")]
    ZeroRangeChannel(&'static str),
    #[error("length-mismatch: sequences of length {0} and {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid-config: {0}")]
    InvalidConfig(String),
    #[error("diverged: non-finite loss at epoch {epoch}{}", match segment { Some(s) => format!(", segment {s}"), None => String::new() })]
    Diverged { epoch: usize, segment: Option<usize> },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Affine map `y = scale * x + offset` with exact inverse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub scale: f64,
    pub offset: f64,
}

impl AffineMap {
    pub fn identity() -> Self {
        AffineMap {
            scale: 1.0,
            offset: 0.0,
        }
    }

    /// Map sending `lo -> -1` and `hi -> 1`.
    pub fn to_unit_range(lo: f64, hi: f64) -> Self {
        let scale = 2.0 / (hi - lo);
        AffineMap {
            scale,
            offset: -(hi + lo) / (hi - lo),
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        self.scale * x + self.offset
    }

    pub fn invert(&self, y: f64) -> f64 {
        (y - self.offset) / self.scale
    }
}

/// Per-channel normalization derived from training data only; test data
/// mapped with the same maps may exceed `[-1, 1]` (extrapolation).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub u: AffineMap,
    pub y: AffineMap,
}

impl Normalization {
    pub fn identity() -> Self {
        Normalization {
            u: AffineMap::identity(),
            y: AffineMap::identity(),
        }
    }

    /// Normalized copy of a dataset.
    pub fn apply(&self, data: &Dataset) -> Dataset {
        let mut out = data.clone();
        for v in &mut out.u {
            *v = self.u.apply(*v);
        }
        for v in &mut out.y {
            *v = self.y.apply(*v);
        }
        out
    }

    /// Physical-units copy of a normalized dataset.
    pub fn invert(&self, data: &Dataset) -> Dataset {
        let mut out = data.clone();
        for v in &mut out.u {
            *v = self.u.invert(*v);
        }
        for v in &mut out.y {
            *v = self.y.invert(*v);
        }
        out
    }
}

/// Fits maps sending each channel's training min/max to `[-1, 1]`.
pub fn normalize_fit(train: &Dataset) -> Result<Normalization, TrainError> {
    let range = |xs: &[f64], name: &'static str| -> Result<AffineMap, TrainError> {
        let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(hi - lo > 0.0) {
            return Err(TrainError::ZeroRangeChannel(name));
        }
        Ok(AffineMap::to_unit_range(lo, hi))
    };
    Ok(Normalization {
        u: range(&train.u, "u")?,
        y: range(&train.y, "y")?,
    })
}

/// Root mean squared error, `sqrt(mean_k (pred_k - data_k)^2)`.
pub fn rmse(pred: &[f64], data: &[f64]) -> Result<f64, TrainError> {
    if pred.len() != data.len() || pred.is_empty() {
        return Err(TrainError::LengthMismatch(pred.len(), data.len()));
    }
    let mut acc = 0.0;
    for (p, d) in pred.iter().zip(data) {
        let r = p - d;
        acc += r * r;
    }
    Ok((acc / pred.len() as f64).sqrt())
}

/// Learning-rate schedule applied per epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// `lr(epoch) = lr0 * rate^epoch` with `rate` in `(0, 1]`.
    ExponentialDecay { rate: f64 },
}

impl LrSchedule {
    fn lr(&self, lr0: f64, epoch: usize) -> f64 {
        match self {
            LrSchedule::Constant => lr0,
            LrSchedule::ExponentialDecay { rate } => lr0 * rate.powi(epoch as i32),
        }
    }
}

/// AdamW moment coefficients; `weight_decay` is decoupled and defaults to
/// zero because the loss already carries an explicit L2 matrix penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        AdamWParams {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// One AdamW update with bias-corrected moments and decoupled decay.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    cfg: &AdamWParams,
) {
    debug_assert!(t >= 1);
    debug_assert_eq!(params.len(), grads.len());
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.epsilon) + cfg.weight_decay * params[i]);
    }
}

/// Full training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda_l1: f64,
    pub lambda_l2: f64,
    pub lr0: f64,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Epochs (0-based) after which every edge's grid is re-spanned to the
    /// observed activation range.
    pub grid_update_epochs: Vec<usize>,
    pub adamw: AdamWParams,
    /// When false the KAN parameters stay frozen (linear baseline).
    pub train_kans: bool,
    /// Trailing fraction of the record held out for epoch monitoring.
    pub validation_fraction: f64,
}

impl TrainConfig {
    pub fn validate(&self, n_train: usize) -> Result<(), TrainError> {
        if self.lambda_l1 < 0.0 || self.lambda_l2 < 0.0 {
            return Err(TrainError::InvalidConfig(
                "penalty weights must be nonnegative".into(),
            ));
        }
        if !(self.lr0 > 0.0) {
            return Err(TrainError::InvalidConfig("lr0 must be positive".into()));
        }
        if let LrSchedule::ExponentialDecay { rate } = self.lr_schedule {
            if !(rate > 0.0 && rate <= 1.0) {
                return Err(TrainError::InvalidConfig(format!(
                    "decay rate must lie in (0, 1], got {rate}"
                )));
            }
        }
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be positive".into()));
        }
        if !(0.0..0.9).contains(&self.validation_fraction) {
            return Err(TrainError::InvalidConfig(
                "validation fraction must lie in [0, 0.9)".into(),
            ));
        }
        let usable = n_train - (self.validation_fraction * n_train as f64).floor() as usize;
        if self.batch_size == 0 || self.batch_size > usable {
            return Err(TrainError::InvalidConfig(format!(
                "batch size {} must lie in 1..={} (training portion)",
                self.batch_size, usable
            )));
        }
        Ok(())
    }
}

/// Metrics recorded at the end of one epoch. RMSE values come in both
/// normalized and physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_rmse_norm: f64,
    pub train_rmse: f64,
    pub val_rmse_norm: f64,
    pub val_rmse: f64,
    pub lr: f64,
    /// Wall-clock seconds; excluded from the CSV so artifacts stay
    /// byte-reproducible.
    pub seconds: f64,
}

/// Loss/RMSE trajectories of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Metrics of the untrained model, for before/after comparisons.
    pub initial_train_rmse_norm: f64,
    pub initial_val_rmse_norm: f64,
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    pub fn final_stats(&self) -> &EpochStats {
        self.epochs.last().expect("reports carry at least one epoch")
    }

    /// CSV with the documented columns; wall-clock time is deliberately
    /// not included.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("epoch,loss,train_rmse,val_rmse,lr,train_rmse_norm,val_rmse_norm\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:?},{:?},{:?},{:?},{:?},{:?}\n",
                e.epoch, e.loss, e.train_rmse, e.val_rmse, e.lr, e.train_rmse_norm, e.val_rmse_norm
            ));
        }
        out
    }
}

struct EpochEval {
    loss: f64,
    train_rmse_norm: f64,
    val_rmse_norm: f64,
}

fn epoch_metrics<M: TrainableModel>(
    model: &M,
    data: &Dataset,
    n_update: usize,
    penalties: &Penalties,
) -> Result<EpochEval, DiffError> {
    let sim = model.simulate(&data.u, &vec![0.0; model.state_dim()])?;
    let mut mse = 0.0;
    for k in 0..n_update {
        let r = sim.y[k] - data.y[k];
        mse += r * r;
    }
    mse /= n_update as f64;
    let loss = mse
        + penalties.lambda_l2 * model.linear_frobenius_sq()
        + penalties.lambda_l1 * model.kan_l1();
    let train_rmse_norm = (mse).sqrt();
    let val_rmse_norm = if n_update < data.len() {
        rmse(&sim.y[n_update..], &data.y[n_update..]).unwrap_or(f64::NAN)
    } else {
        f64::NAN
    };
    Ok(EpochEval {
        loss,
        train_rmse_norm,
        val_rmse_norm,
    })
}

/// Trains a model on a normalized dataset.
///
/// The model's stored [`Normalization`] is used only to convert reported
/// RMSE values back to physical units; `data` must already be normalized.
pub fn train<M: TrainableModel>(
    mut model: M,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<(M, TrainReport), TrainError> {
    config.validate(data.len())?;
    if model.input_dim() != 1 || model.output_dim() != 1 {
        return Err(TrainError::InvalidConfig(
            "the training pipeline handles SISO records".into(),
        ));
    }
    let n = data.len();
    let n_val = (config.validation_fraction * n as f64).floor() as usize;
    let n_update = n - n_val;
    let spec = PackSpec {
        include_kans: config.train_kans,
    };
    let penalties = Penalties {
        lambda_l1: config.lambda_l1,
        lambda_l2: config.lambda_l2,
    };
    let y_phys_per_norm = 1.0 / model.normalization().y.scale.abs();

    let mut params = model.pack(spec);
    let mut m1 = vec![0.0; params.len()];
    let mut m2 = vec![0.0; params.len()];
    let mut t: u64 = 0;

    let initial = epoch_metrics(&model, data, n_update, &penalties)
        .map_err(|_| TrainError::Diverged { epoch: 0, segment: None })?;

    let mut report = TrainReport {
        initial_train_rmse_norm: initial.train_rmse_norm,
        initial_val_rmse_norm: initial.val_rmse_norm,
        epochs: Vec::with_capacity(config.epochs),
    };

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let lr = config.lr_schedule.lr(config.lr0, epoch);
        let mut carry = vec![0.0; model.state_dim()];
        let mut start = 0;
        let mut segment = 0usize;
        while start + config.batch_size <= n_update {
            let seg = Segment {
                u: &data.u[start..start + config.batch_size],
                y: &data.y[start..start + config.batch_size],
                x0: &carry,
            };
            let eval = model
                .loss_and_gradient(&seg, &penalties, spec)
                .map_err(|e| match e {
                    DiffError::NonFiniteLoss { .. } => TrainError::Diverged {
                        epoch,
                        segment: Some(segment),
                    },
                    other => TrainError::Diff(other),
                })?;
            t += 1;
            adamw_step(&mut params, &eval.grad, &mut m1, &mut m2, t, lr, &config.adamw);
            model.unpack(&params, spec)?;
            carry = eval.final_state;
            start += config.batch_size;
            segment += 1;
        }

        let metrics = epoch_metrics(&model, data, n_update, &penalties).map_err(|e| match e {
            DiffError::NonFiniteLoss { .. } => TrainError::Diverged {
                epoch,
                segment: None,
            },
            other => TrainError::Diff(other),
        })?;
        report.epochs.push(EpochStats {
            epoch: epoch + 1,
            loss: metrics.loss,
            train_rmse_norm: metrics.train_rmse_norm,
            train_rmse: metrics.train_rmse_norm * y_phys_per_norm,
            val_rmse_norm: metrics.val_rmse_norm,
            val_rmse: metrics.val_rmse_norm * y_phys_per_norm,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        });

        if config.train_kans && config.grid_update_epochs.contains(&epoch) {
            model.update_grids(&data.u[..n_update], &vec![0.0; model.state_dim()])?;
            // Spline coefficients changed meaning; restart the optimizer
            // state so stale moments cannot kick the refitted curves.
            params = model.pack(spec);
            m1.fill(0.0);
            m2.fill(0.0);
            t = 0;
        }
    }

    Ok((model, report))
}

/// Free-run evaluation of a model against a physical-units dataset.
#[derive(Debug, Clone)]
pub struct Evaluation {
    /// Model output in physical units.
    pub y_model: Vec<f64>,
    pub rmse: f64,
    pub rmse_norm: f64,
}

/// Simulates over `data.u` from a zero initial state and reports RMSE in
/// both unit systems. `data` is in physical units; the model's stored
/// normalization bridges the two.
pub fn evaluate<M: TrainableModel>(model: &M, data: &Dataset) -> Result<Evaluation, TrainError> {
    let norm = *model.normalization();
    let u_norm: Vec<f64> = data.u.iter().map(|&v| norm.u.apply(v)).collect();
    let sim = model.simulate(&u_norm, &vec![0.0; model.state_dim()])?;
    let y_norm_data: Vec<f64> = data.y.iter().map(|&v| norm.y.apply(v)).collect();
    let rmse_norm = rmse(&sim.y, &y_norm_data)?;
    let y_model: Vec<f64> = sim.y.iter().map(|&v| norm.y.invert(v)).collect();
    let rmse_phys = rmse(&y_model, &data.y)?;
    Ok(Evaluation {
        y_model,
        rmse: rmse_phys,
        rmse_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{Dataset, Provenance};

    fn dataset(u: Vec<f64>, y: Vec<f64>) -> Dataset {
        Dataset {
            sample_rate: 1.0,
            u,
            y,
            provenance: Provenance::ExternalCsv,
        }
    }

    #[test]
    fn affine_map_example_from_minus3_to_5() {
        let map = AffineMap::to_unit_range(-3.0, 5.0);
        assert!((map.scale - 0.25).abs() < 1e-15);
        assert!((map.offset + 0.25).abs() < 1e-15);
        assert!((map.apply(-3.0) + 1.0).abs() < 1e-15);
        assert!((map.apply(5.0) - 1.0).abs() < 1e-15);
        // Extrapolation passes through unchanged.
        assert!(map.apply(6.0) > 1.0);
    }

    #[test]
    fn normalize_round_trip_is_identity() {
        let ds = dataset(
            vec![-3.0, 0.0, 5.0, 2.0],
            vec![0.5, 1.5, -0.5, 0.25],
        );
        let norm = normalize_fit(&ds).unwrap();
        let fwd = norm.apply(&ds);
        assert!((fwd.u.iter().cloned().fold(f64::INFINITY, f64::min) + 1.0).abs() < 1e-12);
        assert!((fwd.u.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - 1.0).abs() < 1e-12);
        let back = norm.invert(&fwd);
        for (a, b) in back.u.iter().zip(&ds.u) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in back.y.iter().zip(&ds.y) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_rejects_flat_channel() {
        let ds = dataset(vec![1.0, 1.0, 1.0], vec![0.0, 1.0, 2.0]);
        assert!(matches!(
            normalize_fit(&ds),
            Err(TrainError::ZeroRangeChannel("u"))
        ));
    }

    #[test]
    fn rmse_examples() {
        let a = vec![1.0, 2.0, 3.0];
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        let b: Vec<f64> = a.iter().map(|v| v + 0.5).collect();
        assert!((rmse(&a, &b).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(
            rmse(&a, &[1.0]),
            Err(TrainError::LengthMismatch(3, 1))
        ));
    }

    #[test]
    fn rmse_matches_two_pass_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(12);
        let a: Vec<f64> = (0..1000).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..1000).map(|_| rng.gen_range(-2.0..2.0)).collect();
        // Two-pass: first the residuals, then the mean of squares.
        let residuals: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let mean_sq = residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64;
        assert!((rmse(&a, &b).unwrap() - mean_sq.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn adamw_zero_gradient_keeps_parameters() {
        let mut p = vec![1.0, -2.0];
        let mut m = vec![0.0; 2];
        let mut v = vec![0.0; 2];
        adamw_step(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, 0.1, &AdamWParams::default());
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn adamw_first_step_magnitude_is_about_lr() {
        let mut p = vec![0.0, 0.0];
        let mut m = vec![0.0; 2];
        let mut v = vec![0.0; 2];
        let lr = 0.05;
        adamw_step(&mut p, &[3.0, -0.2], &mut m, &mut v, 1, lr, &AdamWParams::default());
        assert!((p[0] + lr).abs() < 1e-6, "step {p:?}");
        assert!((p[1] - lr).abs() < 1e-6);
    }

    #[test]
    fn adamw_descends_a_quadratic() {
        let mut p = vec![1.0; 4];
        let mut m = vec![0.0; 4];
        let mut v = vec![0.0; 4];
        let f = |p: &[f64]| p.iter().map(|x| x * x).sum::<f64>();
        let mut last = f(&p);
        for t in 1..=10 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            adamw_step(&mut p, &g, &mut m, &mut v, t, 0.05, &AdamWParams::default());
            let now = f(&p);
            assert!(now < last, "f rose at step {t}: {now} vs {last}");
            last = now;
        }
    }

    #[test]
    fn weight_decay_is_decoupled_from_the_gradient_path() {
        let cfg = AdamWParams {
            weight_decay: 0.7,
            ..AdamWParams::default()
        };
        let mut p = vec![2.0, -1.5];
        let mut m = vec![0.0; 2];
        let mut v = vec![0.0; 2];
        // lr = 0 freezes parameters regardless of decay.
        adamw_step(&mut p, &[1.0, 1.0], &mut m, &mut v, 1, 0.0, &cfg);
        assert_eq!(p, vec![2.0, -1.5]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig {
            lambda_l1: 1e-4,
            lambda_l2: 1e-4,
            lr0: 1e-3,
            lr_schedule: LrSchedule::Constant,
            batch_size: 64,
            epochs: 10,
            seed: 1,
            grid_update_epochs: vec![],
            adamw: AdamWParams::default(),
            train_kans: true,
            validation_fraction: 0.2,
        };
        assert!(cfg.validate(1000).is_ok());
        assert!(cfg.validate(64).is_err()); // batch exceeds the 80% portion
        cfg.lr_schedule = LrSchedule::ExponentialDecay { rate: 1.5 };
        assert!(cfg.validate(1000).is_err());
    }
}
