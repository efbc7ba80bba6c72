use sskan::datagen::{
    filtered_gaussian_ramp, fit_bla, multisine, simulate_duffing, DuffingParams,
};
use sskan::kan::KanNetwork;
use sskan::spline::SplineBasis;
use sskan::ssmodel::{init_stable_linear, SsKanModel};
use sskan::trainer::{
    evaluate, normalize_fit, train, AdamWParams, LrSchedule, TrainConfig,
};

fn main() {
    for f_max in [1.0, 1.4, 2.0] {
        for seed in [1u64, 3, 4, 5] {
            run(f_max, seed);
        }
    }
}

fn run(f_max: f64, seed: u64) {
    println!("==== f_max {f_max} seed {seed} ====");
    let n_train = 8192;
    let n_test = 4096;
    let base = DuffingParams {
        mass: 1.0,
        damping: 0.3,
        stiffness: 1.0,
        cubic_stiffness: 0.0,
    };
    let fs = 40.0 * base.natural_frequency_hz();

    let u_train = multisine(n_train, fs, f_max, 1.0, seed).unwrap();
    // Calibrate the cubic stiffness so the cubic force matches the linear
    // force at the linear system's peak displacement.
    let linear_probe = simulate_duffing(&base, &u_train, fs, 0.0, 0.0).unwrap();
    let x_peak = linear_probe.y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let alpha = DuffingParams::alpha_matching_linear_force(base.stiffness, x_peak);
    let params = DuffingParams {
        cubic_stiffness: alpha,
        ..base
    };
    println!("x_peak {x_peak:.3} alpha {alpha:.4}");
    let train_ds = simulate_duffing(&params, &u_train, fs, 0.0, 0.0).unwrap();

    let peak_u = u_train.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut u_test = filtered_gaussian_ramp(n_test, fs, f_max, 0.1, 1.0, seed + 1).unwrap();
    let peak_t = u_test.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let target = 1.25 * peak_u;
    for v in &mut u_test {
        *v *= target / peak_t;
    }
    let test_ds = simulate_duffing(&params, &u_test, fs, 0.0, 0.0).unwrap();

    let norm = normalize_fit(&train_ds).unwrap();
    let config = TrainConfig {
        lambda_l1: 1e-4,
        lambda_l2: 1e-4,
        lr0: 1e-3,
        lr_schedule: LrSchedule::Constant,
        batch_size: 64,
        epochs: 100,
        seed,
        grid_update_epochs: vec![],
        adamw: AdamWParams::default(),
        train_kans: true,
        validation_fraction: 0.2,
    };

    // Linear baseline with its own generous settings.
    let bla_cfg = TrainConfig {
        lambda_l1: 0.0,
        lambda_l2: 0.0,
        lr0: 5e-3,
        lr_schedule: LrSchedule::ExponentialDecay { rate: 0.98 },
        epochs: 150,
        train_kans: false,
        ..config.clone()
    };
    let t0 = std::time::Instant::now();
    let bla = fit_bla(&train_ds, &test_ds, 2, &bla_cfg).unwrap();
    println!(
        "BLA: test rmse {:.5} (norm {:.5}) in {:.1}s; train final {:.5}",
        bla.test_rmse,
        bla.test_rmse_norm,
        t0.elapsed().as_secs_f64(),
        bla.report.final_stats().train_rmse_norm,
    );

    let mut rng = <rand_chacha::ChaCha12Rng as rand::SeedableRng>::seed_from_u64(seed);
    let linear = init_stable_linear(2, 1, 1, seed);
    let kan_f = KanNetwork::init(&[3, 2, 2], &SplineBasis::default_edge_basis(), &mut rng);
    let model = SsKanModel::new(linear, kan_f, None, norm).unwrap();
    let t1 = std::time::Instant::now();
    match train(model, &norm.apply(&train_ds), &config) {
        Ok((trained, report)) => {
            let f = report.final_stats();
            println!(
                "SS-KAN: initial {:.4} final train {:.5} val {:.5} ({:.1}s)",
                report.initial_train_rmse_norm,
                f.train_rmse_norm,
                f.val_rmse_norm,
                t1.elapsed().as_secs_f64()
            );
            let ev = evaluate(&trained, &test_ds).unwrap();
            println!(
                "SS-KAN test rmse {:.5} (norm {:.5}); ratio vs BLA {:.3}",
                ev.rmse,
                ev.rmse_norm,
                ev.rmse / bla.test_rmse
            );
            inspect_slices(&trained, &norm.apply(&train_ds));
        }
        Err(e) => println!("training failed: {e}"),
    }
}

fn inspect_slices(model: &SsKanModel, train_norm: &sskan::datagen::Dataset) {
    use sskan::diffengine::TrainableModel;
    use sskan::interp::{dominance, polyfit, slice, slice_grid};

    // KAN inputs over the training rollout: (x1, x2, u).
    let sim = model
        .rollout(&train_norm.u, &[0.0, 0.0])
        .unwrap();
    let n = train_norm.len();
    let mut mins = [f64::INFINITY; 3];
    let mut maxs = [f64::NEG_INFINITY; 3];
    let mut means = [0.0f64; 3];
    for k in 0..n {
        let z = [sim.x[2 * k], sim.x[2 * k + 1], train_norm.u[k]];
        for i in 0..3 {
            mins[i] = mins[i].min(z[i]);
            maxs[i] = maxs[i].max(z[i]);
            means[i] += z[i] / n as f64;
        }
    }
    println!("z ranges: {mins:?} .. {maxs:?}, means {means:?}");
    let c_row = model.linear.c();
    println!("C = [{:.4}, {:.4}]", c_row.get(0, 0), c_row.get(0, 1));
    let pos = if c_row.get(0, 0).abs() >= c_row.get(0, 1).abs() {
        0
    } else {
        1
    };
    let vel = 1 - pos;
    println!("position state: {pos}");
    let grid = slice_grid(mins[pos], maxs[pos], 512);
    let report = slice(&model.kan_f, pos, "position", &means, &grid).unwrap();
    let range_pos = report.channel_range(pos);
    let range_vel = report.channel_range(vel);
    println!(
        "slice ranges: position-update {range_pos:.4}, velocity-update {range_vel:.4}, ratio {:.3}",
        range_pos / range_vel
    );
    let fit = polyfit(&report.grid, &report.responses[vel], 3).unwrap();
    println!("cubic fit: {:?} residual {:.2e}", fit.coeffs, fit.residual_rms);
    let half_width = 0.5 * (maxs[pos] - mins[pos]);
    let shares = dominance(&fit.coeffs, half_width).unwrap();
    println!("dominance at r={half_width:.3}: {shares:?}");

    // Sign canonicalization: sigma_p orients the position state with the
    // output, sigma_q orients the velocity state via the A coupling.
    let sigma_p = c_row.get(0, pos).signum();
    let sigma_q = (sigma_p * model.linear.a().get(pos, vel)).signum();
    let canonical_cubic = sigma_q * sigma_p * fit.coeffs[3];
    println!(
        "sigma_p {sigma_p} sigma_q {sigma_q} canonical cubic {canonical_cubic:.3} (oracle sign: negative)"
    );

    // Robustness sweep: recompute the slice at 5 settings of the frozen
    // inputs spanning their observed ranges.
    let mut worst = 0.0f64;
    for s in 0..5 {
        let t = s as f64 / 4.0;
        let mut fixed = means;
        fixed[vel] = mins[vel] + t * (maxs[vel] - mins[vel]);
        fixed[2] = mins[2] + t * (maxs[2] - mins[2]);
        let alt = slice(&model.kan_f, pos, "position", &fixed, &grid).unwrap();
        let base_mean = report.responses[vel].iter().sum::<f64>() / grid.len() as f64;
        let alt_mean = alt.responses[vel].iter().sum::<f64>() / grid.len() as f64;
        let dev = report.responses[vel]
            .iter()
            .zip(&alt.responses[vel])
            .map(|(a, b)| ((a - base_mean) - (b - alt_mean)).abs())
            .fold(0.0f64, f64::max);
        worst = worst.max(dev / range_vel);
    }
    println!("robustness sweep worst relative deviation: {worst:.4}");
}
