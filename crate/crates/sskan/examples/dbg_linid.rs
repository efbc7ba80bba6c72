use sskan::datagen::{multisine, Dataset, Provenance};
use sskan::kan::KanNetwork;
use sskan::spline::SplineBasis;
use sskan::ssmodel::{init_stable_linear, FilterSpec, SsKanModel};
use sskan::trainer::{
    normalize_fit, train, AdamWParams, LrSchedule, Normalization, TrainConfig,
};

fn main() {
    // Target: a stable 2-state SISO filter realized from a transfer function.
    let target_spec = FilterSpec {
        b: vec![0.3, 0.4, 0.1, 0.0],
        a: vec![1.0, -1.3, 0.49, 0.0],
    };
    let target = target_spec.to_state_space().unwrap();
    let target_model = SsKanModel::new(
        target,
        KanNetwork::zero(&[4, 3], &SplineBasis::default_edge_basis()),
        None,
        Normalization::identity(),
    )
    .unwrap();
    let u = multisine(4096, 10.0, 3.0, 0.35, 11).unwrap();
    let y = target_model.rollout(&u, &[0.0; 3]).unwrap().y;
    let raw = Dataset {
        sample_rate: 10.0,
        u,
        y,
        provenance: Provenance::ExternalCsv,
    };
    // Keep the record in [-1, 1] natively; identity normalization
    // preserves the linear relation exactly.
    let norm = Normalization::identity();
    let data = raw.clone();
    let peak_u = data.u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let peak_y = data.y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    println!("peaks u {peak_u:.3} y {peak_y:.3}");

    for (lr, decay, epochs, batch) in [
        (1e-2, 0.99, 600, 64),
        (2e-2, 0.985, 200, 32),
        (3e-2, 0.99, 400, 64),
        (1e-2, 0.995, 1000, 128),
        (2e-2, 0.98, 200, 64),
    ] {
        let linear = init_stable_linear(2, 1, 1, 7);
        let mut model = SsKanModel::new(
            linear,
            KanNetwork::zero(&[3, 2], &SplineBasis::default_edge_basis()),
            None,
            norm,
        )
        .unwrap();
        model.normalization = norm;
        let config = TrainConfig {
            lambda_l1: 0.0,
            lambda_l2: 0.0,
            lr0: lr,
            lr_schedule: LrSchedule::ExponentialDecay { rate: decay },
            batch_size: batch,
            epochs,
            seed: 7,
            grid_update_epochs: vec![],
            adamw: AdamWParams::default(),
            train_kans: false,
            validation_fraction: 0.2,
        };
        let started = std::time::Instant::now();
        match train(model, &data, &config) {
            Ok((_, report)) => {
                let f = report.final_stats();
                println!(
                    "lr {lr} decay {decay} ep {epochs} batch {batch}: initial {:.4e} final train {:.4e} val {:.4e} ({:.1}s)",
                    report.initial_train_rmse_norm,
                    f.train_rmse_norm,
                    f.val_rmse_norm,
                    started.elapsed().as_secs_f64()
                );
            }
            Err(e) => println!("lr {lr} decay {decay} ep {epochs} batch {batch}: {e}"),
        }
    }
}
