use std::time::Instant;
use voxray::losses::DaeVariant;
use voxray::phantom::{build_dataset, PhantomSpec};
use voxray::trainer::{TrainConfig, Trainer};

#[test]
#[ignore]
fn probe64() {
    let dir = tempfile::tempdir().unwrap();
    let template = PhantomSpec {
        seed: 707,
        shape: [64, 64, 64],
        ..Default::default()
    };
    build_dataset(4, &template, dir.path()).unwrap();
    for (name, bc, variant, pcept, sgg) in [
        ("full bc4", 4usize, DaeVariant::DaeB, true, true),
        ("base bc4", 4, DaeVariant::None, false, false),
        ("full bc6", 6, DaeVariant::DaeB, true, true),
    ] {
        let mut cfg = TrainConfig {
            epochs: 1,
            decay_start: 0,
            lr: 1e-3,
            batch_size: 2,
            seed: 707,
            manifest: dir.path().join("manifest.json"),
            steps_per_epoch: Some(3),
            ..Default::default()
        };
        cfg.generator.base_channels = bc;
        cfg.generator.sgg_enabled = sgg;
        cfg.discriminator_channels = bc;
        cfg.backbone.base_width = 4;
        cfg.weights.variant = variant;
        cfg.weights.g3dpcept_enabled = pcept;
        let mut trainer = Trainer::new(cfg).unwrap();
        let t0 = Instant::now();
        trainer
            .run(&dir.path().join(format!("run-{bc}-{name}")))
            .unwrap();
        let per = t0.elapsed().as_secs_f64() / 3.0;
        println!(
            "64^3 {name}: {per:.2} s/step -> 700 steps = {:.0} min",
            per * 700.0 / 60.0
        );
    }
}
