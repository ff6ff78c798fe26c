use std::time::Instant;
use voxray::phantom::{build_dataset, PhantomSpec};
use voxray::trainer::{TrainConfig, Trainer};

fn step_time(bc: usize, steps: usize) -> f64 {
    let dir = tempfile::tempdir().unwrap();
    let template = PhantomSpec {
        seed: 606,
        shape: [32, 32, 32],
        ..Default::default()
    };
    build_dataset(2, &template, dir.path()).unwrap();
    let mut cfg = TrainConfig {
        epochs: 1,
        decay_start: 0,
        lr: 2e-3,
        batch_size: 2,
        seed: 606,
        manifest: dir.path().join("manifest.json"),
        steps_per_epoch: Some(steps),
        ..Default::default()
    };
    cfg.decay_start = 0;
    cfg.epochs = 1;
    cfg.generator.base_channels = bc;
    cfg.discriminator_channels = bc;
    cfg.backbone.base_width = 8;
    let mut trainer = Trainer::new(cfg).unwrap();
    let t0 = Instant::now();
    trainer.run(&dir.path().join("run")).unwrap();
    t0.elapsed().as_secs_f64() / steps as f64
}

#[test]
#[ignore]
fn per_step() {
    for bc in [4, 6, 8] {
        let t = step_time(bc, 8);
        println!(
            "bc={bc}: {:.2} s/step -> 500 steps = {:.1} min",
            t,
            t * 500.0 / 60.0
        );
    }
}
