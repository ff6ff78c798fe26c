use std::time::Instant;
use voxray::phantom::{build_dataset, PhantomSpec, Split};
use voxray::trainer::{evaluate, EvalModel, TrainConfig, Trainer};

#[test]
#[ignore]
fn tune_criterion6() {
    let dir = tempfile::tempdir().unwrap();
    let template = PhantomSpec {
        seed: 606,
        shape: [32, 32, 32],
        ..Default::default()
    };
    build_dataset(2, &template, dir.path()).unwrap();
    let mut cfg = TrainConfig {
        epochs: 50,
        decay_start: 25,
        lr: 2e-3,
        batch_size: 2,
        seed: 606,
        manifest: dir.path().join("manifest.json"),
        steps_per_epoch: Some(10),
        ..Default::default()
    };
    cfg.generator.base_channels = 6;
    cfg.discriminator_channels = 6;
    cfg.backbone.base_width = 4;
    let t0 = Instant::now();
    let mut trainer = Trainer::new(cfg.clone()).unwrap();
    let out = dir.path().join("run");
    let result = trainer.run(&out).unwrap();
    let train_time = t0.elapsed().as_secs_f64();
    let backbone = voxray::perceptual::PerceptualBackbone::seeded(cfg.backbone.clone()).unwrap();
    let report = evaluate(
        &EvalModel::Generator(&trainer.generator),
        &cfg.manifest,
        Split::Train,
        &backbone,
    )
    .unwrap();
    println!(
        "TUNE6 steps={} time={:.1}s psnr={:.2} lpips={:.2} ssim={:.3} last_gvoxel={:.4e}",
        result.steps,
        train_time,
        report.aggregate.psnr_db.mean,
        report.aggregate.lpips.mean,
        report.aggregate.ssim.mean,
        result.log.last().unwrap().g_voxel
    );
    for row in result.log.iter().step_by(50) {
        println!(
            "  step {:4} g_voxel {:.4e} g_adv {:.3} d_adv {:.3} g_pcept {:.3e}",
            row.step, row.g_voxel, row.g_adv, row.d_adv, row.g_pcept
        );
    }
}
