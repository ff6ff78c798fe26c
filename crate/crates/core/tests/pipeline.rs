//! End-to-end pipeline checks on desk-scale data: dataset to training to
//! evaluation, with the training-contract instrumentation.

use std::path::Path;

use voxray::discriminator::TapSource;
use voxray::graph::Graph;
use voxray::losses::{self, DaeVariant};
use voxray::phantom::{build_dataset, PhantomSpec, Split};
use voxray::trainer::{
    self, audit_from_config, evaluate, load_discriminator, load_generator, EvalModel, StepEvent,
    TrainConfig, Trainer,
};
use voxray::{SeedRng, Tensor};

fn tiny_dataset(dir: &Path, n: usize, seed: u64) -> std::path::PathBuf {
    let template = PhantomSpec {
        seed,
        shape: [32, 32, 32],
        ..Default::default()
    };
    build_dataset(n, &template, dir).unwrap();
    dir.join("manifest.json")
}

fn tiny_config(manifest: std::path::PathBuf, epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs,
        decay_start: epochs.saturating_sub(1).max(1).min(epochs - 1).max(1),
        lr: 2e-3,
        batch_size: 2,
        seed: 11,
        manifest,
        ..Default::default()
    };
    // desk-tiny widths keep each step in the tens of milliseconds
    cfg.generator.base_channels = 4;
    cfg.generator.n_levels = 4;
    cfg.generator.channel_cap = 64;
    cfg.discriminator_channels = 4;
    cfg.discriminator_cap = 32;
    cfg.backbone.base_width = 4;
    cfg.decay_start = (epochs / 2).max(1);
    if cfg.decay_start >= cfg.epochs {
        cfg.decay_start = cfg.epochs - 1;
    }
    cfg
}

#[test]
fn lr_schedule_closed_form() {
    let cfg = TrainConfig {
        epochs: 100,
        decay_start: 50,
        lr: 2e-4,
        ..Default::default()
    };
    assert_eq!(cfg.lr_at(0), 2e-4);
    assert_eq!(cfg.lr_at(49), 2e-4);
    for k in 0..50 {
        let expect = 2e-4 * (1.0 - k as f64 / 50.0);
        assert!((cfg.lr_at(50 + k) - expect).abs() < 1e-18);
    }
}

#[test]
fn config_validation() {
    let mut cfg = TrainConfig::default();
    cfg.decay_start = cfg.epochs;
    assert!(cfg.validate().is_err());
    let mut cfg = TrainConfig::default();
    cfg.lr = 0.0;
    assert!(cfg.validate().is_err());
}

#[test]
fn training_contracts_hold_over_a_short_run() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(dir.path(), 2, 3);
    let cfg = tiny_config(manifest, 3);
    let mut trainer = Trainer::new(cfg.clone()).unwrap();
    let g_hash_0 = trainer.generator.store.content_hash();
    let d_hash_0 = trainer.discriminator.store.content_hash();
    let mut events: Vec<StepEvent> = Vec::new();
    let out = dir.path().join("run");
    let result = trainer
        .run_with_observer(&out, &mut |e| events.push(e))
        .unwrap();
    assert_eq!(result.log.len(), events.len());
    assert!(result.steps >= 3);

    // alternation contract: the D update never touches G parameters, the
    // G update never touches D parameters
    let mut prev_g = g_hash_0;
    let mut prev_d = d_hash_0;
    for e in &events {
        assert_eq!(
            e.g_hash_after_d_update, prev_g,
            "D update modified G at step {}",
            e.step
        );
        assert_ne!(
            e.d_hash_after_d_update, prev_d,
            "D update was a no-op at step {}",
            e.step
        );
        assert_ne!(
            e.g_hash_after_g_update, e.g_hash_after_d_update,
            "G update no-op"
        );
        assert_eq!(
            e.d_hash_after_g_update, e.d_hash_after_d_update,
            "G update modified D at step {}",
            e.step
        );
        prev_g = e.g_hash_after_g_update;
        prev_d = e.d_hash_after_g_update;
        // crop alignment: decoder slice and target slice share the record
        let dec = e.crop_for_decoder.as_ref().expect("dae-b run must crop");
        let tgt = e.crop_for_targets.as_ref().unwrap();
        assert_eq!(dec, tgt, "crop records diverged at step {}", e.step);
    }

    // loss log completeness: the weighted totals recompose from the
    // logged raw terms
    for row in &result.log {
        let w = &cfg.weights;
        let g_expect = w.lambda1 * row.g_adv
            + w.lambda2 * row.g_voxel
            + w.lambda3 * row.g_pm
            + w.lambda4 * row.g_pcept;
        assert!(
            (row.g_total - g_expect).abs() <= 1e-6 * (1.0 + g_expect.abs()),
            "step {}: g_total {} vs recomposed {}",
            row.step,
            row.g_total,
            g_expect
        );
        let d_expect = w.lambda1 * row.d_adv + w.lambda2 * row.d_voxel + w.lambda4 * row.d_pcept;
        assert!(
            (row.d_total - d_expect).abs() <= 1e-6 * (1.0 + d_expect.abs()),
            "step {}: d_total {} vs recomposed {}",
            row.step,
            row.d_total,
            d_expect
        );
    }
    // the CSV on disk mirrors the in-memory log
    let text = std::fs::read_to_string(&result.loss_log_path).unwrap();
    assert_eq!(text.lines().count(), result.log.len() + 1);
    assert!(text.starts_with("step,epoch,lr,"));
}

#[test]
fn real_only_rule_no_decoder_gradients_from_generated_passes() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(dir.path(), 2, 5);
    let cfg = tiny_config(manifest, 2);
    let trainer = Trainer::new(cfg).unwrap();
    let d = &trainer.discriminator;
    let decoder_ids: Vec<usize> = d
        .store
        .iter()
        .enumerate()
        .filter(|(_, (n, _))| n.starts_with("dec_part") || n.starts_with("dec_global"))
        .map(|(i, _)| i)
        .collect();
    assert!(!decoder_ids.is_empty());
    // generated-image pass: adversarial loss only, full backward
    let mut rng = SeedRng::new(9);
    let fake = Tensor::<f32>::rand_uniform(&[1, 1, 32, 32, 32], -1.0, 1.0, &mut rng);
    let xf = Tensor::<f32>::rand_uniform(&[1, 1, 32, 32], -1.0, 1.0, &mut rng);
    let xl = Tensor::<f32>::rand_uniform(&[1, 1, 32, 32], -1.0, 1.0, &mut rng);
    let mut g = Graph::new();
    let fake_var = g.constant(fake);
    let vars = d
        .forward_graph(&mut g, fake_var, &xf, Some(&xl), true)
        .unwrap();
    let zeros = g.constant(Tensor::zeros(g.shape(vars.score)));
    let loss = g.mse_loss(vars.score, zeros);
    let grads = g.backward(loss);
    assert!(!grads.by_param.is_empty(), "encoder must receive gradients");
    for id in &decoder_ids {
        assert!(
            !grads.by_param.contains_key(id),
            "decoder parameter {id} received gradient from a generated pass"
        );
    }
}

#[test]
fn determinism_same_seed_same_logs_and_resume_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(dir.path(), 2, 7);
    let cfg = tiny_config(manifest.clone(), 4);

    let mut t1 = Trainer::new(cfg.clone()).unwrap();
    let r1 = t1.run(&dir.path().join("a")).unwrap();
    let mut t2 = Trainer::new(cfg.clone()).unwrap();
    let r2 = t2.run(&dir.path().join("b")).unwrap();
    assert_eq!(r1.log.len(), r2.log.len());
    for (a, b) in r1.log.iter().zip(&r2.log) {
        assert!((a.g_total - b.g_total).abs() < 1e-6);
        assert!((a.d_total - b.d_total).abs() < 1e-6);
    }
    assert_eq!(
        t1.generator.store.content_hash(),
        t2.generator.store.content_hash(),
        "same seed must give identical weights"
    );

    // resume: 2 epochs + checkpoint + 2 more == 4 straight epochs
    let mut cfg_half = cfg.clone();
    cfg_half.epochs = 2;
    cfg_half.decay_start = 1;
    let mut cfg_full = cfg.clone();
    cfg_full.epochs = 4;
    cfg_full.decay_start = 1;
    let mut t_full = Trainer::new(cfg_full.clone()).unwrap();
    let rf = t_full.run(&dir.path().join("full")).unwrap();
    let mut t_half = Trainer::new(cfg_half).unwrap();
    t_half.run(&dir.path().join("half")).unwrap();
    // lift the saved state into the 4-epoch schedule
    let ck = dir.path().join("half").join("ckpt_2");
    let (meta, tensors) = voxray::checkpoint::load(&ck).unwrap();
    let mut meta2 = meta.clone();
    meta2["config"] = serde_json::to_value(&cfg_full).unwrap();
    let refs: Vec<(String, &Tensor<f32>)> = tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
    let ck2 = dir.path().join("half").join("ckpt_2_resume");
    voxray::checkpoint::save(&ck2, &meta2, &refs).unwrap();
    let mut t_resumed = Trainer::from_checkpoint(&ck2).unwrap();
    let rr = t_resumed.run(&dir.path().join("resumed")).unwrap();
    assert_eq!(
        t_resumed.generator.store.content_hash(),
        t_full.generator.store.content_hash(),
        "resumed run must match the uninterrupted run exactly"
    );
    let tail = &rf.log[rf.log.len() - rr.log.len()..];
    for (a, b) in tail.iter().zip(&rr.log) {
        assert_eq!(a.step, b.step);
        assert!((a.g_total - b.g_total).abs() < 1e-9);
    }
}

#[test]
fn identity_hook_evaluation_hits_the_caps() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(dir.path(), 3, 13);
    let backbone = voxray::perceptual::PerceptualBackbone::seeded(Default::default()).unwrap();
    let report = evaluate(&EvalModel::IdentityHook, &manifest, Split::Train, &backbone).unwrap();
    for row in &report.per_sample {
        assert_eq!(row.psnr_db, voxray::metrics::PSNR_CAP_DB);
        assert!((row.ssim - 1.0).abs() < 1e-9);
        assert_eq!(row.lpips, 0.0);
        assert_eq!(row.nrmse, 0.0);
    }
    // aggregate equals brute force over rows
    let mean: f64 =
        report.per_sample.iter().map(|r| r.psnr_db).sum::<f64>() / report.per_sample.len() as f64;
    assert!((report.aggregate.psnr_db.mean - mean).abs() < 1e-12);
}

#[test]
fn short_training_improves_over_untrained_and_conditions_on_xrays() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(dir.path(), 2, 17);
    let mut cfg = tiny_config(manifest.clone(), 10);
    cfg.steps_per_epoch = Some(4);
    cfg.lr = 2e-3;
    cfg.decay_start = 9;
    let mut trainer = Trainer::new(cfg.clone()).unwrap();
    let backbone = voxray::perceptual::PerceptualBackbone::seeded(cfg.backbone.clone()).unwrap();
    let untrained = evaluate(
        &EvalModel::Generator(&trainer.generator),
        &manifest,
        Split::Train,
        &backbone,
    )
    .unwrap();
    let out = dir.path().join("run");
    let result = trainer.run(&out).unwrap();
    let trained = evaluate(
        &EvalModel::Generator(&trainer.generator),
        &manifest,
        Split::Train,
        &backbone,
    )
    .unwrap();
    assert!(
        trained.aggregate.psnr_db.mean > untrained.aggregate.psnr_db.mean + 1.0,
        "training must improve PSNR: {} -> {}",
        untrained.aggregate.psnr_db.mean,
        trained.aggregate.psnr_db.mean
    );
    // voxel loss falls over epoch medians (coarse sanity)
    let first = result.log.first().unwrap().g_voxel;
    let last = result.log.last().unwrap().g_voxel;
    assert!(last < first, "voxel loss did not fall: {first} -> {last}");

    // a trained, non-degenerate D scores differently when the
    // conditioning X-ray channel is permuted
    let d = load_discriminator(&result.final_checkpoint).unwrap();
    let samples = voxray::phantom::load_manifest(&manifest).unwrap();
    let s0 = voxray::phantom::load_sample(dir.path(), &samples[0]).unwrap();
    let s1 = voxray::phantom::load_sample(dir.path(), &samples[1]).unwrap();
    let ct = s0.ct.data().reshaped(&[1, 1, 32, 32, 32]);
    let f0 = s0.xrays.frontal.reshaped(&[1, 1, 32, 32]);
    let l0 = s0.xrays.lateral.as_ref().unwrap().reshaped(&[1, 1, 32, 32]);
    let f1 = s1.xrays.frontal.reshaped(&[1, 1, 32, 32]);
    let a = d
        .discriminate(&ct, &f0, Some(&l0), TapSource::Real)
        .unwrap();
    let b = d
        .discriminate(&ct, &f1, Some(&l0), TapSource::Real)
        .unwrap();
    assert_ne!(
        a.score_map, b.score_map,
        "conditioning is ignored by the trained D"
    );

    // the generator checkpoint reloads and reproduces its outputs
    let (g2, _) = load_generator(&result.final_checkpoint).unwrap();
    let got = g2.forward_pair(&s0.xrays).unwrap();
    let want = trainer.generator.forward_pair(&s0.xrays).unwrap();
    assert_eq!(got, want);
}

#[test]
fn audit_reproduces_the_selection_logic() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(dir.path(), 2, 23);
    let mut cfg = tiny_config(manifest, 2);
    // paper-default weighting: both principles pass on the seeded batch
    let report = audit_from_config(&cfg).unwrap();
    assert!(
        report.principle1_pass,
        "principle 1 failed: {}",
        report.summary()
    );
    assert!(
        report.principle2_pass,
        "principle 2 failed: {}",
        report.summary()
    );
    assert!(
        report.drift.is_empty(),
        "unexpected drift: {:?}",
        report.drift
    );
    // alternative group: report still emits, drift flagged
    cfg.weights.lambda2 = 100.0;
    cfg.weights.lambda4 = 0.1;
    let drifted = audit_from_config(&cfg).unwrap();
    assert!(!drifted.drift.is_empty(), "magnitude drift must be flagged");
    // forced imbalance: principle 2 fails
    let mut cfg_bad = tiny_config(tiny_dataset(&dir.path().join("d2"), 2, 23), 2);
    cfg_bad.weights.lambda4 *= 1000.0;
    let bad = audit_from_config(&cfg_bad).unwrap();
    assert!(
        !bad.principle2_pass,
        "inflated lambda4 must fail principle 2: {}",
        bad.summary()
    );
    // ratios recompute from the logged raw values
    let w = &cfg_bad.weights;
    let expect_p2 = ((w.lambda2 * bad.raw_d_voxel) / (w.lambda4 * bad.raw_d_pcept)).log10();
    assert!((bad.ratio_p2 - expect_p2).abs() < 1e-12);
}

#[test]
fn ablation_grid_of_one_reduces_to_train_plus_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(dir.path(), 3, 29);
    let cfg = tiny_config(manifest.clone(), 2);
    let grid = vec![trainer::AblationVariant {
        name: "solo".into(),
        variant: DaeVariant::None,
        g3dpcept: false,
        sgg: false,
    }];
    let table = trainer::run_ablation(&cfg, &grid, &dir.path().join("ablate")).unwrap();
    assert_eq!(table.rows.len(), 1);
    assert!(table.rows[0].psnr_mean.is_finite());
    // rows are seed-reproducible
    let table2 = trainer::run_ablation(&cfg, &grid, &dir.path().join("ablate2")).unwrap();
    assert_eq!(table.rows[0].psnr_mean, table2.rows[0].psnr_mean);
    assert_eq!(table.rows[0].lpips_mean, table2.rows[0].lpips_mean);
    // the no-DAE variant constructs no simple decoders
    let v = trainer::variant_config(&cfg, &grid[0]);
    let t = Trainer::new(v).unwrap();
    assert_eq!(t.discriminator.decoder_param_count(), 0);
    // json artifact exists
    assert!(dir.path().join("ablate").join("ablation.json").exists());
    let _ = losses::LossWeights::default();
}

#[test]
fn non_finite_losses_abort_with_a_diagnostic_dump() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(dir.path(), 2, 37);
    let mut cfg = tiny_config(manifest, 20);
    // an absurd learning rate blows the unbounded critic scores up
    // within a few steps
    cfg.lr = 1e12;
    cfg.steps_per_epoch = Some(4);
    let out = dir.path().join("run");
    let mut trainer = Trainer::new(cfg).unwrap();
    let err = match trainer.run(&out) {
        Ok(_) => panic!("expected a non-finite abort, but the run succeeded"),
        Err(e) => e,
    };
    match err {
        voxray::Error::NonFinite { term, step } => {
            let diag_path = out.join("diagnostic.json");
            assert!(diag_path.exists(), "diagnostic dump missing");
            let diag: serde_json::Value =
                serde_json::from_str(&std::fs::read_to_string(&diag_path).unwrap()).unwrap();
            assert_eq!(diag["term"], term.as_str());
            assert_eq!(diag["step"], step);
            assert!(diag["batch_ids"].as_array().unwrap().len() <= 2);
        }
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn checkpoint_cadence_writes_intermediate_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(dir.path(), 2, 41);
    let mut cfg = tiny_config(manifest, 4);
    cfg.checkpoint_every = 2;
    let out = dir.path().join("run");
    Trainer::new(cfg).unwrap().run(&out).unwrap();
    assert!(out.join("ckpt_2").exists());
    assert!(out.join("ckpt_4").exists());
}
